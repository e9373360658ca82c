use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{archive, he_kernel, Bound, Graph, ParamSet, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::transfer::{NetScale, NORM_EPS};

use super::CropSpec;

/// Output stride of the low-level backbone tap.
pub const LOW_STRIDE: usize = 4;
/// Output stride of the high-level backbone tap.
pub const HIGH_STRIDE: usize = 16;
/// Output stride of the branch.
pub const BRANCH_STRIDE: usize = 2;
pub const CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Instance,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegConv {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub norm: Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Stage {
    mid: usize,
    out: usize,
    units: usize,
    stride: usize,
}

struct Widths {
    stem: usize,
    stages: [Stage; 4],
    branch_units: usize,
    high_proj: usize,
    low_proj: usize,
    branch_proj: usize,
    fuse_low: usize,
    fuse_branch: usize,
}

fn widths(scale: NetScale) -> Widths {
    let (div, units) = match scale {
        NetScale::Full => (1, [3, 4, 6, 3]),
        NetScale::Desk => (8, [2, 2, 2, 2]),
    };
    let st =
        |mid: usize, out: usize, i: usize, stride| Stage { mid: mid / div, out: out / div, units: units[i], stride };
    Widths {
        stem: 64 / div,
        stages: [st(64, 256, 0, 1), st(128, 512, 1, 2), st(256, 1024, 2, 2), st(512, 2048, 3, 1)],
        branch_units: if scale == NetScale::Full { 3 } else { 1 },
        high_proj: 256 / div,
        low_proj: 48 / div,
        branch_proj: 48 / div,
        fuse_low: 256 / div,
        fuse_branch: 128 / div,
    }
}

fn bottleneck(out: &mut Vec<SegConv>, prefix: &str, in_c: usize, s: Stage, first: bool, norm: Norm) {
    let conv = |name: String, in_c, out_c, kernel| SegConv { name, in_c, out_c, kernel, norm };
    out.push(conv(format!("{prefix}.reduce"), in_c, s.mid, 1));
    out.push(conv(format!("{prefix}.spatial"), s.mid, s.mid, 3));
    out.push(conv(format!("{prefix}.expand"), s.mid, s.out, 1));
    if first && (in_c != s.out || s.stride != 1) {
        out.push(conv(format!("{prefix}.shortcut"), in_c, s.out, 1));
    }
}

/// Every convolution of the network; the backbone first, then the branch,
/// then the decoder.
pub fn seg_schedule(scale: NetScale) -> Vec<SegConv> {
    let w = widths(scale);
    let mut s = Vec::new();
    let inorm =
        |name: &str, in_c, out_c, kernel| SegConv { name: name.into(), in_c, out_c, kernel, norm: Norm::Instance };
    s.push(inorm("backbone.stem", 3, w.stem, 7));
    s.push(inorm("backbone.pool", w.stem, w.stem, 3));
    let mut c = w.stem;
    for (i, st) in w.stages.iter().enumerate() {
        for u in 0..st.units {
            bottleneck(&mut s, &format!("backbone.layer{}.{u}", i + 1), c, *st, u == 0, Norm::Instance);
            c = st.out;
        }
    }
    let bias = |name: &str, in_c, out_c, kernel| SegConv { name: name.into(), in_c, out_c, kernel, norm: Norm::Bias };
    s.push(bias("branch.stem", 3, w.stem, 7));
    let bstage = Stage { units: w.branch_units, stride: 1, ..w.stages[0] };
    let mut bc = w.stem;
    for u in 0..bstage.units {
        bottleneck(&mut s, &format!("branch.layer1.{u}"), bc, bstage, u == 0, Norm::Bias);
        bc = bstage.out;
    }
    let high = w.stages[3].out;
    let low = w.stages[0].out;
    s.push(bias("decoder.high", high, w.high_proj, 1));
    s.push(bias("decoder.low", low, w.low_proj, 1));
    s.push(bias("decoder.fuse_low", w.high_proj + w.low_proj, w.fuse_low, 3));
    s.push(bias("decoder.branch", bc, w.branch_proj, 1));
    s.push(bias("decoder.fuse_branch", w.fuse_low + w.branch_proj, w.fuse_branch, 3));
    s.push(bias("decoder.classifier", w.fuse_branch, CLASSES, 1));
    s
}

fn weight(layer: &str) -> String {
    format!("bl.{layer}.weight")
}
fn gamma(layer: &str) -> String {
    format!("bl.{layer}.gamma")
}
fn beta(layer: &str) -> String {
    format!("bl.{layer}.beta")
}
fn bias(layer: &str) -> String {
    format!("bl.{layer}.bias")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNetParams<T = f32> {
    pub scale: NetScale,
    pub params: ParamSet<T>,
}

pub fn init_buttonlab(seed: u64, scale: NetScale) -> SegNetParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for c in seg_schedule(scale) {
        params.insert(weight(&c.name), he_kernel(&mut rng, c.out_c, c.in_c, c.kernel));
        match c.norm {
            Norm::Instance => {
                params.insert(gamma(&c.name), Tensor::full(vec![c.out_c], 1.0));
                params.insert(beta(&c.name), Tensor::zeros(vec![c.out_c]));
            }
            Norm::Bias => params.insert(bias(&c.name), Tensor::zeros(vec![c.out_c])),
        }
    }
    SegNetParams { scale, params }
}

impl SegNetParams<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        archive::save(&self.params, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params = archive::load(path)?;
        for scale in [NetScale::Desk, NetScale::Full] {
            if init_buttonlab(0, scale).params.check_layout(&params).is_ok() {
                return Ok(Self { scale, params });
            }
        }
        Err(Error::WeightsMismatch(format!("{} does not hold a segmentation network", path.display())))
    }
}

impl<T: Real> SegNetParams<T> {
    pub fn cast<U: Real>(&self) -> SegNetParams<U> {
        SegNetParams { scale: self.scale, params: self.params.cast() }
    }

    pub fn numel(&self) -> usize {
        self.params.numel()
    }
}

struct Ctx<'g, 'p, T> {
    g: &'g mut Graph<T>,
    p: &'g Bound<'p, T>,
}

impl<T: Real> Ctx<'_, '_, T> {
    fn conv(&mut self, layer: &str, x: Var, stride: usize, relu: bool) -> Result<Var> {
        let y = self.g.conv2d(x, self.p.get(&weight(layer)), stride)?;
        let y = if self.p.has(&bias(layer)) {
            self.g.channel_bias(y, self.p.get(&bias(layer)))?
        } else {
            self.g.instance_norm(y, self.p.get(&gamma(layer)), self.p.get(&beta(layer)), NORM_EPS)?
        };
        Ok(if relu { self.g.relu(y) } else { y })
    }

    fn unit(&mut self, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let a = self.conv(&format!("{prefix}.reduce"), x, 1, true)?;
        let b = self.conv(&format!("{prefix}.spatial"), a, stride, true)?;
        let c = self.conv(&format!("{prefix}.expand"), b, 1, false)?;
        let short = format!("{prefix}.shortcut");
        let skip = if self.p.has(&weight(&short)) { self.conv(&short, x, stride, false)? } else { x };
        let sum = self.g.add(c, skip)?;
        Ok(self.g.relu(sum))
    }

    fn stage(&mut self, prefix: &str, mut x: Var, st: Stage) -> Result<Var> {
        for u in 0..st.units {
            x = self.unit(&format!("{prefix}.{u}"), x, if u == 0 { st.stride } else { 1 })?;
        }
        Ok(x)
    }

    fn crop_to(&mut self, x: Var, crop: Option<CropSpec>, stride: usize) -> Result<Var> {
        match crop {
            None => Ok(x),
            Some(c) => self.g.crop(x, c.top / stride, c.left / stride, c.height / stride, c.width / stride),
        }
    }

    fn upsample(&mut self, mut x: Var, times: usize) -> Result<Var> {
        for _ in 0..times {
            x = self.g.upsample2(x)?;
        }
        Ok(x)
    }
}

/// Logits `1×2×h×w` over the crop extent (the whole image without a crop).
/// `image` is the full `1×3×H×W` input; `branch_input` is the crop block, or
/// the whole image when `crop` is `None`.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    scale: NetScale,
    image: Var,
    branch_input: Var,
    crop: Option<CropSpec>,
) -> Result<Var> {
    let w = widths(scale);
    let mut cx = Ctx { g, p };
    let x = cx.conv("backbone.stem", image, 2, true)?;
    let mut x = cx.conv("backbone.pool", x, 2, true)?;
    let mut low = x;
    for (i, st) in w.stages.iter().enumerate() {
        x = cx.stage(&format!("backbone.layer{}", i + 1), x, *st)?;
        if i == 0 {
            low = x;
        }
    }
    let b = cx.conv("branch.stem", branch_input, 2, true)?;
    let bstage = Stage { units: w.branch_units, stride: 1, ..w.stages[0] };
    let b = cx.stage("branch.layer1", b, bstage)?;

    let high = cx.crop_to(x, crop, HIGH_STRIDE)?;
    let low = cx.crop_to(low, crop, LOW_STRIDE)?;
    let h = cx.conv("decoder.high", high, 1, true)?;
    let h = cx.upsample(h, 2)?;
    let l = cx.conv("decoder.low", low, 1, true)?;
    let f = cx.g.concat(h, l)?;
    let f = cx.conv("decoder.fuse_low", f, 1, true)?;
    let f = cx.upsample(f, 1)?;
    let bp = cx.conv("decoder.branch", b, 1, true)?;
    let f = cx.g.concat(f, bp)?;
    let f = cx.conv("decoder.fuse_branch", f, 1, true)?;
    let f = cx.upsample(f, 1)?;
    cx.conv("decoder.classifier", f, 1, false)
}
