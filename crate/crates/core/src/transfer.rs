//! Feed-forward transfer network: a small U-Net with a reflection-padded
//! encoder, residual core, upsampling decoder and an E1 skip into the head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{archive, he_kernel, Bound, Graph, ParamSet, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::{compose_region, gaussian_fusion_mask, Image, RegionMask, SoftMask};

pub const NORM_EPS: f64 = 1e-5;
pub const RESIDUAL_BLOCKS: usize = 4;
/// Smallest side accepted by the network (two stride-2 stages plus context).
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetScale {
    Desk,
    Full,
}

impl NetScale {
    fn width(self, full: usize) -> usize {
        match self {
            NetScale::Full => full,
            NetScale::Desk => full / 2,
        }
    }
}

/// One convolution of the schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub norm: bool,
}

/// Every convolution of the network in forward order.
pub fn schedule(scale: NetScale) -> Vec<ConvSpec> {
    let (c1, c2, c3) = (scale.width(32), scale.width(64), scale.width(128));
    let conv = |name: String, in_c, out_c, kernel, norm| ConvSpec { name, in_c, out_c, kernel, norm };
    let mut s =
        vec![conv("e1".into(), 3, c1, 9, true), conv("e2".into(), c1, c2, 3, true), conv("e3".into(), c2, c3, 3, true)];
    for b in 1..=RESIDUAL_BLOCKS {
        s.push(conv(format!("res{b}a"), c3, c3, 3, true));
        s.push(conv(format!("res{b}b"), c3, c3, 3, true));
    }
    s.push(conv("d1".into(), c3, c2, 3, true));
    s.push(conv("d2".into(), c2, c1, 3, true));
    s.push(conv("h1".into(), 2 * c1, c1, 3, true));
    s.push(conv("h2".into(), c1, 3, 9, false));
    s
}

fn weight(layer: &str) -> String {
    format!("tn.{layer}.weight")
}
fn gamma(layer: &str) -> String {
    format!("tn.{layer}.gamma")
}
fn beta(layer: &str) -> String {
    format!("tn.{layer}.beta")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferNetParams<T = f32> {
    pub scale: NetScale,
    pub params: ParamSet<T>,
}

pub fn init_transfer_net(seed: u64, scale: NetScale) -> TransferNetParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for c in schedule(scale) {
        params.insert(weight(&c.name), he_kernel(&mut rng, c.out_c, c.in_c, c.kernel));
        if c.norm {
            params.insert(gamma(&c.name), Tensor::full(vec![c.out_c], 1.0));
            params.insert(beta(&c.name), Tensor::zeros(vec![c.out_c]));
        }
    }
    TransferNetParams { scale, params }
}

impl TransferNetParams<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        archive::save(&self.params, path)
    }

    /// Loads an archive, inferring the scale from its layout.
    pub fn load(path: &Path) -> Result<Self> {
        let params = archive::load(path)?;
        for scale in [NetScale::Desk, NetScale::Full] {
            if init_transfer_net(0, scale).params.check_layout(&params).is_ok() {
                return Ok(Self { scale, params });
            }
        }
        Err(Error::WeightsMismatch(format!("{} does not hold a transfer network", path.display())))
    }
}

impl<T: Real> TransferNetParams<T> {
    pub fn cast<U: Real>(&self) -> TransferNetParams<U> {
        TransferNetParams { scale: self.scale, params: self.params.cast() }
    }

    pub fn numel(&self) -> usize {
        self.params.numel()
    }
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::InputTooSmall { height: h, width: w, min: MIN_SIDE });
    }
    if !h.is_multiple_of(4) || !w.is_multiple_of(4) {
        return Err(Error::shape(format!("transfer net needs sides divisible by 4, got {h}x{w}")));
    }
    Ok(())
}

fn block<T: Real>(g: &mut Graph<T>, p: &Bound<'_, T>, layer: &str, x: Var, stride: usize, relu: bool) -> Result<Var> {
    let y = g.conv2d(x, p.get(&weight(layer)), stride)?;
    let y = g.instance_norm(y, p.get(&gamma(layer)), p.get(&beta(layer)), NORM_EPS)?;
    Ok(if relu { g.relu(y) } else { y })
}

/// Network output in `[0, 1]` for a `1×3×H×W` input already scaled to `[-1, 1]`.
pub fn net_forward<T: Real>(g: &mut Graph<T>, p: &Bound<'_, T>, x: Var) -> Result<Var> {
    let (_, c, h, w) = g.value(x).dims4()?;
    if c != 3 {
        return Err(Error::ChannelMismatch { left: c, right: 3 });
    }
    check_dims(h, w)?;
    let e1 = block(g, p, "e1", x, 1, true)?;
    let e2 = block(g, p, "e2", e1, 2, true)?;
    let mut r = block(g, p, "e3", e2, 2, true)?;
    for b in 1..=RESIDUAL_BLOCKS {
        let a = block(g, p, &format!("res{b}a"), r, 1, true)?;
        let y = block(g, p, &format!("res{b}b"), a, 1, false)?;
        r = g.add(r, y)?;
    }
    let u1 = g.upsample2(r)?;
    let d1 = block(g, p, "d1", u1, 1, true)?;
    let u2 = g.upsample2(d1)?;
    let d2 = block(g, p, "d2", u2, 1, true)?;
    let skip = g.concat(e1, d2)?;
    let h1 = block(g, p, "h1", skip, 1, true)?;
    let h2 = g.conv2d(h1, p.get(&weight("h2")), 1)?;
    let t = g.tanh(h2);
    let half = g.scale(t, T::lit(0.5));
    Ok(g.add_scalar(half, T::lit(0.5)))
}

/// `[0, 1]` image as a `1×3×H×W` tensor on `[-1, 1]`.
pub fn net_input<T: Real>(img: &Image) -> Tensor<T> {
    let t = img.to_rgb().to_tensor::<T>();
    let shape = t.shape().to_vec();
    let data = t.data().iter().map(|&v| v * T::lit(2.0) - T::one()).collect();
    Tensor::new(shape, data).expect("scaled image stays finite")
}

/// Constant tensors realising `w·patch + (1 − w)·background` inside a graph.
#[derive(Debug, Clone)]
pub struct Fusion<T> {
    weights: Tensor<T>,
    background_part: Tensor<T>,
}

impl<T: Real> Fusion<T> {
    pub fn new(background: &Image, mask: &SoftMask) -> Result<Self> {
        let bg = background.to_rgb();
        if mask.height() != bg.height() || mask.width() != bg.width() {
            return Err(Error::shape("fusion mask and background differ in size"));
        }
        let plane = bg.height() * bg.width();
        let mut weights = Vec::with_capacity(3 * plane);
        let mut background_part = Vec::with_capacity(3 * plane);
        let bgt = bg.to_tensor::<f32>();
        for c in 0..3 {
            for (i, &w) in mask.weights().iter().enumerate() {
                weights.push(T::lit(w as f64));
                background_part.push(T::lit(((1.0 - w) * bgt.data()[c * plane + i]) as f64));
            }
        }
        let shape = vec![1, 3, bg.height(), bg.width()];
        Ok(Self {
            weights: Tensor::new(shape.clone(), weights)?,
            background_part: Tensor::new(shape, background_part)?,
        })
    }

    pub fn apply(&self, g: &mut Graph<T>, patch: Var) -> Result<Var> {
        let w = g.constant(self.weights.clone());
        let b = g.constant(self.background_part.clone());
        let wp = g.mul(w, patch)?;
        g.add(wp, b)
    }
}

/// Runs the network on `matched` and fuses its output into `background` over
/// `region` with Gaussian weights of width `sigma`.
pub fn transfer_forward(
    params: &TransferNetParams,
    matched: &Image,
    background: &Image,
    region: &RegionMask,
    sigma: f64,
) -> Result<Image> {
    check_dims(matched.height(), matched.width())?;
    let mask = gaussian_fusion_mask(region, sigma)?;
    let mut g = Graph::new();
    let p = params.params.bind(&mut g, false);
    let x = g.constant(net_input(matched));
    let y = net_forward(&mut g, &p, x)?;
    let out = Image::from_tensor(g.value(y))?;
    let bg = if background.channels() == 3 { background.clone() } else { background.to_rgb() };
    compose_region(&bg, &out, &mask)
}
