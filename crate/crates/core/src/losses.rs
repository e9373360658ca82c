//! Perceptual losses for defect style transfer: content, Gram style,
//! feature-space histogram and total variation, plus the weighted region loss
//! that combines them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{BoundExtractor, FeatureExtractor, FeatureStack};
use crate::imaging::{BBox, Image, RegionMask};

/// Bins per channel for feature-space histogram matching.
pub const FEATURE_BINS: usize = 256;
/// Context margin around a region's bounding box.
pub const REGION_MARGIN: usize = 8;
/// Smallest crop side the region loss accepts.
pub const MIN_CROP: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub content: f64,
    pub style: f64,
    pub hist: f64,
    pub tv: f64,
}

impl LossWeights {
    pub const STANDARD: LossWeights = LossWeights { content: 1e5, style: 2.5e-4, hist: 10.0, tv: 1.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("content", self.content), ("style", self.style), ("hist", self.hist), ("tv", self.tv)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidConfig(format!("loss weight `{name}` must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::STANDARD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub content: f64,
    pub style: f64,
    pub hist: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_terms(content: f64, style: f64, hist: f64, tv: f64, w: &LossWeights) -> Self {
        let total = w.content * content + w.style * style + w.hist * hist + w.tv * tv;
        Self { content, style, hist, tv, total }
    }
}

/// Which extractor taps feed which loss term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossTaps {
    pub content: String,
    pub style: Vec<String>,
    pub hist: Vec<String>,
}

impl Default for LossTaps {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|t| (*t).to_owned()).collect();
        Self { content: "t2".into(), style: s(&["t1", "t2", "t3", "t4"]), hist: s(&["t1", "t4"]) }
    }
}

impl LossTaps {
    /// Every tap any term needs, without duplicates.
    pub fn all(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in std::iter::once(&self.content).chain(&self.style).chain(&self.hist) {
            if !out.contains(&t.as_str()) {
                out.push(t);
            }
        }
        out
    }
}

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// `(1/n)·‖a − b‖²`.
fn mean_sq_diff<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b)?;
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

fn sum_all<T: Real>(g: &mut Graph<T>, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    };
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

pub fn content_loss<T: Real>(g: &mut Graph<T>, fy_hat: &FeatureStack, fy: &FeatureStack, tap: &str) -> Result<Var> {
    let (a, b) = (fy_hat.get(tap)?, fy.get(tap)?);
    mean_sq_diff(g, a, b)
}

/// `ψψᵀ / (C·H·W)` for a `C×H×W` or `1×C×H×W` feature map.
pub fn gram<T: Real>(g: &mut Graph<T>, feature: Var) -> Result<Var> {
    let (c, hw) = match *g.shape(feature) {
        [c, h, w] | [1, c, h, w] => (c, h * w),
        ref s => return Err(Error::shape(format!("gram expects CHW features, got {s:?}"))),
    };
    let psi = g.reshape(feature, vec![c, hw])?;
    let psi_t = g.transpose(psi)?;
    let prod = g.matmul(psi, psi_t)?;
    Ok(g.scale(prod, T::lit(1.0 / (c * hw) as f64)))
}

pub fn style_loss<T: Real>(g: &mut Graph<T>, fy_hat: &FeatureStack, fs: &FeatureStack, taps: &[String]) -> Result<Var> {
    let mut terms = Vec::with_capacity(taps.len());
    for tap in taps {
        let (a, b) = (fy_hat.get(tap)?, fs.get(tap)?);
        same_shape(g, a, b)?;
        let ga = gram(g, a)?;
        let gb = gram(g, b)?;
        let d = g.sub(ga, gb)?;
        let sq = g.square(d);
        terms.push(g.sum(sq));
    }
    sum_all(g, terms)
}

pub fn gatys_loss(content: f64, style: f64, w: &LossWeights) -> f64 {
    w.content * content + w.style * style
}

fn channel_split(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [c, h, w] | [1, c, h, w] => Ok((c, h * w)),
        ref s => Err(Error::shape(format!("expected CHW features, got {s:?}"))),
    }
}

fn bin_in_range(v: f64, lo: f64, hi: f64) -> usize {
    let b = ((v - lo) / (hi - lo) * FEATURE_BINS as f64).floor().max(0.0) as usize;
    b.min(FEATURE_BINS - 1)
}

fn bin_counts(values: &[f64], lo: f64, hi: f64) -> Vec<u64> {
    let mut counts = vec![0u64; FEATURE_BINS];
    for &v in values {
        counts[bin_in_range(v, lo, hi)] += 1;
    }
    counts
}

fn exclusive_prefix(counts: &[u64]) -> Vec<u64> {
    counts
        .iter()
        .scan(0u64, |acc, &c| {
            let before = *acc;
            *acc += c;
            Some(before)
        })
        .collect()
}

/// Piecewise-linear CDF matching: the source CDF and the inverse reference
/// CDF are both interpolated linearly inside each bin, so a distribution
/// matched to itself is reproduced up to rounding.
fn match_channel(a: &[f64], (alo, ahi): (f64, f64), r: &[f64], (rlo, rhi): (f64, f64)) -> Vec<f64> {
    let (n, m) = (a.len() as f64, r.len() as f64);
    let (ca, cr) = (bin_counts(a, alo, ahi), bin_counts(r, rlo, rhi));
    let (pa, pr) = (exclusive_prefix(&ca), exclusive_prefix(&cr));
    let last = cr.iter().rposition(|&c| c > 0).expect("nonempty reference");
    let width = (rhi - rlo) / FEATURE_BINS as f64;
    let upto: Vec<f64> = pr.iter().zip(&cr).map(|(p, c)| (p + c) as f64 * n).collect();
    a.iter()
        .map(|&v| {
            let pos = (v - alo) / (ahi - alo) * FEATURE_BINS as f64;
            let b = bin_in_range(v, alo, ahi);
            let f = (pos - b as f64).clamp(0.0, 1.0);
            // Source mass below v, scaled by m so it compares with reference counts scaled by n.
            let mass = (pa[b] as f64 + f * ca[b] as f64) * m;
            let k = upto.partition_point(|&u| u <= mass);
            let (k, frac) =
                if k < FEATURE_BINS { (k, (mass - pr[k] as f64 * n) / (cr[k] as f64 * n)) } else { (last, 1.0) };
            (rlo + (k as f64 + frac.clamp(0.0, 1.0)) * width).clamp(rlo, rhi)
        })
        .collect()
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Per-channel histogram matching of `activation` to `reference`, each binned
/// over its own channel min–max range. The result has `activation`'s shape.
pub fn feature_hist_match<T: Real>(activation: &Tensor<T>, reference: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, n) = channel_split(activation.shape())?;
    let (rc, m) = channel_split(reference.shape())?;
    if c != rc {
        return Err(Error::ChannelMismatch { left: c, right: rc });
    }
    let mut out = Vec::with_capacity(c * n);
    for ch in 0..c {
        let a: Vec<f64> = activation.data()[ch * n..(ch + 1) * n].iter().map(|v| v.to_f64_lossy()).collect();
        let r: Vec<f64> = reference.data()[ch * m..(ch + 1) * m].iter().map(|v| v.to_f64_lossy()).collect();
        let (alo, ahi) = min_max(&a);
        let (rlo, rhi) = min_max(&r);
        if alo == ahi {
            let mean = r.iter().sum::<f64>() / m as f64;
            out.extend(std::iter::repeat_n(T::lit(mean), n));
            continue;
        }
        if rlo == rhi {
            out.extend(std::iter::repeat_n(T::lit(rlo), n));
            continue;
        }
        out.extend(match_channel(&a, (alo, ahi), &r, (rlo, rhi)).into_iter().map(T::lit));
    }
    Tensor::new(activation.shape().to_vec(), out)
}

/// Sum over taps of `(1/n)·‖φ − R‖²` with the matched target `R` held constant.
pub fn hist_loss<T: Real>(
    g: &mut Graph<T>,
    fy_hat: &FeatureStack,
    fhist: &FeatureStack,
    taps: &[String],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(taps.len());
    for tap in taps {
        let (a, h) = (fy_hat.get(tap)?, fhist.get(tap)?);
        let target = feature_hist_match(g.value(a), g.value(h))?;
        let r = g.constant(target);
        terms.push(mean_sq_diff(g, a, r)?);
    }
    sum_all(g, terms)
}

/// Unnormalised squared differences between horizontal and vertical
/// neighbours, summed over channels.
pub fn tv_loss<T: Real>(g: &mut Graph<T>, img: Var) -> Result<Var> {
    let four = match *g.shape(img) {
        [c, h, w] => g.reshape(img, vec![1, c, h, w])?,
        [_, _, _, _] => img,
        ref s => return Err(Error::shape(format!("tv expects CHW image, got {s:?}"))),
    };
    let (_, _, h, w) = g.value(four).dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::InputTooSmall { height: h, width: w, min: 2 });
    }
    let mut terms = Vec::with_capacity(2);
    for (dy, dx) in [(0, 1), (1, 0)] {
        let a = g.crop(four, dy, dx, h - dy, w - dx)?;
        let b = g.crop(four, 0, 0, h - dy, w - dx)?;
        let d = g.sub(a, b)?;
        let sq = g.square(d);
        terms.push(g.sum(sq));
    }
    sum_all(g, terms)
}

/// Bounding box of `region` grown by the context margin.
pub fn region_crop(region: &RegionMask) -> Result<BBox> {
    let b = region.bbox().ok_or(Error::EmptyRegion)?;
    let b = b.expand(REGION_MARGIN, region.height(), region.width());
    if b.height < MIN_CROP || b.width < MIN_CROP {
        return Err(Error::RegionTooSmall { height: b.height, width: b.width });
    }
    Ok(b)
}

fn names(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Constant targets of the region loss for one (matched, style, hist) triple.
#[derive(Debug, Clone)]
pub struct LossTargets<T> {
    pub crop: BBox,
    content: Vec<(String, Tensor<T>)>,
    style: Vec<(String, Tensor<T>)>,
    hist: Vec<(String, Tensor<T>)>,
}

impl<T: Real> LossTargets<T> {
    pub fn new(
        fx: &FeatureExtractor<T>,
        taps: &LossTaps,
        matched: &Image,
        style: &Image,
        hist_ref: &Image,
        region: &RegionMask,
        hist_region: &RegionMask,
    ) -> Result<Self> {
        let crop = region_crop(region)?;
        let hist_crop = region_crop(hist_region)?;
        Ok(Self {
            crop,
            content: fx.extract_image(&matched.crop(crop), &[taps.content.as_str()])?,
            style: fx.extract_image(&style.crop(crop), &names(&taps.style))?,
            hist: fx.extract_image(&hist_ref.crop(hist_crop), &names(&taps.hist))?,
        })
    }

    pub fn cast<U: Real>(&self) -> LossTargets<U> {
        let c = |v: &[(String, Tensor<T>)]| v.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
        LossTargets { crop: self.crop, content: c(&self.content), style: c(&self.style), hist: c(&self.hist) }
    }

    fn stack(g: &mut Graph<T>, entries: &[(String, Tensor<T>)]) -> FeatureStack {
        let mut s = FeatureStack::default();
        for (name, t) in entries {
            let v = g.constant(t.clone());
            s.insert(name.clone(), v);
        }
        s
    }
}

/// Graph nodes of each loss term for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub content: Var,
    pub style: Var,
    pub hist: Var,
    pub tv: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn report<T: Real>(&self, g: &Graph<T>, w: &LossWeights) -> LossReport {
        let v = |x: Var| g.value(x).item().to_f64_lossy();
        LossReport::from_terms(v(self.content), v(self.style), v(self.hist), v(self.tv), w)
    }
}

/// Builds the weighted region loss of the full-size `1×3×H×W` node `y_hat`.
pub fn region_loss<T: Real>(
    g: &mut Graph<T>,
    fx: &BoundExtractor<'_, T>,
    taps: &LossTaps,
    y_hat: Var,
    targets: &LossTargets<T>,
    w: &LossWeights,
) -> Result<LossTerms> {
    w.validate()?;
    let b = targets.crop;
    let crop = g.crop(y_hat, b.top, b.left, b.height, b.width)?;
    let feats = fx.extract(g, crop, &taps.all())?;
    let content_t = LossTargets::stack(g, &targets.content);
    let style_t = LossTargets::stack(g, &targets.style);
    let hist_t = LossTargets::stack(g, &targets.hist);
    let content = content_loss(g, &feats, &content_t, &taps.content)?;
    let style = style_loss(g, &feats, &style_t, &taps.style)?;
    let hist = hist_loss(g, &feats, &hist_t, &taps.hist)?;
    let tv = tv_loss(g, crop)?;
    let weighted = [(content, w.content), (style, w.style), (hist, w.hist), (tv, w.tv)]
        .into_iter()
        .map(|(v, wt)| g.scale(v, T::lit(wt)))
        .collect();
    let total = sum_all(g, weighted)?;
    Ok(LossTerms { content, style, hist, tv, total })
}

/// Evaluates the region loss of `y_hat` and returns its per-term report.
#[allow(clippy::too_many_arguments)]
pub fn whole_loss<T: Real>(
    y_hat: &Image,
    matched: &Image,
    style: &Image,
    hist_ref: &Image,
    region: &RegionMask,
    hist_region: &RegionMask,
    fx: &FeatureExtractor<T>,
    w: &LossWeights,
) -> Result<LossReport> {
    let taps = LossTaps::default();
    let targets = LossTargets::new(fx, &taps, matched, style, hist_ref, region, hist_region)?;
    let mut g = Graph::new();
    let bound = fx.bind(&mut g);
    let y = g.constant(y_hat.to_rgb().to_tensor());
    let terms = region_loss(&mut g, &bound, &taps, y, &targets, w)?;
    Ok(terms.report(&g, w))
}
