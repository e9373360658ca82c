//! Central-difference checks of every training loss on small instances, at
//! both precisions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{analytic_gradient, numeric_gradient, GradCheck, Graph, Real, Tensor, Var};
use crate::error::Result;
use crate::features::{ExtractorSpec, FeatureExtractor, FeatureStack};
use crate::imaging::{Image, RegionMask};
use crate::losses::{
    content_loss, feature_hist_match, hist_loss, region_crop, region_loss, style_loss, tv_loss, LossTaps, LossTargets,
    LossWeights,
};
use crate::seg::{masked_ce, LabelMap};

/// Thresholds on the worst coordinate's relative error.
pub const F64_TOLERANCE: f64 = 1e-5;
pub const F32_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct GradCase {
    pub name: &'static str,
    pub precision: &'static str,
    pub max_rel_error: f64,
    pub scaled_error: f64,
    pub tolerance: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Draws are rounded to f32 so both precisions see the same point.
fn randn<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.sample::<f32, _>(StandardNormal) as f64)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn stack(tap: &str, v: Var) -> FeatureStack {
    let mut s = FeatureStack::default();
    s.insert(tap, v);
    s
}

/// Analytic gradient of `exact` at precision `T`; central differences at
/// precision `N` of `frozen`, which holds the same targets fixed.
fn compare<T: Real, N: Real>(
    point: &Tensor<T>,
    exact: impl FnMut(&mut Graph<T>, Var) -> Result<Var>,
    frozen: impl FnMut(&mut Graph<N>, Var) -> Result<Var>,
) -> Result<GradCheck> {
    let analytic = analytic_gradient(exact, point)?;
    Ok(GradCheck::compare(analytic, numeric_gradient(frozen, &point.cast::<N>(), STEP)?))
}

const STEP: f64 = 1e-6;

fn toy_images(rng: &mut ChaCha8Rng) -> (Image, Image, Image, Image) {
    let mut img = || Image::from_fn(8, 8, 3, |_, _, _| rng.random_range(0.1f32..0.9)).expect("valid size");
    (img(), img(), img(), img())
}

/// Every loss at precision `T`. Targets are computed once at `T` and held
/// fixed, so the differenced objective is exactly the one differentiated.
fn cases<T: Real, N: Real>(precision: &'static str, tolerance: f64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut out = Vec::new();
    let mut push = |name: &'static str, r: GradCheck| {
        out.push(GradCase { name, precision, max_rel_error: r.max_rel_error, scaled_error: r.scaled_error, tolerance });
    };
    fn content<U: Real>(target: &Tensor<U>) -> impl FnMut(&mut Graph<U>, Var) -> Result<Var> + '_ {
        move |g, x| {
            let t = g.constant(target.clone());
            content_loss(g, &stack("t", x), &stack("t", t), "t")
        }
    }
    fn style<U: Real>(target: &Tensor<U>) -> impl FnMut(&mut Graph<U>, Var) -> Result<Var> + '_ {
        move |g, x| {
            let t = g.constant(target.clone());
            style_loss(g, &stack("t", x), &stack("t", t), &["t".to_owned()])
        }
    }

    let a: Tensor<T> = randn(&mut rng, vec![1, 4, 4, 4]);
    let target: Tensor<T> = randn(&mut rng, vec![1, 4, 4, 4]);
    let target_n = target.cast::<N>();
    push("content", compare(&a, content(&target), content(&target_n))?);
    push("style", compare(&a, style(&target), style(&target_n))?);

    let reference: Tensor<T> = randn(&mut rng, vec![1, 4, 5, 5]);
    let r = feature_hist_match(&a, &reference)?.cast::<N>();
    let hist = |g: &mut Graph<T>, x: Var| {
        let h = g.constant(reference.clone());
        hist_loss(g, &stack("t", x), &stack("t", h), &["t".to_owned()])
    };
    push("hist", compare(&a, hist, content(&r))?);

    let img: Tensor<T> = randn(&mut rng, vec![1, 3, 8, 8]);
    push("tv", compare(&img, |g, x| tv_loss(g, x), |g: &mut Graph<N>, x| tv_loss(g, x))?);

    let fx = FeatureExtractor::seeded(ExtractorSpec::default(), 3)?;
    let (fx_t, fx_n) = (fx.cast::<T>(), fx.cast::<N>());
    let (y, matched, style_img, hist_img) = toy_images(&mut rng);
    let l = RegionMask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (3..6).contains(&x));
    let m = RegionMask::from_fn(8, 8, |y, x| (1..4).contains(&y) && (1..7).contains(&x));
    let taps = LossTaps::default();
    let targets = LossTargets::new(&fx_t, &taps, &matched, &style_img, &hist_img, &l, &m)?;
    let targets_n = targets.cast::<N>();
    let w = LossWeights::STANDARD;
    let crop = region_crop(&l)?;
    let hist_taps: Vec<&str> = taps.hist.iter().map(String::as_str).collect();
    let at_point = fx_t.extract_image(&y.crop(crop), &hist_taps)?;
    let refs = fx_t.extract_image(&hist_img.crop(region_crop(&m)?), &hist_taps)?;
    let frozen_r: Vec<(String, Tensor<N>)> = at_point
        .iter()
        .zip(&refs)
        .map(|((name, act), (_, h))| Ok((name.clone(), feature_hist_match(act, h)?.cast())))
        .collect::<Result<_>>()?;
    let whole = |g: &mut Graph<T>, x: Var| {
        let b = fx_t.bind(g);
        Ok(region_loss(g, &b, &taps, x, &targets, &w)?.total)
    };
    let whole_frozen = |g: &mut Graph<N>, x: Var| {
        let b = fx_n.bind(g);
        let smooth = LossWeights { hist: 0.0, ..w };
        let mut total = region_loss(g, &b, &taps, x, &targets_n, &smooth)?.total;
        let c = g.crop(x, crop.top, crop.left, crop.height, crop.width)?;
        let feats = b.extract(g, c, &hist_taps)?;
        for (name, t) in &frozen_r {
            let rv = g.constant(t.clone());
            let term = content_loss(g, &feats, &stack(name, rv), name)?;
            let term = g.scale(term, N::lit(w.hist));
            total = g.add(total, term)?;
        }
        Ok(total)
    };
    push("whole", compare(&y.to_tensor::<T>(), whole, whole_frozen)?);

    let logits: Tensor<T> = randn(&mut rng, vec![1, 2, 8, 8]);
    let label = LabelMap::new(8, 8, (0..64).map(|_| rng.random_range(0..2u8)).collect())?;
    push("masked_ce", compare(&logits, |g, x| masked_ce(g, x, &label), |g: &mut Graph<N>, x| masked_ce(g, x, &label))?);
    Ok(out)
}

/// Every case at f64, then the f32 gradients. The f32 analytic gradients
/// are compared with f64 central differences at the same points, because
/// differencing in f32 loses about `eps/step` of accuracy on small entries.
pub fn gradient_suite() -> Result<Vec<GradCase>> {
    let mut out = cases::<f64, f64>("f64", F64_TOLERANCE)?;
    out.extend(cases::<f32, f64>("f32", F32_TOLERANCE)?);
    Ok(out)
}
