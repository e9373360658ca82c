//! Fixed convolutional feature extractor used by the perceptual losses.
//!
//! The default network is a small bias-free CNN with He-normal weights drawn
//! from a seeded generator. Real pretrained weights can be supplied through a
//! tensor archive whose tensor names and shapes match the declared
//! [`ExtractorSpec`].

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{archive, he_kernel, Bound, Graph, ParamSet, Real, Var};
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Smallest spatial side the extractor accepts.
pub const MIN_INPUT: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapSpec {
    pub name: String,
    /// 1-based index of the conv+relu layer whose output is tapped.
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSpec {
    pub input_channels: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub taps: Vec<TapSpec>,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        let tap = |name: &str, layer| TapSpec { name: name.into(), layer };
        Self {
            input_channels: 3,
            channels: vec![8, 8, 16, 16, 32, 32, 64, 64],
            strides: vec![1, 1, 2, 1, 2, 1, 2, 1],
            kernel: 3,
            taps: vec![tap("t1", 1), tap("t2", 3), tap("t3", 5), tap("t4", 7)],
        }
    }
}

impl ExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("extractor: {m}")));
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return bad("channels and strides must be nonempty and equally long".into());
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::UnsupportedKernel(self.kernel));
        }
        if self.strides.contains(&0) || self.channels.contains(&0) || self.input_channels == 0 {
            return bad("zero stride or channel count".into());
        }
        for (i, t) in self.taps.iter().enumerate() {
            if t.layer == 0 || t.layer > self.channels.len() {
                return bad(format!("tap `{}` refers to layer {}", t.name, t.layer));
            }
            if self.taps[..i].iter().any(|o| o.name == t.name) {
                return bad(format!("duplicate tap `{}`", t.name));
            }
        }
        Ok(())
    }

    pub fn weight_name(layer: usize) -> String {
        format!("fx.conv{layer}.weight")
    }

    fn tap_layer(&self, name: &str) -> Result<usize> {
        self.taps.iter().find(|t| t.name == name).map(|t| t.layer).ok_or_else(|| Error::UnknownTap(name.to_owned()))
    }

    /// Channel count and total stride at the output of `layer` (1-based).
    pub fn layer_geometry(&self, layer: usize) -> (usize, usize) {
        (self.channels[layer - 1], self.strides[..layer].iter().product())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum ExtractorSource {
    Seeded { seed: u64 },
    Archive { path: std::path::PathBuf },
}

/// Frozen feature network. Weights are only ever bound as graph constants.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<T> {
    spec: ExtractorSpec,
    params: ParamSet<T>,
}

/// Tap name → activation node.
#[derive(Debug, Clone, Default)]
pub struct FeatureStack {
    entries: Vec<(String, Var)>,
}

impl FeatureStack {
    pub fn get(&self, tap: &str) -> Result<Var> {
        self.entries.iter().find(|(n, _)| n == tap).map(|&(_, v)| v).ok_or_else(|| Error::UnknownTap(tap.to_owned()))
    }

    /// Adds or replaces `tap`.
    pub fn insert(&mut self, tap: impl Into<String>, v: Var) {
        let tap = tap.into();
        match self.entries.iter_mut().find(|(n, _)| *n == tap) {
            Some(e) => e.1 = v,
            None => self.entries.push((tap, v)),
        }
    }

    pub fn taps(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

pub fn build_extractor(spec: &ExtractorSpec, source: &ExtractorSource) -> Result<FeatureExtractor<f32>> {
    match source {
        ExtractorSource::Seeded { seed } => FeatureExtractor::seeded(spec.clone(), *seed),
        ExtractorSource::Archive { path } => FeatureExtractor::from_archive(spec.clone(), path),
    }
}

impl FeatureExtractor<f32> {
    pub fn seeded(spec: ExtractorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut in_c = spec.input_channels;
        for (i, &c) in spec.channels.iter().enumerate() {
            params.insert(ExtractorSpec::weight_name(i + 1), he_kernel(&mut rng, c, in_c, spec.kernel));
            in_c = c;
        }
        Ok(Self { spec, params })
    }

    pub fn from_archive(spec: ExtractorSpec, path: &Path) -> Result<Self> {
        let loaded = archive::load(path)?;
        Self::from_params(spec, loaded)
    }

    pub fn from_params(spec: ExtractorSpec, params: ParamSet<f32>) -> Result<Self> {
        spec.validate()?;
        let layout = Self::seeded(spec.clone(), 0)?;
        layout.params.check_layout(&params)?;
        Ok(Self { spec, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        archive::save(&self.params, path)
    }
}

impl<T: Real> FeatureExtractor<T> {
    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn cast<U: Real>(&self) -> FeatureExtractor<U> {
        FeatureExtractor { spec: self.spec.clone(), params: self.params.cast() }
    }

    /// Registers the frozen weights in `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<T>) -> BoundExtractor<'a, T> {
        BoundExtractor { spec: &self.spec, weights: self.params.bind(g, false) }
    }

    /// Value-only convenience: activations of `img` at `taps`.
    pub fn extract_image(&self, img: &Image, taps: &[&str]) -> Result<Vec<(String, crate::autodiff::Tensor<T>)>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let x = g.constant(img.to_rgb().to_tensor());
        let stack = bound.extract(&mut g, x, taps)?;
        taps.iter().map(|&t| Ok((t.to_owned(), g.value(stack.get(t)?).clone()))).collect()
    }
}

pub struct BoundExtractor<'a, T> {
    spec: &'a ExtractorSpec,
    weights: Bound<'a, T>,
}

impl<T: Real> BoundExtractor<'_, T> {
    /// Runs the layers up to the deepest requested tap. Gradients flow to
    /// `input` (when it requires them) but never to the weights.
    pub fn extract(&self, g: &mut Graph<T>, input: Var, taps: &[&str]) -> Result<FeatureStack> {
        let (_, c, h, w) = g.value(input).dims4()?;
        if h < MIN_INPUT || w < MIN_INPUT {
            return Err(Error::InputTooSmall { height: h, width: w, min: MIN_INPUT });
        }
        if c != self.spec.input_channels {
            return Err(Error::ChannelMismatch { left: c, right: self.spec.input_channels });
        }
        let layers: Vec<usize> = taps.iter().map(|t| self.spec.tap_layer(t)).collect::<Result<_>>()?;
        let deepest = layers.iter().copied().max().unwrap_or(0);
        let mut x = input;
        let mut outputs = Vec::with_capacity(deepest);
        for layer in 1..=deepest {
            let k = self.weights.get(&ExtractorSpec::weight_name(layer));
            let y = g.conv2d(x, k, self.spec.strides[layer - 1])?;
            x = g.relu(y);
            outputs.push(x);
        }
        let entries = taps.iter().zip(&layers).map(|(t, &l)| ((*t).to_owned(), outputs[l - 1])).collect();
        Ok(FeatureStack { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};

    fn fx() -> FeatureExtractor<f32> {
        FeatureExtractor::seeded(ExtractorSpec::default(), 11).unwrap()
    }

    #[test]
    fn seeded_weights_are_deterministic() {
        assert_eq!(fx(), fx());
        let other = FeatureExtractor::seeded(ExtractorSpec::default(), 12).unwrap();
        assert_ne!(fx().params(), other.params());
    }

    #[test]
    fn archive_round_trip_gives_identical_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.dstw");
        let a = fx();
        a.save(&path).unwrap();
        let b = build_extractor(&ExtractorSpec::default(), &ExtractorSource::Archive { path }).unwrap();
        let img = Image::from_fn(16, 16, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0).unwrap();
        let fa = a.extract_image(&img, &["t1", "t4"]).unwrap();
        let fb = b.extract_image(&img, &["t1", "t4"]).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn archive_with_wrong_layout_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.dstw");
        let mut small = ExtractorSpec::default();
        small.channels[0] = 4;
        FeatureExtractor::seeded(small, 1).unwrap().save(&path).unwrap();
        let err = build_extractor(&ExtractorSpec::default(), &ExtractorSource::Archive { path }).unwrap_err();
        assert!(matches!(err, Error::WeightsMismatch(_)));
        let missing = dir.path().join("nope.dstw");
        let err = build_extractor(&ExtractorSpec::default(), &ExtractorSource::Archive { path: missing }).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn zero_image_gives_zero_activations() {
        let img = Image::filled(32, 32, 3, 0.0);
        for (_, t) in fx().extract_image(&img, &["t1", "t2", "t3", "t4"]).unwrap() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn tap_shapes_follow_stride_schedule() {
        let img = Image::filled(32, 32, 3, 0.5);
        let f = fx().extract_image(&img, &["t1", "t4"]).unwrap();
        assert_eq!(f[0].1.shape(), &[1, 8, 32, 32]);
        assert_eq!(f[1].1.shape(), &[1, 64, 4, 4]);
        for side in [8usize, 16, 24, 40] {
            let img = Image::filled(side, side + 8, 3, 0.5);
            let f = fx().extract_image(&img, &["t1", "t2", "t3", "t4"]).unwrap();
            for (i, (_, t)) in f.iter().enumerate() {
                let s = 1 << i;
                assert_eq!(t.shape()[2..], [side / s, (side + 8) / s]);
            }
        }
    }

    #[test]
    fn extract_errors() {
        let e = fx();
        let img = Image::filled(8, 8, 3, 0.5);
        assert!(matches!(e.extract_image(&img, &["t9"]), Err(Error::UnknownTap(_))));
        let tiny = Image::filled(7, 8, 3, 0.5);
        assert!(matches!(e.extract_image(&tiny, &["t1"]), Err(Error::InputTooSmall { .. })));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let e = fx().cast::<f64>();
        let mut data = Vec::new();
        for i in 0..3 * 8 * 8 {
            data.push(0.5 + 0.4 * ((i as f64) * 0.731).sin());
        }
        let point = Tensor::new(vec![1, 3, 8, 8], data).unwrap();
        let r = grad_check(
            |g, x| {
                let b = e.bind(g);
                let s = b.extract(g, x, &["t2"])?;
                let t2 = s.get("t2")?;
                Ok(g.sum(t2))
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
    }
}
