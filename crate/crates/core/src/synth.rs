//! Procedural stand-in for a button-surface dataset: ringed disc backgrounds,
//! stain / scratch / hole defects with exact masks, and seeded splits.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, write_pair, ManifestEntry};
use crate::error::{Error, Result};
use crate::imaging::{Image, RegionMask};

const SURROUND: f32 = 0.08;
const DISC_RADIUS: f32 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    Stain,
    Scratch,
    Hole,
}

impl DefectKind {
    pub const ALL: [DefectKind; 3] = [DefectKind::Stain, DefectKind::Scratch, DefectKind::Hole];

    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Stain => "stain",
            DefectKind::Scratch => "scratch",
            DefectKind::Hole => "hole",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown defect kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub size: usize,
    pub base: [f32; 3],
    pub rings: f32,
    pub noise: f32,
    pub kind: DefectKind,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { size: 64, base: [0.78, 0.70, 0.56], rings: 3.0, noise: 0.06, kind: DefectKind::Stain, seed: 0 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return Err(Error::InvalidConfig(format!(
                "synth size must be a positive multiple of 16, got {}",
                self.size
            )));
        }
        if !(0.0..=0.15).contains(&self.noise) || self.base.iter().any(|b| !(0.2..=0.85).contains(b)) {
            return Err(Error::InvalidConfig("synth texture parameters out of range".into()));
        }
        Ok(())
    }

    fn center(&self) -> f32 {
        (self.size as f32 - 1.0) / 2.0
    }

    fn radius(&self) -> f32 {
        DISC_RADIUS * self.size as f32
    }
}

/// Smooth noise: a coarse random lattice upsampled bilinearly.
fn lattice_noise(size: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = size / cell + 2;
    let grid: Vec<f32> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f32 / cell as f32, x as f32 / cell as f32);
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f32, fx - ix as f32);
            let g = |a: usize, b: usize| grid[a * n + b];
            let top = g(iy, ix) * (1.0 - tx) + g(iy, ix + 1) * tx;
            let bot = g(iy + 1, ix) * (1.0 - tx) + g(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

pub fn make_background(spec: &SynthSpec) -> Result<Image> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = lattice_noise(spec.size, 4, &mut rng);
    let (c, r) = (spec.center(), spec.radius());
    Image::from_fn(spec.size, spec.size, 3, |y, x, ch| {
        let d = ((y as f32 - c).powi(2) + (x as f32 - c).powi(2)).sqrt();
        if d >= r {
            return SURROUND;
        }
        let ring = 0.88 + 0.08 * (2.0 * PI * spec.rings * d / r).cos();
        let rim = if d > 0.9 * r { 0.85 } else { 1.0 };
        (spec.base[ch] * ring * rim + spec.noise * noise[y * spec.size + x]).clamp(0.0, 1.0)
    })
}

fn polyline_distance(p: (f32, f32), pts: &[(f32, f32)]) -> f32 {
    pts.windows(2)
        .map(|w| {
            let ((ay, ax), (by, bx)) = (w[0], w[1]);
            let (dy, dx) = (by - ay, bx - ax);
            let len2 = dy * dy + dx * dx;
            let t = if len2 == 0.0 { 0.0 } else { (((p.0 - ay) * dy + (p.1 - ax) * dx) / len2).clamp(0.0, 1.0) };
            ((p.0 - ay - t * dy).powi(2) + (p.1 - ax - t * dx).powi(2)).sqrt()
        })
        .fold(f32::INFINITY, f32::min)
}

/// Defect geometry: the region plus a per-pixel shading rule.
struct Defect {
    mask: RegionMask,
    shade: Box<dyn Fn(usize, usize, usize, f32) -> f32>,
}

fn sample_defect(kind: DefectKind, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Defect {
    let size = spec.size;
    let s = size as f32;
    let (c, r) = (spec.center(), spec.radius());
    // Anchor well inside the disc.
    let ang = rng.random_range(0.0..2.0 * PI);
    let rad = rng.random_range(0.0..0.45) * r;
    let (cy, cx) = (c + rad * ang.sin(), c + rad * ang.cos());
    match kind {
        DefectKind::Stain => {
            let r0 = s * rng.random_range(0.08..0.14);
            let (k, phase) = (rng.random_range(2..5) as f32, rng.random_range(0.0..2.0 * PI));
            let strength = rng.random_range(0.35..0.6);
            let tint = [0.95, 0.8, 0.6];
            let inside = move |y: usize, x: usize| {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let th = dy.atan2(dx);
                let edge = r0 * (1.0 + 0.25 * (k * th + phase).sin());
                let d = (dy * dy + dx * dx).sqrt();
                (d < edge).then(|| 1.0 - d / edge)
            };
            let mask = RegionMask::from_fn(size, size, |y, x| inside(y, x).is_some());
            let shade = move |y: usize, x: usize, ch: usize, v: f32| {
                let depth = inside(y, x).unwrap_or(0.0);
                v * (1.0 - strength * (0.5 + 0.5 * depth) * tint[ch])
            };
            Defect { mask, shade: Box::new(shade) }
        }
        DefectKind::Scratch => {
            let mut pts = vec![(cy, cx)];
            let mut dir = rng.random_range(0.0..2.0 * PI);
            for _ in 0..3 {
                dir += rng.random_range(-0.5..0.5);
                let step = s * rng.random_range(0.08..0.14);
                let &(py, px) = pts.last().expect("nonempty");
                pts.push((py + step * dir.sin(), px + step * dir.cos()));
            }
            let gain = rng.random_range(0.55..0.8);
            let mask = RegionMask::from_fn(size, size, |y, x| polyline_distance((y as f32, x as f32), &pts) <= 1.0);
            let shade = move |_: usize, _: usize, _: usize, v: f32| v + (1.0 - v) * gain;
            Defect { mask, shade: Box::new(shade) }
        }
        DefectKind::Hole => {
            let (a, b) = (s * rng.random_range(0.05..0.1), s * rng.random_range(0.05..0.1));
            let rot = rng.random_range(0.0..PI);
            let level = rng.random_range(0.02..0.06);
            let mask = RegionMask::from_fn(size, size, |y, x| {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let (u, w) = (dx * rot.cos() + dy * rot.sin(), -dx * rot.sin() + dy * rot.cos());
                (u / a).powi(2) + (w / b).powi(2) <= 1.0
            });
            let shade = move |_: usize, _: usize, ch: usize, _: f32| level * (1.0 + 0.1 * ch as f32);
            Defect { mask, shade: Box::new(shade) }
        }
    }
}

fn ensure_nonempty(mut mask: RegionMask, spec: &SynthSpec) -> RegionMask {
    if mask.is_empty() {
        let c = spec.size / 2;
        mask.set(c, c, true);
    }
    mask
}

/// A defect-shaped region of `kind`, without rendering it.
pub fn sample_region(kind: DefectKind, spec: &SynthSpec, seed: u64) -> Result<RegionMask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ensure_nonempty(sample_defect(kind, spec, &mut rng).mask, spec))
}

/// A background with one `spec.kind` defect rendered into it, and its mask.
/// Only pixels inside the mask differ from [`make_background`].
pub fn make_defect_reference(spec: &SynthSpec) -> Result<(Image, RegionMask)> {
    let bg = make_background(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x005e_edde_fec7);
    let defect = sample_defect(spec.kind, spec, &mut rng);
    let mask = ensure_nonempty(defect.mask, spec);
    let img = Image::from_fn(spec.size, spec.size, 3, |y, x, ch| {
        let v = bg.get(y, x, ch);
        if mask.get(y, x) {
            (defect.shade)(y, x, ch, v).clamp(0.0, 1.0)
        } else {
            v
        }
    })?;
    Ok((img, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkCounts {
    /// One reference per defect kind, cycling through the kinds.
    pub references: usize,
    pub backgrounds: usize,
    pub real_train: usize,
    pub test: usize,
    pub size: usize,
}

impl Default for BenchmarkCounts {
    fn default() -> Self {
        Self { references: 3, backgrounds: 40, real_train: 5, test: 30, size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkManifests {
    pub backgrounds: PathBuf,
    pub references: PathBuf,
    pub real_train: PathBuf,
    pub test: PathBuf,
}

impl BenchmarkManifests {
    pub fn under(root: &Path) -> Self {
        let m = |d: &str| root.join(d).join("manifest.jsonl");
        Self {
            backgrounds: m("backgrounds"),
            references: m("references"),
            real_train: m("real_train"),
            test: m("test"),
        }
    }
}

fn jittered_spec(size: usize, seed: u64, kind: DefectKind) -> SynthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let base = SynthSpec::default().base.map(|b| (b + rng.random_range(-0.06..0.06)).clamp(0.2, 0.85));
    SynthSpec { size, base, rings: rng.random_range(2.0..4.0), kind, seed, ..SynthSpec::default() }
}

/// Writes four disjoint splits under `root`. Every image uses its own seed,
/// so no file or background is shared between splits.
pub fn make_benchmark(counts: &BenchmarkCounts, seed: u64, root: &Path) -> Result<BenchmarkManifests> {
    if counts.references == 0 || counts.backgrounds == 0 || counts.real_train == 0 || counts.test == 0 {
        return Err(Error::InvalidConfig("benchmark counts must all be >= 1".into()));
    }
    let paths = BenchmarkManifests::under(root);
    let mut next = seed.wrapping_mul(1_000_003);
    let mut fresh = || {
        next = next.wrapping_add(1);
        next
    };
    let mut split = |name: &str, n: usize, defect: bool| -> Result<()> {
        let dir = root.join(name);
        let mut entries: Vec<ManifestEntry> = Vec::with_capacity(n);
        for i in 0..n {
            let s = fresh();
            let kind = DefectKind::ALL[i % 3];
            let spec = jittered_spec(counts.size, s, kind);
            let bg_id = format!("{name}{i:03}");
            let e = if defect {
                let (img, mask) = make_defect_reference(&spec)?;
                write_pair(&dir, &format!("{name}_{i:03}"), &img, &mask, kind.name(), &bg_id, s)?
            } else {
                let img = make_background(&spec)?;
                let empty = RegionMask::empty(counts.size, counts.size);
                write_pair(&dir, &format!("{name}_{i:03}"), &img, &empty, "none", &bg_id, s)?
            };
            entries.push(e);
        }
        write_manifest(&dir.join("manifest.jsonl"), &entries)
    };
    split("backgrounds", counts.backgrounds, false)?;
    split("references", counts.references, true)?;
    split("real_train", counts.real_train, true)?;
    split("test", counts.test, true)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::read_manifest;

    #[test]
    fn backgrounds_are_deterministic_and_plausible() {
        let spec = SynthSpec { seed: 4, ..SynthSpec::default() };
        let a = make_background(&spec).unwrap();
        assert_eq!(a, make_background(&spec).unwrap());
        assert_ne!(a, make_background(&SynthSpec { seed: 5, ..spec.clone() }).unwrap());
        let mean = a.data().iter().sum::<f32>() / a.data().len() as f32;
        assert!((0.2..=0.8).contains(&mean), "{mean}");
    }

    #[test]
    fn noiseless_background_is_rotation_symmetric() {
        let spec = SynthSpec { noise: 0.0, ..SynthSpec::default() };
        let img = make_background(&spec).unwrap();
        let n = spec.size;
        for y in 0..n {
            for x in 0..n {
                for c in 0..3 {
                    let rotated = img.get(x, n - 1 - y, c);
                    assert!((img.get(y, x, c) - rotated).abs() <= 1.0 / 255.0);
                }
            }
        }
    }

    #[test]
    fn defect_changes_only_masked_pixels() {
        for kind in DefectKind::ALL {
            for seed in 0..10 {
                let spec = SynthSpec { kind, seed, ..SynthSpec::default() };
                let (img, mask) = make_defect_reference(&spec).unwrap();
                assert!(!mask.is_empty());
                let bg = make_background(&spec).unwrap();
                for y in 0..spec.size {
                    for x in 0..spec.size {
                        if img.pixel(y, x) != bg.pixel(y, x) {
                            assert!(mask.get(y, x), "{kind:?} seed {seed} at {y},{x}");
                        }
                    }
                }
                assert_eq!((img.clone(), mask.clone()), make_defect_reference(&spec).unwrap());
            }
        }
    }

    /// Largest Euclidean distance from a mask pixel to the nearest pixel
    /// outside the mask (or beyond the border), by brute force.
    fn max_inner_distance(m: &RegionMask) -> f64 {
        let (h, w) = (m.height() as isize, m.width() as isize);
        let mut worst: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                if !m.get(y as usize, x as usize) {
                    continue;
                }
                let mut best = f64::INFINITY;
                for yy in -1..=h {
                    for xx in -1..=w {
                        let outside = yy < 0 || xx < 0 || yy >= h || xx >= w || !m.get(yy as usize, xx as usize);
                        if outside {
                            best = best.min((((yy - y).pow(2) + (xx - x).pow(2)) as f64).sqrt());
                        }
                    }
                }
                worst = worst.max(best);
            }
        }
        worst
    }

    #[test]
    fn scratches_are_at_most_three_pixels_thick() {
        for seed in 0..20 {
            let spec = SynthSpec { kind: DefectKind::Scratch, seed, ..SynthSpec::default() };
            let (_, mask) = make_defect_reference(&spec).unwrap();
            // A band of width 3 puts its centre pixels at distance 2 from outside.
            assert!(max_inner_distance(&mask) <= 2.0, "seed {seed}");
        }
    }

    #[test]
    fn spec_validation() {
        assert!(make_background(&SynthSpec { size: 40, ..SynthSpec::default() }).is_err());
        assert!(make_background(&SynthSpec { noise: 0.5, ..SynthSpec::default() }).is_err());
        assert_eq!(DefectKind::parse("hole").unwrap(), DefectKind::Hole);
        assert!(DefectKind::parse("dent").is_err());
    }

    #[test]
    fn benchmark_counts_and_disjointness() {
        let dir = tempfile::tempdir().unwrap();
        let counts = BenchmarkCounts { references: 3, backgrounds: 4, real_train: 2, test: 3, size: 32 };
        let m = make_benchmark(&counts, 7, dir.path()).unwrap();
        let lists = [&m.backgrounds, &m.references, &m.real_train, &m.test].map(|p| read_manifest(p).unwrap());
        assert_eq!(lists.each_ref().map(Vec::len), [4, 3, 2, 3]);
        let mut seeds: Vec<u64> = lists.iter().flatten().map(|e| e.seed).collect();
        let mut files: Vec<String> = lists.iter().flatten().map(|e| e.image.clone()).collect();
        seeds.sort();
        seeds.dedup();
        files.sort();
        files.dedup();
        assert_eq!(seeds.len(), 12);
        assert_eq!(files.len(), 12);
        assert_eq!(lists[1].iter().map(|e| e.defect_type.as_str()).collect::<Vec<_>>(), ["stain", "scratch", "hole"]);
        let zero = BenchmarkCounts { test: 0, ..counts };
        assert!(make_benchmark(&zero, 7, dir.path()).is_err());
    }
}
