//! End-to-end orchestration: one transfer network per defect type, simulated
//! training sets, and the scenario comparison over a benchmark tree.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{load_samples, write_manifest, ManifestEntry};
use crate::dst::{batch_generate, train_dst_with, DstConfig, DstRun, GenerationJob, Placement};
use crate::error::{Error, Result};
use crate::eval::{run_comparison, Scenario, ScenarioResult};
use crate::features::build_extractor;
use crate::imaging::{Image, RegionMask};
use crate::losses::LossReport;
use crate::seg::SegConfig;
use crate::synth::{sample_region, BenchmarkManifests, DefectKind, SynthSpec};
use crate::transfer::TransferNetParams;

/// A defect reference `(H, M)` of one type.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub id: String,
    pub kind: DefectKind,
    pub image: Image,
    pub mask: RegionMask,
}

/// Backgrounds keyed by their background id.
pub fn load_backgrounds(manifest: &Path) -> Result<Vec<(String, Image)>> {
    let out: Vec<_> = load_samples(manifest)?.into_iter().map(|s| (s.entry.background_id, s.image)).collect();
    if out.is_empty() {
        return Err(Error::NoData);
    }
    Ok(out)
}

/// The first reference of every defect type present, in manifest order.
pub fn load_references(manifest: &Path) -> Result<Vec<Reference>> {
    let mut out: Vec<Reference> = Vec::new();
    for s in load_samples(manifest)? {
        let kind = DefectKind::parse(&s.entry.defect_type)?;
        if out.iter().all(|r| r.kind != kind) {
            out.push(Reference { id: s.entry.background_id, kind, image: s.image, mask: s.mask });
        }
    }
    if out.is_empty() {
        return Err(Error::NoData);
    }
    Ok(out)
}

fn region_for(kind: DefectKind, img: &Image, seed: u64) -> Result<RegionMask> {
    if img.height() != img.width() {
        return Err(Error::shape(format!("backgrounds must be square, got {}x{}", img.height(), img.width())));
    }
    sample_region(kind, &SynthSpec { size: img.height(), kind, ..SynthSpec::default() }, seed)
}

fn mix(a: u64, b: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15)).random()
}

/// Trains the transfer network of one reference, pairing every background
/// with a seeded target region of the reference's kind.
pub fn train_reference(
    backgrounds: &[(String, Image)],
    reference: &Reference,
    cfg: &DstConfig,
    on_iteration: impl FnMut(usize, &LossReport),
) -> Result<DstRun> {
    cfg.validate()?;
    let pairs = backgrounds
        .iter()
        .enumerate()
        .map(|(i, (_, img))| Ok((img.clone(), region_for(reference.kind, img, mix(cfg.seed, i as u64))?)))
        .collect::<Result<Vec<_>>>()?;
    let fx = build_extractor(&cfg.extractor_spec, &cfg.extractor)?;
    train_dst_with(&pairs, &reference.image, &reference.mask, cfg, &fx, on_iteration)
}

/// `count` seeded placements of `kind` regions over the backgrounds.
pub fn placements(
    backgrounds: &[(String, Image)],
    kind: DefectKind,
    count: usize,
    seed: u64,
) -> Result<Vec<Placement>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let background = rng.random_range(0..backgrounds.len());
            let seed: u64 = rng.random();
            Ok(Placement { background, region: region_for(kind, &backgrounds[background].1, seed)?, seed })
        })
        .collect()
}

/// Writes `count` simulated samples spread evenly over the references into
/// `out_dir/<type>/` and a combined `out_dir/manifest.jsonl`. A reference
/// without a network yields histogram-matched samples. The same seed gives
/// the same placements whether or not networks are supplied.
pub fn generate_set(
    backgrounds: &[(String, Image)],
    models: &[(&Reference, Option<&TransferNetParams>)],
    count: usize,
    seed: u64,
    cfg: &DstConfig,
    out_dir: &Path,
) -> Result<PathBuf> {
    if models.is_empty() || backgrounds.is_empty() {
        return Err(Error::NoData);
    }
    let mut all: Vec<ManifestEntry> = Vec::with_capacity(count);
    for (t, (reference, params)) in models.iter().enumerate() {
        let n = count / models.len() + usize::from(t < count % models.len());
        let kind = reference.kind.name();
        let places = placements(backgrounds, reference.kind, n, mix(seed, t as u64))?;
        let job = GenerationJob {
            params: *params,
            backgrounds,
            reference: (&reference.id, &reference.image, &reference.mask),
            defect_type: kind,
            cfg,
        };
        for mut e in batch_generate(&job, &places, &out_dir.join(kind))? {
            e.image = format!("{kind}/{}", e.image);
            e.mask = format!("{kind}/{}", e.mask);
            all.push(e);
        }
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &all)?;
    Ok(manifest)
}

/// Training manifests of the named scenarios: `real`, `real+hist`,
/// `real+dst`, `hist` and `dst`.
pub fn scenario(name: &str, bench: &BenchmarkManifests, hist: &Path, dst: &Path, seg: &SegConfig) -> Result<Scenario> {
    let train = match name {
        "real" => vec![bench.real_train.clone()],
        "real+hist" => vec![bench.real_train.clone(), hist.to_owned()],
        "real+dst" => vec![bench.real_train.clone(), dst.to_owned()],
        "hist" => vec![hist.to_owned()],
        "dst" => vec![dst.to_owned()],
        other => return Err(Error::InvalidConfig(format!("unknown scenario `{other}`"))),
    };
    Ok(Scenario { name: name.to_owned(), train, test: bench.test.clone(), seg: seg.clone() })
}

/// Settings for [`run_benchmark`].
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRun {
    pub dst: DstConfig,
    pub seg: SegConfig,
    pub generated: usize,
    pub generation_seed: u64,
    pub scenarios: Vec<String>,
    pub seeds: Vec<u64>,
}

/// Loss histories of the transfer networks and the scenario table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOutcome {
    pub dst_history: Vec<(DefectKind, Vec<LossReport>)>,
    pub results: Vec<ScenarioResult>,
}

/// Trains a network per reference, writes the DST and histogram-only sets
/// under `work/sim_dst` and `work/sim_hist`, then runs the comparison.
pub fn run_benchmark(bench: &BenchmarkManifests, run: &BenchmarkRun, work: &Path) -> Result<BenchmarkOutcome> {
    let backgrounds = load_backgrounds(&bench.backgrounds)?;
    let references = load_references(&bench.references)?;
    let mut nets = Vec::with_capacity(references.len());
    let mut dst_history = Vec::with_capacity(references.len());
    for r in &references {
        let trained = train_reference(&backgrounds, r, &run.dst, |_, _| {})?;
        dst_history.push((r.kind, trained.history));
        nets.push(trained.params);
    }
    let with: Vec<_> = references.iter().zip(&nets).map(|(r, p)| (r, Some(p))).collect();
    let without: Vec<_> = references.iter().map(|r| (r, None)).collect();
    let dst = generate_set(&backgrounds, &with, run.generated, run.generation_seed, &run.dst, &work.join("sim_dst"))?;
    let hist =
        generate_set(&backgrounds, &without, run.generated, run.generation_seed, &run.dst, &work.join("sim_hist"))?;
    let scenarios =
        run.scenarios.iter().map(|n| scenario(n, bench, &hist, &dst, &run.seg)).collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkOutcome { dst_history, results: run_comparison(&scenarios, &run.seeds)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_benchmark, BenchmarkCounts};

    #[test]
    fn generated_sets_share_placements() {
        let dir = tempfile::tempdir().unwrap();
        let counts = BenchmarkCounts { backgrounds: 3, real_train: 1, test: 1, size: 32, ..BenchmarkCounts::default() };
        let bench = make_benchmark(&counts, 2, &dir.path().join("b")).unwrap();
        let bgs = load_backgrounds(&bench.backgrounds).unwrap();
        let refs = load_references(&bench.references).unwrap();
        assert_eq!(refs.iter().map(|r| r.kind).collect::<Vec<_>>(), DefectKind::ALL);
        let models: Vec<_> = refs.iter().map(|r| (r, None)).collect();
        let cfg = DstConfig::default();
        let a = generate_set(&bgs, &models, 7, 5, &cfg, &dir.path().join("a")).unwrap();
        let b = generate_set(&bgs, &models, 7, 5, &cfg, &dir.path().join("c")).unwrap();
        let (sa, sb) = (load_samples(&a).unwrap(), load_samples(&b).unwrap());
        assert_eq!(sa.len(), 7);
        assert_eq!(sa.iter().filter(|s| s.entry.defect_type == "stain").count(), 3);
        for (x, y) in sa.iter().zip(&sb) {
            assert_eq!((&x.image, &x.mask), (&y.image, &y.mask));
            assert!(!x.mask.is_empty());
        }
    }

    #[test]
    fn unknown_scenario_is_rejected() {
        let bench = BenchmarkManifests::under(Path::new("x"));
        let r = scenario("real+gan", &bench, Path::new("h"), Path::new("d"), &SegConfig::default());
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }
}
