//! Defect style transfer: coarse histogram harmonisation, transfer-network
//! training against the weighted region loss, and sample generation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph, Tensor};
use crate::dataset::{write_manifest, write_pair, ManifestEntry};
use crate::error::{Error, Result};
use crate::features::{build_extractor, ExtractorSource, ExtractorSpec, FeatureExtractor};
use crate::imaging::{default_sigma, gaussian_fusion_mask, hist_match_region, Image, RegionMask};
use crate::losses::{region_loss, LossReport, LossTaps, LossTargets, LossWeights};
use crate::transfer::{
    init_transfer_net, net_forward, net_input, transfer_forward, Fusion, NetScale, TransferNetParams,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DstConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Fusion blur width; the region's default when absent.
    pub sigma: Option<f64>,
    pub seed: u64,
    pub scale: NetScale,
    pub extractor: ExtractorSource,
    pub extractor_spec: ExtractorSpec,
    pub taps: LossTaps,
}

impl Default for DstConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 10,
            batch_size: 1,
            weights: LossWeights::STANDARD,
            sigma: None,
            seed: 0,
            scale: NetScale::Desk,
            extractor: ExtractorSource::Seeded { seed: 0 },
            extractor_spec: ExtractorSpec::default(),
            taps: LossTaps::default(),
        }
    }
}

impl DstConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("dst: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("sigma must be >= 0");
            }
        }
        self.weights.validate()?;
        self.extractor_spec.validate()
    }

    pub fn sigma_for(&self, region: &RegionMask) -> Result<f64> {
        match self.sigma {
            Some(s) => Ok(s),
            None => default_sigma(region),
        }
    }
}

/// `S` with its `L` region histogram-matched to `H[M]`.
pub fn coarse_harmonize(s: &Image, l: &RegionMask, h: &Image, m: &RegionMask) -> Result<Image> {
    hist_match_region(&s.to_rgb(), l, &h.to_rgb(), m)
}

#[derive(Debug, Clone)]
pub struct DstRun {
    pub params: TransferNetParams,
    pub history: Vec<LossReport>,
}

struct Prepared {
    input: Tensor<f32>,
    fusion: Fusion<f32>,
    targets: LossTargets<f32>,
}

fn prepare(
    fx: &FeatureExtractor<f32>,
    cfg: &DstConfig,
    (s, l): &(Image, RegionMask),
    h: &Image,
    m: &RegionMask,
) -> Result<Prepared> {
    l.require_nonempty()?;
    let s = s.to_rgb();
    let matched = coarse_harmonize(&s, l, h, m)?;
    let mask = gaussian_fusion_mask(l, cfg.sigma_for(l)?)?;
    Ok(Prepared {
        input: net_input(&matched),
        fusion: Fusion::new(&s, &mask)?,
        targets: LossTargets::new(fx, &cfg.taps, &matched, &s, h, l, m)?,
    })
}

/// Loss and parameter gradients of one background.
fn loss_and_grads(
    params: &TransferNetParams,
    fx: &FeatureExtractor<f32>,
    cfg: &DstConfig,
    item: &Prepared,
) -> Result<(LossReport, Vec<Vec<f32>>)> {
    let mut g = Graph::new();
    let p = params.params.bind(&mut g, true);
    let x = g.constant(item.input.clone());
    let out = net_forward(&mut g, &p, x)?;
    let y_hat = item.fusion.apply(&mut g, out)?;
    let fxb = fx.bind(&mut g);
    let terms = region_loss(&mut g, &fxb, &cfg.taps, y_hat, &item.targets, &cfg.weights)?;
    let report = terms.report(&g, &cfg.weights);
    if !report.total.is_finite() {
        return Ok((report, Vec::new()));
    }
    let mut grads = g.backward(terms.total)?;
    let sizes: Vec<usize> = params.params.iter().map(|(_, t)| t.numel()).collect();
    let out = p.vars().iter().zip(sizes).map(|(&v, n)| grads.take_or_zeros(v, n)).collect();
    Ok((report, out))
}

fn mean_report(reports: &[LossReport], w: &LossWeights) -> LossReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport::from_terms(avg(|r| r.content), avg(|r| r.style), avg(|r| r.hist), avg(|r| r.tv), w)
}

/// Trains one transfer network for the defect reference `(h, m)` over the
/// given backgrounds and placements. Each iteration is one Adam step over a
/// batch of backgrounds, visited in a seeded shuffled order every epoch.
pub fn train_dst(backgrounds: &[(Image, RegionMask)], h: &Image, m: &RegionMask, cfg: &DstConfig) -> Result<DstRun> {
    cfg.validate()?;
    let fx = build_extractor(&cfg.extractor_spec, &cfg.extractor)?;
    train_dst_with(backgrounds, h, m, cfg, &fx, |_, _| {})
}

/// [`train_dst`] with an explicit extractor and a per-iteration observer.
pub fn train_dst_with(
    backgrounds: &[(Image, RegionMask)],
    h: &Image,
    m: &RegionMask,
    cfg: &DstConfig,
    fx: &FeatureExtractor<f32>,
    mut on_iteration: impl FnMut(usize, &LossReport),
) -> Result<DstRun> {
    cfg.validate()?;
    if backgrounds.is_empty() {
        return Err(Error::NoData);
    }
    m.require_nonempty()?;
    let h = h.to_rgb();
    let prepared: Vec<Prepared> = backgrounds.iter().map(|b| prepare(fx, cfg, b, &h, m)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_transfer_net(cfg.seed, cfg.scale);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &params.params);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let iteration = history.len();
            let mut reports = Vec::with_capacity(batch.len());
            let mut sum: Option<Vec<Vec<f32>>> = None;
            for &i in batch {
                let (report, grads) = loss_and_grads(&params, fx, cfg, &prepared[i])?;
                if !report.total.is_finite() {
                    return Err(Error::Diverged { iteration });
                }
                reports.push(report);
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => acc.iter_mut().flatten().zip(grads.iter().flatten()).for_each(|(a, b)| *a += b),
                }
            }
            let mut grads = sum.expect("batches are nonempty");
            if batch.len() > 1 {
                let k = 1.0 / batch.len() as f32;
                grads.iter_mut().flatten().for_each(|g| *g *= k);
            }
            adam.step(&mut params.params, &grads)?;
            let report = mean_report(&reports, &cfg.weights);
            on_iteration(iteration, &report);
            history.push(report);
        }
    }
    Ok(DstRun { params, history })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub reference_id: String,
    pub background_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSample {
    pub image: Image,
    pub label: RegionMask,
    pub provenance: Provenance,
}

/// One coarse harmonisation and one network pass. Without `params` the
/// histogram-matched image itself is the sample.
pub fn generate_sample(
    params: Option<&TransferNetParams>,
    s: &Image,
    l: &RegionMask,
    h: &Image,
    m: &RegionMask,
    cfg: &DstConfig,
    provenance: Provenance,
) -> Result<SimSample> {
    l.require_nonempty()?;
    let s = s.to_rgb();
    let matched = coarse_harmonize(&s, l, h, m)?;
    let image = match params {
        Some(p) => transfer_forward(p, &matched, &s, l, cfg.sigma_for(l)?)?,
        None => matched,
    };
    Ok(SimSample { image, label: l.clone(), provenance })
}

/// A target region on one of the backgrounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub background: usize,
    pub region: RegionMask,
    pub seed: u64,
}

/// Worker count: `DEFECTFORGE_THREADS` if set, else the logical core count.
pub fn worker_threads() -> usize {
    std::env::var("DEFECTFORGE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Inputs shared by every sample of a [`batch_generate`] call.
pub struct GenerationJob<'a> {
    pub params: Option<&'a TransferNetParams>,
    pub backgrounds: &'a [(String, Image)],
    pub reference: (&'a str, &'a Image, &'a RegionMask),
    pub defect_type: &'a str,
    pub cfg: &'a DstConfig,
}

/// Generates one sample per placement into `out_dir` and writes
/// `out_dir/manifest.jsonl`. Output files depend only on the inputs, not on
/// the worker count.
pub fn batch_generate(job: &GenerationJob<'_>, placements: &[Placement], out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let (ref_id, h, m) = job.reference;
    for p in placements {
        if p.background >= job.backgrounds.len() {
            return Err(Error::InvalidConfig(format!("placement refers to background {}", p.background)));
        }
    }
    let one = |i: usize| -> Result<ManifestEntry> {
        let p = &placements[i];
        let (bg_id, s) = &job.backgrounds[p.background];
        let prov = Provenance { reference_id: ref_id.to_owned(), background_id: bg_id.clone(), seed: p.seed };
        let sample = generate_sample(job.params, s, &p.region, h, m, job.cfg, prov)?;
        let stem = format!("{}_{i:05}", job.defect_type);
        write_pair(out_dir, &stem, &sample.image, &sample.label, job.defect_type, bg_id, p.seed)
    };
    let workers = worker_threads().min(placements.len()).max(1);
    let mut slots: Vec<Option<Result<ManifestEntry>>> = (0..placements.len()).map(|_| None).collect();
    if workers == 1 {
        for (i, slot) in slots.iter_mut().enumerate() {
            *slot = Some(one(i));
        }
    } else {
        let chunk = placements.len().div_ceil(workers);
        std::thread::scope(|scope| {
            for (k, part) in slots.chunks_mut(chunk).enumerate() {
                let one = &one;
                scope.spawn(move || {
                    for (j, slot) in part.iter_mut().enumerate() {
                        *slot = Some(one(k * chunk + j));
                    }
                });
            }
        });
    }
    let entries: Vec<ManifestEntry> =
        slots.into_iter().map(|s| s.expect("every slot filled")).collect::<Result<_>>()?;
    write_manifest(&out_dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}
