//! Pixelwise confusion counts, precision / recall / F1, model evaluation
//! and the multi-seed scenario comparison.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::load_samples;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::seg::{predict, train_seg, LabelMap, SegConfig, SegNetParams};

/// Defect is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

pub fn confusion(pred: &LabelMap, truth: &LabelMap) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::shape(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `0/0` is taken as 0 for each ratio.
pub fn f1(c: &ConfusionCounts) -> Metrics {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Metrics { precision, recall, f1 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: ConfusionCounts,
    /// Metrics of the pooled counts.
    pub micro: Metrics,
    pub per_image: Vec<Metrics>,
}

pub fn evaluate_pairs(params: &SegNetParams, test: &[(Image, LabelMap)]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::NoData);
    }
    let mut counts = ConfusionCounts::default();
    let mut per_image = Vec::with_capacity(test.len());
    for (img, truth) in test {
        let c = confusion(&predict(params, img)?, truth)?;
        per_image.push(f1(&c));
        counts = counts.merge(c);
    }
    Ok(EvalReport { counts, micro: f1(&counts), per_image })
}

/// Loads a manifest as `(image, label)` pairs.
pub fn load_pairs(manifest: &Path) -> Result<Vec<(Image, LabelMap)>> {
    Ok(load_samples(manifest)?.into_iter().map(|s| (s.image, LabelMap::from_mask(&s.mask))).collect())
}

pub fn evaluate_model(params: &SegNetParams, test_manifest: &Path) -> Result<EvalReport> {
    evaluate_pairs(params, &load_pairs(test_manifest)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub train: Vec<PathBuf>,
    pub test: PathBuf,
    pub seg: SegConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub name: String,
    pub seeds: Vec<u64>,
    pub f1: Vec<f64>,
    pub median_f1: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Trains and evaluates every scenario once per seed.
pub fn run_comparison(scenarios: &[Scenario], seeds: &[u64]) -> Result<Vec<ScenarioResult>> {
    if seeds.is_empty() {
        return Err(Error::NoData);
    }
    let mut out = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        let mut train = Vec::new();
        for m in &sc.train {
            train.extend(load_pairs(m)?);
        }
        let test = load_pairs(&sc.test)?;
        let mut scores = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = SegConfig { seed, ..sc.seg.clone() };
            let run = train_seg(&train, None, &cfg)?;
            scores.push(evaluate_pairs(&run.params, &test)?.micro.f1);
        }
        out.push(ScenarioResult {
            name: sc.name.clone(),
            seeds: seeds.to_vec(),
            median_f1: median(&scores),
            f1: scores,
        });
    }
    Ok(out)
}

/// Published reference F1 scores shown above every comparison table.
pub const REFERENCE_F1: [(&str, f64); 3] =
    [("DST + Buttonlab", 0.8000), ("histogram matching", 0.6599), ("real samples only", 0.4692)];

pub fn render_table(results: &[ScenarioResult]) -> String {
    let mut s = String::from("reference F1:");
    for (name, v) in REFERENCE_F1 {
        let _ = write!(s, " {name} {v:.4};");
    }
    s.pop();
    s.push('\n');
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8);
    let _ = writeln!(s, "{:<width$}  median_f1  per_seed", "scenario");
    for r in results {
        let per: Vec<String> = r.f1.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(s, "{:<width$}  {:>9.4}  {}", r.name, r.median_f1, per.join(" "));
    }
    s
}
