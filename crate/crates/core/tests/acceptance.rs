//! Acceptance suite: every criterion runs in sequence and reports one line.
//! Criterion 10 reruns the runs of 5, 8 and 9 and compares them bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use defectforge::autodiff::{Graph, Tensor};
use defectforge::checks::gradient_suite;
use defectforge::dst::{generate_sample, DstConfig, DstRun, Provenance};
use defectforge::eval::{evaluate_pairs, median, render_table, EvalReport};
use defectforge::features::{ExtractorSpec, FeatureExtractor};
use defectforge::imaging::{hist_match_region, Image, RegionMask};
use defectforge::losses::{content_loss, gram, hist_loss, style_loss, tv_loss, LossWeights};
use defectforge::pipeline::{run_benchmark, train_reference, BenchmarkOutcome, BenchmarkRun, Reference};
use defectforge::seg::{
    init_buttonlab, masked_ce, seg_forward, seg_logits, seg_schedule, train_seg, CropSpec, LabelMap, SegConfig, SegRun,
};
use defectforge::synth::{
    make_background, make_benchmark, make_defect_reference, sample_region, BenchmarkCounts, DefectKind, SynthSpec,
};
use defectforge::transfer::{init_transfer_net, NetScale, TransferNetParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;
type Criterion = Box<dyn Fn(&mut Runs) -> Outcome>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    check(elapsed < limit, || format!("{what} took {elapsed:.1?}, limit {limit:?}"))
}

/// Runs shared between criteria, kept for the determinism rerun.
#[derive(Default)]
struct Runs {
    dst: Option<(DstRun, Duration)>,
    seg: Option<SegOutcome>,
    bench: Option<BenchOutcome>,
}

struct SegOutcome {
    run: SegRun,
    test: EvalReport,
}

struct BenchOutcome {
    outcome: BenchmarkOutcome,
    files: BTreeMap<PathBuf, Vec<u8>>,
}

// ---------------------------------------------------------------- criterion 1

fn random_mask(side: usize, rng: &mut ChaCha8Rng) -> RegionMask {
    let density = rng.random_range(0.05..0.95);
    let mut m = RegionMask::from_fn(side, side, |_, _| rng.random_bool(density));
    if m.is_empty() {
        m.set(side / 2, side / 2, true);
    }
    m
}

fn quantized_image(side: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_fn(side, side, 3, |_, _, _| rng.random_range(0..=255u8) as f32 / 255.0).unwrap()
}

/// Sort-based matching: a source value whose rank (the highest rank of its
/// tie group) is `k` of `n` maps to the reference order statistic at
/// `ceil((k+1)·m/n) − 1`.
fn rank_oracle(src: &[f32], reference: &[f32]) -> Vec<f32> {
    let (n, m) = (src.len(), reference.len());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| src[a].total_cmp(&src[b]));
    let mut sorted_ref = reference.to_vec();
    sorted_ref.sort_by(f32::total_cmp);
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && src[order[j + 1]] == src[order[i]] {
            j += 1;
        }
        let idx = ((j + 1) * m).div_ceil(n) - 1;
        for &o in &order[i..=j] {
            out[o] = sorted_ref[idx];
        }
        i = j + 1;
    }
    out
}

fn masked_channel(img: &Image, mask: &RegionMask, c: usize) -> Vec<f32> {
    let ch = img.channels();
    (0..mask.bits().len()).filter(|&i| mask.bits()[i]).map(|i| img.data()[i * ch + c]).collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut agree, mut total, mut outside_exact) = (0usize, 0usize, 0usize);
    const CASES: usize = 50;
    for _ in 0..CASES {
        let src = quantized_image(32, &mut rng);
        let reference = quantized_image(32, &mut rng);
        let sm = random_mask(32, &mut rng);
        let rm = random_mask(32, &mut rng);
        let out = hist_match_region(&src, &sm, &reference, &rm).map_err(|e| e.to_string())?;
        for c in 0..3 {
            let expected = rank_oracle(&masked_channel(&src, &sm, c), &masked_channel(&reference, &rm, c));
            let got = masked_channel(&out, &sm, c);
            agree += got.iter().zip(&expected).filter(|(g, e)| (*g - *e).abs() <= 1.0 / 255.0 + 1e-6).count();
            total += got.len();
        }
        let untouched = sm
            .bits()
            .iter()
            .enumerate()
            .filter(|(_, &b)| !b)
            .all(|(i, _)| (0..3).all(|c| out.data()[i * 3 + c].to_bits() == src.data()[i * 3 + c].to_bits()));
        outside_exact += usize::from(untouched);
    }
    let elapsed = start.elapsed();
    let rate = agree as f64 / total as f64;
    check(rate >= 0.99, || format!("agreement {:.2}% of {total} masked values", 100.0 * rate))?;
    check(outside_exact == CASES, || format!("outside-mask bit-identical in {outside_exact}/{CASES} cases"))?;
    within(elapsed, Duration::from_secs(5), "matching")?;
    Ok(format!("agreement {:.2}% of {total}, outside exact {outside_exact}/{CASES}, {elapsed:.2?}", 100.0 * rate))
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let cases = gradient_suite().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} {} {:.2e}", c.name, c.precision, c.max_rel_error))
        .collect();
    check(failed.is_empty(), || format!("failed: {}", failed.join(", ")))?;
    check(cases.len() == 12, || format!("expected 12 cases, ran {}", cases.len()))?;
    within(elapsed, Duration::from_secs(60), "gradient suite")?;
    let worst = cases.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    Ok(format!(
        "{} cases, worst {} {} {:.2e}, {elapsed:.2?}",
        cases.len(),
        worst.name,
        worst.precision,
        worst.max_rel_error
    ))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut g = Graph::<f64>::new();
    let img = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
    let tv = tv_loss(&mut g, img).map_err(|e| e.to_string())?;
    let tv = g.value(tv).item();
    check(tv == 2.0, || format!("tv {tv}"))?;

    let ones = g.constant(Tensor::full(vec![1, 2, 2], 1.0));
    let gm = gram(&mut g, ones).map_err(|e| e.to_string())?;
    let gm = g.value(gm).clone();
    check(gm.shape() == [1, 1] && gm.data() == [1.0], || format!("gram {:?} {:?}", gm.shape(), gm.data()))?;

    let logits = g.constant(Tensor::zeros(vec![1, 2, 3, 3]));
    let lbl = LabelMap::new(3, 3, vec![0, 1, 1, 0, 1, 0, 0, 0, 1]).unwrap();
    let ce = masked_ce(&mut g, logits, &lbl).map_err(|e| e.to_string())?;
    let ce = g.value(ce).item();
    check((ce - std::f64::consts::LN_2).abs() <= 1e-9, || format!("ce {ce}"))?;

    // Self-comparisons on real extractor activations.
    let fx = FeatureExtractor::<f32>::seeded(ExtractorSpec::default(), 5).map_err(|e| e.to_string())?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Image::from_fn(24, 24, 3, |_, _, _| rng.random_range(0.0..1.0)).unwrap();
    let bound = fx.bind(&mut g);
    let input = g.constant(x.to_tensor());
    let taps: Vec<String> = fx.spec().taps.iter().map(|t| t.name.clone()).collect();
    let names: Vec<&str> = taps.iter().map(String::as_str).collect();
    let feats = bound.extract(&mut g, input, &names).map_err(|e| e.to_string())?;
    let c = content_loss(&mut g, &feats, &feats, &taps[0]).map_err(|e| e.to_string())?;
    let s = style_loss(&mut g, &feats, &feats, &taps).map_err(|e| e.to_string())?;
    let h = hist_loss(&mut g, &feats, &feats, &taps).map_err(|e| e.to_string())?;
    let (c, s, h) = (g.value(c).item(), g.value(s).item(), g.value(h).item());
    check(c == 0.0 && s == 0.0, || format!("self content {c}, style {s}"))?;
    check(h <= 1e-20, || format!("self hist {h:e}"))?;
    let mut sat = vec![-30.0; 9];
    sat.extend(vec![30.0; 9]);
    let sure = g.constant(Tensor::new(vec![1, 2, 3, 3], sat).unwrap());
    let ce_self = masked_ce(&mut g, sure, &LabelMap::new(3, 3, vec![1; 9]).unwrap()).map_err(|e| e.to_string())?;
    let ce_self = g.value(ce_self).item();
    check(ce_self < 1e-20, || format!("saturated ce {ce_self:e}"))?;
    Ok(format!("tv {tv}, gram {:?}, ce-ln2 {:.1e}, self hist {h:.1e}", gm.data(), ce - std::f64::consts::LN_2))
}

// ---------------------------------------------------------------- criterion 5

fn dst_setup() -> (Vec<(String, Image)>, Reference) {
    let backgrounds = (0..4)
        .map(|i| {
            let spec = SynthSpec { seed: 100 + i, ..SynthSpec::default() };
            (format!("bg{i}"), make_background(&spec).unwrap())
        })
        .collect();
    let spec = SynthSpec { seed: 9, kind: DefectKind::Stain, ..SynthSpec::default() };
    let (image, mask) = make_defect_reference(&spec).unwrap();
    (backgrounds, Reference { id: "ref".into(), kind: DefectKind::Stain, image, mask })
}

/// 200 iterations, each one Adam step over all 4 backgrounds.
fn dst_config() -> DstConfig {
    DstConfig { epochs: 200, batch_size: 4, lr: 1e-3, weights: LossWeights::STANDARD, seed: 5, ..DstConfig::default() }
}

fn train_smoke_dst() -> Result<(DstRun, Duration), String> {
    let (backgrounds, reference) = dst_setup();
    let start = Instant::now();
    let run = train_reference(&backgrounds, &reference, &dst_config(), |_, _| {}).map_err(|e| e.to_string())?;
    Ok((run, start.elapsed()))
}

fn smoke_dst(runs: &mut Runs) -> Result<&(DstRun, Duration), String> {
    if runs.dst.is_none() {
        runs.dst = Some(train_smoke_dst()?);
    }
    Ok(runs.dst.as_ref().unwrap())
}

fn criterion_5(runs: &mut Runs) -> Outcome {
    let (run, elapsed) = smoke_dst(runs)?;
    let h = &run.history;
    check(h.len() == 200, || format!("{} iterations", h.len()))?;
    let (first, last) = (h[0].total, h[h.len() - 1].total);
    check(last.is_finite() && last <= 0.5 * first, || format!("total {first:.4e} -> {last:.4e}"))?;
    within(*elapsed, Duration::from_secs(300), "training")?;
    Ok(format!("total {first:.4e} -> {last:.4e} ({:.1}%), {elapsed:.1?}", 100.0 * last / first))
}

// ---------------------------------------------------------------- criterion 4

fn perturbed(base: &TransferNetParams, seed: u64) -> TransferNetParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.05).unwrap();
    let mut p = base.clone();
    for t in p.params.tensors_mut() {
        for v in t.data_mut() {
            *v += noise.sample(&mut rng) * v.abs().max(0.1);
        }
    }
    p
}

fn criterion_4(runs: &mut Runs) -> Outcome {
    let trained = smoke_dst(runs)?.0.params.clone();
    let cfg = DstConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    const DRAWS: u64 = 20;
    for draw in 0..DRAWS {
        let params = if draw < 10 { init_transfer_net(draw, NetScale::Desk) } else { perturbed(&trained, draw) };
        let kind = DefectKind::ALL[draw as usize % 3];
        let side = [32, 64, 48][draw as usize % 3];
        let spec = SynthSpec { size: side, kind, seed: rng.random(), ..SynthSpec::default() };
        let s = make_background(&spec).map_err(|e| e.to_string())?;
        let l = sample_region(kind, &spec, rng.random()).map_err(|e| e.to_string())?;
        let (h, m) = make_defect_reference(&SynthSpec { seed: rng.random(), ..spec }).map_err(|e| e.to_string())?;
        let prov = Provenance { reference_id: "r".into(), background_id: "b".into(), seed: draw };
        let sample = generate_sample(Some(&params), &s, &l, &h, &m, &cfg, prov).map_err(|e| e.to_string())?;
        let outside =
            l.bits().iter().enumerate().filter(|(_, &b)| !b).all(|(i, _)| {
                (0..3).all(|c| sample.image.data()[i * 3 + c].to_bits() == s.data()[i * 3 + c].to_bits())
            });
        let in_range = sample.image.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !(outside && in_range && sample.label == l) {
            failures.push(format!("draw {draw}: outside {outside}, range {in_range}, label {}", sample.label == l));
        }
    }
    check(failures.is_empty(), || failures.join("; "))?;
    Ok(format!("{DRAWS}/{DRAWS} draws (10 initial, 10 trained)"))
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6(runs: &mut Runs) -> Outcome {
    let params = smoke_dst(runs)?.0.params.clone();
    let spec = SynthSpec { size: 256, kind: DefectKind::Scratch, seed: 61, ..SynthSpec::default() };
    let s = make_background(&spec).map_err(|e| e.to_string())?;
    let l = sample_region(DefectKind::Scratch, &spec, 3).map_err(|e| e.to_string())?;
    let (h, m) = make_defect_reference(&SynthSpec { seed: 62, ..spec }).map_err(|e| e.to_string())?;
    let cfg = DstConfig::default();
    let mut worst = Duration::ZERO;
    for i in 0..3 {
        let prov = Provenance { reference_id: "r".into(), background_id: "b".into(), seed: i };
        let start = Instant::now();
        let sample = generate_sample(Some(&params), &s, &l, &h, &m, &cfg, prov).map_err(|e| e.to_string())?;
        worst = worst.max(start.elapsed());
        check(sample.image.height() == 256 && sample.image.width() == 256, || "output size".into())?;
    }
    within(worst, Duration::from_secs(1), "generation")?;
    Ok(format!("slowest of 3 samples at 256x256: {worst:.1?}"))
}

// ---------------------------------------------------------------- criterion 7

fn pattern(side: usize) -> Image {
    Image::from_fn(side, side, 3, |y, x, c| 0.5 + 0.45 * ((y * 3 + x * 5 + c * 7) as f32 * 0.21).sin()).unwrap()
}

fn criterion_7() -> Outcome {
    let p = init_buttonlab(2, NetScale::Desk);
    for side in [64usize, 128] {
        let img = pattern(side);
        let full = seg_forward(&p, &img, None).map_err(|e| e.to_string())?;
        check(full.shape() == [1, 2, side, side], || format!("{side}: full logits {:?}", full.shape()))?;
        let crop = CropSpec { top: 16, left: side / 2, height: side / 2, width: side / 2 };
        let part = seg_forward(&p, &img, Some(crop)).map_err(|e| e.to_string())?;
        check(part.shape() == [1, 2, side / 2, side / 2], || format!("{side}: crop logits {:?}", part.shape()))?;
        let whole = seg_forward(&p, &img, Some(CropSpec::full(side, side))).map_err(|e| e.to_string())?;
        let same = whole.shape() == full.shape()
            && whole.data().iter().zip(full.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        check(same, || format!("{side}: crop=full differs from no crop"))?;
    }

    // Labels outside the crop never reach the loss.
    let img = pattern(64);
    let crop = CropSpec { top: 16, left: 32, height: 32, width: 32 };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a: Vec<u8> = (0..64 * 64).map(|_| rng.random_range(0..2)).collect();
    let b: Vec<u8> = a
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (y, x) = (i / 64, i % 64);
            let inside = (16..48).contains(&y) && (32..64).contains(&x);
            if inside {
                v
            } else {
                rng.random_range(0..2)
            }
        })
        .collect();
    let loss = |data: &[u8]| -> Result<u32, String> {
        let lbl = LabelMap::new(64, 64, data.to_vec()).map_err(|e| e.to_string())?;
        let mut g = Graph::<f32>::new();
        let (logits, _) = seg_logits(&mut g, &p, &img, Some(crop), false).map_err(|e| e.to_string())?;
        let l = masked_ce(&mut g, logits, &lbl.crop(crop)).map_err(|e| e.to_string())?;
        Ok(g.value(l).item().to_bits())
    };
    check(loss(&a)? == loss(&b)?, || "crop loss depends on labels outside the crop".into())?;

    let banned = ["aspp", "atrous", "dilat", "pyramid"];
    let offending: Vec<String> = p
        .params
        .names()
        .map(str::to_owned)
        .chain(seg_schedule(NetScale::Full).into_iter().map(|c| c.name))
        .filter(|n| banned.iter().any(|b| n.to_lowercase().contains(b)))
        .collect();
    check(offending.is_empty(), || format!("atrous modules: {offending:?}"))?;
    Ok("shapes at 64 and 128, crop=full bit-exact, crop-loss locality, no atrous modules".into())
}

// ---------------------------------------------------------------- criterion 8

const DISC: [f32; 3] = [0.15, 0.25, 0.75];

/// Synthetic backgrounds with one flat blue disc each; the disc is the label.
fn disc_set(n: usize, seed: u64) -> Vec<(Image, LabelMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let bg = make_background(&SynthSpec { seed: seed * 1000 + i as u64, ..SynthSpec::default() }).unwrap();
            let cy = rng.random_range(16.0..48.0f32);
            let cx = rng.random_range(16.0..48.0f32);
            let r = rng.random_range(5.0..10.0f32);
            let m = RegionMask::from_fn(64, 64, |y, x| (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2) <= r * r);
            let img = Image::from_fn(64, 64, 3, |y, x, c| if m.get(y, x) { DISC[c] } else { bg.get(y, x, c) }).unwrap();
            (img, LabelMap::from_mask(&m))
        })
        .collect()
}

fn train_smoke_seg() -> Result<SegOutcome, String> {
    let train = disc_set(16, 1);
    let test = disc_set(8, 2);
    let cfg = SegConfig { epochs: 1000, max_steps: Some(300), lr: 2e-3, ..SegConfig::default() };
    let run = train_seg(&train, None, &cfg).map_err(|e| e.to_string())?;
    let test = evaluate_pairs(&run.params, &test).map_err(|e| e.to_string())?;
    Ok(SegOutcome { run, test })
}

fn criterion_8(runs: &mut Runs) -> Outcome {
    let start = Instant::now();
    let out = train_smoke_seg()?;
    let elapsed = start.elapsed();
    let steps = out.run.step_losses.len();
    check(steps == 300, || format!("{steps} steps"))?;
    let last = out.run.step_losses[steps - 1];
    let f1 = out.test.micro.f1;
    runs.seg = Some(out);
    check(last < 0.1, || format!("final train loss {last:.4}"))?;
    check(f1 >= 0.9, || format!("test F1 {f1:.4}"))?;
    Ok(format!("final train loss {last:.4}, test F1 {f1:.4}, {elapsed:.1?}"))
}

// ---------------------------------------------------------------- criterion 9

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_owned()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_owned(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn benchmark() -> Result<BenchOutcome, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bench = make_benchmark(&BenchmarkCounts::default(), 7, &dir.path().join("bench")).map_err(|e| e.to_string())?;
    let run = BenchmarkRun {
        dst: DstConfig::default(),
        seg: SegConfig::default(),
        generated: 200,
        generation_seed: 11,
        scenarios: vec!["real".into(), "real+hist".into(), "real+dst".into()],
        seeds: vec![0, 1, 2],
    };
    let outcome = run_benchmark(&bench, &run, dir.path()).map_err(|e| e.to_string())?;
    Ok(BenchOutcome { outcome, files: tree(dir.path()) })
}

fn criterion_9(runs: &mut Runs) -> Outcome {
    let start = Instant::now();
    let out = benchmark()?;
    let elapsed = start.elapsed();
    let results = out.outcome.results.clone();
    runs.bench = Some(out);
    println!("{}", render_table(&results).trim_end());
    let med = |name: &str| -> Result<f64, String> {
        let r = results.iter().find(|r| r.name == name).ok_or_else(|| format!("missing scenario {name}"))?;
        Ok(median(&r.f1))
    };
    let (real, hist, dst) = (med("real")?, med("real+hist")?, med("real+dst")?);
    check(dst > real, || format!("real+dst {dst:.4} <= real {real:.4}"))?;
    check(dst > hist, || format!("real+dst {dst:.4} <= real+hist {hist:.4}"))?;
    within(elapsed, Duration::from_secs(45 * 60), "benchmark")?;
    Ok(format!("median F1 real {real:.4}, real+hist {hist:.4}, real+dst {dst:.4}, {elapsed:.0?}"))
}

// --------------------------------------------------------------- criterion 10

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn criterion_10(runs: &mut Runs) -> Outcome {
    let mut diffs = Vec::new();

    let (first, _) = smoke_dst(runs)?;
    let (first_history, first_params) = (first.history.clone(), first.params.clone());
    let (again, _) = train_smoke_dst()?;
    let log = |h: &[defectforge::losses::LossReport]| serde_json::to_string(h).unwrap();
    if log(&first_history) != log(&again.history) || first_params != again.params {
        diffs.push("dst");
    }

    match &runs.seg {
        Some(first) => {
            let again = train_smoke_seg()?;
            let same = same_bits(&first.run.step_losses, &again.run.step_losses)
                && first.run.params == again.run.params
                && serde_json::to_string(&first.run.epochs).unwrap()
                    == serde_json::to_string(&again.run.epochs).unwrap()
                && first.test.counts == again.test.counts
                && first.test.micro.f1.to_bits() == again.test.micro.f1.to_bits();
            if !same {
                diffs.push("seg");
            }
        }
        None => return Err("criterion 8 did not produce a run".into()),
    }

    match &runs.bench {
        Some(first) => {
            let again = benchmark()?;
            if format!("{:?}", first.outcome) != format!("{:?}", again.outcome) {
                diffs.push("benchmark metrics");
            }
            if first.files != again.files {
                diffs.push("benchmark files");
            }
        }
        None => return Err("criterion 9 did not produce a run".into()),
    }
    check(diffs.is_empty(), || format!("reruns differ: {}", diffs.join(", ")))?;
    Ok("dst history and weights, seg losses and metrics, benchmark table and files identical".into())
}

// ------------------------------------------------------------------- harness

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    // Bare numbers select criteria; libtest flags are ignored.
    let only: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let mut runs = Runs::default();
    let criteria: Vec<(u32, Criterion)> = vec![
        (1, Box::new(|_| criterion_1())),
        (2, Box::new(|_| criterion_2())),
        (3, Box::new(|_| criterion_3())),
        (4, Box::new(criterion_4)),
        (5, Box::new(criterion_5)),
        (6, Box::new(criterion_6)),
        (7, Box::new(|_| criterion_7())),
        (8, Box::new(criterion_8)),
        (9, Box::new(criterion_9)),
        (10, Box::new(criterion_10)),
    ];
    let mut failed = 0;
    for (n, f) in criteria.iter().filter(|(n, _)| only.is_empty() || only.contains(n)) {
        let result = catch_unwind(AssertUnwindSafe(|| f(&mut runs)))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        match result {
            Ok(detail) => println!("criterion {n}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL ({detail})");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
