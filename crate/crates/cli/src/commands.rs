use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use defectforge::checks::gradient_suite;
use defectforge::eval::{evaluate_model, load_pairs, render_table, run_comparison};
use defectforge::pipeline::{generate_set, load_backgrounds, load_references, scenario, train_reference};
use defectforge::seg::{train_seg, SegConfig, SegNetParams};
use defectforge::synth::{make_benchmark, BenchmarkManifests, DefectKind};
use defectforge::transfer::TransferNetParams;
use serde::Serialize;
use serde_json::json;

use crate::config::{check_scenarios, RunConfig};
use crate::{Cli, Command, GenerateArgs, TrainSegArgs};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<defectforge::Error> for Failure {
    fn from(e: defectforge::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Fixed locations under the work directory.
struct Layout {
    work: PathBuf,
}

impl Layout {
    fn bench(&self) -> BenchmarkManifests {
        BenchmarkManifests::under(&self.work.join("bench"))
    }
    fn dst_model(&self, kind: DefectKind) -> PathBuf {
        self.work.join("models").join(format!("dst-{}.dstw", kind.name()))
    }
    fn seg_model(&self) -> PathBuf {
        self.work.join("models").join("seg.dstw")
    }
    fn sim(&self, hist_only: bool) -> PathBuf {
        self.work.join(if hist_only { "sim_hist" } else { "sim_dst" })
    }
}

/// One JSON object per line: the invocation and config first, then records.
struct RunLog {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl RunLog {
    fn create(layout: &Layout, name: &str, cfg: &RunConfig, argv: &[String]) -> Result<Self, Failure> {
        let dir = layout.work.join("logs");
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let path = dir.join(format!("{name}.jsonl"));
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut log = RunLog { path, out: BufWriter::new(file) };
        log.record(&json!({ "command": name, "argv": argv, "config": cfg }))?;
        Ok(log)
    }

    fn record(&mut self, value: &impl Serialize) -> Outcome {
        let line = serde_json::to_string(value).expect("records serialize");
        writeln!(self.out, "{line}").map_err(|e| io_err(&self.path, e))
    }

    fn finish(mut self) -> Outcome {
        self.out.flush().map_err(|e| io_err(&self.path, e))
    }
}

fn fresh_dir(dir: &Path) -> Outcome {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(())
}

fn require(path: &Path, hint: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} not found; {hint}", path.display())))
    }
}

pub fn run(cli: Cli, argv: &[String]) -> Outcome {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    if let Some(w) = cli.work {
        cfg.paths.work = w;
    }
    let layout = Layout { work: cfg.paths.work.clone() };
    match cli.command {
        Command::Synth { seed } => synth(&cfg, &layout, argv, seed),
        Command::TrainDst { types } => train_dst(&cfg, &layout, argv, &types),
        Command::Generate(args) => generate(&cfg, &layout, argv, &args),
        Command::TrainSeg(args) => train_segmenter(&cfg, &layout, argv, args),
        Command::Eval { model, test } => evaluate(&cfg, &layout, argv, model, test),
        Command::Compare { scenarios, seeds } => compare(&cfg, &layout, argv, scenarios, seeds),
        Command::Gradcheck => gradcheck(&cfg, &layout, argv),
    }
}

fn synth(cfg: &RunConfig, layout: &Layout, argv: &[String], seed: Option<u64>) -> Outcome {
    let seed = seed.unwrap_or(cfg.seeds.benchmark);
    let root = layout.work.join("bench");
    fresh_dir(&root)?;
    let m = make_benchmark(&cfg.benchmark, seed, &root)?;
    let mut log = RunLog::create(layout, "synth", cfg, argv)?;
    log.record(&json!({ "seed": seed, "counts": cfg.benchmark, "root": root }))?;
    println!("benchmark written to {} (seed {seed})", root.display());
    for (name, path) in [
        ("backgrounds", &m.backgrounds),
        ("references", &m.references),
        ("real_train", &m.real_train),
        ("test", &m.test),
    ] {
        println!("  {name:<12} {}", path.display());
    }
    log.finish()
}

fn train_dst(cfg: &RunConfig, layout: &Layout, argv: &[String], types: &[String]) -> Outcome {
    let wanted = types
        .iter()
        .map(|t| DefectKind::parse(t).map_err(|e| Failure::Usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let bench = layout.bench();
    require(&bench.references, "run `synth` first")?;
    let backgrounds = load_backgrounds(&bench.backgrounds)?;
    let references = load_references(&bench.references)?;
    if let Some(k) = wanted.iter().find(|k| references.iter().all(|r| r.kind != **k)) {
        return Err(Failure::Runtime(format!("no reference of type `{}`", k.name())));
    }
    for r in references.iter().filter(|r| wanted.is_empty() || wanted.contains(&r.kind)) {
        let kind = r.kind.name();
        let mut log = RunLog::create(layout, &format!("train-dst-{kind}"), cfg, argv)?;
        let mut write_error = None;
        let run = train_reference(&backgrounds, r, &cfg.dst, |i, report| {
            if write_error.is_none() {
                write_error = log.record(&json!({ "iteration": i, "loss": report })).err();
            }
        })?;
        if let Some(e) = write_error {
            return Err(e);
        }
        let path = layout.dst_model(r.kind);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        run.params.save(&path)?;
        log.record(&json!({ "saved": path }))?;
        log.finish()?;
        let first = run.history.first().map_or(f64::NAN, |r| r.total);
        let last = run.history.last().map_or(f64::NAN, |r| r.total);
        println!(
            "{kind}: {} iterations, total loss {first:.4} -> {last:.4}, saved {}",
            run.history.len(),
            path.display()
        );
    }
    Ok(())
}

fn generate(cfg: &RunConfig, layout: &Layout, argv: &[String], args: &GenerateArgs) -> Outcome {
    let bench = layout.bench();
    require(&bench.references, "run `synth` first")?;
    let backgrounds = load_backgrounds(&bench.backgrounds)?;
    let references = load_references(&bench.references)?;
    let mut nets = Vec::with_capacity(references.len());
    if !args.hist_only {
        for r in &references {
            let path = layout.dst_model(r.kind);
            require(&path, "run `train-dst` first or pass --hist-only")?;
            nets.push(TransferNetParams::load(&path)?);
        }
    }
    let models: Vec<_> = references.iter().enumerate().map(|(i, r)| (r, nets.get(i))).collect();
    let count = args.count.unwrap_or(cfg.generate.count);
    if count == 0 {
        return Err(Failure::Usage("--count must be >= 1".into()));
    }
    let seed = args.seed.unwrap_or(cfg.seeds.generate);
    let out = layout.sim(args.hist_only);
    fresh_dir(&out)?;
    let manifest = generate_set(&backgrounds, &models, count, seed, &cfg.dst, &out)?;
    let mut log = RunLog::create(layout, if args.hist_only { "generate-hist" } else { "generate-dst" }, cfg, argv)?;
    log.record(&json!({ "count": count, "seed": seed, "hist_only": args.hist_only, "manifest": manifest }))?;
    println!("{count} samples written, manifest {}", manifest.display());
    log.finish()
}

fn train_segmenter(cfg: &RunConfig, layout: &Layout, argv: &[String], args: TrainSegArgs) -> Outcome {
    let manifests = if args.train.is_empty() { vec![layout.bench().real_train] } else { args.train };
    let mut train = Vec::new();
    for m in &manifests {
        require(m, "check --train")?;
        train.extend(load_pairs(m)?);
    }
    let val = match &args.val {
        Some(v) => Some(load_pairs(v)?),
        None => None,
    };
    let seg = SegConfig { seed: args.seed.unwrap_or(cfg.seg.seed), ..cfg.seg.clone() };
    let run = train_seg(&train, val.as_deref(), &seg)?;
    let out = args.out.unwrap_or_else(|| layout.seg_model());
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    run.params.save(&out)?;
    let mut log = RunLog::create(layout, "train-seg", cfg, argv)?;
    log.record(&json!({ "train": manifests, "images": train.len(), "seed": seg.seed }))?;
    for (step, loss) in run.step_losses.iter().enumerate() {
        log.record(&json!({ "step": step, "loss": loss }))?;
    }
    for e in &run.epochs {
        log.record(e)?;
    }
    log.record(&json!({ "saved": out }))?;
    let last = run.step_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "{} steps on {} images, final loss {last:.4}, saved {}",
        run.step_losses.len(),
        train.len(),
        out.display()
    );
    log.finish()
}

fn evaluate(
    cfg: &RunConfig,
    layout: &Layout,
    argv: &[String],
    model: Option<PathBuf>,
    test: Option<PathBuf>,
) -> Outcome {
    let model = model.unwrap_or_else(|| layout.seg_model());
    let test = test.unwrap_or_else(|| layout.bench().test);
    require(&model, "run `train-seg` first or pass --model")?;
    require(&test, "run `synth` first or pass --test")?;
    let report = evaluate_model(&SegNetParams::load(&model)?, &test)?;
    let mut log = RunLog::create(layout, "eval", cfg, argv)?;
    log.record(&json!({ "model": model, "test": test, "report": report }))?;
    let m = report.micro;
    println!(
        "precision {:.4}  recall {:.4}  f1 {:.4}  ({} images)",
        m.precision,
        m.recall,
        m.f1,
        report.per_image.len()
    );
    println!("{}", serde_json::to_string(&json!({ "counts": report.counts, "micro": m })).expect("serializes"));
    log.finish()
}

fn compare(cfg: &RunConfig, layout: &Layout, argv: &[String], scenarios: Vec<String>, seeds: Option<u64>) -> Outcome {
    let names = if scenarios.is_empty() { cfg.compare.scenarios.clone() } else { scenarios };
    check_scenarios(&names).map_err(Failure::Usage)?;
    let seeds: Vec<u64> = match seeds {
        Some(0) => return Err(Failure::Usage("--seeds must be >= 1".into())),
        Some(n) => (0..n).collect(),
        None => cfg.seeds.compare.clone(),
    };
    let bench = layout.bench();
    let (hist, dst) = (layout.sim(true).join("manifest.jsonl"), layout.sim(false).join("manifest.jsonl"));
    let list = names.iter().map(|n| scenario(n, &bench, &hist, &dst, &cfg.seg)).collect::<Result<Vec<_>, _>>()?;
    for s in &list {
        for m in s.train.iter().chain([&s.test]) {
            require(m, "run `synth` and `generate` first")?;
        }
    }
    let results = run_comparison(&list, &seeds)?;
    let mut log = RunLog::create(layout, "compare", cfg, argv)?;
    print!("{}", render_table(&results));
    for r in &results {
        log.record(r)?;
        println!("{}", serde_json::to_string(r).expect("serializes"));
    }
    log.finish()
}

fn gradcheck(cfg: &RunConfig, layout: &Layout, argv: &[String]) -> Outcome {
    let cases = gradient_suite()?;
    let mut log = RunLog::create(layout, "gradcheck", cfg, argv)?;
    let mut failed = 0;
    for c in &cases {
        log.record(c)?;
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!c.passed());
        println!(
            "{:<10} {}  max rel error {:.3e}  (< {:.0e})  {verdict}",
            c.name, c.precision, c.max_rel_error, c.tolerance
        );
    }
    log.finish()?;
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} gradient checks above tolerance")));
    }
    Ok(())
}
