//! Subcommand implementations. Every artifact lives under one run directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use cpriv_core::checkpoint::{load_classifier, save_classifier};
use cpriv_core::data::{
    export_dataset, generate_dataset, import_dataset, mix_seed, Dataset, Renderer, Split,
};
use cpriv_core::evaluation::{attack_retrain, conditional_breakdown, evaluate_tradeoff, EvalCell};
use cpriv_core::export::{export_sanitizer, import_sanitizer, import_sanitizer_for, read_bundle, BundleMetadata};
use cpriv_core::models::{Classifier, SanitizerKind, SanitizerModel};
use cpriv_core::report::{emit_report, LabeledBreakdown, LabeledLog, ReportDocument};
use cpriv_core::service::{serve, simulate_capture, CaptureConfig, EntityModels, RetryPolicy, ServerConfig};
use cpriv_core::training::{self, pretrain_classifiers, TrainLog, TrainMode};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{Architecture, RunConfig};

pub struct Ctx {
    pub cfg: RunConfig,
    pub run_dir: PathBuf,
    pub workers: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub error: String,
}

/// Failures collected while a command keeps going; written as `failures.json`.
#[derive(Debug, Default)]
pub struct Manifest {
    pub failures: Vec<Failure>,
}

impl Manifest {
    pub fn record(&mut self, stage: impl Into<String>, error: &anyhow::Error) {
        let f = Failure {
            stage: stage.into(),
            error: format!("{error:#}"),
        };
        warn!("{} failed: {}", f.stage, f.error);
        self.failures.push(f);
    }

    pub fn write(&self, run_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(run_dir)?;
        let path = run_dir.join("failures.json");
        fs::write(&path, serde_json::to_vec_pretty(&self.failures)?)?;
        Ok(path)
    }
}

fn dataset_dirs(run_dir: &Path) -> (PathBuf, PathBuf) {
    (run_dir.join("data").join("train"), run_dir.join("data").join("test"))
}

fn models_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("models")
}

fn write_config(ctx: &Ctx) -> Result<()> {
    fs::create_dir_all(&ctx.run_dir)?;
    let path = ctx.run_dir.join("config.toml");
    if !path.exists() {
        fs::write(&path, ctx.cfg.to_toml()?)?;
    }
    Ok(())
}

/// Load the datasets of a run, generating them first if needed.
pub fn ensure_data(ctx: &Ctx) -> Result<(Dataset, Dataset)> {
    write_config(ctx)?;
    let (train_dir, test_dir) = dataset_dirs(&ctx.run_dir);
    if train_dir.join("metadata.json").exists() && test_dir.join("metadata.json").exists() {
        let (_, train) = import_dataset(&train_dir)?;
        let (_, test) = import_dataset(&test_dir)?;
        return Ok((train, test));
    }
    info!(
        "generating {} train / {} test samples",
        ctx.cfg.dataset.train_size, ctx.cfg.dataset.test_size
    );
    let (train, test) = generate_dataset(&ctx.cfg.dataset)?;
    export_dataset(&train_dir, &ctx.cfg.dataset, Split::Train, &train)?;
    export_dataset(&test_dir, &ctx.cfg.dataset, Split::Test, &test)?;
    Ok((train, test))
}

pub fn cmd_gen_data(ctx: &Ctx) -> Result<()> {
    let (train, test) = ensure_data(ctx)?;
    let (train_dir, test_dir) = dataset_dirs(&ctx.run_dir);
    println!("train: {} samples in {}", train.len(), train_dir.display());
    println!("test:  {} samples in {}", test.len(), test_dir.display());
    Ok(())
}

/// Load pretrained classifiers, training them first if needed.
pub fn ensure_pretrained(ctx: &Ctx, train: &Dataset) -> Result<(Classifier, Classifier)> {
    let dir = models_dir(&ctx.run_dir);
    let (u_path, p_path) = (dir.join("utility.ckpt"), dir.join("privacy.ckpt"));
    if u_path.exists() && p_path.exists() {
        return Ok((load_classifier(&u_path)?, load_classifier(&p_path)?));
    }
    let start = Instant::now();
    let (utility, privacy, summary) = pretrain_classifiers(train, ctx.cfg.dataset.num_subjects, &ctx.cfg.pretrain)?;
    fs::create_dir_all(&dir)?;
    save_classifier(&utility, &u_path)?;
    save_classifier(&privacy, &p_path)?;
    fs::write(dir.join("pretrain.json"), serde_json::to_vec_pretty(&summary)?)?;
    info!("pretraining took {:.1?}", start.elapsed());
    Ok((utility, privacy))
}

pub fn cmd_pretrain(ctx: &Ctx) -> Result<()> {
    let (train, test) = ensure_data(ctx)?;
    let (utility, privacy) = ensure_pretrained(ctx, &train)?;
    let post = cpriv_core::evaluation::collect_posteriors(
        None,
        &utility,
        &utility,
        &privacy,
        ctx.cfg.dataset.prior,
        &test,
        ctx.cfg.evaluation.seed,
    )?;
    println!("utility hash {}", utility.param_hash());
    println!("privacy hash {}", privacy.param_hash());
    for &k in &ctx.cfg.evaluation.topk {
        println!("test top-{k} utility accuracy {:.4}", post.topk(k, ctx.cfg.evaluation.seed)?);
    }
    println!("test privacy accuracy {:.4}", post.privacy_accuracy());
    Ok(())
}

/// One (architecture, mode, α) combination of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub architecture: Architecture,
    pub mode: TrainMode,
    pub alpha: f64,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}_{}_alpha{}", self.architecture.name(), self.mode.name(), self.alpha)
    }

    pub fn dir(&self, run_dir: &Path) -> PathBuf {
        run_dir.join("cells").join(self.name())
    }

    pub fn seed(&self, global: u64) -> u64 {
        let mode_tag = match self.mode {
            TrainMode::PlugAndPlay => 1,
            TrainMode::Adversarial => 2,
            TrainMode::Collaborative => 3,
        };
        mix_seed(
            mix_seed(global, self.architecture as u64 + 1),
            mix_seed(mode_tag, self.alpha.to_bits()),
        )
    }
}

pub fn cells(cfg: &RunConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &architecture in &cfg.architectures {
        for &mode in &cfg.modes {
            for &alpha in &cfg.alphas {
                out.push(Cell {
                    architecture,
                    mode,
                    alpha,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellRecord {
    architecture: Architecture,
    mode: TrainMode,
    alpha: f64,
    seed: u64,
    seconds: f64,
    sanitizer_hash: String,
}

/// A trained cell loaded back from disk.
pub struct TrainedCell {
    pub cell: Cell,
    pub sanitizer: SanitizerModel,
    pub utility: Classifier,
    pub privacy: Classifier,
    pub log: TrainLog,
}

fn train_cell(ctx: &Ctx, cell: Cell, train: &Dataset, utility: &Classifier, privacy: &Classifier) -> Result<()> {
    let dir = cell.dir(&ctx.run_dir);
    if dir.join("cell.json").exists() {
        info!("{}: already trained, reusing", cell.name());
        return Ok(());
    }
    fs::create_dir_all(&dir)?;
    let seed = cell.seed(ctx.cfg.seed);
    let renderer = Renderer::new(&ctx.cfg.dataset)?;
    let sanitizer = SanitizerModel::new(cell.architecture.kind(), &renderer, mix_seed(seed, 0x5a));
    let tcfg = ctx.cfg.train_config(cell.mode, cell.alpha, seed);
    let start = Instant::now();
    let outcome = match training::train(sanitizer, utility, privacy, ctx.cfg.dataset.prior, train, &tcfg) {
        Ok(o) => o,
        Err(e) => {
            if let cpriv_core::Error::Training { log, .. } = &e {
                let mut f = fs::File::create(dir.join("loss.partial.csv"))?;
                log.write_csv(&mut f)?;
            }
            return Err(e.into());
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join("loss.csv"))?);
    outcome.log.write_csv(&mut f)?;
    f.flush()?;
    let meta = BundleMetadata {
        alpha: Some(cell.alpha),
        mode: Some(cell.mode.name().into()),
        seed: Some(seed),
        ..BundleMetadata::default()
    };
    export_sanitizer(&outcome.sanitizer, meta, &dir.join("sanitizer.psf1"))?;
    if cell.mode == TrainMode::Adversarial {
        save_classifier(&outcome.privacy, &dir.join("privacy.ckpt"))?;
    }
    if cell.mode == TrainMode::Collaborative {
        save_classifier(&outcome.utility, &dir.join("utility.ckpt"))?;
    }
    let record = CellRecord {
        architecture: cell.architecture,
        mode: cell.mode,
        alpha: cell.alpha,
        seed,
        seconds,
        sanitizer_hash: outcome.sanitizer.param_hash(),
    };
    fs::write(dir.join("cell.json"), serde_json::to_vec_pretty(&record)?)?;
    info!("{}: trained in {seconds:.1}s", cell.name());
    Ok(())
}

pub fn load_cell(ctx: &Ctx, cell: Cell, utility: &Classifier, privacy: &Classifier) -> Result<TrainedCell> {
    let dir = cell.dir(&ctx.run_dir);
    if !dir.join("cell.json").exists() {
        bail!("configuration error: no trained checkpoint for cell {}", cell.name());
    }
    let mut sanitizer = import_sanitizer_for(&dir.join("sanitizer.psf1"), ctx.cfg.dataset.image_shape)?;
    if sanitizer.kind == SanitizerKind::Stochastic {
        sanitizer.set_resampler(Renderer::new(&ctx.cfg.dataset)?);
    }
    let load_or = |name: &str, fallback: &Classifier| -> Result<Classifier> {
        let p = dir.join(name);
        Ok(if p.exists() { load_classifier(&p)? } else { fallback.clone() })
    };
    let log = match fs::File::open(dir.join("loss.csv")) {
        Ok(f) => TrainLog::read_csv(std::io::BufReader::new(f))?,
        Err(_) => TrainLog::default(),
    };
    Ok(TrainedCell {
        cell,
        sanitizer,
        utility: load_or("utility.ckpt", utility)?,
        privacy: load_or("privacy.ckpt", privacy)?,
        log,
    })
}

pub fn cmd_sweep(ctx: &Ctx) -> Result<Manifest> {
    let mut manifest = Manifest::default();
    let (train, test) = ensure_data(ctx)?;
    let (utility, privacy) = ensure_pretrained(ctx, &train)?;
    let all = cells(&ctx.cfg);
    info!("sweep: {} cells on {} worker(s)", all.len(), ctx.workers);
    let queue = Mutex::new(all.clone().into_iter());
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..ctx.workers.max(1) {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue lock").next();
                let Some(cell) = next else { break };
                if let Err(e) = train_cell(ctx, cell, &train, &utility, &privacy) {
                    failures.lock().expect("failure lock").push((cell.name(), e));
                }
            });
        }
    });
    for (name, e) in failures.into_inner().expect("failure lock") {
        manifest.record(format!("train {name}"), &e);
    }
    if let Err(e) = evaluate_run(ctx, &test, &utility, &privacy) {
        manifest.record("evaluate", &e);
    }
    Ok(manifest)
}

/// Evaluate every trained cell and write the report directory.
fn evaluate_run(ctx: &Ctx, test: &Dataset, utility: &Classifier, privacy: &Classifier) -> Result<()> {
    let prior = ctx.cfg.dataset.prior;
    let mut doc = ReportDocument {
        units: "nats".into(),
        ..ReportDocument::default()
    };
    let mut logs = Vec::new();
    let mut groups: BTreeMap<(Architecture, &'static str), Vec<TrainedCell>> = BTreeMap::new();
    for cell in cells(&ctx.cfg) {
        match load_cell(ctx, cell, utility, privacy) {
            Ok(t) => groups.entry((cell.architecture, cell.mode.name())).or_default().push(t),
            Err(e) => warn!("skipping {} in report: {e:#}", cell.name()),
        }
    }
    for ((arch, mode), trained) in &groups {
        let eval_cells: Vec<EvalCell> = trained
            .iter()
            .map(|t| EvalCell {
                alpha: t.cell.alpha,
                sanitizer: &t.sanitizer,
                utility: &t.utility,
                privacy: &t.privacy,
            })
            .collect();
        let alphas: Vec<f64> = trained.iter().map(|t| t.cell.alpha).collect();
        doc.tradeoffs.push(evaluate_tradeoff(
            arch.name(),
            mode,
            &eval_cells,
            utility,
            privacy,
            prior,
            test,
            &alphas,
            &ctx.cfg.evaluation,
        )?);
        doc.breakdowns.push(LabeledBreakdown {
            architecture: arch.name().into(),
            mode: (*mode).into(),
            breakdown: conditional_breakdown(None, privacy, prior, test, None, ctx.cfg.evaluation.seed)?,
        });
        for t in trained {
            doc.breakdowns.push(LabeledBreakdown {
                architecture: arch.name().into(),
                mode: (*mode).into(),
                breakdown: conditional_breakdown(
                    Some(&t.sanitizer),
                    &t.privacy,
                    prior,
                    test,
                    Some(t.cell.alpha),
                    ctx.cfg.evaluation.seed,
                )?,
            });
            logs.push(LabeledLog {
                architecture: arch.name().into(),
                mode: (*mode).into(),
                alpha: t.cell.alpha,
                log: t.log.clone(),
            });
        }
    }
    let out = ctx.run_dir.join("report");
    let files = emit_report(&doc, &logs, &out)?;
    print_tradeoffs(&doc);
    println!("report: {} files in {}", files.len(), out.display());
    Ok(())
}

fn print_tradeoffs(doc: &ReportDocument) {
    for t in &doc.tradeoffs {
        println!("{} / {} (KL in {})", t.architecture, t.mode, t.units);
        println!("  {:>6}  {:>10}  {:>10}  {:>6}  {:>6}", "alpha", "utility_kl", "privacy_kl", "top1", "top3");
        for r in std::iter::once(&t.raw).chain(&t.rows) {
            let a = r.alpha.map_or("raw".to_string(), |a| a.to_string());
            let acc = |k| r.topk_accuracy(k).map_or("-".into(), |v| format!("{v:.3}"));
            println!(
                "  {a:>6}  {:>10.4}  {:>10.4}  {:>6}  {:>6}",
                r.utility_kl,
                r.privacy_kl,
                acc(1),
                acc(3)
            );
        }
    }
}

pub fn cmd_report(ctx: &Ctx) -> Result<()> {
    let (train, test) = ensure_data(ctx)?;
    let (utility, privacy) = ensure_pretrained(ctx, &train)?;
    evaluate_run(ctx, &test, &utility, &privacy)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AttackRow {
    architecture: Architecture,
    mode: TrainMode,
    alpha: f64,
    accuracy_before: f64,
    accuracy_after: f64,
    privacy_kl_before: f64,
    privacy_kl_after: f64,
}

pub fn cmd_attack(ctx: &Ctx) -> Result<Manifest> {
    let mut manifest = Manifest::default();
    let (train, test) = ensure_data(ctx)?;
    let models = models_dir(&ctx.run_dir);
    if !models.join("privacy.ckpt").exists() {
        bail!("configuration error: {} has no pretrained classifiers; run `sweep` first", ctx.run_dir.display());
    }
    let (utility, privacy) = ensure_pretrained(ctx, &train)?;
    let mut rows = Vec::new();
    for cell in cells(&ctx.cfg) {
        let result = load_cell(ctx, cell, &utility, &privacy).and_then(|t| {
            let a = attack_retrain(&t.sanitizer, &t.privacy, ctx.cfg.dataset.prior, &train, &test, &ctx.cfg.attack)?;
            Ok(AttackRow {
                architecture: cell.architecture,
                mode: cell.mode,
                alpha: cell.alpha,
                accuracy_before: a.accuracy_before,
                accuracy_after: a.accuracy_after,
                privacy_kl_before: a.privacy_kl_before,
                privacy_kl_after: a.privacy_kl_after,
            })
        });
        match result {
            Ok(r) => {
                info!("{}: attacker accuracy {:.3}", cell.name(), r.accuracy_after);
                rows.push(r);
            }
            Err(e) => manifest.record(format!("attack {}", cell.name()), &e),
        }
    }
    let out = ctx.run_dir.join("report");
    fs::create_dir_all(&out)?;
    fs::write(out.join("attack.json"), serde_json::to_vec_pretty(&rows)?)?;
    let mut csv = String::from("architecture,mode,alpha,accuracy_before,accuracy_after,privacy_kl_before,privacy_kl_after\n");
    println!(
        "{:<14} {:<14} {:>6} {:>10} {:>10} {:>10}",
        "architecture", "mode", "alpha", "acc_before", "acc_after", "kl_after"
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.architecture.name(),
            r.mode.name(),
            r.alpha,
            r.accuracy_before,
            r.accuracy_after,
            r.privacy_kl_before,
            r.privacy_kl_after
        ));
        println!(
            "{:<14} {:<14} {:>6} {:>10.3} {:>10.3} {:>10.4}",
            r.architecture.name(),
            r.mode.name(),
            r.alpha,
            r.accuracy_before,
            r.accuracy_after,
            r.privacy_kl_after
        );
    }
    fs::write(out.join("attack.csv"), csv)?;
    Ok(manifest)
}

pub struct ExportArgs {
    pub architecture: Architecture,
    pub mode: TrainMode,
    pub alpha: f64,
    pub out: PathBuf,
    pub golden: usize,
}

pub fn cmd_export(ctx: &Ctx, args: &ExportArgs) -> Result<()> {
    let cell = Cell {
        architecture: args.architecture,
        mode: args.mode,
        alpha: args.alpha,
    };
    let src = cell.dir(&ctx.run_dir).join("sanitizer.psf1");
    if !src.exists() {
        bail!("configuration error: no trained sanitizer at {}", src.display());
    }
    let bundle = read_bundle(&src)?;
    let model = import_sanitizer(&src)?;
    if let Some(parent) = args.out.parent() {
        fs::create_dir_all(parent)?;
    }
    export_sanitizer(&model, bundle.metadata.clone(), &args.out)?;
    println!("wrote {}", args.out.display());
    if args.golden > 0 {
        if model.kind == SanitizerKind::Stochastic {
            bail!("golden files need a deterministic sanitizer; stochastic bundles depend on the resampler");
        }
        let (_, test) = ensure_data(ctx)?;
        let n = args.golden.min(test.len());
        let inputs = test.take(n);
        let dir = golden_dir(&args.out);
        export_dataset(&dir.join("inputs"), &ctx.cfg.dataset, Split::Test, &inputs)?;
        let idx: Vec<usize> = (0..n).collect();
        let outputs = model.apply_stage(&inputs.batch(&idx))?;
        let bytes: Vec<u8> = outputs.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join("outputs.f32"), bytes)?;
        let manifest = serde_json::json!({
            "count": n,
            "shape": ctx.cfg.dataset.image_shape,
            "bundle": args.out.file_name().map(|f| f.to_string_lossy().into_owned()),
            "outputs": "outputs.f32 holds count x C x H x W little-endian f32 values",
        });
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        println!("wrote {n} golden input/output pairs to {}", dir.display());
    }
    Ok(())
}

fn golden_dir(bundle: &Path) -> PathBuf {
    let stem = bundle.file_stem().map_or("bundle".into(), |s| s.to_string_lossy().into_owned());
    bundle.with_file_name(format!("{stem}.golden"))
}

pub fn cmd_serve(ctx: &Ctx, server: &ServerConfig) -> Result<()> {
    let dir = models_dir(&ctx.run_dir);
    let utility = load_classifier(&dir.join("utility.ckpt"))
        .with_context(|| format!("loading classifiers from {}; run `pretrain` first", dir.display()))?;
    let privacy = load_classifier(&dir.join("privacy.ckpt"))?;
    let models = Arc::new(EntityModels::new(utility, privacy)?);
    let handle = serve(server, models)?;
    println!("listening on {}", handle.local_addr());
    handle.join();
    Ok(())
}

pub struct CaptureArgs {
    pub host: String,
    pub port: u16,
    pub sanitizer: Option<PathBuf>,
    pub limit: Option<usize>,
    pub output: Option<PathBuf>,
}

pub fn cmd_capture(ctx: &Ctx, args: &CaptureArgs) -> Result<()> {
    let (_, test) = ensure_data(ctx)?;
    let sanitizer = match &args.sanitizer {
        Some(p) => {
            let mut s = import_sanitizer_for(p, test.image_shape)?;
            if s.kind == SanitizerKind::Stochastic {
                s.set_resampler(Renderer::new(&ctx.cfg.dataset)?);
            }
            Some(s)
        }
        None => {
            info!("no sanitizer given: transmitting raw frames");
            None
        }
    };
    let cfg = CaptureConfig {
        host: args.host.clone(),
        port: args.port,
        limit: args.limit,
        retry: RetryPolicy::default(),
        seed: ctx.cfg.evaluation.seed,
    };
    let session = simulate_capture(&test, sanitizer.as_ref(), ctx.cfg.dataset.prior, &cfg);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for f in &session.frames {
        writeln!(out, "{}", serde_json::to_string(&f.result)?)?;
    }
    let summary = session.summary(ctx.cfg.dataset.prior);
    if let Some(s) = &summary {
        eprintln!(
            "{} frames; privacy KL {:.4} nats; privacy accuracy {:.3}; top-k {:?}",
            s.frames, s.privacy_kl, s.privacy_accuracy, s.topk
        );
    }
    if let Some(path) = &args.output {
        let doc = serde_json::json!({ "summary": summary, "frames": session.frames });
        fs::write(path, serde_json::to_vec_pretty(&doc)?)?;
    }
    match session.error {
        Some(e) => Err(anyhow!(e).context(format!("capture stopped after {} frames", session.frames.len()))),
        None => Ok(()),
    }
}
