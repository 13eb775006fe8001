use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use orthocare::config::ExperimentConfig;
use orthocare::interpret::{emit_plots, quadrant_report};
use orthocare::probeval::{compute_metrics, probe_cosines, MetricReport, ProbeData};
use orthocare::trainer::{predict, run_baseline, run_variant, strip_labels, BaselineKind, Checkpoint, Variant};
use orthocare::verify::{gradcheck, verify_math, SuiteReport};
use orthocare::{Error, Result};

use crate::args::{parse_seeds, Command, Common};
use crate::artifacts::{ensure_dir, obtain_data, save_data, write, write_config, write_json, write_manifest};

/// Why a command did not succeed.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    /// Malformed flags or environment.
    Usage(String),
    /// A verification suite ran and found violations.
    Checks(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

pub const CHECKPOINT: &str = "model.ckpt";
pub const THREADS_VAR: &str = "ORTHOCARE_THREADS";

fn load_config(common: &Common, shift: Option<f64>, variant: Option<&str>) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(shift) = shift {
        cfg.data.shift_strength = shift;
    }
    if let Some(v) = variant {
        cfg.train.variant = Variant::parse(v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn dispatch(command: &Command) -> Outcome {
    match command {
        Command::GenData { common, shift } => gen_data(common, *shift),
        Command::Train { common, variant, shift, seeds, data } => {
            train(common, variant.as_deref(), *shift, seeds.as_deref(), data.as_deref())
        }
        Command::Eval { common, k, data } => eval(common, *k, data.as_deref()),
        Command::Interpret { common, k, data } => interpret(common, *k, data.as_deref()),
        Command::Probe { common, data } => probe(common, data.as_deref()),
        Command::Gradcheck { common } => suite(common, "gradcheck", gradcheck),
        Command::VerifyMath { common } => suite(common, "verify-math", verify_math),
    }
}

fn gen_data(common: &Common, shift: Option<f64>) -> Outcome {
    let cfg = load_config(common, shift, None)?;
    let (source, target) = obtain_data(None, &cfg)?;
    save_data(&common.out, &[&source, &target])?;
    write_config(&common.out, &cfg)?;
    write_manifest(&common.out, "gen-data", &cfg, vec![cfg.data.seed])?;
    println!(
        "wrote {} source and {} target records to {}",
        source.train.len() + source.valid.len() + source.test.len(),
        target.train.len() + target.valid.len() + target.test.len(),
        common.out.display()
    );
    Ok(())
}

fn thread_cap() -> std::result::Result<usize, Failure> {
    match std::env::var(THREADS_VAR) {
        Ok(text) => match text.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Failure::Usage(format!("{THREADS_VAR} must be a positive integer, got {text:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Trains one seed into `dir` and returns a summary line.
fn train_one(cfg: &ExperimentConfig, data_dir: Option<&Path>, dir: &Path) -> Result<String> {
    ensure_dir(dir)?;
    let (source, target) = obtain_data(data_dir, cfg)?;
    let target_train = match cfg.train.variant {
        Variant::Oracle => target.train.records.clone(),
        _ => strip_labels(&target.train.records),
    };
    let mut log = String::new();
    let outcome = run_variant(cfg, &source.train.records, &target_train, Some(&target.valid.records), |_, _| Ok(()))?;
    for line in &outcome.log {
        log.push_str(&serde_json::to_string(line).expect("log lines serialize"));
        log.push('\n');
    }
    write(&dir.join("train_log.jsonl"), log.as_bytes())?;
    outcome.selected.save(&dir.join(CHECKPOINT))?;
    write_config(dir, cfg)?;
    write_manifest(dir, "train", cfg, vec![cfg.train.seed])?;
    let chosen = outcome.log.iter().find(|l| l.selected).or(outcome.log.last());
    Ok(format!(
        "seed {}: {} selected epoch {} (target-valid w-F1 {})",
        cfg.train.seed,
        cfg.train.variant.name(),
        outcome.selected.epoch,
        chosen.and_then(|l| l.selection_w_f1).map_or("n/a".into(), |x| format!("{x:.4}"))
    ))
}

fn train(common: &Common, variant: Option<&str>, shift: Option<f64>, seeds: Option<&str>, data: Option<&Path>) -> Outcome {
    let cfg = load_config(common, shift, variant)?;
    let Some(seeds) = seeds else {
        println!("{}", train_one(&cfg, data, &common.out)?);
        return Ok(());
    };
    let seeds = parse_seeds(seeds).map_err(Failure::Usage)?;
    let threads = thread_cap()?.min(seeds.len());
    ensure_dir(&common.out)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<String>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = seeds.get(i) else { break };
                let dir = common.out.join(format!("seed_{seed}"));
                let line = train_one(&cfg.clone().with_seed(seed), data, &dir);
                if let Ok(text) = &line {
                    let _ = writeln!(std::io::stdout(), "{text}");
                }
                results.lock().expect("no worker panics while holding the lock").push((i, line));
            });
        }
    });
    let mut results = results.into_inner().expect("workers finished");
    results.sort_by_key(|(i, _)| *i);
    for (_, r) in results {
        r?;
    }
    write_config(&common.out, &cfg)?;
    write_manifest(&common.out, "train", &cfg, seeds)?;
    Ok(())
}

fn seed_dirs(out: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut found = Vec::new();
    let entries = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(out, e))?.path();
        let seed = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_prefix("seed_")).and_then(|n| n.parse().ok());
        if let Some(seed) = seed {
            if path.join(CHECKPOINT).is_file() {
                found.push((seed, path));
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Checkpoints under `out`: `out/model.ckpt`, or one per `seed_N/` directory. `seed`
/// narrows the choice to a single run.
fn checkpoints(out: &Path, seed: Option<u64>) -> Result<Vec<Checkpoint>> {
    let direct = out.join(CHECKPOINT);
    let missing = || Error::Input(format!("no {CHECKPOINT} under {}; run train first", out.display()));
    if let Some(seed) = seed {
        let in_dir = out.join(format!("seed_{seed}")).join(CHECKPOINT);
        if in_dir.is_file() {
            return Ok(vec![Checkpoint::load(&in_dir)?]);
        }
        if direct.is_file() {
            let ckpt = Checkpoint::load(&direct)?;
            if ckpt.config.train.seed == seed {
                return Ok(vec![ckpt]);
            }
        }
        return Err(Error::Input(format!("no checkpoint for seed {seed} under {}", out.display())));
    }
    if direct.is_file() {
        return Ok(vec![Checkpoint::load(&direct)?]);
    }
    if !out.is_dir() {
        return Err(missing());
    }
    let dirs = seed_dirs(out)?;
    if dirs.is_empty() {
        return Err(missing());
    }
    dirs.iter().map(|(_, d)| Checkpoint::load(&d.join(CHECKPOINT))).collect()
}

fn single_checkpoint(out: &Path, seed: Option<u64>) -> Result<Checkpoint> {
    let mut found = checkpoints(out, seed)?;
    if found.len() > 1 {
        return Err(Error::Input(format!(
            "{} holds {} seed runs; pick one with --seed",
            out.display(),
            found.len()
        )));
    }
    Ok(found.remove(0))
}

fn eval(common: &Common, k: Option<usize>, data: Option<&Path>) -> Outcome {
    let mut user = load_config(common, None, None)?;
    if let Some(k) = k {
        user.eval.k = k;
        user.validate()?;
    }
    let mut seeds = Vec::new();
    let mut per_seed = Vec::new();
    for ckpt in checkpoints(&common.out, common.seed)? {
        let (_, target) = obtain_data(data, &ckpt.config)?;
        let probs = predict(&ckpt.model, &target.test.records)?;
        let labels: Vec<Vec<u8>> = target.test.records.iter().map(|r| r.label.clone()).collect();
        let m = compute_metrics(&probs, &labels, &user.eval)?;
        println!(
            "seed {}: w-F1 {:.4}  R@{} {:.4}  AUROC {:.4}  F1 {:.4}",
            ckpt.config.train.seed, m.w_f1, user.eval.k, m.recall_at_k, m.auroc, m.f1
        );
        seeds.push(ckpt.config.train.seed);
        per_seed.push(m);
    }
    let report = MetricReport::aggregate(user.eval.k, seeds.clone(), per_seed);
    write_json(&common.out.join("metrics.json"), &report)?;
    write_manifest(&common.out, "eval", &user, seeds)?;
    Ok(())
}

fn interpret(common: &Common, k: Option<usize>, data: Option<&Path>) -> Outcome {
    let mut user = load_config(common, None, None)?;
    if let Some(k) = k {
        user.interpret.top_k = k;
        user.validate()?;
    }
    let ckpt = single_checkpoint(&common.out, common.seed)?;
    let (_, target) = obtain_data(data, &ckpt.config)?;
    let records = &target.test.records[..user.interpret.patients.min(target.test.len())];
    let report = quadrant_report(&ckpt, records, &user.interpret)?;
    let dir = common.out.join("interpret");
    ensure_dir(&dir)?;
    let files = emit_plots(&report, &dir)?;
    let above = report.codes().filter(|c| c.label_delta > user.interpret.label_threshold).count();
    println!(
        "explained {} patients; {} codes above the {} label threshold; {} files in {}",
        report.patients.len(),
        above,
        user.interpret.label_threshold,
        files.len(),
        dir.display()
    );
    write_manifest(&common.out, "interpret", &user, vec![ckpt.config.train.seed])?;
    Ok(())
}

fn probe(common: &Common, data: Option<&Path>) -> Outcome {
    let user = load_config(common, None, None)?;
    let ckpt = single_checkpoint(&common.out, common.seed)?;
    let cfg = &ckpt.config;
    let weights = cfg.train.variant.effective_weights(cfg.loss);
    if ckpt.stage < 2 || weights.lambda2 == 0.0 {
        return Err(Error::Input(format!(
            "probe needs a model with a trained dictionary; {} at stage {} has none",
            cfg.train.variant.name(),
            ckpt.stage
        ))
        .into());
    }
    let (source, target) = obtain_data(data, cfg)?;
    let mut base_cfg = cfg.clone();
    base_cfg.probe = user.probe;
    let base = run_baseline(BaselineKind::Base, &base_cfg, &source.train.records, &[], Some(&target.valid.records))?;
    let probe_data = ProbeData {
        source_train: &source.train.records,
        target_train: &target.train.records,
        source_heldout: &source.test.records,
        target_heldout: &target.test.records,
    };
    let (_, mode) = cfg.train.variant.metric_modes(cfg.train.freeze_metric_in_recon);
    let result = probe_cosines(&base.selected.model, &ckpt.model, &probe_data, mode, cfg.train.epsilon, &user.probe)?;
    let m = &result.mean;
    println!(
        "source cos(Wc(v0),Wd(v0)) {:.3}  cos(Wc(v0),Wc(z)) {:.3}  cos(Wc(v0),Wc(v)) {:.3}  domain acc v {:.3} z {:.3}",
        result.source.class_vs_domain_base, m.base_vs_residual, m.base_vs_adapted, result.domain_accuracy_v, result.domain_accuracy_z
    );
    write_json(&common.out.join("probe.json"), &result)?;
    write_manifest(&common.out, "probe", &user, vec![cfg.train.seed])?;
    Ok(())
}

fn suite(common: &Common, name: &str, run: fn(u64) -> Result<SuiteReport>) -> Outcome {
    let cfg = load_config(common, None, None)?;
    let report = run(cfg.train.seed)?;
    for c in &report.checks {
        println!(
            "{} {:<26} worst {:.3e}  tolerance {:.0e}  violations {}/{}  {:.2}s",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.worst,
            c.tolerance,
            c.violations,
            c.instances,
            c.seconds
        );
    }
    ensure_dir(&common.out)?;
    write_json(&common.out.join(format!("{}.json", name.replace('-', "_"))), &report)?;
    write_manifest(&common.out, name, &cfg, vec![report.seed])?;
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Checks(format!("{name}: {} of {} checks failed: {}", failed.len(), report.checks.len(), failed.join(", "))))
    }
}
