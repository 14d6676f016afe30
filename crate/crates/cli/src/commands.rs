use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dinet::checkpoint::{load_checkpoint, save_checkpoint};
use dinet::config::RunConfig;
use dinet::data::{class_names, generate_dataset, read_dataset, write_dataset, DatasetSplit};
use dinet::gradcheck::{inject_fault, run_model_checks, run_op_checks, CheckReport, Fault, Tolerance};
use dinet::metrics::{evaluate, write_report, MetricsReport, RunMetadata};
use dinet::train::{steps_per_epoch, TrainMode, TrainState};
use dinet::{DiNetModel, Error};

use crate::settings::{echo_config, effective, out_dir, prepare_out_dir};
use crate::{Common, Scope};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Config(String),
    Path(String),
    Refused(String),
    GradCheck(Vec<String>),
}

impl CliError {
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.class(),
            CliError::Config(_) => "config",
            CliError::Path(_) => "path",
            CliError::Refused(_) => "refused",
            CliError::GradCheck(_) => "grad-check",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.class() {
            "config" | "invalid-argument" | "json" => 2,
            "path" | "io" | "image" => 3,
            "refused" => 4,
            "corrupt" | "version-mismatch" | "shape" => 5,
            "grad-check" => 6,
            "diverged" | "non-finite" => 7,
            _ => 8,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Config(m) | CliError::Path(m) | CliError::Refused(m) => f.write_str(m),
            CliError::GradCheck(ops) => write!(f, "gradient check failed for: {}", ops.join(", ")),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub fn generate_data(common: &Common) -> Result<(), CliError> {
    let cfg = effective(common, None)?;
    let dir = out_dir(&cfg)?;
    prepare_out_dir(&dir, common.force)?;
    let split = generate_dataset(&cfg.data)?;
    write_dataset(&split, &dir)?;
    echo_config(&cfg, &dir)?;
    println!(
        "wrote {} clips to {}: train {} source / {} target, test {} source / {} target",
        split.len(),
        dir.display(),
        split.train_source.len(),
        split.train_target.len(),
        split.test_source.len(),
        split.test_target.len()
    );
    Ok(())
}

fn load_data(dir: &Path, cfg: &RunConfig) -> Result<DatasetSplit, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Path(format!("data directory {} does not exist", dir.display())));
    }
    let split = read_dataset(dir)?;
    let k = cfg.model.num_actions;
    for (name, clips) in split.parts() {
        if clips.is_empty() {
            return Err(CliError::Core(Error::InvalidArgument(format!("dataset has no {name} clips"))));
        }
        for c in clips {
            let shape: [usize; 4] = c
                .video
                .shape()
                .try_into()
                .map_err(|_| Error::Shape(format!("clip {} has shape {:?}", c.id, c.video.shape())))?;
            cfg.check_data_shape(shape, k)?;
            if c.action.is_some_and(|a| a >= k) {
                return Err(CliError::Core(Error::Shape(format!(
                    "clip {} is labeled {:?} but the model predicts {k} classes",
                    c.id, c.action
                ))));
            }
        }
    }
    Ok(split)
}

fn metadata(cfg: &RunConfig) -> RunMetadata {
    RunMetadata {
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        mode: cfg.train.mode.to_string(),
    }
}

fn print_metrics(report: &MetricsReport) {
    for (name, m) in [("source", &report.source), ("target", &report.target)] {
        println!(
            "{name}-test top-1 accuracy: {:.4} ({}/{})",
            m.top1_accuracy,
            m.confusion.trace(),
            m.confusion.total()
        );
    }
    println!("domain probe accuracy: {:.4}", report.domain_probe_accuracy);
}

pub fn train(
    common: &Common,
    data_dir: &Path,
    mode: Option<TrainMode>,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<(), CliError> {
    let (cfg, mut state, dir) = match resume {
        Some(path) => {
            let ck = load_checkpoint::<f32>(path)?;
            let parent = path.parent().map(Path::to_path_buf).unwrap_or_default();
            let dir = common
                .out
                .clone()
                .or_else(|| ck.run.out_dir.clone())
                .unwrap_or_else(|| parent.clone());
            if !same_dir(&dir, &parent) {
                prepare_out_dir(&dir, common.force)?;
            }
            let mut run = ck.run;
            run.out_dir = Some(dir.clone());
            println!("resuming {} at step {}/{}", path.display(), ck.state.step, ck.total_steps);
            (run, ck.state, dir)
        }
        None => {
            let cfg = effective(common, mode)?;
            let dir = out_dir(&cfg)?;
            prepare_out_dir(&dir, common.force)?;
            let model = DiNetModel::<f32>::build(cfg.model.clone(), cfg.model_seed())?;
            (cfg, TrainState::new(model), dir)
        }
    };
    let data = load_data(data_dir, &cfg)?;
    echo_config(&cfg, &dir)?;

    let spe = steps_per_epoch(data.train_source.len(), data.train_target.len(), cfg.train.batch_size);
    let total = TrainState::<f32>::total_steps(&data, &cfg.train);
    let end = stop_after.map_or(total, |s| s.min(total));
    let ckpt = dir.join(CHECKPOINT_FILE);
    let start = Instant::now();
    println!(
        "training {} for {} epochs ({spe} steps each), seed {}",
        cfg.train.mode, cfg.train.epochs, cfg.seed
    );
    while state.step < end {
        let next = ((state.step / spe.max(1) + 1) * spe).min(end);
        let result = state.run(&data, &cfg.train, Some(next));
        state.write_history(&dir)?;
        result?;
        save_checkpoint(&state, &cfg, total, &ckpt)?;
        if let Some(r) = state.history.last() {
            println!(
                "epoch {:>3} step {:>5}: L_a {:.4}  L_d {:.4}  lambda {:.4}  lr {:.5}  ({:.1}s)",
                r.epoch + 1,
                r.step + 1,
                r.loss_action,
                r.loss_domain,
                r.lambda,
                r.lr,
                start.elapsed().as_secs_f64()
            );
        }
    }
    state.write_history(&dir)?;
    save_checkpoint(&state, &cfg, total, &ckpt)?;
    if !state.is_complete(&data, &cfg.train) {
        println!(
            "stopped after {} of {total} steps; continue with --resume {}",
            state.step,
            ckpt.display()
        );
        return Ok(());
    }
    if let Some(r) = state.history.last() {
        println!(
            "final losses: L_a {:.6}  L_d {:.6}  objective {:.6}",
            r.loss_action, r.loss_domain, r.objective
        );
    }
    let names = class_names(cfg.model.num_actions);
    let report = evaluate(&state.model, &data, &names, &cfg.train.probe, metadata(&cfg))?;
    write_report(&report, &dir, Some(&state.history))?;
    print_metrics(&report);
    Ok(())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    canon(a) == canon(b)
}

pub fn eval(common: &Common, checkpoint: &Path, data_dir: &Path) -> Result<(), CliError> {
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let mut cfg = ck.run.clone();
    if let Some(path) = &common.config {
        let requested = crate::settings::read_config_file(path)?;
        ck.check_model_config(&requested.model)?;
    }
    let dir: PathBuf = common
        .out
        .clone()
        .ok_or_else(|| CliError::Config("eval needs --out".into()))?;
    prepare_out_dir(&dir, common.force)?;
    cfg.out_dir = Some(dir.clone());
    let data = load_data(data_dir, &cfg)?;
    echo_config(&cfg, &dir)?;
    let names = class_names(cfg.model.num_actions);
    let report = evaluate(&ck.state.model, &data, &names, &cfg.train.probe, metadata(&cfg))?;
    write_report(&report, &dir, None)?;
    print_metrics(&report);
    Ok(())
}

fn print_checks(report: &CheckReport) {
    for c in &report.checks {
        println!(
            "{:<28} cases {:>4}  max rel err {:.3e}  {:>6.2}s  {}",
            c.name,
            c.configs,
            c.max_rel_error,
            c.seconds,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
}

pub fn grad_check(common: &Common, scope: Scope, configs: usize, fault: Option<&str>) -> Result<(), CliError> {
    let _guard = fault
        .map(|f| f.parse::<Fault>().map(inject_fault))
        .transpose()?;
    let seed = common.seed.unwrap_or(0);
    let tol = Tolerance::default();
    let start = Instant::now();
    let mut reports = Vec::new();
    if matches!(scope, Scope::Ops | Scope::All) {
        reports.push(run_op_checks(configs, seed, tol)?);
    }
    if matches!(scope, Scope::Model | Scope::All) {
        reports.push(run_model_checks(seed, tol)?);
    }
    let mut failing = Vec::new();
    for r in &reports {
        print_checks(r);
        failing.extend(r.failing().into_iter().map(str::to_string));
    }
    println!(
        "tolerance: rel {:.0e}, abs floor {:.0e}; {:.1}s total",
        tol.rel,
        tol.abs_floor,
        start.elapsed().as_secs_f64()
    );
    if let Some(dir) = &common.out {
        prepare_out_dir(dir, common.force)?;
        let json = serde_json::to_string_pretty(&reports).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(dir.join("gradcheck.json"), json).map_err(|e| CliError::Path(e.to_string()))?;
    }
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failing))
    }
}
