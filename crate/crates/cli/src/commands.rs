use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use itpp::eval::{
    emit_trajectories, eval_nll, eval_prediction, fingerprint, intensity_mape, mean_inter_event_time, MetricsReport,
};
use itpp::likelihood::{nll_grad_check, EventSequence, PredictOptions, GRAD_CHECK_STEP, GRAD_CHECK_TOL};
use itpp::model::Itpp;
use itpp::synthgen::{generate_dataset, read_manifest, read_split, toy_sequence, GroundTruthProcess, DEFAULT_SPLIT, MANIFEST_FILE};
use itpp::train::{train_with_observer, Checkpoint};

use crate::config::{ConfigError, RunConfig};
use crate::{Command, ConfigArgs};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "train_report.json";
pub const METRICS_FILE: &str = "metrics.json";
/// Horizon of the gradient-check toy sequence.
const TOY_HORIZON: f64 = 2.0;

/// A computation produced an unacceptable numeric result.
#[derive(Debug, thiserror::Error)]
#[error("numeric failure: {0}")]
pub struct NumericFailure(pub String);

/// 2 for configuration errors, 3 for data errors, 4 for numeric failures.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<NumericFailure>() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<itpp::Error>() {
            use itpp::Error as E;
            return match e {
                E::Config(_) | E::InvalidStep(_) => 2,
                E::Num(_) | E::NonFinite { .. } | E::Numeric(_) | E::ReversedInterval { .. } => 4,
                _ => 3,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    1
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate {
            process,
            n,
            horizon,
            seed,
            out,
            force,
        } => {
            let mut proc = GroundTruthProcess::benchmark(process);
            proc.horizon = horizon;
            proc.validate().map_err(|e| ConfigError(e.to_string()))?;
            cmd_generate(&proc, n, seed, &out, force)
        }
        Command::Train { cfg, data, out } => {
            let mut rc = load_config(&cfg)?;
            override_path(&mut rc, "run.data", data)?;
            override_path(&mut rc, "run.out", out)?;
            cmd_train(&rc)
        }
        Command::Eval {
            cfg,
            checkpoint,
            data,
            out,
            split,
            nll,
            predict,
            mape,
            trajectories,
        } => {
            let mut rc = load_config(&cfg)?;
            override_path(&mut rc, "run.checkpoint", checkpoint)?;
            override_path(&mut rc, "run.data", data)?;
            override_path(&mut rc, "run.out", out)?;
            let req = EvalRequest {
                split,
                nll: nll || !(predict || mape || !trajectories.is_empty()),
                predict,
                mape,
                trajectories,
            };
            cmd_eval(&mut rc, &req)
        }
        Command::Gradcheck { cfg } => {
            let rc = load_config(&cfg)?;
            let err = cmd_gradcheck(&rc)?;
            let verdict = if err < GRAD_CHECK_TOL { "PASS" } else { "FAIL" };
            println!("max relative error {err:.3e} (tolerance {GRAD_CHECK_TOL:e}): {verdict}");
            if err < GRAD_CHECK_TOL {
                Ok(())
            } else {
                Err(NumericFailure(format!("gradient check error {err:.3e} exceeds {GRAD_CHECK_TOL:e}")).into())
            }
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(path) = &args.config {
        rc.apply_file(path)?;
    }
    rc.apply_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        rc.set("train.seed", &seed.to_string())?;
    }
    rc.validate()?;
    Ok(rc)
}

fn override_path(rc: &mut RunConfig, key: &str, value: Option<PathBuf>) -> Result<()> {
    if let Some(p) = value {
        rc.set(key, &p.display().to_string())?;
    }
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    Ok(p.as_deref()
        .ok_or_else(|| ConfigError(format!("{key} is required (config key or flag)")))?)
}

pub fn cmd_generate(proc: &GroundTruthProcess, n: usize, seed: u64, out: &Path, force: bool) -> Result<()> {
    if out.exists() && fs::read_dir(out)?.next().is_some() && !force {
        return Err(ConfigError(format!("{} is not empty; pass --force to overwrite", out.display())).into());
    }
    let data = generate_dataset(proc, n, DEFAULT_SPLIT, seed)?;
    data.write(out)?;
    let m = &data.manifest;
    println!(
        "wrote {} sequences ({}/{}/{}) to {}; mean length {:.2}, per-type counts {:?}",
        m.n_seqs,
        m.splits.train,
        m.splits.val,
        m.splits.test,
        out.display(),
        m.mean_length,
        m.per_type_counts
    );
    Ok(())
}

/// Mark count of a dataset directory, from the manifest when present.
fn dataset_k(dir: &Path, splits: &[&[EventSequence]]) -> Result<Option<usize>> {
    if dir.join(MANIFEST_FILE).exists() {
        return Ok(Some(read_manifest(dir)?.process.k()));
    }
    Ok(splits.iter().flat_map(|s| s.iter()).map(|s| s.k).next())
}

fn check_k(expected: usize, dir: &Path, splits: &[&[EventSequence]]) -> Result<()> {
    let found = dataset_k(dir, splits)?;
    let mismatch = found.is_some_and(|k| k != expected) || splits.iter().flat_map(|s| s.iter()).any(|s| s.k != expected);
    if mismatch {
        return Err(ConfigError(format!(
            "mark count mismatch: model.k = {expected} but dataset {} has K = {}",
            dir.display(),
            found.map_or("?".to_string(), |k| k.to_string())
        ))
        .into());
    }
    Ok(())
}

/// Hash of the files a dataset directory is read from.
fn data_fingerprint(dir: &Path, names: &[&str]) -> Result<String> {
    let mut blobs = Vec::new();
    for name in names {
        let p = dir.join(name);
        if p.exists() {
            blobs.push(name.as_bytes().to_vec());
            blobs.push(fs::read(&p).with_context(|| p.display().to_string())?);
        }
    }
    let refs: Vec<&[u8]> = blobs.iter().map(|b| b.as_slice()).collect();
    Ok(fingerprint(&refs))
}

pub fn cmd_train(rc: &RunConfig) -> Result<()> {
    let data_dir = required(&rc.data, "run.data")?;
    let out = required(&rc.out, "run.out")?;
    let model_cfg = rc.model_config()?;
    let train_set = read_split(data_dir, "train")?;
    let val_set = read_split(data_dir, "val")?;
    check_k(model_cfg.k, data_dir, &[&train_set, &val_set])?;
    if val_set.is_empty() || train_set.is_empty() {
        return Err(itpp::Error::Data("train and val splits must be non-empty".into()).into());
    }

    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), rc.render_all())?;

    let init = Itpp::new(model_cfg, rc.train.seed)?;
    let started = std::time::Instant::now();
    let outcome = train_with_observer(&init, &train_set, &val_set, &rc.train, |e, r| {
        eprintln!(
            "epoch {e:>3}  train {:.4}  val {:.4}  {:.1}s",
            r.train_nll[e],
            r.val_nll[e],
            started.elapsed().as_secs_f64()
        );
    })?;

    let mut ckpt = Checkpoint::new(outcome.best, rc.train.seed);
    ckpt.metadata.insert("config".into(), rc.render_reproducible());
    ckpt.metadata.insert(
        "data_fingerprint".into(),
        data_fingerprint(data_dir, &["train.jsonl", "val.jsonl", MANIFEST_FILE])?,
    );
    ckpt.metadata.insert("best_epoch".into(), outcome.report.best_epoch.to_string());
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&outcome.report)? + "\n")?;

    let r = &outcome.report;
    println!(
        "best epoch {} of {}: validation NLL {:.4}",
        r.best_epoch,
        r.val_nll.len(),
        r.best_val_nll
    );
    if let Some(reason) = &r.diverged {
        return Err(NumericFailure(format!("training diverged: {reason}")).into());
    }
    Ok(())
}

pub struct EvalRequest {
    pub split: String,
    pub nll: bool,
    pub predict: bool,
    pub mape: bool,
    pub trajectories: Vec<usize>,
}

pub fn cmd_eval(rc: &mut RunConfig, req: &EvalRequest) -> Result<()> {
    let ckpt_path = required(&rc.checkpoint, "run.checkpoint")?.to_path_buf();
    let data_dir = required(&rc.data, "run.data")?.to_path_buf();
    let out = required(&rc.out, "run.out")?.to_path_buf();
    if !itpp::synthgen::SPLIT_NAMES.contains(&req.split.as_str()) {
        return Err(ConfigError(format!("unknown split `{}` (expected train, val or test)", req.split)).into());
    }

    let ckpt_bytes = fs::read(&ckpt_path).with_context(|| ckpt_path.display().to_string())?;
    let ckpt = Checkpoint::from_bytes(&ckpt_bytes)?;
    let model = &ckpt.model;
    rc.adopt_model(model.config())?;
    let data = read_split(&data_dir, &req.split)?;
    check_k(model.config().k, &data_dir, &[&data])?;
    if let Some(&bad) = req.trajectories.iter().find(|&&i| i >= data.len()) {
        return Err(ConfigError(format!(
            "trajectory index {bad} out of range for {} sequences",
            data.len()
        ))
        .into());
    }
    let process = if req.mape || !req.trajectories.is_empty() {
        if !data_dir.join(MANIFEST_FILE).exists() {
            return Err(itpp::Error::Data(format!(
                "--mape and --trajectories need {} with process parameters in {}",
                MANIFEST_FILE,
                data_dir.display()
            ))
            .into());
        }
        Some(read_manifest(&data_dir)?.process)
    } else {
        None
    };

    let max_step = rc.train.max_step;
    let settings = format!(
        "{}split = {}\nnll = {}\npredict = {}\nmape = {}\n",
        rc.render(|k| k.starts_with("ode.") || k.starts_with("predict.") || k.starts_with("eval.")),
        req.split,
        req.nll,
        req.predict,
        req.mape
    );
    let model_json = serde_json::to_vec(model.config())?;
    let data_hash = data_fingerprint(&data_dir, &[&format!("{}.jsonl", req.split)])?;
    let fp = fingerprint(&[&model_json, settings.as_bytes(), &ckpt_bytes, data_hash.as_bytes()]);
    let mut report = MetricsReport::new(&data, fp);

    if req.nll {
        report = report.with_nll(&eval_nll(model, &data, max_step)?);
    }
    if req.predict {
        let reference = match read_split(&data_dir, "train") {
            Ok(train) if !train.is_empty() => train,
            _ => data.clone(),
        };
        let mean_gap = mean_inter_event_time(&reference)
            .ok_or_else(|| itpp::Error::Data("no events to derive the prediction horizon from".into()))?;
        let opts = PredictOptions {
            max_step,
            survival_eps: rc.survival_eps,
            horizon_cap: rc.horizon_mult * mean_gap,
        };
        report = report.with_prediction(&eval_prediction(model, &data, &opts)?);
    }
    if let (true, Some(p)) = (req.mape, &process) {
        report = report.with_mape(intensity_mape(model, p, &data, rc.grid_points, max_step)?);
    }

    fs::create_dir_all(&out)?;
    fs::write(out.join("eval_config.txt"), rc.render_all() + &settings)?;
    if let Some(p) = &process {
        for &i in &req.trajectories {
            emit_trajectories(model, p, &data[i], rc.grid_points, max_step, &out.join(format!("trajectory_{i}.csv")))?;
        }
    }
    let json = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(out.join(METRICS_FILE), &json)?;
    print!("{json}");
    Ok(())
}

/// Largest relative gradient error on a random three-event sequence.
pub fn cmd_gradcheck(rc: &RunConfig) -> Result<f64> {
    let cfg = rc.model_config()?;
    let model = Itpp::new(cfg, rc.train.seed)?;
    let seq = toy_sequence(cfg.k, 3, TOY_HORIZON, rc.train.seed)?;
    Ok(nll_grad_check(&model, &seq, rc.train.max_step, GRAD_CHECK_STEP)?)
}
