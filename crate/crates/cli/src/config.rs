//! Plain-text `key = value` run configuration with dotted sections.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use itpp::model::{ModelConfig, Variant};
use itpp::train::{LossNormalization, TrainConfig};

#[derive(Debug, thiserror::Error)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

fn cfg_err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Every accepted key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("model.k", "number of event types; must match the dataset"),
    ("model.d", "latent width per channel"),
    ("model.d_k", "query/key width per head; `d` follows model.d"),
    ("model.heads", "attention heads"),
    ("model.hidden_mult", "drift/jump hidden width is hidden_mult * d"),
    ("model.variant", "full | no-attention | channel-mixing"),
    ("model.time_scale", "time is divided by this before entering the drift"),
    ("train.lr", "AdamW learning rate"),
    ("train.beta1", "AdamW first-moment decay"),
    ("train.beta2", "AdamW second-moment decay"),
    ("train.eps", "AdamW denominator offset"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.batch_size", "sequences per update"),
    ("train.patience", "epochs without validation improvement before stopping"),
    ("train.max_epochs", "upper bound on epochs"),
    ("train.clip_norm", "global gradient norm clip"),
    ("train.normalization", "per-event | per-sequence loss normalization"),
    ("train.seed", "seed for initialization and shuffling"),
    ("ode.max_step", "largest RK4 step"),
    ("predict.survival_eps", "survival level at which prediction quadrature stops"),
    ("predict.horizon_mult", "prediction horizon cap in mean inter-event times"),
    ("eval.grid_points", "grid points per sequence for MAPE and trajectories"),
    ("run.data", "dataset directory"),
    ("run.out", "output directory"),
    ("run.checkpoint", "checkpoint file for evaluation"),
];

/// Latent width used when nothing else is configured.
pub const DEFAULT_D: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub k: usize,
    pub d: usize,
    /// `None` ties the query/key width to `d`.
    pub d_k: Option<usize>,
    pub heads: usize,
    pub hidden_mult: usize,
    pub variant: Variant,
    pub time_scale: f64,
    /// Also carries `ode.max_step` and `train.seed`.
    pub train: TrainConfig,
    pub survival_eps: f64,
    pub horizon_mult: f64,
    pub grid_points: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Keys assigned by a file or flag rather than defaulted.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(3, DEFAULT_D, Variant::Full);
        Self {
            k: m.k,
            d: m.d,
            d_k: None,
            heads: m.heads,
            hidden_mult: m.hidden_mult,
            variant: m.variant,
            time_scale: m.time_scale,
            train: TrainConfig::default(),
            survival_eps: itpp::likelihood::PredictOptions::default().survival_eps,
            horizon_mult: 10.0,
            grid_points: itpp::eval::DEFAULT_GRID_POINTS,
            data: None,
            out: None,
            checkpoint: None,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| cfg_err(format!("invalid value `{value}` for {key}")))
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "model.k" => self.k = parse(key, v)?,
            "model.d" => self.d = parse(key, v)?,
            "model.d_k" => self.d_k = if v == "d" { None } else { Some(parse(key, v)?) },
            "model.heads" => self.heads = parse(key, v)?,
            "model.hidden_mult" => self.hidden_mult = parse(key, v)?,
            "model.variant" => self.variant = v.parse().map_err(|e: itpp::Error| cfg_err(e.to_string()))?,
            "model.time_scale" => self.time_scale = parse(key, v)?,
            "train.lr" => t.optimizer.lr = parse(key, v)?,
            "train.beta1" => t.optimizer.beta1 = parse(key, v)?,
            "train.beta2" => t.optimizer.beta2 = parse(key, v)?,
            "train.eps" => t.optimizer.eps = parse(key, v)?,
            "train.weight_decay" => t.optimizer.weight_decay = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.patience" => t.patience = parse(key, v)?,
            "train.max_epochs" => t.max_epochs = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.normalization" => {
                t.normalization = match v {
                    "per-event" => LossNormalization::PerEvent,
                    "per-sequence" => LossNormalization::PerSequence,
                    _ => return Err(cfg_err(format!("invalid value `{v}` for {key}"))),
                }
            }
            "train.seed" => t.seed = parse(key, v)?,
            "ode.max_step" => t.max_step = parse(key, v)?,
            "predict.survival_eps" => self.survival_eps = parse(key, v)?,
            "predict.horizon_mult" => self.horizon_mult = parse(key, v)?,
            "eval.grid_points" => self.grid_points = parse(key, v)?,
            "run.data" => self.data = path_or_none(v),
            "run.out" => self.out = path_or_none(v),
            "run.checkpoint" => self.checkpoint = path_or_none(v),
            _ => return Err(cfg_err(format!("unknown key `{key}`"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "model.k" => self.k.to_string(),
            "model.d" => self.d.to_string(),
            "model.d_k" => self.d_k.map_or_else(|| "d".to_string(), |x| x.to_string()),
            "model.heads" => self.heads.to_string(),
            "model.hidden_mult" => self.hidden_mult.to_string(),
            "model.variant" => self.variant.to_string(),
            "model.time_scale" => self.time_scale.to_string(),
            "train.lr" => t.optimizer.lr.to_string(),
            "train.beta1" => t.optimizer.beta1.to_string(),
            "train.beta2" => t.optimizer.beta2.to_string(),
            "train.eps" => t.optimizer.eps.to_string(),
            "train.weight_decay" => t.optimizer.weight_decay.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.patience" => t.patience.to_string(),
            "train.max_epochs" => t.max_epochs.to_string(),
            "train.clip_norm" => t.clip_norm.to_string(),
            "train.normalization" => match t.normalization {
                LossNormalization::PerEvent => "per-event".to_string(),
                LossNormalization::PerSequence => "per-sequence".to_string(),
            },
            "train.seed" => t.seed.to_string(),
            "ode.max_step" => t.max_step.to_string(),
            "predict.survival_eps" => self.survival_eps.to_string(),
            "predict.horizon_mult" => self.horizon_mult.to_string(),
            "eval.grid_points" => self.grid_points.to_string(),
            "run.data" => show_path(&self.data),
            "run.out" => show_path(&self.out),
            "run.checkpoint" => show_path(&self.checkpoint),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| cfg_err(format!("{origin}:{}: {}", i + 1, e.0)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), ConfigError> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("override `{p}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Fills the model keys from `m`, rejecting any that were set explicitly
    /// to a different value.
    pub fn adopt_model(&mut self, m: &ModelConfig) -> Result<(), ConfigError> {
        let mut from = self.clone();
        from.k = m.k;
        from.d = m.d;
        from.d_k = if m.d_k == m.d { None } else { Some(m.d_k) };
        from.heads = m.heads;
        from.hidden_mult = m.hidden_mult;
        from.variant = m.variant;
        from.time_scale = m.time_scale;
        for (key, _) in KEYS.iter().filter(|(k, _)| k.starts_with("model.")) {
            if self.explicit.contains(*key) && self.get(key) != from.get(key) {
                return Err(cfg_err(format!(
                    "{key} = {} conflicts with the checkpoint value {}",
                    self.get(key).unwrap_or_default(),
                    from.get(key).unwrap_or_default()
                )));
            }
        }
        from.explicit = self.explicit.clone();
        *self = from;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let cfg = ModelConfig {
            k: self.k,
            d: self.d,
            d_k: self.d_k.unwrap_or(self.d),
            heads: self.heads,
            hidden_mult: self.hidden_mult,
            variant: self.variant,
            time_scale: self.time_scale,
        };
        cfg.validate().map_err(|e| cfg_err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model_config()?;
        self.train.validate().map_err(|e| cfg_err(e.to_string()))?;
        if !(self.survival_eps > 0.0 && self.survival_eps < 1.0) {
            return Err(cfg_err("predict.survival_eps must lie in (0, 1)"));
        }
        if !(self.horizon_mult > 0.0 && self.horizon_mult.is_finite()) {
            return Err(cfg_err("predict.horizon_mult must be positive"));
        }
        if self.grid_points == 0 {
            return Err(cfg_err("eval.grid_points must be at least 1"));
        }
        Ok(())
    }

    /// `key = value` lines for the keys accepted by `prefix_filter`.
    pub fn render(&self, prefix_filter: impl Fn(&str) -> bool) -> String {
        let mut s = String::new();
        for (key, _) in KEYS.iter().filter(|(k, _)| prefix_filter(k)) {
            let _ = writeln!(s, "{key} = {}", self.get(key).unwrap_or_default());
        }
        s
    }

    /// Every key, suitable for re-reading with `apply_text`.
    pub fn render_all(&self) -> String {
        self.render(|_| true)
    }

    /// Keys that determine training results, excluding paths.
    pub fn render_reproducible(&self) -> String {
        self.render(|k| !k.starts_with("run."))
    }
}

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let d = RunConfig::default();
    let mut s = String::from("Config keys (file lines `key = value`, or `--set key=value`):\n");
    for (key, doc) in KEYS {
        let def = d.get(key).unwrap_or_default();
        let def = if def.is_empty() { "(unset)".to_string() } else { def };
        let _ = writeln!(s, "  {key:<22} default {def:<10} {doc}");
    }
    s
}
