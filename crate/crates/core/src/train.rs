//! Mini-batch maximum-likelihood training with AdamW, gradient clipping,
//! early stopping on validation NLL, and the binary checkpoint format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{nll_totals, sequence_nll_grad, EventSequence, NllTotals};
use crate::model::{Itpp, ModelConfig, Variant};
use crate::odesolve::DEFAULT_MAX_STEP;
use crate::synthgen::sequence_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub hyper: AdamWConfig,
    /// Number of applied updates.
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Updates dropped because of non-finite gradients.
    pub skipped: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

impl OptimizerState {
    pub fn new(n_params: usize, hyper: AdamWConfig) -> Self {
        Self {
            hyper,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            skipped: 0,
        }
    }
}

/// One AdamW update in place. Weight decay is decoupled: parameters shrink
/// by `lr·wd·θ` before the bias-corrected Adam step is applied.
pub fn adamw_step(opt: &mut OptimizerState, params: &mut [f64], grads: &[f64]) -> Result<StepOutcome> {
    if params.len() != grads.len() || params.len() != opt.m.len() {
        return Err(Error::Config(format!(
            "optimizer sizes disagree: params {}, grads {}, moments {}",
            params.len(),
            grads.len(),
            opt.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        opt.skipped += 1;
        return Ok(StepOutcome::SkippedNonFinite);
    }
    let h = opt.hyper;
    opt.step += 1;
    let bc1 = 1.0 - h.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - h.beta2.powi(opt.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        opt.m[i] = h.beta1 * opt.m[i] + (1.0 - h.beta1) * g;
        opt.v[i] = h.beta2 * opt.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = opt.m[i] / bc1;
        let v_hat = opt.v[i] / bc2;
        params[i] -= h.lr * h.weight_decay * params[i];
        params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
    Ok(StepOutcome::Applied)
}

/// Divisor applied to the summed per-sequence gradients of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossNormalization {
    /// Total events in the batch; the objective is per-event NLL.
    PerEvent,
    /// Number of sequences in the batch.
    PerSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    /// Unnormalized summed NLL.
    pub loss_sum: f64,
    pub totals: NllTotals,
    /// Normalized gradient.
    pub grad: Vec<f64>,
}

/// Sequence gradients computed in parallel and summed in batch order.
pub fn batch_gradient(
    model: &Itpp,
    batch: &[&EventSequence],
    max_step: f64,
    norm: LossNormalization,
) -> Result<BatchGradient> {
    let parts: Vec<Result<(f64, NllTotals, Vec<f64>)>> =
        batch.par_iter().map(|s| sequence_nll_grad(model, s, max_step)).collect();
    let mut grad = vec![0.0; model.params().len()];
    let mut loss_sum = 0.0;
    let mut totals = NllTotals::default();
    for p in parts {
        let (loss, t, g) = p?;
        loss_sum += loss;
        totals.merge(&t);
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let denom = match norm {
        LossNormalization::PerEvent => totals.events.max(1),
        LossNormalization::PerSequence => batch.len().max(1),
    } as f64;
    for g in &mut grad {
        *g /= denom;
    }
    Ok(BatchGradient { loss_sum, totals, grad })
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_gradient(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Summed NLL totals over a dataset, evaluated in parallel, reduced in order.
pub fn dataset_totals(model: &Itpp, data: &[EventSequence], max_step: f64) -> Result<NllTotals> {
    let parts: Vec<Result<NllTotals>> = data.par_iter().map(|s| nll_totals(model, s, max_step)).collect();
    let mut acc = NllTotals::default();
    for p in parts {
        acc.merge(&p?);
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub max_step: f64,
    pub seed: u64,
    pub normalization: LossNormalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 16,
            patience: 10,
            max_epochs: 200,
            clip_norm: 10.0,
            max_step: DEFAULT_MAX_STEP,
            seed: 0,
            normalization: LossNormalization::PerEvent,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("train.max_epochs must be at least 1");
        }
        if !(self.optimizer.lr >= 0.0) || !(self.optimizer.weight_decay >= 0.0) {
            return bad("train.lr and train.weight_decay must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1) || !(0.0..1.0).contains(&self.optimizer.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if !(self.optimizer.eps > 0.0) || !(self.clip_norm > 0.0) {
            return bad("train.eps and train.clip_norm must be positive");
        }
        if !(self.max_step > 0.0 && self.max_step.is_finite()) {
            return bad("ode.max_step must be positive");
        }
        Ok(())
    }
}

/// Deterministic record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Per-event training NLL per epoch, measured during the epoch.
    pub train_nll: Vec<f64>,
    /// Per-event validation TM-NLL after each epoch.
    pub val_nll: Vec<f64>,
    /// Zero-based.
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub stopped_early: bool,
    pub skipped_updates: u64,
    /// Reason training was aborted, if it diverged; the returned parameters
    /// are then those of the best epoch so far, or the initial ones.
    pub diverged: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub best: Itpp,
    pub report: TrainReport,
    /// Wall-clock seconds per epoch; kept apart from the report so reports
    /// stay reproducible byte for byte.
    pub epoch_seconds: Vec<f64>,
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Numeric(_))
}

/// Trains from `init`. Each epoch visits the training set in a shuffled
/// order derived from `(seed, epoch)`.
pub fn train(init: &Itpp, train_set: &[EventSequence], val_set: &[EventSequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(init, train_set, val_set, cfg, |_, _| {})
}

/// As [`train`], calling `observe(epoch, report_so_far)` after every epoch.
pub fn train_with_observer<F: FnMut(usize, &TrainReport)>(
    init: &Itpp,
    train_set: &[EventSequence],
    val_set: &[EventSequence],
    cfg: &TrainConfig,
    mut observe: F,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation splits must be nonempty".into()));
    }
    let k = init.config().k;
    for s in train_set.iter().chain(val_set) {
        if s.k != k {
            return Err(Error::Data(format!("sequence has K={} but model expects K={k}", s.k)));
        }
    }
    let mut model = init.clone();
    let mut opt = OptimizerState::new(model.params().len(), cfg.optimizer);
    let mut report = TrainReport {
        train_nll: Vec::new(),
        val_nll: Vec::new(),
        best_epoch: 0,
        best_val_nll: f64::INFINITY,
        stopped_early: false,
        skipped_updates: 0,
        diverged: None,
    };
    let mut best = model.clone();
    let mut epoch_seconds = Vec::new();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    'epochs: for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut sequence_rng(cfg.seed, epoch as u64));
        let mut epoch_totals = NllTotals::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EventSequence> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut bg = match batch_gradient(&model, &batch, cfg.max_step, cfg.normalization) {
                Ok(bg) => bg,
                Err(e) if is_divergence(&e) => {
                    report.diverged = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !bg.loss_sum.is_finite() {
                report.diverged = Some(format!("epoch {epoch}: training NLL is not finite"));
                break 'epochs;
            }
            epoch_totals.merge(&bg.totals);
            clip_gradient(&mut bg.grad, cfg.clip_norm);
            adamw_step(&mut opt, model.params_mut(), &bg.grad)?;
        }
        let val = match dataset_totals(&model, val_set, cfg.max_step) {
            Ok(v) => v.breakdown().tm_nll,
            Err(e) if is_divergence(&e) => {
                report.diverged = Some(format!("epoch {epoch}: {e}"));
                break 'epochs;
            }
            Err(e) => return Err(e),
        };
        report.train_nll.push(epoch_totals.breakdown().tm_nll);
        report.val_nll.push(val);
        report.skipped_updates = opt.skipped;
        epoch_seconds.push(started.elapsed().as_secs_f64());
        if !val.is_finite() {
            report.diverged = Some(format!("epoch {epoch}: validation NLL is not finite"));
            break;
        }
        if val < report.best_val_nll {
            report.best_val_nll = val;
            report.best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        observe(epoch, &report);
        if since_best > cfg.patience {
            report.stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        report,
        epoch_seconds,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ITPPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model parameters plus everything needed to reproduce them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Itpp,
    pub seed: u64,
    pub metadata: BTreeMap<String, String>,
}

fn variant_code(v: Variant) -> u64 {
    match v {
        Variant::Full => 0,
        Variant::NoAttention => 1,
        Variant::ChannelMixing => 2,
    }
}

fn put_section(out: &mut Vec<u8>, name: &str, payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl Checkpoint {
    pub fn new(model: Itpp, seed: u64) -> Self {
        Self {
            model,
            seed,
            metadata: BTreeMap::new(),
        }
    }

    /// Magic, version, then length-prefixed sections: `config`, `seed`,
    /// `metadata`, and one `param:<block>` per parameter block.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = self.model.config();
        let mut cfg = Vec::new();
        for v in [c.k, c.d, c.d_k, c.heads, c.hidden_mult] {
            cfg.extend_from_slice(&(v as u64).to_le_bytes());
        }
        cfg.extend_from_slice(&variant_code(c.variant).to_le_bytes());
        cfg.extend_from_slice(&c.time_scale.to_le_bytes());
        put_section(&mut out, "config", &cfg);
        put_section(&mut out, "seed", &self.seed.to_le_bytes());
        let mut meta = Vec::new();
        meta.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut meta, k);
            put_str(&mut meta, v);
        }
        put_section(&mut out, "metadata", &meta);
        let params = self.model.params();
        for b in self.model.layout().blocks() {
            let mut p = Vec::with_capacity(8 + 8 * b.len());
            p.extend_from_slice(&(b.rows as u32).to_le_bytes());
            p.extend_from_slice(&(b.cols as u32).to_le_bytes());
            for v in &params[b.range()] {
                p.extend_from_slice(&v.to_le_bytes());
            }
            put_section(&mut out, &format!("param:{}", b.name), &p);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not an ITPPCKPT file".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut config: Option<ModelConfig> = None;
        let mut seed = None;
        let mut metadata = BTreeMap::new();
        let mut blocks: BTreeMap<String, (usize, usize, Vec<f64>)> = BTreeMap::new();
        while !r.done() {
            let name = r.string("section name")?;
            let len = r.u64("section length")? as usize;
            let payload = r.take(len, &format!("section {name}"))?;
            let mut s = Reader { buf: payload, pos: 0 };
            match name.as_str() {
                "config" => {
                    let mut u = [0usize; 5];
                    for v in &mut u {
                        *v = s.u64("config")? as usize;
                    }
                    let variant = match s.u64("config")? {
                        0 => Variant::Full,
                        1 => Variant::NoAttention,
                        2 => Variant::ChannelMixing,
                        other => return Err(Error::Checkpoint(format!("unknown variant code {other}"))),
                    };
                    let time_scale = s.f64("config")?;
                    config = Some(ModelConfig {
                        k: u[0],
                        d: u[1],
                        d_k: u[2],
                        heads: u[3],
                        hidden_mult: u[4],
                        variant,
                        time_scale,
                    });
                }
                "seed" => seed = Some(s.u64("seed")?),
                "metadata" => {
                    let n = s.u32("metadata count")?;
                    for _ in 0..n {
                        let k = s.string("metadata key")?;
                        let v = s.string("metadata value")?;
                        metadata.insert(k, v);
                    }
                }
                other => {
                    let Some(block) = other.strip_prefix("param:") else {
                        return Err(Error::Checkpoint(format!("unknown section {other:?}")));
                    };
                    let rows = s.u32("block rows")? as usize;
                    let cols = s.u32("block cols")? as usize;
                    let mut vals = Vec::with_capacity(rows * cols);
                    for _ in 0..rows * cols {
                        vals.push(s.f64(other)?);
                    }
                    blocks.insert(block.to_string(), (rows, cols, vals));
                }
            }
            if !s.done() {
                return Err(Error::Checkpoint(format!("section {name} has trailing bytes")));
            }
        }
        let config = config.ok_or_else(|| Error::Checkpoint("missing config section".into()))?;
        let seed = seed.ok_or_else(|| Error::Checkpoint("missing seed section".into()))?;
        config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let layout = crate::model::ParamLayout::for_config(&config);
        let mut params = vec![0.0; layout.total()];
        for b in layout.blocks() {
            let (rows, cols, vals) = blocks
                .remove(&b.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter block {}", b.name)))?;
            if (rows, cols) != (b.rows, b.cols) {
                return Err(Error::Checkpoint(format!(
                    "block {} is {rows}x{cols}, config needs {}x{}",
                    b.name, b.rows, b.cols
                )));
            }
            params[b.range()].copy_from_slice(&vals);
        }
        if let Some(extra) = blocks.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter block {extra}")));
        }
        Ok(Self {
            model: Itpp::from_params(config, params)?,
            seed,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }

    /// Errors unless the stored model has `expected` marks.
    pub fn expect_k(&self, expected: usize) -> Result<()> {
        let found = self.model.config().k;
        if found != expected {
            return Err(Error::Checkpoint(format!(
                "mark count mismatch: expected K={expected}, found K={found}"
            )));
        }
        Ok(())
    }
}
