//! The channel-independent network: shared drift and jump MLPs acting on
//! each channel's latent row, type-aware inverted self-attention across
//! channels, and a shared softplus-headed intensity decoder.
//!
//! Two ablations share the parameter machinery:
//! [`Variant::NoAttention`] decodes each channel directly from its own
//! latent row, and [`Variant::ChannelMixing`] keeps a single latent row for
//! the whole sequence, feeds a one-hot mark into the jump, and decodes all
//! `K` intensities from that row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Added to every `λ_k` before a logarithm is taken.
pub const INTENSITY_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoAttention,
    ChannelMixing,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAttention => "no-attention",
            Variant::ChannelMixing => "channel-mixing",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-attention" => Ok(Variant::NoAttention),
            "channel-mixing" => Ok(Variant::ChannelMixing),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected full, no-attention or channel-mixing)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of event types.
    pub k: usize,
    /// Latent width per channel; also the value width `d_v`.
    pub d: usize,
    /// Query/key width per head.
    pub d_k: usize,
    pub heads: usize,
    /// Hidden width of the drift and jump networks is `hidden_mult · d`.
    pub hidden_mult: usize,
    pub variant: Variant,
    /// Time is divided by this before entering the drift network.
    pub time_scale: f64,
}

impl ModelConfig {
    pub fn new(k: usize, d: usize, variant: Variant) -> Self {
        Self {
            k,
            d,
            d_k: d,
            heads: 1,
            hidden_mult: 2,
            variant,
            time_scale: 10.0,
        }
    }

    pub fn d_v(&self) -> usize {
        self.d
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 {
            return bad("model K must be at least 1");
        }
        if self.d == 0 || self.d_k == 0 {
            return bad("model.d and model.d_k must be at least 1");
        }
        if self.heads == 0 || self.hidden_mult == 0 {
            return bad("model.heads and model.hidden_mult must be at least 1");
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return bad("time scale must be positive");
        }
        Ok(())
    }

    /// Rows of the latent state matrix.
    pub fn state_rows(&self) -> usize {
        match self.variant {
            Variant::ChannelMixing => 1,
            _ => self.k,
        }
    }

    fn hidden(&self) -> usize {
        self.hidden_mult * self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// `U(±1/√rows)`.
    Weight,
    Zero,
    One,
    /// `N(0, 0.1)`.
    State,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named, ordered blocks of the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    blocks: Vec<Block>,
    inits: Vec<Init>,
    total: usize,
}

impl ParamLayout {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let mut l = ParamLayout {
            blocks: Vec::new(),
            inits: Vec::new(),
            total: 0,
        };
        let (k, d, h) = (cfg.k, cfg.d, cfg.hidden());
        l.push("z0", cfg.state_rows(), d, Init::State);
        l.push("drift.w1", d + 1, h, Init::Weight);
        l.push("drift.b1", 1, h, Init::Zero);
        l.push("drift.w2", h, d, Init::Weight);
        l.push("drift.b2", 1, d, Init::Zero);
        let jump_in = match cfg.variant {
            Variant::ChannelMixing => d + k,
            _ => d,
        };
        l.push("jump.w1", jump_in, h, Init::Weight);
        l.push("jump.b1", 1, h, Init::Zero);
        l.push("jump.w2", h, d, Init::Weight);
        l.push("jump.b2", 1, d, Init::Zero);
        if cfg.variant == Variant::Full {
            for head in 0..cfg.heads {
                l.push(&format!("attn.h{head}.wq"), d, cfg.d_k, Init::Weight);
                l.push(&format!("attn.h{head}.wk"), d, cfg.d_k, Init::Weight);
                l.push(&format!("attn.h{head}.wv"), d, cfg.d_v(), Init::Weight);
                l.push(&format!("attn.h{head}.bq"), k, cfg.d_k, Init::Zero);
                l.push(&format!("attn.h{head}.bk"), k, cfg.d_k, Init::Zero);
                l.push(&format!("attn.h{head}.bv"), k, cfg.d_v(), Init::Zero);
            }
            l.push("attn.wo", cfg.heads * cfg.d_v(), d, Init::Weight);
            l.push("attn.bo", 1, d, Init::Zero);
            l.push("attn.ln_gain", 1, d, Init::One);
            l.push("attn.ln_bias", 1, d, Init::Zero);
        }
        let out = match cfg.variant {
            Variant::ChannelMixing => k,
            _ => 1,
        };
        l.push("dec.w1", d, d, Init::Weight);
        l.push("dec.b1", 1, d, Init::Zero);
        l.push("dec.w2", d, out, Init::Weight);
        l.push("dec.b2", 1, out, Init::Zero);
        l
    }

    fn push(&mut self, name: &str, rows: usize, cols: usize, init: Init) {
        self.blocks.push(Block {
            name: name.to_string(),
            rows,
            cols,
            offset: self.total,
        });
        self.inits.push(init);
        self.total += rows * cols;
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    fn require(&self, name: &str) -> Result<&Block> {
        self.block(name)
            .ok_or_else(|| Error::Config(format!("parameter block {name} missing from layout")))
    }
}

/// Unbound model: configuration plus flattened parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Itpp {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl Itpp {
    /// Freshly initialized parameters, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = Normal::new(0.0, 0.1).expect("valid normal");
        let mut params = vec![0.0; layout.total];
        for (b, init) in layout.blocks.iter().zip(&layout.inits) {
            let bound = 1.0 / (b.rows as f64).sqrt();
            for v in &mut params[b.range()] {
                *v = match init {
                    Init::Weight => rng.random_range(-bound..bound),
                    Init::Zero => 0.0,
                    Init::One => 1.0,
                    Init::State => state.sample(&mut rng),
                };
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        if params.len() != layout.total {
            return Err(Error::Config(format!(
                "expected {} parameters for this config, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Mutable view of one named block.
    pub fn block_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.layout.require(name)?.range();
        Ok(&mut self.params[r])
    }

    /// Records all parameters as one differentiable leaf; gradients with
    /// respect to the returned flat `Var` line up with [`Itpp::params`].
    pub fn bind_trainable(&self, tape: &mut Tape) -> Result<(BoundItpp, Var)> {
        let flat = tape.param(Tensor::row(self.params.clone()));
        Ok((self.bind_flat(tape, flat)?, flat))
    }

    /// Binds the network to an arbitrary flat parameter node.
    pub fn bind_flat(&self, tape: &mut Tape, flat: Var) -> Result<BoundItpp> {
        if flat.len() != self.layout.total {
            return Err(Error::Config(format!(
                "flat parameter node has {} entries, layout needs {}",
                flat.len(),
                self.layout.total
            )));
        }
        let cfg = self.config;
        let mut get = |name: &str| -> Result<Var> {
            let b = self.layout.require(name)?;
            Ok(tape.slice(flat, b.offset, b.rows, b.cols)?)
        };
        let z0 = get("z0")?;
        let drift = Mlp {
            w1: get("drift.w1")?,
            b1: get("drift.b1")?,
            w2: get("drift.w2")?,
            b2: get("drift.b2")?,
        };
        let jump = Mlp {
            w1: get("jump.w1")?,
            b1: get("jump.b1")?,
            w2: get("jump.w2")?,
            b2: get("jump.b2")?,
        };
        let attn = if cfg.variant == Variant::Full {
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                heads.push(AttnHead {
                    wq: get(&format!("attn.h{h}.wq"))?,
                    wk: get(&format!("attn.h{h}.wk"))?,
                    wv: get(&format!("attn.h{h}.wv"))?,
                    bq: get(&format!("attn.h{h}.bq"))?,
                    bk: get(&format!("attn.h{h}.bk"))?,
                    bv: get(&format!("attn.h{h}.bv"))?,
                });
            }
            Some(Attention {
                heads,
                wo: get("attn.wo")?,
                bo: get("attn.bo")?,
                gain: get("attn.ln_gain")?,
                shift: get("attn.ln_bias")?,
            })
        } else {
            None
        };
        let dec = Mlp {
            w1: get("dec.w1")?,
            b1: get("dec.b1")?,
            w2: get("dec.w2")?,
            b2: get("dec.b2")?,
        };
        Ok(BoundItpp {
            cfg,
            z0,
            drift,
            jump,
            attn,
            dec,
        })
    }
}

/// Latent-state point process as seen by the solver and the likelihood.
pub trait LatentIntensity {
    fn num_marks(&self) -> usize;
    fn initial_state(&self, tape: &mut Tape) -> Result<Var>;
    /// Time derivative of the whole state matrix.
    fn drift(&self, tape: &mut Tape, t: f64, z: Var) -> Result<Var>;
    /// State immediately after an event of type `mark`.
    fn jump(&self, tape: &mut Tape, z: Var, mark: usize) -> Result<Var>;
    /// `1×K` row of nonnegative rates.
    fn intensities(&self, tape: &mut Tape, t: f64, z: Var) -> Result<Var>;
}

/// A model that can be instantiated on a tape. Evaluation code is generic
/// over this so the trained network and analytic ground truths share paths.
pub trait PointProcessModel: Sync {
    type Bound: LatentIntensity;
    fn num_marks(&self) -> usize;
    /// Binds with parameters recorded as constants (no gradient).
    fn bind(&self, tape: &mut Tape) -> Result<Self::Bound>;
}

impl PointProcessModel for Itpp {
    type Bound = BoundItpp;

    fn num_marks(&self) -> usize {
        self.config.k
    }

    fn bind(&self, tape: &mut Tape) -> Result<BoundItpp> {
        let flat = tape.constant(Tensor::row(self.params.clone()));
        self.bind_flat(tape, flat)
    }
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl Mlp {
    /// `tanh(x·W1 + b1)·W2 + b2`, row-wise.
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add_row(h, self.b1)?;
        let h = tape.tanh(h);
        let o = tape.matmul(h, self.w2)?;
        Ok(tape.add_row(o, self.b2)?)
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnHead {
    wq: Var,
    wk: Var,
    wv: Var,
    bq: Var,
    bk: Var,
    bv: Var,
}

#[derive(Debug, Clone)]
struct Attention {
    heads: Vec<AttnHead>,
    wo: Var,
    bo: Var,
    gain: Var,
    shift: Var,
}

/// Network parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct BoundItpp {
    cfg: ModelConfig,
    z0: Var,
    drift: Mlp,
    jump: Mlp,
    attn: Option<Attention>,
    dec: Mlp,
}

impl BoundItpp {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Drift `f([z; t/T])` applied to every row of `z` with shared weights.
    pub fn drift_rows(&self, tape: &mut Tape, t: f64, z: Var) -> Result<Var> {
        let tcol = tape.constant(Tensor::filled(z.rows(), 1, t / self.cfg.time_scale));
        let x = tape.concat_cols(z, tcol)?;
        self.drift.forward(tape, x)
    }

    /// Channel-independent jump of one `1×d` row: `z + MLP(z)`.
    pub fn jump_row(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let delta = self.jump.forward(tape, z)?;
        Ok(tape.add(z, delta)?)
    }

    /// Type-aware inverted self-attention over the `K` channel rows,
    /// followed by the residual connection and row layer-normalization.
    pub fn attention(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let attn = self
            .attn
            .as_ref()
            .ok_or_else(|| Error::Config(format!("variant {} has no attention layer", self.cfg.variant)))?;
        let scale = 1.0 / (self.cfg.d_k as f64).sqrt();
        let mut outs = Vec::with_capacity(attn.heads.len());
        for head in &attn.heads {
            let q = tape.matmul(z, head.wq)?;
            let q = tape.add(q, head.bq)?;
            let k = tape.matmul(z, head.wk)?;
            let k = tape.add(k, head.bk)?;
            let v = tape.matmul(z, head.wv)?;
            let v = tape.add(v, head.bv)?;
            let s = tape.matmul_nt(q, k)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s);
            outs.push(tape.matmul(a, v)?);
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            let mut acc = outs[0];
            for &next in &outs[1..] {
                acc = tape.concat_cols(acc, next)?;
            }
            acc
        };
        let proj = tape.matmul(o, attn.wo)?;
        let proj = tape.add_row(proj, attn.bo)?;
        let res = tape.add(z, proj)?;
        let n = tape.layernorm_rows(res);
        let n = tape.mul_row(n, attn.gain)?;
        Ok(tape.add_row(n, attn.shift)?)
    }

    /// Shared decoder with softplus head. For the channel-independent
    /// variants `h` is `K×d` and the result is the `1×K` row of per-channel
    /// rates; for channel mixing `h` is `1×d` and the head emits `K` rates.
    pub fn decode(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let raw = self.dec.forward(tape, h)?;
        let lam = tape.softplus(raw);
        Ok(tape.reshape(lam, 1, self.cfg.k)?)
    }

    /// Full decode path for the configured variant.
    pub fn decode_intensities(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        match self.cfg.variant {
            Variant::Full => {
                let h = self.attention(tape, z)?;
                self.decode(tape, h)
            }
            Variant::NoAttention | Variant::ChannelMixing => self.decode(tape, z),
        }
    }
}

impl LatentIntensity for BoundItpp {
    fn num_marks(&self) -> usize {
        self.cfg.k
    }

    fn initial_state(&self, _tape: &mut Tape) -> Result<Var> {
        Ok(self.z0)
    }

    fn drift(&self, tape: &mut Tape, t: f64, z: Var) -> Result<Var> {
        self.drift_rows(tape, t, z)
    }

    fn jump(&self, tape: &mut Tape, z: Var, mark: usize) -> Result<Var> {
        let k = self.cfg.k;
        if mark >= k {
            return Err(Error::MarkOutOfRange { mark, k });
        }
        match self.cfg.variant {
            Variant::ChannelMixing => {
                let mut onehot = vec![0.0; k];
                onehot[mark] = 1.0;
                let onehot = tape.constant(Tensor::row(onehot));
                let x = tape.concat_cols(z, onehot)?;
                let delta = self.jump.forward(tape, x)?;
                Ok(tape.add(z, delta)?)
            }
            _ => {
                let row = tape.slice_rows(z, mark, 1)?;
                let new_row = self.jump_row(tape, row)?;
                let mut parts = Vec::with_capacity(3);
                if mark > 0 {
                    parts.push(tape.slice_rows(z, 0, mark)?);
                }
                parts.push(new_row);
                if mark + 1 < k {
                    parts.push(tape.slice_rows(z, mark + 1, k - mark - 1)?);
                }
                Ok(tape.concat_rows(&parts)?)
            }
        }
    }

    fn intensities(&self, tape: &mut Tape, _t: f64, z: Var) -> Result<Var> {
        self.decode_intensities(tape, z)
    }
}

/// `λ(t) = Σ_k λ_k(t)`.
pub fn total_intensity(lambda: &[f64]) -> f64 {
    lambda.iter().sum()
}
