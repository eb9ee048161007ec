//! Sequence negative log-likelihood by integrating the augmented latent
//! state between events, its time/mark split, the next-event density, and
//! expectation-based point predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Itpp, LatentIntensity, PointProcessModel, INTENSITY_FLOOR};
use crate::numcore::{Tape, Tensor, Var};
use crate::odesolve::{integrate, AugmentedState, ModelDynamics, DEFAULT_MAX_STEP};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub m: usize,
}

/// Events on `(0, T]` with marks in `0..K`, ordered by time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub events: Vec<Event>,
}

impl EventSequence {
    pub fn new(horizon: f64, k: usize, events: Vec<Event>) -> Result<Self> {
        let s = Self { horizon, k, events };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidSequence(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.k == 0 {
            return Err(Error::InvalidSequence("K must be at least 1".into()));
        }
        let mut prev = 0.0;
        for (i, e) in self.events.iter().enumerate() {
            if e.m >= self.k {
                return Err(Error::MarkOutOfRange { mark: e.m, k: self.k });
            }
            let ordered = if i == 0 { e.t > 0.0 } else { e.t >= prev };
            if !ordered || !e.t.is_finite() || e.t > self.horizon {
                return Err(Error::InvalidSequence(format!(
                    "event {i} at t={} breaks 0 < t_1 <= ... <= T={}",
                    e.t, self.horizon
                )));
            }
            prev = e.t;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Per-mark event counts.
    pub fn mark_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for e in &self.events {
            c[e.m] += 1;
        }
        c
    }
}

/// Unnormalized NLL sums for one or more sequences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NllTotals {
    /// Ground-process part, including every survival integral.
    pub time: f64,
    /// Mark-conditional part.
    pub mark: f64,
    pub events: usize,
}

impl NllTotals {
    pub fn total(&self) -> f64 {
        self.time + self.mark
    }

    pub fn merge(&mut self, other: &NllTotals) {
        self.time += other.time;
        self.mark += other.mark;
        self.events += other.events;
    }

    /// Per-event averages; a zero event count leaves the sums undivided.
    pub fn breakdown(&self) -> NllBreakdown {
        let n = self.events.max(1) as f64;
        NllBreakdown {
            tm_nll: self.total() / n,
            t_nll: self.time / n,
            m_nll: self.mark / n,
            event_count: self.events,
        }
    }
}

/// Per-event NLL averages, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllBreakdown {
    pub tm_nll: f64,
    pub t_nll: f64,
    pub m_nll: f64,
    pub event_count: usize,
}

/// Loss node plus value-level breakdown for one sequence on one tape.
#[derive(Debug, Clone, Copy)]
pub struct SequenceNll {
    /// `Λ(T) − Σ_i log(λ_{m_i}(t_i⁻) + ε)`.
    pub loss: Var,
    pub totals: NllTotals,
}

fn check_marks<M: LatentIntensity + ?Sized>(model: &M, seq: &EventSequence) -> Result<()> {
    if seq.k != model.num_marks() {
        return Err(Error::InvalidSequence(format!(
            "sequence has K={} but model expects K={}",
            seq.k,
            model.num_marks()
        )));
    }
    seq.validate()
}

/// Records the full-sequence NLL of a bound model on `tape`.
pub fn record_sequence_nll<M: LatentIntensity + ?Sized>(
    model: &M,
    tape: &mut Tape,
    seq: &EventSequence,
    max_step: f64,
) -> Result<SequenceNll> {
    check_marks(model, seq)?;
    let dynamics = ModelDynamics(model);
    let mut state = AugmentedState {
        z: model.initial_state(tape)?,
        lambda: tape.scalar(0.0),
    };
    let mut prev_t = 0.0;
    let mut prev_big_lambda = 0.0;
    let mut totals = NllTotals::default();
    let mut log_terms: Vec<(Var, f64)> = Vec::with_capacity(seq.len() + 1);
    for e in &seq.events {
        state = integrate(tape, &dynamics, state, prev_t, e.t, max_step)?;
        let lam = model.intensities(tape, e.t, state.z)?;
        let sel = tape.slice(lam, e.m, 1, 1)?;
        let sel = tape.offset(sel, INTENSITY_FLOOR);
        log_terms.push((tape.log(sel), -1.0));

        let rates = tape.value(lam);
        let ground: f64 = rates.iter().map(|r| r + INTENSITY_FLOOR).sum();
        let own = rates[e.m] + INTENSITY_FLOOR;
        let big_lambda = tape.item(state.lambda);
        totals.time += -ground.ln() + (big_lambda - prev_big_lambda);
        totals.mark += -(own / ground).ln();
        totals.events += 1;

        state.z = model.jump(tape, state.z, e.m)?;
        prev_t = e.t;
        prev_big_lambda = big_lambda;
    }
    state = integrate(tape, &dynamics, state, prev_t, seq.horizon, max_step)?;
    totals.time += tape.item(state.lambda) - prev_big_lambda;
    log_terms.push((state.lambda, 1.0));
    let loss = tape.lin_comb(&log_terms)?;
    if !tape.item(loss).is_finite() {
        return Err(Error::Numeric("sequence NLL is not finite".into()));
    }
    Ok(SequenceNll { loss, totals })
}

/// Sequence NLL in nats (not normalized by event count).
pub fn sequence_nll<P: PointProcessModel + ?Sized>(model: &P, seq: &EventSequence, max_step: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let out = record_sequence_nll(&bound, &mut tape, seq, max_step)?;
    Ok(tape.item(out.loss))
}

/// Sequence NLL, its time/mark totals, and the gradient with respect to
/// the flattened parameters.
pub fn sequence_nll_grad(model: &Itpp, seq: &EventSequence, max_step: f64) -> Result<(f64, NllTotals, Vec<f64>)> {
    let mut tape = Tape::new();
    let (bound, flat) = model.bind_trainable(&mut tape)?;
    let out = record_sequence_nll(&bound, &mut tape, seq, max_step)?;
    let grads = tape.backward(out.loss)?;
    let g = grads.get_or_zeros(flat);
    Ok((tape.item(out.loss), out.totals, g))
}

pub fn nll_totals<P: PointProcessModel + ?Sized>(model: &P, seq: &EventSequence, max_step: f64) -> Result<NllTotals> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    Ok(record_sequence_nll(&bound, &mut tape, seq, max_step)?.totals)
}

/// Per-event time/mark split for one sequence.
pub fn nll_breakdown<P: PointProcessModel + ?Sized>(
    model: &P,
    seq: &EventSequence,
    max_step: f64,
) -> Result<NllBreakdown> {
    Ok(nll_totals(model, seq, max_step)?.breakdown())
}

/// Replays `history` from the initial state and returns the post-jump latent
/// state after the last event, together with that event's time.
fn state_after<M: LatentIntensity + ?Sized>(
    model: &M,
    tape: &mut Tape,
    history: &[Event],
    max_step: f64,
) -> Result<(Var, f64)> {
    let dynamics = ModelDynamics(model);
    let mut state = AugmentedState {
        z: model.initial_state(tape)?,
        lambda: tape.scalar(0.0),
    };
    let mut prev = 0.0;
    for e in history {
        if e.m >= model.num_marks() {
            return Err(Error::MarkOutOfRange { mark: e.m, k: model.num_marks() });
        }
        if e.t < prev {
            return Err(Error::InvalidSequence(format!("history not ordered at t={}", e.t)));
        }
        state = integrate(tape, &dynamics, state, prev, e.t, max_step)?;
        state.z = model.jump(tape, state.z, e.m)?;
        prev = e.t;
    }
    Ok((state.z, prev))
}

/// `f(t, k) = λ_k(t)·exp(−∫_{t̄}^{t} λ(τ) dτ)` given the history.
pub fn joint_density<P: PointProcessModel + ?Sized>(
    model: &P,
    history: &[Event],
    t: f64,
    k: usize,
    max_step: f64,
) -> Result<f64> {
    if k >= model.num_marks() {
        return Err(Error::MarkOutOfRange { mark: k, k: model.num_marks() });
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let (z, last) = state_after(&bound, &mut tape, history, max_step)?;
    if t < last {
        return Err(Error::TimeBeforeHistory { t, last });
    }
    let start = AugmentedState { z, lambda: tape.scalar(0.0) };
    let s = integrate(&mut tape, &ModelDynamics(&bound), start, last, t, max_step)?;
    let lam = bound.intensities(&mut tape, t, s.z)?;
    Ok(tape.value(lam)[k] * (-tape.item(s.lambda)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    /// Quadrature and solver step.
    pub max_step: f64,
    /// Extend the grid until survival drops below this.
    pub survival_eps: f64,
    /// Absolute length of the look-ahead window after `t̄`.
    pub horizon_cap: f64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            max_step: DEFAULT_MAX_STEP,
            survival_eps: 1e-3,
            horizon_cap: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Expected next event time (absolute).
    pub time: f64,
    pub mark: usize,
    /// Renormalized mark probabilities.
    pub probs: Vec<f64>,
    /// Survival was still above the threshold at the cap, so `time` is the
    /// expectation conditioned on an event before the cap.
    pub truncated: bool,
}

/// Expected time and most probable mark of the next event from the
/// post-jump state `z` at `t_bar`.
pub fn predict_from_state<M: LatentIntensity + ?Sized>(
    model: &M,
    tape: &mut Tape,
    z: Var,
    t_bar: f64,
    opts: &PredictOptions,
) -> Result<Prediction> {
    if !(opts.horizon_cap > 0.0) {
        return Err(Error::Config(format!("horizon cap must be positive, got {}", opts.horizon_cap)));
    }
    if !(opts.max_step > 0.0) {
        return Err(Error::InvalidStep(opts.max_step));
    }
    let k = model.num_marks();
    let dynamics = ModelDynamics(model);
    let end = t_bar + opts.horizon_cap;
    let mut state = AugmentedState { z, lambda: tape.scalar(0.0) };
    let mut t = t_bar;
    let lam0 = model.intensities(tape, t, state.z)?;
    let mut prev_rates = tape.value(lam0).to_vec();
    let mut prev_surv = 1.0;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut mass = vec![0.0; k];
    let mut truncated = true;
    while t < end {
        let next = (t + opts.max_step).min(end);
        let h = next - t;
        state = integrate(tape, &dynamics, state, t, next, opts.max_step)?;
        let lam = model.intensities(tape, next, state.z)?;
        let rates = tape.value(lam).to_vec();
        let surv = (-tape.item(state.lambda)).exp();
        let f0: f64 = prev_rates.iter().sum::<f64>() * prev_surv;
        let f1: f64 = rates.iter().sum::<f64>() * surv;
        den += 0.5 * h * (f0 + f1);
        num += 0.5 * h * (t * f0 + next * f1);
        for j in 0..k {
            mass[j] += 0.5 * h * (prev_rates[j] * prev_surv + rates[j] * surv);
        }
        t = next;
        prev_rates = rates;
        prev_surv = surv;
        if surv < opts.survival_eps {
            truncated = false;
            break;
        }
    }
    let time = if den > 0.0 { num / den } else { t_bar };
    let z_mass: f64 = mass.iter().sum();
    let probs: Vec<f64> = if z_mass > 0.0 {
        mass.iter().map(|m| m / z_mass).collect()
    } else {
        vec![1.0 / k as f64; k]
    };
    let mark = argmax(&probs);
    Ok(Prediction { time, mark, probs, truncated })
}

/// First index of the maximum; NaNs never win.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] || v[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Next-event prediction after `history`.
pub fn predict_next<P: PointProcessModel + ?Sized>(
    model: &P,
    history: &[Event],
    opts: &PredictOptions,
) -> Result<Prediction> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let (z, last) = state_after(&bound, &mut tape, history, opts.max_step)?;
    predict_from_state(&bound, &mut tape, z, last, opts)
}

/// Steps a model's latent state forward in time without keeping a long
/// tape: every call records on a fresh tape seeded with the current state.
pub struct LatentWalker<'a, P: ?Sized> {
    model: &'a P,
    z: Tensor,
    t: f64,
    max_step: f64,
}

impl<'a, P: PointProcessModel + ?Sized> LatentWalker<'a, P> {
    /// Initial state at time 0.
    pub fn new(model: &'a P, max_step: f64) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let z0 = bound.initial_state(&mut tape)?;
        Ok(Self {
            model,
            z: tape.tensor(z0),
            t: 0.0,
            max_step,
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> &Tensor {
        &self.z
    }

    /// Evolves the state by the drift alone up to `t`.
    pub fn advance(&mut self, t: f64) -> Result<()> {
        if t < self.t {
            return Err(Error::TimeBeforeHistory { t, last: self.t });
        }
        if t == self.t {
            return Ok(());
        }
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape)?;
        let start = AugmentedState {
            z: tape.constant(self.z.clone()),
            lambda: tape.scalar(0.0),
        };
        // Λ is not needed here, only the latent path
        let drift_only = |tape: &mut Tape, t: f64, s: &AugmentedState| -> Result<AugmentedState> {
            Ok(AugmentedState {
                z: bound.drift(tape, t, s.z)?,
                lambda: tape.scalar(0.0),
            })
        };
        let s = integrate(&mut tape, &drift_only, start, self.t, t, self.max_step)?;
        self.z = tape.tensor(s.z);
        self.t = t;
        Ok(())
    }

    pub fn jump(&mut self, mark: usize) -> Result<()> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape)?;
        let z = tape.constant(self.z.clone());
        let after = bound.jump(&mut tape, z, mark)?;
        self.z = tape.tensor(after);
        Ok(())
    }

    pub fn intensities(&self) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape)?;
        let z = tape.constant(self.z.clone());
        let lam = bound.intensities(&mut tape, self.t, z)?;
        Ok(tape.value(lam).to_vec())
    }

    /// Next-event prediction from the current state.
    pub fn predict(&self, opts: &PredictOptions) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape)?;
        let z = tape.constant(self.z.clone());
        predict_from_state(&bound, &mut tape, z, self.t, opts)
    }
}

/// Predictions for events `1..L` of `seq`, each conditioned on the events
/// before it. Cost is linear in sequence length.
pub fn rolling_predictions<P: PointProcessModel + ?Sized>(
    model: &P,
    seq: &EventSequence,
    opts: &PredictOptions,
) -> Result<Vec<Prediction>> {
    if seq.k != model.num_marks() {
        return Err(Error::InvalidSequence(format!(
            "sequence has K={} but model expects K={}",
            seq.k,
            model.num_marks()
        )));
    }
    seq.validate()?;
    let mut walker = LatentWalker::new(model, opts.max_step)?;
    let mut out = Vec::with_capacity(seq.len().saturating_sub(1));
    for (i, e) in seq.events.iter().enumerate() {
        if i > 0 {
            out.push(walker.predict(opts)?);
        }
        walker.advance(e.t)?;
        walker.jump(e.m)?;
    }
    Ok(out)
}

/// Initial finite-difference step for `nll_grad_check`; extrapolation
/// shrinks it as far as each coordinate needs.
pub const GRAD_CHECK_STEP: f64 = 0.05;
/// Largest relative gradient error accepted as a pass.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

/// Largest relative error between the reverse-mode gradient of the full
/// sequence NLL and extrapolated central differences, over every parameter.
pub fn nll_grad_check(model: &Itpp, seq: &EventSequence, max_step: f64, fd_step: f64) -> Result<f64> {
    let point = Tensor::row(model.params().to_vec());
    let err = crate::numcore::grad_check(
        |tape, flat| {
            let wrap = |e: Error| crate::numcore::NumError::InvalidArgument {
                op: "sequence_nll",
                detail: e.to_string(),
            };
            let bound = model.bind_flat(tape, flat).map_err(wrap)?;
            Ok(record_sequence_nll(&bound, tape, seq, max_step).map_err(wrap)?.loss)
        },
        &point,
        fd_step,
    )?;
    Ok(err)
}
