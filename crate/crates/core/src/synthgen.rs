//! Ground-truth Poisson and exponential-kernel Hawkes processes: exact
//! simulation by thinning, closed-form intensities and compensators, and
//! dataset generation with train/validation/test splits.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{Event, EventSequence};
use crate::model::{LatentIntensity, PointProcessModel};
use crate::numcore::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessKind {
    Poisson,
    Hawkes,
}

impl std::str::FromStr for ProcessKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisson" => Ok(ProcessKind::Poisson),
            "hawkes" => Ok(ProcessKind::Hawkes),
            other => Err(Error::Config(format!("unknown process {other:?} (expected poisson or hawkes)"))),
        }
    }
}

/// `λ_k(t) = μ_k + Σ_{t_i<t} α_{m_i,k} exp(−φ_{m_i,k}(t − t_i))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthProcess {
    pub kind: ProcessKind,
    pub mu: Vec<f64>,
    /// Row = source mark, column = excited mark.
    pub alpha: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub horizon: f64,
}

impl GroundTruthProcess {
    pub fn poisson(mu: Vec<f64>, horizon: f64) -> Result<Self> {
        let k = mu.len();
        let p = Self {
            kind: ProcessKind::Poisson,
            mu,
            alpha: vec![vec![0.0; k]; k],
            phi: vec![vec![1.0; k]; k],
            horizon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn hawkes(mu: Vec<f64>, alpha: Vec<Vec<f64>>, phi: Vec<Vec<f64>>, horizon: f64) -> Result<Self> {
        let p = Self {
            kind: ProcessKind::Hawkes,
            mu,
            alpha,
            phi,
            horizon,
        };
        p.validate()?;
        Ok(p)
    }

    /// Three-type homogeneous Poisson benchmark, rates `[5, 1, 2]`.
    pub fn benchmark_poisson() -> Self {
        Self::poisson(vec![5.0, 1.0, 2.0], 10.0).expect("valid benchmark")
    }

    /// Three-type mutually exciting Hawkes benchmark.
    pub fn benchmark_hawkes() -> Self {
        Self::hawkes(
            vec![0.5, 0.4, 0.3],
            vec![vec![1.0, 0.5, 0.5], vec![0.5, 1.0, 0.5], vec![0.5, 0.5, 1.0]],
            vec![vec![2.0, 4.0, 4.0], vec![4.0, 2.0, 4.0], vec![4.0, 4.0, 2.0]],
            10.0,
        )
        .expect("valid benchmark")
    }

    pub fn benchmark(kind: ProcessKind) -> Self {
        match kind {
            ProcessKind::Poisson => Self::benchmark_poisson(),
            ProcessKind::Hawkes => Self::benchmark_hawkes(),
        }
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let bad = |m: String| Err(Error::Config(m));
        if k == 0 {
            return bad("process needs at least one mark".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.mu.iter().any(|&m| !(m >= 0.0 && m.is_finite())) {
            return bad("base rates must be finite and nonnegative".into());
        }
        if self.alpha.len() != k || self.phi.len() != k {
            return bad(format!("alpha and phi must be {k}x{k}"));
        }
        for i in 0..k {
            if self.alpha[i].len() != k || self.phi[i].len() != k {
                return bad(format!("alpha and phi must be {k}x{k}"));
            }
            for j in 0..k {
                let (a, p) = (self.alpha[i][j], self.phi[i][j]);
                if !(a >= 0.0 && a.is_finite()) {
                    return bad("excitation must be finite and nonnegative".into());
                }
                if a > 0.0 && !(p > 0.0 && p.is_finite()) {
                    return bad("decay must be positive wherever excitation is".into());
                }
                if self.kind == ProcessKind::Poisson && a != 0.0 {
                    return bad("poisson process must have zero excitation".into());
                }
            }
        }
        Ok(())
    }

    /// Intensities at `t`, excluding any event at exactly `t` (left limit).
    pub fn true_intensity(&self, history: &[Event], t: f64) -> Vec<f64> {
        let mut lam = self.mu.clone();
        if self.kind == ProcessKind::Hawkes {
            for e in history.iter().filter(|e| e.t < t) {
                for (k, l) in lam.iter_mut().enumerate() {
                    *l += self.alpha[e.m][k] * (-self.phi[e.m][k] * (t - e.t)).exp();
                }
            }
        }
        lam
    }

    pub fn true_intensity_k(&self, history: &[Event], t: f64, k: usize) -> f64 {
        self.true_intensity(history, t)[k]
    }

    /// `Λ*(t) = ∫_0^t Σ_k λ_k(τ) dτ` in closed form.
    pub fn compensator(&self, history: &[Event], t: f64) -> f64 {
        let mut total = self.mu.iter().sum::<f64>() * t;
        if self.kind == ProcessKind::Hawkes {
            for e in history.iter().filter(|e| e.t < t) {
                for k in 0..self.k() {
                    let (a, p) = (self.alpha[e.m][k], self.phi[e.m][k]);
                    if a > 0.0 {
                        total += a / p * (1.0 - (-p * (t - e.t)).exp());
                    }
                }
            }
        }
        total
    }

    /// Exact NLL `Λ*(T) − Σ_i log λ*_{m_i}(t_i⁻)`.
    pub fn analytic_nll(&self, seq: &EventSequence) -> f64 {
        let mut log_sum = 0.0;
        for (i, e) in seq.events.iter().enumerate() {
            log_sum += self.true_intensity(&seq.events[..i], e.t)[e.m].ln();
        }
        self.compensator(&seq.events, seq.horizon) - log_sum
    }

    /// Time-rescaled inter-event gaps `Λ*(t_i) − Λ*(t_{i−1})`; Exp(1)
    /// distributed under the true process.
    pub fn rescaled_gaps(&self, seq: &EventSequence) -> Vec<f64> {
        let mut prev = 0.0;
        seq.events
            .iter()
            .map(|e| {
                let c = self.compensator(&seq.events, e.t);
                let gap = c - prev;
                prev = c;
                gap
            })
            .collect()
    }

    /// One sequence on `(0, T]` by thinning. The bound is the current total
    /// intensity, refreshed after every candidate; it dominates the future
    /// intensity because the kernels only decay between events.
    pub fn thinning_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> EventSequence {
        let k = self.k();
        // excitation[i][j] is the current contribution of source i to mark j
        let mut excitation = vec![vec![0.0; k]; k];
        let rates_at = |exc: &Vec<Vec<f64>>| -> Vec<f64> {
            (0..k).map(|j| self.mu[j] + (0..k).map(|i| exc[i][j]).sum::<f64>()).collect()
        };
        let decay = |exc: &mut Vec<Vec<f64>>, dt: f64| {
            for i in 0..k {
                for j in 0..k {
                    if exc[i][j] != 0.0 {
                        exc[i][j] *= (-self.phi[i][j] * dt).exp();
                    }
                }
            }
        };
        let mut events = Vec::new();
        let mut t = 0.0;
        loop {
            let bound: f64 = rates_at(&excitation).iter().sum();
            if bound <= 0.0 {
                break;
            }
            let dt = Exp::new(bound).expect("positive rate").sample(rng);
            let cand = t + dt;
            if cand > self.horizon {
                break;
            }
            decay(&mut excitation, dt);
            t = cand;
            let rates = rates_at(&excitation);
            let total: f64 = rates.iter().sum();
            let u: f64 = rng.random();
            if u * bound <= total {
                let last = events.last().map_or(0.0, |e: &Event| e.t);
                if t <= last {
                    continue;
                }
                let m = WeightedIndex::new(&rates).expect("positive rates").sample(rng);
                events.push(Event { t, m });
                if self.kind == ProcessKind::Hawkes {
                    for j in 0..k {
                        excitation[m][j] += self.alpha[m][j];
                    }
                }
            }
        }
        EventSequence {
            horizon: self.horizon,
            k,
            events,
        }
    }

    /// Sequence number `index` of the stream keyed by `seed`; independent of
    /// the order in which sequences are generated.
    pub fn sample_indexed(&self, seed: u64, index: u64) -> EventSequence {
        self.thinning_sample(&mut sequence_rng(seed, index))
    }
}

pub fn sequence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `n_events` uniform times on `(0, horizon]` with uniform marks; a small
/// fixture for gradient checks rather than a sample of any process.
pub fn toy_sequence(k: usize, n_events: usize, horizon: f64, seed: u64) -> Result<EventSequence> {
    if k == 0 {
        return Err(Error::Config("toy sequence needs K >= 1".into()));
    }
    let mut rng = sequence_rng(seed, 0);
    let mut times: Vec<f64> = (0..n_events).map(|_| (1.0 - rng.random::<f64>()) * horizon).collect();
    times.sort_by(f64::total_cmp);
    let events = times
        .into_iter()
        .map(|t| Event {
            t,
            m: rng.random_range(0..k),
        })
        .collect();
    EventSequence::new(horizon, k, events)
}

/// Kolmogorov–Smirnov distance between the samples and Exp(1).
pub fn ks_statistic_exp1(samples: &[f64]) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let cdf = 1.0 - (-v.max(0.0)).exp();
            (cdf - i as f64 / n).max((i + 1) as f64 / n - cdf)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// Validation and test sizes are rounded; training takes the rest.
    pub fn from_ratios(n: usize, ratios: [f64; 3]) -> Result<Self> {
        if ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
        }
        let sum: f64 = ratios.iter().sum();
        let val = (n as f64 * ratios[1] / sum).round() as usize;
        let test = (n as f64 * ratios[2] / sum).round() as usize;
        if val + test > n {
            return Err(Error::Config(format!("cannot split {n} sequences by {ratios:?}")));
        }
        Ok(Self {
            train: n - val - test,
            val,
            test,
        })
    }
}

pub const DEFAULT_SPLIT: [f64; 3] = [3.0, 1.0, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub process: GroundTruthProcess,
    pub n_seqs: usize,
    pub splits: SplitSizes,
    /// Event counts per mark over all splits.
    pub per_type_counts: Vec<usize>,
    pub total_events: usize,
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<EventSequence>,
    pub val: Vec<EventSequence>,
    pub test: Vec<EventSequence>,
    pub manifest: Manifest,
}

/// `n_seqs` independent sequences, split in order train, val, test.
pub fn generate_dataset(proc: &GroundTruthProcess, n_seqs: usize, ratios: [f64; 3], seed: u64) -> Result<Dataset> {
    proc.validate()?;
    let splits = SplitSizes::from_ratios(n_seqs, ratios)?;
    let all: Vec<EventSequence> = (0..n_seqs as u64)
        .into_par_iter()
        .map(|i| proc.sample_indexed(seed, i))
        .collect();
    let mut per_type_counts = vec![0; proc.k()];
    for s in &all {
        for (c, n) in per_type_counts.iter_mut().zip(s.mark_counts()) {
            *c += n;
        }
    }
    let total_events: usize = per_type_counts.iter().sum();
    let manifest = Manifest {
        seed,
        process: proc.clone(),
        n_seqs,
        splits,
        per_type_counts,
        total_events,
        mean_length: if n_seqs > 0 { total_events as f64 / n_seqs as f64 } else { 0.0 },
    };
    let mut it = all.into_iter();
    let train = it.by_ref().take(splits.train).collect();
    let val = it.by_ref().take(splits.val).collect();
    let test = it.collect();
    Ok(Dataset {
        train,
        val,
        test,
        manifest,
    })
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_jsonl(path: &Path, seqs: &[EventSequence]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in seqs {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates one sequence per non-empty line.
pub fn read_jsonl(path: &Path) -> Result<Vec<EventSequence>> {
    let f = fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: EventSequence = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        s.validate()
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

impl Dataset {
    /// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, seqs) in SPLIT_NAMES.iter().zip([&self.train, &self.val, &self.test]) {
            write_jsonl(&dir.join(format!("{name}.jsonl")), seqs)?;
        }
        let mut m = serde_json::to_string_pretty(&self.manifest)?;
        m.push('\n');
        fs::write(dir.join(MANIFEST_FILE), m)?;
        Ok(())
    }
}

pub fn read_split(dir: &Path, name: &str) -> Result<Vec<EventSequence>> {
    read_jsonl(&dir.join(format!("{name}.jsonl")))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// The true process written as a latent-state model: the state holds the
/// `K×K` excitation matrix, which decays elementwise and gains `α_m` on row
/// `m` at an event. Lets the likelihood and prediction code run unchanged
/// on the ground truth.
#[derive(Debug, Clone)]
pub struct BoundProcess {
    k: usize,
    mu: Var,
    neg_phi: Var,
    ones: Var,
    alpha: Vec<Vec<f64>>,
}

impl PointProcessModel for GroundTruthProcess {
    type Bound = BoundProcess;

    fn num_marks(&self) -> usize {
        self.k()
    }

    fn bind(&self, tape: &mut Tape) -> Result<BoundProcess> {
        let k = self.k();
        let flat = |m: &[Vec<f64>], scale: f64| m.iter().flatten().map(|v| v * scale).collect::<Vec<_>>();
        Ok(BoundProcess {
            k,
            mu: tape.constant(Tensor::row(self.mu.clone())),
            neg_phi: tape.constant(Tensor::new(k, k, flat(&self.phi, -1.0))?),
            ones: tape.constant(Tensor::filled(1, k, 1.0)),
            alpha: self.alpha.clone(),
        })
    }
}

impl LatentIntensity for BoundProcess {
    fn num_marks(&self) -> usize {
        self.k
    }

    fn initial_state(&self, tape: &mut Tape) -> Result<Var> {
        Ok(tape.constant(Tensor::zeros(self.k, self.k)))
    }

    fn drift(&self, tape: &mut Tape, _t: f64, z: Var) -> Result<Var> {
        Ok(tape.mul(z, self.neg_phi)?)
    }

    fn jump(&self, tape: &mut Tape, z: Var, mark: usize) -> Result<Var> {
        if mark >= self.k {
            return Err(Error::MarkOutOfRange { mark, k: self.k });
        }
        let mut add = Tensor::zeros(self.k, self.k);
        add.data_mut()[mark * self.k..(mark + 1) * self.k].copy_from_slice(&self.alpha[mark]);
        let add = tape.constant(add);
        Ok(tape.add(z, add)?)
    }

    fn intensities(&self, tape: &mut Tape, _t: f64, z: Var) -> Result<Var> {
        let cols = tape.matmul(self.ones, z)?;
        Ok(tape.add(cols, self.mu)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::{predict_next, sequence_nll, PredictOptions};

    #[test]
    fn poisson_intensity_ignores_history() {
        let p = GroundTruthProcess::benchmark_poisson();
        let h = [Event { t: 1.0, m: 0 }, Event { t: 2.0, m: 2 }];
        assert_eq!(p.true_intensity(&h, 3.0), vec![5.0, 1.0, 2.0]);
    }

    #[test]
    fn hawkes_intensity_values() {
        let p = GroundTruthProcess::benchmark_hawkes();
        assert_eq!(p.true_intensity(&[], 4.0), vec![0.5, 0.4, 0.3]);
        let h = [Event { t: 0.0, m: 0 }];
        let lam = p.true_intensity(&h, 0.5);
        assert!((lam[0] - (0.5 + (-1f64).exp())).abs() < 1e-15);
        assert!((lam[0] - 0.8679).abs() < 1e-4);
        assert!((lam[1] - (0.4 + 0.5 * (-2f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn intensity_is_left_continuous_at_events() {
        let p = GroundTruthProcess::benchmark_hawkes();
        let h = [Event { t: 1.0, m: 1 }];
        assert_eq!(p.true_intensity(&h, 1.0), p.mu);
        let after = p.true_intensity(&h, 1.0 + 1e-12);
        assert!((after[1] - (0.4 + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn invalid_processes_rejected() {
        assert!(GroundTruthProcess::poisson(vec![-1.0], 10.0).is_err());
        assert!(GroundTruthProcess::poisson(vec![], 10.0).is_err());
        assert!(GroundTruthProcess::hawkes(vec![1.0], vec![vec![1.0]], vec![vec![0.0]], 10.0).is_err());
        let mut p = GroundTruthProcess::benchmark_poisson();
        p.alpha[0][0] = 0.1;
        assert!(p.validate().is_err());
    }

    #[test]
    fn zero_rate_poisson_is_empty() {
        let p = GroundTruthProcess::poisson(vec![0.0, 0.0], 10.0).unwrap();
        for i in 0..20 {
            assert!(p.sample_indexed(3, i).is_empty());
        }
    }

    #[test]
    fn sampling_is_deterministic_and_strictly_increasing() {
        let p = GroundTruthProcess::benchmark_hawkes();
        for i in 0..50 {
            let a = p.sample_indexed(11, i);
            assert_eq!(a, p.sample_indexed(11, i));
            a.validate().unwrap();
            assert!(a.events.windows(2).all(|w| w[0].t < w[1].t));
            assert!(a.events.iter().all(|e| e.t > 0.0 && e.t <= 10.0));
        }
        assert_ne!(p.sample_indexed(11, 0), p.sample_indexed(12, 0));
        assert_ne!(p.sample_indexed(11, 0), p.sample_indexed(11, 1));
    }

    #[test]
    fn compensator_matches_quadrature() {
        let p = GroundTruthProcess::benchmark_hawkes();
        let s = p.sample_indexed(5, 0);
        let t_end = 6.0;
        // Simpson's rule of the direct intensity on each smooth piece
        let mut knots = vec![0.0];
        knots.extend(s.events.iter().map(|e| e.t).filter(|&t| t < t_end));
        knots.push(t_end);
        let total = |t: f64| p.true_intensity(&s.events, t).iter().sum::<f64>();
        let mut q = 0.0;
        for w in knots.windows(2) {
            let n = 200;
            let h = (w[1] - w[0]) / n as f64;
            // right-limit at the left knot
            let f = |i: usize| if i == 0 { total(w[0] + 1e-13) } else { total(w[0] + i as f64 * h) };
            q += (0..n / 2).map(|j| h / 3.0 * (f(2 * j) + 4.0 * f(2 * j + 1) + f(2 * j + 2))).sum::<f64>();
        }
        assert!((p.compensator(&s.events, t_end) - q).abs() < 1e-6);
    }

    #[test]
    fn split_sizes() {
        assert_eq!(
            SplitSizes::from_ratios(500, DEFAULT_SPLIT).unwrap(),
            SplitSizes { train: 300, val: 100, test: 100 }
        );
        assert_eq!(SplitSizes::from_ratios(5, DEFAULT_SPLIT).unwrap(), SplitSizes { train: 3, val: 1, test: 1 });
        assert!(SplitSizes::from_ratios(5, [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn dataset_generation_is_order_independent() {
        let p = GroundTruthProcess::benchmark_poisson();
        let d = generate_dataset(&p, 10, DEFAULT_SPLIT, 42).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (6, 2, 2));
        assert_eq!(d.test[1], p.sample_indexed(42, 9));
        assert_eq!(d.manifest.total_events, d.manifest.per_type_counts.iter().sum::<usize>());
        assert_eq!(d, generate_dataset(&p, 10, DEFAULT_SPLIT, 42).unwrap());
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(&GroundTruthProcess::benchmark_hawkes(), 10, DEFAULT_SPLIT, 1).unwrap();
        d.write(dir.path()).unwrap();
        assert_eq!(read_split(dir.path(), "train").unwrap(), d.train);
        assert_eq!(read_split(dir.path(), "test").unwrap(), d.test);
        assert_eq!(read_manifest(dir.path()).unwrap(), d.manifest);
        fs::write(dir.path().join("bad.jsonl"), "{\"T\":1.0,\"K\":2,\"events\":[{\"t\":0.5,\"m\":5}]}\n").unwrap();
        assert!(matches!(read_split(dir.path(), "bad"), Err(Error::Data(_))));
    }

    #[test]
    fn ks_statistic_detects_mismatch() {
        let mut rng = sequence_rng(0, 0);
        let e = Exp::new(1.0).unwrap();
        let good: Vec<f64> = (0..5000).map(|_| e.sample(&mut rng)).collect();
        assert!(ks_statistic_exp1(&good) < 0.03);
        let bad: Vec<f64> = good.iter().map(|x| 1.5 * x).collect();
        assert!(ks_statistic_exp1(&bad) > 0.1);
    }

    #[test]
    fn latent_form_reproduces_closed_form_likelihood() {
        let p = GroundTruthProcess::benchmark_hawkes();
        for i in 0..5 {
            let s = p.sample_indexed(2, i);
            let ode = sequence_nll(&p, &s, 0.05).unwrap();
            let exact = p.analytic_nll(&s);
            assert!((ode - exact).abs() / s.len().max(1) as f64 <= 1e-4, "{ode} vs {exact}");
        }
    }

    #[test]
    fn latent_form_predicts_exponential_mean_for_poisson() {
        let p = GroundTruthProcess::benchmark_poisson();
        let opts = PredictOptions { max_step: 0.001, survival_eps: 1e-9, horizon_cap: 10.0 };
        let pr = predict_next(&p, &[Event { t: 2.0, m: 1 }], &opts).unwrap();
        assert!((pr.time - 2.125).abs() < 1e-4);
        assert_eq!(pr.mark, 0);
    }
}
