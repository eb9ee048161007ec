//! Test-set metrics: per-event NLL split, next-event time RMSE, macro-F1 of
//! mark predictions, intensity-recovery MAPE against a known process, and
//! CSV intensity trajectories.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::likelihood::{nll_totals, rolling_predictions, EventSequence, LatentWalker, NllBreakdown, NllTotals, PredictOptions};
use crate::model::PointProcessModel;
use crate::synthgen::GroundTruthProcess;

/// Default number of grid points per sequence for intensity comparisons.
pub const DEFAULT_GRID_POINTS: usize = 200;

/// Per-event NLL over a dataset: summed numerators divided by the total
/// event count.
pub fn eval_nll<P: PointProcessModel + ?Sized>(model: &P, data: &[EventSequence], max_step: f64) -> Result<NllBreakdown> {
    let parts: Vec<Result<NllTotals>> = data.par_iter().map(|s| nll_totals(model, s, max_step)).collect();
    let mut acc = NllTotals::default();
    for p in parts {
        acc.merge(&p?);
    }
    if acc.events == 0 {
        return Err(Error::Data("dataset has no events".into()));
    }
    Ok(acc.breakdown())
}

/// Per-class F1 and their unweighted mean over `k` classes. A class with
/// no true positives scores 0.
pub fn macro_f1(truth: &[usize], pred: &[usize], k: usize) -> (f64, Vec<f64>) {
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let per: Vec<f64> = (0..k)
        .map(|c| {
            if tp[c] == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64
            }
        })
        .collect();
    let mean = if k == 0 { 0.0 } else { per.iter().sum::<f64>() / k as f64 };
    (mean, per)
}

/// Pooled root mean squared error.
pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let se: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    (se / pred.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub rmse: f64,
    pub f1: f64,
    pub per_class_f1: Vec<f64>,
    pub predictions: usize,
    /// Predictions whose survival never fell below the cutoff.
    pub truncated: usize,
}

/// Rolling next-event prediction for every event with at least one event
/// before it; RMSE is pooled over all such events.
pub fn eval_prediction<P: PointProcessModel + ?Sized>(
    model: &P,
    data: &[EventSequence],
    opts: &PredictOptions,
) -> Result<PredictionMetrics> {
    let parts: Vec<Result<Vec<(f64, f64, usize, usize, bool)>>> = data
        .par_iter()
        .map(|s| {
            let preds = rolling_predictions(model, s, opts)?;
            Ok(preds
                .into_iter()
                .zip(&s.events[1..])
                .map(|(p, e)| (p.time, e.t, p.mark, e.m, p.truncated))
                .collect())
        })
        .collect();
    let (mut pt, mut tt, mut pm, mut tm) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut truncated = 0;
    for part in parts {
        for (p, t, pk, tk, tr) in part? {
            pt.push(p);
            tt.push(t);
            pm.push(pk);
            tm.push(tk);
            truncated += tr as usize;
        }
    }
    let (f1, per_class_f1) = macro_f1(&tm, &pm, model.num_marks());
    Ok(PredictionMetrics {
        rmse: rmse(&pt, &tt),
        f1,
        per_class_f1,
        predictions: pt.len(),
        truncated,
    })
}

/// Mean gap between consecutive events (the first gap is measured from 0).
pub fn mean_inter_event_time(data: &[EventSequence]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in data {
        let mut prev = 0.0;
        for e in &s.events {
            sum += e.t - prev;
            prev = e.t;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Grid times `(j + ½)·T/G` for `j = 0..G`.
pub fn grid_times(horizon: f64, grid_points: usize) -> Vec<f64> {
    let h = horizon / grid_points as f64;
    (0..grid_points).map(|j| (j as f64 + 0.5) * h).collect()
}

/// Learned intensities on the grid, conditioned on the realized history.
/// Events at a grid time are applied after it is evaluated, so the value is
/// the left limit there.
pub fn learned_on_grid<P: PointProcessModel + ?Sized>(
    model: &P,
    seq: &EventSequence,
    grid: &[f64],
    max_step: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut walker = LatentWalker::new(model, max_step)?;
    let mut out = Vec::with_capacity(grid.len());
    let mut next_event = 0;
    for &t in grid {
        while next_event < seq.events.len() && seq.events[next_event].t < t {
            let e = seq.events[next_event];
            walker.advance(e.t)?;
            walker.jump(e.m)?;
            next_event += 1;
        }
        walker.advance(t)?;
        out.push(walker.intensities()?);
    }
    Ok(out)
}

fn check_process<P: PointProcessModel + ?Sized>(model: &P, proc: &GroundTruthProcess) -> Result<()> {
    if proc.k() != model.num_marks() {
        return Err(Error::Data(format!(
            "process has K={} but model expects K={}",
            proc.k(),
            model.num_marks()
        )));
    }
    Ok(())
}

/// Mean of `|λ̂ − λ*|/λ*` over sequences, grid points and channels.
pub fn intensity_mape<P: PointProcessModel + ?Sized>(
    model: &P,
    proc: &GroundTruthProcess,
    data: &[EventSequence],
    grid_points: usize,
    max_step: f64,
) -> Result<f64> {
    check_process(model, proc)?;
    if grid_points == 0 || data.is_empty() {
        return Err(Error::Data("MAPE needs at least one sequence and one grid point".into()));
    }
    let parts: Vec<Result<(f64, usize)>> = data
        .par_iter()
        .map(|s| {
            let grid = grid_times(s.horizon, grid_points);
            let learned = learned_on_grid(model, s, &grid, max_step)?;
            let mut sum = 0.0;
            let mut n = 0;
            for (t, lhat) in grid.iter().zip(&learned) {
                let truth = proc.true_intensity(&s.events, *t);
                for (a, b) in lhat.iter().zip(&truth) {
                    if *b <= 0.0 {
                        return Err(Error::Data(format!("true intensity is zero at t={t}")));
                    }
                    sum += (a - b).abs() / b;
                    n += 1;
                }
            }
            Ok((sum, n))
        })
        .collect();
    let mut sum = 0.0;
    let mut n = 0;
    for p in parts {
        let (s, c) = p?;
        sum += s;
        n += c;
    }
    Ok(sum / n as f64)
}

/// Writes `t,channel,lambda_true,lambda_learned` rows on the MAPE grid.
pub fn emit_trajectories<P: PointProcessModel + ?Sized>(
    model: &P,
    proc: &GroundTruthProcess,
    seq: &EventSequence,
    grid_points: usize,
    max_step: f64,
    path: &Path,
) -> Result<()> {
    check_process(model, proc)?;
    let grid = grid_times(seq.horizon, grid_points);
    let learned = learned_on_grid(model, seq, &grid, max_step)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "t,channel,lambda_true,lambda_learned")?;
    for (t, lhat) in grid.iter().zip(&learned) {
        let truth = proc.true_intensity(&seq.events, *t);
        for (k, (a, b)) in lhat.iter().zip(&truth).enumerate() {
            writeln!(w, "{t},{k},{b},{a}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Hex SHA-256 over length-prefixed parts.
pub fn fingerprint(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tm_nll: Option<f64>,
    pub t_nll: Option<f64>,
    pub m_nll: Option<f64>,
    pub rmse: Option<f64>,
    pub f1: Option<f64>,
    pub mape: Option<f64>,
    pub event_count: usize,
    pub sequence_count: usize,
    /// Hash of model config, evaluation settings and checkpoint bytes.
    pub fingerprint: String,
}

impl MetricsReport {
    pub fn new(data: &[EventSequence], fingerprint: String) -> Self {
        Self {
            tm_nll: None,
            t_nll: None,
            m_nll: None,
            rmse: None,
            f1: None,
            mape: None,
            event_count: data.iter().map(|s| s.len()).sum(),
            sequence_count: data.len(),
            fingerprint,
        }
    }

    pub fn with_nll(mut self, b: &NllBreakdown) -> Self {
        self.tm_nll = Some(b.tm_nll);
        self.t_nll = Some(b.t_nll);
        self.m_nll = Some(b.m_nll);
        self
    }

    pub fn with_prediction(mut self, p: &PredictionMetrics) -> Self {
        self.rmse = Some(p.rmse);
        self.f1 = Some(p.f1);
        self
    }

    pub fn with_mape(mut self, mape: f64) -> Self {
        self.mape = Some(mape);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::Event;
    use crate::model::{Itpp, ModelConfig, Variant};
    use crate::numcore::{Tape, Var};
    use crate::synthgen::{generate_dataset, DEFAULT_SPLIT};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// True process with every rate multiplied by a constant.
    struct Scaled(GroundTruthProcess, f64);

    struct ScaledBound(<GroundTruthProcess as PointProcessModel>::Bound, f64);

    impl PointProcessModel for Scaled {
        type Bound = ScaledBound;
        fn num_marks(&self) -> usize {
            self.0.k()
        }
        fn bind(&self, tape: &mut Tape) -> Result<ScaledBound> {
            Ok(ScaledBound(self.0.bind(tape)?, self.1))
        }
    }

    impl crate::model::LatentIntensity for ScaledBound {
        fn num_marks(&self) -> usize {
            self.0.num_marks()
        }
        fn initial_state(&self, tape: &mut Tape) -> Result<Var> {
            self.0.initial_state(tape)
        }
        fn drift(&self, tape: &mut Tape, t: f64, z: Var) -> Result<Var> {
            self.0.drift(tape, t, z)
        }
        fn jump(&self, tape: &mut Tape, z: Var, m: usize) -> Result<Var> {
            self.0.jump(tape, z, m)
        }
        fn intensities(&self, tape: &mut Tape, t: f64, z: Var) -> Result<Var> {
            let l = self.0.intensities(tape, t, z)?;
            Ok(tape.scale(l, self.1))
        }
    }

    #[test]
    fn true_poisson_nll_matches_closed_form() {
        let p = GroundTruthProcess::benchmark_poisson();
        let d = generate_dataset(&p, 500, DEFAULT_SPLIT, 3).unwrap();
        let b = eval_nll(&p, &d.test, 0.05).unwrap();
        // per-event NLL of the true process given the realized counts
        let counts = d.test.iter().fold(vec![0usize; 3], |mut c, s| {
            for (a, b) in c.iter_mut().zip(s.mark_counts()) {
                *a += b;
            }
            c
        });
        let n: usize = counts.iter().sum();
        let exact = (80.0 * d.test.len() as f64 - counts.iter().zip(&p.mu).map(|(c, m)| *c as f64 * m.ln()).sum::<f64>())
            / n as f64;
        assert!((b.tm_nll - exact).abs() < 1e-6, "{} vs {exact}", b.tm_nll);
        // and close to the expectation −Σ(μ_k/μ)ln μ_k + μT/E[N]
        let expected = -(5.0 / 8.0 * 5f64.ln() + 2.0 / 8.0 * 2f64.ln()) + 1.0;
        assert!((expected - (-0.179)).abs() < 1e-3);
        assert!((b.tm_nll - expected).abs() < 0.03, "{}", b.tm_nll);
        assert!((b.tm_nll - (b.t_nll + b.m_nll)).abs() < 1e-9);
    }

    #[test]
    fn dataset_nll_is_event_weighted_mean() {
        let m = Itpp::new(ModelConfig::new(3, 4, Variant::Full), 1).unwrap();
        let d = generate_dataset(&GroundTruthProcess::benchmark_hawkes(), 10, DEFAULT_SPLIT, 3).unwrap();
        let all = eval_nll(&m, &d.train, 0.1).unwrap();
        let mut num = 0.0;
        let mut den = 0;
        for s in &d.train {
            let t = nll_totals(&m, s, 0.1).unwrap();
            num += t.total();
            den += t.events;
        }
        assert!((all.tm_nll - num / den as f64).abs() < 1e-12);
        assert_eq!(all.event_count, den);
    }

    #[test]
    fn nll_of_event_free_dataset_is_error() {
        let m = Itpp::new(ModelConfig::new(2, 4, Variant::Full), 1).unwrap();
        let d = vec![EventSequence::new(1.0, 2, vec![]).unwrap()];
        assert!(matches!(eval_nll(&m, &d, 0.1), Err(Error::Data(_))));
    }

    #[test]
    fn single_mark_dataset_has_zero_mark_nll() {
        let p = GroundTruthProcess::poisson(vec![2.0], 5.0).unwrap();
        let d = generate_dataset(&p, 10, DEFAULT_SPLIT, 1).unwrap();
        let m = Itpp::new(ModelConfig::new(1, 4, Variant::Full), 1).unwrap();
        assert_eq!(eval_nll(&m, &d.train, 0.1).unwrap().m_nll, 0.0);
    }

    #[test]
    fn f1_edge_cases() {
        let t = [0, 1, 2, 1, 0];
        assert_eq!(macro_f1(&t, &t, 3).0, 1.0);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        // constant prediction of class 0 with class frequencies p, ...
        let p0 = 5.0 / 8.0;
        let truth: Vec<usize> = (0..8000).map(|i| if i % 8 < 5 { 0 } else if i % 8 < 6 { 1 } else { 2 }).collect();
        let pred = vec![0; truth.len()];
        let (f, per) = macro_f1(&truth, &pred, 3);
        assert!((f - 2.0 * p0 / (1.0 + p0) / 3.0).abs() < 1e-12);
        assert!((f - 0.256).abs() < 1e-3);
        assert_eq!(&per[1..], &[0.0, 0.0]);
    }

    #[test]
    fn random_predictor_f1_concentrates() {
        // uniform random guesses on balanced classes: each class has
        // precision = recall = 1/K, so F1 = 1/K
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let truth: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let (f, _) = macro_f1(&truth, &pred, 4);
        assert!((f - 0.25).abs() < 0.015, "{f}");
    }

    #[test]
    fn true_poisson_predictor_marks_and_f1() {
        let p = GroundTruthProcess::benchmark_poisson();
        let d = generate_dataset(&p, 25, DEFAULT_SPLIT, 8).unwrap();
        let m = eval_prediction(&p, &d.test, &PredictOptions::default()).unwrap();
        let truth: Vec<usize> = d.test.iter().flat_map(|s| s.events[1..].iter().map(|e| e.m)).collect();
        let (f, _) = macro_f1(&truth, &vec![0; truth.len()], 3);
        assert_eq!(m.f1, f);
        assert!((m.f1 - 0.256).abs() < 0.03, "{}", m.f1);
        assert_eq!(m.truncated, 0);
        assert!(m.rmse.is_finite() && m.rmse > 0.0);
    }

    #[test]
    fn mape_of_truth_is_zero_and_doubling_gives_one() {
        for p in [GroundTruthProcess::benchmark_poisson(), GroundTruthProcess::benchmark_hawkes()] {
            let d = generate_dataset(&p, 10, DEFAULT_SPLIT, 2).unwrap();
            let same = intensity_mape(&p, &p, &d.test, 200, 0.002).unwrap();
            let doubled = intensity_mape(&Scaled(p.clone(), 2.0), &p, &d.test, 200, 0.002).unwrap();
            assert!(same < 1e-8, "{same}");
            assert!((doubled - 1.0).abs() < 1e-8, "{doubled}");
        }
    }

    #[test]
    fn mape_uses_left_limits_at_events() {
        // an event exactly on a grid point must not count at that point
        let p = GroundTruthProcess::benchmark_hawkes();
        let grid = grid_times(10.0, 10);
        let s = EventSequence::new(10.0, 3, vec![Event { t: grid[3], m: 0 }]).unwrap();
        let lam = learned_on_grid(&p, &s, &grid, 0.01).unwrap();
        assert_eq!(lam[3], p.mu);
        assert!(lam[4][0] > p.mu[0]);
        assert!(intensity_mape(&p, &p, &[s], 10, 0.01).unwrap() < 1e-8);
    }

    #[test]
    fn mape_is_stable_under_grid_refinement() {
        let p = GroundTruthProcess::benchmark_hawkes();
        let m = Itpp::new(ModelConfig::new(3, 4, Variant::Full), 6).unwrap();
        let d = generate_dataset(&p, 10, DEFAULT_SPLIT, 4).unwrap();
        let a = intensity_mape(&m, &p, &d.test, 200, 0.05).unwrap();
        let b = intensity_mape(&m, &p, &d.test, 800, 0.05).unwrap();
        assert!((a - b).abs() / b < 0.05, "{a} vs {b}");
    }

    #[test]
    fn trajectories_csv_shape_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let p = GroundTruthProcess::benchmark_poisson();
        let s = p.sample_indexed(1, 0);
        let m = Itpp::new(ModelConfig::new(3, 4, Variant::Full), 6).unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        emit_trajectories(&m, &p, &s, 50, 0.05, &a).unwrap();
        emit_trajectories(&m, &p, &s, 50, 0.05, &b).unwrap();
        let text = fs::read_to_string(&a).unwrap();
        assert_eq!(text, fs::read_to_string(&b).unwrap());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 50 * 3 + 1);
        assert_eq!(lines[0], "t,channel,lambda_true,lambda_learned");
        for l in &lines[1..] {
            let f: Vec<&str> = l.split(',').collect();
            let k: usize = f[1].parse().unwrap();
            assert_eq!(f[2].parse::<f64>().unwrap(), [5.0, 1.0, 2.0][k]);
        }
        assert!(emit_trajectories(&m, &p, &s, 50, 0.05, &dir.path().join("missing/x.csv")).is_err());
    }

    #[test]
    fn fingerprint_depends_on_every_part() {
        let a = fingerprint(&[b"ab", b"c"]);
        assert_eq!(a.len(), 64);
        assert_ne!(a, fingerprint(&[b"a", b"bc"]));
        assert_eq!(a, fingerprint(&[b"ab", b"c"]));
    }
}
