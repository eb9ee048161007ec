//! Fixed-step classical Runge–Kutta integration of the augmented state
//! `[Z, Λ]`. All arithmetic is recorded on the tape, so gradients flow
//! through the solver (discretize-then-optimize).

use crate::error::{Error, Result};
use crate::model::LatentIntensity;
use crate::numcore::{Tape, Var};

/// Default solver step, `ode.max_step`.
pub const DEFAULT_MAX_STEP: f64 = 0.05;

/// Latent channel states plus the running compensator `Λ = ∫ λ(τ) dτ`.
#[derive(Debug, Clone, Copy)]
pub struct AugmentedState {
    pub z: Var,
    /// `1×1`.
    pub lambda: Var,
}

/// Right-hand side of the augmented system.
pub trait Dynamics {
    fn derivative(&self, tape: &mut Tape, t: f64, state: &AugmentedState) -> Result<AugmentedState>;
}

impl<F> Dynamics for F
where
    F: Fn(&mut Tape, f64, &AugmentedState) -> Result<AugmentedState>,
{
    fn derivative(&self, tape: &mut Tape, t: f64, state: &AugmentedState) -> Result<AugmentedState> {
        self(tape, t, state)
    }
}

/// `dZ/dt = f(Z, t)` row-wise and `dΛ/dt = Σ_k λ_k(t)`.
pub fn augmented_dynamics<M: LatentIntensity + ?Sized>(
    model: &M,
    tape: &mut Tape,
    t: f64,
    state: &AugmentedState,
) -> Result<AugmentedState> {
    let dz = model.drift(tape, t, state.z)?;
    let lam = model.intensities(tape, t, state.z)?;
    let total = tape.sum(lam);
    Ok(AugmentedState { z: dz, lambda: total })
}

/// Adapter turning a [`LatentIntensity`] model into [`Dynamics`].
pub struct ModelDynamics<'a, M: ?Sized>(pub &'a M);

impl<M: LatentIntensity + ?Sized> Dynamics for ModelDynamics<'_, M> {
    fn derivative(&self, tape: &mut Tape, t: f64, state: &AugmentedState) -> Result<AugmentedState> {
        augmented_dynamics(self.0, tape, t, state)
    }
}

/// Number of equal steps used on `[t0, t1]`.
pub fn step_count(t0: f64, t1: f64, max_step: f64) -> usize {
    let span = t1 - t0;
    if span <= 0.0 {
        return 0;
    }
    // shave off float noise so that e.g. 1.0/0.05 does not round up to 21
    let ratio = span / max_step;
    let n = (ratio * (1.0 - 1e-12)).ceil();
    (n as usize).max(1)
}

fn check_finite(tape: &Tape, s: &AugmentedState, step: usize) -> Result<()> {
    let ok = tape.value(s.z).iter().all(|v| v.is_finite()) && tape.item(s.lambda).is_finite();
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite { step })
    }
}

/// Integrates from `t0` to `t1` with `ceil((t1−t0)/max_step)` equal RK4 steps.
/// A zero-length interval returns `state0` unchanged.
pub fn integrate<D: Dynamics + ?Sized>(
    tape: &mut Tape,
    dynamics: &D,
    state0: AugmentedState,
    t0: f64,
    t1: f64,
    max_step: f64,
) -> Result<AugmentedState> {
    if !(max_step > 0.0 && max_step.is_finite()) {
        return Err(Error::InvalidStep(max_step));
    }
    if t1 < t0 {
        return Err(Error::ReversedInterval { t0, t1 });
    }
    let n = step_count(t0, t1, max_step);
    let h = (t1 - t0) / n.max(1) as f64;
    let mut s = state0;
    for i in 0..n {
        let t = t0 + i as f64 * h;
        s = rk4_step(tape, dynamics, &s, t, h)?;
        check_finite(tape, &s, i)?;
    }
    Ok(s)
}

fn rk4_step<D: Dynamics + ?Sized>(
    tape: &mut Tape,
    dynamics: &D,
    s: &AugmentedState,
    t: f64,
    h: f64,
) -> Result<AugmentedState> {
    let k1 = dynamics.derivative(tape, t, s)?;
    let z2 = tape.lin_comb(&[(s.z, 1.0), (k1.z, 0.5 * h)])?;
    let s2 = AugmentedState { z: z2, lambda: s.lambda };
    let k2 = dynamics.derivative(tape, t + 0.5 * h, &s2)?;
    let z3 = tape.lin_comb(&[(s.z, 1.0), (k2.z, 0.5 * h)])?;
    let s3 = AugmentedState { z: z3, lambda: s.lambda };
    let k3 = dynamics.derivative(tape, t + 0.5 * h, &s3)?;
    let z4 = tape.lin_comb(&[(s.z, 1.0), (k3.z, h)])?;
    let s4 = AugmentedState { z: z4, lambda: s.lambda };
    let k4 = dynamics.derivative(tape, t + h, &s4)?;
    let w = h / 6.0;
    let z = tape.lin_comb(&[(s.z, 1.0), (k1.z, w), (k2.z, 2.0 * w), (k3.z, 2.0 * w), (k4.z, w)])?;
    let lambda = tape.lin_comb(&[
        (s.lambda, 1.0),
        (k1.lambda, w),
        (k2.lambda, 2.0 * w),
        (k3.lambda, 2.0 * w),
        (k4.lambda, w),
    ])?;
    Ok(AugmentedState { z, lambda })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, Tensor};

    fn decay(tape: &mut Tape, _t: f64, s: &AugmentedState) -> Result<AugmentedState> {
        let dz = tape.scale(s.z, -1.0);
        let dl = tape.scalar(0.0);
        Ok(AugmentedState { z: dz, lambda: dl })
    }

    fn state(tape: &mut Tape, z: f64) -> AugmentedState {
        let z = tape.constant(Tensor::scalar(z));
        let lambda = tape.scalar(0.0);
        AugmentedState { z, lambda }
    }

    fn decay_error(max_step: f64) -> f64 {
        let mut tape = Tape::new();
        let s0 = state(&mut tape, 1.0);
        let s = integrate(&mut tape, &decay, s0, 0.0, 1.0, max_step).unwrap();
        (tape.item(s.z) - (-1f64).exp()).abs()
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        assert!(decay_error(0.01) < 1e-8);
    }

    #[test]
    fn fourth_order_convergence() {
        let ratio = decay_error(0.2) / decay_error(0.1);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_dynamics_leave_state_unchanged() {
        let zero = |tape: &mut Tape, _t: f64, s: &AugmentedState| -> Result<AugmentedState> {
            let dz = tape.scale(s.z, 0.0);
            let dl = tape.scalar(0.0);
            Ok(AugmentedState { z: dz, lambda: dl })
        };
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::row(vec![0.3, -1.2, 4.0]));
        let lambda = tape.scalar(2.5);
        let s = integrate(&mut tape, &zero, AugmentedState { z, lambda }, 1.0, 17.3, 0.05).unwrap();
        assert_eq!(tape.value(s.z), &[0.3, -1.2, 4.0]);
        assert_eq!(tape.item(s.lambda), 2.5);
    }

    #[test]
    fn constant_rate_compensator_is_exact() {
        let rate = |tape: &mut Tape, _t: f64, s: &AugmentedState| -> Result<AugmentedState> {
            let dz = tape.scale(s.z, 0.0);
            let dl = tape.scalar(8.0);
            Ok(AugmentedState { z: dz, lambda: dl })
        };
        let mut tape = Tape::new();
        let s0 = state(&mut tape, 0.0);
        let s = integrate(&mut tape, &rate, s0, 0.0, 10.0, 0.05).unwrap();
        assert!((tape.item(s.lambda) - 80.0).abs() < 1e-10);
    }

    #[test]
    fn zero_length_interval_is_identity() {
        let mut tape = Tape::new();
        let s0 = state(&mut tape, 0.7);
        let before = tape.len();
        let s = integrate(&mut tape, &decay, s0, 2.0, 2.0, 0.05).unwrap();
        assert_eq!(s.z, s0.z);
        assert_eq!(tape.len(), before);
    }

    #[test]
    fn reversed_interval_and_bad_step_are_errors() {
        let mut tape = Tape::new();
        let s0 = state(&mut tape, 1.0);
        assert!(matches!(
            integrate(&mut tape, &decay, s0, 1.0, 0.5, 0.1),
            Err(Error::ReversedInterval { .. })
        ));
        assert!(matches!(
            integrate(&mut tape, &decay, s0, 0.0, 1.0, 0.0),
            Err(Error::InvalidStep(_))
        ));
    }

    #[test]
    fn blow_up_reports_step_index() {
        let explode = |tape: &mut Tape, _t: f64, s: &AugmentedState| -> Result<AugmentedState> {
            let sq = tape.mul(s.z, s.z)?;
            let dz = tape.scale(sq, 1e3);
            let dl = tape.scalar(0.0);
            Ok(AugmentedState { z: dz, lambda: dl })
        };
        let mut tape = Tape::new();
        let s0 = state(&mut tape, 10.0);
        match integrate(&mut tape, &explode, s0, 0.0, 10.0, 0.1) {
            Err(Error::NonFinite { step }) => assert!(step < 100),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn step_count_lands_on_interval_end() {
        assert_eq!(step_count(0.0, 1.0, 0.05), 20);
        assert_eq!(step_count(0.0, 1.01, 0.05), 21);
        assert_eq!(step_count(0.3, 0.3, 0.05), 0);
        assert_eq!(step_count(0.0, 1e-9, 0.05), 1);
    }

    #[test]
    fn gradient_through_ten_steps_of_linear_ode() {
        // dz/dt = a ⊙ z + b, parameters packed as [a; b] in one 2×2 tensor
        let z0 = Tensor::row(vec![1.0, -0.5]);
        let err = grad_check(
            |tape, p| {
                let a = tape.slice_rows(p, 0, 1)?;
                let b = tape.slice_rows(p, 1, 1)?;
                let dynamics = move |tape: &mut Tape, _t: f64, s: &AugmentedState| -> Result<AugmentedState> {
                    let az = tape.mul(s.z, a)?;
                    let dz = tape.add(az, b)?;
                    let dl = tape.sum(dz);
                    Ok(AugmentedState { z: dz, lambda: dl })
                };
                let z = tape.constant(z0.clone());
                let lambda = tape.scalar(0.0);
                let s = integrate(tape, &dynamics, AugmentedState { z, lambda }, 0.0, 1.0, 0.1)
                    .map_err(|e| match e {
                        Error::Num(n) => n,
                        other => panic!("{other}"),
                    })?;
                let zs = tape.sum(s.z);
                let zz = tape.mul(zs, zs)?;
                tape.add(zz, s.lambda)
            },
            &Tensor::new(2, 2, vec![-0.7, 0.4, 0.3, 0.9]).unwrap(),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
