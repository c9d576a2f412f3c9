//! Flow-matching path algebra.
//!
//! Convention: `x_t = (1 − ρ(t))·x0 + ρ(t)·x1`, with `x0` the data latent and
//! `x1` standard-normal noise. The network predicts the path velocity
//! `u = ∂x_t/∂t = ρ′(t)·(x1 − x0)`, so sampling integrates from `t = T`
//! (pure noise) down to `t = 0`.
//!
//! Inversion recovers the data endpoint from a single velocity evaluation:
//! `x̂0 = x_t − (ρ(t)/ρ′(t))·û`. For the rectified path `ρ(t) = t/T` the
//! ratio is exactly `t`, which is the form used throughout training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this derivative the `ρ/ρ′` ratio is treated as undefined.
pub const MIN_SCHEDULE_DERIVATIVE: f64 = 1e-12;

/// Inference step count used unless a caller overrides it.
pub const DEFAULT_SAMPLING_STEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// `ρ(t) = t/T`.
    Rectified,
    /// `ρ(t) = (t/T)^exponent`, exponent > 0.
    Power { exponent: f64 },
}

/// Monotone time warp `ρ: [0, T] → [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub t_max: f64,
}

impl Schedule {
    pub fn rectified(t_max: f64) -> Self {
        Self {
            kind: ScheduleKind::Rectified,
            t_max,
        }
    }

    pub fn power(t_max: f64, exponent: f64) -> Result<Self> {
        if !(exponent > 0.0 && exponent.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "power schedule exponent must be positive, got {exponent}"
            )));
        }
        Ok(Self {
            kind: ScheduleKind::Power { exponent },
            t_max,
        })
    }

    pub fn is_rectified(&self) -> bool {
        matches!(self.kind, ScheduleKind::Rectified)
    }

    fn check_t(&self, t: f64) -> Result<()> {
        if !(0.0..=self.t_max).contains(&t) {
            return Err(Error::InvalidArgument(format!(
                "t={t} outside [0, {}]",
                self.t_max
            )));
        }
        Ok(())
    }

    pub fn rho(&self, t: f64) -> f64 {
        let s = t / self.t_max;
        match self.kind {
            ScheduleKind::Rectified => s,
            ScheduleKind::Power { exponent } => s.powf(exponent),
        }
    }

    /// dρ/dt in raw (un-normalized) time units.
    pub fn rho_prime(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Rectified => 1.0 / self.t_max,
            ScheduleKind::Power { exponent } => {
                exponent * (t / self.t_max).powf(exponent - 1.0) / self.t_max
            }
        }
    }

    /// The factor `c(t)` in `x̂0 = x_t − c(t)·û`.
    ///
    /// Exactly `t` for the rectified path, so the general and rectified
    /// inversions agree bitwise there.
    pub fn inversion_coefficient(&self, t: f64) -> Result<f64> {
        self.check_t(t)?;
        match self.kind {
            ScheduleKind::Rectified => Ok(t),
            ScheduleKind::Power { .. } => {
                let d = self.rho_prime(t);
                if !(d.abs() >= MIN_SCHEDULE_DERIVATIVE) {
                    return Err(Error::SingularSchedule { t, derivative: d });
                }
                Ok(self.rho(t) / d)
            }
        }
    }
}

/// A latent together with its position on the path.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub x_t: Tensor,
    pub t: f64,
    pub t_max: f64,
}

impl FlowState {
    pub fn new(x_t: Tensor, t: f64, t_max: f64) -> Result<Self> {
        if !(0.0..=t_max).contains(&t) {
            return Err(Error::InvalidArgument(format!("t={t} outside [0, {t_max}]")));
        }
        Ok(Self { x_t, t, t_max })
    }

    pub fn t_norm(&self) -> f64 {
        self.t / self.t_max
    }
}

/// Which sampled timesteps feed the tail loss, and how strongly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TailSelection {
    AllSampled,
    /// Only timesteps with `t/T ≤ tau`.
    Threshold { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailPolicy {
    pub selection: TailSelection,
    pub exponent: f64,
}

impl Default for TailPolicy {
    fn default() -> Self {
        Self {
            selection: TailSelection::AllSampled,
            exponent: 3.0,
        }
    }
}

impl TailPolicy {
    pub fn validate(&self) -> Result<()> {
        if let TailSelection::Threshold { tau } = self.selection {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::InvalidArgument(format!("tau={tau} outside (0, 1]")));
            }
        }
        if !(self.exponent >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight exponent {} must be nonnegative",
                self.exponent
            )));
        }
        Ok(())
    }

    pub fn selects(&self, t: f64, t_max: f64) -> bool {
        match self.selection {
            TailSelection::AllSampled => true,
            TailSelection::Threshold { tau } => t / t_max <= tau,
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn noise_interpolate(x0: &Tensor, x1: &Tensor, t: f64, schedule: &Schedule) -> Result<Tensor> {
    same_shape(x0, x1, "noise_interpolate")?;
    schedule.check_t(t)?;
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == schedule.t_max {
        return Ok(x1.clone());
    }
    let r = schedule.rho(t);
    Ok(x0.zip_map(x1, |a, b| (1.0 - r) * a + r * b))
}

pub fn velocity_target(x0: &Tensor, x1: &Tensor, t: f64, schedule: &Schedule) -> Result<Tensor> {
    same_shape(x0, x1, "velocity_target")?;
    schedule.check_t(t)?;
    let d = schedule.rho_prime(t);
    Ok(x0.zip_map(x1, |a, b| d * (b - a)))
}

/// `x̂0 = x_t − t·û` on the rectified path with horizon `t_max`.
pub fn invert_rf(x_t: &Tensor, t: f64, u_hat: &Tensor, t_max: f64) -> Result<Tensor> {
    same_shape(x_t, u_hat, "invert_rf")?;
    Schedule::rectified(t_max).check_t(t)?;
    Ok(x_t.zip_map(u_hat, |x, u| x - t * u))
}

/// `x̂0 = x_t − (ρ(t)/ρ′(t))·û` for any schedule.
pub fn invert_cfm(x_t: &Tensor, t: f64, u_hat: &Tensor, schedule: &Schedule) -> Result<Tensor> {
    same_shape(x_t, u_hat, "invert_cfm")?;
    let c = schedule.inversion_coefficient(t)?;
    Ok(x_t.zip_map(u_hat, |x, u| x - c * u))
}

/// `w(t) = (1 − t/T)^p`.
pub fn timestep_weight(t: f64, t_max: f64, exponent: f64) -> Result<f64> {
    if !(0.0..=t_max).contains(&t) {
        return Err(Error::InvalidArgument(format!("t={t} outside [0, {t_max}]")));
    }
    Ok((1.0 - t / t_max).powf(exponent))
}

/// Anything that can produce a velocity for a state on the path.
pub trait VelocityField {
    fn velocity(&mut self, x_t: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    fn velocity(&mut self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        self(x_t, t)
    }
}

/// Standard-normal noise for the given shape, a pure function of `seed`.
pub fn seeded_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Uniform-step Euler integration from `t = T` down to `t = 0`, starting at
/// seeded noise. Calls the field exactly `steps` times.
pub fn euler_sample(
    field: &mut impl VelocityField,
    shape: &[usize],
    steps: usize,
    seed: u64,
    t_max: f64,
) -> Result<Tensor> {
    euler_integrate(field, seeded_noise(shape, seed), steps, t_max)
}

/// Euler integration from a given state at `t = T` down to `t = 0`.
pub fn euler_integrate(
    field: &mut impl VelocityField,
    start: Tensor,
    steps: usize,
    t_max: f64,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::InvalidArgument("euler_sample needs steps >= 1".into()));
    }
    let mut x = start;
    for i in 0..steps {
        let t = t_max * (1.0 - i as f64 / steps as f64);
        let t_next = t_max * (1.0 - (i + 1) as f64 / steps as f64);
        let u = field.velocity(&x, t)?;
        same_shape(&x, &u, "velocity field output")?;
        let dt = t_next - t;
        x = x.zip_map(&u, |a, b| a + dt * b);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn interpolation_boundaries_and_analytic_point() {
        let sch = Schedule::rectified(1.0);
        let x0 = s(2.0);
        let x1 = s(-1.0);
        assert_eq!(noise_interpolate(&x0, &x1, 0.0, &sch).unwrap(), x0);
        assert_eq!(noise_interpolate(&x0, &x1, 1.0, &sch).unwrap(), x1);
        assert_eq!(noise_interpolate(&x0, &x1, 0.25, &sch).unwrap().data()[0], 1.25);
    }

    #[test]
    fn velocity_targets() {
        let rect = Schedule::rectified(1.0);
        let u = velocity_target(&Tensor::full(&[4], 2.0), &Tensor::full(&[4], -1.0), 0.3, &rect).unwrap();
        assert!(u.data().iter().all(|&v| v == -3.0));
        let sq = Schedule::power(1.0, 2.0).unwrap();
        assert_eq!(velocity_target(&s(1.0), &s(3.0), 0.5, &sq).unwrap().data()[0], 2.0);
        let same = velocity_target(&s(0.7), &s(0.7), 0.5, &sq).unwrap();
        assert_eq!(same.data()[0], 0.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let sch = Schedule::rectified(1.0);
        let err = noise_interpolate(&Tensor::zeros(&[2]), &Tensor::zeros(&[3]), 0.5, &sch);
        assert!(matches!(err, Err(Error::Shape(_))));
        assert!(invert_rf(&Tensor::zeros(&[2]), 0.5, &Tensor::zeros(&[3]), 1.0).is_err());
    }

    #[test]
    fn rectified_inversion_examples() {
        assert_eq!(invert_rf(&s(1.25), 0.25, &s(-3.0), 1.0).unwrap().data()[0], 2.0);
        let x = s(0.123);
        assert_eq!(invert_rf(&x, 0.0, &s(99.0), 1.0).unwrap(), x);
    }

    #[test]
    fn general_inversion_examples() {
        let sq = Schedule::power(1.0, 2.0).unwrap();
        assert_eq!(invert_cfm(&s(1.5), 0.5, &s(2.0), &sq).unwrap().data()[0], 1.0);
        let err = invert_cfm(&s(1.0), 0.0, &s(1.0), &sq);
        assert!(matches!(err, Err(Error::SingularSchedule { .. })));
    }

    #[test]
    fn cfm_reduces_to_rf_bitwise() {
        let x = Tensor::new(&[3], vec![0.1, -2.0, 3.3]);
        let u = Tensor::new(&[3], vec![1.7, 0.01, -4.0]);
        for t in [0.0, 0.13, 0.5, 0.999, 1.0] {
            let a = invert_rf(&x, t, &u, 1.0).unwrap();
            let b = invert_cfm(&x, t, &u, &Schedule::rectified(1.0)).unwrap();
            assert_eq!(a, b);
        }
        // Non-unit horizon too.
        let a = invert_rf(&x, 300.0, &u, 1000.0).unwrap();
        let b = invert_cfm(&x, 300.0, &u, &Schedule::rectified(1000.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn timestep_weight_law() {
        assert_eq!(timestep_weight(0.0, 1.0, 3.0).unwrap(), 1.0);
        assert_eq!(timestep_weight(1.0, 1.0, 3.0).unwrap(), 0.0);
        assert_eq!(timestep_weight(500.0, 1000.0, 3.0).unwrap(), 0.125);
        assert!(timestep_weight(1.5, 1.0, 3.0).is_err());
        assert!(timestep_weight(-0.1, 1.0, 3.0).is_err());
    }

    #[test]
    fn euler_counts_and_is_deterministic() {
        let mut calls = 0;
        let mut field = |x: &Tensor, _t: f64| {
            calls += 1;
            Ok(x.map(|v| 0.5 * v))
        };
        let a = euler_sample(&mut field, &[2, 3], DEFAULT_SAMPLING_STEPS, 7, 1.0).unwrap();
        assert_eq!(calls, 8);
        let mut field2 = |x: &Tensor, _t: f64| Ok(x.map(|v| 0.5 * v));
        let b = euler_sample(&mut field2, &[2, 3], 8, 7, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(euler_sample(&mut field2, &[1], 0, 7, 1.0).is_err());
    }

    #[test]
    fn euler_exact_on_constant_field() {
        let c = Tensor::new(&[3], vec![0.5, -1.0, 2.0]);
        for steps in [1, 3, 8, 17] {
            let start = seeded_noise(&[3], 3);
            let mut field = |_: &Tensor, _: f64| Ok(c.clone());
            let out = euler_integrate(&mut field, start.clone(), steps, 1.0).unwrap();
            let closed = start.zip_map(&c, |x, v| x - v);
            assert!(out.max_abs_diff(&closed) <= 1e-6, "steps={steps}");
        }
    }

    proptest! {
        #[test]
        fn inversion_recovers_data(
            t in 0.0f64..=1.0,
            seed in 0u64..10_000,
            exponent in 0.5f64..3.0,
        ) {
            let x0 = seeded_noise(&[16], seed);
            let x1 = seeded_noise(&[16], seed + 1);
            let rect = Schedule::rectified(1.0);
            let xt = noise_interpolate(&x0, &x1, t, &rect).unwrap();
            let u = velocity_target(&x0, &x1, t, &rect).unwrap();
            prop_assert!(invert_rf(&xt, t, &u, 1.0).unwrap().max_abs_diff(&x0) <= 1e-6);

            let pw = Schedule::power(1.0, exponent).unwrap();
            let t = t.max(1e-3);
            let xt = noise_interpolate(&x0, &x1, t, &pw).unwrap();
            let u = velocity_target(&x0, &x1, t, &pw).unwrap();
            prop_assert!(invert_cfm(&xt, t, &u, &pw).unwrap().max_abs_diff(&x0) <= 1e-6);
        }

        #[test]
        fn weight_is_monotone_in_unit_interval(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let wl = timestep_weight(lo, 1.0, 3.0).unwrap();
            let wh = timestep_weight(hi, 1.0, 3.0).unwrap();
            prop_assert!(wl >= wh);
            prop_assert!((0.0..=1.0).contains(&wl));
        }
    }
}
