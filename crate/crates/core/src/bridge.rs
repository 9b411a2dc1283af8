//! Deterministic GOU bridge between a start point and an end point.
//!
//! The bridge moves a scalar from `z_start` to `z_end` along
//! `z_t = xi(t) * z_start + (1 - xi(t)) * z_end`, with `xi(0) = 1` and
//! `xi(1) = 0`. Its velocity is `c(t) * (z_end - z_start)` where
//! `c(t) = -xi'(t)`. Everything here is derived from the closed-form
//! antiderivative of the drift-rate schedule, so no quadrature is involved.
//!
//! Two discretizations are provided:
//!
//! * the plain Euler sum `sum c(t_i) * dt_i`, which misses the endpoint for
//!   any finite step count (see [`BridgeParams::euler_endpoint_error`]);
//! * the integral-consistent weights `xi(t_i) - xi(t_{i+1})`, which telescope
//!   to exactly one on every partition.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_unit, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [Self::Constant, Self::Linear, Self::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            Self::Constant => "constant",
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

fn default_theta_min() -> f64 {
    0.1
}

fn default_theta_max() -> f64 {
    5.0
}

fn default_theta_const() -> f64 {
    1.0
}

/// Drift-rate schedule `theta_t` on bridge time `t in [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaSchedule {
    pub kind: ScheduleKind,
    #[serde(default = "default_theta_min")]
    pub theta_min: f64,
    #[serde(default = "default_theta_max")]
    pub theta_max: f64,
    #[serde(default = "default_theta_const")]
    pub theta_const: f64,
}

/// `theta_t = 1`, the schedule used for training.
impl Default for ThetaSchedule {
    fn default() -> Self {
        Self::constant(default_theta_const())
    }
}

impl ThetaSchedule {
    pub fn constant(theta: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            theta_min: default_theta_min(),
            theta_max: default_theta_max(),
            theta_const: theta,
        }
    }

    pub fn linear(theta_min: f64, theta_max: f64) -> Self {
        Self {
            kind: ScheduleKind::Linear,
            theta_min,
            theta_max,
            theta_const: default_theta_const(),
        }
    }

    pub fn cosine(theta_min: f64, theta_max: f64) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            theta_min,
            theta_max,
            theta_const: default_theta_const(),
        }
    }

    /// The three schedules used for the endpoint-bias table
    /// (`theta = 1`, and `0.1 -> 5.0` for the time-varying ones).
    pub fn reference(kind: ScheduleKind) -> Self {
        match kind {
            ScheduleKind::Constant => Self::constant(1.0),
            ScheduleKind::Linear => Self::linear(0.1, 5.0),
            ScheduleKind::Cosine => Self::cosine(0.1, 5.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.theta_min.is_finite()
            && self.theta_max.is_finite()
            && self.theta_const.is_finite();
        if !finite {
            return Err(Error::Config("schedule rates must be finite".into()));
        }
        if self.theta_min <= 0.0 || self.theta_const <= 0.0 {
            return Err(Error::Config(format!(
                "schedule rates must be positive (theta_min = {}, theta_const = {})",
                self.theta_min, self.theta_const
            )));
        }
        if self.theta_max < self.theta_min {
            return Err(Error::Config(format!(
                "theta_max = {} is below theta_min = {}",
                self.theta_max, self.theta_min
            )));
        }
        Ok(())
    }

    /// `theta_t`.
    pub fn theta_at(&self, t: f64) -> Result<f64> {
        check_unit("t", t)?;
        Ok(self.rate(t))
    }

    /// `int_s^t theta_z dz`, in closed form.
    pub fn theta_bar(&self, s: f64, t: f64) -> Result<f64> {
        check_unit("s", s)?;
        check_unit("t", t)?;
        if s > t {
            return Err(Error::Interval { lo: s, hi: t });
        }
        Ok(self.integral(s, t))
    }

    #[inline]
    fn rate(&self, t: f64) -> f64 {
        let span = self.theta_max - self.theta_min;
        match self.kind {
            ScheduleKind::Constant => self.theta_const,
            ScheduleKind::Linear => self.theta_min + span * t,
            ScheduleKind::Cosine => self.theta_min + 0.5 * span * (1.0 - (PI * t).cos()),
        }
    }

    #[inline]
    fn integral(&self, s: f64, t: f64) -> f64 {
        let span = self.theta_max - self.theta_min;
        let dt = t - s;
        match self.kind {
            ScheduleKind::Constant => self.theta_const * dt,
            ScheduleKind::Linear => self.theta_min * dt + 0.5 * span * (t * t - s * s),
            ScheduleKind::Cosine => {
                self.theta_min * dt
                    + 0.5 * span * (dt - ((PI * t).sin() - (PI * s).sin()) / PI)
            }
        }
    }
}

fn default_lambda2() -> f64 {
    1.0
}

/// Schedule plus the steady variance level `lambda^2`.
///
/// `xi` and `c` do not depend on `lambda2`; only [`BridgeParams::sigma2_bar`]
/// does.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeParams {
    pub schedule: ThetaSchedule,
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
}

impl Default for BridgeParams {
    fn default() -> Self {
        Self::new(ThetaSchedule::default())
    }
}

impl BridgeParams {
    pub fn new(schedule: ThetaSchedule) -> Self {
        Self {
            schedule,
            lambda2: default_lambda2(),
        }
    }

    pub fn with_lambda2(mut self, lambda2: f64) -> Self {
        self.lambda2 = lambda2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.lambda2 > 0.0 && self.lambda2.is_finite()) {
            return Err(Error::Config(format!(
                "lambda2 must be positive, got {}",
                self.lambda2
            )));
        }
        Ok(())
    }

    /// Bridge variance `lambda^2 (1 - exp(-2 theta_bar(s, t)))`.
    pub fn sigma2_bar(&self, s: f64, t: f64) -> f64 {
        debug_assert!(0.0 <= s && s <= t && t <= 1.0);
        -self.lambda2 * (-2.0 * self.schedule.integral(s, t)).exp_m1()
    }

    /// Interpolation coefficient `xi(t)`.
    pub fn xi(&self, t: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&t));
        let sched = &self.schedule;
        let elapsed = sched.integral(0.0, t);
        let remaining = sched.integral(t, 1.0);
        let total = sched.integral(0.0, 1.0);
        // lambda^2 cancels between the two variances.
        (-elapsed).exp() * (-2.0 * remaining).exp_m1() / (-2.0 * total).exp_m1()
    }

    /// Velocity coefficient `c(t) = -xi'(t)`, written without the `0/0` at `t = 1`.
    pub fn velocity_coeff(&self, t: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&t));
        let sched = &self.schedule;
        let elapsed = sched.integral(0.0, t);
        let remaining = sched.integral(t, 1.0);
        let total = sched.integral(0.0, 1.0);
        sched.rate(t) * (-elapsed).exp() * (1.0 + (-2.0 * remaining).exp())
            / -(-2.0 * total).exp_m1()
    }

    /// Exact integral of `c` over `[t_lo, t_hi]`, i.e. `xi(t_lo) - xi(t_hi)`.
    pub fn ctilde(&self, t_lo: f64, t_hi: f64) -> Result<f64> {
        check_unit("t_lo", t_lo)?;
        check_unit("t_hi", t_hi)?;
        if t_lo >= t_hi {
            return Err(Error::Interval { lo: t_lo, hi: t_hi });
        }
        Ok(self.xi(t_lo) - self.xi(t_hi))
    }

    /// Integral-consistent step weights for every interval of `grid`.
    pub fn ctilde_weights(&self, grid: &TimeGrid) -> Vec<f64> {
        let xi: Vec<f64> = grid.points().iter().map(|&t| self.xi(t)).collect();
        xi.windows(2).map(|w| w[0] - w[1]).collect()
    }

    /// Point on the bridge at time `t`.
    pub fn interpolate(&self, z_start: f64, z_end: f64, t: f64) -> f64 {
        if t <= 0.0 {
            return z_start;
        }
        if t >= 1.0 {
            return z_end;
        }
        let xi = self.xi(t);
        xi * z_start + (1.0 - xi) * z_end
    }

    /// Relative endpoint miss (percent) of the Euler sum on a uniform `steps` grid.
    pub fn euler_endpoint_error(&self, steps: usize, rule: EvalRule) -> f64 {
        self.euler_endpoint_error_on(&TimeGrid::uniform(steps.max(1)), rule)
    }

    pub fn euler_endpoint_error_on(&self, grid: &TimeGrid, rule: EvalRule) -> f64 {
        let total: f64 = grid
            .intervals()
            .map(|(lo, hi)| {
                let at = match rule {
                    EvalRule::Left => lo,
                    EvalRule::Right => hi,
                };
                self.velocity_coeff(at) * (hi - lo)
            })
            .sum();
        (1.0 - total).abs() * 100.0
    }
}

/// Which end of each interval the Euler sum evaluates `c` at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalRule {
    Left,
    Right,
}

impl fmt::Display for EvalRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Left => "left",
            Self::Right => "right",
        })
    }
}

impl FromStr for EvalRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" => Ok(Self::Left),
            "right" => Ok(Self::Right),
            other => Err(Error::Config(format!("unknown eval rule `{other}`"))),
        }
    }
}

/// Step counts of the published endpoint-bias table.
pub const BIAS_TABLE_STEPS: [usize; 8] = [1, 2, 5, 10, 20, 50, 100, 1000];

/// Published relative endpoint errors (%) of right-endpoint Euler sums, rows
/// follow [`BIAS_TABLE_STEPS`], columns constant / linear / cosine.
pub const REFERENCE_BIAS_TABLE: [[f64; 3]; 8] = [
    [14.91, 21.44, 21.44],
    [9.48, 6.93, 18.75],
    [4.29, 5.41, 6.85],
    [2.23, 3.07, 3.42],
    [1.13, 1.62, 1.71],
    [0.46, 0.67, 0.68],
    [0.23, 0.34, 0.34],
    [0.02, 0.03, 0.03],
];

/// Tolerance matching the two printed decimals.
pub const BIAS_TABLE_TOLERANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BiasCell {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub error: f64,
    pub reference: f64,
}

impl BiasCell {
    pub fn deviation(&self) -> f64 {
        (self.error - self.reference).abs()
    }
}

/// Endpoint errors of every table cell for the reference schedules.
pub fn bias_table(rule: EvalRule) -> Vec<BiasCell> {
    let mut cells = Vec::with_capacity(24);
    for (row, &steps) in REFERENCE_BIAS_TABLE.iter().zip(&BIAS_TABLE_STEPS) {
        for (&reference, kind) in row.iter().zip(ScheduleKind::ALL) {
            let bridge = BridgeParams::new(ThetaSchedule::reference(kind));
            cells.push(BiasCell {
                steps,
                schedule: kind,
                error: bridge.euler_endpoint_error(steps, rule),
                reference,
            });
        }
    }
    cells
}

/// Partition `0 = t_0 < t_1 < ... < t_M = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(steps: usize) -> Self {
        assert!(steps >= 1, "a time grid needs at least one step");
        let mut points: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
        points[steps] = 1.0;
        Self { points }
    }

    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Config("a time grid needs at least two points".into()));
        }
        if points[0] != 0.0 || *points.last().unwrap() != 1.0 {
            return Err(Error::Config("a time grid must start at 0 and end at 1".into()));
        }
        if let Some(w) = points.windows(2).find(|w| !(w[0] < w[1])) {
            return Err(Error::Interval { lo: w[0], hi: w[1] });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    // Composite Simpson rule; independent of any closed form.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
        let n = panels + panels % 2;
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    fn all_params() -> Vec<BridgeParams> {
        ScheduleKind::ALL
            .iter()
            .map(|&k| BridgeParams::new(ThetaSchedule::reference(k)))
            .collect()
    }

    #[test]
    fn theta_at_examples() {
        let c = ThetaSchedule::constant(1.0);
        assert_eq!(c.theta_at(0.37).unwrap(), 1.0);
        let l = ThetaSchedule::linear(0.1, 5.0);
        assert_eq!(l.theta_at(0.0).unwrap(), 0.1);
        let cos = ThetaSchedule::cosine(0.1, 5.0);
        assert_abs_diff_eq!(cos.theta_at(0.5).unwrap(), 2.55, epsilon = 1e-12);
        assert!(matches!(l.theta_at(1.5), Err(Error::Domain { .. })));
        assert!(matches!(l.theta_at(-0.1), Err(Error::Domain { .. })));
    }

    #[test]
    fn theta_bar_matches_quadrature() {
        assert_abs_diff_eq!(
            ThetaSchedule::constant(1.0).theta_bar(0.0, 1.0).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = ThetaSchedule::reference(kind);
            let closed = s.theta_bar(0.0, 1.0).unwrap();
            assert_abs_diff_eq!(closed, 2.55, epsilon = 1e-12);
            let quad = simpson(|t| s.theta_at(t).unwrap(), 0.0, 1.0, 1_000_000);
            assert_abs_diff_eq!(closed, quad, epsilon = 1e-10);
            let quad = simpson(|t| s.theta_at(t).unwrap(), 0.2, 0.9, 1_000_000);
            assert_abs_diff_eq!(s.theta_bar(0.2, 0.9).unwrap(), quad, epsilon = 1e-10);
        }
        assert!(matches!(
            ThetaSchedule::default().theta_bar(0.6, 0.2),
            Err(Error::Interval { .. })
        ));
    }

    #[test]
    fn schedule_validation() {
        assert!(ThetaSchedule::linear(0.0, 1.0).validate().is_err());
        assert!(ThetaSchedule::linear(2.0, 1.0).validate().is_err());
        assert!(ThetaSchedule::constant(-1.0).validate().is_err());
        assert!(ThetaSchedule::cosine(0.1, 5.0).validate().is_ok());
        assert!(BridgeParams::default().with_lambda2(0.0).validate().is_err());
    }

    #[test]
    fn sigma2_bar_examples() {
        let p = BridgeParams::new(ThetaSchedule::constant(1.0));
        assert_eq!(p.sigma2_bar(0.4, 0.4), 0.0);
        let expected = 1.0 - (-2.0f64).exp();
        assert_abs_diff_eq!(p.sigma2_bar(0.0, 1.0), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.864_664_716_763_387_3, epsilon = 1e-15);
        let p2 = p.with_lambda2(2.0);
        assert_abs_diff_eq!(p2.sigma2_bar(0.0, 1.0), 2.0 * expected, epsilon = 1e-15);
    }

    #[test]
    fn xi_examples_and_boundaries() {
        for p in all_params() {
            for l2 in [0.5, 1.0, 3.7] {
                let p = p.with_lambda2(l2);
                assert_eq!(p.xi(0.0), 1.0);
                assert_eq!(p.xi(1.0), 0.0);
            }
        }
        // e^{-0.5} (1 - e^{-1}) / (1 - e^{-2}), evaluated with the raw
        // variance ratio rather than the expm1 form.
        let p = BridgeParams::new(ThetaSchedule::constant(1.0));
        let raw = (-0.5f64).exp() * p.sigma2_bar(0.5, 1.0) / p.sigma2_bar(0.0, 1.0);
        assert_abs_diff_eq!(p.xi(0.5), raw, epsilon = 1e-15);
        assert_abs_diff_eq!(p.xi(0.5), 0.443_411, epsilon = 5e-6);
    }

    #[test]
    fn velocity_coeff_examples() {
        let fd_end = |p: &BridgeParams| {
            let h = 1e-6;
            -(p.xi(1.0) - p.xi(1.0 - h)) / h
        };
        let fd_start = |p: &BridgeParams| {
            let h = 1e-6;
            -(p.xi(h) - p.xi(0.0)) / h
        };
        let c = BridgeParams::new(ThetaSchedule::constant(1.0));
        assert_abs_diff_eq!(c.velocity_coeff(1.0), fd_end(&c), epsilon = 1e-5);
        assert_abs_diff_eq!(c.velocity_coeff(1.0), 0.850_918, epsilon = 1e-6);
        assert_abs_diff_eq!(c.velocity_coeff(0.0), fd_start(&c), epsilon = 1e-5);
        let closed = (1.0 + (-2.0f64).exp()) / (1.0 - (-2.0f64).exp());
        assert_abs_diff_eq!(c.velocity_coeff(0.0), closed, epsilon = 1e-14);
        assert_abs_diff_eq!(c.velocity_coeff(0.0), 1.313_035, epsilon = 1e-6);

        let l = BridgeParams::new(ThetaSchedule::linear(0.1, 5.0));
        assert_abs_diff_eq!(l.velocity_coeff(1.0), fd_end(&l), epsilon = 1e-5);
        assert_abs_diff_eq!(l.velocity_coeff(1.0), 0.7856, epsilon = 1e-4);
        // Matches the linear M = 1 cell of the bias table.
        assert_abs_diff_eq!(1.0 - l.velocity_coeff(1.0), 0.2144, epsilon = 1e-4);
    }

    #[test]
    fn lambda2_cancels() {
        for p in all_params() {
            let q = p.with_lambda2(7.3);
            for i in 0..=100 {
                let t = i as f64 / 100.0;
                assert_abs_diff_eq!(p.xi(t), q.xi(t), epsilon = 1e-12);
                assert_abs_diff_eq!(p.velocity_coeff(t), q.velocity_coeff(t), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn velocity_is_minus_xi_derivative() {
        let h = 1e-6;
        for p in all_params() {
            for i in 0..=1000 {
                let t = i as f64 / 1000.0;
                let fd = if i == 0 {
                    (p.xi(t + h) - p.xi(t)) / h
                } else if i == 1000 {
                    (p.xi(t) - p.xi(t - h)) / h
                } else {
                    (p.xi(t + h) - p.xi(t - h)) / (2.0 * h)
                };
                assert!(
                    (p.velocity_coeff(t) + fd).abs() <= 1e-5,
                    "{:?} t={t}: c={} fd={}",
                    p.schedule.kind,
                    p.velocity_coeff(t),
                    -fd
                );
            }
        }
    }

    #[test]
    fn velocity_integrates_to_one() {
        for p in all_params() {
            let quad = simpson(|t| p.velocity_coeff(t), 0.0, 1.0, 1_000_000);
            assert_abs_diff_eq!(quad, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn ctilde_examples() {
        let p = BridgeParams::new(ThetaSchedule::constant(1.0));
        assert_abs_diff_eq!(p.ctilde(0.0, 1.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.ctilde(0.0, 0.5).unwrap(), 1.0 - 0.443_411, epsilon = 5e-6);
        assert!(matches!(p.ctilde(0.5, 0.5), Err(Error::Interval { .. })));
        assert!(matches!(p.ctilde(0.7, 0.2), Err(Error::Interval { .. })));
        let w = p.ctilde_weights(&TimeGrid::uniform(5));
        assert_eq!(w.len(), 5);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn interpolate_examples() {
        let p = BridgeParams::default();
        assert_eq!(p.interpolate(0.3, 7.0, 0.0), 0.3);
        assert_eq!(p.interpolate(0.3, 7.0, 1.0), 7.0);
        let c = BridgeParams::new(ThetaSchedule::constant(1.0));
        assert_abs_diff_eq!(c.interpolate(0.0, 1.0, 0.5), 1.0 - 0.443_411, epsilon = 5e-6);
    }

    #[test]
    fn euler_error_examples() {
        let c = BridgeParams::new(ThetaSchedule::reference(ScheduleKind::Constant));
        let l = BridgeParams::new(ThetaSchedule::reference(ScheduleKind::Linear));
        assert_abs_diff_eq!(c.euler_endpoint_error(1, EvalRule::Right), 14.91, epsilon = 0.005);
        assert_abs_diff_eq!(l.euler_endpoint_error(2, EvalRule::Right), 6.93, epsilon = 0.005);
        // |1 - c(0)| from the closed form at t = 0.
        let left = (1.0 - c.velocity_coeff(0.0)).abs() * 100.0;
        assert_abs_diff_eq!(c.euler_endpoint_error(1, EvalRule::Left), left, epsilon = 1e-12);
        assert_abs_diff_eq!(left, 31.30, epsilon = 0.005);
    }

    #[test]
    fn right_endpoint_reproduces_published_table() {
        let cells = bias_table(EvalRule::Right);
        assert_eq!(cells.len(), 24);
        for cell in &cells {
            assert!(cell.deviation() <= BIAS_TABLE_TOLERANCE, "{cell:?}");
        }
        let left = bias_table(EvalRule::Left);
        assert!(left.iter().any(|c| c.deviation() > BIAS_TABLE_TOLERANCE));
    }

    #[test]
    fn time_grid_validation() {
        assert!(TimeGrid::new(vec![0.0, 0.5, 1.0]).is_ok());
        assert!(TimeGrid::new(vec![0.0]).is_err());
        assert!(TimeGrid::new(vec![0.1, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.6, 0.6, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.9]).is_err());
        let g = TimeGrid::uniform(3);
        assert_eq!(g.steps(), 3);
        assert_eq!(g.points()[3], 1.0);
    }

    #[test]
    fn schedule_json_shape() {
        let s: ThetaSchedule = serde_json::from_str(
            r#"{"kind": "cosine", "theta_min": 0.2, "theta_max": 4.0, "theta_const": 1.0}"#,
        )
        .unwrap();
        assert_eq!(s, ThetaSchedule::cosine(0.2, 4.0));
        let back: ThetaSchedule = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    fn random_grid() -> impl Strategy<Value = TimeGrid> {
        prop::collection::vec(0.001f64..0.999, 0..40).prop_map(|mut inner| {
            inner.sort_by(|a, b| a.partial_cmp(b).unwrap());
            inner.dedup();
            let mut points = vec![0.0];
            points.extend(inner);
            points.push(1.0);
            TimeGrid::new(points).unwrap()
        })
    }

    proptest! {
        #[test]
        fn ctilde_telescopes_on_any_partition(grid in random_grid(), k in 0usize..3) {
            let p = BridgeParams::new(ThetaSchedule::reference(ScheduleKind::ALL[k]));
            let w = p.ctilde_weights(&grid);
            prop_assert!(w.iter().all(|&c| c > 0.0));
            let total: f64 = w.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-15, "sum = {}", total);
        }

        #[test]
        fn xi_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, k in 0usize..3) {
            let p = BridgeParams::new(ThetaSchedule::reference(ScheduleKind::ALL[k]));
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(p.xi(lo) >= p.xi(hi));
        }
    }
}
