//! Receding-horizon joint trajectory optimization.
//!
//! Each joint is a triple integrator driven by piecewise-linear jerk
//! (first-order hold). The optimizer attracts the trajectory to a waypoint for
//! the first `N_s` knots and to the goal afterwards, penalizes jerk and
//! sphere-sphere penetration, pins the head to the previous plan and ends at
//! rest.

mod collision;
pub mod qp;
mod solve;

pub use collision::{collision_cost, collision_terms, CollisionTerm, Sphere};
pub use solve::{solve, SolveOptions};

use nalgebra::{DMatrix, SMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::RobotModel;
use crate::servo::ServoReference;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("invalid plan problem: {0}")]
    InvalidProblem(String),
    #[error("QP subproblem infeasible even with tolerance sets relaxed")]
    Infeasible,
    #[error("time {t} s outside the trajectory span [0, {end}] s")]
    OutOfRange { t: f64, end: f64 },
    #[error("obstacles given but no robot model to check them against")]
    MissingRobot,
    #[error("QP solver failure: {0}")]
    Solver(String),
}

/// Joint positions, velocities and accelerations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub qdd: Vec<f64>,
}

impl PlanState {
    pub fn at_rest(q: Vec<f64>) -> Self {
        let n = q.len();
        Self { q, qd: vec![0.0; n], qdd: vec![0.0; n] }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.qd).chain(&self.qdd).all(|v| v.is_finite())
    }
}

/// Per-joint box around a joint-space target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceSet {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl ToleranceSet {
    pub fn uniform(center: Vec<f64>, half_width: f64) -> Self {
        let n = center.len();
        Self { center, half_width: vec![half_width; n] }
    }

    pub fn contains(&self, q: &[f64], slack: f64) -> bool {
        q.iter()
            .zip(self.center.iter().zip(&self.half_width))
            .all(|(v, (c, w))| (v - c).abs() <= w + slack)
    }
}

/// Symmetric per-joint limits used by the planner (positions are two-sided).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub v_max: Vec<f64>,
    pub a_max: Vec<f64>,
    pub j_max: Vec<f64>,
}

impl Bounds {
    /// Model limits with velocity, acceleration and jerk scaled by `scale`.
    pub fn from_model(model: &RobotModel, scale: f64) -> Self {
        let l: Vec<_> = model.limits().copied().collect();
        Self {
            q_min: l.iter().map(|l| l.q_min).collect(),
            q_max: l.iter().map(|l| l.q_max).collect(),
            v_max: l.iter().map(|l| l.v_max * scale).collect(),
            a_max: l.iter().map(|l| l.a_max * scale).collect(),
            j_max: l.iter().map(|l| l.j_max * scale).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Weights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self { w1: 500.0, w2: 500.0, w3: 1e5 }
    }
}

fn default_true() -> bool {
    true
}

fn default_r_safe() -> f64 {
    0.02
}

/// One receding-horizon problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanProblem {
    /// Fixed head state and jerk.
    pub x0: PlanState,
    pub u0: Vec<f64>,
    #[serde(default)]
    pub waypoint: Option<ToleranceSet>,
    pub goal: ToleranceSet,
    /// Whether the waypoint box at knot `N_s − 1` is a hard constraint.
    #[serde(default = "default_true")]
    pub enforce_waypoint: bool,
    /// Whether the goal box at the last knot is a hard constraint.
    #[serde(default = "default_true")]
    pub enforce_goal: bool,
    pub h: f64,
    pub n: usize,
    /// Waypoint knot count; ignored without a waypoint.
    #[serde(default)]
    pub n_s: usize,
    pub bounds: Bounds,
    #[serde(default)]
    pub weights: Weights,
    #[serde(default)]
    pub obstacles: Vec<Sphere>,
    #[serde(default = "default_r_safe")]
    pub r_safe: f64,
}

impl PlanProblem {
    pub fn dof(&self) -> usize {
        self.x0.dof()
    }

    /// Knots `k < split` are attracted to the waypoint, the rest to the goal.
    pub fn split(&self) -> usize {
        if self.waypoint.is_some() {
            self.n_s
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |msg: &str| Err(PlanError::InvalidProblem(msg.to_string()));
        let m = self.dof();
        if m == 0 {
            return bad("no joints");
        }
        let dims_ok = self.x0.qd.len() == m
            && self.x0.qdd.len() == m
            && self.u0.len() == m
            && self.goal.center.len() == m
            && self.goal.half_width.len() == m
            && [&self.bounds.q_min, &self.bounds.q_max, &self.bounds.v_max, &self.bounds.a_max, &self.bounds.j_max]
                .iter()
                .all(|v| v.len() == m)
            && self.waypoint.as_ref().is_none_or(|w| w.center.len() == m && w.half_width.len() == m);
        if !dims_ok {
            return bad("dimension mismatch");
        }
        if !self.x0.is_finite() || self.u0.iter().any(|v| !v.is_finite()) {
            return bad("non-finite head state");
        }
        if !(self.h > 0.0) {
            return bad("h must be positive");
        }
        if self.n < 2 {
            return bad("N must be at least 2");
        }
        if self.waypoint.is_some() && !(1..=self.n).contains(&self.n_s) {
            return bad("N_s must lie in [1, N]");
        }
        let w = &self.weights;
        if !(w.w1 > 0.0 && w.w2 > 0.0 && w.w3 > 0.0) {
            return bad("weights must be positive");
        }
        let sets = std::iter::once(&self.goal).chain(self.waypoint.as_ref());
        for s in sets {
            if s.half_width.iter().chain(&s.center).any(|v| !v.is_finite()) || s.half_width.iter().any(|v| *v <= 0.0) {
                return bad("tolerance half-widths must be positive and finite");
            }
        }
        let b = &self.bounds;
        for j in 0..m {
            if !(b.q_min[j] < b.q_max[j] && b.v_max[j] > 0.0 && b.a_max[j] > 0.0 && b.j_max[j] > 0.0) {
                return bad("bounds must be non-empty and positive");
            }
        }
        if self.obstacles.iter().any(|o| !(o.radius >= 0.0)) || !(self.r_safe >= 0.0) {
            return bad("obstacle radii and safety margin must be non-negative");
        }
        Ok(())
    }
}

/// One knot of a trajectory: state and jerk input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub x: PlanState,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: usize,
    pub wall_time: f64,
    pub converged: bool,
    pub cost: f64,
    /// Tolerance-set constraints were dropped to restore feasibility.
    pub relaxed: bool,
    pub dynamics_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub h: f64,
    /// Absolute time of knot 0 (bookkeeping for the caller).
    #[serde(default)]
    pub t0: f64,
    pub knots: Vec<Knot>,
    #[serde(default)]
    pub stats: SolveStats,
}

impl Trajectory {
    pub fn duration(&self) -> f64 {
        (self.knots.len().saturating_sub(1)) as f64 * self.h
    }

    pub fn end_time(&self) -> f64 {
        self.t0 + self.duration()
    }

    pub fn dof(&self) -> usize {
        self.knots.first().map_or(0, |k| k.x.dof())
    }

    /// Largest `‖x_{k+1} − Φx_k − Γ₁u_k − Γ₂u_{k+1}‖_∞` over all segments.
    pub fn dynamics_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for w in self.knots.windows(2) {
            for j in 0..self.dof() {
                let next = foh_step(self.h, scalar_state(&w[0].x, j), w[0].u[j], w[1].u[j]);
                let actual = scalar_state(&w[1].x, j);
                worst = worst.max((next - actual).amax());
            }
        }
        worst
    }

    /// Whether the last knot is exactly at rest with zero jerk.
    pub fn terminal_equilibrium(&self) -> bool {
        self.knots.last().is_some_and(|k| {
            k.x.qd.iter().chain(&k.x.qdd).chain(&k.u).all(|v| *v == 0.0)
        })
    }

    /// The plan viewed from knot `k` on: knots shifted, start time advanced.
    pub fn shifted(&self, k: usize) -> Trajectory {
        let k = k.min(self.knots.len().saturating_sub(1));
        Trajectory {
            h: self.h,
            t0: self.t0 + k as f64 * self.h,
            knots: self.knots[k..].to_vec(),
            stats: self.stats.clone(),
        }
    }
}

/// First-order-hold matrices of the triple integrator (`⊗ I_m` form, state
/// ordered `[q, q̇, q̈]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FohMatrices {
    pub phi: DMatrix<f64>,
    pub gamma1: DMatrix<f64>,
    pub gamma2: DMatrix<f64>,
}

pub(crate) type Scalar3 = SMatrix<f64, 3, 1>;

pub(crate) fn scalar_phi(h: f64) -> SMatrix<f64, 3, 3> {
    SMatrix::<f64, 3, 3>::new(1.0, h, 0.5 * h * h, 0.0, 1.0, h, 0.0, 0.0, 1.0)
}

pub(crate) fn scalar_gammas(h: f64) -> (Scalar3, Scalar3) {
    let h2 = h * h;
    (
        Scalar3::new(h2 * h / 8.0, h2 / 3.0, h / 2.0),
        Scalar3::new(h2 * h / 24.0, h2 / 6.0, h / 2.0),
    )
}

pub(crate) fn foh_step(h: f64, x: Scalar3, u0: f64, u1: f64) -> Scalar3 {
    let (g1, g2) = scalar_gammas(h);
    scalar_phi(h) * x + g1 * u0 + g2 * u1
}

fn scalar_state(x: &PlanState, j: usize) -> Scalar3 {
    Scalar3::new(x.q[j], x.qd[j], x.qdd[j])
}

pub fn foh_discretize(h: f64, m: usize) -> FohMatrices {
    let phi = scalar_phi(h);
    let (g1, g2) = scalar_gammas(h);
    let kron = |a: &DMatrix<f64>| a.kronecker(&DMatrix::<f64>::identity(m, m));
    let to_dyn = |s: &[f64], r: usize, c: usize| DMatrix::from_row_slice(r, c, s);
    let phi_rows: Vec<f64> = (0..3).flat_map(|r| (0..3).map(move |c| phi[(r, c)])).collect();
    FohMatrices {
        phi: kron(&to_dyn(&phi_rows, 3, 3)),
        gamma1: kron(&to_dyn(g1.as_slice(), 3, 1)),
        gamma2: kron(&to_dyn(g2.as_slice(), 3, 1)),
    }
}

/// Shortest rest-to-rest time over distance `d` under velocity and
/// acceleration limits (trapezoidal, or triangular when `v` is never reached).
pub fn min_travel_time(d: f64, v_max: f64, a_max: f64) -> f64 {
    let d = d.abs();
    if d >= v_max * v_max / a_max {
        d / v_max + v_max / a_max
    } else {
        2.0 * (d / a_max).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizon {
    pub n_s: usize,
    pub n: usize,
    pub waypoint_reachable: bool,
    pub goal_reachable: bool,
}

/// Knot counts covering the minimum time to the waypoint and on to the goal.
pub fn horizon_lengths(
    q0: &[f64],
    waypoint: Option<&[f64]>,
    goal: &[f64],
    bounds: &Bounds,
    h: f64,
    n_min: usize,
    n_max: usize,
) -> Horizon {
    let leg = |from: &[f64], to: &[f64]| {
        from.iter()
            .zip(to)
            .enumerate()
            .map(|(j, (a, b))| min_travel_time(b - a, bounds.v_max[j], bounds.a_max[j]))
            .fold(0.0, f64::max)
    };
    let knots = |t: f64| (t / h - 1e-9).ceil().max(0.0) as usize + 1;
    let n_min = n_min.max(2);
    match waypoint {
        Some(w) => {
            let t_w = leg(q0, w);
            let t_g = t_w + leg(w, goal);
            let (raw_s, raw_n) = (knots(t_w), knots(t_g));
            let waypoint_reachable = raw_s <= n_max;
            let goal_reachable = raw_n <= n_max;
            let n = raw_n.clamp(n_min, n_max);
            let n_s = if waypoint_reachable { raw_s.clamp(2, n) } else { n };
            Horizon { n_s, n, waypoint_reachable, goal_reachable }
        }
        None => {
            let raw_n = knots(leg(q0, goal));
            let n = raw_n.clamp(n_min, n_max);
            Horizon { n_s: 0, n, waypoint_reachable: false, goal_reachable: raw_n <= n_max }
        }
    }
}

/// Closed-form reference inside the trajectory at time `t` after knot 0.
pub fn sample_reference(traj: &Trajectory, t: f64) -> Result<ServoReference, PlanError> {
    let end = traj.duration();
    let slack = 1e-9 * (1.0 + end);
    if !(t >= -slack && t <= end + slack) || traj.knots.is_empty() {
        return Err(PlanError::OutOfRange { t, end });
    }
    let m = traj.dof();
    if traj.knots.len() == 1 {
        let x = &traj.knots[0].x;
        return Ok(ServoReference {
            q: x.q.clone().into(),
            qd: x.qd.clone().into(),
            qdd: x.qdd.clone().into(),
        });
    }
    let t = t.clamp(0.0, end);
    let k = ((t / traj.h).floor() as usize).min(traj.knots.len() - 2);
    let tau = t - k as f64 * traj.h;
    let (a, b) = (&traj.knots[k], &traj.knots[k + 1]);
    let (t2, t3, t4) = (tau * tau, tau * tau * tau, tau * tau * tau * tau);
    let mut q = nalgebra::DVector::zeros(m);
    let mut qd = nalgebra::DVector::zeros(m);
    let mut qdd = nalgebra::DVector::zeros(m);
    for j in 0..m {
        let slope = (b.u[j] - a.u[j]) / traj.h;
        let x = &a.x;
        q[j] = x.q[j] + x.qd[j] * tau + x.qdd[j] * t2 / 2.0 + a.u[j] * t3 / 6.0 + slope * t4 / 24.0;
        qd[j] = x.qd[j] + x.qdd[j] * tau + a.u[j] * t2 / 2.0 + slope * t3 / 6.0;
        qdd[j] = x.qdd[j] + a.u[j] * tau + slope * t2 / 2.0;
    }
    Ok(ServoReference { q, qd, qdd })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn foh_gamma_values_at_half_second() {
        let f = foh_discretize(0.5, 1);
        let g1 = [0.015625, 0.0833333, 0.25];
        let g2 = [0.00520833, 0.0416667, 0.25];
        for i in 0..3 {
            assert!((f.gamma1[(i, 0)] - g1[i]).abs() < 5e-7);
            assert!((f.gamma2[(i, 0)] - g2[i]).abs() < 5e-7);
        }
    }

    #[test]
    fn foh_phi_pattern_and_kronecker_layout() {
        let f = foh_discretize(0.1, 2);
        let expected = [[1.0, 0.1, 0.005], [0.0, 1.0, 0.1], [0.0, 0.0, 1.0]];
        for r in 0..3 {
            for c in 0..3 {
                for j in 0..2 {
                    assert!((f.phi[(2 * r + j, 2 * c + j)] - expected[r][c]).abs() < 1e-15);
                }
                assert_eq!(f.phi[(2 * r, 2 * c + 1)], 0.0);
            }
        }
        assert_eq!(f.gamma1.shape(), (6, 2));
        assert_eq!(f.gamma1[(1, 0)], 0.0);
    }

    #[test]
    fn foh_step_matches_closed_form_integration() {
        // Jerk u(τ) = u0 + (u1 − u0) τ/h integrated by hand three times.
        let (h, u0, u1): (f64, f64, f64) = (0.3, 2.0, -5.0);
        let (q, v, a) = (0.4, -0.7, 1.1);
        let s = (u1 - u0) / h;
        let exact = Scalar3::new(
            q + v * h + a * h * h / 2.0 + u0 * h.powi(3) / 6.0 + s * h.powi(4) / 24.0,
            v + a * h + u0 * h * h / 2.0 + s * h.powi(3) / 6.0,
            a + u0 * h + s * h * h / 2.0,
        );
        let got = foh_step(h, Scalar3::new(q, v, a), u0, u1);
        assert!((got - exact).amax() < 1e-15);
    }

    #[test]
    fn travel_time_profiles() {
        assert!((min_travel_time(1.0, 1.0, 4.0) - 1.25).abs() < 1e-15);
        // Triangular: 0.1 rad never reaches v = 1 with a = 4.
        assert!((min_travel_time(0.1, 1.0, 4.0) - 2.0 * (0.1f64 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(min_travel_time(0.0, 1.0, 4.0), 0.0);
    }

    fn bounds1(v: f64, a: f64) -> Bounds {
        Bounds { q_min: vec![-3.0], q_max: vec![3.0], v_max: vec![v], a_max: vec![a], j_max: vec![100.0] }
    }

    #[test]
    fn horizon_examples() {
        let b = bounds1(1.0, 4.0);
        let hz = horizon_lengths(&[0.0], None, &[1.0], &b, 0.1, 2, 50);
        assert_eq!(hz.n, 14);
        let hz = horizon_lengths(&[0.5], None, &[0.5], &b, 0.1, 2, 50);
        assert_eq!(hz.n, 2);
        assert!(hz.goal_reachable);

        let hz = horizon_lengths(&[0.0], Some(&[0.5]), &[1.0], &b, 0.1, 2, 50);
        assert!(hz.waypoint_reachable);
        assert!(hz.n_s >= 2 && hz.n_s < hz.n);

        // Waypoint 8 rad away at 1 rad/s cannot fit in 50 knots of 0.1 s.
        let far = bounds1(1.0, 4.0);
        let hz = horizon_lengths(&[-2.9], Some(&[2.9]), &[2.9], &far, 0.1, 2, 50);
        assert!(!hz.waypoint_reachable);
        assert_eq!(hz.n_s, hz.n);
        assert_eq!(hz.n, 50);
    }

    fn two_knot_line() -> Trajectory {
        let x0 = PlanState { q: vec![0.1], qd: vec![0.2], qdd: vec![-0.3] };
        let (u0, u1) = (1.5, -0.5);
        let next = foh_step(0.1, Scalar3::new(0.1, 0.2, -0.3), u0, u1);
        let x1 = PlanState { q: vec![next[0]], qd: vec![next[1]], qdd: vec![next[2]] };
        Trajectory {
            h: 0.1,
            t0: 0.0,
            knots: vec![Knot { x: x0, u: vec![u0] }, Knot { x: x1, u: vec![u1] }],
            stats: SolveStats::default(),
        }
    }

    #[test]
    fn sampling_hits_knots_and_is_differentiable() {
        let tr = two_knot_line();
        assert!(tr.dynamics_residual() < 1e-15);
        let r0 = sample_reference(&tr, 0.0).unwrap();
        assert_eq!(r0.q[0], 0.1);
        let r1 = sample_reference(&tr, 0.1).unwrap();
        assert!((r1.q[0] - tr.knots[1].x.q[0]).abs() < 1e-15);
        assert!((r1.qd[0] - tr.knots[1].x.qd[0]).abs() < 1e-15);
        assert!((r1.qdd[0] - tr.knots[1].x.qdd[0]).abs() < 1e-15);

        let (t, d) = (0.037, 1e-5);
        let plus = sample_reference(&tr, t + d).unwrap();
        let minus = sample_reference(&tr, t - d).unwrap();
        let mid = sample_reference(&tr, t).unwrap();
        assert!(((plus.q[0] - minus.q[0]) / (2.0 * d) - mid.qd[0]).abs() < 1e-9);
        assert!(((plus.qd[0] - minus.qd[0]) / (2.0 * d) - mid.qdd[0]).abs() < 1e-9);
    }

    #[test]
    fn sampling_out_of_range() {
        let tr = two_knot_line();
        assert!(matches!(sample_reference(&tr, 0.2), Err(PlanError::OutOfRange { .. })));
        assert!(matches!(sample_reference(&tr, -0.01), Err(PlanError::OutOfRange { .. })));
    }

    #[test]
    fn shifted_view_keeps_absolute_timing() {
        let mut tr = two_knot_line();
        tr.t0 = 2.0;
        let s = tr.shifted(1);
        assert_eq!(s.knots.len(), 1);
        assert!((s.t0 - 2.1).abs() < 1e-15);
        assert_eq!(s.knots[0], tr.knots[1]);
    }
}
