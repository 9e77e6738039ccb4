//! Condensed sequential quadratic programming over the jerk inputs.
//!
//! The head input `u_0` is fixed and the terminal input is zero, so the free
//! variables of joint `j` are `z_j = (u_1, …, u_{N−2})` and every state is
//! affine in them: `x_k = c_k + S_k z_j`, with `S_k` shared by all joints.
//! Without collision terms the problem separates into one small QP per joint.
//! Collision hinges are linearized (Gauss–Newton); their Hessian is kept on
//! the joint-diagonal blocks, which preserves the per-joint split while the
//! gradient stays exact, and a Levenberg–Marquardt trust region with
//! actual/predicted reduction tests guarantees monotone accepted iterates.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::collision::{collision_terms, CollisionTerm};
use super::qp::{solve_qp, QpError, QpProblem};
use super::{foh_step, scalar_gammas, scalar_phi, Knot, PlanError, PlanProblem, PlanState, Scalar3, SolveStats, Trajectory};
use crate::arm::RobotModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub max_iterations: usize,
    pub stationarity_tol: f64,
    /// Wall-clock budget in seconds; `None` disables it (deterministic runs).
    pub time_budget: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { max_iterations: 20, stationarity_tol: 1e-6, time_budget: Some(0.1) }
    }
}

/// Sensitivities of `q`, `q̇`, `q̈` at every knot to the free inputs.
struct Condensed {
    n: usize,
    nz: usize,
    sq: DMatrix<f64>,
    sv: DMatrix<f64>,
    sa: DMatrix<f64>,
}

impl Condensed {
    fn new(h: f64, n: usize) -> Self {
        let nz = n - 2;
        let phi = scalar_phi(h);
        let (g1, g2) = scalar_gammas(h);
        let mut sq = DMatrix::zeros(n, nz);
        let mut sv = DMatrix::zeros(n, nz);
        let mut sa = DMatrix::zeros(n, nz);
        for k in 0..n - 1 {
            for c in 0..nz {
                let x = Scalar3::new(sq[(k, c)], sv[(k, c)], sa[(k, c)]);
                // Input k is free variable k − 1 when 1 ≤ k ≤ N − 2.
                let uk = if k >= 1 && k - 1 == c { 1.0 } else { 0.0 };
                let uk1 = if k + 1 <= nz && k == c { 1.0 } else { 0.0 };
                let next = phi * x + g1 * uk + g2 * uk1;
                sq[(k + 1, c)] = next[0];
                sv[(k + 1, c)] = next[1];
                sa[(k + 1, c)] = next[2];
            }
        }
        Self { n, nz, sq, sv, sa }
    }
}

/// Free response of one joint: head state and input, all later inputs zero.
fn free_response(h: f64, n: usize, x0: Scalar3, u0: f64) -> Vec<Scalar3> {
    let mut out = Vec::with_capacity(n);
    out.push(x0);
    for k in 0..n - 1 {
        let u = if k == 0 { u0 } else { 0.0 };
        out.push(foh_step(h, out[k], u, 0.0));
    }
    out
}

/// Per-joint constraint data in the QP's variable space.
struct JointConstraints {
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
    a_in: DMatrix<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
}

struct Setup<'a> {
    p: &'a PlanProblem,
    cond: Condensed,
    /// Free response per joint.
    free: Vec<Vec<Scalar3>>,
    x0: PlanState,
    u0: Vec<f64>,
    /// Attraction weight and target per knot and joint.
    weight: Vec<f64>,
    target: Vec<Vec<f64>>,
    base_h: DMatrix<f64>,
}

impl<'a> Setup<'a> {
    fn new(p: &'a PlanProblem, x0: PlanState, u0: Vec<f64>) -> Self {
        let (n, m) = (p.n, p.dof());
        let cond = Condensed::new(p.h, n);
        let free = (0..m)
            .map(|j| free_response(p.h, n, Scalar3::new(x0.q[j], x0.qd[j], x0.qdd[j]), u0[j]))
            .collect();
        let split = p.split();
        let weight: Vec<f64> = (0..n).map(|k| if k < split { p.weights.w1 } else { p.weights.w2 }).collect();
        let target = (0..n)
            .map(|k| match (&p.waypoint, k < split) {
                (Some(w), true) => w.center.clone(),
                _ => p.goal.center.clone(),
            })
            .collect();
        let nz = cond.nz;
        let mut base_h = DMatrix::identity(nz, nz) * 2.0;
        for k in 1..n {
            let row = cond.sq.row(k);
            base_h += row.transpose() * row * (2.0 * weight[k]);
        }
        Self { p, cond, free, x0, u0, weight, target, base_h }
    }

    fn constraints(&self, j: usize, with_sets: bool) -> JointConstraints {
        let (n, nz) = (self.cond.n, self.cond.nz);
        let p = self.p;
        let b = &p.bounds;
        let c = &self.free[j];
        let mut a_eq = DMatrix::zeros(2, nz);
        a_eq.row_mut(0).copy_from(&self.cond.sv.row(n - 1));
        a_eq.row_mut(1).copy_from(&self.cond.sa.row(n - 1));
        let b_eq = DVector::from_vec(vec![-c[n - 1][1], -c[n - 1][2]]);

        let mut rows: Vec<(nalgebra::RowDVector<f64>, f64, f64)> = Vec::new();
        for k in 1..n {
            let (mut lo, mut hi) = (b.q_min[j], b.q_max[j]);
            if with_sets {
                let mut clip = |set: &super::ToleranceSet| {
                    lo = lo.max(set.center[j] - set.half_width[j]);
                    hi = hi.min(set.center[j] + set.half_width[j]);
                };
                if let (Some(w), true) = (&p.waypoint, p.enforce_waypoint) {
                    if p.n_s >= 2 && k == p.n_s - 1 {
                        clip(w);
                    }
                }
                if p.enforce_goal && k == n - 1 {
                    clip(&p.goal);
                }
            }
            rows.push((self.cond.sq.row(k).into_owned(), lo - c[k][0], hi - c[k][0]));
            if k < n - 1 {
                let (v, a) = (b.v_max[j], b.a_max[j]);
                rows.push((self.cond.sv.row(k).into_owned(), -v - c[k][1], v - c[k][1]));
                rows.push((self.cond.sa.row(k).into_owned(), -a - c[k][2], a - c[k][2]));
            }
        }
        let mut a_in = DMatrix::zeros(rows.len() + nz, nz);
        let mut lo = DVector::zeros(rows.len() + nz);
        let mut hi = DVector::zeros(rows.len() + nz);
        for (i, (row, l, h)) in rows.iter().enumerate() {
            a_in.row_mut(i).copy_from(row);
            lo[i] = *l;
            hi[i] = *h;
        }
        for i in 0..nz {
            let r = rows.len() + i;
            a_in[(r, i)] = 1.0;
            lo[r] = -b.j_max[j];
            hi[r] = b.j_max[j];
        }
        JointConstraints { a_eq, b_eq, a_in, lo, hi }
    }

    /// Joint positions at every knot for the given inputs.
    fn positions(&self, z: &[DVector<f64>]) -> Vec<Vec<f64>> {
        let m = self.p.dof();
        let qj: Vec<DVector<f64>> = (0..m)
            .map(|j| {
                let base = DVector::from_iterator(self.cond.n, self.free[j].iter().map(|x| x[0]));
                base + &self.cond.sq * &z[j]
            })
            .collect();
        (0..self.cond.n).map(|k| (0..m).map(|j| qj[j][k]).collect()).collect()
    }

    /// Attraction plus jerk cost (everything except collisions).
    fn quadratic_cost(&self, q: &[Vec<f64>], z: &[DVector<f64>]) -> f64 {
        let mut cost: f64 = self.u0.iter().map(|u| u * u).sum();
        cost += z.iter().map(|zj| zj.norm_squared()).sum::<f64>();
        for (k, qk) in q.iter().enumerate() {
            let err: f64 = qk.iter().zip(&self.target[k]).map(|(a, b)| (a - b) * (a - b)).sum();
            cost += self.weight[k] * err;
        }
        cost
    }
}

struct Collisions<'a> {
    robot: &'a RobotModel,
}

impl Collisions<'_> {
    fn terms(&self, p: &PlanProblem, q: &[Vec<f64>]) -> Vec<Vec<CollisionTerm>> {
        q.iter().map(|qk| collision_terms(self.robot, qk, &p.obstacles, p.r_safe)).collect()
    }
}

fn hinge_cost(terms: &[Vec<CollisionTerm>]) -> f64 {
    terms.iter().flatten().map(|t| t.residual * t.residual).sum()
}

fn map_qp(e: QpError) -> PlanError {
    match e {
        QpError::Infeasible => PlanError::Infeasible,
        other => PlanError::Solver(other.to_string()),
    }
}

/// Linearization of the collision terms around `q_lin` (per knot, per joint).
struct GaussNewton<'a> {
    terms: &'a [Vec<CollisionTerm>],
    q_lin: &'a [Vec<f64>],
}

/// Builds and solves the QP of every joint; `tr` adds `μ‖z − z_ref‖²`.
fn solve_joints(
    s: &Setup,
    cons: &[JointConstraints],
    gn: Option<&GaussNewton>,
    tr: Option<(f64, &[DVector<f64>])>,
) -> Result<Vec<DVector<f64>>, PlanError> {
    let (n, nz, m) = (s.cond.n, s.cond.nz, s.p.dof());
    let w3 = s.p.weights.w3;
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let mut h = s.base_h.clone();
        let mut g = DVector::zeros(nz);
        for k in 1..n {
            let row = s.cond.sq.row(k);
            let resid = s.free[j][k][0] - s.target[k][j];
            g += row.transpose() * (2.0 * s.weight[k] * resid);
        }
        if let Some(gn) = gn {
            for k in 1..n {
                let (mut a, mut b) = (0.0, 0.0);
                for t in &gn.terms[k] {
                    a += w3 * t.grad[j] * t.grad[j];
                    b += 2.0 * w3 * t.residual * t.grad[j];
                }
                if a == 0.0 && b == 0.0 {
                    continue;
                }
                let row = s.cond.sq.row(k);
                // a Δ² + b Δ with Δ = q_k − q_lin,k.
                let q_lin = gn.q_lin[k][j];
                let q_free = s.free[j][k][0];
                h += row.transpose() * row * (2.0 * a);
                g += row.transpose() * (b + 2.0 * a * (q_free - q_lin));
            }
        }
        if let Some((mu, z_ref)) = tr {
            for i in 0..nz {
                h[(i, i)] += 2.0 * mu;
            }
            g -= &z_ref[j] * (2.0 * mu);
        }
        let c = &cons[j];
        let qp = QpProblem { h: &h, g: &g, a_eq: &c.a_eq, b_eq: &c.b_eq, a_in: &c.a_in, lo: &c.lo, hi: &c.hi };
        out.push(solve_qp(&qp).map_err(map_qp)?.z);
    }
    Ok(out)
}

/// Value of the block-diagonal Gauss–Newton model of the collision cost.
fn model_hinge(w3: f64, gn: &GaussNewton, q: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (k, terms) in gn.terms.iter().enumerate() {
        for t in terms {
            let mut v = t.residual * t.residual;
            for (j, gj) in t.grad.iter().enumerate() {
                let d = q[k][j] - gn.q_lin[k][j];
                v += 2.0 * t.residual * gj * d + gj * gj * d * d;
            }
            total += w3 * v;
        }
    }
    total
}

/// Solves `problem`; with `previous`, its knot 1 becomes the fixed head and its
/// remaining inputs seed the collision linearization.
pub fn solve(
    problem: &PlanProblem,
    previous: Option<&Trajectory>,
    robot: Option<&RobotModel>,
    opts: &SolveOptions,
) -> Result<Trajectory, PlanError> {
    let start = Instant::now();
    problem.validate()?;
    if !problem.obstacles.is_empty() && robot.is_none() {
        return Err(PlanError::MissingRobot);
    }
    let m = problem.dof();
    let (x0, u0, t0) = match previous.filter(|p| !p.knots.is_empty()) {
        Some(prev) => {
            let k = 1.min(prev.knots.len() - 1);
            let knot = &prev.knots[k];
            if knot.x.dof() != m {
                return Err(PlanError::InvalidProblem("previous trajectory dimension mismatch".into()));
            }
            (knot.x.clone(), knot.u.clone(), prev.t0 + k as f64 * prev.h)
        }
        None => (problem.x0.clone(), problem.u0.clone(), 0.0),
    };
    let s = Setup::new(problem, x0, u0);
    let nz = s.cond.nz;
    let w3 = problem.weights.w3;

    let mut relaxed = false;
    let mut cons: Vec<JointConstraints> = (0..m).map(|j| s.constraints(j, true)).collect();

    let collisions = robot.filter(|_| !problem.obstacles.is_empty()).map(|robot| Collisions { robot });
    // Linearization seed: previous inputs shifted by one knot past the head.
    let z_seed: Vec<DVector<f64>> = (0..m)
        .map(|j| {
            DVector::from_fn(nz, |i, _| {
                previous
                    .and_then(|p| p.knots.get(i + 2))
                    .map_or(0.0, |k| k.u[j].clamp(-problem.bounds.j_max[j], problem.bounds.j_max[j]))
            })
        })
        .collect();
    let q_seed = s.positions(&z_seed);
    let seed_terms = collisions.as_ref().map(|c| c.terms(problem, &q_seed)).unwrap_or_default();
    let seed_gn = GaussNewton { terms: &seed_terms, q_lin: &q_seed };
    let gn_first = if seed_terms.iter().any(|t| !t.is_empty()) { Some(&seed_gn) } else { None };

    let mut z = match solve_joints(&s, &cons, gn_first, None) {
        Ok(z) => z,
        Err(PlanError::Infeasible) => {
            relaxed = true;
            cons = (0..m).map(|j| s.constraints(j, false)).collect();
            solve_joints(&s, &cons, gn_first, None)?
        }
        Err(e) => return Err(e),
    };
    let mut iterations = 1;
    let mut q = s.positions(&z);
    let mut terms = collisions.as_ref().map(|c| c.terms(problem, &q)).unwrap_or_default();
    let mut cost = s.quadratic_cost(&q, &z) + w3 * hinge_cost(&terms);
    let mut converged = gn_first.is_none() && terms.iter().all(|t| t.is_empty());

    let mut mu: f64 = 1e-3;
    let tol = opts.stationarity_tol;
    while !converged && iterations < opts.max_iterations {
        if opts.time_budget.is_some_and(|b| start.elapsed().as_secs_f64() > b) {
            break;
        }
        let gn = GaussNewton { terms: &terms, q_lin: &q };
        let candidate = solve_joints(&s, &cons, Some(&gn), Some((mu, &z)))?;
        iterations += 1;
        let q_new = s.positions(&candidate);
        let predicted = cost - (s.quadratic_cost(&q_new, &candidate) + model_hinge(w3, &gn, &q_new));
        let step = candidate.iter().zip(&z).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        if predicted <= tol * (1.0 + cost) || step <= tol {
            converged = true;
            break;
        }
        let new_terms = collisions.as_ref().map(|c| c.terms(problem, &q_new)).unwrap_or_default();
        let new_cost = s.quadratic_cost(&q_new, &candidate) + w3 * hinge_cost(&new_terms);
        let actual = cost - new_cost;
        let ratio = actual / predicted;
        if actual > 0.0 && ratio > 1e-4 {
            z = candidate;
            q = q_new;
            terms = new_terms;
            cost = new_cost;
            if ratio > 0.75 {
                mu = (mu / 3.0).max(1e-9);
            }
        } else {
            mu = (mu * 4.0).max(1e-3);
        }
    }

    let knots = build_knots(&s, &z);
    let mut traj = Trajectory {
        h: problem.h,
        t0,
        knots,
        stats: SolveStats {
            iterations,
            wall_time: start.elapsed().as_secs_f64(),
            converged,
            cost,
            relaxed,
            dynamics_residual: 0.0,
        },
    };
    traj.stats.dynamics_residual = traj.dynamics_residual();
    debug_assert!(traj.stats.dynamics_residual <= 1e-8, "residual {}", traj.stats.dynamics_residual);
    debug_assert!(traj.terminal_equilibrium());
    Ok(traj)
}

/// Exact forward propagation of the inputs; the terminal rest state (already
/// satisfied to solver precision) is written as exact zeros.
fn build_knots(s: &Setup, z: &[DVector<f64>]) -> Vec<Knot> {
    let (n, nz, m) = (s.cond.n, s.cond.nz, s.p.dof());
    let h = s.p.h;
    let input = |j: usize, k: usize| -> f64 {
        if k == 0 {
            s.u0[j]
        } else if k <= nz {
            z[j][k - 1]
        } else {
            0.0
        }
    };
    let mut knots = Vec::with_capacity(n);
    knots.push(Knot { x: s.x0.clone(), u: s.u0.clone() });
    for k in 1..n {
        let prev = &knots[k - 1];
        let mut x = PlanState { q: vec![0.0; m], qd: vec![0.0; m], qdd: vec![0.0; m] };
        let mut u = vec![0.0; m];
        for j in 0..m {
            let xs = Scalar3::new(prev.x.q[j], prev.x.qd[j], prev.x.qdd[j]);
            let next = foh_step(h, xs, input(j, k - 1), input(j, k));
            x.q[j] = next[0];
            x.qd[j] = next[1];
            x.qdd[j] = next[2];
            u[j] = input(j, k);
        }
        knots.push(Knot { x, u });
    }
    if let Some(last) = knots.last_mut() {
        last.x.qd.iter_mut().chain(last.x.qdd.iter_mut()).for_each(|v| *v = 0.0);
    }
    knots
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;
    use crate::arm::test_models::arm7;

    fn one_joint_problem(n: usize, goal: f64) -> PlanProblem {
        PlanProblem {
            x0: PlanState::at_rest(vec![0.0]),
            u0: vec![0.0],
            waypoint: None,
            goal: ToleranceSet::uniform(vec![goal], 0.01),
            enforce_waypoint: true,
            enforce_goal: true,
            h: 0.1,
            n,
            n_s: 0,
            bounds: Bounds { q_min: vec![-3.0], q_max: vec![3.0], v_max: vec![10.0], a_max: vec![100.0], j_max: vec![1e4] },
            weights: Weights::default(),
            obstacles: vec![],
            r_safe: 0.02,
        }
    }

    fn opts() -> SolveOptions {
        SolveOptions { time_budget: None, ..SolveOptions::default() }
    }

    #[test]
    fn condensed_sensitivities_match_propagation() {
        let c = Condensed::new(0.1, 6);
        let z = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let via_s = &c.sq * &z;
        let inputs = [0.0, 1.0, -2.0, 0.5, 3.0, 0.0];
        let mut x = Scalar3::zeros();
        for k in 0..5 {
            x = foh_step(0.1, x, inputs[k], inputs[k + 1]);
            assert!((x[0] - via_s[k + 1]).abs() < 1e-14);
        }
    }

    #[test]
    fn stationary_problem_is_solved_in_one_iteration() {
        let mut p = one_joint_problem(5, 0.3);
        p.x0 = PlanState::at_rest(vec![0.3]);
        let t = solve(&p, None, None, &opts()).unwrap();
        assert_eq!(t.stats.iterations, 1);
        assert!(t.stats.converged);
        assert!(t.stats.cost.abs() < 1e-20);
        for k in &t.knots {
            assert_eq!(k.u, vec![0.0]);
            assert!((k.x.q[0] - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn rest_to_rest_respects_goal_and_equilibrium() {
        let p = one_joint_problem(14, 1.0);
        let t = solve(&p, None, None, &opts()).unwrap();
        assert!(t.terminal_equilibrium());
        assert!(t.dynamics_residual() <= 1e-8);
        assert!(p.goal.contains(&t.knots.last().unwrap().x.q, 1e-9));
        assert_eq!(t.stats.iterations, 1);
    }

    #[test]
    fn warm_start_pins_the_head() {
        let p = one_joint_problem(14, 1.0);
        let first = solve(&p, None, None, &opts()).unwrap();
        let second = solve(&p, Some(&first), None, &opts()).unwrap();
        assert_eq!(second.knots[0], first.knots[1]);
        assert!((second.t0 - 0.1).abs() < 1e-15);
    }

    #[test]
    fn contradictory_boxes_relax_then_fail() {
        // Goal outside position limits: relaxing the goal set restores feasibility.
        let mut p = one_joint_problem(10, 2.0);
        p.bounds.q_max = vec![1.5];
        let t = solve(&p, None, None, &opts()).unwrap();
        assert!(t.stats.relaxed);
        // A moving head that cannot stop inside the position limits is infeasible.
        let mut p = one_joint_problem(10, 0.0);
        p.x0 = PlanState { q: vec![2.9], qd: vec![5.0], qdd: vec![0.0] };
        assert_eq!(solve(&p, None, None, &opts()).unwrap_err(), PlanError::Infeasible);
    }

    #[test]
    fn obstacles_need_a_robot_and_reduce_penetration() {
        let m = arm7();
        let q0 = vec![0.0, 0.6, 0.0, -1.2, 0.0, 0.8, 0.0];
        let qg = vec![1.2, 0.6, 0.0, -1.2, 0.0, 0.8, 0.0];
        let bounds = Bounds::from_model(&m, 1.0);
        // An obstacle sitting on the straight joint-space path at mid-course.
        let mid: Vec<f64> = q0.iter().zip(&qg).map(|(a, b)| 0.5 * (a + b)).collect();
        let frames = m.frames(&mid);
        let (_, c, _) = m.sphere_centers(&frames)[1];
        let obstacles = vec![Sphere { center: [c.x, c.y, c.z + 0.12], radius: 0.05 }];
        let mut p = PlanProblem {
            x0: PlanState::at_rest(q0.clone()),
            u0: vec![0.0; 7],
            waypoint: None,
            goal: ToleranceSet::uniform(qg.clone(), 0.01),
            enforce_waypoint: true,
            enforce_goal: true,
            h: 0.1,
            n: 20,
            n_s: 0,
            bounds,
            weights: Weights::default(),
            obstacles: obstacles.clone(),
            r_safe: 0.02,
        };
        assert_eq!(solve(&p, None, None, &opts()).unwrap_err(), PlanError::MissingRobot);
        let with = solve(&p, None, Some(&m), &opts()).unwrap();
        p.obstacles.clear();
        let without = solve(&p, None, None, &opts()).unwrap();
        let penetration = |t: &Trajectory| -> f64 {
            t.knots.iter().map(|k| collision_cost(&m, &k.x.q, &obstacles, 0.02)).sum()
        };
        assert!(penetration(&without) > 0.0, "scenario must collide without the penalty");
        assert!(penetration(&with) < 0.5 * penetration(&without));
        assert!(with.stats.iterations > 1);
        assert!(with.dynamics_residual() <= 1e-8 && with.terminal_equilibrium());
    }
}
