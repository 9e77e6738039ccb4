//! Dense strictly convex QP solver (Goldfarb–Idnani dual active set).
//!
//! Solves `min ½ zᵀHz + gᵀz` subject to `A_eq z = b_eq` and two-sided rows
//! `lo ≤ A_in z ≤ hi`. The factorization `J = L⁻ᵀ` (with `H = LLᵀ`) is
//! updated by Givens rotations as constraints enter and leave the active set.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("Hessian is not positive definite")]
    NotConvex,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("active-set iteration limit reached")]
    IterationLimit,
    #[error("dimension mismatch")]
    Dimension,
}

pub struct QpProblem<'a> {
    pub h: &'a DMatrix<f64>,
    pub g: &'a DVector<f64>,
    pub a_eq: &'a DMatrix<f64>,
    pub b_eq: &'a DVector<f64>,
    pub a_in: &'a DMatrix<f64>,
    pub lo: &'a DVector<f64>,
    pub hi: &'a DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Active inequality rows with the side (`true` = upper) and multiplier.
    pub active: Vec<(usize, bool, f64)>,
}

#[derive(Clone, Copy, PartialEq)]
enum Con {
    Eq(usize),
    In { row: usize, upper: bool },
}

struct Factor {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    q: usize,
}

impl Factor {
    /// `z = J₂ d₂` (primal direction) and `r = R⁻¹ d₁` (dual direction).
    fn directions(&self, d: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let mut z = DVector::zeros(self.n);
        for k in self.q..self.n {
            z.axpy(d[k], &self.j.column(k), 1.0);
        }
        let mut r = DVector::zeros(self.q);
        for i in (0..self.q).rev() {
            let mut s = d[i];
            for k in i + 1..self.q {
                s -= self.r[(i, k)] * r[k];
            }
            r[i] = s / self.r[(i, i)];
        }
        (z, r)
    }

    fn rotate_j(&mut self, a: usize, b: usize, c: f64, s: f64) {
        for k in 0..self.n {
            let (x, y) = (self.j[(k, a)], self.j[(k, b)]);
            self.j[(k, a)] = c * x + s * y;
            self.j[(k, b)] = -s * x + c * y;
        }
    }

    /// Appends the constraint whose `d = Jᵀ n` is given; false if dependent.
    fn add(&mut self, mut d: DVector<f64>, scale: f64) -> bool {
        for jx in (self.q + 1..self.n).rev() {
            let (a, b) = (d[jx - 1], d[jx]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            d[jx - 1] = h;
            d[jx] = 0.0;
            self.rotate_j(jx - 1, jx, c, s);
        }
        if self.q >= self.n || d[self.q].abs() <= 1e-12 * scale.max(1.0) {
            return false;
        }
        for i in 0..=self.q {
            self.r[(i, self.q)] = d[i];
        }
        self.q += 1;
        true
    }

    /// Removes active column `l` and restores the triangular form.
    fn remove(&mut self, l: usize) {
        for c in l..self.q - 1 {
            for i in 0..self.n {
                self.r[(i, c)] = self.r[(i, c + 1)];
            }
        }
        for i in 0..self.n {
            self.r[(i, self.q - 1)] = 0.0;
        }
        self.q -= 1;
        for jx in l..self.q {
            let (a, b) = (self.r[(jx, jx)], self.r[(jx + 1, jx)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for k in jx..self.q {
                let (x, y) = (self.r[(jx, k)], self.r[(jx + 1, k)]);
                self.r[(jx, k)] = c * x + s * y;
                self.r[(jx + 1, k)] = -s * x + c * y;
            }
            self.r[(jx + 1, jx)] = 0.0;
            self.rotate_j(jx, jx + 1, c, s);
        }
    }
}

/// Constraint normal and right-hand side in the form `nᵀz ≥ b` (or `= b`).
fn normal(p: &QpProblem, c: Con) -> (DVector<f64>, f64) {
    match c {
        Con::Eq(i) => (p.a_eq.row(i).transpose(), p.b_eq[i]),
        Con::In { row, upper: false } => (p.a_in.row(row).transpose(), p.lo[row]),
        Con::In { row, upper: true } => (-p.a_in.row(row).transpose(), -p.hi[row]),
    }
}

pub fn solve_qp(p: &QpProblem) -> Result<QpSolution, QpError> {
    let n = p.g.len();
    let (meq, m) = (p.a_eq.nrows(), p.a_in.nrows());
    if p.h.shape() != (n, n)
        || (meq > 0 && p.a_eq.ncols() != n)
        || p.b_eq.len() != meq
        || (m > 0 && p.a_in.ncols() != n)
        || p.lo.len() != m
        || p.hi.len() != m
    {
        return Err(QpError::Dimension);
    }
    if n == 0 {
        return trivial(p);
    }
    let chol = p.h.clone().cholesky().ok_or(QpError::NotConvex)?;
    let lt_inv = chol.l().transpose().try_inverse().ok_or(QpError::NotConvex)?;
    let mut f = Factor { n, j: lt_inv, r: DMatrix::zeros(n, n), q: 0 };
    let mut x = -chol.solve(p.g);
    let mut active: Vec<Con> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let row_norm: Vec<f64> = (0..m).map(|i| p.a_in.row(i).norm()).collect();
    let mut iterations = 0;

    for i in 0..meq {
        let (np, b) = normal(p, Con::Eq(i));
        let d = f.j.transpose() * &np;
        let (z, r) = f.directions(&d);
        let zn = z.dot(&np);
        if zn.abs() <= 1e-14 * np.norm_squared().max(1.0) {
            // Dependent on earlier equalities: redundant if consistent.
            if (b - np.dot(&x)).abs() <= 1e-9 * (1.0 + b.abs()) {
                continue;
            }
            return Err(QpError::Infeasible);
        }
        let t = (b - np.dot(&x)) / zn;
        x.axpy(t, &z, 1.0);
        for (uk, rk) in u.iter_mut().zip(r.iter()) {
            *uk -= t * rk;
        }
        u.push(t);
        if !f.add(d, np.norm()) {
            return Err(QpError::Infeasible);
        }
        active.push(Con::Eq(i));
    }

    let n_eq = active.len();
    let max_iter = 50 * (n + m + 10);
    loop {
        // Most violated inactive inequality.
        let mut worst: Option<(Con, f64)> = None;
        let ax = p.a_in * &x;
        for row in 0..m {
            if active.iter().any(|c| matches!(c, Con::In { row: r, .. } if *r == row)) {
                continue;
            }
            let scale = row_norm[row].max(1e-300);
            let tol = 1e-11 * (1.0 + p.lo[row].abs().min(p.hi[row].abs()).min(1e12));
            let lo_v = (ax[row] - p.lo[row]) / scale;
            let hi_v = (p.hi[row] - ax[row]) / scale;
            for (v, upper) in [(lo_v, false), (hi_v, true)] {
                if v < -tol && worst.is_none_or(|(_, w)| v < w) {
                    worst = Some((Con::In { row, upper }, v));
                }
            }
        }
        let Some((pc, _)) = worst else { break };
        let (np, b) = normal(p, pc);
        let mut up = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::IterationLimit);
            }
            let s = np.dot(&x) - b;
            let d = f.j.transpose() * &np;
            let (z, r) = f.directions(&d);
            // Partial (dual) step limit over active inequalities.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for k in n_eq..active.len() {
                if r[k] > 1e-14 {
                    let t = u[k] / r[k];
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            let zn = z.dot(&np);
            let t2 = if z.amax() > 1e-14 && zn > 1e-300 { -s / zn } else { f64::INFINITY };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }
            if t2.is_finite() {
                x.axpy(t, &z, 1.0);
            }
            for k in 0..active.len() {
                u[k] -= t * r[k];
            }
            up += t;
            if t2 <= t1 {
                if !f.add(d, np.norm()) {
                    return Err(QpError::Infeasible);
                }
                active.push(pc);
                u.push(up);
                break;
            }
            let l = drop.expect("partial step has a blocking constraint");
            active.remove(l);
            u.remove(l);
            f.remove(l);
        }
    }

    let objective = 0.5 * x.dot(&(p.h * &x)) + p.g.dot(&x);
    let active_in = active
        .iter()
        .zip(&u)
        .filter_map(|(c, &m)| match c {
            Con::In { row, upper } => Some((*row, *upper, m)),
            Con::Eq(_) => None,
        })
        .collect();
    Ok(QpSolution { z: x, objective, iterations, active: active_in })
}

fn trivial(p: &QpProblem) -> Result<QpSolution, QpError> {
    let ok_eq = p.b_eq.iter().all(|b| b.abs() <= 1e-9);
    let ok_in = p.lo.iter().zip(p.hi.iter()).all(|(l, h)| *l <= 1e-9 && *h >= -1e-9);
    if ok_eq && ok_in {
        Ok(QpSolution { z: DVector::zeros(0), objective: 0.0, iterations: 0, active: vec![] })
    } else {
        Err(QpError::Infeasible)
    }
}
