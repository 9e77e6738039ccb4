//! Rigid-body dynamics `M(q) q̈ + C(q, q̇) q̇ + g(q) = τ`.
//!
//! `M` comes from composite rigid bodies, the bias `C q̇ + g` from a world-frame
//! recursive Newton–Euler pass, and the matrix `C` from Christoffel symbols of
//! `M` (partial derivatives by central differences).

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{Frames, RobotModel};

/// Central-difference step used for `∂M/∂q`.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct DynamicsTerms {
    pub mass: DMatrix<f64>,
    pub coriolis: DMatrix<f64>,
    pub gravity: DVector<f64>,
}

struct LinkInertial {
    mass: f64,
    com: Vector3<f64>,
    inertia: Matrix3<f64>,
}

impl RobotModel {
    fn link_inertials(&self, frames: &Frames) -> Vec<LinkInertial> {
        self.joints()
            .iter()
            .zip(&frames.joints)
            .map(|(j, f)| LinkInertial {
                mass: j.mass,
                com: f.transform_point(&Vector3::from(j.com)),
                inertia: f.r * j.inertia_matrix() * f.r.transpose(),
            })
            .collect()
    }

    /// Inverse dynamics: joint torques producing `qdd` at state `(q, qd)`.
    pub fn inverse_dynamics(&self, q: &[f64], qd: &[f64], qdd: &[f64]) -> DVector<f64> {
        self.newton_euler(q, qd, qdd, self.gravity())
    }

    /// `C(q, q̇) q̇ + g(q)`.
    pub fn bias_torques(&self, q: &[f64], qd: &[f64]) -> DVector<f64> {
        let zeros = vec![0.0; self.dof()];
        self.newton_euler(q, qd, &zeros, self.gravity())
    }

    pub fn gravity_torques(&self, q: &[f64]) -> DVector<f64> {
        let zeros = vec![0.0; self.dof()];
        self.newton_euler(q, &zeros, &zeros, self.gravity())
    }

    fn newton_euler(&self, q: &[f64], qd: &[f64], qdd: &[f64], gravity: Vector3<f64>) -> DVector<f64> {
        let n = self.dof();
        assert!(qd.len() == n && qdd.len() == n, "state dimension mismatch");
        let frames = self.frames(q);
        let links = self.link_inertials(&frames);

        let mut forces = Vec::with_capacity(n);
        let mut moments = Vec::with_capacity(n);

        // Outward pass; the base frame sits at the world origin, accelerating
        // upward against gravity.
        let mut omega = Vector3::zeros();
        let mut omega_dot = Vector3::zeros();
        let mut origin = Vector3::zeros();
        let mut origin_acc = -gravity;
        for i in 0..n {
            let z = frames.axis(i);
            let o = frames.origin(i);
            let lever = o - origin;
            origin_acc += omega_dot.cross(&lever) + omega.cross(&omega.cross(&lever));
            let spin = z * qd[i];
            omega_dot += z * qdd[i] + omega.cross(&spin);
            omega += spin;
            origin = o;

            let l = &links[i];
            let rc = l.com - o;
            let acc_c = origin_acc + omega_dot.cross(&rc) + omega.cross(&omega.cross(&rc));
            forces.push(acc_c * l.mass);
            moments.push(l.inertia * omega_dot + omega.cross(&(l.inertia * omega)));
        }

        // Inward pass, moments about each joint origin.
        let mut tau = DVector::zeros(n);
        let mut f_next = Vector3::zeros();
        let mut n_next = Vector3::zeros();
        for i in (0..n).rev() {
            let o = frames.origin(i);
            let next_origin = if i + 1 < n { frames.origin(i + 1) } else { o };
            let f = forces[i] + f_next;
            let m = moments[i]
                + (links[i].com - o).cross(&forces[i])
                + n_next
                + (next_origin - o).cross(&f_next);
            tau[i] = frames.axis(i).dot(&m);
            f_next = f;
            n_next = m;
        }
        tau
    }

    /// Joint-space mass matrix via composite rigid bodies.
    pub fn mass_matrix(&self, q: &[f64]) -> DMatrix<f64> {
        let n = self.dof();
        let frames = self.frames(q);
        let links = self.link_inertials(&frames);
        let mut mass = DMatrix::zeros(n, n);

        let mut c_mass = 0.0;
        let mut c_com = Vector3::zeros();
        let mut c_inertia = Matrix3::zeros();
        for j in (0..n).rev() {
            // Merge link j into the composite of links j+1..n.
            let l = &links[j];
            let total = c_mass + l.mass;
            let com = (c_com * c_mass + l.com * l.mass) / total;
            c_inertia = shift_inertia(&c_inertia, c_mass, &(c_com - com))
                + shift_inertia(&l.inertia, l.mass, &(l.com - com));
            c_mass = total;
            c_com = com;

            let zj = frames.axis(j);
            let oj = frames.origin(j);
            let momentum = zj.cross(&(c_com - oj)) * c_mass;
            let spin = c_inertia * zj;
            for i in 0..=j {
                let oi = frames.origin(i);
                let val = frames.axis(i).dot(&(spin + (c_com - oi).cross(&momentum)));
                mass[(i, j)] = val;
                mass[(j, i)] = val;
            }
        }
        mass
    }

    /// Coriolis/centrifugal matrix from Christoffel symbols of `M`, so that
    /// `Ṁ − 2C` is skew-symmetric.
    pub fn coriolis_matrix(&self, q: &[f64], qd: &[f64]) -> DMatrix<f64> {
        let n = self.dof();
        let mut dm = Vec::with_capacity(n);
        let mut qp = q.to_vec();
        for k in 0..n {
            qp[k] = q[k] + FD_STEP;
            let plus = self.mass_matrix(&qp);
            qp[k] = q[k] - FD_STEP;
            let minus = self.mass_matrix(&qp);
            qp[k] = q[k];
            dm.push((plus - minus) / (2.0 * FD_STEP));
        }
        let mut c = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                c[(i, j)] = (0..n)
                    .map(|k| 0.5 * (dm[k][(i, j)] + dm[j][(i, k)] - dm[i][(j, k)]) * qd[k])
                    .sum();
            }
        }
        c
    }

    pub fn dynamics_terms(&self, q: &[f64], qd: &[f64]) -> DynamicsTerms {
        DynamicsTerms {
            mass: self.mass_matrix(q),
            coriolis: self.coriolis_matrix(q, qd),
            gravity: self.gravity_torques(q),
        }
    }

    /// `q̈ = M⁻¹(τ − C q̇ − g)`; `None` if `M` is not numerically positive definite.
    pub fn forward_dynamics(&self, q: &[f64], qd: &[f64], tau: &DVector<f64>) -> Option<DVector<f64>> {
        let mass = self.mass_matrix(q);
        let rhs = tau - self.bias_torques(q, qd);
        mass.cholesky().map(|c| c.solve(&rhs))
    }

    pub fn kinetic_energy(&self, q: &[f64], qd: &[f64]) -> f64 {
        let v = DVector::from_column_slice(qd);
        0.5 * v.dot(&(self.mass_matrix(q) * &v))
    }
}

/// Inertia about a point displaced by `-offset` from the body's center of mass.
fn shift_inertia(inertia: &Matrix3<f64>, mass: f64, offset: &Vector3<f64>) -> Matrix3<f64> {
    inertia + (Matrix3::identity() * offset.norm_squared() - offset * offset.transpose()) * mass
}
