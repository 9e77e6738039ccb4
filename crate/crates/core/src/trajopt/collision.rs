//! Sphere-based collision penalty between robot links and obstacles.

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::arm::RobotModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
}

/// One penetrating link/obstacle pair: hinge residual `r = r_safe − d > 0`
/// and its gradient with respect to the joint positions.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionTerm {
    pub residual: f64,
    pub grad: DVector<f64>,
}

/// Pairs closer than `r_safe` (surface distance) at configuration `q`.
pub fn collision_terms(model: &RobotModel, q: &[f64], obstacles: &[Sphere], r_safe: f64) -> Vec<CollisionTerm> {
    if obstacles.is_empty() || model.spheres().is_empty() {
        return Vec::new();
    }
    let frames = model.frames(q);
    let mut out = Vec::new();
    for (link, center, radius) in model.sphere_centers(&frames) {
        for obs in obstacles {
            let delta = center - Vector3::from(obs.center);
            let dist = delta.norm();
            let d = dist - radius - obs.radius;
            if d >= r_safe {
                continue;
            }
            let normal = if dist > 1e-12 { delta / dist } else { Vector3::z() };
            let jac = frames.point_jacobian(link, &center);
            // r = r_safe − d, ∂d/∂q = n̂ᵀ J_p.
            let grad = -(jac.rows(0, 3).transpose() * normal);
            out.push(CollisionTerm { residual: r_safe - d, grad });
        }
    }
    out
}

/// `Σ max(0, r_safe − d)²` over all link/obstacle pairs.
pub fn collision_cost(model: &RobotModel, q: &[f64], obstacles: &[Sphere], r_safe: f64) -> f64 {
    collision_terms(model, q, obstacles, r_safe).iter().map(|t| t.residual * t.residual).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::test_models::arm7;

    #[test]
    fn far_obstacles_cost_nothing() {
        let m = arm7();
        let obs = [Sphere { center: [5.0, 5.0, 5.0], radius: 0.1 }];
        assert!(collision_terms(&m, &[0.0; 7], &obs, 0.02).is_empty());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = arm7();
        let q = [0.2, 0.5, -0.1, -1.2, 0.3, 0.8, 0.0];
        let frames = m.frames(&q);
        let (_, c, _) = m.sphere_centers(&frames)[1];
        let obs = [Sphere { center: [c.x + 0.05, c.y, c.z - 0.02], radius: 0.08 }];
        let terms = collision_terms(&m, &q, &obs, 0.02);
        assert_eq!(terms.len(), 1, "exactly one sphere should overlap");
        let step = 1e-6;
        for j in 0..7 {
            let mut qp = q;
            let mut qm = q;
            qp[j] += step;
            qm[j] -= step;
            let rp = collision_terms(&m, &qp, &obs, 0.02)[0].residual;
            let rm = collision_terms(&m, &qm, &obs, 0.02)[0].residual;
            assert!(((rp - rm) / (2.0 * step) - terms[0].grad[j]).abs() < 1e-7, "joint {j}");
        }
        let cost = collision_cost(&m, &q, &obs, 0.02);
        assert!((cost - terms[0].residual.powi(2)).abs() < 1e-15);
    }
}
