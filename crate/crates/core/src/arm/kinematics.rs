use nalgebra::{DMatrix, Matrix3, Vector3};

use super::RobotModel;
use crate::geom::Pose;

/// World poses of every joint frame for one configuration.
///
/// Frame `i` has its z-axis on joint `i`'s rotation axis and carries link `i`.
#[derive(Debug, Clone)]
pub struct Frames {
    pub joints: Vec<Pose>,
    pub tool: Pose,
}

impl Frames {
    pub fn axis(&self, i: usize) -> Vector3<f64> {
        self.joints[i].r.column(2).into_owned()
    }

    pub fn origin(&self, i: usize) -> Vector3<f64> {
        self.joints[i].p
    }

    /// Geometric Jacobian (6×m, linear rows first) of a point rigidly attached
    /// to link `link`, given in world coordinates.
    pub fn point_jacobian(&self, link: usize, point: &Vector3<f64>) -> DMatrix<f64> {
        let m = self.joints.len();
        let mut jac = DMatrix::zeros(6, m);
        for i in 0..=link {
            let z = self.axis(i);
            let lin = z.cross(&(point - self.origin(i)));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        }
        jac
    }
}

/// Modified-DH transform from frame `i−1` to frame `i`.
fn link_transform(a: f64, alpha: f64, d: f64, theta: f64) -> Pose {
    let (sa, ca) = alpha.sin_cos();
    let (st, ct) = theta.sin_cos();
    let r = Matrix3::new(ct, -st, 0.0, st * ca, ct * ca, -sa, st * sa, ct * sa, ca);
    Pose::new(Vector3::new(a, -sa * d, ca * d), r)
}

impl RobotModel {
    pub fn frames(&self, q: &[f64]) -> Frames {
        assert_eq!(q.len(), self.dof(), "joint vector length must match the model");
        let mut joints = Vec::with_capacity(q.len());
        let mut current = Pose::identity();
        for (j, &qi) in self.joints().iter().zip(q) {
            current = current.compose(&link_transform(j.a, j.alpha, j.d, qi + j.theta_offset));
            joints.push(current);
        }
        let tool = current.compose(self.tool());
        Frames { joints, tool }
    }

    /// End-effector pose `T_e(q)`.
    pub fn forward_kinematics(&self, q: &[f64]) -> Pose {
        self.frames(q).tool
    }

    /// Geometric Jacobian at the tool point, rows `[v; ω]`.
    pub fn jacobian(&self, q: &[f64]) -> DMatrix<f64> {
        let frames = self.frames(q);
        let last = self.dof() - 1;
        frames.point_jacobian(last, &frames.tool.p)
    }

    /// World position of every collision sphere center with its radius and link.
    pub fn sphere_centers(&self, frames: &Frames) -> Vec<(usize, Vector3<f64>, f64)> {
        self.spheres()
            .iter()
            .map(|s| {
                let c = frames.joints[s.link].transform_point(&Vector3::from(s.center));
                (s.link, c, s.radius)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_models::*;
    use crate::geom::rotation_log;
    use nalgebra::DVector;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn planar_fk_examples() {
        let m = planar_2link();
        let p = m.forward_kinematics(&[0.0, 0.0]).p;
        assert!((p - nalgebra::Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-15);
        let p = m.forward_kinematics(&[FRAC_PI_2, -FRAC_PI_2]).p;
        assert!((p - nalgebra::Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn arm7_home_is_vertical_stack() {
        let m = arm7();
        let expected_z: f64 = m.joints().iter().map(|j| j.d).sum::<f64>() + m.tool().p.z;
        let p = m.forward_kinematics(&[0.0; 7]).p;
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12, "{p:?}");
        assert!((p.z - expected_z).abs() < 1e-12);
    }

    #[test]
    fn planar_jacobian_lever_arm() {
        let j = planar_2link().jacobian(&[0.0, 0.0]);
        assert!((j[(0, 0)]).abs() < 1e-15);
        assert!((j[(1, 0)] - 2.0).abs() < 1e-15);
        assert!((j[(2, 0)]).abs() < 1e-15);
        assert!((j[(1, 1)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn last_column_is_last_axis_twist() {
        let m = arm7();
        let q = [0.3, -0.4, 0.2, -1.2, 0.5, 0.7, -0.3];
        let f = m.frames(&q);
        let j = m.jacobian(&q);
        let z = f.axis(6);
        let lin = z.cross(&(f.tool.p - f.origin(6)));
        for r in 0..3 {
            assert!((j[(r, 6)] - lin[r]).abs() < 1e-14);
            assert!((j[(r + 3, 6)] - z[r]).abs() < 1e-14);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let m = arm7();
        let q = DVector::from_vec(vec![0.1, 0.5, -0.3, -1.0, 0.2, 0.9, 0.4]);
        let jac = m.jacobian(q.as_slice());
        let step = 1e-6;
        for i in 0..7 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += step;
            qm[i] -= step;
            let tp = m.forward_kinematics(qp.as_slice());
            let tm = m.forward_kinematics(qm.as_slice());
            let dp = (tp.p - tm.p) / (2.0 * step);
            let dw = rotation_log(&(tp.r * tm.r.transpose())) / (2.0 * step);
            for r in 0..3 {
                assert!((jac[(r, i)] - dp[r]).abs() < 1e-8, "lin {i} {r}");
                assert!((jac[(r + 3, i)] - dw[r]).abs() < 1e-8, "ang {i} {r}");
            }
        }
    }

    #[test]
    fn jacobian_first_order_error_is_quadratic() {
        let m = arm7();
        let q = DVector::from_vec(vec![0.2, -0.6, 0.1, -1.4, 0.3, 0.8, 0.0]);
        let dir = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.6]).normalize();
        let err = |s: f64| {
            let dq = &dir * s;
            let lin = m.jacobian(q.as_slice()) * &dq;
            let p1 = m.forward_kinematics((&q + &dq).as_slice()).p;
            let p0 = m.forward_kinematics(q.as_slice()).p;
            ((p1 - p0) - lin.fixed_rows::<3>(0)).norm()
        };
        let ratio = err(1e-3) / err(5e-4);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }
}
