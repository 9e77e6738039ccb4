//! Computed-torque tracking control and plant integration.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::RobotModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServoError {
    #[error("plant state became non-finite")]
    NonFiniteState,
    #[error("time step {0} s outside (0, 0.01]")]
    BadTimeStep(f64),
    #[error("gains must be strictly positive")]
    NonPositiveGain,
}

/// Diagonal velocity (`kv`, 1/s) and position (`kd`, 1/s²) feedback gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServoGains {
    kv: Vec<f64>,
    kd: Vec<f64>,
}

impl ServoGains {
    pub fn new(kv: Vec<f64>, kd: Vec<f64>) -> Result<Self, ServoError> {
        if kv.len() != kd.len() || kv.iter().chain(&kd).any(|g| !(*g > 0.0)) {
            return Err(ServoError::NonPositiveGain);
        }
        Ok(Self { kv, kd })
    }

    /// Critically damped per joint: `kd = ω²`, `kv = 2ω`.
    pub fn critically_damped(omega: f64, dof: usize) -> Result<Self, ServoError> {
        Self::new(vec![2.0 * omega; dof], vec![omega * omega; dof])
    }

    pub fn kv(&self) -> &[f64] {
        &self.kv
    }

    pub fn kd(&self) -> &[f64] {
        &self.kd
    }

    /// Slowest decay rate of the per-joint error dynamics `ë + kv ė + kd e = 0`,
    /// i.e. the smallest |Re λ| over all companion-matrix eigenvalues.
    pub fn slowest_decay_rate(&self) -> f64 {
        self.kv
            .iter()
            .zip(&self.kd)
            .map(|(&kv, &kd)| {
                let disc = kv * kv - 4.0 * kd;
                if disc >= 0.0 {
                    0.5 * (kv - disc.sqrt())
                } else {
                    0.5 * kv
                }
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Desired joint position, velocity and acceleration at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServoReference {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub qdd: DVector<f64>,
}

impl ServoReference {
    /// Hold `q` at rest.
    pub fn hold(q: DVector<f64>) -> Self {
        let n = q.len();
        Self { q, qd: DVector::zeros(n), qdd: DVector::zeros(n) }
    }
}

/// `u = q̈_d − Kv (q̇ − q̇_d) − Kd (q − q_d)`.
pub fn feedback_accel(
    reference: &ServoReference,
    q: &DVector<f64>,
    qd: &DVector<f64>,
    gains: &ServoGains,
) -> DVector<f64> {
    let n = q.len();
    DVector::from_fn(n, |i, _| {
        reference.qdd[i]
            - gains.kv[i] * (qd[i] - reference.qd[i])
            - gains.kd[i] * (q[i] - reference.q[i])
    })
}

/// `τ = M(q) u + C(q, q̇) q̇ + g(q)`.
pub fn computed_torque(model: &RobotModel, q: &DVector<f64>, qd: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    model.mass_matrix(q.as_slice()) * u + model.bias_torques(q.as_slice(), qd.as_slice())
}

/// Joint positions and velocities of the simulated plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
}

impl PlantState {
    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self { q, qd: DVector::zeros(n) }
    }
}

/// One classic RK4 step of `q̈ = M⁻¹(τ − C q̇ − g)` with `τ` held constant.
pub fn plant_step(model: &RobotModel, state: &PlantState, tau: &DVector<f64>, dt: f64) -> Result<PlantState, ServoError> {
    if !(dt > 0.0 && dt <= 0.01) {
        return Err(ServoError::BadTimeStep(dt));
    }
    let accel = |q: &DVector<f64>, qd: &DVector<f64>| -> Result<DVector<f64>, ServoError> {
        model
            .forward_dynamics(q.as_slice(), qd.as_slice(), tau)
            .ok_or(ServoError::NonFiniteState)
    };
    let (q, v) = (&state.q, &state.qd);
    let k1v = v.clone();
    let k1a = accel(q, v)?;
    let q2 = q + &k1v * (0.5 * dt);
    let v2 = v + &k1a * (0.5 * dt);
    let k2a = accel(&q2, &v2)?;
    let q3 = q + &v2 * (0.5 * dt);
    let v3 = v + &k2a * (0.5 * dt);
    let k3a = accel(&q3, &v3)?;
    let q4 = q + &v3 * dt;
    let v4 = v + &k3a * dt;
    let k4a = accel(&q4, &v4)?;

    let q_next = q + (k1v + &v2 * 2.0 + &v3 * 2.0 + &v4) * (dt / 6.0);
    let qd_next = v + (k1a + k2a * 2.0 + k3a * 2.0 + k4a) * (dt / 6.0);
    if q_next.iter().chain(qd_next.iter()).any(|x| !x.is_finite()) {
        return Err(ServoError::NonFiniteState);
    }
    Ok(PlantState { q: q_next, qd: qd_next })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::test_models::{arm7, pendulum};
    use nalgebra::{dvector, Vector3};

    fn scalar_gains(kv: f64, kd: f64) -> ServoGains {
        ServoGains::new(vec![kv], vec![kd]).unwrap()
    }

    #[test]
    fn zero_error_passes_feedforward() {
        let r = ServoReference { q: dvector![0.3], qd: dvector![0.1], qdd: dvector![2.5] };
        let u = feedback_accel(&r, &dvector![0.3], &dvector![0.1], &scalar_gains(2.0, 1.0));
        assert_eq!(u, dvector![2.5]);
    }

    #[test]
    fn scalar_feedback_arithmetic() {
        let g = scalar_gains(2.0, 1.0);
        let r = ServoReference::hold(dvector![0.0]);
        let u = feedback_accel(&r, &dvector![0.1], &dvector![0.0], &g);
        assert!((u[0] + 0.1).abs() < 1e-15);
        let u = feedback_accel(&r, &dvector![0.0], &dvector![0.2], &g);
        assert!((u[0] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn gains_must_be_positive() {
        assert_eq!(ServoGains::new(vec![1.0], vec![0.0]), Err(ServoError::NonPositiveGain));
        assert_eq!(ServoGains::new(vec![1.0], vec![1.0, 2.0]), Err(ServoError::NonPositiveGain));
    }

    #[test]
    fn decay_rate_of_critically_damped_gains() {
        let g = ServoGains::critically_damped(20.0, 3).unwrap();
        assert!((g.slowest_decay_rate() - 20.0).abs() < 1e-6);
        // Overdamped: roots of s² + 5s + 4 are −1 and −4.
        assert!((scalar_gains(5.0, 4.0).slowest_decay_rate() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pendulum_gravity_hold_torque() {
        let m = pendulum();
        let tau = computed_torque(&m, &dvector![0.0], &dvector![0.0], &dvector![0.0]);
        assert!((tau[0] - 9.81).abs() < 1e-12);
    }

    #[test]
    fn zero_gravity_unit_accel_is_mass_column_sum() {
        let m = arm7().with_gravity(Vector3::zeros());
        let q = dvector![0.1, 0.4, -0.2, -1.1, 0.3, 0.6, 0.0];
        let u = DVector::from_element(7, 1.0);
        let tau = computed_torque(&m, &q, &DVector::zeros(7), &u);
        let expected = m.mass_matrix(q.as_slice()) * &u;
        assert!((tau - expected).amax() < 1e-12);
    }

    #[test]
    fn computed_torque_cancels_dynamics() {
        let m = arm7();
        let q = dvector![0.2, -0.5, 0.3, -1.4, 0.2, 0.9, -0.3];
        let qd = dvector![0.4, -0.2, 0.3, 0.1, -0.5, 0.2, 0.6];
        let u = dvector![1.0, -2.0, 0.5, 0.3, -0.7, 2.2, -1.1];
        let tau = computed_torque(&m, &q, &qd, &u);
        let qdd = m.forward_dynamics(q.as_slice(), qd.as_slice(), &tau).unwrap();
        assert!((qdd - u).amax() <= 1e-10);
    }

    #[test]
    fn closed_loop_measured_acceleration_equals_command() {
        // Constant command over one step: with τ re-evaluated the plant is a
        // double integrator, so Δq̇ / dt = u up to the state dependence of τ.
        let m = arm7();
        let state = PlantState { q: dvector![0.1, 0.3, -0.2, -1.0, 0.1, 0.5, 0.0], qd: DVector::zeros(7) };
        let u = dvector![0.5, -0.3, 0.2, 0.1, 0.0, -0.4, 0.3];
        let tau = computed_torque(&m, &state.q, &state.qd, &u);
        let qdd0 = m.forward_dynamics(state.q.as_slice(), state.qd.as_slice(), &tau).unwrap();
        assert!((qdd0 - &u).amax() <= 1e-8);
    }

    #[test]
    fn gravity_torque_holds_equilibrium() {
        let m = arm7();
        let state = PlantState::at_rest(dvector![0.3, 0.7, -0.4, -1.2, 0.5, 0.3, 0.2]);
        let tau = m.gravity_torques(state.q.as_slice());
        let next = plant_step(&m, &state, &tau, 1e-3).unwrap();
        assert!((next.q - &state.q).amax() < 1e-12);
        assert!(next.qd.amax() < 1e-12);
    }

    #[test]
    fn free_motion_conserves_kinetic_energy_per_step() {
        let m = arm7().with_gravity(Vector3::zeros());
        let state = PlantState {
            q: dvector![0.1, 0.5, -0.3, -1.2, 0.2, 0.8, 0.0],
            qd: dvector![0.5, -0.4, 0.6, 0.3, -0.8, 0.4, 1.0],
        };
        let e0 = m.kinetic_energy(state.q.as_slice(), state.qd.as_slice());
        let next = plant_step(&m, &state, &DVector::zeros(7), 1e-3).unwrap();
        let e1 = m.kinetic_energy(next.q.as_slice(), next.qd.as_slice());
        assert!(((e1 - e0) / e0).abs() < 1e-8);
    }

    #[test]
    fn rk4_one_step_error_is_fifth_order() {
        // Pendulum released from 0.5 rad; reference by many tiny steps.
        let m = pendulum();
        let start = PlantState::at_rest(dvector![0.5]);
        let tau = DVector::zeros(1);
        let reference = |t: f64| {
            let steps = (t / 1e-6).round() as usize;
            let mut s = start.clone();
            for _ in 0..steps {
                s = plant_step(&m, &s, &tau, 1e-6).unwrap();
            }
            s
        };
        let err = |dt: f64| {
            let one = plant_step(&m, &start, &tau, dt).unwrap();
            let r = reference(dt);
            (one.q[0] - r.q[0]).abs().max((one.qd[0] - r.qd[0]).abs())
        };
        let ratio = err(0.01) / err(0.005);
        // Local error O(dt⁵) gives 32; the global-order expectation is ≥ 16.
        assert!(ratio > 16.0, "ratio {ratio}");
    }

    #[test]
    fn plant_step_rejects_bad_dt_and_is_deterministic() {
        let m = pendulum();
        let s = PlantState::at_rest(dvector![0.2]);
        assert_eq!(plant_step(&m, &s, &dvector![0.0], 0.0), Err(ServoError::BadTimeStep(0.0)));
        assert_eq!(plant_step(&m, &s, &dvector![0.0], 0.02), Err(ServoError::BadTimeStep(0.02)));
        let a = plant_step(&m, &s, &dvector![1.0], 1e-3).unwrap();
        let b = plant_step(&m, &s, &dvector![1.0], 1e-3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn free_motion_energy_drift_over_ten_seconds() {
        let m = arm7().with_gravity(Vector3::zeros());
        let mut state = PlantState {
            q: dvector![0.1, 0.5, -0.3, -1.2, 0.2, 0.8, 0.0],
            qd: dvector![0.3, -0.2, 0.4, 0.2, -0.5, 0.3, 0.6],
        };
        let e0 = m.kinetic_energy(state.q.as_slice(), state.qd.as_slice());
        let tau = DVector::zeros(7);
        for _ in 0..10_000 {
            state = plant_step(&m, &state, &tau, 1e-3).unwrap();
        }
        let e1 = m.kinetic_energy(state.q.as_slice(), state.qd.as_slice());
        assert!(((e1 - e0) / e0).abs() < 1e-6, "drift {}", (e1 - e0) / e0);
    }

    #[test]
    fn tracking_error_decays_at_the_slowest_gain_rate() {
        // Overdamped gains (roots -10 and -20) so the envelope is a pure
        // exponential; least-squares slope of log|(e, ė)| over 2 s.
        let m = arm7();
        let gains = ServoGains::new(vec![30.0; 7], vec![200.0; 7]).unwrap();
        let alpha = gains.slowest_decay_rate();
        assert!((alpha - 10.0).abs() < 1e-9);
        let target = dvector![0.0, 0.4, 0.0, -1.2, 0.0, 0.8, 0.0];
        let reference = ServoReference::hold(target.clone());
        let mut state = PlantState::at_rest(target.add_scalar(0.2));
        let (mut ts, mut logs) = (Vec::new(), Vec::new());
        for k in 0..2000 {
            let e = &state.q - &target;
            let norm = (e.norm_squared() + state.qd.norm_squared()).sqrt();
            ts.push(k as f64 * 1e-3);
            logs.push(norm.ln());
            let u = feedback_accel(&reference, &state.q, &state.qd, &gains);
            let tau = computed_torque(&m, &state.q, &state.qd, &u);
            state = plant_step(&m, &state, &tau, 1e-3).unwrap();
        }
        let n = ts.len() as f64;
        let (mt, ml) = (ts.iter().sum::<f64>() / n, logs.iter().sum::<f64>() / n);
        let cov: f64 = ts.iter().zip(&logs).map(|(t, l)| (t - mt) * (l - ml)).sum();
        let var: f64 = ts.iter().map(|t| (t - mt) * (t - mt)).sum();
        let slope = cov / var;
        assert!(slope <= -0.9 * alpha, "slope {slope}");
    }

    #[test]
    fn non_finite_torque_is_reported() {
        let m = pendulum();
        let s = PlantState::at_rest(dvector![0.2]);
        assert_eq!(plant_step(&m, &s, &dvector![f64::NAN], 1e-3), Err(ServoError::NonFiniteState));
    }
}
