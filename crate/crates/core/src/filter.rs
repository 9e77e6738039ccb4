//! Kalman filter over 6D object poses with a per-axis triple-integrator model.
//!
//! State ordering is `[p, ṗ, p̈, o, ȯ, ö]`, three components each; the Euler
//! angles `o` follow [`crate::geom::EulerAngles`]. Angle components of the mean
//! and of every innovation are wrapped to (−π, π].

use std::io::{Read, Write};

use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{wrap_angle, EulerAngles, Pose};

pub const STATE_DIM: usize = 18;
pub const MEAS_DIM: usize = 6;
/// Offset of the orientation block inside the state.
pub const ORI: usize = 9;
/// Consecutive dropouts after which a track is flagged as coasting.
pub const COAST_AFTER: u32 = 5;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type MeasMatrix = SMatrix<f64, MEAS_DIM, MEAS_DIM>;
pub type MeasSelector = SMatrix<f64, MEAS_DIM, STATE_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("innovation covariance is not invertible")]
    SingularInnovation,
    #[error("covariance is not symmetric positive definite")]
    BadCovariance,
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
    #[error("measurement is not finite")]
    NonFiniteMeasurement,
    #[error("measurement at t = {t} precedes filter time {filter_t}")]
    OutOfOrder { t: f64, filter_t: f64 },
    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for FilterError {
    fn from(e: csv::Error) -> Self {
        FilterError::Csv(e.to_string())
    }
}

/// Mean and covariance of the filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub xi: StateVector,
    pub p: StateMatrix,
}

impl FilterState {
    pub fn position(&self) -> Vector3<f64> {
        self.xi.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.xi.fixed_rows::<3>(3).into_owned()
    }

    pub fn angles(&self) -> EulerAngles {
        EulerAngles::new(self.xi[ORI], self.xi[ORI + 1], self.xi[ORI + 2])
    }

    pub fn pose(&self) -> Pose {
        Pose::from_euler(self.position(), self.angles())
    }

    /// Mean propagated `dt` seconds ahead without touching the covariance.
    pub fn extrapolated_mean(&self, dt: f64) -> StateVector {
        let mut xi = process_model(dt) * self.xi;
        wrap_orientation(&mut xi);
        xi
    }
}

/// A 6D pose observation; `timestamp` is when it was produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMeasurement {
    pub p: Vector3<f64>,
    pub o: EulerAngles,
    pub timestamp: f64,
}

impl PoseMeasurement {
    pub fn from_pose(pose: &Pose, timestamp: f64) -> Self {
        Self { p: pose.p, o: pose.euler(), timestamp }
    }

    pub fn is_finite(&self) -> bool {
        self.timestamp.is_finite() && self.p.iter().chain(self.o.as_array().iter()).all(|v| v.is_finite())
    }

    fn vector(&self) -> SVector<f64, MEAS_DIM> {
        let o = self.o.as_array();
        SVector::<f64, MEAS_DIM>::from_column_slice(&[self.p.x, self.p.y, self.p.z, o[0], o[1], o[2]])
    }
}

/// Fixed-step filter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub dt: f64,
    pub process_noise_cov: StateMatrix,
    pub meas_noise_cov: MeasMatrix,
}

impl FilterConfig {
    pub fn new(dt: f64, process_noise_cov: StateMatrix, meas_noise_cov: MeasMatrix) -> Result<Self, FilterError> {
        if !(dt > 0.0) {
            return Err(FilterError::BadTimeStep(dt));
        }
        if !is_spd(&process_noise_cov) || !is_spd(&meas_noise_cov) {
            return Err(FilterError::BadCovariance);
        }
        Ok(Self { dt, process_noise_cov, meas_noise_cov })
    }
}

fn is_spd<const N: usize>(m: &SMatrix<f64, N, N>) -> bool {
    let sym = (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0);
    sym && m.iter().all(|v| v.is_finite()) && m.cholesky().is_some()
}

/// Noise and initialization parameters from which per-step matrices are built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterTuning {
    /// White-jerk spectral density of each position axis, m²/s⁵.
    pub q_pos: f64,
    /// White-jerk spectral density of each angle, rad²/s⁵.
    pub q_ori: f64,
    /// Measurement standard deviations.
    pub sigma_p: f64,
    pub sigma_o: f64,
    /// Prior standard deviations of the derivatives when a track starts.
    pub init_vel_std: f64,
    pub init_acc_std: f64,
    pub init_ang_vel_std: f64,
    pub init_ang_acc_std: f64,
}

impl Default for FilterTuning {
    fn default() -> Self {
        Self {
            q_pos: 0.01,
            q_ori: 0.01,
            sigma_p: 0.005,
            sigma_o: 0.05,
            init_vel_std: 0.2,
            init_acc_std: 0.5,
            init_ang_vel_std: 0.5,
            init_ang_acc_std: 1.0,
        }
    }
}

impl FilterTuning {
    pub fn config(&self, dt: f64) -> Result<FilterConfig, FilterError> {
        if !(dt > 0.0) {
            return Err(FilterError::BadTimeStep(dt));
        }
        let r = MeasMatrix::from_diagonal(&SVector::<f64, 6>::from_column_slice(&[
            self.sigma_p.powi(2),
            self.sigma_p.powi(2),
            self.sigma_p.powi(2),
            self.sigma_o.powi(2),
            self.sigma_o.powi(2),
            self.sigma_o.powi(2),
        ]));
        FilterConfig::new(dt, white_jerk_noise(dt, self.q_pos, self.q_ori), r)
    }

    /// Track initialized at a first measurement: measured components take the
    /// measurement variance, derivatives the configured prior spreads.
    pub fn initial_state(&self, z: &PoseMeasurement) -> FilterState {
        let mut xi = StateVector::zeros();
        xi.fixed_rows_mut::<3>(0).copy_from(&z.p);
        xi.fixed_rows_mut::<3>(ORI).copy_from(&Vector3::from(z.o.as_array()));
        let stds = [
            self.sigma_p,
            self.init_vel_std,
            self.init_acc_std,
            self.sigma_o,
            self.init_ang_vel_std,
            self.init_ang_acc_std,
        ];
        let p = StateMatrix::from_diagonal(&StateVector::from_fn(|i, _| stds[i / 3].powi(2)));
        FilterState { xi, p }
    }
}

/// Scalar triple-integrator transition `[[1, dt, dt²/2], [0, 1, dt], [0, 0, 1]]`.
fn scalar_transition(dt: f64) -> SMatrix<f64, 3, 3> {
    SMatrix::<f64, 3, 3>::new(1.0, dt, 0.5 * dt * dt, 0.0, 1.0, dt, 0.0, 0.0, 1.0)
}

/// Places `b ⊗ I₃` on both diagonal blocks of an 18×18 matrix.
fn block_kron(b: &SMatrix<f64, 3, 3>, scale_pos: f64, scale_ori: f64) -> StateMatrix {
    let mut a = StateMatrix::zeros();
    for (offset, scale) in [(0, scale_pos), (ORI, scale_ori)] {
        for r in 0..3 {
            for c in 0..3 {
                for axis in 0..3 {
                    a[(offset + 3 * r + axis, offset + 3 * c + axis)] = scale * b[(r, c)];
                }
            }
        }
    }
    a
}

/// Transition matrix `A = diag(B ⊗ I₃, B ⊗ I₃)`.
pub fn process_model(dt: f64) -> StateMatrix {
    block_kron(&scalar_transition(dt), 1.0, 1.0)
}

/// Discrete covariance of continuous white jerk with densities `q_pos`, `q_ori`.
pub fn white_jerk_noise(dt: f64, q_pos: f64, q_ori: f64) -> StateMatrix {
    let (t2, t3) = (dt * dt, dt * dt * dt);
    let (t4, t5) = (t3 * dt, t3 * t2);
    let b = SMatrix::<f64, 3, 3>::new(
        t5 / 20.0,
        t4 / 8.0,
        t3 / 6.0,
        t4 / 8.0,
        t3 / 3.0,
        t2 / 2.0,
        t3 / 6.0,
        t2 / 2.0,
        dt,
    );
    block_kron(&b, q_pos, q_ori)
}

/// 6×18 selector of the measured position and angle components.
pub fn measurement_matrix() -> MeasSelector {
    let mut h = MeasSelector::zeros();
    for i in 0..3 {
        h[(i, i)] = 1.0;
        h[(3 + i, ORI + i)] = 1.0;
    }
    h
}

fn wrap_orientation(xi: &mut StateVector) {
    for i in ORI..ORI + 3 {
        xi[i] = wrap_angle(xi[i]);
    }
}

fn symmetrize(p: &StateMatrix) -> StateMatrix {
    (p + p.transpose()) * 0.5
}

pub fn predict(state: &FilterState, cfg: &FilterConfig) -> FilterState {
    let a = process_model(cfg.dt);
    let mut xi = a * state.xi;
    wrap_orientation(&mut xi);
    let p = symmetrize(&(a * state.p * a.transpose() + cfg.process_noise_cov));
    FilterState { xi, p }
}

pub fn update(state: &FilterState, z: &PoseMeasurement, cfg: &FilterConfig) -> Result<FilterState, FilterError> {
    if !z.is_finite() {
        return Err(FilterError::NonFiniteMeasurement);
    }
    let h = measurement_matrix();
    let mut nu = z.vector() - h * state.xi;
    for i in 3..6 {
        nu[i] = wrap_angle(nu[i]);
    }
    let s = h * state.p * h.transpose() + cfg.meas_noise_cov;
    let s_inv = s.try_inverse().ok_or(FilterError::SingularInnovation)?;
    if s_inv.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::SingularInnovation);
    }
    let k = state.p * h.transpose() * s_inv;
    let mut xi = state.xi + k * nu;
    wrap_orientation(&mut xi);
    let p = symmetrize(&((StateMatrix::identity() - k * h) * state.p));
    Ok(FilterState { xi, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Uninitialized,
    Tracking,
    Coasting,
}

/// One filtered object track driven by timestamped measurements and dropouts.
///
/// Measurements describe the object `latency` seconds before their timestamp,
/// so the filter runs on the delayed clock and [`Tracker::estimate_at`]
/// extrapolates the mean forward to the requested time.
#[derive(Debug, Clone)]
pub struct Tracker {
    tuning: FilterTuning,
    latency: f64,
    state: Option<FilterState>,
    filter_time: f64,
    dropouts: u32,
}

impl Tracker {
    pub fn new(tuning: FilterTuning, latency: f64) -> Self {
        Self { tuning, latency, state: None, filter_time: 0.0, dropouts: 0 }
    }

    pub fn status(&self) -> TrackStatus {
        match self.state {
            None => TrackStatus::Uninitialized,
            Some(_) if self.dropouts >= COAST_AFTER => TrackStatus::Coasting,
            Some(_) => TrackStatus::Tracking,
        }
    }

    pub fn state(&self) -> Option<&FilterState> {
        self.state.as_ref()
    }

    /// Time the filter state refers to.
    pub fn filter_time(&self) -> f64 {
        self.filter_time
    }

    pub fn consecutive_dropouts(&self) -> u32 {
        self.dropouts
    }

    pub fn reset(&mut self) {
        self.state = None;
        self.dropouts = 0;
    }

    fn predict_to(&mut self, t: f64) -> Result<(), FilterError> {
        let Some(state) = &self.state else { return Ok(()) };
        let dt = t - self.filter_time;
        if dt < 0.0 {
            return Err(FilterError::OutOfOrder { t, filter_t: self.filter_time });
        }
        if dt > 0.0 {
            self.state = Some(predict(state, &self.tuning.config(dt)?));
            self.filter_time = t;
        }
        Ok(())
    }

    pub fn on_measurement(&mut self, z: &PoseMeasurement) -> Result<(), FilterError> {
        if !z.is_finite() {
            return Err(FilterError::NonFiniteMeasurement);
        }
        let t = z.timestamp - self.latency;
        match &self.state {
            None => {
                self.state = Some(self.tuning.initial_state(z));
                self.filter_time = t;
            }
            Some(_) => {
                self.predict_to(t)?;
                let cfg = self.tuning.config(1.0)?;
                let state = self.state.as_ref().expect("initialized");
                self.state = Some(update(state, z, &cfg)?);
            }
        }
        self.dropouts = 0;
        Ok(())
    }

    /// Predict-only step for a missed measurement at `timestamp`.
    pub fn on_dropout(&mut self, timestamp: f64) -> Result<(), FilterError> {
        if self.state.is_some() {
            self.predict_to(timestamp - self.latency)?;
            self.dropouts += 1;
        }
        Ok(())
    }

    /// Latency-compensated pose estimate at time `t`.
    pub fn estimate_at(&self, t: f64) -> Option<Pose> {
        let state = self.state.as_ref()?;
        let xi = state.extrapolated_mean(t - self.filter_time);
        Some(FilterState { xi, p: state.p }.pose())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct PoseRow {
    t: f64,
    px: f64,
    py: f64,
    pz: f64,
    roll: f64,
    pitch: f64,
    yaw: f64,
}

/// Filters a measurement table (`t, px, py, pz, roll, pitch, yaw`, header
/// required) and writes the estimates at each row's time in the same schema.
/// Rows with any non-finite value are treated as dropouts.
pub fn filter_table<R: Read, W: Write>(input: R, output: W, tuning: &FilterTuning) -> Result<usize, FilterError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let mut writer = csv::Writer::from_writer(output);
    let mut tracker = Tracker::new(*tuning, 0.0);
    let mut rows = 0;
    for record in reader.deserialize::<PoseRow>() {
        let r = record?;
        let z = PoseMeasurement {
            p: Vector3::new(r.px, r.py, r.pz),
            o: EulerAngles::new(r.roll, r.pitch, r.yaw),
            timestamp: r.t,
        };
        if z.is_finite() {
            tracker.on_measurement(&z)?;
        } else if r.t.is_finite() {
            tracker.on_dropout(r.t)?;
        } else {
            continue;
        }
        if let Some(pose) = tracker.estimate_at(r.t) {
            let [roll, pitch, yaw] = pose.euler().as_array();
            writer.serialize(PoseRow { t: r.t, px: pose.p.x, py: pose.p.y, pz: pose.p.z, roll, pitch, yaw })?;
            rows += 1;
        }
    }
    writer.flush().map_err(|e| FilterError::Csv(e.to_string()))?;
    Ok(rows)
}
