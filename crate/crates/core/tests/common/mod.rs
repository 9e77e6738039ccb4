//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use graspflow::filter::{
    predict, process_model, update, FilterState, FilterTuning, PoseMeasurement, StateMatrix, StateVector, ORI,
};
use graspflow::geom::{wrap_angle, EulerAngles};
use graspflow::servo::{computed_torque, feedback_accel, plant_step, PlantState, ServoGains, ServoReference};
use graspflow::arm::RobotModel;
use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// One step of `q''' = u(τ)` with linearly interpolated jerk, via RK4 with
/// fine substeps (exact for this polynomial right-hand side).
fn integrate(h: f64, x: [f64; 3], u0: f64, u1: f64) -> [f64; 3] {
    let f = |t: f64, s: [f64; 3]| [s[1], s[2], u0 + (u1 - u0) * t / h];
    let steps = 8;
    let dt = h / steps as f64;
    let mut s = x;
    for i in 0..steps {
        let t = i as f64 * dt;
        let add = |a: [f64; 3], b: [f64; 3], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2]];
        let k1 = f(t, s);
        let k2 = f(t + dt / 2.0, add(s, k1, dt / 2.0));
        let k3 = f(t + dt / 2.0, add(s, k2, dt / 2.0));
        let k4 = f(t + dt, add(s, k3, dt));
        for d in 0..3 {
            s[d] += dt / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
        }
    }
    s
}

/// Columns of the step map with respect to (x, u_k, u_{k+1}).
pub fn step_matrices(h: f64) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let mut phi = DMatrix::zeros(3, 3);
    for c in 0..3 {
        let mut e = [0.0; 3];
        e[c] = 1.0;
        let col = integrate(h, e, 0.0, 0.0);
        for r in 0..3 {
            phi[(r, c)] = col[r];
        }
    }
    let g1 = DVector::from_row_slice(&integrate(h, [0.0; 3], 1.0, 0.0));
    let g2 = DVector::from_row_slice(&integrate(h, [0.0; 3], 0.0, 1.0));
    (phi, g1, g2)
}

/// Minimizes `Σ_k w (q_k − goal)² + Σ_k u_k²` subject to dynamics, head,
/// rest at the end, zero terminal input and optional `q_{N−1} = pin`.
pub fn dense_oracle(n: usize, h: f64, q0: f64, goal: f64, w: f64, pin: Option<f64>) -> Vec<f64> {
    let (phi, g1, g2) = step_matrices(h);
    let nv = 4 * n; // x_k at 3k.., u_k at 3n + k
    let xi = |k: usize, d: usize| 3 * k + d;
    let ui = |k: usize| 3 * n + k;
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    rows.push((vec![(xi(0, 0), 1.0)], q0));
    rows.push((vec![(xi(0, 1), 1.0)], 0.0));
    rows.push((vec![(xi(0, 2), 1.0)], 0.0));
    rows.push((vec![(ui(0), 1.0)], 0.0));
    for k in 0..n - 1 {
        for r in 0..3 {
            let mut row = vec![(xi(k + 1, r), -1.0), (ui(k), g1[r]), (ui(k + 1), g2[r])];
            for c in 0..3 {
                row.push((xi(k, c), phi[(r, c)]));
            }
            rows.push((row, 0.0));
        }
    }
    rows.push((vec![(xi(n - 1, 1), 1.0)], 0.0));
    rows.push((vec![(xi(n - 1, 2), 1.0)], 0.0));
    rows.push((vec![(ui(n - 1), 1.0)], 0.0));
    if let Some(p) = pin {
        rows.push((vec![(xi(n - 1, 0), 1.0)], p));
    }
    let ne = rows.len();
    let mut kkt = DMatrix::zeros(nv + ne, nv + ne);
    let mut rhs = DVector::zeros(nv + ne);
    for k in 0..n {
        kkt[(xi(k, 0), xi(k, 0))] = 2.0 * w;
        rhs[xi(k, 0)] = 2.0 * w * goal;
        kkt[(ui(k), ui(k))] = 2.0;
    }
    for (i, (row, b)) in rows.iter().enumerate() {
        for &(c, v) in row {
            kkt[(nv + i, c)] += v;
            kkt[(c, nv + i)] += v;
        }
        rhs[nv + i] = *b;
    }
    let sol = kkt.lu().solve(&rhs).expect("KKT system is nonsingular");
    (0..n).map(|k| sol[ui(k)]).collect()
}

/// Final state of the triple integrator from rest at `q0` under knot inputs `u`.
pub fn propagate(h: f64, q0: f64, u: &[f64]) -> Vec<[f64; 3]> {
    let (phi, g1, g2) = step_matrices(h);
    let mut x = DVector::from_row_slice(&[q0, 0.0, 0.0]);
    let mut out = vec![[x[0], x[1], x[2]]];
    for k in 0..u.len() - 1 {
        x = &phi * &x + &g1 * u[k] + &g2 * u[k + 1];
        out.push([x[0], x[1], x[2]]);
    }
    out
}

/// The oracle's objective `Σ w (q_k − goal)² + Σ u_k²` for inputs `u`.
pub fn oracle_cost(h: f64, q0: f64, goal: f64, w: f64, u: &[f64]) -> f64 {
    let xs = propagate(h, q0, u);
    xs.iter().map(|x| w * (x[0] - goal).powi(2)).sum::<f64>() + u.iter().map(|v| v * v).sum::<f64>()
}

fn gaussian(rng: &mut ChaCha8Rng, cov: &StateMatrix) -> StateVector {
    let l = cov.cholesky().expect("covariance must be SPD").l();
    let w = StateVector::from_fn(|_, _| StandardNormal.sample(rng));
    l * w
}

fn nees(err: &StateVector, p: &StateMatrix) -> f64 {
    err.dot(&(p.cholesky().unwrap().solve(err)))
}

/// Fraction of steps whose NEES lies in the two-sided 95% chi-square band,
/// over `runs` Monte-Carlo runs of 100 steps on the filter's own model.
pub fn nees_in_band_fraction(runs: usize, seed: u64) -> f64 {
    let chi = ChiSquared::new(18.0).unwrap();
    let (lo, hi) = (chi.inverse_cdf(0.025), chi.inverse_cdf(0.975));
    let tuning = FilterTuning::default();
    let dt = 1.0 / 30.0;
    let cfg = tuning.config(dt).unwrap();
    let a = process_model(dt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (mut inside, mut total) = (0usize, 0usize);
    for _ in 0..runs {
        let z0 = PoseMeasurement { p: Vector3::new(0.5, 0.0, 0.2), o: EulerAngles::zero(), timestamp: 0.0 };
        let mut est = tuning.initial_state(&z0);
        let mut truth = est.xi + gaussian(&mut rng, &est.p);
        for _ in 0..100 {
            truth = a * truth + gaussian(&mut rng, &cfg.process_noise_cov);
            est = predict(&est, &cfg);
            let noise: [f64; 6] = std::array::from_fn(|i| {
                let s: f64 = StandardNormal.sample(&mut rng);
                s * if i < 3 { tuning.sigma_p } else { tuning.sigma_o }
            });
            let z = PoseMeasurement {
                p: Vector3::new(truth[0] + noise[0], truth[1] + noise[1], truth[2] + noise[2]),
                o: EulerAngles::new(truth[ORI] + noise[3], truth[ORI + 1] + noise[4], truth[ORI + 2] + noise[5]),
                timestamp: 0.0,
            };
            est = update(&est, &z, &cfg).unwrap();
            let mut err = truth - est.xi;
            for i in ORI..ORI + 3 {
                err[i] = wrap_angle(err[i]);
            }
            let e = nees(&err, &est.p);
            total += 1;
            if e >= lo && e <= hi {
                inside += 1;
            }
        }
    }
    inside as f64 / total as f64
}

/// Position RMSE of filtered and raw estimates on a constant-velocity object.
pub fn constant_velocity_rmse(seed: u64) -> (f64, f64) {
    let tuning = FilterTuning::default();
    let dt = 1.0 / 30.0;
    let cfg = tuning.config(dt).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Vector3::new(0.05, -0.03, 0.02);
    let p0 = Vector3::new(0.5, 0.1, 0.2);
    let mut est: Option<FilterState> = None;
    let (mut raw_sq, mut filt_sq) = (0.0, 0.0);
    let steps = 600;
    for k in 0..steps {
        let truth = p0 + v * (k as f64 * dt);
        let noise = Vector3::from_fn(|_, _| {
            let s: f64 = StandardNormal.sample(&mut rng);
            s * tuning.sigma_p
        });
        let z = PoseMeasurement { p: truth + noise, o: EulerAngles::new(0.0, 0.0, 0.3), timestamp: k as f64 * dt };
        est = Some(match est {
            None => tuning.initial_state(&z),
            Some(s) => update(&predict(&s, &cfg), &z, &cfg).unwrap(),
        });
        raw_sq += noise.norm_squared();
        filt_sq += (est.as_ref().unwrap().position() - truth).norm_squared();
    }
    ((filt_sq / steps as f64).sqrt(), (raw_sq / steps as f64).sqrt())
}

/// Least-squares slope of `log |(e, ė)|` over 2 s of computed-torque
/// regulation from a 0.2 rad offset with the exact model, and the slowest
/// decay rate implied by the gains. Only samples from `from` seconds on and
/// above `floor` (where rounding dominates) enter the fit.
pub fn regulation_decay(
    model: &RobotModel,
    gains: &ServoGains,
    target: &DVector<f64>,
    from: f64,
    floor: f64,
) -> (f64, f64) {
    let reference = ServoReference::hold(target.clone());
    let mut state = PlantState::at_rest(target.add_scalar(0.2));
    let (mut ts, mut logs) = (Vec::new(), Vec::new());
    for k in 0..2000 {
        let e = &state.q - target;
        let norm = (e.norm_squared() + state.qd.norm_squared()).sqrt();
        let t = k as f64 * 1e-3;
        if norm > floor && t >= from {
            ts.push(t);
            logs.push(norm.ln());
        }
        let u = feedback_accel(&reference, &state.q, &state.qd, gains);
        let tau = computed_torque(model, &state.q, &state.qd, &u);
        state = plant_step(model, &state, &tau, 1e-3).unwrap();
    }
    let n = ts.len() as f64;
    let (mt, ml) = (ts.iter().sum::<f64>() / n, logs.iter().sum::<f64>() / n);
    let cov: f64 = ts.iter().zip(&logs).map(|(t, l)| (t - mt) * (l - ml)).sum();
    let var: f64 = ts.iter().map(|t| (t - mt) * (t - mt)).sum();
    (cov / var, gains.slowest_decay_rate())
}

/// Largest deviation of a trajectory's knots from the numerically integrated
/// per-joint dynamics.
pub fn knot_residual(traj: &graspflow::trajopt::Trajectory) -> f64 {
    let (phi, g1, g2) = step_matrices(traj.h);
    let mut worst = 0.0_f64;
    for pair in traj.knots.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        for j in 0..a.u.len() {
            let x = DVector::from_row_slice(&[a.x.q[j], a.x.qd[j], a.x.qdd[j]]);
            let next = &phi * x + &g1 * a.u[j] + &g2 * b.u[j];
            let got = [b.x.q[j], b.x.qd[j], b.x.qdd[j]];
            for d in 0..3 {
                worst = worst.max((next[d] - got[d]).abs());
            }
        }
    }
    worst
}
