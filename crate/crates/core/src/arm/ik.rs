//! Multi-start damped least-squares inverse kinematics.
//!
//! Every seed is iterated to convergence independently; among the converged,
//! in-limit candidates the one closest to the caller's seed (weighted squared
//! joint distance) wins, which keeps consecutive solutions on the same branch.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::RobotModel;
use crate::geom::{pose_distance, rotation_log, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IkError {
    #[error("no IK candidate converged")]
    Unreachable,
    #[error("every converged IK candidate violates the joint limits")]
    OutOfLimits,
    #[error("seed has {got} joints, model has {expected}")]
    SeedDimension { expected: usize, got: usize },
    #[error("target pose is not finite")]
    NonFiniteTarget,
}

/// What the end effector must reach.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IkTarget {
    Pose(Pose),
    /// Tool-point position only; orientation is free.
    Position(Vector3<f64>),
}

impl From<Pose> for IkTarget {
    fn from(p: Pose) -> Self {
        IkTarget::Pose(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkConfig {
    pub damping: f64,
    pub max_iterations: usize,
    pub seeds: usize,
    pub position_tolerance: f64,
    pub angle_tolerance: f64,
    /// Largest joint step per iteration, rad.
    pub max_step: f64,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self {
            damping: 1e-3,
            max_iterations: 200,
            seeds: 8,
            position_tolerance: 1e-6,
            angle_tolerance: 1e-6,
            max_step: 0.5,
        }
    }
}

impl RobotModel {
    /// Solves IK for `target`, preferring the solution nearest to `q_seed`.
    pub fn inverse_kinematics(
        &self,
        target: &IkTarget,
        q_seed: &[f64],
        cfg: &IkConfig,
    ) -> Result<DVector<f64>, IkError> {
        let n = self.dof();
        if q_seed.len() != n {
            return Err(IkError::SeedDimension { expected: n, got: q_seed.len() });
        }
        let finite = match target {
            IkTarget::Pose(p) => p.is_finite(),
            IkTarget::Position(p) => p.iter().all(|v| v.is_finite()),
        };
        if !finite {
            return Err(IkError::NonFiniteTarget);
        }

        let mut any_converged = false;
        let mut best: Option<(f64, DVector<f64>)> = None;
        for seed in self.ik_seeds(q_seed, cfg.seeds) {
            let Some(q) = self.dls_solve(target, seed, cfg) else {
                continue;
            };
            any_converged = true;
            let Some(q) = self.into_limits(q) else {
                continue;
            };
            let cost = weighted_distance(self.ik_weights(), &q, q_seed);
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, q));
            }
        }
        match best {
            Some((_, q)) => Ok(q),
            None if any_converged => Err(IkError::OutOfLimits),
            None => Err(IkError::Unreachable),
        }
    }

    /// The caller's seed followed by deterministic spreads over the joint ranges.
    fn ik_seeds(&self, q_seed: &[f64], count: usize) -> Vec<DVector<f64>> {
        const STEPS: [f64; 7] = [0.5, 0.25, 0.75, 0.125, 0.625, 0.375, 0.875];
        let mut seeds = vec![DVector::from_column_slice(q_seed)];
        for s in 0..count.saturating_sub(1) {
            let q = DVector::from_iterator(
                self.dof(),
                self.limits().enumerate().map(|(j, l)| {
                    let frac = (STEPS[s % STEPS.len()] + 0.381966 * j as f64 * (s as f64 + 1.0)).fract();
                    l.q_min + (l.q_max - l.q_min) * (0.05 + 0.9 * frac)
                }),
            );
            seeds.push(q);
        }
        seeds
    }

    fn dls_solve(&self, target: &IkTarget, mut q: DVector<f64>, cfg: &IkConfig) -> Option<DVector<f64>> {
        let lambda2 = cfg.damping * cfg.damping;
        for _ in 0..=cfg.max_iterations {
            let frames = self.frames(q.as_slice());
            let current = frames.tool;
            let jac_full = frames.point_jacobian(self.dof() - 1, &current.p);
            let (err, jac) = match target {
                IkTarget::Pose(t) => {
                    let (dp, da) = pose_distance(&current, t);
                    if dp <= cfg.position_tolerance && da <= cfg.angle_tolerance {
                        return Some(q);
                    }
                    let ep = t.p - current.p;
                    let ew = rotation_log(&(t.r * current.r.transpose()));
                    let err = DVector::from_iterator(6, ep.iter().chain(ew.iter()).copied());
                    (err, jac_full)
                }
                IkTarget::Position(p) => {
                    let ep = p - current.p;
                    if ep.norm() <= cfg.position_tolerance {
                        return Some(q);
                    }
                    (DVector::from_column_slice(ep.as_slice()), jac_full.rows(0, 3).into_owned())
                }
            };
            let jjt = &jac * jac.transpose() + DMatrix::identity(jac.nrows(), jac.nrows()) * lambda2;
            let y = jjt.cholesky()?.solve(&err);
            let mut step = jac.transpose() * y;
            let norm = step.amax();
            if norm > cfg.max_step {
                step *= cfg.max_step / norm;
            }
            q += step;
            if q.iter().any(|v| !v.is_finite()) {
                return None;
            }
        }
        None
    }

    /// Shifts joints by whole turns to land inside their limits, if possible.
    fn into_limits(&self, mut q: DVector<f64>) -> Option<DVector<f64>> {
        for (v, l) in q.iter_mut().zip(self.limits()) {
            if *v < l.q_min || *v > l.q_max {
                let mid = 0.5 * (l.q_min + l.q_max);
                *v -= ((*v - mid) / TAU).round() * TAU;
            }
            if *v < l.q_min || *v > l.q_max {
                return None;
            }
        }
        Some(q)
    }
}

/// `Σ wᵢ (aᵢ − bᵢ)²`.
pub fn weighted_distance(w: &[f64], a: &DVector<f64>, b: &[f64]) -> f64 {
    w.iter()
        .zip(a.iter().zip(b))
        .map(|(w, (x, y))| w * (x - y) * (x - y))
        .sum()
}
