//! Central finite-difference check of the analytic loss gradient.
//!
//! The loss here is re-derived directly from its definition with the value
//! targets frozen at the unperturbed parameters, so the check does not share
//! the target or backward code it is verifying.

use rand::Rng;

use super::{LossHyper, NetworkParams, LOG_FLOOR};
use crate::error::Result;
use crate::gridworld::{Action, Cell};
use crate::training::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation flipped a ReLU.
    pub skipped_kinks: usize,
}

/// Denominator floor for the relative error, so coordinates with a
/// vanishing gradient are judged on absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-6;

fn frozen_targets(batch: &[Trajectory], params: &NetworkParams, hyper: &LossHyper) -> Vec<Vec<f64>> {
    let v = |c: Cell| params.forward_cell(c).expect("finite").value;
    batch
        .iter()
        .map(|traj| {
            let l = traj.rewards.len();
            (0..l)
                .map(|t| {
                    let mut y = 0.0;
                    for i in 0..hyper.n_steps {
                        if t + i < l {
                            y += hyper.discount.powi(i as i32) * traj.rewards[t + i];
                        }
                    }
                    if t + hyper.n_steps < l {
                        y += hyper.discount.powi(hyper.n_steps as i32) * v(traj.states[t + hyper.n_steps]);
                    } else if traj.truncated {
                        y += hyper.discount.powi((l - t) as i32) * v(traj.states[l]);
                    }
                    y
                })
                .collect()
        })
        .collect()
}

fn loss_with_targets(
    batch: &[Trajectory],
    targets: &[Vec<f64>],
    params: &NetworkParams,
    hyper: &LossHyper,
) -> f64 {
    let mut value = 0.0;
    let mut policy = 0.0;
    let mut steps = 0usize;
    for (traj, ys) in batch.iter().zip(targets) {
        for (t, y) in ys.iter().enumerate() {
            let out = params.forward_cell(traj.states[t]).expect("finite");
            value += (out.value - y).powi(2);
            for (p, pi) in out.policy.iter().zip(&traj.search_policies[t]) {
                if *pi > 0.0 {
                    policy -= pi * p.max(LOG_FLOOR).ln();
                }
            }
            steps += 1;
        }
    }
    hyper.value_weight * value / batch.len() as f64 + hyper.policy_weight * policy / steps as f64
}

fn relu_pattern(batch: &[Trajectory], params: &NetworkParams) -> Vec<bool> {
    let mut out = Vec::new();
    for traj in batch {
        for &s in &traj.states {
            let acts = params
                .forward_cached(params.encoding.encode(s))
                .expect("finite");
            for layer in &acts.layers[1..] {
                out.extend(layer.iter().map(|&h| h > 0.0));
            }
        }
    }
    out
}

/// Compares every analytic partial derivative against
/// `(L(θ + h e_i) - L(θ - h e_i)) / 2h`.
pub fn check(
    batch: &[Trajectory],
    params: &NetworkParams,
    hyper: &LossHyper,
    step: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = super::gradients(batch, params, hyper)?;
    let targets = frozen_targets(batch, params, hyper);
    let analytic: Vec<f64> = analytic.slices().concat();

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut flat = 0;
    let num_slices = probe.slices().len();
    for s in 0..num_slices {
        let len = probe.slices()[s].len();
        for i in 0..len {
            let original = probe.slices()[s][i];
            probe.slices_mut()[s][i] = original + step;
            let plus = loss_with_targets(batch, &targets, &probe, hyper);
            let plus_pattern = relu_pattern(batch, &probe);
            probe.slices_mut()[s][i] = original - step;
            let minus = loss_with_targets(batch, &targets, &probe, hyper);
            let minus_pattern = relu_pattern(batch, &probe);
            probe.slices_mut()[s][i] = original;

            if plus_pattern != minus_pattern {
                report.skipped_kinks += 1;
            } else {
                let numeric = (plus - minus) / (2.0 * step);
                let a = analytic[flat];
                let denom = a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
                let rel = (a - numeric).abs() / denom;
                report.max_relative_error = report.max_relative_error.max(rel);
                report.checked += 1;
            }
            flat += 1;
        }
    }
    Ok(report)
}

/// A random batch of episodes over an 8x8 grid, for gradient checks.
/// Odd-indexed episodes end at a goal; even ones are truncated.
pub fn random_batch<R: Rng + ?Sized>(rng: &mut R, episodes: usize, max_len: usize) -> Vec<Trajectory> {
    (0..episodes)
        .map(|j| {
            let len = rng.random_range(1..=max_len.max(1));
            let truncated = j % 2 == 0;
            let states = (0..=len)
                .map(|_| Cell::new(rng.random_range(0..8), rng.random_range(0..8)))
                .collect();
            let mut rewards = vec![0.0; len];
            if !truncated {
                rewards[len - 1] = 1.0;
            }
            let search_policies = (0..len)
                .map(|_| {
                    let mut p = [0.0f64; 4].map(|_| rng.random_range(0.0..1.0));
                    // Some zero entries, as visit-count policies have.
                    p[rng.random_range(0..4)] = 0.0;
                    let s: f64 = p.iter().sum::<f64>().max(1e-12);
                    p.map(|x| x / s)
                })
                .collect();
            Trajectory {
                states,
                actions: (0..len).map(|_| Action::ALL[rng.random_range(0..4)]).collect(),
                rewards,
                search_policies,
                truncated,
            }
        })
        .collect()
}
