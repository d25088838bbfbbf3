//! The AlphaZero training objective: a weighted sum of an n-step value
//! regression and a cross-entropy towards the stored search policies.

use serde::{Deserialize, Serialize};

use super::{log_softmax, Activations, NetworkParams, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::training::Trajectory;

/// Probabilities below this are clamped before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossHyper {
    pub value_weight: f64,
    pub policy_weight: f64,
    pub n_steps: usize,
    pub discount: f64,
}

impl Default for LossHyper {
    fn default() -> Self {
        LossHyper {
            value_weight: 0.7,
            policy_weight: 0.3,
            n_steps: 2,
            discount: 0.95,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub value_loss: f64,
    pub policy_loss: f64,
}

impl LossBreakdown {
    fn new(value_loss: f64, policy_loss: f64, hyper: &LossHyper) -> Self {
        LossBreakdown {
            total: hyper.value_weight * value_loss + hyper.policy_weight * policy_loss,
            value_loss,
            policy_loss,
        }
    }
}

/// Bootstrapped targets from the values of every state in the trajectory.
///
/// `values[t]` must be the current estimate for `states[t]`, including the
/// final state. A target bootstraps only when the episode is still running at
/// `t + k`, where `k = min(n, l - t)`; a truncated episode keeps the bootstrap
/// from its last state.
fn targets_from_values(traj: &Trajectory, values: &[f64], n: usize, discount: f64) -> Vec<f64> {
    let l = traj.len();
    (0..l)
        .map(|t| {
            let k = n.min(l - t);
            let mut acc = 0.0;
            let mut scale = 1.0;
            for r in &traj.rewards[t..t + k] {
                acc += scale * r;
                scale *= discount;
            }
            if t + k < l || traj.truncated {
                acc += scale * values[t + k];
            }
            acc
        })
        .collect()
}

fn validate_trajectory(traj: &Trajectory) -> Result<()> {
    traj.validate()?;
    if traj.len() == 0 {
        return Err(Error::InvalidArgument("trajectory has no transitions".into()));
    }
    Ok(())
}

/// n-step value targets for every non-final state of `traj`.
pub fn n_step_targets(
    traj: &Trajectory,
    n: usize,
    discount: f64,
    params: &NetworkParams,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    validate_trajectory(traj)?;
    let values = traj
        .states
        .iter()
        .map(|&s| params.forward_cell(s).map(|o| o.value))
        .collect::<Result<Vec<_>>>()?;
    Ok(targets_from_values(traj, &values, n, discount))
}

/// Cross-entropy `-sum_a target(a) log p(a)` and its gradient with respect to
/// the logits. Clamped terms contribute a constant and no gradient.
fn cross_entropy(
    logits: &[f64; NUM_ACTIONS],
    probs: &[f64; NUM_ACTIONS],
    target: &[f64; NUM_ACTIONS],
) -> (f64, [f64; NUM_ACTIONS]) {
    let floor = LOG_FLOOR.ln();
    let logp = log_softmax(logits);
    let mut loss = 0.0;
    let mut grad = [0.0; NUM_ACTIONS];
    for a in 0..NUM_ACTIONS {
        if target[a] == 0.0 {
            continue;
        }
        if logp[a] < floor {
            loss -= target[a] * floor;
            continue;
        }
        loss -= target[a] * logp[a];
        for (b, g) in grad.iter_mut().enumerate() {
            let indicator = if a == b { 1.0 } else { 0.0 };
            *g += target[a] * (probs[b] - indicator);
        }
    }
    (loss, grad)
}

struct Pass {
    loss: LossBreakdown,
    grads: Option<NetworkParams>,
}

fn run(
    batch: &[Trajectory],
    params: &NetworkParams,
    hyper: &LossHyper,
    want_grads: bool,
) -> Result<Pass> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if hyper.n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    for traj in batch {
        validate_trajectory(traj)?;
    }
    let m = batch.len() as f64;
    let total_steps: usize = batch.iter().map(Trajectory::len).sum();
    let steps = total_steps as f64;

    let mut grads = want_grads.then(|| params.zeros_like());
    let mut value_loss = 0.0;
    let mut policy_loss = 0.0;

    for traj in batch {
        let acts: Vec<Activations> = traj
            .states
            .iter()
            .map(|&s| params.forward_cached(params.encoding.encode(s)))
            .collect::<Result<_>>()?;
        let values: Vec<f64> = acts.iter().map(|a| a.output.value).collect();
        let targets = targets_from_values(traj, &values, hyper.n_steps, hyper.discount);

        let mut sq = 0.0;
        for (t, target) in targets.iter().enumerate() {
            let act = &acts[t];
            let err = act.output.value - target;
            sq += err * err;
            let (ce, d_logits) =
                cross_entropy(&act.logits, &act.output.policy, &traj.search_policies[t]);
            policy_loss += ce;
            if let Some(g) = grads.as_mut() {
                let d_value = hyper.value_weight * 2.0 * err / m;
                let d_logits = d_logits.map(|d| hyper.policy_weight * d / steps);
                params.backward(act, d_value, &d_logits, g);
            }
        }
        value_loss += sq;
    }

    Ok(Pass {
        loss: LossBreakdown::new(value_loss / m, policy_loss / steps, hyper),
        grads,
    })
}

/// The weighted loss over a batch of stored episodes.
///
/// The value term is the squared error summed along each episode and
/// averaged over episodes; the policy term is the cross-entropy averaged over
/// every step in the batch.
pub fn compute_loss(
    batch: &[Trajectory],
    params: &NetworkParams,
    hyper: &LossHyper,
) -> Result<LossBreakdown> {
    run(batch, params, hyper, false).map(|p| p.loss)
}

/// Loss and its exact gradient. Value targets are held constant.
pub fn gradients(
    batch: &[Trajectory],
    params: &NetworkParams,
    hyper: &LossHyper,
) -> Result<(LossBreakdown, NetworkParams)> {
    let pass = run(batch, params, hyper, true)?;
    Ok((pass.loss, pass.grads.expect("requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{Action, Cell};
    use crate::net::{Dense, InputEncoding};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(seed: u64) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetworkParams::new(4, 2, InputEncoding::Raw, &mut rng)
    }

    fn random_policy<R: Rng>(rng: &mut R) -> [f64; 4] {
        let mut p = [0.0; 4].map(|_: f64| rng.random_range(0.05..1.0));
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
        p
    }

    fn random_trajectory<R: Rng>(rng: &mut R, len: usize, truncated: bool) -> Trajectory {
        let states = (0..=len)
            .map(|_| Cell::new(rng.random_range(0..8), rng.random_range(0..8)))
            .collect();
        let mut rewards: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
        if !truncated {
            *rewards.last_mut().unwrap() = 1.0;
        }
        Trajectory {
            states,
            actions: (0..len).map(|i| Action::ALL[i % 4]).collect(),
            rewards,
            search_policies: (0..len).map(|_| random_policy(rng)).collect(),
            truncated,
        }
    }

    /// Literal reading of the target definition, one term at a time.
    fn target_oracle(traj: &Trajectory, t: usize, n: usize, gamma: f64, v: &dyn Fn(Cell) -> f64) -> f64 {
        let l = traj.rewards.len();
        let mut sum = 0.0;
        for i in 0..n {
            let r = if t + i < l { traj.rewards[t + i] } else { 0.0 };
            sum += gamma.powi(i as i32) * r;
        }
        if t + n < l {
            sum += gamma.powi(n as i32) * v(traj.states[t + n]);
        } else if traj.truncated {
            // Bootstrap from the last observed state.
            sum += gamma.powi((l - t) as i32) * v(traj.states[l]);
        }
        sum
    }

    #[test]
    fn terminal_two_step_episode() {
        let traj = Trajectory {
            states: vec![Cell::new(6, 6), Cell::new(6, 7), Cell::new(7, 7)],
            actions: vec![Action::Right, Action::Down],
            rewards: vec![0.0, 1.0],
            search_policies: vec![[0.25; 4]; 2],
            truncated: false,
        };
        let y = n_step_targets(&traj, 2, 0.95, &random_net(0)).unwrap();
        assert!((y[0] - 0.95).abs() < 1e-15);
        assert_eq!(y[1], 1.0);
    }

    #[test]
    fn one_step_bootstrap() {
        let net = random_net(3);
        let traj = Trajectory {
            states: vec![Cell::new(0, 0), Cell::new(0, 1), Cell::new(0, 2)],
            actions: vec![Action::Right, Action::Right],
            rewards: vec![0.0, 0.0],
            search_policies: vec![[0.25; 4]; 2],
            truncated: true,
        };
        let y = n_step_targets(&traj, 1, 0.95, &net).unwrap();
        let v1 = net.forward_cell(Cell::new(0, 1)).unwrap().value;
        assert!((y[0] - 0.95 * v1).abs() < 1e-15);
    }

    #[test]
    fn targets_match_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..40 {
            let net = random_net(case);
            let truncated = case % 2 == 0;
            let traj = random_trajectory(&mut rng, 5, truncated);
            let v = |c: Cell| net.forward_cell(c).unwrap().value;
            for n in [1, 2, 3, 7] {
                let y = n_step_targets(&traj, n, 0.95, &net).unwrap();
                for t in 0..5 {
                    let expect = target_oracle(&traj, t, n, 0.95, &v);
                    assert!((y[t] - expect).abs() < 1e-12, "case {case} n {n} t {t}");
                }
            }
        }
    }

    #[test]
    fn long_horizon_targets_are_returns_to_go() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let traj = random_trajectory(&mut rng, 6, false);
        let y = n_step_targets(&traj, 10, 0.9, &random_net(1)).unwrap();
        for t in 0..6 {
            let g: f64 = traj.rewards[t..]
                .iter()
                .enumerate()
                .map(|(i, r)| 0.9f64.powi(i as i32) * r)
                .sum();
            assert!((y[t] - g).abs() < 1e-12);
        }
    }

    /// A network with a constant value output and a constant policy.
    fn constant_net(value: f64, logits: [f64; 4]) -> NetworkParams {
        NetworkParams {
            encoding: InputEncoding::Raw,
            hidden: vec![Dense::zeros(2, 3)],
            value_head: Dense {
                inputs: 3,
                outputs: 1,
                weights: vec![0.0; 3],
                bias: vec![value],
            },
            policy_head: Dense {
                inputs: 3,
                outputs: 4,
                weights: vec![0.0; 12],
                bias: logits.to_vec(),
            },
        }
    }

    #[test]
    fn matching_policy_gives_entropy_and_zero_value_loss() {
        // With gamma = 1, n = 1 and zero rewards on a truncated episode every
        // target equals the constant prediction.
        let logits = [0.3, -0.2, 1.0, 0.0];
        let net = constant_net(0.4, logits);
        let pi = crate::net::softmax(&logits);
        let traj = Trajectory {
            states: vec![Cell::new(0, 0), Cell::new(0, 1), Cell::new(1, 1)],
            actions: vec![Action::Right, Action::Down],
            rewards: vec![0.0, 0.0],
            search_policies: vec![pi; 2],
            truncated: true,
        };
        let hyper = LossHyper {
            discount: 1.0,
            n_steps: 1,
            ..LossHyper::default()
        };
        let (loss, grads) = gradients(&[traj], &net, &hyper).unwrap();
        let entropy: f64 = -pi.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!(loss.value_loss.abs() < 1e-15);
        assert!((loss.policy_loss - entropy).abs() < 1e-12);
        assert!(grads.value_head.bias[0].abs() < 1e-15);
        assert!(grads.policy_head.bias.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn single_step_hand_computation() {
        // Constant net: v = 0.5, uniform policy. One terminal step with
        // reward 1: target 1, value loss (0.5 - 1)^2 = 0.25.
        // Policy target (1, 0, 0, 0): CE = ln 4.
        let net = constant_net(0.5, [0.0; 4]);
        let traj = Trajectory {
            states: vec![Cell::new(6, 7), Cell::new(7, 7)],
            actions: vec![Action::Down],
            rewards: vec![1.0],
            search_policies: vec![[1.0, 0.0, 0.0, 0.0]],
            truncated: false,
        };
        let loss = compute_loss(&[traj], &net, &LossHyper::default()).unwrap();
        assert!((loss.value_loss - 0.25).abs() < 1e-15);
        assert!((loss.policy_loss - 4f64.ln()).abs() < 1e-15);
        assert!((loss.total - (0.7 * 0.25 + 0.3 * 4f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn weights_combine_components() {
        let l = LossBreakdown::new(1.0, 2.0, &LossHyper::default());
        assert!((l.total - 1.3).abs() < 1e-12);
    }

    #[test]
    fn dead_relu_unit_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = random_net(4);
        // Unit 0 of the first layer: strongly negative bias and non-positive
        // weights, so it is off for every non-negative grid input.
        net.hidden[0].weights[0] = -1.0;
        net.hidden[0].weights[1] = -1.0;
        net.hidden[0].bias[0] = -5.0;
        let batch: Vec<_> = (0..3).map(|_| random_trajectory(&mut rng, 4, true)).collect();
        let (_, g) = gradients(&batch, &net, &LossHyper::default()).unwrap();
        assert_eq!(&g.hidden[0].weights[0..2], &[0.0, 0.0]);
        assert_eq!(g.hidden[0].bias[0], 0.0);
    }

    #[test]
    fn rejects_empty_batch_and_zero_n() {
        let net = random_net(0);
        assert!(compute_loss(&[], &net, &LossHyper::default()).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = random_trajectory(&mut rng, 2, true);
        let hyper = LossHyper {
            n_steps: 0,
            ..LossHyper::default()
        };
        assert!(compute_loss(&[traj], &net, &hyper).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let hyper = LossHyper::default();
        for case in 0..5 {
            let net = random_net(100 + case);
            let batch = crate::net::gradcheck::random_batch(&mut rng, 3, 6);
            let report = crate::net::gradcheck::check(&batch, &net, &hyper, 1e-5).unwrap();
            assert!(
                report.max_relative_error < 1e-4,
                "case {case}: {report:?}"
            );
            assert!(report.checked > report.skipped_kinks);
        }
    }
}
