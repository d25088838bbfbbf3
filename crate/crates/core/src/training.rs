//! Self-play training: alternate collecting episodes by planning, learning
//! from a replay buffer, and evaluating greedily.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{build_maze, Action, Cell, MazeConfig, MazeVariant};
use crate::net::{
    gradients, AdamState, Checkpoint, Evaluator, InputEncoding, LossBreakdown, LossHyper,
    NetworkOutput, NetworkParams,
};
use crate::search::{self, SearchConfig, SearchTree, SelectionRule};

/// One episode as a tuple of sequences: `states` has one more entry than
/// the other three.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Cell>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub search_policies: Vec<[f64; 4]>,
    pub truncated: bool,
}

impl Trajectory {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.actions.len();
        if self.states.len() != l + 1 || self.rewards.len() != l || self.search_policies.len() != l {
            return Err(Error::Shape(format!(
                "trajectory has {} states, {} actions, {} rewards, {} policies",
                self.states.len(),
                l,
                self.rewards.len(),
                self.search_policies.len()
            )));
        }
        for (t, pi) in self.search_policies.iter().enumerate() {
            let sum: f64 = pi.iter().sum();
            if pi.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "search policy at step {t} is not a distribution: {pi:?}"
                )));
            }
        }
        Ok(())
    }
}

/// First-in first-out store of the most recent episodes.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    episodes: VecDeque<Trajectory>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            episodes: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, episode: Trajectory) {
        if self.capacity == 0 {
            return;
        }
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.episodes.iter()
    }

    /// `k` distinct episodes drawn uniformly (all of them if fewer exist).
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<Trajectory> {
        let k = k.min(self.len());
        index::sample(rng, self.len(), k)
            .into_iter()
            .map(|i| self.episodes[i].clone())
            .collect()
    }
}

/// Every training hyperparameter, under its conventional name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_ep_len: usize,
    pub disc_factor: f64,
    pub iterations: usize,
    pub learning_epochs: usize,
    pub sample_size: usize,
    pub buffer_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: String,
    pub eval_period: usize,
    pub value_weight: f64,
    pub policy_weight: f64,
    pub n_steps: usize,
    pub hidden_size: usize,
    pub hidden_num: usize,
    pub activation: String,
    pub planning_budget: usize,
    pub c: f64,
    pub dir_eps: f64,
    pub dir_alpha: f64,
    pub seed: u64,
    /// Stop once a greedy evaluation reaches this discounted return.
    pub early_stop_return: Option<f64>,
    pub input_encoding: EncodingName,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingName {
    Raw,
    Normalized,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_ep_len: 200,
            disc_factor: 0.95,
            iterations: 100,
            learning_epochs: 4,
            sample_size: 6,
            buffer_size: 90,
            batch_size: 22,
            learning_rate: 0.001,
            optimizer: "Adam".into(),
            eval_period: 10,
            value_weight: 0.7,
            policy_weight: 0.3,
            n_steps: 2,
            hidden_size: 64,
            hidden_num: 2,
            activation: "ReLU".into(),
            planning_budget: 64,
            c: 0.5,
            dir_eps: 0.4,
            dir_alpha: 2.5,
            seed: 0,
            early_stop_return: None,
            input_encoding: EncodingName::Raw,
        }
    }
}

impl TrainConfig {
    /// Defaults for a maze variant: 150 iterations for the harder RL maze,
    /// 100 otherwise.
    pub fn for_variant(variant: MazeVariant) -> Self {
        TrainConfig {
            iterations: default_iterations(variant),
            ..TrainConfig::default()
        }
    }

    pub fn loss_hyper(&self) -> LossHyper {
        LossHyper {
            value_weight: self.value_weight,
            policy_weight: self.policy_weight,
            n_steps: self.n_steps,
            discount: self.disc_factor,
        }
    }

    pub fn encoding(&self, ncols: usize) -> InputEncoding {
        match self.input_encoding {
            EncodingName::Raw => InputEncoding::Raw,
            EncodingName::Normalized => InputEncoding::Normalized { ncols },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Error::Config {
            key: key.to_string(),
            message,
        };
        let positive = [
            ("max_ep_len", self.max_ep_len),
            ("iterations", self.iterations),
            ("learning_epochs", self.learning_epochs),
            ("sample_size", self.sample_size),
            ("buffer_size", self.buffer_size),
            ("batch_size", self.batch_size),
            ("eval_period", self.eval_period),
            ("n_steps", self.n_steps),
            ("hidden_size", self.hidden_size),
            ("hidden_num", self.hidden_num),
            ("planning_budget", self.planning_budget),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(bad(key, "must be positive".into()));
            }
        }
        if !(self.disc_factor > 0.0 && self.disc_factor <= 1.0) {
            return Err(bad("disc_factor", format!("must lie in (0, 1], got {}", self.disc_factor)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate", format!("must be positive, got {}", self.learning_rate)));
        }
        for (key, v) in [("value_weight", self.value_weight), ("policy_weight", self.policy_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(key, format!("must be >= 0, got {v}")));
            }
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(bad("c", format!("must be >= 0, got {}", self.c)));
        }
        if !(0.0..=1.0).contains(&self.dir_eps) {
            return Err(bad("dir_eps", format!("must lie in [0, 1], got {}", self.dir_eps)));
        }
        if !(self.dir_alpha > 0.0 && self.dir_alpha.is_finite()) {
            return Err(bad("dir_alpha", format!("must be positive, got {}", self.dir_alpha)));
        }
        if !self.optimizer.eq_ignore_ascii_case("adam") {
            return Err(bad("optimizer", format!("only Adam is supported, got {:?}", self.optimizer)));
        }
        if !self.activation.eq_ignore_ascii_case("relu") {
            return Err(bad("activation", format!("only ReLU is supported, got {:?}", self.activation)));
        }
        Ok(())
    }
}

pub fn default_iterations(variant: MazeVariant) -> usize {
    match variant {
        MazeVariant::RL => 150,
        _ => 100,
    }
}

/// Network outputs for every cell of a grid, computed once. Planning with a
/// fixed network queries the same few dozen cells over and over, so this is
/// an exact and much cheaper stand-in for the network itself.
#[derive(Clone, Debug)]
pub struct TabulatedNet {
    ncols: usize,
    outputs: Vec<NetworkOutput>,
}

impl TabulatedNet {
    pub fn new(params: &NetworkParams, ncols: usize) -> Result<Self> {
        let outputs = (0..ncols * ncols)
            .map(|i| params.forward_cell(Cell::new(i / ncols, i % ncols)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TabulatedNet { ncols, outputs })
    }
}

impl Evaluator for TabulatedNet {
    fn evaluate(&self, cell: Cell) -> NetworkOutput {
        self.outputs[cell.row * self.ncols + cell.col].clone()
    }
}

/// Plays one self-play episode from the start state: plan with PUCT and root
/// noise, sample the action from the visit-count policy, step. Stops at the
/// goal or after `env.max_steps()` steps.
pub fn collect_episode<E: Evaluator + ?Sized, R: Rng + ?Sized>(
    env: &MazeConfig,
    net: &E,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let search_cfg = SearchConfig::new(SelectionRule::Puct, cfg.c, env.discount());
    let mut state = env.reset();
    let mut traj = Trajectory {
        states: vec![state.cell],
        actions: Vec::new(),
        rewards: Vec::new(),
        search_policies: Vec::new(),
        truncated: false,
    };
    loop {
        let mut tree = SearchTree::new(state.cell, env, net, env.discount());
        tree.add_dirichlet_noise(cfg.dir_eps, cfg.dir_alpha, rng)?;
        tree.run(cfg.planning_budget, env, net, &search_cfg, rng)?;
        let policy = tree.visit_count_policy()?;
        let action = search::sample_action(&policy, rng);
        let outcome = env.step(&state, action)?;
        traj.actions.push(action);
        traj.rewards.push(outcome.reward);
        traj.search_policies.push(policy);
        traj.states.push(outcome.state.cell);
        state = outcome.state;
        if outcome.terminal && !outcome.truncated {
            break;
        }
        if outcome.truncated {
            traj.truncated = true;
            break;
        }
    }
    Ok(traj)
}

/// Runs `learning_epochs` optimizer steps, each on a fresh batch drawn
/// without replacement. Returns the loss measured before each step.
pub fn learn_iteration<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    net: &mut NetworkParams,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<LossBreakdown>> {
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("replay buffer is empty".into()));
    }
    let hyper = cfg.loss_hyper();
    (0..cfg.learning_epochs)
        .map(|_| {
            let batch = buffer.sample(cfg.batch_size, rng);
            let (loss, grads) = gradients(&batch, net, &hyper)?;
            adam.step(net, &grads, cfg.learning_rate)?;
            Ok(loss)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReturn {
    pub discounted: f64,
    pub undiscounted: f64,
    /// Steps taken to reach the goal, if it was reached.
    pub steps: Option<usize>,
}

/// One noise-free episode taking the argmax of the visit-count policy.
pub fn evaluate_greedy<E: Evaluator + ?Sized>(
    env: &MazeConfig,
    net: &E,
    budget: usize,
    c: f64,
    seed: u64,
) -> Result<EvalReturn> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let search_cfg = SearchConfig::new(SelectionRule::Puct, c, env.discount());
    let mut state = env.reset();
    loop {
        let tree = search::plan(state.cell, budget, env, net, &search_cfg, &mut rng)?;
        let action = search::argmax_action(&tree.visit_count_policy()?, &mut rng);
        let outcome = env.step(&state, action)?;
        state = outcome.state;
        if outcome.terminal && !outcome.truncated {
            let steps = state.step_count;
            return Ok(EvalReturn {
                discounted: env.discount().powi(steps as i32),
                undiscounted: 1.0,
                steps: Some(steps),
            });
        }
        if outcome.truncated {
            return Ok(EvalReturn {
                discounted: 0.0,
                undiscounted: 0.0,
                steps: None,
            });
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub value_loss: f64,
    pub policy_loss: f64,
    pub eval_return_discounted: Option<f64>,
    pub eval_return_undiscounted: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub log: Vec<LogRow>,
    /// Checkpoints in the order written; the last is the final one.
    pub checkpoints: Vec<PathBuf>,
}

/// The training maze: the layout of `variant` with the episode length and
/// discount taken from `cfg`.
pub fn training_maze(variant: MazeVariant, cfg: &TrainConfig) -> Result<MazeConfig> {
    let m = build_maze(variant, false);
    MazeConfig::new(m.ncols(), m.start(), m.goal(), m.obstacles(), cfg.max_ep_len, cfg.disc_factor)
}

/// Directory holding the checkpoints of one training run.
pub fn run_dir(root: &Path, variant: MazeVariant, seed: u64) -> PathBuf {
    root.join(variant.name()).join(format!("seed_{seed}"))
}

/// Path of the final checkpoint of one training run.
pub fn final_checkpoint_path(root: &Path, variant: MazeVariant, seed: u64) -> PathBuf {
    run_dir(root, variant, seed).join("final.json")
}

/// Full training run. With `output` set, checkpoints and `train_log.csv` are
/// written under [`run_dir`].
pub fn train(variant: MazeVariant, cfg: &TrainConfig, output: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let env = training_maze(variant, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = NetworkParams::new(cfg.hidden_size, cfg.hidden_num, cfg.encoding(env.ncols()), &mut rng);
    let mut adam = AdamState::new(&net);
    let mut buffer = ReplayBuffer::new(cfg.buffer_size);
    let hyperparameters = serde_json::json!({ "variant": variant.name(), "train": cfg });
    let dir = output.map(|root| run_dir(root, variant, cfg.seed));
    let mut outcome = TrainOutcome {
        params: net.clone(),
        log: Vec::new(),
        checkpoints: Vec::new(),
    };

    for iteration in 1..=cfg.iterations {
        let table = TabulatedNet::new(&net, env.ncols())?;
        for _ in 0..cfg.sample_size {
            buffer.push(collect_episode(&env, &table, cfg, &mut rng)?);
        }
        let losses = learn_iteration(&buffer, &mut net, &mut adam, cfg, &mut rng)?;
        let epochs = losses.len() as f64;
        let mut row = LogRow {
            iteration,
            value_loss: losses.iter().map(|l| l.value_loss).sum::<f64>() / epochs,
            policy_loss: losses.iter().map(|l| l.policy_loss).sum::<f64>() / epochs,
            eval_return_discounted: None,
            eval_return_undiscounted: None,
        };
        if !(row.value_loss.is_finite() && row.policy_loss.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite loss at iteration {iteration}")));
        }
        let last = iteration == cfg.iterations;
        let mut stop = false;
        if iteration % cfg.eval_period == 0 || last {
            let table = TabulatedNet::new(&net, env.ncols())?;
            let eval = evaluate_greedy(&env, &table, cfg.planning_budget, cfg.c, cfg.seed)?;
            row.eval_return_discounted = Some(eval.discounted);
            row.eval_return_undiscounted = Some(eval.undiscounted);
            stop = cfg.early_stop_return.is_some_and(|t| eval.discounted >= t);
            if let Some(dir) = &dir {
                let name = if last || stop {
                    "final.json".to_string()
                } else {
                    format!("checkpoint_{iteration:04}.json")
                };
                let path = dir.join(name);
                Checkpoint::new(net.clone(), hyperparameters.clone()).save(&path)?;
                outcome.checkpoints.push(path);
            }
        }
        outcome.log.push(row);
        if stop {
            break;
        }
    }
    if let Some(dir) = &dir {
        write_log(&dir.join("train_log.csv"), &outcome.log)?;
    }
    outcome.params = net;
    Ok(outcome)
}

/// Writes the training log, one row per iteration; evaluation columns are
/// empty on iterations without an evaluation.
pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record([
        "iteration",
        "value_loss",
        "policy_loss",
        "eval_return_discounted",
        "eval_return_undiscounted",
    ])
    .map_err(|e| Error::csv(path, e))?;
    let opt = |v: Option<f64>| v.map(crate::experiments::fmt_f64).unwrap_or_default();
    for r in log {
        w.write_record([
            r.iteration.to_string(),
            crate::experiments::fmt_f64(r.value_loss),
            crate::experiments::fmt_f64(r.policy_loss),
            opt(r.eval_return_discounted),
            opt(r.eval_return_undiscounted),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NUM_ACTIONS;

    struct Uniform;

    impl Evaluator for Uniform {
        fn evaluate(&self, _: Cell) -> NetworkOutput {
            NetworkOutput {
                policy: [0.25; NUM_ACTIONS],
                value: 0.0,
            }
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            eval_period: 2,
            sample_size: 2,
            buffer_size: 4,
            batch_size: 3,
            hidden_size: 8,
            planning_budget: 8,
            max_ep_len: 20,
            ..TrainConfig::default()
        }
    }

    fn dummy(tag: usize) -> Trajectory {
        Trajectory {
            states: vec![Cell::new(tag, 0), Cell::new(tag, 1)],
            actions: vec![Action::Right],
            rewards: vec![0.0],
            search_policies: vec![[0.0, 1.0, 0.0, 0.0]],
            truncated: true,
        }
    }

    #[test]
    fn defaults_match_the_reference_table() {
        let c = TrainConfig::default();
        assert_eq!((c.max_ep_len, c.disc_factor, c.iterations), (200, 0.95, 100));
        assert_eq!((c.learning_epochs, c.sample_size, c.buffer_size, c.batch_size), (4, 6, 90, 22));
        assert_eq!((c.learning_rate, c.eval_period), (0.001, 10));
        assert_eq!((c.value_weight, c.policy_weight, c.n_steps), (0.7, 0.3, 2));
        assert_eq!((c.hidden_size, c.hidden_num), (64, 2));
        assert_eq!((c.planning_budget, c.c, c.dir_eps, c.dir_alpha), (64, 0.5, 0.4, 2.5));
        assert_eq!(TrainConfig::for_variant(MazeVariant::RL).iterations, 150);
        assert_eq!(TrainConfig::for_variant(MazeVariant::LR).iterations, 100);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_config_names_the_key() {
        let c = TrainConfig {
            dir_eps: 1.5,
            ..TrainConfig::default()
        };
        match c.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "dir_eps"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn buffer_is_fifo() {
        let mut b = ReplayBuffer::new(90);
        for i in 0..100 {
            b.push(dummy(i));
        }
        assert_eq!(b.len(), 90);
        let tags: Vec<usize> = b.iter().map(|t| t.states[0].row).collect();
        assert_eq!(tags, (10..100).collect::<Vec<_>>());
        // 6 episodes per iteration fill 90 slots in 15 iterations.
        assert_eq!(90 / 6, 15);
    }

    #[test]
    fn buffer_sampling_is_without_replacement() {
        let mut b = ReplayBuffer::new(90);
        for i in 0..30 {
            b.push(dummy(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = b.sample(22, &mut rng);
        let mut tags: Vec<usize> = batch.iter().map(|t| t.states[0].row).collect();
        tags.sort();
        tags.dedup();
        assert_eq!(tags.len(), 22);
        assert_eq!(b.sample(50, &mut rng).len(), 30);
    }

    #[test]
    fn episode_reaching_goal_has_single_terminal_reward() {
        let env = MazeConfig::from_text("S..\n...\n..G", 50, 0.95).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = collect_episode(&env, &Uniform, &tiny_cfg(), &mut rng).unwrap();
        traj.validate().unwrap();
        assert!(!traj.truncated);
        let k = traj.len();
        assert_eq!(traj.rewards[k - 1], 1.0);
        assert!(traj.rewards[..k - 1].iter().all(|&r| r == 0.0));
        assert_eq!(*traj.states.last().unwrap(), env.goal());
    }

    #[test]
    fn episode_hitting_the_cap_is_truncated() {
        let env = training_maze(MazeVariant::RL, &TrainConfig::default()).unwrap();
        let env = env.with_max_steps(200);
        let cfg = TrainConfig {
            planning_budget: 2,
            ..TrainConfig::default()
        };
        // A network that always prefers going Up and values nothing will not
        // find a 28-step path with two expansions per step.
        struct Up;
        impl Evaluator for Up {
            fn evaluate(&self, _: Cell) -> NetworkOutput {
                NetworkOutput {
                    policy: [0.0, 0.0, 1.0, 0.0],
                    value: 0.0,
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = collect_episode(&env, &Up, &cfg, &mut rng).unwrap();
        assert_eq!(traj.len(), 200);
        assert!(traj.truncated);
        for pi in &traj.search_policies {
            assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_evaluation_cut_by_the_horizon_returns_zero() {
        let env = build_maze(MazeVariant::RL, true).with_max_steps(10);
        let eval = evaluate_greedy(&env, &Uniform, 8, 0.5, 0).unwrap();
        assert_eq!(eval.steps, None);
        assert_eq!(eval.discounted, 0.0);
        assert_eq!(eval.undiscounted, 0.0);
    }

    #[test]
    fn learn_iteration_takes_one_step_per_epoch() {
        let env = training_maze(MazeVariant::LR, &TrainConfig::default()).unwrap();
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = NetworkParams::new(8, 2, InputEncoding::Raw, &mut rng);
        let mut buffer = ReplayBuffer::new(4);
        buffer.push(collect_episode(&env.clone().with_max_steps(20), &net, &cfg, &mut rng).unwrap());
        let mut adam = AdamState::new(&net);
        let losses = learn_iteration(&buffer, &mut net, &mut adam, &cfg, &mut rng).unwrap();
        assert_eq!(losses.len(), 4);
        assert_eq!(adam.t, 4);
    }

    #[test]
    fn overfitting_one_episode_reduces_loss() {
        let env = MazeConfig::from_text("S..\n...\n..G", 50, 0.95).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..tiny_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = NetworkParams::new(16, 2, InputEncoding::Raw, &mut rng);
        let mut buffer = ReplayBuffer::new(1);
        buffer.push(collect_episode(&env, &Uniform, &cfg, &mut rng).unwrap());
        let mut adam = AdamState::new(&net);
        let first = learn_iteration(&buffer, &mut net, &mut adam, &cfg, &mut rng).unwrap()[0].total;
        let mut last = first;
        for _ in 0..100 {
            last = learn_iteration(&buffer, &mut net, &mut adam, &cfg, &mut rng).unwrap()[0].total;
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn greedy_evaluation_with_exact_values_is_optimal() {
        // A network whose value is the true optimal value γ^(d-1) reaches the
        // goal along a shortest path.
        struct Oracle(MazeConfig, Vec<Option<usize>>);
        impl Evaluator for Oracle {
            fn evaluate(&self, cell: Cell) -> NetworkOutput {
                let d = self.1[cell.row * self.0.ncols() + cell.col].unwrap();
                let value = if d == 0 { 0.0 } else { 0.95f64.powi(d as i32 - 1) };
                NetworkOutput {
                    policy: [0.25; 4],
                    value,
                }
            }
        }
        for variant in MazeVariant::ALL {
            let env = build_maze(variant, true);
            let oracle = Oracle(env.clone(), env.distances_from(env.goal()));
            let l = env.shortest_path_length().unwrap();
            let r = evaluate_greedy(&env, &oracle, 16, 0.0, 0).unwrap();
            assert_eq!(r.steps, Some(l), "{variant}");
            assert!((r.discounted - 0.95f64.powi(l as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluation_leaves_parameters_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = NetworkParams::new(8, 2, InputEncoding::Raw, &mut rng);
        let before = Checkpoint::new(net.clone(), serde_json::Value::Null).to_bytes();
        let env = build_maze(MazeVariant::LR, true);
        evaluate_greedy(&env, &net, 8, 0.5, 0).unwrap();
        let after = Checkpoint::new(net, serde_json::Value::Null).to_bytes();
        assert_eq!(before, after);
    }

    #[test]
    fn tabulated_net_matches_the_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = NetworkParams::new(8, 2, InputEncoding::Raw, &mut rng);
        let table = TabulatedNet::new(&net, 8).unwrap();
        for i in 0..64 {
            let cell = Cell::new(i / 8, i % 8);
            assert_eq!(table.evaluate(cell), net.evaluate(cell));
        }
    }

    #[test]
    fn training_is_deterministic_and_writes_checkpoints() {
        let cfg = tiny_cfg();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = train(MazeVariant::LR, &cfg, Some(a.path())).unwrap();
        let rb = train(MazeVariant::LR, &cfg, Some(b.path())).unwrap();
        assert_eq!(ra.params, rb.params);
        assert_eq!(ra.log.len(), 3);
        assert!(ra.log[1].eval_return_discounted.is_some());
        assert!(ra.log[0].eval_return_discounted.is_none());
        assert_eq!(ra.checkpoints.len(), 2);
        let fa = final_checkpoint_path(a.path(), MazeVariant::LR, 0);
        let fb = final_checkpoint_path(b.path(), MazeVariant::LR, 0);
        assert_eq!(fs::read(&fa).unwrap(), fs::read(&fb).unwrap());
        let log = run_dir(a.path(), MazeVariant::LR, 0).join("train_log.csv");
        assert_eq!(fs::read(&log).unwrap(), fs::read(run_dir(b.path(), MazeVariant::LR, 0).join("train_log.csv")).unwrap());
        let loaded = Checkpoint::load(&fa).unwrap();
        assert_eq!(loaded.params, ra.params);
    }
}
