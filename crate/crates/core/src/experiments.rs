//! Evaluation harness: test episodes for a grid of agents, planning budgets
//! and seed pairs, the ablation and exploration-constant sweeps, and
//! state-visitation heatmaps of single planning trees.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edp::{edp_plan, EdpConfig, StepContext};
use crate::error::{Error, Result};
use crate::gridworld::{build_maze, Cell, MazeConfig, MazeVariant};
use crate::net::Checkpoint;
use crate::search::{SearchTree, SelectionRule};
use crate::training::{final_checkpoint_path, TabulatedNet};

pub const DEFAULT_BUDGETS: [usize; 5] = [8, 16, 32, 64, 128];
pub const DEFAULT_C_VALUES: [f64; 5] = [0.0, 0.1, 0.5, 1.0, 2.0];
pub const DEFAULT_HORIZON: usize = 100;
pub const DEFAULT_SEEDS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentKind {
    AzPuct,
    AzUct,
    Edp,
    EdpAblated,
}

/// A planner configuration under a short label used in result files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub label: String,
    pub kind: AgentKind,
    pub edp: EdpConfig,
}

impl AgentSpec {
    pub fn az_puct(c: f64) -> Self {
        AgentSpec {
            label: "az_puct".into(),
            kind: AgentKind::AzPuct,
            edp: EdpConfig::baseline(SelectionRule::Puct, c),
        }
    }

    pub fn az_uct(c: f64) -> Self {
        AgentSpec {
            label: "az_uct".into(),
            kind: AgentKind::AzUct,
            edp: EdpConfig::baseline(SelectionRule::Uct, c),
        }
    }

    pub fn edp() -> Self {
        Self::edp_with("edp", EdpConfig::default())
    }

    /// A named variant of EDP; labelled as an ablation unless it equals the
    /// default configuration.
    pub fn edp_with(label: &str, edp: EdpConfig) -> Self {
        let kind = if edp == EdpConfig::default() {
            AgentKind::Edp
        } else {
            AgentKind::EdpAblated
        };
        AgentSpec {
            label: label.into(),
            kind,
            edp,
        }
    }

    /// EDP and its three ablations: added exploration (c = 1), no tree
    /// reuse, no loop blocking.
    pub fn ablations() -> Vec<AgentSpec> {
        Self::ablations_of(EdpConfig::default())
    }

    /// Like [`AgentSpec::ablations`], each switching one feature of `base`.
    pub fn ablations_of(base: EdpConfig) -> Vec<AgentSpec> {
        vec![
            Self::edp_with("edp", base),
            Self::edp_with("edp_c1", EdpConfig { c: 1.0, ..base }),
            Self::edp_with("edp_no_reuse", EdpConfig { reuse_tree: false, ..base }),
            Self::edp_with("edp_no_block", EdpConfig { block_loops: false, ..base }),
        ]
    }

    pub fn c(&self) -> f64 {
        self.edp.c
    }

    /// Parses a label as accepted on the command line.
    pub fn from_label(label: &str, c: Option<f64>) -> Result<AgentSpec> {
        let mut agents = Self::ablations();
        agents.push(Self::az_puct(0.5));
        agents.push(Self::az_uct(0.5));
        let mut agent = agents
            .into_iter()
            .find(|a| a.label == label.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown agent {label:?}; expected one of edp, edp_c1, edp_no_reuse, edp_no_block, az_puct, az_uct"
                ))
            })?;
        if let Some(c) = c {
            agent.edp.c = c;
        }
        Ok(agent)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub train_variant: MazeVariant,
    pub test_variant: MazeVariant,
    pub agents: Vec<AgentSpec>,
    pub budgets: Vec<usize>,
    pub train_seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
    pub horizon: usize,
    pub discount: f64,
}

impl ExperimentSpec {
    pub fn new(train_variant: MazeVariant, test_variant: MazeVariant, agents: Vec<AgentSpec>) -> Self {
        ExperimentSpec {
            train_variant,
            test_variant,
            agents,
            budgets: DEFAULT_BUDGETS.to_vec(),
            train_seeds: (0..DEFAULT_SEEDS as u64).collect(),
            eval_seeds: (0..DEFAULT_SEEDS as u64).collect(),
            horizon: DEFAULT_HORIZON,
            discount: 0.95,
        }
    }

    pub fn test_maze(&self) -> Result<MazeConfig> {
        let m = build_maze(self.test_variant, true);
        MazeConfig::new(m.ncols(), m.start(), m.goal(), m.obstacles(), self.horizon, self.discount)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() || self.budgets.contains(&0) {
            return Err(Error::InvalidArgument("budgets must be non-empty and positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        for a in &self.agents {
            a.edp.validate()?;
        }
        Ok(())
    }
}

/// Outcome of one test episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub agent: String,
    pub c: f64,
    pub budget: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub steps: Option<usize>,
    #[serde(rename = "return")]
    pub ret: f64,
}

/// `discount^steps` if the goal was reached within the horizon, else 0.
pub fn discounted_return(steps: Option<usize>, discount: f64, horizon: usize) -> f64 {
    match steps {
        Some(s) if s <= horizon => discount.powi(s as i32),
        _ => 0.0,
    }
}

/// Networks of the training runs, keyed by training seed, each tabulated
/// over the grid.
pub type NetSet = BTreeMap<u64, TabulatedNet>;

/// Loads the final checkpoint of every listed training seed.
pub fn load_nets(root: &Path, variant: MazeVariant, seeds: &[u64], ncols: usize) -> Result<NetSet> {
    seeds
        .iter()
        .map(|&seed| {
            let path = final_checkpoint_path(root, variant, seed);
            if !path.exists() {
                return Err(Error::MissingCheckpoint { seed, path });
            }
            let ckpt = Checkpoint::load(&path)?;
            Ok((seed, TabulatedNet::new(&ckpt.params, ncols)?))
        })
        .collect()
}

/// Random stream for one seed pair. Every agent and budget sees the same
/// stream, so agents that make identical decisions produce identical
/// episodes.
pub fn episode_rng(train_seed: u64, eval_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    rng.set_stream(train_seed);
    rng
}

/// One test episode with argmax action selection.
pub fn run_episode(
    env: &MazeConfig,
    net: &TabulatedNet,
    agent: &AgentSpec,
    budget: usize,
    train_seed: u64,
    eval_seed: u64,
) -> Result<ResultRecord> {
    let mut rng = episode_rng(train_seed, eval_seed);
    let mut ctx = StepContext::new();
    let mut state = env.reset();
    let steps = loop {
        let report = edp_plan(state.cell, budget, env, net, &agent.edp, &mut ctx, &mut rng)?;
        let outcome = env.step(&state, report.action)?;
        state = outcome.state;
        if outcome.terminal && !outcome.truncated {
            break Some(state.step_count);
        }
        if outcome.truncated {
            break None;
        }
    };
    Ok(ResultRecord {
        agent: agent.label.clone(),
        c: agent.c(),
        budget,
        train_seed,
        eval_seed,
        steps,
        ret: discounted_return(steps, env.discount(), env.max_steps()),
    })
}

/// Runs `f` on a pool of `jobs` worker threads.
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Every (agent, budget, train seed, eval seed) cell, in that nesting order.
/// The result order does not depend on the number of workers.
pub fn run_grid(spec: &ExperimentSpec, nets: &NetSet, jobs: usize) -> Result<Vec<ResultRecord>> {
    spec.validate()?;
    let env = spec.test_maze()?;
    for &seed in &spec.train_seeds {
        if !nets.contains_key(&seed) {
            return Err(Error::MissingCheckpoint {
                seed,
                path: PathBuf::from(format!("<training seed {seed}>")),
            });
        }
    }
    let mut cells = Vec::new();
    for agent in &spec.agents {
        for &budget in &spec.budgets {
            for &t in &spec.train_seeds {
                for &e in &spec.eval_seeds {
                    cells.push((agent, budget, t, e));
                }
            }
        }
    }
    with_jobs(jobs, || {
        cells
            .par_iter()
            .map(|&(agent, budget, t, e)| run_episode(&env, &nets[&t], agent, budget, t, e))
            .collect::<Result<Vec<_>>>()
    })?
}

/// EDP and its ablations over the budget grid.
pub fn ablation_suite(
    train: MazeVariant,
    test: MazeVariant,
    budgets: &[usize],
    nets: &NetSet,
    jobs: usize,
) -> Result<Vec<ResultRecord>> {
    let mut spec = ExperimentSpec::new(train, test, AgentSpec::ablations());
    spec.budgets = budgets.to_vec();
    spec.train_seeds = nets.keys().copied().collect();
    run_grid(&spec, nets, jobs)
}

/// Both AlphaZero baselines at every exploration constant.
pub fn c_sweep(
    train: MazeVariant,
    test: MazeVariant,
    c_values: &[f64],
    budgets: &[usize],
    nets: &NetSet,
    jobs: usize,
) -> Result<Vec<ResultRecord>> {
    let agents = [SelectionRule::Puct, SelectionRule::Uct]
        .into_iter()
        .flat_map(|rule| {
            c_values.iter().map(move |&c| match rule {
                SelectionRule::Puct => AgentSpec::az_puct(c),
                SelectionRule::Uct => AgentSpec::az_uct(c),
            })
        })
        .collect();
    let mut spec = ExperimentSpec::new(train, test, agents);
    spec.budgets = budgets.to_vec();
    spec.train_seeds = nets.keys().copied().collect();
    run_grid(&spec, nets, jobs)
}

/// Mean visit count per cell, summed over all nodes of a planning tree
/// holding that cell and averaged over seed pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitationGrid {
    pub ncols: usize,
    pub origin: Cell,
    pub budget: usize,
    pub counts: Vec<f64>,
}

impl VisitationGrid {
    pub fn at(&self, cell: Cell) -> f64 {
        self.counts[cell.row * self.ncols + cell.col]
    }
}

/// Per-cell visit counts of one planning tree.
pub fn tree_visits(tree: &SearchTree, ncols: usize) -> Vec<f64> {
    let mut counts = vec![0.0; ncols * ncols];
    for (_, node) in tree.nodes() {
        counts[node.state.row * ncols + node.state.col] += node.visit_count as f64;
    }
    counts
}

/// Builds one tree of `budget` iterations from `origin` per seed pair and
/// averages the per-cell visit counts. A tree whose root runs out of
/// loop-free actions is kept as grown so far.
pub fn visitation_heatmap(
    cfg: &EdpConfig,
    origin: Cell,
    budget: usize,
    env: &MazeConfig,
    nets: &NetSet,
    eval_seeds: &[u64],
    jobs: usize,
) -> Result<VisitationGrid> {
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()));
    }
    if env.is_obstacle(origin) {
        return Err(Error::InvalidArgument(format!("origin {origin} is an obstacle")));
    }
    let search_cfg = cfg.search_config(env.discount());
    let ncols = env.ncols();
    let pairs: Vec<(u64, u64)> = nets
        .keys()
        .flat_map(|&t| eval_seeds.iter().map(move |&e| (t, e)))
        .collect();
    let grids = with_jobs(jobs, || {
        pairs
            .par_iter()
            .map(|&(t, e)| {
                let mut rng = episode_rng(t, e);
                let net = &nets[&t];
                let mut tree = SearchTree::new(origin, env, net, env.discount());
                match tree.run(budget, env, net, &search_cfg, &mut rng) {
                    Ok(()) | Err(Error::DeadRoot) => Ok(tree_visits(&tree, ncols)),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let mut counts = vec![0.0; ncols * ncols];
    for g in &grids {
        for (acc, v) in counts.iter_mut().zip(g) {
            *acc += v;
        }
    }
    let n = grids.len().max(1) as f64;
    Ok(VisitationGrid {
        ncols,
        origin,
        budget,
        counts: counts.into_iter().map(|c| c / n).collect(),
    })
}

/// Mean return of one (agent, c, budget) group with the standard error
/// across training seeds of the per-seed means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub agent: String,
    pub c: f64,
    pub budget: usize,
    pub mean: f64,
    pub std_err: f64,
    pub episodes: usize,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation divided by the square root of the count; 0 for
/// fewer than two values.
pub fn standard_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

/// Groups records by (agent, c, budget) in order of first appearance.
pub fn aggregate(records: &[ResultRecord]) -> Vec<Summary> {
    let mut order: Vec<(String, u64, usize)> = Vec::new();
    let mut groups: BTreeMap<(String, u64, usize), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in records {
        let key = (r.agent.clone(), r.c.to_bits(), r.budget);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups
            .entry(key)
            .or_default()
            .entry(r.train_seed)
            .or_default()
            .push(r.ret);
    }
    order
        .into_iter()
        .map(|key| {
            let per_seed = &groups[&key];
            let seed_means: Vec<f64> = per_seed.values().map(|v| mean(v)).collect();
            let all: Vec<f64> = per_seed.values().flatten().copied().collect();
            Summary {
                agent: key.0,
                c: f64::from_bits(key.1),
                budget: key.2,
                mean: mean(&all),
                std_err: standard_error(&seed_means),
                episodes: all.len(),
            }
        })
        .collect()
}

/// Looks up the summary for an agent label, c and budget.
pub fn find<'a>(summaries: &'a [Summary], agent: &str, c: f64, budget: usize) -> Option<&'a Summary> {
    summaries
        .iter()
        .find(|s| s.agent == agent && s.c == c && s.budget == budget)
}

/// The exploration constant with the highest mean return for an agent at a
/// budget; ties go to the smaller constant.
pub fn best_c(summaries: &[Summary], agent: &str, budget: usize) -> Option<f64> {
    summaries
        .iter()
        .filter(|s| s.agent == agent && s.budget == budget)
        .fold(None::<&Summary>, |best, s| match best {
            Some(b) if b.mean > s.mean || (b.mean == s.mean && b.c <= s.c) => Some(b),
            _ => Some(s),
        })
        .map(|s| s.c)
}

/// Lossless fixed-width float formatting: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn with_comments(metadata: &[(String, String)], body: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::new();
    for (k, v) in metadata {
        out.extend_from_slice(format!("# {k}: {v}\n").as_bytes());
    }
    out.extend(body);
    out
}

/// Writes records as `agent,c,budget,train_seed,eval_seed,steps,return`,
/// preceded by `# key: value` metadata lines.
pub fn write_results(path: &Path, records: &[ResultRecord], metadata: &[(String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["agent", "c", "budget", "train_seed", "eval_seed", "steps", "return"])
        .map_err(|e| Error::csv(path, e))?;
    for r in records {
        w.write_record([
            r.agent.clone(),
            fmt_f64(r.c),
            r.budget.to_string(),
            r.train_seed.to_string(),
            r.eval_seed.to_string(),
            r.steps.map(|s| s.to_string()).unwrap_or_default(),
            fmt_f64(r.ret),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    let body = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    create_parent(path)?;
    fs::write(path, with_comments(metadata, body)).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::csv(path, e)))
        .collect()
}

/// Writes a grid as `row,col,mean_count` triples, preceded by metadata
/// lines.
pub fn write_heatmap(path: &Path, grid: &VisitationGrid, metadata: &[(String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row", "col", "mean_count"])
        .map_err(|e| Error::csv(path, e))?;
    for (i, v) in grid.counts.iter().enumerate() {
        w.write_record([(i / grid.ncols).to_string(), (i % grid.ncols).to_string(), fmt_f64(*v)])
            .map_err(|e| Error::csv(path, e))?;
    }
    let body = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    let mut meta = vec![
        ("origin".to_string(), grid.origin.to_string()),
        ("budget".to_string(), grid.budget.to_string()),
    ];
    meta.extend_from_slice(metadata);
    create_parent(path)?;
    fs::write(path, with_comments(&meta, body)).map_err(|e| Error::io(path, e))
}

/// Writes summaries as `agent,c,budget,mean,std_err,episodes`.
pub fn write_summary(path: &Path, summaries: &[Summary], metadata: &[(String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["agent", "c", "budget", "mean", "std_err", "episodes"])
        .map_err(|e| Error::csv(path, e))?;
    for s in summaries {
        w.write_record([
            s.agent.clone(),
            fmt_f64(s.c),
            s.budget.to_string(),
            fmt_f64(s.mean),
            fmt_f64(s.std_err),
            s.episodes.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    let body = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    create_parent(path)?;
    fs::write(path, with_comments(metadata, body)).map_err(|e| Error::io(path, e))
}
