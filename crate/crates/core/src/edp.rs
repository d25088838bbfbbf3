//! Extra-deep planning: greedy selection, reuse of the previous step's tree,
//! and loop blocking, layered on top of [`crate::search`].
//!
//! * With `c = 0` selection is a pure argmax of `Q̄`, so trees grow deep
//!   along the currently best-looking path instead of wide.
//! * After each real step the child of the old root holding the new real
//!   state becomes the new root, keeping its statistics. When several
//!   children match, the one with the tallest subtree wins.
//! * An expansion whose state already appears on the path from the root is
//!   not added; its action is pruned at the parent instead. A node left with
//!   every action pruned is dead, and the edge leading into it is pruned in
//!   turn.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{Action, Cell, MazeConfig};
use crate::net::Evaluator;
use crate::search::{self, ExpansionSampling, NodeId, SearchConfig, SearchTree, SelectionRule};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdpConfig {
    pub c: f64,
    pub rule: SelectionRule,
    pub reuse_tree: bool,
    /// Start from scratch after this many consecutive reuses.
    pub max_reuses: Option<usize>,
    pub block_loops: bool,
    /// States within this Euclidean distance count as a repeat; 0 means an
    /// exact match.
    pub eta: f64,
    /// How unexpanded actions are drawn; `None` uses the rule's default.
    pub expansion: Option<ExpansionSampling>,
    /// Whether an expansion pruned as a loop uses up a unit of budget. Off by
    /// default: the budget then counts nodes actually added to the tree.
    pub charge_loops: bool,
}

impl Default for EdpConfig {
    fn default() -> Self {
        EdpConfig {
            c: 0.0,
            rule: SelectionRule::Uct,
            reuse_tree: true,
            max_reuses: None,
            block_loops: true,
            eta: 0.0,
            expansion: None,
            charge_loops: false,
        }
    }
}

impl EdpConfig {
    /// Plain AlphaZero planning: fresh tree every step, no loop blocking.
    pub fn baseline(rule: SelectionRule, c: f64) -> Self {
        EdpConfig {
            c,
            rule,
            reuse_tree: false,
            max_reuses: None,
            block_loops: false,
            eta: 0.0,
            expansion: None,
            charge_loops: false,
        }
    }

    pub fn search_config(&self, discount: f64) -> SearchConfig {
        let mut cfg = SearchConfig::new(self.rule, self.c, discount);
        if let Some(e) = self.expansion {
            cfg.expansion = e;
        }
        cfg.charge_loops = self.charge_loops;
        if self.block_loops {
            cfg.with_loop_blocking(self.eta)
        } else {
            cfg
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) {
            return Err(Error::InvalidArgument(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.max_reuses == Some(0) {
            return Err(Error::InvalidArgument("max_reuses must be positive".into()));
        }
        self.search_config(1.0).validate()
    }
}

/// Per-episode planner state carried from one real step to the next.
#[derive(Clone, Debug, Default)]
pub struct StepContext {
    pub previous_tree: Option<SearchTree>,
    pub consecutive_reuses: usize,
}

impl StepContext {
    pub fn new() -> Self {
        Self::default()
    }
}

/// What happened while choosing one real action.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub action: Action,
    pub reused: bool,
    /// Set when planning fell back to a uniformly random action.
    pub diagnostic: Option<String>,
}

/// Cached height of a node: 0 for leaves, else one more than its tallest
/// child.
pub fn height(tree: &SearchTree, id: NodeId) -> u32 {
    tree[id].height
}

/// True if `candidate` lies within `eta` of any state on the path.
pub fn is_loop(path_states: &[Cell], candidate: Cell, eta: f64) -> bool {
    path_states
        .iter()
        .any(|&s| s == candidate || s.distance(candidate) <= eta)
}

/// Marks `action` at `parent` as never selectable again. If that leaves the
/// node with no selectable action, the edge into it is pruned too, and so on
/// upwards. Returns true when the root itself ends up dead.
pub fn prune_edge(tree: &mut SearchTree, parent: NodeId, action: Action) -> bool {
    let mut node = parent;
    let mut action = action;
    loop {
        tree[node].pruned[action.index()] = true;
        if !tree[node].is_dead() {
            return false;
        }
        match tree[node].parent {
            Some((p, a)) => {
                node = p;
                action = a;
            }
            None => return true,
        }
    }
}

/// Picks the subtree of `prev` to keep after the real environment moved to
/// `real_state`: the unpruned, non-terminal root child holding that state
/// with the greatest height, ties broken at random. `None` means plan from
/// scratch.
pub fn reuse_tree<R: Rng + ?Sized>(
    prev: &SearchTree,
    real_state: Cell,
    cfg: &EdpConfig,
    ctx: &StepContext,
    rng: &mut R,
) -> Option<SearchTree> {
    if !cfg.reuse_tree {
        return None;
    }
    if cfg.max_reuses.is_some_and(|k| ctx.consecutive_reuses >= k) {
        return None;
    }
    let root = prev.root_node();
    let matching = prev.children(prev.root()).filter(|&(a, c)| {
        !root.is_pruned(a) && !prev[c].terminal && prev[c].state == real_state
    });
    let (_, keep) = search::argmax_by(matching, |(_, c)| prev[c].height as f64, rng)?;
    Some(prev.reroot(keep))
}

/// Plans one real step and returns the chosen action. The tree used is left
/// in `ctx` for the next step.
pub fn edp_plan<E: Evaluator + ?Sized, R: Rng + ?Sized>(
    real_state: Cell,
    budget: usize,
    env: &MazeConfig,
    eval: &E,
    cfg: &EdpConfig,
    ctx: &mut StepContext,
    rng: &mut R,
) -> Result<StepReport> {
    if budget == 0 {
        return Err(Error::InvalidArgument("planning budget must be at least 1".into()));
    }
    cfg.validate()?;
    let search_cfg = cfg.search_config(env.discount());

    let previous = ctx.previous_tree.take();
    let reused = previous
        .as_ref()
        .and_then(|prev| reuse_tree(prev, real_state, cfg, ctx, rng));
    drop(previous);
    let was_reused = reused.is_some();
    ctx.consecutive_reuses = if was_reused {
        ctx.consecutive_reuses + 1
    } else {
        0
    };
    let mut tree = reused.unwrap_or_else(|| SearchTree::new(real_state, env, eval, env.discount()));

    let mut outcome = tree.run(budget, env, eval, &search_cfg, rng);
    if matches!(outcome, Err(Error::DeadRoot)) && was_reused {
        // The inherited tree ran dry; start over once.
        ctx.consecutive_reuses = 0;
        tree = SearchTree::new(real_state, env, eval, env.discount());
        outcome = tree.run(budget, env, eval, &search_cfg, rng);
    }
    let policy = match outcome {
        Ok(()) => tree.visit_count_policy(),
        Err(e) => Err(e),
    };
    let report = match policy {
        Ok(policy) => StepReport {
            action: search::argmax_action(&policy, rng),
            reused: was_reused && ctx.consecutive_reuses > 0,
            diagnostic: None,
        },
        Err(Error::DeadRoot | Error::NoChildren) => StepReport {
            action: Action::ALL[rng.random_range(0..Action::COUNT)],
            reused: false,
            diagnostic: Some(format!(
                "no loop-free action from {real_state}; acting at random"
            )),
        },
        Err(e) => return Err(e),
    };
    ctx.previous_tree = Some(tree);
    Ok(report)
}
