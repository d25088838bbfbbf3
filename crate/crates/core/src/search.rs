//! Monte Carlo tree search guided by a policy-value evaluator.
//!
//! One planning iteration selects a path from the root using PUCT or UCT
//! until it reaches a node that still has an unexpanded action (or a
//! terminal node), expands a single sampled action through the maze model,
//! evaluates the new state, and backs the discounted value up the path.
//!
//! Nodes live in an arena and refer to each other by [`NodeId`]. A node's
//! mean value `Q̄(x) = value_sum / N(x)` satisfies
//!
//! ```text
//! Q̄(x) = r(x) + γ v(x) / N(x) + γ Σ_a N(x⊎a) / N(x) · Q̄(x⊎a)
//! ```
//!
//! where `r(x)` is the reward received on entering `x` and `v(x)` its own
//! network estimate, counted as one visit.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::edp;
use crate::error::{Error, Result};
use crate::gridworld::{Action, Cell, MazeConfig};
use crate::net::{Evaluator, NUM_ACTIONS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub state: Cell,
    /// Reward received when entering this node; 0 at the root.
    pub reward_in: f64,
    pub prior: [f64; NUM_ACTIONS],
    /// Cached value estimate of `state`; 0 for terminal nodes.
    pub value_est: f64,
    pub visit_count: u32,
    pub value_sum: f64,
    pub children: [Option<NodeId>; NUM_ACTIONS],
    pub pruned: [bool; NUM_ACTIONS],
    pub terminal: bool,
    pub height: u32,
    pub parent: Option<(NodeId, Action)>,
}

impl Node {
    pub fn mean_value(&self) -> f64 {
        if self.visit_count == 0 {
            0.0
        } else {
            self.value_sum / self.visit_count as f64
        }
    }

    pub fn child(&self, a: Action) -> Option<NodeId> {
        self.children[a.index()]
    }

    pub fn is_pruned(&self, a: Action) -> bool {
        self.pruned[a.index()]
    }

    /// Actions neither pruned nor expanded yet.
    pub fn unexpanded(&self) -> impl Iterator<Item = Action> + '_ {
        Action::ALL
            .into_iter()
            .filter(|a| !self.is_pruned(*a) && self.child(*a).is_none())
    }

    pub fn is_fully_expanded(&self) -> bool {
        self.unexpanded().next().is_none()
    }

    pub fn is_dead(&self) -> bool {
        self.pruned.iter().all(|&p| p)
    }

    pub fn is_leaf(&self) -> bool {
        self.children.iter().all(Option::is_none)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionRule {
    Puct,
    Uct,
}

/// How the action to expand is drawn among a node's unexpanded actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpansionSampling {
    /// Proportional to the prior restricted to the candidates.
    Prior,
    Uniform,
}

impl SelectionRule {
    pub fn default_expansion(self) -> ExpansionSampling {
        match self {
            SelectionRule::Puct => ExpansionSampling::Prior,
            SelectionRule::Uct => ExpansionSampling::Uniform,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub rule: SelectionRule,
    pub c: f64,
    pub expansion: ExpansionSampling,
    pub discount: f64,
    /// Prune actions whose outcome repeats a state on the path, within this
    /// Euclidean distance. `None` disables loop blocking.
    pub loop_threshold: Option<f64>,
    /// Whether a loop-pruned expansion uses up a unit of budget.
    pub charge_loops: bool,
}

impl SearchConfig {
    pub fn new(rule: SelectionRule, c: f64, discount: f64) -> Self {
        SearchConfig {
            rule,
            c,
            expansion: rule.default_expansion(),
            discount,
            loop_threshold: None,
            charge_loops: false,
        }
    }

    pub fn with_loop_blocking(mut self, threshold: f64) -> Self {
        self.loop_threshold = Some(threshold);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c >= 0.0) {
            return Err(Error::InvalidArgument(format!("c must be >= 0, got {}", self.c)));
        }
        if let Some(eta) = self.loop_threshold {
            if !(eta >= 0.0) {
                return Err(Error::InvalidArgument(format!("loop threshold must be >= 0, got {eta}")));
            }
        }
        Ok(())
    }
}

/// Result of one expansion attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expansion {
    Child(NodeId),
    /// The sampled action led back onto the path and was pruned.
    LoopPruned { action: Action, dead_root: bool },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PlanStats {
    /// Selection-expansion-backup iterations run.
    pub iterations: usize,
    pub nodes_created: usize,
    pub loops_pruned: usize,
    pub terminal_visits: usize,
}

#[derive(Clone, Debug)]
pub struct SearchTree {
    nodes: Vec<Node>,
    root: NodeId,
    /// Budget units spent on this tree since its root was created or
    /// re-rooted.
    pub expansion_count: usize,
    pub stats: PlanStats,
}

impl std::ops::Index<NodeId> for SearchTree {
    type Output = Node;

    fn index(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }
}

impl std::ops::IndexMut<NodeId> for SearchTree {
    fn index_mut(&mut self, id: NodeId) -> &mut Node {
        &mut self.nodes[id.index()]
    }
}

impl SearchTree {
    /// A one-node tree: the root's own evaluation counts as its first visit.
    pub fn new<E: Evaluator + ?Sized>(
        state: Cell,
        env: &MazeConfig,
        eval: &E,
        discount: f64,
    ) -> Self {
        let terminal = state == env.goal();
        let (prior, value_est) = if terminal {
            ([1.0 / NUM_ACTIONS as f64; NUM_ACTIONS], 0.0)
        } else {
            let out = eval.evaluate(state);
            (out.policy, out.value)
        };
        let root = Node {
            state,
            reward_in: 0.0,
            prior,
            value_est,
            visit_count: 1,
            value_sum: discount * value_est,
            children: [None; NUM_ACTIONS],
            pruned: [false; NUM_ACTIONS],
            terminal,
            height: 0,
            parent: None,
        };
        SearchTree {
            nodes: vec![root],
            root: NodeId(0),
            expansion_count: 0,
            stats: PlanStats::default(),
        }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn root_node(&self) -> &Node {
        &self[self.root]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &Node)> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (NodeId(i as u32), n))
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = (Action, NodeId)> + '_ {
        let node = &self[id];
        Action::ALL
            .into_iter()
            .filter_map(move |a| node.child(a).map(|c| (a, c)))
    }

    /// States from the root down to `id`, inclusive.
    pub fn path_states(&self, id: NodeId) -> Vec<Cell> {
        let mut states = vec![self[id].state];
        let mut cur = id;
        while let Some((parent, _)) = self[cur].parent {
            states.push(self[parent].state);
            cur = parent;
        }
        states.reverse();
        states
    }

    pub fn depth(&self, id: NodeId) -> usize {
        let mut d = 0;
        let mut cur = id;
        while let Some((parent, _)) = self[cur].parent {
            d += 1;
            cur = parent;
        }
        d
    }

    pub fn puct_score(&self, parent: NodeId, a: Action, c: f64) -> f64 {
        let p = &self[parent];
        let child = &self[p.child(a).expect("scored actions are expanded")];
        child.mean_value()
            + c * p.prior[a.index()] * (p.visit_count as f64).sqrt()
                / (1.0 + child.visit_count as f64)
    }

    pub fn uct_score(&self, parent: NodeId, a: Action, c: f64) -> f64 {
        let p = &self[parent];
        let child = &self[p.child(a).expect("scored actions are expanded")];
        child.mean_value()
            + c * ((p.visit_count as f64).ln() / child.visit_count as f64).sqrt()
    }

    pub fn score(&self, parent: NodeId, a: Action, rule: SelectionRule, c: f64) -> f64 {
        match rule {
            SelectionRule::Puct => self.puct_score(parent, a, c),
            SelectionRule::Uct => self.uct_score(parent, a, c),
        }
    }

    /// Descends from the root by the configured score until reaching a node
    /// that is terminal or still has an unexpanded, unpruned action. Returns
    /// the `(node, action)` edges taken and the node reached.
    pub fn select_path<R: Rng + ?Sized>(
        &self,
        cfg: &SearchConfig,
        rng: &mut R,
    ) -> Result<(Vec<(NodeId, Action)>, NodeId)> {
        let mut path = Vec::new();
        let mut cur = self.root;
        loop {
            let node = &self[cur];
            if node.terminal || !node.is_fully_expanded() {
                return Ok((path, cur));
            }
            let candidates = Action::ALL
                .into_iter()
                .filter(|&a| !node.is_pruned(a) && node.child(a).is_some());
            let Some(a) = argmax_by(candidates, |a| self.score(cur, a, cfg.rule, cfg.c), rng) else {
                // Only reachable at the root: dead interior nodes get their
                // incoming edge pruned.
                debug_assert_eq!(cur, self.root);
                return Err(Error::DeadRoot);
            };
            path.push((cur, a));
            cur = node.child(a).unwrap();
        }
    }

    /// Expands one unexpanded action of `id`. With loop blocking enabled, an
    /// action leading back onto the root path is pruned instead of creating a
    /// child.
    pub fn expand<E: Evaluator + ?Sized, R: Rng + ?Sized>(
        &mut self,
        id: NodeId,
        env: &MazeConfig,
        eval: &E,
        cfg: &SearchConfig,
        rng: &mut R,
    ) -> Expansion {
        let action = self.sample_unexpanded(id, cfg.expansion, rng);
        let parent_state = self[id].state;
        let t = env.transition(parent_state, action);
        self.expansion_count += 1;

        if let Some(eta) = cfg.loop_threshold {
            let path = self.path_states(id);
            if edp::is_loop(&path, t.cell, eta) {
                self.stats.loops_pruned += 1;
                let dead_root = edp::prune_edge(self, id, action);
                return Expansion::LoopPruned { action, dead_root };
            }
        }

        let (prior, value_est) = if t.reached_goal {
            ([1.0 / NUM_ACTIONS as f64; NUM_ACTIONS], 0.0)
        } else {
            let out = eval.evaluate(t.cell);
            (out.policy, out.value)
        };
        let child = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            state: t.cell,
            reward_in: t.reward,
            prior,
            value_est,
            visit_count: 0,
            value_sum: 0.0,
            children: [None; NUM_ACTIONS],
            pruned: [false; NUM_ACTIONS],
            terminal: t.reached_goal,
            height: 0,
            parent: Some((id, action)),
        });
        self[id].children[action.index()] = Some(child);
        self.stats.nodes_created += 1;
        Expansion::Child(child)
    }

    fn sample_unexpanded<R: Rng + ?Sized>(
        &self,
        id: NodeId,
        sampling: ExpansionSampling,
        rng: &mut R,
    ) -> Action {
        let node = &self[id];
        let candidates: Vec<Action> = node.unexpanded().collect();
        assert!(!candidates.is_empty(), "expand called on a fully expanded node");
        if sampling == ExpansionSampling::Prior {
            let total: f64 = candidates.iter().map(|a| node.prior[a.index()]).sum();
            if total > 0.0 {
                let mut u = rng.random_range(0.0..total);
                for &a in &candidates {
                    let p = node.prior[a.index()];
                    if u < p {
                        return a;
                    }
                    u -= p;
                }
                // Rounding left `u` just past the last bucket.
                return *candidates
                    .iter()
                    .rev()
                    .find(|a| node.prior[a.index()] > 0.0)
                    .unwrap();
            }
        }
        candidates[rng.random_range(0..candidates.len())]
    }

    /// Backs the value of `leaf` up to the root.
    ///
    /// The leaf contributes `r(leaf) + γ v(leaf)`; every ancestor `x` then
    /// adds `r(x) + γ G` where `G` is the contribution of the child below it.
    /// Heights along the path are refreshed on the way.
    pub fn backup(&mut self, leaf: NodeId, discount: f64) {
        let node = &mut self[leaf];
        let mut g = node.reward_in + discount * node.value_est;
        node.visit_count += 1;
        node.value_sum += g;
        let mut child_height = node.height;
        let mut cur = leaf;
        while let Some((parent, _)) = self[cur].parent {
            let p = &mut self[parent];
            g = p.reward_in + discount * g;
            p.visit_count += 1;
            p.value_sum += g;
            p.height = p.height.max(child_height + 1);
            child_height = p.height;
            cur = parent;
        }
    }

    /// Runs planning iterations until `budget` units are spent. Each
    /// iteration either expands a new node, prunes a looping action, or
    /// revisits a terminal node. All three cost one unit, except that a pruned
    /// expansion is refunded when `cfg.charge_loops` is off. Refunds cannot
    /// recur forever: every one removes an action from the finite tree.
    pub fn run<E: Evaluator + ?Sized, R: Rng + ?Sized>(
        &mut self,
        budget: usize,
        env: &MazeConfig,
        eval: &E,
        cfg: &SearchConfig,
        rng: &mut R,
    ) -> Result<()> {
        cfg.validate()?;
        let target_count = self.expansion_count + budget;
        while self.expansion_count < target_count {
            let (_, target) = self.select_path(cfg, rng)?;
            self.stats.iterations += 1;
            if self[target].terminal {
                self.expansion_count += 1;
                self.stats.terminal_visits += 1;
                self.backup(target, cfg.discount);
                continue;
            }
            match self.expand(target, env, eval, cfg, rng) {
                Expansion::Child(child) => self.backup(child, cfg.discount),
                Expansion::LoopPruned { dead_root: true, .. } => return Err(Error::DeadRoot),
                Expansion::LoopPruned { .. } => {
                    if !cfg.charge_loops {
                        self.expansion_count -= 1;
                    }
                }
            }
        }
        Ok(())
    }

    /// Root action distribution proportional to child visit counts, over
    /// unpruned children.
    pub fn visit_count_policy(&self) -> Result<[f64; NUM_ACTIONS]> {
        let root = self.root_node();
        let mut counts = [0.0; NUM_ACTIONS];
        for a in Action::ALL {
            if let (Some(c), false) = (root.child(a), root.is_pruned(a)) {
                counts[a.index()] = self[c].visit_count as f64;
            }
        }
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(Error::NoChildren);
        }
        Ok(counts.map(|n| n / total))
    }

    /// Mixes Dirichlet noise into the root prior:
    /// `(1 - epsilon) * prior + epsilon * noise`.
    pub fn add_dirichlet_noise<R: Rng + ?Sized>(
        &mut self,
        epsilon: f64,
        alpha: f64,
        rng: &mut R,
    ) -> Result<()> {
        let noise = sample_dirichlet(alpha, rng)?;
        let root = self.root;
        add_noise(&mut self[root].prior, &noise, epsilon)
    }

    /// A new tree rooted at `id`, holding only its subtree. Statistics are
    /// copied unchanged except the new root's entering reward, which is
    /// zeroed.
    pub fn reroot(&self, id: NodeId) -> SearchTree {
        let mut nodes = Vec::new();
        let mut stack = vec![(id, None)];
        while let Some((old, parent)) = stack.pop() {
            let new_id = NodeId(nodes.len() as u32);
            let mut node = self[old].clone();
            node.parent = parent;
            node.children = [None; NUM_ACTIONS];
            nodes.push(node);
            if let Some((p, a)) = parent {
                nodes[p.index()].children[Action::index(a)] = Some(new_id);
            }
            // Reverse so children are laid out in action order.
            for (a, c) in self.children(old).collect::<Vec<_>>().into_iter().rev() {
                stack.push((c, Some((new_id, a))));
            }
        }
        nodes[0].reward_in = 0.0;
        SearchTree {
            nodes,
            root: NodeId(0),
            expansion_count: 0,
            stats: PlanStats::default(),
        }
    }

    /// Depth-first dump, one node per line:
    /// `<indent><action> <state> N=<n> Q=<mean> prior=[..] pruned=[..]`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut stack = vec![(self.root, None::<Action>, 0usize)];
        while let Some((id, via, depth)) = stack.pop() {
            let n = &self[id];
            let label = via.map_or("root".to_string(), |a| format!("{a:?}"));
            let prior: Vec<String> = n.prior.iter().map(|p| format!("{p:.4}")).collect();
            let pruned: Vec<String> = Action::ALL
                .into_iter()
                .filter(|a| n.is_pruned(*a))
                .map(|a| format!("{a:?}"))
                .collect();
            let _ = writeln!(
                out,
                "{}{} {} N={} Q={:.6} prior=[{}] pruned=[{}]{}",
                "  ".repeat(depth),
                label,
                n.state,
                n.visit_count,
                n.mean_value(),
                prior.join(","),
                pruned.join(","),
                if n.terminal { " terminal" } else { "" }
            );
            for (a, c) in self.children(id).collect::<Vec<_>>().into_iter().rev() {
                stack.push((c, Some(a), depth + 1));
            }
        }
        out
    }

    /// Test and verification hook for building trees by hand.
    pub fn push_child(&mut self, parent: NodeId, action: Action, node: Node) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        let mut node = node;
        node.parent = Some((parent, action));
        self.nodes.push(node);
        self[parent].children[action.index()] = Some(id);
        id
    }
}

/// Builds a fresh tree at `root_state` and runs `budget` iterations.
pub fn plan<E: Evaluator + ?Sized, R: Rng + ?Sized>(
    root_state: Cell,
    budget: usize,
    env: &MazeConfig,
    eval: &E,
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<SearchTree> {
    if budget == 0 {
        return Err(Error::InvalidArgument("planning budget must be at least 1".into()));
    }
    let mut tree = SearchTree::new(root_state, env, eval, cfg.discount);
    tree.run(budget, env, eval, cfg, rng)?;
    Ok(tree)
}

pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<[f64; NUM_ACTIONS]> {
    let dist = Dirichlet::new([alpha; NUM_ACTIONS])
        .map_err(|e| Error::InvalidArgument(format!("dirichlet alpha {alpha}: {e}")))?;
    Ok(dist.sample(rng))
}

pub fn add_noise(prior: &mut [f64; NUM_ACTIONS], noise: &[f64; NUM_ACTIONS], epsilon: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} not in [0,1]")));
    }
    for (p, n) in prior.iter_mut().zip(noise) {
        *p = (1.0 - epsilon) * *p + epsilon * n;
    }
    Ok(())
}

/// The index maximizing `score`, ties broken uniformly at random.
pub(crate) fn argmax_by<T: Copy, R: Rng + ?Sized>(
    items: impl IntoIterator<Item = T>,
    mut score: impl FnMut(T) -> f64,
    rng: &mut R,
) -> Option<T> {
    let mut best = f64::NEG_INFINITY;
    let mut ties: Vec<T> = Vec::new();
    for item in items {
        let s = score(item);
        if s > best {
            best = s;
            ties.clear();
            ties.push(item);
        } else if s == best {
            ties.push(item);
        }
    }
    match ties.len() {
        0 => None,
        1 => Some(ties[0]),
        n => Some(ties[rng.random_range(0..n)]),
    }
}

/// A maximizing action of `policy`, ties broken uniformly at random.
pub fn argmax_action<R: Rng + ?Sized>(policy: &[f64; NUM_ACTIONS], rng: &mut R) -> Action {
    argmax_by(Action::ALL, |a| policy[a.index()], rng).expect("four actions")
}

/// Draws an action from a distribution.
pub fn sample_action<R: Rng + ?Sized>(policy: &[f64; NUM_ACTIONS], rng: &mut R) -> Action {
    let mut u: f64 = rng.random_range(0.0..1.0);
    for a in Action::ALL {
        let p = policy[a.index()];
        if u < p {
            return a;
        }
        u -= p;
    }
    *Action::ALL
        .iter()
        .rev()
        .find(|a| policy[a.index()] > 0.0)
        .expect("policy has positive mass")
}

/// Structural checks over a whole tree, written independently of the code
/// that maintains the statistics.
pub mod invariants {
    use super::*;

    /// `N(x) = 1 + Σ N(child)` at every non-terminal node.
    pub fn visit_conservation(tree: &SearchTree) -> std::result::Result<(), String> {
        for (id, node) in tree.nodes() {
            if node.terminal {
                continue;
            }
            let sum: u32 = tree.children(id).map(|(_, c)| tree[c].visit_count).sum();
            if node.visit_count != 1 + sum {
                return Err(format!(
                    "node {id:?} at {}: N = {} but 1 + children = {}",
                    node.state,
                    node.visit_count,
                    1 + sum
                ));
            }
        }
        Ok(())
    }

    /// Recomputes `Q̄` bottom-up from rewards, value estimates and visit
    /// counts and compares it with the stored running mean.
    pub fn q_recursion(tree: &SearchTree, discount: f64, tol: f64) -> std::result::Result<f64, String> {
        fn q(tree: &SearchTree, id: NodeId, discount: f64, worst: &mut f64, tol: f64) -> std::result::Result<f64, String> {
            let node = &tree[id];
            let n = node.visit_count as f64;
            let mut value = node.reward_in + discount * node.value_est / n;
            for (_, c) in tree.children(id) {
                let child_q = q(tree, c, discount, worst, tol)?;
                value += discount * tree[c].visit_count as f64 / n * child_q;
            }
            let stored = node.mean_value();
            let err = (stored - value).abs();
            *worst = worst.max(err);
            if err > tol {
                return Err(format!(
                    "node {id:?} at {}: stored Q̄ {stored} vs recursion {value}",
                    node.state
                ));
            }
            Ok(value)
        }
        let mut worst = 0.0;
        q(tree, tree.root(), discount, &mut worst, tol)?;
        Ok(worst)
    }

    /// Cached heights equal the longest downward path length.
    pub fn heights(tree: &SearchTree) -> std::result::Result<(), String> {
        fn h(tree: &SearchTree, id: NodeId) -> u32 {
            tree.children(id).map(|(_, c)| 1 + h(tree, c)).max().unwrap_or(0)
        }
        for (id, node) in tree.nodes() {
            let expect = h(tree, id);
            if node.height != expect {
                return Err(format!("node {id:?}: height {} expected {expect}", node.height));
            }
        }
        Ok(())
    }

    /// The first root-to-node path that visits some state twice, if any.
    pub fn repeated_state_path(tree: &SearchTree) -> Option<Vec<Cell>> {
        let mut stack = vec![(tree.root(), vec![tree.root_node().state])];
        while let Some((id, path)) = stack.pop() {
            for (_, c) in tree.children(id) {
                let s = tree[c].state;
                let mut next = path.clone();
                next.push(s);
                if path.contains(&s) {
                    return Some(next);
                }
                stack.push((c, next));
            }
        }
        None
    }

    pub fn all(tree: &SearchTree, discount: f64, tol: f64) -> std::result::Result<(), String> {
        visit_conservation(tree)?;
        q_recursion(tree, discount, tol)?;
        heights(tree)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{build_maze, MazeVariant};
    use crate::net::{InputEncoding, NetworkOutput, NetworkParams};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const GAMMA: f64 = 0.95;

    /// Fixed output everywhere.
    struct Constant(NetworkOutput);

    impl Evaluator for Constant {
        fn evaluate(&self, _: Cell) -> NetworkOutput {
            self.0.clone()
        }
    }

    fn uniform(value: f64) -> Constant {
        Constant(NetworkOutput {
            policy: [0.25; NUM_ACTIONS],
            value,
        })
    }

    /// Value `γ^(d-1)` at BFS distance `d` from the goal: strictly decreasing
    /// away from it.
    struct Tabular(MazeConfig, Vec<Option<usize>>);

    impl Tabular {
        fn new(env: &MazeConfig) -> Self {
            Tabular(env.clone(), env.distances_from(env.goal()))
        }
    }

    impl Evaluator for Tabular {
        fn evaluate(&self, cell: Cell) -> NetworkOutput {
            let d = self.1[cell.row * self.0.ncols() + cell.col].unwrap();
            NetworkOutput {
                policy: [0.25; NUM_ACTIONS],
                value: GAMMA.powi(d as i32 - 1),
            }
        }
    }

    fn empty_maze() -> MazeConfig {
        MazeConfig::new(8, Cell::new(0, 0), Cell::new(7, 7), [], 100, GAMMA).unwrap()
    }

    fn node(state: Cell, visits: u32, value_sum: f64, prior: [f64; 4]) -> Node {
        Node {
            state,
            reward_in: 0.0,
            prior,
            value_est: 0.0,
            visit_count: visits,
            value_sum,
            children: [None; 4],
            pruned: [false; 4],
            terminal: false,
            height: 0,
            parent: None,
        }
    }

    fn root_with(visits: u32, prior: [f64; 4]) -> SearchTree {
        let mut tree = SearchTree::new(Cell::new(3, 3), &empty_maze(), &uniform(0.0), GAMMA);
        let root = tree.root();
        tree[root].visit_count = visits;
        tree[root].prior = prior;
        tree
    }

    #[test]
    fn puct_examples() {
        let mut tree = root_with(4, [0.5, 0.5, 0.0, 0.0]);
        let root = tree.root();
        tree.push_child(root, Action::Left, node(Cell::new(3, 2), 1, 0.0, [0.25; 4]));
        assert_eq!(tree.puct_score(root, Action::Left, 1.0), 0.5);
        tree.push_child(root, Action::Right, node(Cell::new(3, 4), 2, 0.7, [0.25; 4]));
        assert_eq!(tree.puct_score(root, Action::Right, 0.0), 0.35);
    }

    #[test]
    fn uct_examples() {
        let mut tree = root_with(1, [0.25; 4]);
        let root = tree.root();
        tree.push_child(root, Action::Up, node(Cell::new(2, 3), 1, 0.3, [0.25; 4]));
        assert_eq!(tree.uct_score(root, Action::Up, 2.0), 0.3);
        // N(x) = 7 ≈ e², N(child) = 2: exploration ≈ √(2/2) = 1.
        tree[root].visit_count = 7;
        let mut zeroed = tree.clone();
        let up = tree.root_node().child(Action::Up).unwrap();
        zeroed[up].visit_count = 2;
        zeroed[up].value_sum = 0.0;
        let s = zeroed.uct_score(root, Action::Up, 1.0);
        assert_eq!(s, (7f64.ln() / 2.0).sqrt());
        assert!((s - 1.0).abs() < 0.02);
    }

    #[test]
    fn scores_match_scalar_recomputation() {
        let mut tree = root_with(9, [0.2, 0.3, 0.5, 0.0]);
        let root = tree.root();
        let kids = [(Action::Left, 2, 0.4), (Action::Right, 3, 1.5), (Action::Up, 3, -0.3)];
        for (i, &(a, n, sum)) in kids.iter().enumerate() {
            tree.push_child(root, a, node(Cell::new(i, 0), n, sum, [0.25; 4]));
        }
        for &(a, n, sum) in &kids {
            let q = sum / n as f64;
            let prior = [0.2, 0.3, 0.5, 0.0][a.index()];
            let puct = q + 0.7 * prior * 3.0 / (1.0 + n as f64);
            let uct = q + 0.7 * (9f64.ln() / n as f64).sqrt();
            assert!((tree.puct_score(root, a, 0.7) - puct).abs() < 1e-15);
            assert!((tree.uct_score(root, a, 0.7) - uct).abs() < 1e-15);
        }
    }

    #[test]
    fn fresh_root_selects_itself() {
        let tree = root_with(1, [0.25; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (path, target) = tree
            .select_path(&SearchConfig::new(SelectionRule::Puct, 1.0, GAMMA), &mut rng)
            .unwrap();
        assert!(path.is_empty());
        assert_eq!(target, tree.root());
    }

    #[test]
    fn selection_stops_at_node_with_unexpanded_action() {
        let mut tree = root_with(2, [0.25; 4]);
        let root = tree.root();
        tree.push_child(root, Action::Left, node(Cell::new(3, 2), 1, 1.0, [0.25; 4]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (path, target) = tree
            .select_path(&SearchConfig::new(SelectionRule::Uct, 0.0, GAMMA), &mut rng)
            .unwrap();
        assert!(path.is_empty());
        assert_eq!(target, root);
    }

    /// Root with all four children; the best child (by Q̄) again fully
    /// expanded, whose best child has an unexpanded action.
    fn three_levels() -> (SearchTree, Vec<(NodeId, Action)>, NodeId) {
        let mut tree = root_with(20, [0.25; 4]);
        let root = tree.root();
        let qs = [0.1, 0.9, 0.4, 0.2];
        let mut mid = None;
        for a in Action::ALL {
            let id = tree.push_child(root, a, node(Cell::new(a.index(), 0), 4, 4.0 * qs[a.index()], [0.25; 4]));
            if a == Action::Right {
                mid = Some(id);
            }
        }
        let mid = mid.unwrap();
        let qs2 = [0.3, 0.1, 0.2, 0.6];
        let mut leaf = None;
        for a in Action::ALL {
            let id = tree.push_child(mid, a, node(Cell::new(a.index(), 1), 1, qs2[a.index()], [0.25; 4]));
            if a == Action::Down {
                leaf = Some(id);
            }
        }
        let leaf = leaf.unwrap();
        tree.push_child(leaf, Action::Left, node(Cell::new(0, 2), 1, 0.0, [0.25; 4]));
        (tree, vec![(root, Action::Right), (mid, Action::Down)], leaf)
    }

    #[test]
    fn hand_traced_three_level_path() {
        let (tree, expected_path, expected_target) = three_levels();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for rule in [SelectionRule::Puct, SelectionRule::Uct] {
            let (path, target) = tree.select_path(&SearchConfig::new(rule, 0.0, GAMMA), &mut rng).unwrap();
            assert_eq!(path, expected_path);
            assert_eq!(target, expected_target);
        }
    }

    #[test]
    fn dead_root_is_reported() {
        let mut tree = root_with(1, [0.25; 4]);
        let root = tree.root();
        tree[root].pruned = [true; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = tree.select_path(&SearchConfig::new(SelectionRule::Uct, 0.0, GAMMA), &mut rng);
        assert!(matches!(err, Err(Error::DeadRoot)));
    }

    #[test]
    fn expanding_into_the_goal() {
        let env = empty_maze();
        let mut tree = SearchTree::new(Cell::new(7, 6), &env, &uniform(0.5), GAMMA);
        let root = tree.root();
        // Prune everything but Right so the sampled action is forced.
        tree[root].pruned = [true, false, true, true];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SearchConfig::new(SelectionRule::Puct, 1.0, GAMMA);
        let Expansion::Child(child) = tree.expand(root, &env, &uniform(0.5), &cfg, &mut rng) else {
            panic!("expected a child");
        };
        assert_eq!(tree.expansion_count, 1);
        let c = &tree[child];
        assert!(c.terminal);
        assert_eq!((c.reward_in, c.value_est, c.state), (1.0, 0.0, Cell::new(7, 7)));
        tree.backup(child, GAMMA);
        // Terminal leaf contributes its reward; the parent adds γ·1.
        assert_eq!(tree[child].value_sum, 1.0);
        assert_eq!(tree[root].value_sum, GAMMA * 0.5 + GAMMA * 1.0);
    }

    #[test]
    fn uniform_expansion_frequencies() {
        let env = empty_maze();
        let eval = Constant(NetworkOutput {
            policy: [0.7, 0.1, 0.1, 0.1],
            value: 0.0,
        });
        let cfg = SearchConfig::new(SelectionRule::Uct, 1.0, GAMMA);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..trials {
            let mut tree = SearchTree::new(Cell::new(3, 3), &env, &eval, GAMMA);
            let root = tree.root();
            let Expansion::Child(c) = tree.expand(root, &env, &eval, &cfg, &mut rng) else {
                unreachable!()
            };
            counts[tree[c].parent.unwrap().1.index()] += 1;
        }
        let sigma = (trials as f64 * 0.25 * 0.75).sqrt();
        for n in counts {
            assert!((n as f64 - 2500.0).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn prior_expansion_frequencies() {
        let env = empty_maze();
        let prior = [0.1, 0.2, 0.3, 0.4];
        let eval = Constant(NetworkOutput { policy: prior, value: 0.0 });
        let cfg = SearchConfig::new(SelectionRule::Puct, 1.0, GAMMA);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let trials = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..trials {
            let mut tree = SearchTree::new(Cell::new(3, 3), &env, &eval, GAMMA);
            let root = tree.root();
            let Expansion::Child(c) = tree.expand(root, &env, &eval, &cfg, &mut rng) else {
                unreachable!()
            };
            counts[tree[c].parent.unwrap().1.index()] += 1;
        }
        for (n, p) in counts.iter().zip(prior) {
            let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
            assert!((*n as f64 - trials as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn two_node_recursion() {
        let env = empty_maze();
        let eval = Constant(NetworkOutput {
            policy: [0.25; 4],
            value: 0.4,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tree = plan(Cell::new(3, 3), 1, &env, &eval, &SearchConfig::new(SelectionRule::Puct, 1.0, GAMMA), &mut rng).unwrap();
        assert_eq!(tree.len(), 2);
        let (_, child) = tree.children(tree.root()).next().unwrap();
        let q_child = 0.0 + GAMMA * 0.4;
        assert!((tree[child].mean_value() - q_child).abs() < 1e-15);
        let q_root = GAMMA * 0.4 / 2.0 + GAMMA * 0.5 * q_child;
        assert!((tree.root_node().mean_value() - q_root).abs() < 1e-15);
    }

    #[test]
    fn budget_is_spent_exactly() {
        let env = build_maze(MazeVariant::LR, true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = NetworkParams::new(8, 2, InputEncoding::Raw, &mut rng);
        for budget in [1, 2, 7, 64, 200] {
            for rule in [SelectionRule::Puct, SelectionRule::Uct] {
                let cfg = SearchConfig::new(rule, 0.5, GAMMA);
                let tree = plan(Cell::new(6, 6), budget, &env, &net, &cfg, &mut rng).unwrap();
                assert_eq!(tree.expansion_count, budget);
                assert_eq!(tree.stats.iterations, budget);
                assert_eq!(tree.stats.nodes_created + tree.stats.terminal_visits, budget);
                invariants::all(&tree, GAMMA, 1e-9).unwrap();
            }
        }
    }

    #[test]
    fn loop_pruning_is_charged_only_when_asked() {
        let env = build_maze(MazeVariant::LR, true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = NetworkParams::new(8, 2, InputEncoding::Raw, &mut rng);
        for budget in [1, 16, 64] {
            let free = SearchConfig::new(SelectionRule::Uct, 0.0, GAMMA).with_loop_blocking(0.0);
            let tree = plan(Cell::new(0, 0), budget, &env, &net, &free, &mut rng).unwrap();
            assert_eq!(tree.expansion_count, budget);
            assert_eq!(tree.stats.nodes_created + tree.stats.terminal_visits, budget);
            assert!(tree.stats.loops_pruned > 0 || budget == 1);

            let charged = SearchConfig { charge_loops: true, ..free };
            let tree = plan(Cell::new(0, 0), budget, &env, &net, &charged, &mut rng).unwrap();
            assert_eq!(tree.expansion_count, budget);
            let s = tree.stats;
            assert_eq!(s.nodes_created + s.terminal_visits + s.loops_pruned, budget);
        }
    }

    #[test]
    fn greedy_search_digs_towards_the_goal() {
        let env = empty_maze();
        let eval = Tabular::new(&env);
        let cfg = SearchConfig::new(SelectionRule::Uct, 0.0, GAMMA);
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tree = plan(Cell::new(2, 2), 64, &env, &eval, &cfg, &mut rng).unwrap();
            // Follow the deepest child from the root.
            let mut cur = tree.root();
            let mut steps = 0;
            while let Some((_, next)) = tree
                .children(cur)
                .max_by_key(|&(_, c)| (tree[c].height, tree[c].visit_count))
            {
                let before = eval.1[tree[cur].state.row * 8 + tree[cur].state.col].unwrap();
                let after = eval.1[tree[next].state.row * 8 + tree[next].state.col].unwrap();
                if steps < 3 {
                    assert_eq!(after + 1, before, "seed {seed}: step {steps} moves away from the goal");
                }
                cur = next;
                steps += 1;
            }
            assert!(steps >= 3);
        }
    }

    #[test]
    fn zero_c_rules_coincide() {
        let env = build_maze(MazeVariant::RL, true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = NetworkParams::new(8, 2, InputEncoding::Raw, &mut rng);
        for sampling in [ExpansionSampling::Prior, ExpansionSampling::Uniform] {
            for seed in 0..5 {
                let mut a = SearchConfig::new(SelectionRule::Puct, 0.0, GAMMA);
                let mut b = SearchConfig::new(SelectionRule::Uct, 0.0, GAMMA);
                a.expansion = sampling;
                b.expansion = sampling;
                let ta = plan(Cell::new(1, 1), 48, &env, &net, &a, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let tb = plan(Cell::new(1, 1), 48, &env, &net, &b, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                assert_eq!(ta.dump(), tb.dump());
            }
        }
    }

    #[test]
    fn visit_count_policy_examples() {
        let mut tree = root_with(5, [0.25; 4]);
        let root = tree.root();
        assert!(matches!(tree.visit_count_policy(), Err(Error::NoChildren)));
        tree.push_child(root, Action::Left, node(Cell::new(3, 2), 3, 0.0, [0.25; 4]));
        assert_eq!(tree.visit_count_policy().unwrap(), [1.0, 0.0, 0.0, 0.0]);
        tree.push_child(root, Action::Right, node(Cell::new(3, 4), 1, 0.0, [0.25; 4]));
        assert_eq!(tree.visit_count_policy().unwrap(), [0.75, 0.25, 0.0, 0.0]);
        tree[root].pruned[Action::Right.index()] = true;
        assert_eq!(tree.visit_count_policy().unwrap(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dirichlet_noise_examples() {
        let prior = [0.1, 0.2, 0.3, 0.4];
        let mut p = prior;
        add_noise(&mut p, &[0.25; 4], 0.0).unwrap();
        assert_eq!(p, prior);
        let noise = sample_dirichlet(2.5, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut p = prior;
        add_noise(&mut p, &noise, 1.0).unwrap();
        assert_eq!(p, noise);
        assert!(add_noise(&mut p, &noise, 1.5).is_err());
        assert!(sample_dirichlet(0.0, &mut ChaCha8Rng::seed_from_u64(5)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let mut tree = root_with(1, prior);
            tree.add_dirichlet_noise(0.4, 2.5, &mut rng).unwrap();
            let p = tree.root_node().prior;
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn argmax_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(argmax_action(&[0.75, 0.25, 0.0, 0.0], &mut rng), Action::Left);
        assert_eq!(argmax_action(&[0.0, 0.0, 0.0, 1.0], &mut rng), Action::Down);
        let trials = 8000;
        let mut counts = [0usize; 4];
        for _ in 0..trials {
            counts[argmax_action(&[0.25; 4], &mut rng).index()] += 1;
        }
        let sigma = (trials as f64 * 0.25 * 0.75).sqrt();
        for n in counts {
            assert!((n as f64 - 2000.0).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn dump_golden() {
        let (tree, _, _) = three_levels();
        let expected = "\
root (3,3) N=20 Q=0.000000 prior=[0.2500,0.2500,0.2500,0.2500] pruned=[]
  Left (0,0) N=4 Q=0.100000 prior=[0.2500,0.2500,0.2500,0.2500] pruned=[]
  Right (1,0) N=4 Q=0.900000 prior=[0.2500,0.2500,0.2500,0.2500] pruned=[]
    Left (0,1) N=1 Q=0.300000 prior=[0.2500,0.2500,0.2500,0.2500] pruned=[]
    Right (1,1) N=1 Q=0.100000 prior=[0.2500,0.2500,0.2500,0.2500] pruned=[]
    Up (2,1) N=1 Q=0.200000 prior=[0.2500,0.2500,0.2500,0.2500] pruned=[]
    Down (3,1) N=1 Q=0.600000 prior=[0.2500,0.2500,0.2500,0.2500] pruned=[]
      Left (0,2) N=1 Q=0.000000 prior=[0.2500,0.2500,0.2500,0.2500] pruned=[]
  Up (2,0) N=4 Q=0.400000 prior=[0.2500,0.2500,0.2500,0.2500] pruned=[]
  Down (3,0) N=4 Q=0.200000 prior=[0.2500,0.2500,0.2500,0.2500] pruned=[]
";
        assert_eq!(tree.dump(), expected);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn random_plans_keep_invariants(seed in any::<u64>(), budget in 1usize..64, c in prop::sample::select(vec![0.0, 0.5, 1.0]), uct in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let env = crate::selftest::random_maze(&mut rng);
            let net = NetworkParams::new(6, 2, InputEncoding::Normalized { ncols: 8 }, &mut rng);
            let rule = if uct { SelectionRule::Uct } else { SelectionRule::Puct };
            let root = env.free_cells().find(|&c| c != env.goal()).unwrap();
            let tree = plan(root, budget, &env, &net, &SearchConfig::new(rule, c, GAMMA), &mut rng).unwrap();
            prop_assert_eq!(tree.expansion_count, budget);
            prop_assert!(invariants::all(&tree, GAMMA, 1e-9).is_ok());
            let pi = tree.visit_count_policy().unwrap();
            prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
