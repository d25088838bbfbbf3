//! Randomized invariant suites shared by the `selftest` command and the
//! acceptance tests: tree bookkeeping, the loss gradient, and loop freedom.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::edp::EdpConfig;
use crate::gridworld::{Cell, MazeConfig};
use crate::net::{gradcheck, InputEncoding, LossHyper, NetworkParams};
use crate::search::{self, invariants, SearchConfig, SelectionRule};

/// Outcome of one suite: how many cases ran and the first failure, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failure: Option<String>,
    /// Suite-specific figure worth printing, e.g. the worst gradient error.
    pub detail: String,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }

    pub fn line(&self) -> String {
        match &self.failure {
            None => format!("PASS {} ({} cases{})", self.name, self.cases, self.detail),
            Some(f) => format!("FAIL {} ({} cases): {f}", self.name, self.cases),
        }
    }
}

/// A random solvable maze of side 3 to 8 with up to a third of its cells
/// blocked.
pub fn random_maze<R: Rng + ?Sized>(rng: &mut R) -> MazeConfig {
    loop {
        let n = rng.random_range(3..=8);
        let cell = |rng: &mut R| Cell::new(rng.random_range(0..n), rng.random_range(0..n));
        let start = cell(rng);
        let goal = cell(rng);
        let k = rng.random_range(0..=n * n / 3);
        let obstacles: Vec<Cell> = (0..k)
            .map(|_| cell(rng))
            .filter(|&c| c != start && c != goal)
            .collect();
        if let Ok(m) = MazeConfig::new(n, start, goal, obstacles, 100, 0.95) {
            if start != goal {
                return m;
            }
        }
    }
}

fn random_free_cell<R: Rng + ?Sized>(maze: &MazeConfig, rng: &mut R) -> Cell {
    let cells: Vec<Cell> = maze.free_cells().filter(|&c| c != maze.goal()).collect();
    cells[rng.random_range(0..cells.len())]
}

fn random_net<R: Rng + ?Sized>(rng: &mut R) -> NetworkParams {
    let encoding = if rng.random_bool(0.5) {
        InputEncoding::Raw
    } else {
        InputEncoding::Normalized { ncols: 8 }
    };
    NetworkParams::new(rng.random_range(4..=16), rng.random_range(1..=2), encoding, rng)
}

/// Visit conservation, the mean-value recursion, and exact budget use on
/// `runs` random planning problems.
pub fn tree_invariants(runs: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport {
        name: "tree invariants",
        cases: 0,
        failure: None,
        detail: String::new(),
    };
    let mut worst = 0.0f64;
    for run in 0..runs {
        let maze = random_maze(&mut rng);
        let net = random_net(&mut rng);
        let budget = rng.random_range(1..=64);
        let rule = if run % 2 == 0 { SelectionRule::Puct } else { SelectionRule::Uct };
        let c = [0.0, 0.5, 1.0][rng.random_range(0..3)];
        let cfg = SearchConfig::new(rule, c, maze.discount());
        let root = random_free_cell(&maze, &mut rng);
        report.cases += 1;
        let fail = |msg: String| format!("run {run} ({rule:?}, c={c}, budget={budget}, root {root}): {msg}");
        let tree = match search::plan(root, budget, &maze, &net, &cfg, &mut rng) {
            Ok(t) => t,
            Err(e) => {
                report.failure = Some(fail(e.to_string()));
                return report;
            }
        };
        if tree.expansion_count != budget {
            report.failure = Some(fail(format!("expansion count {} != budget", tree.expansion_count)));
            return report;
        }
        if let Err(e) = invariants::visit_conservation(&tree).and_then(|_| invariants::heights(&tree)) {
            report.failure = Some(fail(e));
            return report;
        }
        match invariants::q_recursion(&tree, maze.discount(), 1e-9) {
            Ok(err) => worst = worst.max(err),
            Err(e) => {
                report.failure = Some(fail(e));
                return report;
            }
        }
    }
    report.detail = format!(", worst recursion error {worst:.2e}");
    report
}

/// Analytic against finite-difference loss gradients on random batches.
pub fn gradient_check(batches: usize, seed: u64, tolerance: f64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport {
        name: "gradient check",
        cases: 0,
        failure: None,
        detail: String::new(),
    };
    let hyper = LossHyper::default();
    let mut worst = 0.0f64;
    for i in 0..batches {
        let mut net = NetworkParams::new(rng.random_range(3..=8), 2, InputEncoding::Raw, &mut rng);
        net.encoding = InputEncoding::Normalized { ncols: 8 };
        let episodes = rng.random_range(1..=4);
        let batch = gradcheck::random_batch(&mut rng, episodes, 6);
        report.cases += 1;
        match gradcheck::check(&batch, &net, &hyper, 1e-6) {
            Ok(r) => {
                worst = worst.max(r.max_relative_error);
                if r.max_relative_error >= tolerance {
                    report.failure = Some(format!("batch {i}: relative error {:.3e}", r.max_relative_error));
                    return report;
                }
            }
            Err(e) => {
                report.failure = Some(format!("batch {i}: {e}"));
                return report;
            }
        }
    }
    report.detail = format!(", worst relative error {worst:.2e}");
    report
}

/// With blocking on and `eta = 0`, no root-to-leaf path of any tree repeats
/// a state.
pub fn loop_freedom(runs: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport {
        name: "loop freedom",
        cases: 0,
        failure: None,
        detail: String::new(),
    };
    let mut nodes = 0;
    for run in 0..runs {
        let maze = random_maze(&mut rng);
        let net = random_net(&mut rng);
        let budget = rng.random_range(1..=256);
        let c = [0.0, 0.5, 1.0][rng.random_range(0..3)];
        let rule = if run % 2 == 0 { SelectionRule::Uct } else { SelectionRule::Puct };
        let cfg = EdpConfig {
            c,
            rule,
            ..EdpConfig::default()
        }
        .search_config(maze.discount());
        let root = random_free_cell(&maze, &mut rng);
        let mut tree = search::SearchTree::new(root, &maze, &net, maze.discount());
        report.cases += 1;
        match tree.run(budget, &maze, &net, &cfg, &mut rng) {
            Ok(()) | Err(crate::error::Error::DeadRoot) => {}
            Err(e) => {
                report.failure = Some(format!("run {run}: {e}"));
                return report;
            }
        }
        nodes += tree.len();
        if let Some(path) = invariants::repeated_state_path(&tree) {
            report.failure = Some(format!("run {run}: repeated state on path {path:?}"));
            return report;
        }
    }
    report.detail = format!(", {nodes} nodes scanned");
    report
}

/// The quick suites run by the `selftest` command.
pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    vec![
        tree_invariants(200, seed),
        gradient_check(5, seed, 1e-4),
        loop_freedom(200, seed),
    ]
}
