//! Deterministic square grid-world mazes.
//!
//! The agent starts in the upper-left corner and must reach the goal in the
//! lower-right corner. Two horizontal walls cross the grid, each with a single
//! one-cell hole. Moving into a wall or off the grid leaves the agent where it
//! is, with no penalty. Entering the goal pays a reward of 1 and ends the
//! episode; every other transition pays 0.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A grid cell addressed as `(row, col)`, row 0 at the top.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }

    /// Coordinates as a real vector, the representation fed to the network.
    pub fn to_vec(self) -> [f64; 2] {
        [self.row as f64, self.col as f64]
    }

    /// Euclidean distance between the coordinate vectors of two cells.
    pub fn distance(self, other: Cell) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        (dr * dr + dc * dc).sqrt()
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

impl FromStr for Cell {
    type Err = Error;

    /// Parses `"3,5"` or `"(3,5)"`.
    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.trim().trim_start_matches('(').trim_end_matches(')');
        let mut parts = trimmed.split(',').map(str::trim);
        let bad = || Error::InvalidArgument(format!("expected `row,col`, got `{s}`"));
        let row = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let col = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Cell { row, col })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Left,
    Right,
    Up,
    Down,
}

impl Action {
    pub const COUNT: usize = 4;
    pub const ALL: [Action; 4] = [Action::Left, Action::Right, Action::Up, Action::Down];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Action::ALL.get(index).copied()
    }
}

/// Which side each wall's hole is on: the first letter names the upper wall,
/// the second the lower wall.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MazeVariant {
    LR,
    RL,
    LL,
    RR,
}

impl MazeVariant {
    pub const ALL: [MazeVariant; 4] = [
        MazeVariant::LR,
        MazeVariant::RL,
        MazeVariant::LL,
        MazeVariant::RR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MazeVariant::LR => "LR",
            MazeVariant::RL => "RL",
            MazeVariant::LL => "LL",
            MazeVariant::RR => "RR",
        }
    }

    fn holes(self) -> (Side, Side) {
        match self {
            MazeVariant::LR => (Side::Left, Side::Right),
            MazeVariant::RL => (Side::Right, Side::Left),
            MazeVariant::LL => (Side::Left, Side::Left),
            MazeVariant::RR => (Side::Right, Side::Right),
        }
    }
}

impl fmt::Display for MazeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MazeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        let name = upper.strip_prefix("MAZE_").unwrap_or(&upper);
        match name {
            "LR" => Ok(MazeVariant::LR),
            "RL" => Ok(MazeVariant::RL),
            "LL" => Ok(MazeVariant::LL),
            "RR" => Ok(MazeVariant::RR),
            _ => Err(Error::InvalidArgument(format!("unknown maze variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy)]
enum Side {
    Left,
    Right,
}

/// Geometry shared by the four maze variants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeLayout {
    pub size: usize,
    pub upper_wall_row: usize,
    pub lower_wall_row: usize,
    pub train_max_steps: usize,
    pub test_max_steps: usize,
    pub discount: f64,
}

pub const DEFAULT_LAYOUT: MazeLayout = MazeLayout {
    size: 8,
    upper_wall_row: 2,
    lower_wall_row: 5,
    train_max_steps: 200,
    test_max_steps: 100,
    discount: 0.95,
};

impl MazeLayout {
    pub fn build(&self, variant: MazeVariant, test_time: bool) -> MazeConfig {
        let n = self.size;
        let (upper, lower) = variant.holes();
        let hole_col = |side: Side| match side {
            Side::Left => 0,
            Side::Right => n - 1,
        };
        let mut obstacles = Vec::with_capacity(2 * (n - 1));
        for (row, side) in [(self.upper_wall_row, upper), (self.lower_wall_row, lower)] {
            let hole = hole_col(side);
            obstacles.extend((0..n).filter(|&c| c != hole).map(|c| Cell::new(row, c)));
        }
        let max_steps = if test_time {
            self.test_max_steps
        } else {
            self.train_max_steps
        };
        MazeConfig::new(
            n,
            Cell::new(0, 0),
            Cell::new(n - 1, n - 1),
            obstacles,
            max_steps,
            self.discount,
        )
        .expect("built-in maze layout is valid")
    }
}

/// Builds one of the four 8x8 maze variants. Test-time mazes use the
/// 100-step evaluation horizon, training mazes the 200-step episode cap.
pub fn build_maze(variant: MazeVariant, test_time: bool) -> MazeConfig {
    DEFAULT_LAYOUT.build(variant, test_time)
}

pub fn index_to_coords(index: usize, ncols: usize) -> Result<Cell> {
    if ncols == 0 || index >= ncols * ncols {
        return Err(Error::IndexOutOfRange { index, ncols });
    }
    Ok(Cell::new(index / ncols, index % ncols))
}

pub fn coords_to_index(cell: Cell, ncols: usize) -> Result<usize> {
    if cell.row >= ncols || cell.col >= ncols {
        return Err(Error::IndexOutOfRange {
            index: cell.row.saturating_mul(ncols).saturating_add(cell.col),
            ncols,
        });
    }
    Ok(cell.row * ncols + cell.col)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub cell: Cell,
    pub step_count: usize,
}

/// Outcome of a single model transition, with no notion of episode length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub cell: Cell,
    pub reward: f64,
    pub reached_goal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    /// Episode over, either by reaching the goal or by running out of steps.
    pub terminal: bool,
    /// Episode cut by the step limit rather than by reaching the goal.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeConfig {
    ncols: usize,
    start: Cell,
    goal: Cell,
    obstacles: Vec<bool>,
    max_steps: usize,
    discount: f64,
}

impl MazeConfig {
    pub fn new(
        ncols: usize,
        start: Cell,
        goal: Cell,
        obstacles: impl IntoIterator<Item = Cell>,
        max_steps: usize,
        discount: f64,
    ) -> Result<Self> {
        if ncols == 0 {
            return Err(Error::InvalidMaze("grid must be non-empty".into()));
        }
        if max_steps == 0 {
            return Err(Error::InvalidMaze("max_steps must be positive".into()));
        }
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(Error::InvalidMaze(format!("discount {discount} not in (0,1]")));
        }
        let mut blocked = vec![false; ncols * ncols];
        for cell in obstacles {
            blocked[coords_to_index(cell, ncols)?] = true;
        }
        let start_idx = coords_to_index(start, ncols)?;
        let goal_idx = coords_to_index(goal, ncols)?;
        if blocked[start_idx] || blocked[goal_idx] {
            return Err(Error::InvalidMaze("start and goal must be free cells".into()));
        }
        if start == goal {
            return Err(Error::InvalidMaze("start and goal coincide".into()));
        }
        let config = MazeConfig {
            ncols,
            start,
            goal,
            obstacles: blocked,
            max_steps,
            discount,
        };
        config.shortest_path_length()?;
        Ok(config)
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn start(&self) -> Cell {
        self.start
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps.max(1);
        self
    }

    pub fn is_obstacle(&self, cell: Cell) -> bool {
        coords_to_index(cell, self.ncols)
            .map(|i| self.obstacles[i])
            .unwrap_or(true)
    }

    pub fn obstacles(&self) -> impl Iterator<Item = Cell> + '_ {
        self.obstacles
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| Cell::new(i / self.ncols, i % self.ncols))
    }

    /// Free cells in row-major order.
    pub fn free_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.ncols * self.ncols)
            .filter(|&i| !self.obstacles[i])
            .map(|i| Cell::new(i / self.ncols, i % self.ncols))
    }

    /// The cell reached by moving from `cell`, or `cell` itself if the move is
    /// blocked.
    pub fn neighbor(&self, cell: Cell, action: Action) -> Cell {
        let n = self.ncols;
        let target = match action {
            Action::Left if cell.col > 0 => Cell::new(cell.row, cell.col - 1),
            Action::Right if cell.col + 1 < n => Cell::new(cell.row, cell.col + 1),
            Action::Up if cell.row > 0 => Cell::new(cell.row - 1, cell.col),
            Action::Down if cell.row + 1 < n => Cell::new(cell.row + 1, cell.col),
            _ => return cell,
        };
        if self.is_obstacle(target) {
            cell
        } else {
            target
        }
    }

    /// The deterministic model used both by the real environment and by the
    /// planner's simulator.
    pub fn transition(&self, cell: Cell, action: Action) -> Transition {
        let next = self.neighbor(cell, action);
        let reached_goal = next == self.goal && cell != self.goal;
        Transition {
            cell: next,
            reward: if reached_goal { 1.0 } else { 0.0 },
            reached_goal,
        }
    }

    pub fn reset(&self) -> EnvState {
        EnvState {
            cell: self.start,
            step_count: 0,
        }
    }

    pub fn is_terminal(&self, state: &EnvState) -> bool {
        state.cell == self.goal || state.step_count >= self.max_steps
    }

    pub fn step(&self, state: &EnvState, action: Action) -> Result<StepOutcome> {
        if self.is_terminal(state) {
            return Err(Error::TerminalStep);
        }
        let t = self.transition(state.cell, action);
        let next = EnvState {
            cell: t.cell,
            step_count: state.step_count + 1,
        };
        let truncated = !t.reached_goal && next.step_count >= self.max_steps;
        Ok(StepOutcome {
            state: next,
            reward: t.reward,
            terminal: t.reached_goal || truncated,
            truncated,
        })
    }

    /// Breadth-first distances from `from` to every cell; `None` for cells
    /// that cannot be reached.
    pub fn distances_from(&self, from: Cell) -> Vec<Option<usize>> {
        let n = self.ncols;
        let mut dist = vec![None; n * n];
        let Ok(origin) = coords_to_index(from, n) else {
            return dist;
        };
        dist[origin] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(cell) = queue.pop_front() {
            let d = dist[cell.row * n + cell.col].unwrap();
            for action in Action::ALL {
                let next = self.neighbor(cell, action);
                let slot = &mut dist[next.row * n + next.col];
                if slot.is_none() {
                    *slot = Some(d + 1);
                    queue.push_back(next);
                }
            }
        }
        dist
    }

    pub fn shortest_path_length(&self) -> Result<usize> {
        self.shortest_path_from(self.start)
    }

    pub fn shortest_path_from(&self, from: Cell) -> Result<usize> {
        let idx = coords_to_index(self.goal, self.ncols)?;
        self.distances_from(from)[idx].ok_or(Error::Unreachable)
    }

    /// Renders the grid one row per line: `S` start, `G` goal, `#` obstacle,
    /// `.` free.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.ncols * (self.ncols + 1));
        for row in 0..self.ncols {
            for col in 0..self.ncols {
                let cell = Cell::new(row, col);
                out.push(if cell == self.start {
                    'S'
                } else if cell == self.goal {
                    'G'
                } else if self.is_obstacle(cell) {
                    '#'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, max_steps: usize, discount: f64) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        let n = rows.len();
        let mut start = None;
        let mut goal = None;
        let mut obstacles = Vec::new();
        for (r, line) in rows.iter().enumerate() {
            if line.chars().count() != n {
                return Err(Error::InvalidMaze(format!(
                    "row {r} has {} cells, expected {n}",
                    line.chars().count()
                )));
            }
            for (c, ch) in line.chars().enumerate() {
                let cell = Cell::new(r, c);
                match ch {
                    'S' if start.is_none() => start = Some(cell),
                    'G' if goal.is_none() => goal = Some(cell),
                    '#' => obstacles.push(cell),
                    '.' => {}
                    _ => {
                        return Err(Error::InvalidMaze(format!(
                            "unexpected `{ch}` at {cell}"
                        )))
                    }
                }
            }
        }
        let start = start.ok_or_else(|| Error::InvalidMaze("no start cell".into()))?;
        let goal = goal.ok_or_else(|| Error::InvalidMaze("no goal cell".into()))?;
        MazeConfig::new(n, start, goal, obstacles, max_steps, discount)
    }
}
