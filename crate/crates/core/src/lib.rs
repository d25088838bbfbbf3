//! AlphaZero-style planning on small grid mazes, with an extra-deep planning
//! variant (greedy selection, tree reuse across steps, loop blocking) that
//! copes with mazes whose layout differs from the one the network was
//! trained on.
//!
//! The pieces, bottom up:
//!
//! * [`gridworld`]: the deterministic maze MDP and its four layouts.
//! * [`net`]: the policy-value MLP, its loss, gradients, Adam and checkpoints.
//! * [`search`]: the search tree with PUCT/UCT selection.
//! * [`edp`]: tree reuse and loop blocking on top of the search.
//! * [`training`]: self-play training.
//! * [`experiments`]: evaluation grids, ablations, sweeps and heatmaps.
//! * [`config`] and [`cli`]: the `deepplan` command line.
//!
//! ```
//! use deepplan::gridworld::{build_maze, MazeVariant};
//!
//! let maze = build_maze(MazeVariant::RL, true);
//! assert_eq!(maze.shortest_path_length().unwrap(), 28);
//! ```

pub mod cli;
pub mod config;
pub mod edp;
pub mod error;
pub mod experiments;
pub mod gridworld;
pub mod net;
pub mod search;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/getting_started.md")]
    mod getting_started {}
    #[doc = include_str!("../../../book/src/mazes.md")]
    mod mazes {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/search.md")]
    mod search {}
    #[doc = include_str!("../../../book/src/edp.md")]
    mod edp {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
