//! Prints the path of one test episode and the maze it runs in.
//!
//! ```text
//! cargo run --example trace_episode -- <checkpoint.json> <test variant> <agent> <budget> [train seed] [eval seed]
//! ```

use std::path::PathBuf;

use deepplan::experiments::{episode_rng, AgentSpec};
use deepplan::edp::{edp_plan, StepContext};
use deepplan::gridworld::{build_maze, MazeVariant};
use deepplan::net::Checkpoint;
use deepplan::training::TabulatedNet;

fn main() -> deepplan::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 4 {
        eprintln!("usage: trace_episode <checkpoint.json> <test variant> <agent> <budget> [train seed] [eval seed]");
        std::process::exit(2);
    }
    let ckpt = Checkpoint::load(&PathBuf::from(&args[0]))?;
    let test: MazeVariant = args[1].parse()?;
    let agent = AgentSpec::from_label(&args[2], None)?;
    let budget: usize = args[3].parse().expect("budget is an integer");
    let train_seed = args.get(4).map_or(0, |s| s.parse().expect("seed"));
    let eval_seed = args.get(5).map_or(0, |s| s.parse().expect("seed"));

    let env = build_maze(test, true);
    let net = TabulatedNet::new(&ckpt.params, env.ncols())?;
    let mut rng = episode_rng(train_seed, eval_seed);
    let mut ctx = StepContext::new();
    let mut state = env.reset();
    let mut path = vec![state.cell];
    loop {
        let report = edp_plan(state.cell, budget, &env, &net, &agent.edp, &mut ctx, &mut rng)?;
        let outcome = env.step(&state, report.action)?;
        state = outcome.state;
        path.push(state.cell);
        if outcome.terminal {
            break;
        }
    }
    println!("{}", env.to_text());
    let mut grid: Vec<Vec<String>> = (0..env.ncols())
        .map(|r| {
            (0..env.ncols())
                .map(|c| {
                    let cell = deepplan::gridworld::Cell::new(r, c);
                    if env.is_obstacle(cell) { " ##".into() } else { "  .".into() }
                })
                .collect()
        })
        .collect();
    for (t, c) in path.iter().enumerate() {
        grid[c.row][c.col] = format!("{t:>3}");
    }
    for row in grid {
        println!("{}", row.concat());
    }
    println!("steps: {}, reached goal: {}", path.len() - 1, state.cell == env.goal());
    Ok(())
}
