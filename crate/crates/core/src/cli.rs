//! Command-line front end: training, evaluation grids, ablations, the
//! exploration-constant sweep, heatmaps and the self-test.
//!
//! Output layout under the output directory:
//!
//! ```text
//! checkpoints/<variant>/seed_<k>/{checkpoint_NNNN.json, final.json, train_log.csv}
//! results/<verb>_<train>_<test>.csv        raw per-episode records
//! results/<verb>_<train>_<test>_summary.csv
//! heatmaps/heatmap_<test>_<row>_<col>_<budget>_<blocking>.csv
//! manifests/<verb>[_...].json               resolved config, seeds, checkpoint hashes
//! ```

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::edp::EdpConfig;
use crate::error::{Error, Result};
use crate::experiments::{self, AgentSpec, ExperimentSpec, ResultRecord};
use crate::gridworld::{build_maze, Cell, MazeVariant};
use crate::net::content_hash;
use crate::selftest;
use crate::training::{self, final_checkpoint_path};

pub const OUTPUT_ENV: &str = "DEEPPLAN_OUTPUT";

#[derive(Debug, Parser)]
#[command(name = "deepplan", version, about = "AlphaZero planning with extra-deep search on grid mazes")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (falls back to $DEEPPLAN_OUTPUT, then the config, then ./runs).
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Restrict to one training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 keeps floating-point reductions in a fixed order.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args, Default)]
pub struct PlannerFlags {
    /// Enable or disable loop blocking (on/off).
    #[arg(long, value_parser = parse_switch)]
    pub block_loops: Option<bool>,
    /// Enable or disable tree reuse (on/off).
    #[arg(long, value_parser = parse_switch)]
    pub reuse: Option<bool>,
    /// Loop-detection distance threshold.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Plan from scratch after this many consecutive reuses.
    #[arg(long)]
    pub max_reuses: Option<usize>,
    /// Whether expansions pruned as loops use up budget (on/off).
    #[arg(long, value_parser = parse_switch)]
    pub charge_loops: Option<bool>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train networks by self-play and write checkpoints plus a training log.
    Train {
        /// Maze variants to train on.
        #[arg(long, value_delimiter = ',', default_values_t = [MazeVariant::LR, MazeVariant::RL])]
        variant: Vec<MazeVariant>,
    },
    /// Evaluate agents on a train -> test pair over a budget grid.
    Eval {
        #[arg(long, default_value_t = MazeVariant::LR)]
        train: MazeVariant,
        #[arg(long, default_value_t = MazeVariant::RL)]
        test: MazeVariant,
        #[arg(long, value_delimiter = ',', default_value = "edp,az_puct,az_uct")]
        agents: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
        /// Exploration constants for the AlphaZero baselines.
        #[arg(long, value_delimiter = ',')]
        c_values: Option<Vec<f64>>,
        #[command(flatten)]
        planner: PlannerFlags,
    },
    /// EDP against its three ablations; both inverted pairs unless given.
    Ablate {
        #[arg(long)]
        train: Option<MazeVariant>,
        #[arg(long)]
        test: Option<MazeVariant>,
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
    },
    /// Sweep the exploration constant of both AlphaZero baselines.
    TuneC {
        #[arg(long)]
        train: Option<MazeVariant>,
        #[arg(long)]
        test: Option<MazeVariant>,
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        c_values: Option<Vec<f64>>,
    },
    /// Average per-cell visit counts of single planning trees.
    Heatmap {
        /// Networks trained on this variant (default: the other inverted maze).
        #[arg(long)]
        train: Option<MazeVariant>,
        #[arg(long, default_value_t = MazeVariant::RL)]
        test: MazeVariant,
        #[arg(long, default_value = "3,5")]
        origin: Cell,
        #[arg(long, default_value_t = 512)]
        budget: usize,
        #[command(flatten)]
        planner: PlannerFlags,
    },
    /// Run the tree, gradient and loop-freedom invariant suites.
    Selftest,
}

fn parse_switch(s: &str) -> std::result::Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

fn inverted(v: MazeVariant) -> MazeVariant {
    match v {
        MazeVariant::LR => MazeVariant::RL,
        MazeVariant::RL => MazeVariant::LR,
        MazeVariant::LL => MazeVariant::RR,
        MazeVariant::RR => MazeVariant::LL,
    }
}

fn pairs(train: Option<MazeVariant>, test: Option<MazeVariant>) -> Vec<(MazeVariant, MazeVariant)> {
    match (train, test) {
        (Some(a), Some(b)) => vec![(a, b)],
        (Some(a), None) => vec![(a, inverted(a))],
        (None, Some(b)) => vec![(inverted(b), b)],
        (None, None) => vec![(MazeVariant::LR, MazeVariant::RL), (MazeVariant::RL, MazeVariant::LR)],
    }
}

/// Everything needed to reproduce one command's outputs.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    arguments: Vec<String>,
    config: &'a Config,
    train_seeds: &'a [u64],
    eval_seeds: &'a [u64],
    /// Checkpoint path relative to the output directory -> sha256 of its bytes.
    checkpoints: BTreeMap<String, String>,
    outputs: Vec<String>,
}

struct Context {
    config: Config,
    output: PathBuf,
    jobs: usize,
    arguments: Vec<String>,
}

impl Context {
    fn checkpoints(&self) -> PathBuf {
        self.output.join("checkpoints")
    }

    fn train_seeds(&self) -> &[u64] {
        &self.config.experiment.train_seeds
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.output)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn hash_checkpoints(&self, variants: &[MazeVariant]) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for &v in variants {
            for &seed in self.train_seeds() {
                let path = final_checkpoint_path(&self.checkpoints(), v, seed);
                let bytes = fs::read(&path).map_err(|_| Error::MissingCheckpoint {
                    seed,
                    path: path.clone(),
                })?;
                out.insert(self.relative(&path), content_hash(&bytes));
            }
        }
        Ok(out)
    }

    fn write_manifest(&self, name: &str, command: &str, variants: &[MazeVariant], outputs: &[PathBuf]) -> Result<()> {
        let manifest = Manifest {
            command,
            arguments: self.arguments.clone(),
            config: &self.config,
            train_seeds: self.train_seeds(),
            eval_seeds: &self.config.experiment.eval_seeds,
            checkpoints: self.hash_checkpoints(variants)?,
            outputs: outputs.iter().map(|p| self.relative(p)).collect(),
        };
        let path = self.output.join("manifests").join(format!("{name}.json"));
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    fn nets(&self, variant: MazeVariant) -> Result<experiments::NetSet> {
        experiments::load_nets(&self.checkpoints(), variant, self.train_seeds(), 8)
    }

    fn spec(&self, train: MazeVariant, test: MazeVariant, agents: Vec<AgentSpec>, budgets: &[usize]) -> ExperimentSpec {
        let x = &self.config.experiment;
        ExperimentSpec {
            budgets: budgets.to_vec(),
            train_seeds: x.train_seeds.clone(),
            eval_seeds: x.eval_seeds.clone(),
            horizon: x.horizon,
            discount: self.config.train.disc_factor,
            ..ExperimentSpec::new(train, test, agents)
        }
    }

    fn write_records(&self, stem: &str, spec: &ExperimentSpec, records: &[ResultRecord]) -> Result<Vec<PathBuf>> {
        let meta = vec![
            ("train".to_string(), spec.train_variant.to_string()),
            ("test".to_string(), spec.test_variant.to_string()),
            ("budgets".to_string(), format!("{:?}", spec.budgets)),
            ("horizon".to_string(), spec.horizon.to_string()),
            ("discount".to_string(), spec.discount.to_string()),
            ("train_seeds".to_string(), format!("{:?}", spec.train_seeds)),
            ("eval_seeds".to_string(), format!("{:?}", spec.eval_seeds)),
        ];
        let dir = self.output.join("results");
        let raw = dir.join(format!("{stem}.csv"));
        let summary = dir.join(format!("{stem}_summary.csv"));
        experiments::write_results(&raw, records, &meta)?;
        experiments::write_summary(&summary, &experiments::aggregate(records), &meta)?;
        Ok(vec![raw, summary])
    }
}

fn apply_planner_flags(mut edp: EdpConfig, flags: &PlannerFlags) -> Result<EdpConfig> {
    if let Some(b) = flags.block_loops {
        edp.block_loops = b;
    }
    if let Some(r) = flags.reuse {
        edp.reuse_tree = r;
    }
    if let Some(eta) = flags.eta {
        edp.eta = eta;
    }
    if let Some(b) = flags.charge_loops {
        edp.charge_loops = b;
    }
    if let Some(k) = flags.max_reuses {
        edp.max_reuses = Some(k);
    }
    edp.validate()?;
    Ok(edp)
}

fn resolve_output(flag: Option<PathBuf>, config: &Config) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            return Err(Error::InvalidArgument(first));
        }
    };
    let mut config = match &cli.common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.common.seed {
        config.experiment.train_seeds = vec![seed];
    }
    let ctx = Context {
        output: resolve_output(cli.common.output.clone(), &config),
        jobs: cli.common.jobs.max(1),
        arguments: argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
        config,
    };

    match cli.command {
        Command::Train { variant } => train(&ctx, &variant),
        Command::Eval {
            train,
            test,
            agents,
            budgets,
            c_values,
            planner,
        } => {
            let edp = apply_planner_flags(ctx.config.edp.to_config(), &planner)?;
            let c_values = c_values.unwrap_or_else(|| vec![ctx.config.train.c]);
            let mut specs = Vec::new();
            for label in &agents {
                let base = AgentSpec::from_label(label, None)?;
                match base.kind {
                    experiments::AgentKind::AzPuct | experiments::AgentKind::AzUct => {
                        for &c in &c_values {
                            specs.push(AgentSpec::from_label(label, Some(c))?);
                        }
                    }
                    experiments::AgentKind::Edp => specs.push(AgentSpec::edp_with("edp", edp)),
                    experiments::AgentKind::EdpAblated => specs.push(base),
                }
            }
            let budgets = budgets.unwrap_or_else(|| ctx.config.experiment.budgets.clone());
            let spec = ctx.spec(train, test, specs, &budgets);
            let records = experiments::run_grid(&spec, &ctx.nets(train)?, ctx.jobs)?;
            let stem = format!("eval_{train}_{test}");
            let outputs = ctx.write_records(&stem, &spec, &records)?;
            ctx.write_manifest(&stem, "eval", &[train], &outputs)
        }
        Command::Ablate { train, test, budgets } => {
            let budgets = budgets.unwrap_or_else(|| ctx.config.experiment.budgets.clone());
            for (a, b) in pairs(train, test) {
                let spec = ctx.spec(a, b, AgentSpec::ablations_of(ctx.config.edp.to_config()), &budgets);
                let records = experiments::run_grid(&spec, &ctx.nets(a)?, ctx.jobs)?;
                let stem = format!("ablate_{a}_{b}");
                let outputs = ctx.write_records(&stem, &spec, &records)?;
                ctx.write_manifest(&stem, "ablate", &[a], &outputs)?;
            }
            Ok(())
        }
        Command::TuneC {
            train,
            test,
            budgets,
            c_values,
        } => {
            let budgets = budgets.unwrap_or_else(|| ctx.config.experiment.budgets.clone());
            let c_values = c_values.unwrap_or_else(|| ctx.config.experiment.c_values.clone());
            for (a, b) in pairs(train, test) {
                let agents = c_values
                    .iter()
                    .map(|&c| AgentSpec::az_puct(c))
                    .chain(c_values.iter().map(|&c| AgentSpec::az_uct(c)))
                    .collect();
                let spec = ctx.spec(a, b, agents, &budgets);
                let records = experiments::run_grid(&spec, &ctx.nets(a)?, ctx.jobs)?;
                let stem = format!("tune_c_{a}_{b}");
                let outputs = ctx.write_records(&stem, &spec, &records)?;
                ctx.write_manifest(&stem, "tune-c", &[a], &outputs)?;
            }
            Ok(())
        }
        Command::Heatmap {
            train,
            test,
            origin,
            budget,
            planner,
        } => {
            let train = train.unwrap_or(inverted(test));
            let edp = apply_planner_flags(ctx.config.edp.to_config(), &planner)?;
            let env = build_maze(test, true);
            let grid = experiments::visitation_heatmap(
                &edp,
                origin,
                budget,
                &env,
                &ctx.nets(train)?,
                &ctx.config.experiment.eval_seeds,
                ctx.jobs,
            )?;
            let blocking = if edp.block_loops { "block" } else { "noblock" };
            let stem = format!("heatmap_{test}_{}_{}_{budget}_{blocking}", origin.row, origin.col);
            let path = ctx.output.join("heatmaps").join(format!("{stem}.csv"));
            let meta = vec![
                ("train".to_string(), train.to_string()),
                ("test".to_string(), test.to_string()),
                ("block_loops".to_string(), edp.block_loops.to_string()),
                ("eta".to_string(), edp.eta.to_string()),
                ("c".to_string(), edp.c.to_string()),
            ];
            experiments::write_heatmap(&path, &grid, &meta)?;
            ctx.write_manifest(&stem, "heatmap", &[train], &[path])
        }
        Command::Selftest => {
            let reports = selftest::run_all(ctx.config.train.seed);
            for r in &reports {
                println!("{}", r.line());
            }
            if reports.iter().all(|r| r.passed()) {
                Ok(())
            } else {
                Err(Error::InvalidArgument("selftest failed".into()))
            }
        }
    }
}

fn train(ctx: &Context, variants: &[MazeVariant]) -> Result<()> {
    let root = ctx.checkpoints();
    let jobs: Vec<(MazeVariant, u64)> = variants
        .iter()
        .flat_map(|&v| ctx.train_seeds().iter().map(move |&s| (v, s)))
        .collect();
    let outcomes = experiments::with_jobs(ctx.jobs, || {
        jobs.par_iter()
            .map(|&(v, seed)| training::train(v, &ctx.config.train_config(v, seed), Some(&root)))
            .collect::<Result<Vec<_>>>()
    })??;
    let mut outputs = Vec::new();
    for ((v, seed), outcome) in jobs.iter().zip(&outcomes) {
        let last = outcome.log.iter().rev().find_map(|r| r.eval_return_discounted);
        println!(
            "trained {v} seed {seed}: {} iterations, final greedy return {}",
            outcome.log.len(),
            last.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
        );
        outputs.extend(outcome.checkpoints.iter().cloned());
        outputs.push(training::run_dir(&root, *v, *seed).join("train_log.csv"));
    }
    let name = format!(
        "train_{}",
        variants.iter().map(|v| v.name()).collect::<Vec<_>>().join("_")
    );
    ctx.write_manifest(&name, "train", variants, &outputs)
}

/// Runs the command line and converts the outcome into an exit code,
/// printing failures as a single `error: <message>` line.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run(argv) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            1
        }
    }
}
