use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use pmbs_core::bench::{
    generate_motif_case, list_cases, replay_log, run_benchmark, BenchError, BenchmarkConfig, Motif,
    Planner, ShapeMix,
};
use pmbs_core::mcts::Budget;
use pmbs_core::pushworld::save_scene;

#[derive(Parser)]
#[command(name = "bench", about = "Push-to-grasp retrieval benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run episodes over a directory of case files and write a CSV.
    Run(RunArgs),
    /// Generate a case file.
    Gen(GenArgs),
    /// Re-simulate an episode step log and check its digests.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
}

/// Every flag can also come from a TOML file given with `--config`; flags on
/// the command line win.
#[derive(Args, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    cases: Option<PathBuf>,
    #[arg(long, value_enum)]
    planner: Option<Planner>,
    #[arg(long)]
    envs: Option<usize>,
    /// Wall-clock budget per planning step, seconds.
    #[arg(long, conflicts_with = "iters")]
    budget: Option<f64>,
    /// Iteration budget per planning step.
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    dt: Option<u32>,
    #[arg(long)]
    ds: Option<u32>,
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to the machine's parallelism).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    no_leaf_parallel: Option<bool>,
    #[arg(long)]
    no_early_stop: Option<bool>,
    #[arg(long)]
    log_dir: Option<PathBuf>,
    #[arg(long)]
    parallel_episodes: Option<bool>,
}

impl RunArgs {
    fn merge(self, file: RunArgs) -> RunArgs {
        macro_rules! pick {
            ($($f:ident),*) => { RunArgs { config: self.config, $($f: self.$f.or(file.$f)),* } };
        }
        pick!(
            cases, planner, envs, budget, iters, trials, seed, c, gamma, dt, ds, cap, out, workers,
            no_leaf_parallel, no_early_stop, log_dir, parallel_episodes
        )
    }

    fn into_config(self) -> Result<BenchmarkConfig, BenchError> {
        let dir = self
            .cases
            .ok_or_else(|| BenchError::Config("--cases is required".into()))?;
        let mut cfg = BenchmarkConfig {
            cases: list_cases(&dir)?,
            ..BenchmarkConfig::default()
        };
        let p = &mut cfg.parallel;
        let s = &mut p.search;
        if let Some(v) = self.planner {
            cfg.planner = v;
        }
        if let Some(v) = self.envs {
            p.n_envs = v;
        }
        if let Some(v) = self.workers {
            p.worker_pool_size = v;
        }
        if self.no_leaf_parallel == Some(true) {
            p.leaf_parallel = false;
        }
        if let Some(v) = self.budget {
            s.budget = Budget::Seconds(v);
        }
        if let Some(v) = self.iters {
            s.budget = Budget::Iterations(v);
        }
        if let Some(v) = self.c {
            s.c_explore = v;
        }
        if let Some(v) = self.gamma {
            s.gamma = v;
        }
        if let Some(v) = self.dt {
            s.d_t = v;
        }
        if let Some(v) = self.ds {
            s.d_s = v;
        }
        if self.no_early_stop == Some(true) {
            s.early_stop = false;
        }
        if let Some(v) = self.seed {
            cfg.seed_base = v;
        }
        if let Some(v) = self.trials {
            cfg.trials = v;
        }
        if let Some(v) = self.cap {
            cfg.action_cap = v;
        }
        if let Some(v) = self.out {
            cfg.out = v;
        }
        cfg.log_dir = self.log_dir;
        cfg.parallel_episodes = self.parallel_episodes.unwrap_or(false);
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n_objects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ShapeMix::Discs)]
    shapes: ShapeMix,
    #[arg(long, value_enum, default_value_t = Motif::Cluster)]
    motif: Motif,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), BenchError> {
    match cli.cmd {
        Cmd::Run(args) => {
            let args = match &args.config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    let file: RunArgs =
                        toml::from_str(&text).map_err(|e| BenchError::Config(e.to_string()))?;
                    args.merge(file)
                }
                None => args,
            };
            let cfg = args.into_config()?;
            let (_, s) = run_benchmark(&cfg)?;
            println!(
                "{} episodes: mean actions {:.3}, completion {:.1}%, mean planning time {:.3}s",
                s.episodes,
                s.mean_actions,
                100.0 * s.completion_rate,
                s.mean_planning_time_s
            );
            println!("wrote {}", cfg.out.display());
        }
        Cmd::Gen(g) => {
            let state = generate_motif_case(g.n_objects, g.shapes, g.motif, g.seed)?;
            save_scene(&g.out, &state)?;
            println!("wrote {}", g.out.display());
        }
        Cmd::Replay { log } => {
            let r = replay_log(&log)?;
            let grasp = match r.grasped {
                Some(true) => "grasp succeeded",
                Some(false) => "grasp failed",
                None => "no grasp",
            };
            println!("replay ok: {} pushes, {grasp}, final state {}", r.pushes, r.final_digest);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
