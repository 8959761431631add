//! Episode runner, case generator, CSV benchmark and step-log replay.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{grasp_feasible, graspable, GraspAction};
use crate::geometry::{self, Vec2};
use crate::mcts::{search_serial, Budget, SearchError};
use crate::pmbs::{search_pmbs_with, ParallelConfig};
use crate::pushworld::{
    in_bounds, load_scene, resolve_push, BatchedEnv, ObjectShape, Pose, PushAction, SceneError,
    SceneFile, WorldState,
};
use crate::rng;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("scene: {0}")]
    Scene(#[from] SceneError),
    #[error("search: {0}")]
    Search(#[from] SearchError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("case generation failed after {0} attempts")]
    Generation(usize),
    #[error("replay mismatch at line {line}: {reason}")]
    Replay { line: usize, reason: String },
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Planner {
    Serial,
    Pmbs,
}

impl Planner {
    pub fn name(self) -> &'static str {
        match self {
            Planner::Serial => "serial",
            Planner::Pmbs => "pmbs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub cases: Vec<PathBuf>,
    pub planner: Planner,
    pub parallel: ParallelConfig,
    pub trials: usize,
    pub action_cap: usize,
    pub out: PathBuf,
    pub seed_base: u64,
    /// Directory for per-episode JSON-lines step logs.
    pub log_dir: Option<PathBuf>,
    /// Run episodes concurrently; honoured only under a non-time budget.
    pub parallel_episodes: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            cases: Vec::new(),
            planner: Planner::Pmbs,
            parallel: ParallelConfig::default(),
            trials: 5,
            action_cap: 16,
            out: PathBuf::from("results.csv"),
            seed_base: 0,
            log_dir: None,
            parallel_episodes: false,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.trials == 0 {
            return Err(BenchError::Config("trials must be >= 1".into()));
        }
        if self.action_cap == 0 {
            return Err(BenchError::Config("action cap must be >= 1".into()));
        }
        self.parallel.validate()?;
        Ok(())
    }

    fn deterministic(&self) -> bool {
        !matches!(self.parallel.search.budget, Budget::Seconds(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub case_id: String,
    pub trial: usize,
    pub planner: Planner,
    pub actions_used: usize,
    pub pushes: usize,
    pub planning_time_s: f64,
    pub completed: bool,
    /// Outcome of the grasp attempt, if one was made.
    pub grasp_success: Option<bool>,
    /// Smallest grasp margin seen that was positive but under the threshold.
    pub marginal_margin: Option<f64>,
    pub actions: Vec<PushAction>,
}

/// One line of an episode step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        case_id: String,
        trial: usize,
        planner: Planner,
        seed: u64,
        config: ParallelConfig,
        scene: SceneFile,
    },
    Push {
        step: usize,
        push: PushAction,
        pre: String,
        post: String,
    },
    Grasp {
        step: usize,
        grasp: Option<GraspAction>,
        margin: f64,
        success: bool,
        pre: String,
    },
    End {
        completed: bool,
        actions_used: usize,
    },
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_add((step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Episode seed for a case and trial.
pub fn episode_seed(seed_base: u64, case_id: &str, trial: usize) -> u64 {
    seed_base.wrapping_add(rng::hash_key(case_id, trial as u64))
}

/// Play one retrieval episode: grasp as soon as the target is graspable,
/// otherwise plan and execute one push, until the action cap.
pub fn run_episode(
    case: &WorldState,
    case_id: &str,
    trial: usize,
    cfg: &BenchmarkConfig,
    seed: u64,
    env: &BatchedEnv,
    mut log: Option<&mut dyn Write>,
) -> Result<EpisodeResult, BenchError> {
    let p = &cfg.parallel;
    let s = &p.search;
    let mut emit = |r: &LogRecord| -> Result<(), BenchError> {
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    };
    emit(&LogRecord::Header {
        case_id: case_id.to_string(),
        trial,
        planner: cfg.planner,
        seed,
        config: *p,
        scene: SceneFile::from_state(case),
    })?;

    let mut live = case.clone();
    let mut out = EpisodeResult {
        case_id: case_id.to_string(),
        trial,
        planner: cfg.planner,
        actions_used: 0,
        pushes: 0,
        planning_time_s: 0.0,
        completed: false,
        grasp_success: None,
        marginal_margin: None,
        actions: Vec::new(),
    };
    while out.actions_used < cfg.action_cap {
        let report = graspable(&live, &s.grasp, s.margin_threshold);
        if report.margin > 0.0 && !report.graspable {
            out.marginal_margin = Some(out.marginal_margin.map_or(report.margin, |m| m.min(report.margin)));
        }
        if report.graspable {
            let success = report.best.is_some_and(|g| grasp_feasible(&live, &s.grasp, &g));
            out.actions_used += 1;
            out.grasp_success = Some(success);
            out.completed = success;
            emit(&LogRecord::Grasp {
                step: out.actions_used,
                grasp: report.best,
                margin: report.margin,
                success,
                pre: live.digest(),
            })?;
            break;
        }

        let mut step_cfg = *p;
        step_cfg.search.rng_seed = step_seed(seed, out.actions_used);
        let t0 = Instant::now();
        let planned = match cfg.planner {
            Planner::Serial => search_serial(live.clone(), &step_cfg.search),
            Planner::Pmbs => search_pmbs_with(live.clone(), &step_cfg, env),
        };
        out.planning_time_s += t0.elapsed().as_secs_f64();
        let action = match planned {
            Ok(o) => o.action,
            Err(SearchError::InvalidConfig(m)) => return Err(BenchError::Config(m)),
            Err(_) => break,
        };
        let Ok(next) = resolve_push(&live, &action, &s.tip, &s.physics) else {
            break;
        };
        emit(&LogRecord::Push {
            step: out.actions_used + 1,
            push: action,
            pre: live.digest(),
            post: next.digest(),
        })?;
        live = next;
        out.actions_used += 1;
        out.pushes += 1;
        out.actions.push(action);
    }
    emit(&LogRecord::End {
        completed: out.completed,
        actions_used: out.actions_used,
    })?;
    Ok(out)
}

/// Summary means over a set of episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub episodes: usize,
    pub mean_actions: f64,
    pub mean_planning_time_s: f64,
    pub completion_rate: f64,
    /// Successful grasps over grasp attempts; `None` without attempts.
    pub grasp_success_rate: Option<f64>,
}

impl Summary {
    pub fn of(results: &[EpisodeResult]) -> Summary {
        let n = results.len().max(1) as f64;
        let attempts: Vec<bool> = results.iter().filter_map(|r| r.grasp_success).collect();
        Summary {
            episodes: results.len(),
            mean_actions: results.iter().map(|r| r.actions_used as f64).sum::<f64>() / n,
            mean_planning_time_s: results.iter().map(|r| r.planning_time_s).sum::<f64>() / n,
            completion_rate: results.iter().filter(|r| r.completed).count() as f64 / n,
            grasp_success_rate: (!attempts.is_empty())
                .then(|| attempts.iter().filter(|&&s| s).count() as f64 / attempts.len() as f64),
        }
    }
}

pub const CSV_HEADER: [&str; 9] = [
    "case_id",
    "trial",
    "planner",
    "n_envs",
    "budget",
    "actions_used",
    "planning_time_s",
    "completed",
    "grasp_success",
];

pub fn budget_label(b: &Budget) -> String {
    match b {
        Budget::Seconds(s) => format!("{s}s"),
        Budget::Iterations(n) => format!("{n}it"),
        Budget::Expansions(n) => format!("{n}exp"),
    }
}

/// Case id of a case file: its file stem.
pub fn case_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Case files (`*.json`) of a directory, sorted by name.
pub fn list_cases(dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}

fn csv_row(r: &EpisodeResult, cfg: &BenchmarkConfig) -> [String; 9] {
    let time = if cfg.deterministic() {
        String::new()
    } else {
        format!("{:.6}", r.planning_time_s)
    };
    let n_envs = match r.planner {
        Planner::Serial => 1,
        Planner::Pmbs => cfg.parallel.n_envs,
    };
    [
        r.case_id.clone(),
        r.trial.to_string(),
        r.planner.name().to_string(),
        n_envs.to_string(),
        budget_label(&cfg.parallel.search.budget),
        r.actions_used.to_string(),
        time,
        u8::from(r.completed).to_string(),
        r.grasp_success.map_or(String::new(), |s| u8::from(s).to_string()),
    ]
}

/// Run every case for every trial, streaming one CSV row per episode to
/// `cfg.out` and appending a `#`-prefixed summary block.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<(Vec<EpisodeResult>, Summary), BenchError> {
    cfg.validate()?;
    if cfg.cases.is_empty() {
        return Err(BenchError::Config("no case files".into()));
    }
    let tol = cfg.parallel.search.physics.penetration_tol;
    let cases: Vec<(String, WorldState)> = cfg
        .cases
        .iter()
        .map(|p| Ok((case_id(p), load_scene(p, tol)?)))
        .collect::<Result<_, BenchError>>()?;
    if let Some(dir) = &cfg.log_dir {
        fs::create_dir_all(dir)?;
    }
    let file = BufWriter::new(File::create(&cfg.out)?);
    let mut w = csv::Writer::from_writer(file);
    w.write_record(CSV_HEADER)?;
    w.flush()?;

    let jobs: Vec<(usize, usize)> = (0..cases.len())
        .flat_map(|c| (0..cfg.trials).map(move |t| (c, t)))
        .collect();
    let env = cfg.parallel.batched_env();
    let run = |&(c, t): &(usize, usize)| -> Result<EpisodeResult, BenchError> {
        let (id, state) = &cases[c];
        let seed = episode_seed(cfg.seed_base, id, t);
        match &cfg.log_dir {
            Some(dir) => {
                let path = dir.join(format!("{id}_{}_t{t}.jsonl", cfg.planner.name()));
                let mut f = BufWriter::new(File::create(path)?);
                let r = run_episode(state, id, t, cfg, seed, &env, Some(&mut f));
                f.flush()?;
                r
            }
            None => run_episode(state, id, t, cfg, seed, &env, None),
        }
    };

    let mut results = Vec::with_capacity(jobs.len());
    if cfg.parallel_episodes && cfg.deterministic() {
        let done: Vec<Result<EpisodeResult, BenchError>> = env.map(&jobs, |_, j| run(j));
        for r in done {
            let r = r?;
            w.write_record(csv_row(&r, cfg))?;
            results.push(r);
        }
        w.flush()?;
    } else {
        for j in &jobs {
            let r = run(j)?;
            w.write_record(csv_row(&r, cfg))?;
            w.flush()?;
            results.push(r);
        }
    }
    let summary = Summary::of(&results);
    let mut file = w.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
    let time = if cfg.deterministic() {
        String::new()
    } else {
        format!("{:.6}", summary.mean_planning_time_s)
    };
    writeln!(file, "# summary")?;
    writeln!(file, "# episodes,{}", summary.episodes)?;
    writeln!(file, "# mean_actions_used,{:.6}", summary.mean_actions)?;
    writeln!(file, "# mean_planning_time_s,{time}")?;
    writeln!(file, "# completion_rate,{:.6}", summary.completion_rate)?;
    writeln!(
        file,
        "# grasp_success_rate,{}",
        summary.grasp_success_rate.map_or(String::new(), |g| format!("{g:.6}"))
    )?;
    file.flush()?;
    Ok((results, summary))
}

/// Outcome of checking a step log against the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub pushes: usize,
    pub grasped: Option<bool>,
    pub final_digest: String,
}

/// Re-simulate a step log and check every recorded digest and the grasp.
pub fn replay_log(path: &Path) -> Result<ReplayReport, BenchError> {
    let reader = BufReader::new(File::open(path)?);
    let mut state: Option<(WorldState, ParallelConfig)> = None;
    let mut report = ReplayReport {
        pushes: 0,
        grasped: None,
        final_digest: String::new(),
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let no = i + 1;
        let bad = |reason: String| BenchError::Replay { line: no, reason };
        match serde_json::from_str::<LogRecord>(&line)? {
            LogRecord::Header { config, scene, .. } => {
                let s = scene.into_state(config.search.physics.penetration_tol)?;
                state = Some((s, config));
            }
            LogRecord::Push { push, pre, post, .. } => {
                let (s, cfg) = state.as_mut().ok_or_else(|| bad("push before header".into()))?;
                if s.digest() != pre {
                    return Err(bad("pre-state digest differs".into()));
                }
                let next = resolve_push(s, &push, &cfg.search.tip, &cfg.search.physics)
                    .map_err(|e| bad(format!("push failed: {e}")))?;
                if next.digest() != post {
                    return Err(bad("post-state digest differs".into()));
                }
                *s = next;
                report.pushes += 1;
            }
            LogRecord::Grasp {
                grasp, success, pre, ..
            } => {
                let (s, cfg) = state.as_ref().ok_or_else(|| bad("grasp before header".into()))?;
                if s.digest() != pre {
                    return Err(bad("pre-grasp digest differs".into()));
                }
                let g = &cfg.search.grasp;
                let r = graspable(s, g, cfg.search.margin_threshold);
                if !r.graspable || r.best != grasp {
                    return Err(bad("grasp decision differs".into()));
                }
                let ok = grasp.is_some_and(|a| grasp_feasible(s, g, &a));
                if ok != success {
                    return Err(bad("grasp outcome differs".into()));
                }
                report.grasped = Some(ok);
            }
            LogRecord::End { .. } => {}
        }
    }
    let (s, _) = state.ok_or(BenchError::Replay {
        line: 0,
        reason: "empty log".into(),
    })?;
    report.final_digest = s.digest();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ShapeMix {
    #[default]
    Discs,
    Mixed,
}

/// Layout pattern of a generated case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Motif {
    /// Objects scattered around a central target.
    #[default]
    Cluster,
    /// Target enclosed by a tight ring of neighbours.
    Ring,
    /// Target against the workspace edge, hemmed in from the open side.
    Wall,
}

pub const MAX_ATTEMPTS: usize = 10_000;

fn random_shape(rng: &mut ChaCha8Rng, mix: ShapeMix) -> ObjectShape {
    let pick = match mix {
        ShapeMix::Discs => 0.0,
        ShapeMix::Mixed => rng.random::<f64>(),
    };
    if pick < 0.5 {
        ObjectShape::disc(rng.random_range(0.016..0.024))
    } else if pick < 0.75 {
        ObjectShape::rectangle(rng.random_range(0.012..0.028), rng.random_range(0.01..0.018))
    } else {
        let n = [3, 5, 6][rng.random_range(0..3)];
        ObjectShape::regular(n, rng.random_range(0.018..0.026))
    }
}

fn clear_of(placed: &[(ObjectShape, Pose)], shape: &ObjectShape, pose: Pose, gap: f64) -> bool {
    let p = shape.place(pose);
    let r = shape.bounding_radius();
    placed.iter().all(|(s, q)| {
        let d = (q.position() - pose.position()).norm();
        if d > r + s.bounding_radius() + gap {
            return true;
        }
        geometry::distance(p.convex(), s.place(*q).convex()) > gap
    })
}

/// Slide `shape` in from far out along direction `angle` from `center` and
/// stop where it comes within `gap` of the placed objects.
fn snap_inward(
    placed: &[(ObjectShape, Pose)],
    shape: &ObjectShape,
    center: Vec2,
    angle: f64,
    theta: f64,
    gap: f64,
) -> Option<Pose> {
    let dir = Vec2::from_angle(angle);
    let at = |d: f64| {
        let c = center + dir * d;
        Pose::new(c.x, c.y, theta)
    };
    let (mut lo, mut hi) = (0.0, 0.3);
    if !clear_of(placed, shape, at(hi), gap) {
        return None;
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if clear_of(placed, shape, at(mid), gap) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(at(hi))
}

/// A clutter case of `n_objects` around a central target (object 0).
pub fn generate_case(n_objects: usize, mix: ShapeMix, seed: u64) -> Result<WorldState, BenchError> {
    generate_motif_case(n_objects, mix, Motif::Cluster, seed)
}

/// A generated case with the given layout. Object 0 is the target.
pub fn generate_motif_case(
    n_objects: usize,
    mix: ShapeMix,
    motif: Motif,
    seed: u64,
) -> Result<WorldState, BenchError> {
    if n_objects == 0 {
        return Err(BenchError::Config("n_objects must be >= 1".into()));
    }
    let ws = crate::pushworld::Workspace::default();
    let lim = ws.center_limit() - 0.002;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempts = 0usize;
    let gap = 0.001;

    let target = random_shape(&mut rng, mix);
    let rt = target.bounding_radius();
    let target_pose = match motif {
        Motif::Wall => {
            let x = -ws.half() + rt + rng.random_range(0.004..0.010);
            Pose::new(x.max(-lim), rng.random_range(-0.03..0.03), rng.random_range(0.0..std::f64::consts::TAU))
        }
        _ => Pose::new(
            rng.random_range(-0.015..0.015),
            rng.random_range(-0.015..0.015),
            rng.random_range(0.0..std::f64::consts::TAU),
        ),
    };
    let mut placed = vec![(target, target_pose)];
    let tc = target_pose.position();

    let tau = std::f64::consts::TAU;
    let in_ws = |c: Vec2| c.x.abs() < lim && c.y.abs() < lim;

    // tightly packed neighbours first
    let (ring_n, arc) = match motif {
        Motif::Cluster => (0, (0.0, 0.0)),
        Motif::Ring => (rng.random_range(6..=8usize), (0.0, tau)),
        Motif::Wall => (rng.random_range(4..=5usize), (-1.75, 1.75)),
    };
    let ring_n = ring_n.min(n_objects - 1);
    let phase = rng.random_range(0.0..tau);
    for k in 0..ring_n {
        // a slot that will not take a neighbour is left open
        for _ in 0..50 {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(BenchError::Generation(MAX_ATTEMPTS));
            }
            let shape = random_shape(&mut rng, mix);
            let a = match motif {
                Motif::Ring => phase + tau * k as f64 / ring_n as f64,
                _ => arc.0 + (arc.1 - arc.0) * k as f64 / (ring_n - 1).max(1) as f64,
            } + rng.random_range(-0.12..0.12);
            let theta = rng.random_range(0.0..tau);
            let g = rng.random_range(0.0005..0.003);
            if let Some(pose) = snap_inward(&placed, &shape, tc, a, theta, g) {
                if in_ws(pose.position()) {
                    placed.push((shape, pose));
                    break;
                }
            }
        }
    }
    // consecutive rejections; a long run widens the cluster
    let mut misses = 0usize;
    while placed.len() < n_objects {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(BenchError::Generation(MAX_ATTEMPTS));
        }
        let shape = random_shape(&mut rng, mix);
        let a = rng.random_range(0.0..tau);
        let theta = rng.random_range(0.0..tau);
        let pose = if motif == Motif::Cluster {
            let spread = 0.05 * (1 + misses / 200) as f64;
            let dist = rt + shape.bounding_radius() + rng.random_range(0.002..spread);
            let c = tc + Vec2::from_angle(a) * dist;
            let pose = Pose::new(c.x, c.y, theta);
            clear_of(&placed, &shape, pose, gap).then_some(pose)
        } else {
            // the rest pack against the neighbours from outside
            let g = rng.random_range(0.0005..0.004);
            snap_inward(&placed, &shape, tc, a, theta, g)
        };
        if let Some(pose) = pose.filter(|p| in_ws(p.position())) {
            placed.push((shape, pose));
            misses = 0;
        } else {
            misses += 1;
        }
    }
    let state = WorldState::new(ws, placed, 0, 0.0)?;
    debug_assert!(in_bounds(&state));
    Ok(state)
}
