#![allow(dead_code)]

use std::f64::consts::TAU;
use std::path::PathBuf;

use pmbs_core::actions::GraspGeometry;
use pmbs_core::bench::{generate_motif_case, Motif, ShapeMix};
use pmbs_core::geometry::Vec2;
use pmbs_core::pushworld::{ObjectShape, Pose, Workspace, WorldState};

pub fn scene(objs: Vec<(ObjectShape, Pose)>, target: usize) -> WorldState {
    WorldState::new(Workspace::default(), objs, target, 1e-4).unwrap()
}

pub fn cases_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("cases")
}

pub fn shipped_cases() -> Vec<PathBuf> {
    pmbs_core::bench::list_cases(&cases_dir()).unwrap()
}

/// A varied scene from the generator, keyed by `seed`.
pub fn random_scene(seed: u64) -> WorldState {
    let motif = [Motif::Cluster, Motif::Ring, Motif::Wall][(seed % 3) as usize];
    let mix = if seed % 2 == 0 { ShapeMix::Mixed } else { ShapeMix::Discs };
    let n = 2 + (seed as usize * 7) % 11;
    generate_motif_case(n, mix, motif, seed).unwrap()
}

/// Target disc ringed by `n` discs whose centers sit `gap` beyond contact.
pub fn ring_scene(r_target: f64, r_ring: f64, n: usize, gap: f64, skip: Option<usize>) -> WorldState {
    let mut objs = vec![(ObjectShape::disc(r_target), Pose::at(0.0, 0.0))];
    let d = r_target + r_ring + gap;
    for k in 0..n {
        if Some(k) == skip {
            continue;
        }
        let a = TAU * k as f64 / n as f64;
        objs.push((ObjectShape::disc(r_ring), Pose::at(d * a.cos(), d * a.sin())));
    }
    scene(objs, 0)
}

// ---------------------------------------------------------------------------
// Rasterized grasp oracle. Written without the library's geometry: finger
// footprints are sampled at the centers of a grid of workspace cells and each
// sample is tested against analytic obstacle distances.

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RasterVerdict {
    Graspable,
    Blocked,
    /// Some decisive sample lies within one cell of an obstacle boundary.
    Marginal,
}

fn signed_distance(p: Vec2, shape: &ObjectShape, pose: &Pose) -> f64 {
    let local = {
        let d = Vec2::new(p.x - pose.x, p.y - pose.y);
        let (s, c) = pose.theta.sin_cos();
        Vec2::new(c * d.x + s * d.y, -s * d.x + c * d.y)
    };
    match shape {
        ObjectShape::Disc { radius } => local.x.hypot(local.y) - radius,
        ObjectShape::Polygon { vertices } => {
            let n = vertices.len();
            let mut inside = true;
            let mut best = f64::INFINITY;
            for i in 0..n {
                let a = vertices[i];
                let b = vertices[(i + 1) % n];
                let e = Vec2::new(b.x - a.x, b.y - a.y);
                let w = Vec2::new(local.x - a.x, local.y - a.y);
                if e.x * w.y - e.y * w.x < 0.0 {
                    inside = false;
                }
                let t = ((w.x * e.x + w.y * e.y) / (e.x * e.x + e.y * e.y)).clamp(0.0, 1.0);
                let q = Vec2::new(a.x + e.x * t - local.x, a.y + e.y * t - local.y);
                best = best.min(q.x.hypot(q.y));
            }
            if inside {
                -best
            } else {
                best
            }
        }
    }
}

fn world_vertices(shape: &ObjectShape, pose: &Pose) -> Vec<Vec2> {
    match shape {
        ObjectShape::Disc { .. } => Vec::new(),
        ObjectShape::Polygon { vertices } => {
            let (s, c) = pose.theta.sin_cos();
            vertices
                .iter()
                .map(|v| Vec2::new(pose.x + c * v.x - s * v.y, pose.y + s * v.x + c * v.y))
                .collect()
        }
    }
}

/// Min signed obstacle distance over the cell samples of each finger for
/// jaw angle `k` of 16, or `None` when the pose is out of the workspace or
/// the target does not fit.
pub fn raster_angle(state: &WorldState, geom: &GraspGeometry, k: usize) -> Option<f64> {
    let ws = state.workspace();
    let t = state.target_index();
    let (shape, pose) = (&state.shapes()[t], &state.poses()[t]);
    let ang = TAU * k as f64 / 16.0;
    let (ux, uy) = (ang.cos(), ang.sin());
    let (vx, vy) = (-uy, ux);
    let (lo, hi) = match shape {
        ObjectShape::Disc { radius } => {
            let c = pose.x * ux + pose.y * uy;
            (c - radius, c + radius)
        }
        _ => world_vertices(shape, pose)
            .iter()
            .map(|p| p.x * ux + p.y * uy)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), d| (a.min(d), b.max(d))),
    };
    if hi - lo + 2.0 * geom.approach_clearance >= geom.opening {
        return None;
    }
    let mid = 0.5 * (lo + hi);
    let along = pose.x * ux + pose.y * uy;
    let (gx, gy) = (pose.x + ux * (mid - along), pose.y + uy * (mid - along));
    let half = ws.side_length / 2.0;
    let inner = geom.opening / 2.0;
    let outer = inner + geom.finger_thickness;
    let hw = geom.finger_width / 2.0;
    // corners inside the workspace
    for (a, b) in [(inner, outer), (-outer, -inner)] {
        for s in [a, b] {
            for w in [-hw, hw] {
                let x = gx + ux * s + vx * w;
                let y = gy + uy * s + vy * w;
                if x.abs() > half || y.abs() > half {
                    return None;
                }
            }
        }
    }
    let n = ws.grid_resolution as i64;
    let cell = ws.side_length / n as f64;
    // only cells near the fingers can hold a sample
    let reach = outer + hw;
    let span = |c: f64| {
        let lo = (((c - reach + half) / cell).floor() as i64).clamp(0, n);
        let hi = (((c + reach + half) / cell).ceil() as i64).clamp(0, n);
        lo..hi
    };
    let mut min_sd = f64::INFINITY;
    for i in span(gx) {
        let x = -half + (i as f64 + 0.5) * cell;
        for j in span(gy) {
            let y = -half + (j as f64 + 0.5) * cell;
            let s = (x - gx) * ux + (y - gy) * uy;
            let w = (x - gx) * vx + (y - gy) * vy;
            if w.abs() > hw || !(s.abs() >= inner && s.abs() <= outer) {
                continue;
            }
            for (o, (sh, po)) in state.objects().enumerate() {
                if o == t {
                    continue;
                }
                min_sd = min_sd.min(signed_distance(Vec2::new(x, y), sh, po));
            }
        }
    }
    Some(min_sd)
}

/// Decide graspability at threshold 0 from the raster samples of all 16
/// jaw angles.
pub fn raster_grasp(state: &WorldState, geom: &GraspGeometry) -> RasterVerdict {
    let cell = state.workspace().cell_size();
    // a sample can sit up to half a cell diagonal inside a finger edge
    let slack = cell;
    let mut any_marginal = false;
    for k in 0..16 {
        match raster_angle(state, geom, k) {
            None => {}
            Some(d) if d >= slack => return RasterVerdict::Graspable,
            Some(d) if d <= -slack => {}
            Some(_) => any_marginal = true,
        }
    }
    if any_marginal {
        RasterVerdict::Marginal
    } else {
        RasterVerdict::Blocked
    }
}

// ---------------------------------------------------------------------------
// Fine-step reference for discs only: the tip moves in `steps` increments and
// after each one discs are pushed out of the tip and out of each other until
// nothing overlaps by more than `tol`.

pub fn reference_disc_push(
    discs: &[(f64, f64, f64)],
    start: (f64, f64),
    end: (f64, f64),
    tip_r: f64,
    steps: usize,
    tol: f64,
) -> Vec<(f64, f64)> {
    let mut c: Vec<(f64, f64)> = discs.iter().map(|d| (d.0, d.1)).collect();
    let r: Vec<f64> = discs.iter().map(|d| d.2).collect();
    for k in 1..=steps {
        let f = k as f64 / steps as f64;
        let tip = (start.0 + (end.0 - start.0) * f, start.1 + (end.1 - start.1) * f);
        for _ in 0..10_000 {
            let mut worst = 0.0f64;
            for i in 0..c.len() {
                let (dx, dy) = (c[i].0 - tip.0, c[i].1 - tip.1);
                let d = dx.hypot(dy);
                let pen = tip_r + r[i] - d;
                if pen > 0.0 {
                    worst = worst.max(pen);
                    c[i].0 += dx / d * pen;
                    c[i].1 += dy / d * pen;
                }
            }
            for i in 0..c.len() {
                for j in i + 1..c.len() {
                    let (dx, dy) = (c[j].0 - c[i].0, c[j].1 - c[i].1);
                    let d = dx.hypot(dy);
                    let pen = r[i] + r[j] - d;
                    if pen > 0.0 {
                        worst = worst.max(pen);
                        let (nx, ny) = (dx / d, dy / d);
                        c[i].0 -= nx * pen / 2.0;
                        c[i].1 -= ny * pen / 2.0;
                        c[j].0 += nx * pen / 2.0;
                        c[j].1 += ny * pen / 2.0;
                    }
                }
            }
            if worst <= tol {
                break;
            }
        }
    }
    c
}

// ---------------------------------------------------------------------------
// Exhaustive game tree over the planner's own push candidates.

use pmbs_core::actions::{graspable, PushSampler};
use pmbs_core::mcts::SearchConfig;
use pmbs_core::pushworld::{resolve_push, PushAction};

pub fn sampler_of(cfg: &SearchConfig) -> PushSampler {
    PushSampler {
        n_per_object: cfg.n_actions_per_object,
        tip: cfg.tip,
        push_distance: cfg.physics.push_distance,
    }
}

/// Fewest pushes (at most `depth`) after which the target is graspable, or
/// `None` if more are needed.
pub fn min_pushes(state: &WorldState, cfg: &SearchConfig, depth: u32) -> Option<u32> {
    if graspable(state, &cfg.grasp, cfg.margin_threshold).graspable {
        return Some(0);
    }
    if depth == 0 {
        return None;
    }
    sampler_of(cfg)
        .sample(state)
        .into_iter()
        .filter_map(|(_, a)| {
            let next = resolve_push(state, &a, &cfg.tip, &cfg.physics).ok()?;
            min_pushes(&next, cfg, depth - 1).map(|k| k + 1)
        })
        .min()
}

/// Every root push with its exhaustive cost-to-grasp within `depth` pushes.
pub fn root_costs(state: &WorldState, cfg: &SearchConfig, depth: u32) -> Vec<(PushAction, Option<u32>)> {
    sampler_of(cfg)
        .sample(state)
        .into_iter()
        .map(|(_, a)| {
            let cost = resolve_push(state, &a, &cfg.tip, &cfg.physics)
                .ok()
                .and_then(|next| min_pushes(&next, cfg, depth - 1))
                .map(|k| k + 1);
            (a, cost)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Random explicit trees for the selection oracles.

use pmbs_core::actions::PushSlot;
use pmbs_core::mcts::SearchTree;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn slot(angle: u16) -> PushSlot {
    PushSlot { object: 0, angle }
}

/// A tree of random shape over a lone-disc scene (the state is never
/// simulated), with statistics from random backups.
pub fn random_tree(seed: u64, cfg: &SearchConfig) -> SearchTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = scene(vec![(ObjectShape::disc(0.02), Pose::at(0.0, 0.0))], 0);
    let fresh = |rng: &mut ChaCha8Rng| {
        let mut all: Vec<u16> = (0..cfg.n_actions_per_object as u16).collect();
        all.shuffle(rng);
        let k = rng.random_range(1..=all.len());
        all.truncate(k);
        all.into_iter().map(slot).collect::<Vec<_>>()
    };
    let root_untried = fresh(&mut rng);
    let mut tree = SearchTree::explicit(state, root_untried, cfg);
    let n_nodes = rng.random_range(1..40);
    for _ in 0..n_nodes {
        let candidates: Vec<usize> = (0..tree.len())
            .filter(|&i| tree.node(i).untried().len() > 0 && !tree.node(i).is_terminal())
            .filter(|&i| tree.node(i).depth + 1 < cfg.d_t)
            .collect();
        let Some(&parent) = candidates.choose(&mut rng) else {
            break;
        };
        let s = tree.node(parent).untried().next().unwrap();
        let untried = fresh(&mut rng);
        let roll = rng.random_range(0..20);
        tree.add_explicit(parent, s, untried, 0.0, 0, roll == 0, roll == 1);
    }
    let backups = rng.random_range(0..120);
    for _ in 0..backups {
        let id = rng.random_range(0..tree.len());
        let reward = if rng.random_bool(0.4) {
            0.0
        } else {
            cfg.gamma.powi(rng.random_range(1..=8))
        };
        tree.backprop(id, reward);
    }
    tree
}

/// Plain UCB arithmetic written out by hand.
pub fn ucb_oracle(q: f64, n: u64, n_parent: u64, c: f64) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    let n = n as f64;
    let log_parent = (n_parent as f64).log2() * std::f64::consts::LN_2;
    q / n + c * (2.0 * log_parent / n).powf(0.5)
}

/// Relative error with infinities compared for equality.
pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Independent selectability: a node can still lead to an expansion.
pub fn oracle_open(tree: &SearchTree, id: usize) -> bool {
    let n = tree.node(id);
    if n.graspable || n.dead || n.depth >= tree.depth_limit() {
        return false;
    }
    n.untried().len() > 0 || n.children().iter().any(|&c| oracle_open(tree, c))
}

/// Brute-force descent: score every open child, take the first maximum.
pub fn oracle_select(tree: &SearchTree, c: f64, virtual_counts: bool) -> Option<usize> {
    if !oracle_open(tree, 0) {
        return None;
    }
    let mut id = 0;
    loop {
        let n = tree.node(id);
        if n.untried().len() > 0 {
            return Some(id);
        }
        let extra = |x: &pmbs_core::mcts::TreeNode| if virtual_counts { x.virtual_visits } else { 0 };
        let scores: Vec<(usize, f64)> = n
            .children()
            .iter()
            .filter(|&&ch| oracle_open(tree, ch))
            .map(|&ch| {
                let k = tree.node(ch);
                (ch, ucb_oracle(k.q_sum, k.visits + extra(k), n.visits + extra(n), c))
            })
            .collect();
        let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        id = scores.iter().find(|s| s.1 == max)?.0;
    }
}
