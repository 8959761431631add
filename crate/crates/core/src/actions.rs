//! Push sampling around object contours and a geometric stand-in for the
//! learned grasp classifier / grasp network.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::geometry::{self, Convex, Vec2};
use crate::pushworld::{start_blocked, GripperTip, PlacedShape, PushAction, WorldState};

/// Number of discretized gripper yaw angles.
pub const GRASP_ANGLES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspAction {
    pub x: f64,
    pub y: f64,
    pub angle_index: usize,
}

impl GraspAction {
    pub fn angle(&self) -> f64 {
        grasp_angle(self.angle_index)
    }
}

pub fn grasp_angle(index: usize) -> f64 {
    TAU * index as f64 / GRASP_ANGLES as f64
}

/// Parallel-jaw gripper footprint. Each finger is a `finger_thickness` by
/// `finger_width` rectangle; inner finger faces sit `opening` apart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraspGeometry {
    pub finger_width: f64,
    pub finger_thickness: f64,
    pub opening: f64,
    pub approach_clearance: f64,
}

impl Default for GraspGeometry {
    fn default() -> Self {
        GraspGeometry {
            finger_width: 0.02,
            finger_thickness: 0.01,
            opening: 0.085,
            approach_clearance: 0.003,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspReport {
    pub graspable: bool,
    /// Smallest finger-to-obstacle gap of the best feasible pose, 0 if none.
    pub margin: f64,
    /// Best feasible pose, present even when its margin is under the threshold.
    pub best: Option<GraspAction>,
}

/// A push candidate identified by object and contour angle index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PushSlot {
    pub object: u16,
    pub angle: u16,
}

/// Parameters shared by every call to the push sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushSampler {
    pub n_per_object: usize,
    pub tip: GripperTip,
    pub push_distance: f64,
}

impl PushSampler {
    /// Candidate geometry for one slot: start on the contour dilated by the
    /// tip radius plus clearance, pointing at the object's center.
    fn geometry_for(&self, placed: &PlacedShape, pose_theta: f64, center: Vec2, angle: usize) -> PushAction {
        let phi = pose_theta + TAU * angle as f64 / self.n_per_object as f64;
        let dir = Vec2::from_angle(phi);
        let offset = self.tip.radius + self.tip.clearance;
        let t = geometry::ray_exit_dilated(center, dir, placed.convex(), offset);
        let start = center + dir * t;
        PushAction::new(start, start - dir * self.push_distance)
    }

    pub fn action(&self, state: &WorldState, slot: PushSlot) -> PushAction {
        let (shape, pose) = state
            .objects()
            .nth(slot.object as usize)
            .expect("push slot refers to a missing object");
        self.geometry_for(&shape.place(*pose), pose.theta, pose.position(), slot.angle as usize)
    }

    /// Every legal candidate in (object, angle) order.
    pub fn sample(&self, state: &WorldState) -> Vec<(PushSlot, PushAction)> {
        let ws = state.workspace();
        let placed = state.placed();
        let bounds: Vec<(Vec2, f64)> = state
            .objects()
            .map(|(s, p)| (p.position(), s.bounding_radius()))
            .collect();
        let probe = self.tip.radius + self.tip.clearance;
        let mut out = Vec::new();
        for (i, (_, pose)) in state.objects().enumerate() {
            for j in 0..self.n_per_object {
                let push = self.geometry_for(&placed[i], pose.theta, pose.position(), j);
                if !ws.contains(push.end())
                    || start_blocked(ws, &placed, &bounds, push.start(), probe)
                {
                    continue;
                }
                out.push((
                    PushSlot {
                        object: i as u16,
                        angle: j as u16,
                    },
                    push,
                ));
            }
        }
        out
    }

    pub fn slots(&self, state: &WorldState) -> Vec<PushSlot> {
        self.sample(state).into_iter().map(|(s, _)| s).collect()
    }
}

/// `n_per_object` center-directed pushes per object, evenly spaced by angle,
/// minus those whose start collides or whose end leaves the workspace.
pub fn sample_pushes(
    state: &WorldState,
    n_per_object: usize,
    tip: &GripperTip,
    push_distance: f64,
) -> Vec<PushAction> {
    PushSampler {
        n_per_object,
        tip: *tip,
        push_distance,
    }
    .sample(state)
    .into_iter()
    .map(|(_, a)| a)
    .collect()
}

/// World-space corners (CCW) of the two fingers for a closing axis `u`
/// centred at `g`.
pub fn finger_rects(g: Vec2, u: Vec2, geom: &GraspGeometry) -> [[Vec2; 4]; 2] {
    let v = u.perp();
    let inner = 0.5 * geom.opening;
    let outer = inner + geom.finger_thickness;
    let hw = 0.5 * geom.finger_width;
    let rect = |a: f64, b: f64| {
        [
            g + u * a + v * -hw,
            g + u * b + v * -hw,
            g + u * b + v * hw,
            g + u * a + v * hw,
        ]
    };
    [rect(inner, outer), rect(-outer, -inner)]
}

/// Extent of a placed shape projected on unit axis `u`.
fn support_interval(shape: &PlacedShape, u: Vec2) -> (f64, f64) {
    match shape {
        PlacedShape::Circle { center, radius } => {
            let c = center.dot(u);
            (c - radius, c + radius)
        }
        PlacedShape::Polygon(v) => v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let d = p.dot(u);
            (lo.min(d), hi.max(d))
        }),
    }
}

/// Jaw pose for angle index `k` on the given target, or `None` when the
/// target is too wide to fit between the open fingers.
pub fn grasp_pose(
    target: &PlacedShape,
    target_center: Vec2,
    k: usize,
    geom: &GraspGeometry,
) -> Option<(Vec2, [[Vec2; 4]; 2])> {
    let u = Vec2::from_angle(grasp_angle(k));
    let (lo, hi) = support_interval(target, u);
    if hi - lo + 2.0 * geom.approach_clearance >= geom.opening {
        return None;
    }
    let mid = 0.5 * (lo + hi);
    let g = target_center + u * (mid - target_center.dot(u));
    Some((g, finger_rects(g, u, geom)))
}

/// Sweep the jaw angles over the target and score each collision-free pose
/// by its smallest gap to any other object.
///
/// Opposite angles (`k` and `k + 8`) give the same pair of fingers, so only
/// the first half-turn is evaluated and ties go to the lowest index.
pub fn graspable(state: &WorldState, geom: &GraspGeometry, margin_threshold: f64) -> GraspReport {
    let none = GraspReport {
        graspable: false,
        margin: 0.0,
        best: None,
    };
    if state.is_empty() {
        return none;
    }
    let ws = state.workspace();
    let cap = ws.side_length;
    let t = state.target_index();
    let placed = state.placed();
    let obstacles: Vec<(Vec2, f64, &PlacedShape)> = state
        .objects()
        .zip(&placed)
        .enumerate()
        .filter(|(i, _)| *i != t)
        .map(|(_, ((s, p), pl))| (p.position(), s.bounding_radius(), pl))
        .collect();
    let target_center = state.poses()[t].position();
    let finger_bound = 0.5 * geom.finger_thickness.hypot(geom.finger_width);

    let mut best: Option<(f64, GraspAction)> = None;
    for k in 0..GRASP_ANGLES / 2 {
        let Some((g, fingers)) = grasp_pose(&placed[t], target_center, k, geom) else {
            continue;
        };
        if fingers.iter().flatten().any(|c| !ws.contains(*c)) {
            continue;
        }
        let mut gap = cap;
        'fingers: for f in &fingers {
            let fc = (f[0] + f[2]) * 0.5;
            for &(oc, ob, shape) in &obstacles {
                let lower = (oc - fc).norm() - ob - finger_bound;
                if lower >= gap {
                    continue;
                }
                gap = gap.min(geometry::distance(Convex::Polygon(f), shape.convex()));
                if gap <= 0.0 {
                    break 'fingers;
                }
            }
        }
        if gap > 0.0 && best.is_none_or(|(m, _)| gap > m) {
            best = Some((
                gap,
                GraspAction {
                    x: g.x,
                    y: g.y,
                    angle_index: k,
                },
            ));
        }
    }
    match best {
        Some((margin, action)) => GraspReport {
            graspable: margin >= margin_threshold,
            margin,
            best: Some(action),
        },
        None => none,
    }
}

/// The widest-margin feasible jaw pose on the target.
pub fn best_grasp(state: &WorldState, geom: &GraspGeometry) -> Option<GraspAction> {
    graspable(state, geom, 0.0).best
}

/// True when an executed grasp closes on the target in this state: the
/// requested jaw pose is collision-free and inside the workspace.
pub fn grasp_feasible(state: &WorldState, geom: &GraspGeometry, grasp: &GraspAction) -> bool {
    if state.is_empty() {
        return false;
    }
    let ws = state.workspace();
    let t = state.target_index();
    let placed = state.placed();
    let u = Vec2::from_angle(grasp.angle());
    let (lo, hi) = support_interval(&placed[t], u);
    if hi - lo + 2.0 * geom.approach_clearance >= geom.opening {
        return false;
    }
    let fingers = finger_rects(Vec2::new(grasp.x, grasp.y), u, geom);
    if fingers.iter().flatten().any(|c| !ws.contains(*c)) {
        return false;
    }
    placed
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != t)
        .all(|(_, o)| {
            fingers
                .iter()
                .all(|f| geometry::distance(Convex::Polygon(f), o.convex()) > 0.0)
        })
}
