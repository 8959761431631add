use crate::geometry::{self, Convex, Vec2};

use super::{
    collides_gripper_start, GripperTip, ObjectShape, PhysicsConfig, PhysicsError, PlacedShape,
    Pose, PushAction, WorldState,
};

/// Keeps clamped centers strictly inside the boundary line.
const CLAMP_INSET: f64 = 1e-9;

struct Body<'a> {
    shape: &'a ObjectShape,
    center: Vec2,
    theta: f64,
    bound: f64,
    placed: PlacedShape,
}

impl<'a> Body<'a> {
    fn new(shape: &'a ObjectShape, pose: Pose) -> Self {
        Body {
            shape,
            center: pose.position(),
            theta: pose.theta,
            bound: shape.bounding_radius(),
            placed: shape.place(pose),
        }
    }

    fn pose(&self) -> Pose {
        Pose::new(self.center.x, self.center.y, self.theta)
    }

    fn refresh(&mut self) {
        self.placed = self.shape.place(self.pose());
    }

    /// Translate by `d`; polygons also turn about their center in proportion
    /// to the tangential part of `d` at the contact point.
    fn displace(&mut self, d: Vec2, contact_point: Vec2, gain: f64) {
        let lever = contact_point - self.center;
        self.center += d;
        if !self.shape.is_disc() && gain != 0.0 {
            let l2 = lever.norm_sq();
            if l2 > 1e-12 {
                self.theta = geometry::wrap_angle(self.theta + gain * lever.cross(d) / l2);
            }
        }
        self.refresh();
    }

    fn clamp(&mut self, lim: f64) {
        let x = self.center.x.clamp(-lim, lim);
        let y = self.center.y.clamp(-lim, lim);
        if x != self.center.x || y != self.center.y {
            self.center = Vec2::new(x, y);
            self.refresh();
        }
    }
}

#[inline]
fn near(a: Vec2, ra: f64, b: Vec2, rb: f64) -> bool {
    let r = ra + rb;
    (a - b).norm_sq() < r * r
}

struct Solver<'a> {
    bodies: Vec<Body<'a>>,
    cfg: &'a PhysicsConfig,
    limit: f64,
}

impl Solver<'_> {
    /// One Gauss-Seidel sweep: tip contacts, pairwise contacts, boundary clamp.
    /// Returns the deepest penetration encountered.
    fn sweep(&mut self, tip: Option<(Vec2, f64)>) -> f64 {
        let gain = self.cfg.rotation_gain;
        let mut worst = 0.0f64;
        if let Some((tc, tr)) = tip {
            let probe = Convex::Circle {
                center: tc,
                radius: tr,
            };
            for b in &mut self.bodies {
                if !near(tc, tr, b.center, b.bound) {
                    continue;
                }
                if let Some(c) = geometry::contact(probe, b.placed.convex()) {
                    worst = worst.max(c.depth);
                    b.displace(c.normal * c.depth, c.point, gain);
                }
            }
        }
        let n = self.bodies.len();
        for i in 0..n {
            for j in i + 1..n {
                let (lo, hi) = self.bodies.split_at_mut(j);
                let (a, b) = (&mut lo[i], &mut hi[0]);
                if !near(a.center, a.bound, b.center, b.bound) {
                    continue;
                }
                if let Some(c) = geometry::contact(a.placed.convex(), b.placed.convex()) {
                    worst = worst.max(c.depth);
                    let half = c.normal * (0.5 * c.depth);
                    a.displace(-half, c.point, gain);
                    b.displace(half, c.point, gain);
                }
            }
        }
        for b in &mut self.bodies {
            b.clamp(self.limit);
        }
        worst
    }

    /// Deepest remaining penetration, without moving anything.
    fn residual(&self, tip: Option<(Vec2, f64)>) -> f64 {
        let mut worst = 0.0f64;
        if let Some((tc, tr)) = tip {
            let probe = Convex::Circle {
                center: tc,
                radius: tr,
            };
            for b in &self.bodies {
                if near(tc, tr, b.center, b.bound) {
                    if let Some(c) = geometry::contact(probe, b.placed.convex()) {
                        worst = worst.max(c.depth);
                    }
                }
            }
        }
        for i in 0..self.bodies.len() {
            for j in i + 1..self.bodies.len() {
                let (a, b) = (&self.bodies[i], &self.bodies[j]);
                if near(a.center, a.bound, b.center, b.bound) {
                    if let Some(c) = geometry::contact(a.placed.convex(), b.placed.convex()) {
                        worst = worst.max(c.depth);
                    }
                }
            }
        }
        worst
    }

    fn relax(&mut self, tip: Option<(Vec2, f64)>) -> Result<(), f64> {
        let tol = self.cfg.penetration_tol;
        for _ in 0..self.cfg.max_iterations {
            let worst = self.sweep(tip);
            if worst == 0.0 {
                return Ok(());
            }
            if worst <= tol && self.residual(tip) <= tol {
                return Ok(());
            }
        }
        let r = self.residual(tip);
        if r <= tol {
            Ok(())
        } else {
            Err(r)
        }
    }

    fn snapshot(&self) -> Vec<(Vec2, f64)> {
        self.bodies.iter().map(|b| (b.center, b.theta)).collect()
    }

    fn restore(&mut self, snap: &[(Vec2, f64)]) {
        for (b, &(c, t)) in self.bodies.iter_mut().zip(snap) {
            if b.center != c || b.theta != t {
                b.center = c;
                b.theta = t;
                b.refresh();
            }
        }
    }
}

/// Apply a push to a state and return the resulting state.
///
/// The tip sweeps the push segment in `cfg.substeps` equal steps. After each
/// step, bodies penetrated by the tip are moved out along the minimum
/// translation vector and body-body overlaps are projected apart until the
/// deepest penetration is at most `cfg.penetration_tol`. If a step cannot be
/// resolved (for example a body wedged between the tip and the wall) the tip
/// stalls: that step is undone and the sweep ends there.
pub fn resolve_push(
    state: &WorldState,
    push: &PushAction,
    tip: &GripperTip,
    cfg: &PhysicsConfig,
) -> Result<WorldState, PhysicsError> {
    if collides_gripper_start(state, push, tip) {
        return Err(PhysicsError::StartCollision);
    }
    let start = push.start();
    let delta = push.end() - start;
    let limit = state.workspace().center_limit() - CLAMP_INSET;

    let mut solver = Solver {
        bodies: state.objects().map(|(s, p)| Body::new(s, *p)).collect(),
        cfg,
        limit,
    };

    let steps = cfg.substeps.max(1);
    let mut touched = false;
    for k in 1..=steps {
        let tc = start + delta * (k as f64 / steps as f64);
        if !touched
            && !solver
                .bodies
                .iter()
                .any(|b| near(tc, tip.radius, b.center, b.bound))
        {
            continue;
        }
        touched = true;
        let snap = solver.snapshot();
        if solver.relax(Some((tc, tip.radius))).is_err() {
            solver.restore(&snap);
            break;
        }
    }

    let poses: Vec<Pose> = solver.bodies.iter().map(Body::pose).collect();
    let next = state.with_poses(poses);
    if touched {
        let residual = next.max_penetration();
        if residual > cfg.penetration_tol {
            return Err(PhysicsError::NotConverged { residual });
        }
    }
    Ok(next)
}
