//! Deterministic planar push world.
//!
//! Objects are rigid discs or convex polygons resting on a square workspace
//! centred on the origin. A push sweeps a round gripper tip along a straight
//! segment; contacts are resolved quasi-statically by projecting penetrating
//! bodies apart in small substeps.

mod batch;
mod scene;
mod sim;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{self, Convex, Vec2};

pub use batch::{batch_resolve, BatchedEnv};
pub use scene::{load_scene, save_scene, SceneFile, SceneObject};
pub use sim::resolve_push;

/// Contacts shallower than this count as touching, not intersecting.
pub const CONTACT_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("workspace side length must be positive, got {0}")]
    BadWorkspace(f64),
    #[error("grid resolution must be at least 16, got {0}")]
    BadGrid(u32),
    #[error("object {index}: {reason}")]
    BadShape { index: usize, reason: String },
    #[error("object {index} has a non-finite pose")]
    BadPose { index: usize },
    #[error("object {index} center lies outside the workspace boundary")]
    OutOfBounds { index: usize },
    #[error("objects {a} and {b} overlap by {depth:.3e} m")]
    Overlap { a: usize, b: usize, depth: f64 },
    #[error("target index {index} out of range for {count} objects")]
    BadTarget { index: usize, count: usize },
    #[error("scene file: {0}")]
    Io(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("gripper tip collides with an object or leaves the workspace at the push start")]
    StartCollision,
    #[error("contact resolution did not converge (residual penetration {residual:.3e} m)")]
    NotConverged { residual: f64 },
    #[error("batch length mismatch: {states} states, {pushes} pushes")]
    LengthMismatch { states: usize, pushes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub side_length: f64,
    #[serde(default)]
    pub boundary_margin: f64,
    #[serde(default = "default_grid")]
    pub grid_resolution: u32,
}

fn default_grid() -> u32 {
    144
}

impl Default for Workspace {
    fn default() -> Self {
        Workspace {
            side_length: 0.288,
            boundary_margin: 0.0,
            grid_resolution: 144,
        }
    }
}

impl Workspace {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.side_length > 0.0 && self.side_length.is_finite()) {
            return Err(SceneError::BadWorkspace(self.side_length));
        }
        if self.grid_resolution < 16 {
            return Err(SceneError::BadGrid(self.grid_resolution));
        }
        Ok(())
    }

    pub fn half(&self) -> f64 {
        0.5 * self.side_length
    }

    /// Half-width of the region object centers must stay strictly inside.
    pub fn center_limit(&self) -> f64 {
        self.half() - self.boundary_margin
    }

    /// Closed containment test for points such as gripper positions.
    pub fn contains(&self, p: Vec2) -> bool {
        let h = self.half();
        p.x.abs() <= h && p.y.abs() <= h
    }

    pub fn cell_size(&self) -> f64 {
        self.side_length / self.grid_resolution as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectShape {
    Disc { radius: f64 },
    /// Counter-clockwise vertices about the local origin.
    Polygon { vertices: Vec<Vec2> },
}

impl ObjectShape {
    pub fn disc(radius: f64) -> Self {
        ObjectShape::Disc { radius }
    }

    pub fn rectangle(half_w: f64, half_h: f64) -> Self {
        ObjectShape::Polygon {
            vertices: vec![
                Vec2::new(-half_w, -half_h),
                Vec2::new(half_w, -half_h),
                Vec2::new(half_w, half_h),
                Vec2::new(-half_w, half_h),
            ],
        }
    }

    /// Regular polygon with `n` vertices on a circle of radius `circumradius`.
    pub fn regular(n: usize, circumradius: f64) -> Self {
        let vertices = (0..n)
            .map(|i| Vec2::from_angle(std::f64::consts::TAU * i as f64 / n as f64) * circumradius)
            .collect();
        ObjectShape::Polygon { vertices }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            ObjectShape::Disc { radius } => {
                if !(*radius > 0.0 && radius.is_finite()) {
                    return Err(format!("disc radius must be positive, got {radius}"));
                }
            }
            ObjectShape::Polygon { vertices } => {
                let n = vertices.len();
                if n < 3 {
                    return Err(format!("polygon needs at least 3 vertices, got {n}"));
                }
                if vertices.iter().any(|v| !v.is_finite()) {
                    return Err("polygon has non-finite vertices".into());
                }
                for i in 0..n {
                    let a = vertices[i];
                    let b = vertices[(i + 1) % n];
                    let c = vertices[(i + 2) % n];
                    if (b - a).cross(c - b) <= 0.0 {
                        return Err("polygon is not strictly convex and counter-clockwise".into());
                    }
                }
                if !geometry::point_in_polygon(Vec2::ZERO, vertices) {
                    return Err("polygon does not contain its local origin".into());
                }
            }
        }
        Ok(())
    }

    /// Radius of the smallest origin-centred circle containing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            ObjectShape::Disc { radius } => *radius,
            ObjectShape::Polygon { vertices } => {
                vertices.iter().map(|v| v.norm()).fold(0.0, f64::max)
            }
        }
    }

    pub fn is_disc(&self) -> bool {
        matches!(self, ObjectShape::Disc { .. })
    }

    pub fn place(&self, pose: Pose) -> PlacedShape {
        match self {
            ObjectShape::Disc { radius } => PlacedShape::Circle {
                center: pose.position(),
                radius: *radius,
            },
            ObjectShape::Polygon { vertices } => {
                let (s, c) = pose.theta.sin_cos();
                let p = pose.position();
                PlacedShape::Polygon(vertices.iter().map(|v| p + v.rotate_cs(c, s)).collect())
            }
        }
    }
}

/// A shape transformed into world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum PlacedShape {
    Circle { center: Vec2, radius: f64 },
    Polygon(Vec<Vec2>),
}

impl PlacedShape {
    pub fn convex(&self) -> Convex<'_> {
        match self {
            PlacedShape::Circle { center, radius } => Convex::Circle {
                center: *center,
                radius: *radius,
            },
            PlacedShape::Polygon(v) => Convex::Polygon(v),
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        match self {
            PlacedShape::Circle { center, radius } => (p - *center).norm_sq() < radius * radius,
            PlacedShape::Polygon(v) => geometry::point_in_polygon(p, v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Radians in [-pi, pi).
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose { x, y, theta }
    }

    pub fn at(x: f64, y: f64) -> Self {
        Pose { x, y, theta: 0.0 }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

/// Positions of every object plus the target designation.
///
/// Shapes are shared between all states derived from the same scene; only
/// poses change under pushing.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    workspace: Workspace,
    shapes: Arc<[ObjectShape]>,
    poses: Vec<Pose>,
    target: usize,
}

impl WorldState {
    /// Validated constructor. Overlaps up to `penetration_tol` are accepted.
    pub fn new(
        workspace: Workspace,
        objects: Vec<(ObjectShape, Pose)>,
        target_index: usize,
        penetration_tol: f64,
    ) -> Result<Self, SceneError> {
        workspace.validate()?;
        let (shapes, poses): (Vec<_>, Vec<_>) = objects
            .into_iter()
            .map(|(s, p)| (s, Pose { theta: geometry::wrap_angle(p.theta), ..p }))
            .unzip();
        if !poses.is_empty() && target_index >= poses.len() {
            return Err(SceneError::BadTarget {
                index: target_index,
                count: poses.len(),
            });
        }
        for (index, (shape, pose)) in shapes.iter().zip(&poses).enumerate() {
            shape
                .validate()
                .map_err(|reason| SceneError::BadShape { index, reason })?;
            if !pose.is_finite() {
                return Err(SceneError::BadPose { index });
            }
        }
        let state = WorldState {
            workspace,
            shapes: shapes.into(),
            poses,
            target: target_index,
        };
        if let Some(index) = state.first_out_of_bounds() {
            return Err(SceneError::OutOfBounds { index });
        }
        if let Some((a, b, depth)) = state.deepest_overlap() {
            if depth > penetration_tol {
                return Err(SceneError::Overlap { a, b, depth });
            }
        }
        Ok(state)
    }

    /// Empty workspace; the target index is meaningless until objects exist.
    pub fn empty(workspace: Workspace) -> Self {
        WorldState {
            workspace,
            shapes: Vec::new().into(),
            poses: Vec::new(),
            target: 0,
        }
    }

    pub(crate) fn with_poses(&self, poses: Vec<Pose>) -> Self {
        WorldState {
            workspace: self.workspace,
            shapes: Arc::clone(&self.shapes),
            poses,
            target: self.target,
        }
    }

    /// Replace one object's pose without validation. Intended for building
    /// test situations such as out-of-bounds states.
    pub fn with_pose(&self, index: usize, pose: Pose) -> Self {
        let mut poses = self.poses.clone();
        poses[index] = pose;
        self.with_poses(poses)
    }

    pub fn workspace(&self) -> &Workspace {
        &self.workspace
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn target_index(&self) -> usize {
        self.target
    }

    pub fn shapes(&self) -> &[ObjectShape] {
        &self.shapes
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn objects(&self) -> impl Iterator<Item = (&ObjectShape, &Pose)> {
        self.shapes.iter().zip(self.poses.iter())
    }

    pub fn placed(&self) -> Vec<PlacedShape> {
        self.objects().map(|(s, p)| s.place(*p)).collect()
    }

    fn first_out_of_bounds(&self) -> Option<usize> {
        let lim = self.workspace.center_limit();
        self.poses
            .iter()
            .position(|p| !(p.x.abs() < lim && p.y.abs() < lim))
    }

    /// Deepest pairwise penetration as (i, j, depth), if any pair overlaps.
    pub fn deepest_overlap(&self) -> Option<(usize, usize, f64)> {
        let placed = self.placed();
        let mut worst: Option<(usize, usize, f64)> = None;
        for i in 0..placed.len() {
            for j in i + 1..placed.len() {
                if let Some(c) = geometry::contact(placed[i].convex(), placed[j].convex()) {
                    if worst.is_none_or(|w| c.depth > w.2) {
                        worst = Some((i, j, c.depth));
                    }
                }
            }
        }
        worst
    }

    pub fn max_penetration(&self) -> f64 {
        self.deepest_overlap().map_or(0.0, |w| w.2)
    }

    /// SHA-256 over the exact bit patterns of the scene.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in [
            self.workspace.side_length,
            self.workspace.boundary_margin,
        ] {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update((self.target as u64).to_le_bytes());
        for (shape, pose) in self.objects() {
            match shape {
                ObjectShape::Disc { radius } => {
                    h.update([0u8]);
                    h.update(radius.to_bits().to_le_bytes());
                }
                ObjectShape::Polygon { vertices } => {
                    h.update([1u8]);
                    h.update((vertices.len() as u64).to_le_bytes());
                    for v in vertices {
                        h.update(v.x.to_bits().to_le_bytes());
                        h.update(v.y.to_bits().to_le_bytes());
                    }
                }
            }
            for v in [pose.x, pose.y, pose.theta] {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PushAction {
    pub x_s: f64,
    pub y_s: f64,
    pub x_e: f64,
    pub y_e: f64,
}

impl PushAction {
    pub fn new(start: Vec2, end: Vec2) -> Self {
        PushAction {
            x_s: start.x,
            y_s: start.y,
            x_e: end.x,
            y_e: end.y,
        }
    }

    pub fn start(&self) -> Vec2 {
        Vec2::new(self.x_s, self.y_s)
    }

    pub fn end(&self) -> Vec2 {
        Vec2::new(self.x_e, self.y_e)
    }

    pub fn length(&self) -> f64 {
        (self.end() - self.start()).norm()
    }

    /// Length within 1e-9 of `push_distance` and both endpoints in the workspace.
    pub fn is_valid(&self, workspace: &Workspace, push_distance: f64) -> bool {
        (self.length() - push_distance).abs() <= 1e-9
            && workspace.contains(self.start())
            && workspace.contains(self.end())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperTip {
    pub radius: f64,
    pub clearance: f64,
}

impl Default for GripperTip {
    fn default() -> Self {
        GripperTip {
            radius: 0.012,
            clearance: 0.002,
        }
    }
}

/// Tunables of the quasi-static contact model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsConfig {
    pub push_distance: f64,
    pub substeps: u32,
    pub max_iterations: u32,
    pub penetration_tol: f64,
    pub rotation_gain: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            push_distance: 0.05,
            substeps: 64,
            max_iterations: 32,
            penetration_tol: 1e-4,
            rotation_gain: 1.0,
        }
    }
}

/// True iff every object center lies strictly inside the boundary.
pub fn in_bounds(state: &WorldState) -> bool {
    state.first_out_of_bounds().is_none()
}

/// True iff the tip, inflated by its clearance, intersects an object at the
/// push start, or the start lies outside the workspace.
pub fn collides_gripper_start(state: &WorldState, push: &PushAction, tip: &GripperTip) -> bool {
    let start = push.start();
    if !state.workspace().contains(start) {
        return true;
    }
    let probe = Convex::Circle {
        center: start,
        radius: tip.radius + tip.clearance,
    };
    state.objects().any(|(shape, pose)| {
        let reach = shape.bounding_radius() + tip.radius + tip.clearance;
        if (pose.position() - start).norm_sq() >= reach * reach {
            return false;
        }
        geometry::distance(probe, shape.place(*pose).convex()) < -CONTACT_EPS
    })
}

/// Same as [`collides_gripper_start`] but against pre-placed shapes.
pub(crate) fn start_blocked(
    workspace: &Workspace,
    placed: &[PlacedShape],
    bounds: &[(Vec2, f64)],
    start: Vec2,
    probe_radius: f64,
) -> bool {
    if !workspace.contains(start) {
        return true;
    }
    let probe = Convex::Circle {
        center: start,
        radius: probe_radius,
    };
    placed.iter().zip(bounds).any(|(shape, &(c, r))| {
        let reach = r + probe_radius;
        (c - start).norm_sq() < reach * reach
            && geometry::distance(probe, shape.convex()) < -CONTACT_EPS
    })
}
