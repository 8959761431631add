//! JSON scene files.
//!
//! ```json
//! {"workspace": {"side_length": 0.288},
//!  "objects": [{"kind": "disc", "radius": 0.02, "pose": [0.0, 0.0, 0.0]},
//!              {"kind": "polygon", "vertices": [[-0.01,-0.01],[0.01,-0.01],[0.0,0.01]],
//!               "pose": [0.05, 0.0, 0.3]}],
//!  "target_index": 0}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ObjectShape, Pose, SceneError, Workspace, WorldState};
use crate::geometry::Vec2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneObject {
    Disc {
        radius: f64,
        pose: [f64; 3],
    },
    Polygon {
        vertices: Vec<[f64; 2]>,
        pose: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub workspace: Workspace,
    pub objects: Vec<SceneObject>,
    pub target_index: usize,
}

impl SceneFile {
    pub fn from_state(state: &WorldState) -> Self {
        let objects = state
            .objects()
            .map(|(shape, p)| {
                let pose = [p.x, p.y, p.theta];
                match shape {
                    ObjectShape::Disc { radius } => SceneObject::Disc {
                        radius: *radius,
                        pose,
                    },
                    ObjectShape::Polygon { vertices } => SceneObject::Polygon {
                        vertices: vertices.iter().map(|v| [v.x, v.y]).collect(),
                        pose,
                    },
                }
            })
            .collect();
        SceneFile {
            workspace: *state.workspace(),
            objects,
            target_index: state.target_index(),
        }
    }

    /// Validate and build the state; overlapping or out-of-bounds scenes are rejected.
    pub fn into_state(self, penetration_tol: f64) -> Result<WorldState, SceneError> {
        let objects = self
            .objects
            .into_iter()
            .map(|o| match o {
                SceneObject::Disc { radius, pose } => {
                    (ObjectShape::Disc { radius }, Pose::new(pose[0], pose[1], pose[2]))
                }
                SceneObject::Polygon { vertices, pose } => (
                    ObjectShape::Polygon {
                        vertices: vertices.iter().map(|v| Vec2::new(v[0], v[1])).collect(),
                    },
                    Pose::new(pose[0], pose[1], pose[2]),
                ),
            })
            .collect();
        WorldState::new(self.workspace, objects, self.target_index, penetration_tol)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        serde_json::from_str(text).map_err(|e| SceneError::Io(e.to_string()))
    }
}

pub fn load_scene(path: &Path, penetration_tol: f64) -> Result<WorldState, SceneError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SceneError::Io(format!("{}: {e}", path.display())))?;
    SceneFile::from_json(&text)?.into_state(penetration_tol)
}

pub fn save_scene(path: &Path, state: &WorldState) -> Result<(), SceneError> {
    std::fs::write(path, SceneFile::from_state(state).to_json())
        .map_err(|e| SceneError::Io(format!("{}: {e}", path.display())))
}
