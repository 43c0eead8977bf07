use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ExecError;
use crate::bim::TaskModel;
use crate::geom::{self, Point3};
use crate::skill_kb::{ObjectState, OrientationPredicate, PositionPredicate, SizePredicate, StateReference, Tool};

/// Pose and size comparisons are exact up to this many meters (radians
/// for yaw).
pub const STATE_TOLERANCE: f64 = 1e-6;

/// Default gripper rest pose.
pub const HOME_POSE: Point3 = [0.0, 0.0, 1.0];

/// Simulated world: object poses and sizes, gripper and tool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub object_poses: BTreeMap<String, Point3>,
    /// (length, width, thickness) in meters.
    pub object_sizes: BTreeMap<String, [f64; 3]>,
    /// Rotation about +z in radians.
    #[serde(default)]
    pub object_yaws: BTreeMap<String, f64>,
    pub gripper_pose: Point3,
    pub gripper_holding: Option<String>,
    pub current_tool: Tool,
    #[serde(default)]
    pub fastened: BTreeSet<String>,
}

impl WorldState {
    /// Objects at their task-model centers, gripper at home holding the
    /// given tool.
    pub fn from_task(task: &TaskModel, tool: Tool) -> Self {
        WorldState {
            object_poses: task.objects.iter().map(|o| (o.id.clone(), o.center)).collect(),
            object_sizes: task.objects.iter().map(|o| (o.id.clone(), [o.length_x, o.width_y, o.thickness_z])).collect(),
            object_yaws: task.objects.iter().map(|o| (o.id.clone(), 0.0)).collect(),
            gripper_pose: HOME_POSE,
            gripper_holding: None,
            current_tool: tool,
            fastened: BTreeSet::new(),
        }
    }

    pub fn apply(&mut self, delta: &WorldDelta) {
        match delta {
            WorldDelta::ObjectPose { object, pose } => {
                self.object_poses.insert(object.clone(), *pose);
            }
            WorldDelta::ObjectSize { object, size } => {
                self.object_sizes.insert(object.clone(), *size);
            }
            WorldDelta::ObjectYaw { object, yaw } => {
                self.object_yaws.insert(object.clone(), *yaw);
            }
            WorldDelta::Gripper { pose } => self.gripper_pose = *pose,
            WorldDelta::Holding { object } => self.gripper_holding = object.clone(),
            WorldDelta::Tool { tool } => self.current_tool = *tool,
            WorldDelta::Fastened { object } => {
                self.fastened.insert(object.clone());
            }
        }
    }
}

/// One recorded world mutation. Event payloads carry these so a log can
/// be replayed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum WorldDelta {
    ObjectPose { object: String, pose: Point3 },
    ObjectSize { object: String, size: [f64; 3] },
    ObjectYaw { object: String, yaw: f64 },
    Gripper { pose: Point3 },
    Holding { object: Option<String> },
    Tool { tool: Tool },
    Fastened { object: String },
}

/// Where the state references of a plan point in the world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateContext {
    /// The manipulated object.
    pub object: String,
    pub material_stack: Option<Point3>,
    #[serde(default)]
    pub material_stack_yaw: f64,
    pub target: Option<Point3>,
    #[serde(default)]
    pub target_yaw: f64,
    pub human_hand: Option<Point3>,
    pub holder_z: Option<f64>,
    /// Required (length, width) after cutting.
    pub required_size: Option<[f64; 2]>,
    pub original_size: Option<[f64; 3]>,
}

impl StateContext {
    /// Context for manipulating `object_id`: the stack is where the object
    /// starts, the target is the named task target.
    pub fn from_task(task: &TaskModel, object_id: &str, target_id: Option<&str>) -> Result<Self, crate::bim::BimError> {
        let obj = task.object(object_id)?;
        let target = target_id.map(|t| task.target(t)).transpose()?;
        Ok(StateContext {
            object: obj.id.clone(),
            material_stack: Some(obj.center),
            material_stack_yaw: 0.0,
            target: target.map(|t| t.center),
            target_yaw: 0.0,
            human_hand: None,
            holder_z: task.holder_z,
            required_size: task.required_length.zip(task.required_width).map(|(l, w)| [l, w]),
            original_size: Some([obj.length_x, obj.width_y, obj.thickness_z]),
        })
    }

    fn unresolved(what: &str) -> ExecError {
        ExecError::UnresolvedReference(what.into())
    }

    fn position(&self, r: &StateReference, world: &WorldState) -> Result<Point3, ExecError> {
        match r {
            StateReference::MaterialStack => self.material_stack.ok_or_else(|| Self::unresolved("material_stack")),
            StateReference::TargetCenter => self.target.ok_or_else(|| Self::unresolved("target_center")),
            StateReference::GripperCenter => Ok(world.gripper_pose),
            StateReference::HumanHandCenter => self.human_hand.ok_or_else(|| Self::unresolved("human_hand_center")),
            StateReference::AbsoluteCoordinate { x, y, z } => Ok([*x, *y, *z]),
            StateReference::None => Err(Self::unresolved("none")),
        }
    }

    fn yaw(&self, r: &StateReference) -> Result<f64, ExecError> {
        match r {
            StateReference::MaterialStack => Ok(self.material_stack_yaw),
            StateReference::TargetCenter => Ok(self.target_yaw),
            other => Err(Self::unresolved(&format!("orientation of {other:?}"))),
        }
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= STATE_TOLERANCE
}

/// Whether the manipulated object satisfies `state` in `world`.
pub fn evaluate_object_state(state: &ObjectState, world: &WorldState, ctx: &StateContext) -> Result<bool, ExecError> {
    let needs_object = !matches!(state.position, PositionPredicate::Unspecified)
        || !matches!(state.orientation, OrientationPredicate::Unspecified)
        || !matches!(state.size, SizePredicate::Unspecified);
    if !needs_object {
        return Ok(true);
    }
    let pose = *world.object_poses.get(&ctx.object).ok_or_else(|| ExecError::UnknownObject(ctx.object.clone()))?;
    let position_ok = match &state.position {
        PositionPredicate::CoordEquals { reference } => geom::distance(pose, ctx.position(reference, world)?) <= STATE_TOLERANCE,
        PositionPredicate::CoordDiffers { reference, min_distance_m } => {
            geom::distance(pose, ctx.position(reference, world)?) >= *min_distance_m
        }
        PositionPredicate::ZMatchesHolder => close(pose[2], ctx.holder_z.ok_or_else(|| StateContext::unresolved("holder_z"))?),
        PositionPredicate::Unspecified => true,
    };
    let yaw = world.object_yaws.get(&ctx.object).copied().unwrap_or(0.0);
    let orientation_ok = match &state.orientation {
        OrientationPredicate::Matches { reference } => close(yaw, ctx.yaw(reference)?),
        OrientationPredicate::Differs { reference } => !close(yaw, ctx.yaw(reference)?),
        OrientationPredicate::Unspecified => true,
    };
    let size = world.object_sizes.get(&ctx.object);
    let size_ok = match state.size {
        SizePredicate::RequiredSize => {
            let req = ctx.required_size.ok_or_else(|| StateContext::unresolved("required_size"))?;
            size.is_some_and(|s| close(s[0], req[0]) && close(s[1], req[1]))
        }
        SizePredicate::Original => {
            let orig = ctx.original_size.ok_or_else(|| StateContext::unresolved("original_size"))?;
            size.is_some_and(|s| (0..3).all(|k| close(s[k], orig[k])))
        }
        SizePredicate::Unspecified => true,
    };
    Ok(position_ok && orientation_ok && size_ok)
}
