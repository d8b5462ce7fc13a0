//! Quasi-static interaction resolution: one force application against the
//! articulation, with friction thresholds hiding the scene dynamics.

use std::str::FromStr;

use nalgebra::{Point3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::sim::geom::Face;
use crate::sim::scene::{ArticulatedScene, JointType, PartLabel, RotationLimit};

/// Interaction family. Push transmits force along the gripper forward axis;
/// pull grasps and retracts along the surface normal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    Push,
    Pull,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::Push, TaskKind::Pull];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Push => "push",
            TaskKind::Pull => "pull",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "push" => Ok(TaskKind::Push),
            "pull" => Ok(TaskKind::Pull),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Gripper pose at contact: forward approach axis plus an orthogonal up
/// axis fixing the roll. Serialized as six floats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    pub forward: [f64; 3],
    pub up: [f64; 3],
}

impl Orientation {
    pub fn new(forward: Vector3<f64>, up: Vector3<f64>) -> Self {
        Self { forward: forward.into(), up: up.into() }
    }

    pub fn forward_vec(&self) -> Vector3<f64> {
        Vector3::from(self.forward)
    }

    pub fn up_vec(&self) -> Vector3<f64> {
        Vector3::from(self.up)
    }

    pub fn as_floats(&self) -> [f64; 6] {
        [
            self.forward[0],
            self.forward[1],
            self.forward[2],
            self.up[0],
            self.up[1],
            self.up[2],
        ]
    }

    pub fn from_floats(f: [f64; 6]) -> Self {
        Self { forward: [f[0], f[1], f[2]], up: [f[3], f[4], f[5]] }
    }

    /// Unit axes, orthogonal within tolerance.
    pub fn is_valid(&self) -> bool {
        let f = self.forward_vec();
        let u = self.up_vec();
        (f.norm() - 1.0).abs() < 1e-9 && (u.norm() - 1.0).abs() < 1e-9 && f.dot(&u).abs() < 1e-9
    }
}

/// One parameterized interaction: world contact point, gripper pose, task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub point: [f64; 3],
    pub orientation: Orientation,
    pub task: TaskKind,
}

impl Action {
    pub fn point3(&self) -> Point3<f64> {
        Point3::from(self.point)
    }
}

/// Result of resolving an action against the scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionOutcome {
    /// Absolute joint displacement, radians or meters. Never negative.
    pub m: f64,
    /// Joint state after the interaction, inside the joint range.
    pub new_state: f64,
    /// The action point was not on the movable assembly (or on no surface
    /// at all). A miss is a recordable negative outcome, not an error.
    pub missed: bool,
}

/// Force magnitude applied by every interaction, newtons.
pub const FORCE_MAGNITUDE: f64 = 10.0;
/// Gravitational acceleration for sliding friction, m/s^2.
pub const GRAVITY: f64 = 9.8;
/// Joint displacement per unit torque excess, rad / (N*m).
pub const ETA_REVOLUTE: f64 = 0.1;
/// Joint displacement per unit force excess, m / N.
pub const ETA_PRISMATIC: f64 = 0.05;
/// Pulls must contact within this distance of a part edge (or a handle), m.
pub const GRASP_MARGIN: f64 = 0.015;
/// Max distance from a surface at which a contact registers, m.
pub const CONTACT_TOL: f64 = 1e-6;
/// Motion threshold separating successful from failed interactions.
pub const SUCCESS_TAU: f64 = 0.01;

/// Contact lookup: the part under the action point, movable parts first so
/// coincident surfaces (a flush door on its cabinet) resolve to the target.
fn find_contact(scene: &ArticulatedScene, p: &Point3<f64>) -> Option<(usize, Point3<f64>)> {
    let order = scene
        .parts
        .iter()
        .enumerate()
        .filter(|(_, part)| part.movable)
        .map(|(i, _)| i)
        .chain(scene.parts.iter().enumerate().filter(|(_, part)| !part.movable).map(|(i, _)| i));
    for i in order {
        let part = &scene.parts[i];
        let local = scene.part_iso(part).inverse_transform_point(p);
        if part.cuboid.surface_distance(&local) <= CONTACT_TOL {
            return Some((i, local));
        }
    }
    None
}

/// Outward world-frame normal of the face under a local surface point.
fn contact_normal(scene: &ArticulatedScene, part_idx: usize, local: &Point3<f64>) -> Vector3<f64> {
    let part = &scene.parts[part_idx];
    let face: Face = part.cuboid.surface_face(local);
    scene.part_iso(part).rotation * face.normal()
}

/// Generalized driving force of a world-frame force at a world point:
/// torque about the joint axis for revolute joints, axial component for
/// prismatic ones.
pub fn generalized_force(
    scene: &ArticulatedScene,
    point: &Point3<f64>,
    force: &Vector3<f64>,
) -> f64 {
    match scene.joint.jtype {
        JointType::Revolute => {
            let lever = point - scene.joint.origin;
            lever.cross(force).dot(&scene.joint.dir)
        }
        JointType::Prismatic => force.dot(&scene.joint.dir),
    }
}

/// Resistance threshold the generalized force must exceed.
fn resistance(scene: &ArticulatedScene) -> f64 {
    let h = &scene.hidden;
    match scene.joint.jtype {
        JointType::Revolute => h.joint_friction,
        JointType::Prismatic => {
            h.joint_friction + h.surface_friction * h.part_mass * GRAVITY
        }
    }
}

fn displacement_gain(jtype: JointType) -> f64 {
    match jtype {
        JointType::Revolute => ETA_REVOLUTE,
        JointType::Prismatic => ETA_PRISMATIC,
    }
}

/// Resolves one action, mutating the joint state. The outcome reports the
/// absolute displacement after clamping to the joint range; contact misses
/// and failed grasps yield m = 0 with the state untouched.
pub fn execute_interaction(scene: &mut ArticulatedScene, action: &Action) -> MotionOutcome {
    let state = scene.joint_state;
    let p = action.point3();

    let Some((part_idx, local)) = find_contact(scene, &p) else {
        return MotionOutcome { m: 0.0, new_state: state, missed: true };
    };
    let part = &scene.parts[part_idx];
    if !part.movable {
        return MotionOutcome { m: 0.0, new_state: state, missed: true };
    }

    let normal = contact_normal(scene, part_idx, &local);
    let force = match action.task {
        TaskKind::Push => {
            let f = action.orientation.forward_vec();
            // A push only transmits when the approach opposes the surface.
            if f.dot(&normal) > 0.0 {
                return MotionOutcome { m: 0.0, new_state: state, missed: false };
            }
            f * FORCE_MAGNITUDE
        }
        TaskKind::Pull => {
            let graspable = part.label == PartLabel::Handle
                || part.cuboid.edge_distance(&local) <= GRASP_MARGIN;
            if !graspable {
                return MotionOutcome { m: 0.0, new_state: state, missed: false };
            }
            normal * FORCE_MAGNITUDE
        }
    };

    let q = generalized_force(scene, &p, &force);
    let excess = q.abs() - resistance(scene);
    let mut delta = if excess > 0.0 {
        q.signum() * displacement_gain(scene.joint.jtype) * excess
    } else {
        0.0
    };

    // Faucet-style one-way gates block the disallowed sense entirely.
    match scene.hidden.rotation_limit {
        RotationLimit::ClockwiseOnly if delta > 0.0 => delta = 0.0,
        RotationLimit::CounterClockwiseOnly if delta < 0.0 => delta = 0.0,
        _ => {}
    }

    let (lo, hi) = scene.joint.range;
    let new_state = (state + delta).clamp(lo, hi);
    scene.joint_state = new_state;
    MotionOutcome { m: (new_state - state).abs(), new_state, missed: false }
}

/// Orthonormal tangent basis for a unit normal, deterministic in the input.
pub fn tangent_basis(normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let reference = if normal.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let t1 = Unit::new_normalize(normal.cross(&reference)).into_inner();
    let t2 = normal.cross(&t1);
    (t1, t2)
}
