//! Quasi-static articulated-object micro-simulator: procedural scenes with
//! hidden dynamics and single-force interaction resolution.

pub mod geom;
pub mod interact;
pub mod scene;

pub use geom::{Cuboid, Face};
pub use interact::{
    execute_interaction, generalized_force, tangent_basis, Action, MotionOutcome, Orientation,
    TaskKind, CONTACT_TOL, ETA_PRISMATIC, ETA_REVOLUTE, FORCE_MAGNITUDE, GRASP_MARGIN, GRAVITY,
    SUCCESS_TAU,
};
pub use scene::{
    oracle_call_count, oracle_hidden, sample_scene, scene_from_ref, ArticulatedScene, AxisSide,
    Category, HiddenParams, Joint, JointType, Part, PartLabel, RotationLimit, SceneRef,
};
