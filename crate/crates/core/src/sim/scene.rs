//! Procedural articulated scenes: one movable assembly on a static base,
//! driven by a single revolute or prismatic joint with hidden dynamics.

use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Isometry3, Point3, Translation3, Unit, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::Error;
use crate::sim::geom::{rotation_about_line, Cuboid};

/// Scene category. Each one fixes the joint type, the ambiguity structure,
/// and which hidden parameters matter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    /// Ajar door on a frame; revolute, hinge side visible from geometry.
    Door,
    /// Sliding drawer with a handle; prismatic.
    Drawer,
    /// Bar handle rotating about a vertical axis; revolute with an optional
    /// one-way rotation limit.
    Faucet,
    /// Flush, handle-less door closed against a cabinet; revolute, hinge
    /// side invisible from geometry.
    CabinetClosedDoor,
}

impl Category {
    pub const ALL: [Category; 4] =
        [Category::Door, Category::Drawer, Category::Faucet, Category::CabinetClosedDoor];

    pub fn name(&self) -> &'static str {
        match self {
            Category::Door => "door",
            Category::Drawer => "drawer",
            Category::Faucet => "faucet",
            Category::CabinetClosedDoor => "cabinet-closed-door",
        }
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "door" => Ok(Category::Door),
            "drawer" => Ok(Category::Drawer),
            "faucet" => Ok(Category::Faucet),
            "cabinet-closed-door" => Ok(Category::CabinetClosedDoor),
            other => Err(Error::Config(format!("unknown category `{other}`"))),
        }
    }
}

/// Which vertical edge carries the hinge, as seen from the camera
/// (the camera's +y is to its right).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AxisSide {
    Left,
    Right,
}

/// Permitted rotation sense for faucet handles, viewed from above.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotationLimit {
    /// Only negative joint displacement.
    ClockwiseOnly,
    /// Only positive joint displacement.
    CounterClockwiseOnly,
    Both,
}

/// Hidden dynamics of a scene. Sampled with the scene, never rendered, and
/// reachable only through [`oracle_hidden`] which counts its callers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenParams {
    /// Joint resistance: N*m for revolute joints, N for prismatic ones.
    /// Log-uniform in [0.05, 2.0].
    pub joint_friction: f64,
    /// Movable part mass in kg, uniform in [0.2, 5.0]. Enters the motion
    /// law only for prismatic joints (sliding friction).
    pub part_mass: f64,
    /// Sliding friction coefficient, uniform in [0.05, 1.0]. Prismatic only.
    pub surface_friction: f64,
    /// Hinge side for door-like categories.
    pub axis_side: AxisSide,
    /// Rotation gate for faucets; `Both` elsewhere.
    pub rotation_limit: RotationLimit,
}

pub const JOINT_FRICTION_RANGE: (f64, f64) = (0.05, 2.0);
pub const PART_MASS_RANGE: (f64, f64) = (0.2, 5.0);
pub const SURFACE_FRICTION_RANGE: (f64, f64) = (0.05, 1.0);

/// Joint kind of the movable assembly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JointType {
    Revolute,
    Prismatic,
}

/// The single articulation of a scene.
#[derive(Clone, Debug)]
pub struct Joint {
    pub jtype: JointType,
    /// A point on the axis line (revolute) or unused origin (prismatic).
    pub origin: Point3<f64>,
    pub dir: Unit<Vector3<f64>>,
    /// Inclusive joint limits, lo <= hi.
    pub range: (f64, f64),
}

/// Role of a part; pulls may grasp handles anywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartLabel {
    Base,
    Panel,
    Handle,
}

/// One rigid cuboid. Movable parts ride the joint isometry.
#[derive(Clone, Debug)]
pub struct Part {
    pub cuboid: Cuboid,
    /// Center position at joint state zero.
    pub rest_center: Point3<f64>,
    pub movable: bool,
    pub label: PartLabel,
}

impl Part {
    fn fixed(cuboid: Cuboid, center: Point3<f64>) -> Self {
        Self { cuboid, rest_center: center, movable: false, label: PartLabel::Base }
    }

    fn moving(cuboid: Cuboid, center: Point3<f64>, label: PartLabel) -> Self {
        Self { cuboid, rest_center: center, movable: true, label }
    }
}

/// A procedurally generated articulated object with one degree of freedom.
#[derive(Clone, Debug)]
pub struct ArticulatedScene {
    pub category: Category,
    pub seed: u64,
    pub parts: Vec<Part>,
    pub joint: Joint,
    /// Current joint state, always within `joint.range`.
    pub joint_state: f64,
    pub initial_state: f64,
    /// Geometric center of the rest pose; the camera looks at it.
    pub center: Point3<f64>,
    pub(in crate::sim) hidden: HiddenParams,
}

/// Serializable reference to a scene: everything needed to rebuild it.
/// Hidden parameters are never serialized; they regrow from the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRef {
    pub category: Category,
    pub seed: u64,
    pub joint_state: f64,
}

static ORACLE_CALLS: AtomicU64 = AtomicU64::new(0);

/// Test-only window into the hidden dynamics. Every call bumps a global
/// counter so training and adaptation paths can prove they never peeked.
pub fn oracle_hidden(scene: &ArticulatedScene) -> &HiddenParams {
    ORACLE_CALLS.fetch_add(1, Ordering::Relaxed);
    &scene.hidden
}

/// Number of [`oracle_hidden`] calls so far in this process.
pub fn oracle_call_count() -> u64 {
    ORACLE_CALLS.load(Ordering::Relaxed)
}

fn sample_hidden(rng: &mut ChaCha8Rng) -> HiddenParams {
    let (flo, fhi) = JOINT_FRICTION_RANGE;
    let joint_friction = (rng.gen_range(flo.ln()..fhi.ln())).exp();
    let part_mass = rng.gen_range(PART_MASS_RANGE.0..PART_MASS_RANGE.1);
    let surface_friction = rng.gen_range(SURFACE_FRICTION_RANGE.0..SURFACE_FRICTION_RANGE.1);
    let axis_side = if rng.gen_bool(0.5) { AxisSide::Left } else { AxisSide::Right };
    let rotation_limit = match rng.gen_range(0..3u8) {
        0 => RotationLimit::ClockwiseOnly,
        1 => RotationLimit::CounterClockwiseOnly,
        _ => RotationLimit::Both,
    };
    HiddenParams { joint_friction, part_mass, surface_friction, axis_side, rotation_limit }
}

const SCENE_SALT: u64 = 0x5ce9_e5a1;

/// Builds the scene for (category, seed). Identical inputs give identical
/// scenes, hidden parameters included.
pub fn sample_scene(category: Category, seed: u64) -> ArticulatedScene {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SCENE_SALT ^ category as u64));
    let mut hidden = sample_hidden(&mut rng);
    if category != Category::Faucet {
        // One-way rotation gates exist only on faucets.
        hidden.rotation_limit = RotationLimit::Both;
    }
    match category {
        Category::Door => build_door(seed, hidden, &mut rng),
        Category::Drawer => build_drawer(seed, hidden, &mut rng),
        Category::Faucet => build_faucet(seed, hidden, &mut rng),
        Category::CabinetClosedDoor => build_cabinet(seed, hidden, &mut rng),
    }
}

/// Rebuilds a scene from a serialized reference, restoring the joint state.
pub fn scene_from_ref(r: &SceneRef) -> ArticulatedScene {
    let mut scene = sample_scene(r.category, r.seed);
    let (lo, hi) = scene.joint.range;
    scene.joint_state = r.joint_state.clamp(lo, hi);
    scene
}

impl ArticulatedScene {
    pub fn scene_ref(&self) -> SceneRef {
        SceneRef { category: self.category, seed: self.seed, joint_state: self.joint_state }
    }

    /// Rigid placement of a part at the current joint state.
    pub fn part_iso(&self, part: &Part) -> Isometry3<f64> {
        let rest = Isometry3::from_parts(
            Translation3::from(part.rest_center.coords),
            nalgebra::UnitQuaternion::identity(),
        );
        if !part.movable {
            return rest;
        }
        let joint_iso = match self.joint.jtype {
            JointType::Revolute => {
                rotation_about_line(&self.joint.origin, &self.joint.dir, self.joint_state)
            }
            JointType::Prismatic => {
                Translation3::from(self.joint.dir.into_inner() * self.joint_state).into()
            }
        };
        joint_iso * rest
    }

    /// Resets the joint to the state sampled at construction.
    pub fn reset(&mut self) {
        self.joint_state = self.initial_state;
    }
}

// === Category constructors ===
//
// Shared conventions: the camera sits toward +x, so "front" faces have +x
// normals; +z is up; the hinge of door-like parts is the -y (camera left)
// or +y (camera right) vertical edge. Joint ranges are signed so that the
// physical opening direction maps onto the torque sign at the hinge.

fn build_door(seed: u64, hidden: HiddenParams, rng: &mut ChaCha8Rng) -> ArticulatedScene {
    let w = rng.gen_range(0.35..0.55); // half width
    let h = rng.gen_range(0.7..1.0); // half height
    let t = 0.02; // half thickness
    let jamb = 0.06;
    let initial_open = rng.gen_range(0.15..0.6);

    let door = Part::moving(Cuboid::new(t, w, h), Point3::new(0.0, 0.0, h), PartLabel::Panel);
    let jamb_l = Part::fixed(Cuboid::new(t, jamb, h), Point3::new(0.0, -(w + jamb), h));
    let jamb_r = Part::fixed(Cuboid::new(t, jamb, h), Point3::new(0.0, w + jamb, h));
    let lintel =
        Part::fixed(Cuboid::new(t, w + 2.0 * jamb, jamb), Point3::new(0.0, 0.0, 2.0 * h + jamb));

    let (hinge_y, range, initial) = match hidden.axis_side {
        // Pulling the door toward the camera drives the state negative when
        // the hinge is on the left and positive when it is on the right.
        AxisSide::Left => (-w, (-1.5, 0.0), -initial_open),
        AxisSide::Right => (w, (0.0, 1.5), initial_open),
    };
    let joint = Joint {
        jtype: JointType::Revolute,
        origin: Point3::new(0.0, hinge_y, 0.0),
        dir: Unit::new_normalize(Vector3::z()),
        range,
    };
    finish(
        Category::Door,
        seed,
        vec![door, jamb_l, jamb_r, lintel],
        joint,
        initial,
        hidden,
    )
}

fn build_drawer(seed: u64, hidden: HiddenParams, rng: &mut ChaCha8Rng) -> ArticulatedScene {
    let w = rng.gen_range(0.25..0.4); // half width of the front panel
    let h = rng.gen_range(0.1..0.18); // half height of the front panel
    let depth = rng.gen_range(0.25..0.35); // half depth of the body
    let t = 0.015; // half thickness of the panel
    let z0 = rng.gen_range(0.3..0.6); // panel center height
    let initial = rng.gen_range(0.0..0.25);

    let body = Part::fixed(
        Cuboid::new(depth, w + 0.05, h + 0.05),
        Point3::new(-depth, 0.0, z0),
    );
    let panel =
        Part::moving(Cuboid::new(t, w, h), Point3::new(t, 0.0, z0), PartLabel::Panel);
    let handle = Part::moving(
        Cuboid::new(0.02, 0.1, 0.015),
        Point3::new(2.0 * t + 0.02, 0.0, z0),
        PartLabel::Handle,
    );

    let joint = Joint {
        jtype: JointType::Prismatic,
        origin: Point3::new(0.0, 0.0, z0),
        dir: Unit::new_normalize(Vector3::x()),
        range: (0.0, 0.45),
    };
    finish(Category::Drawer, seed, vec![body, panel, handle], joint, initial, hidden)
}

fn build_faucet(seed: u64, hidden: HiddenParams, rng: &mut ChaCha8Rng) -> ArticulatedScene {
    let base_h = rng.gen_range(0.2..0.3); // half height of the pedestal
    let base_w = rng.gen_range(0.1..0.16);
    let bar_len = rng.gen_range(0.22..0.34); // half length of the handle bar
    let initial = rng.gen_range(-0.4..0.4);

    let base = Part::fixed(Cuboid::new(base_w, base_w, base_h), Point3::new(0.0, 0.0, base_h));
    let bar_z = 2.0 * base_h + 0.035;
    let bar = Part::moving(
        Cuboid::new(0.045, bar_len, 0.03),
        Point3::new(0.0, 0.0, bar_z),
        PartLabel::Panel,
    );

    let joint = Joint {
        jtype: JointType::Revolute,
        origin: Point3::new(0.0, 0.0, bar_z),
        dir: Unit::new_normalize(Vector3::z()),
        range: (-1.3, 1.3),
    };
    finish(Category::Faucet, seed, vec![base, bar], joint, initial, hidden)
}

fn build_cabinet(seed: u64, hidden: HiddenParams, rng: &mut ChaCha8Rng) -> ArticulatedScene {
    let dw = rng.gen_range(0.25..0.4); // half width of the door
    let dh = rng.gen_range(0.45..0.7); // half height of the door
    let t = 0.02; // half thickness
    let margin = 0.08;
    let depth = rng.gen_range(0.2..0.3);

    // The body is mirror-symmetric in y about the door center, so geometry
    // alone cannot reveal the hinge side.
    let body = Part::fixed(
        Cuboid::new(depth, dw + margin, dh + margin),
        Point3::new(-depth, 0.0, dh + margin),
    );
    let door = Part::moving(
        Cuboid::new(t, dw, dh),
        Point3::new(t, 0.0, dh + margin),
        PartLabel::Panel,
    );

    let (hinge_y, range) = match hidden.axis_side {
        AxisSide::Left => (-dw, (-1.4, 0.0)),
        AxisSide::Right => (dw, (0.0, 1.4)),
    };
    let joint = Joint {
        jtype: JointType::Revolute,
        origin: Point3::new(0.0, hinge_y, 0.0),
        dir: Unit::new_normalize(Vector3::z()),
        range,
    };
    // Closed flush against the body: zero is the closed endpoint.
    finish(Category::CabinetClosedDoor, seed, vec![body, door], joint, 0.0, hidden)
}

fn finish(
    category: Category,
    seed: u64,
    parts: Vec<Part>,
    joint: Joint,
    initial_state: f64,
    hidden: HiddenParams,
) -> ArticulatedScene {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in &parts {
        lo = lo.inf(&(p.rest_center.coords - p.cuboid.half));
        hi = hi.sup(&(p.rest_center.coords + p.cuboid.half));
    }
    let center = Point3::from((lo + hi) / 2.0);
    let (rlo, rhi) = joint.range;
    assert!(rlo <= rhi, "joint range ordering");
    let initial = initial_state.clamp(rlo, rhi);
    ArticulatedScene {
        category,
        seed,
        parts,
        joint,
        joint_state: initial,
        initial_state: initial,
        center,
        hidden,
    }
}
