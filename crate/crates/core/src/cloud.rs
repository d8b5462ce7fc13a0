//! Camera-side geometry: visible-surface point cloud rendering, nearest
//! point lookup, Chamfer distance, and farthest-point sampling variants.

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::sim::geom::Face;
use crate::sim::ArticulatedScene;

/// Camera distance from the scene center, world units.
pub const CAMERA_DISTANCE: f64 = 5.0;
/// Camera elevation above the horizontal look axis, radians.
pub const CAMERA_ELEVATION: f64 = 0.28;
/// Default cloud size.
pub const DEFAULT_CLOUD_SIZE: usize = 512;

const RENDER_SALT: u64 = 0x9e4d_e11a;
/// Oversampling factor per candidate round.
const OVERSAMPLE: usize = 4;
const MAX_ROUNDS: usize = 12;

/// Pinhole pose looking at the scene center. Only the pose matters for the
/// sampled-surface renderer; there is no pixel grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub eye: Point3<f64>,
    pub right: Vector3<f64>,
    pub up: Vector3<f64>,
    pub forward: Vector3<f64>,
}

impl Camera {
    /// Camera at `CAMERA_DISTANCE` from `target` along +x, elevated, with a
    /// look-at basis (right, up, forward).
    pub fn looking_at(target: Point3<f64>) -> Self {
        let offset = Vector3::new(
            CAMERA_ELEVATION.cos() * CAMERA_DISTANCE,
            0.0,
            CAMERA_ELEVATION.sin() * CAMERA_DISTANCE,
        );
        let eye = target + offset;
        let forward = (target - eye).normalize();
        let right = forward.cross(&Vector3::z()).normalize();
        let up = right.cross(&forward);
        Self { eye, right, up, forward }
    }

    pub fn world_to_cam(&self, p: &Point3<f64>) -> [f64; 3] {
        let d = p - self.eye;
        [self.right.dot(&d), self.up.dot(&d), self.forward.dot(&d)]
    }

    /// Rotates a world-frame direction into the camera basis (no
    /// translation).
    pub fn vector_to_cam(&self, v: &Vector3<f64>) -> [f64; 3] {
        [self.right.dot(v), self.up.dot(v), self.forward.dot(v)]
    }

    pub fn cam_to_world(&self, c: &[f64; 3]) -> Point3<f64> {
        self.eye + self.right * c[0] + self.up * c[1] + self.forward * c[2]
    }
}

/// A rendered cloud: exactly the configured number of points on visible
/// surfaces. Network inputs are the camera-frame coordinates; world-frame
/// positions and normals ride along for action execution and proposal
/// sampling. `part_ids` index into the source scene's part list and are
/// empty for observations restored from disk.
#[derive(Clone, Debug)]
pub struct Observation {
    pub points_cam: Vec<[f64; 3]>,
    pub points_world: Vec<[f64; 3]>,
    pub normals_world: Vec<[f64; 3]>,
    pub part_ids: Vec<usize>,
    pub scene_seed: u64,
    /// Interaction step at which this cloud was rendered; metadata only.
    pub frame_id: u64,
    pub camera: Camera,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.points_cam.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points_cam.is_empty()
    }

    /// Camera-frame coordinates as an N x 3 tensor, the network input.
    pub fn cam_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.points_cam.iter().flatten().copied().collect();
        Tensor::from_vec(self.points_cam.len(), 3, data).expect("cloud tensor shape")
    }

    pub fn world_point(&self, idx: usize) -> Point3<f64> {
        Point3::from(self.points_world[idx])
    }

    pub fn world_normal(&self, idx: usize) -> Vector3<f64> {
        Vector3::from(self.normals_world[idx])
    }

    /// Index of the cloud point nearest to a world-frame query, ties to the
    /// lowest index.
    pub fn nearest_point(&self, world: &Point3<f64>) -> usize {
        let mut best = 0;
        let mut best_d2 = f64::INFINITY;
        for (i, p) in self.points_world.iter().enumerate() {
            let d2 = (Point3::from(*p) - world).norm_squared();
            if d2 < best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        best
    }
}

/// Renders the scene at its current joint state into an exactly-N cloud.
///
/// Candidate points are sampled area-uniformly over part faces, kept when
/// front-facing and unoccluded (ray cast from the camera), then resampled
/// to N with the render stream. The stream is derived from the scene seed
/// and the joint state alone, so re-rendering an unchanged scene is
/// bit-identical regardless of the frame counter.
pub fn render(scene: &ArticulatedScene, n_points: usize, frame_id: u64) -> Result<Observation> {
    assert!(n_points > 0, "cloud size must be positive");
    let camera = Camera::looking_at(scene.center);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        scene.seed,
        RENDER_SALT ^ scene.joint_state.to_bits(),
    ));

    // Fixed enumeration of sampleable faces with cumulative areas.
    let isos: Vec<_> = scene.parts.iter().map(|p| scene.part_iso(p)).collect();
    let mut faces = Vec::new();
    let mut total_area = 0.0;
    for (pi, part) in scene.parts.iter().enumerate() {
        for face in Face::ALL {
            total_area += part.cuboid.face_area(face);
            faces.push((pi, face, total_area));
        }
    }

    let mut pts_world: Vec<[f64; 3]> = Vec::new();
    let mut normals: Vec<[f64; 3]> = Vec::new();
    let mut ids: Vec<usize> = Vec::new();

    for _ in 0..MAX_ROUNDS {
        for _ in 0..OVERSAMPLE * n_points {
            let at = rng.gen_range(0.0..total_area);
            let slot = faces.partition_point(|(_, _, cum)| *cum <= at);
            let (pi, face, _) = faces[slot.min(faces.len() - 1)];
            let u = rng.gen_range(-1.0..1.0);
            let v = rng.gen_range(-1.0..1.0);
            let local = scene.parts[pi].cuboid.face_point(face, u, v);
            let world = isos[pi] * local;
            let normal = isos[pi].rotation * face.normal();

            if normal.dot(&(camera.eye - world)) <= 1e-12 {
                continue;
            }
            if occluded(scene, &isos, &camera.eye, &world) {
                continue;
            }
            pts_world.push(world.into());
            normals.push(normal.into());
            ids.push(pi);
        }
        if pts_world.len() >= n_points {
            break;
        }
    }

    if pts_world.is_empty() {
        return Err(Error::EmptyView);
    }

    // Resample to exactly N: a partial Fisher-Yates when over, seeded
    // duplication when under.
    let chosen: Vec<usize> = if pts_world.len() > n_points {
        let mut idx: Vec<usize> = (0..pts_world.len()).collect();
        for i in 0..n_points {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(n_points);
        idx
    } else {
        let mut idx: Vec<usize> = (0..pts_world.len()).collect();
        while idx.len() < n_points {
            idx.push(rng.gen_range(0..pts_world.len()));
        }
        idx
    };

    let mut obs = Observation {
        points_cam: Vec::with_capacity(n_points),
        points_world: Vec::with_capacity(n_points),
        normals_world: Vec::with_capacity(n_points),
        part_ids: Vec::with_capacity(n_points),
        scene_seed: scene.seed,
        frame_id,
        camera,
    };
    for i in chosen {
        let w = Point3::from(pts_world[i]);
        obs.points_cam.push(camera.world_to_cam(&w));
        obs.points_world.push(pts_world[i]);
        obs.normals_world.push(normals[i]);
        obs.part_ids.push(ids[i]);
    }
    Ok(obs)
}

fn occluded(
    scene: &ArticulatedScene,
    isos: &[nalgebra::Isometry3<f64>],
    eye: &Point3<f64>,
    target: &Point3<f64>,
) -> bool {
    let to_target = target - eye;
    let dist = to_target.norm();
    let dir = to_target / dist;
    for (part, iso) in scene.parts.iter().zip(isos) {
        let o = iso.inverse_transform_point(eye);
        let d = iso.inverse_transform_vector(&dir);
        if let Some(t) = part.cuboid.ray_entry(&o, &d) {
            if t < dist - 1e-6 {
                return true;
            }
        }
    }
    false
}

/// Camera-frame encoding of a gripper orientation: forward then up, both
/// rotated into the camera basis. This is the network-facing view of an
/// orientation; execution keeps the world-frame vectors.
pub fn orientation_features(camera: &Camera, r: &crate::sim::Orientation) -> [f64; 6] {
    let f = camera.vector_to_cam(&r.forward_vec());
    let u = camera.vector_to_cam(&r.up_vec());
    [f[0], f[1], f[2], u[0], u[1], u[2]]
}

/// Symmetric Chamfer distance between camera-frame clouds: the mean nearest
/// neighbor distance in each direction, summed.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "chamfer of empty cloud");
    let one_way = |from: &[[f64; 3]], to: &[[f64; 3]]| -> f64 {
        let total: f64 = from
            .iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / from.len() as f64
    };
    one_way(a, b) + one_way(b, a)
}

/// Farthest-point sampling flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FpsMode {
    /// Geometry only.
    Pure,
    /// Geometry restricted to points scoring above a falling threshold:
    /// starts at 0.5 and drops by 0.05 until at least 50 points (or all of
    /// them, or at least k) qualify.
    Threshold,
    /// Greedy key is distance times score.
    WeightedDistance,
}

/// Threshold mode starting cutoff.
pub const FPS_THRESHOLD_START: f64 = 0.5;
/// Threshold mode decrement.
pub const FPS_THRESHOLD_STEP: f64 = 0.05;
/// Threshold mode minimum qualifying population.
pub const FPS_MIN_QUALIFIED: usize = 50;

/// Greedy farthest-point sampling over camera-frame points, seeded at the
/// max-norm candidate, all ties to the lowest index. Returns k distinct
/// global indices in selection order.
pub fn farthest_points(
    points: &[[f64; 3]],
    scores: &[f64],
    k: usize,
    mode: FpsMode,
) -> Result<Vec<usize>> {
    let n = points.len();
    if k > n {
        return Err(Error::InsufficientPoints { requested: k, available: n });
    }
    if mode != FpsMode::Pure {
        assert_eq!(scores.len(), n, "one score per point");
    }
    if k == 0 {
        return Ok(Vec::new());
    }

    let candidates: Vec<usize> = match mode {
        FpsMode::Pure | FpsMode::WeightedDistance => (0..n).collect(),
        FpsMode::Threshold => {
            let target = FPS_MIN_QUALIFIED.min(n).max(k);
            let mut theta = FPS_THRESHOLD_START;
            loop {
                let qualified: Vec<usize> =
                    (0..n).filter(|&i| scores[i] > theta).collect();
                if qualified.len() >= target || qualified.len() == n {
                    break qualified;
                }
                theta -= FPS_THRESHOLD_STEP;
            }
        }
    };

    let norm = |i: usize| -> f64 {
        let p = points[i];
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
    };
    let dist = |i: usize, j: usize| -> f64 {
        let (p, q) = (points[i], points[j]);
        let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    };

    // Seed at the farthest-from-origin candidate.
    let mut seed = candidates[0];
    for &i in &candidates[1..] {
        if norm(i) > norm(seed) {
            seed = i;
        }
    }

    let mut selected = vec![seed];
    let mut min_dist: Vec<f64> = candidates.iter().map(|&i| dist(i, seed)).collect();
    while selected.len() < k {
        let mut best_slot = usize::MAX;
        let mut best_key = f64::NEG_INFINITY;
        for (slot, &i) in candidates.iter().enumerate() {
            if min_dist[slot] == 0.0 && selected.contains(&i) {
                continue;
            }
            let key = match mode {
                FpsMode::WeightedDistance => min_dist[slot] * scores[i],
                _ => min_dist[slot],
            };
            if key > best_key {
                best_key = key;
                best_slot = slot;
            }
        }
        if best_slot == usize::MAX {
            // Degenerate cloud: every remaining candidate coincides with a
            // selected point. Fill with the lowest unselected candidates.
            for &i in &candidates {
                if !selected.contains(&i) {
                    selected.push(i);
                    if selected.len() == k {
                        break;
                    }
                }
            }
            break;
        }
        let picked = candidates[best_slot];
        selected.push(picked);
        for (slot, &i) in candidates.iter().enumerate() {
            min_dist[slot] = min_dist[slot].min(dist(i, picked));
        }
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{sample_scene, Category};
    use proptest::prelude::*;

    #[test]
    fn render_is_deterministic_for_fixed_scene_and_state() {
        let scene = sample_scene(Category::Door, 5);
        let a = render(&scene, 128, 0).unwrap();
        let b = render(&scene, 128, 3).unwrap();
        assert_eq!(a.points_cam, b.points_cam, "frame id must not affect sampling");
        assert_eq!(a.part_ids, b.part_ids);
    }

    #[test]
    fn render_returns_exactly_n_points_on_surfaces() {
        for (cat, seed) in [
            (Category::Door, 1u64),
            (Category::Drawer, 2),
            (Category::Faucet, 3),
            (Category::CabinetClosedDoor, 4),
        ] {
            let scene = sample_scene(cat, seed);
            let obs = render(&scene, 256, 0).unwrap();
            assert_eq!(obs.len(), 256);
            for i in 0..obs.len() {
                let w = obs.world_point(i);
                let part = &scene.parts[obs.part_ids[i]];
                let local = scene.part_iso(part).inverse_transform_point(&w);
                assert!(
                    part.cuboid.surface_distance(&local) < 1e-9,
                    "point sits on its source surface"
                );
            }
        }
    }

    #[test]
    fn render_excludes_back_and_occluded_faces() {
        let scene = sample_scene(Category::CabinetClosedDoor, 9);
        let obs = render(&scene, 512, 0).unwrap();
        let eye = obs.camera.eye;
        for i in 0..obs.len() {
            let n = obs.world_normal(i);
            let p = obs.world_point(i);
            assert!(n.dot(&(eye - p)) > 0.0, "front-facing only");
        }
        // The cabinet body's back face (normal -x) can never appear.
        for i in 0..obs.len() {
            let n = obs.world_normal(i);
            assert!(n.x > -0.99, "hidden rear face leaked into the cloud");
        }
    }

    #[test]
    fn moving_the_joint_changes_the_cloud() {
        let mut scene = sample_scene(Category::Drawer, 21);
        let before = render(&scene, 128, 0).unwrap();
        scene.joint_state = scene.joint.range.1; // fully open
        let after = render(&scene, 128, 1).unwrap();
        let d = chamfer(&before.points_cam, &after.points_cam);
        assert!(d > 1e-3, "chamfer {d} too small for a fully opened drawer");
    }

    #[test]
    fn rerender_of_unchanged_scene_has_zero_chamfer() {
        let scene = sample_scene(Category::Faucet, 33);
        let a = render(&scene, 128, 0).unwrap();
        let b = render(&scene, 128, 7).unwrap();
        assert!(chamfer(&a.points_cam, &b.points_cam) < 1e-12);
    }

    #[test]
    fn translating_scene_and_camera_together_is_invisible() {
        let scene = sample_scene(Category::Door, 8);
        let mut shifted = scene.clone();
        let offset = nalgebra::Vector3::new(3.0, -2.0, 1.5);
        for p in &mut shifted.parts {
            p.rest_center += offset;
        }
        shifted.joint.origin += offset;
        shifted.center += offset;

        let a = render(&scene, 128, 0).unwrap();
        let b = render(&shifted, 128, 0).unwrap();
        for (pa, pb) in a.points_cam.iter().zip(&b.points_cam) {
            for (ca, cb) in pa.iter().zip(pb) {
                assert!((ca - cb).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn nearest_point_matches_brute_force_and_breaks_ties_low() {
        let scene = sample_scene(Category::Door, 2);
        let obs = render(&scene, 64, 0).unwrap();
        for i in [0usize, 13, 63] {
            let q = obs.world_point(i);
            assert_eq!(obs.nearest_point(&q), i);
        }
        // Duplicate points: query equidistant picks the lower index.
        let mut obs2 = obs.clone();
        obs2.points_world[10] = obs2.points_world[40];
        let q = obs2.world_point(40);
        assert_eq!(obs2.nearest_point(&q), 10);
    }

    #[test]
    fn chamfer_is_zero_only_for_identical_clouds() {
        let a = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert_eq!(chamfer(&a, &b), 0.0);
        let c = vec![[0.0, 0.0, 0.1], [1.0, 0.0, 0.0]];
        assert!(chamfer(&a, &c) > 0.0);
    }

    #[test]
    fn fps_on_collinear_points_returns_endpoints() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let got = farthest_points(&pts, &[], 2, FpsMode::Pure).unwrap();
        let mut sorted = got.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 2]);
    }

    #[test]
    fn fps_rejects_oversized_requests() {
        let pts = vec![[0.0, 0.0, 0.0]];
        assert!(farthest_points(&pts, &[], 2, FpsMode::Pure).is_err());
    }

    #[test]
    fn threshold_mode_with_uniform_high_scores_equals_pure() {
        let scene = sample_scene(Category::Faucet, 12);
        let obs = render(&scene, 100, 0).unwrap();
        let scores = vec![0.9; 100];
        let a = farthest_points(&obs.points_cam, &scores, 7, FpsMode::Threshold).unwrap();
        let b = farthest_points(&obs.points_cam, &[], 7, FpsMode::Pure).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn threshold_mode_lowers_cutoff_until_population_suffices() {
        // Ten points score high, the rest zero: the cutoff must fall until
        // at least min(50, n) qualify, pulling in zero-scored points.
        let scene = sample_scene(Category::Door, 14);
        let obs = render(&scene, 80, 0).unwrap();
        let mut scores = vec![0.0; 80];
        for s in scores.iter_mut().take(10) {
            *s = 0.9;
        }
        let got = farthest_points(&obs.points_cam, &scores, 20, FpsMode::Threshold).unwrap();
        assert_eq!(got.len(), 20);
        assert!(got.iter().any(|&i| scores[i] == 0.0), "low scorers qualified");
    }

    #[test]
    fn weighted_mode_prefers_high_scores_at_equal_distance() {
        // Two symmetric far points; the higher-scored one wins the pick
        // after the seed.
        let pts = vec![
            [0.0, 0.0, 2.0], // seed: max norm
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
        ];
        let scores = vec![0.5, 0.2, 0.9];
        let got = farthest_points(&pts, &scores, 2, FpsMode::WeightedDistance).unwrap();
        assert_eq!(got, vec![0, 2]);
    }

    #[test]
    fn fps_greedy_step_matches_brute_force_recomputation() {
        let scene = sample_scene(Category::Drawer, 19);
        let obs = render(&scene, 48, 0).unwrap();
        let got = farthest_points(&obs.points_cam, &[], 8, FpsMode::Pure).unwrap();
        let d = |i: usize, j: usize| {
            let (p, q) = (obs.points_cam[i], obs.points_cam[j]);
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        };
        for step in 1..got.len() {
            let chosen = got[step];
            let chosen_key =
                got[..step].iter().map(|&s| d(chosen, s)).fold(f64::INFINITY, f64::min);
            for cand in 0..obs.len() {
                if got[..step].contains(&cand) {
                    continue;
                }
                let key = got[..step].iter().map(|&s| d(cand, s)).fold(f64::INFINITY, f64::min);
                assert!(
                    chosen_key >= key - 1e-12,
                    "step {step} picked {chosen} (key {chosen_key}) but {cand} has key {key}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn fps_outputs_are_distinct_in_range(k in 1usize..20, seed in 0u64..200) {
            let scene = sample_scene(Category::Door, seed);
            let obs = render(&scene, 32, 0).unwrap();
            let got = farthest_points(&obs.points_cam, &[], k.min(32), FpsMode::Pure).unwrap();
            prop_assert_eq!(got.len(), k.min(32));
            let mut sorted = got.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), got.len(), "indices must be distinct");
            prop_assert!(got.iter().all(|&i| i < 32));
        }

        #[test]
        fn chamfer_is_symmetric_and_nonnegative(seed in 0u64..50) {
            let s1 = sample_scene(Category::Faucet, seed);
            let s2 = sample_scene(Category::Faucet, seed + 1);
            let a = render(&s1, 24, 0).unwrap();
            let b = render(&s2, 24, 0).unwrap();
            let ab = chamfer(&a.points_cam, &b.points_cam);
            let ba = chamfer(&b.points_cam, &a.points_cam);
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }
}
