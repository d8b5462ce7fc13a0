//! Dataset persistence: one JSON-lines index next to a directory of
//! content-addressed binary cloud files. A cloud shared by several
//! records is stored once and restored as one shared allocation, so
//! identity-keyed feature caches keep working after a round trip.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aap::InteractionRecord;
use crate::cloud::{Camera, Observation};
use crate::error::{Error, Result};
use crate::sim::{Orientation, SceneRef, TaskKind};

use super::{Dataset, Episode, SceneData};

/// Binary cloud layout: this magic, point count, scene seed, frame id
/// (all u64 little endian), the camera basis as 12 doubles (eye, right,
/// up, forward), then 9 doubles per point (camera xyz, world xyz, normal
/// xyz). Part ids are render metadata and are not persisted.
const CLOUD_MAGIC: &[u8; 8] = b"AFCLOUD1";

const INDEX_FILE: &str = "records.jsonl";
const CLOUD_DIR: &str = "clouds";

fn push_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a cloud to the documented binary layout.
pub fn encode_observation(obs: &Observation) -> Vec<u8> {
    let n = obs.len();
    let mut out = Vec::with_capacity(8 + 24 + 96 + n * 72);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&obs.scene_seed.to_le_bytes());
    out.extend_from_slice(&obs.frame_id.to_le_bytes());
    let c = &obs.camera;
    push_f64s(&mut out, &[c.eye.x, c.eye.y, c.eye.z]);
    push_f64s(&mut out, &[c.right.x, c.right.y, c.right.z]);
    push_f64s(&mut out, &[c.up.x, c.up.y, c.up.z]);
    push_f64s(&mut out, &[c.forward.x, c.forward.y, c.forward.z]);
    for i in 0..n {
        push_f64s(&mut out, &obs.points_cam[i]);
        push_f64s(&mut out, &obs.points_world[i]);
        push_f64s(&mut out, &obs.normals_world[i]);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data("truncated cloud payload".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn triple(&mut self) -> Result<[f64; 3]> {
        Ok([self.f64()?, self.f64()?, self.f64()?])
    }
}

/// Restores a cloud from its binary form. Bit-exact inverse of
/// [`encode_observation`] except `part_ids`, which comes back empty.
pub fn decode_observation(bytes: &[u8]) -> Result<Observation> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CLOUD_MAGIC {
        return Err(Error::Data("not a cloud payload: bad magic".into()));
    }
    let n = r.u64()? as usize;
    let scene_seed = r.u64()?;
    let frame_id = r.u64()?;
    let eye = r.triple()?;
    let right = r.triple()?;
    let up = r.triple()?;
    let forward = r.triple()?;
    let camera = Camera {
        eye: Point3::new(eye[0], eye[1], eye[2]),
        right: Vector3::new(right[0], right[1], right[2]),
        up: Vector3::new(up[0], up[1], up[2]),
        forward: Vector3::new(forward[0], forward[1], forward[2]),
    };
    let mut points_cam = Vec::with_capacity(n);
    let mut points_world = Vec::with_capacity(n);
    let mut normals_world = Vec::with_capacity(n);
    for _ in 0..n {
        points_cam.push(r.triple()?);
        points_world.push(r.triple()?);
        normals_world.push(r.triple()?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Data("trailing bytes after cloud payload".into()));
    }
    Ok(Observation {
        points_cam,
        points_world,
        normals_world,
        part_ids: Vec::new(),
        scene_seed,
        frame_id,
        camera,
    })
}

fn payload_hash(payload: &[u8]) -> String {
    let digest = Sha256::digest(payload);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum RecordKind {
    Episode,
    Eval,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Line {
    Header { task: TaskKind, seed: u64, n_points: usize, n_scenes: usize },
    Scene { scene: SceneRef, task: TaskKind },
    Record { kind: RecordKind, point: usize, orientation: Orientation, motion: f64, cloud: String },
}

/// Writes the dataset under `dir`: `records.jsonl` plus `clouds/`. A
/// second save of the same dataset produces byte-identical files, and a
/// cloud file already present is not rewritten.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let cloud_dir = dir.join(CLOUD_DIR);
    fs::create_dir_all(&cloud_dir)?;

    // Hash each distinct allocation once; identical contents collapse to
    // the same file regardless of sharing structure.
    let mut by_ptr: Vec<(*const Observation, String)> = Vec::new();
    let mut hash_of = |obs: &Arc<Observation>| -> Result<String> {
        let key = Arc::as_ptr(obs);
        if let Some((_, h)) = by_ptr.iter().find(|(p, _)| *p == key) {
            return Ok(h.clone());
        }
        let payload = encode_observation(obs);
        let hash = payload_hash(&payload);
        let path = cloud_dir.join(&hash);
        if !path.exists() {
            fs::write(&path, &payload)?;
        }
        by_ptr.push((key, hash.clone()));
        Ok(hash)
    };

    let mut lines = Vec::new();
    lines.push(serde_json::to_string(&Line::Header {
        task: ds.task,
        seed: ds.seed,
        n_points: ds.n_points,
        n_scenes: ds.scenes.len(),
    })?);
    for scene in &ds.scenes {
        lines.push(serde_json::to_string(&Line::Scene {
            scene: scene.episode.scene.clone(),
            task: scene.episode.task,
        })?);
        for rec in &scene.episode.records {
            lines.push(serde_json::to_string(&Line::Record {
                kind: RecordKind::Episode,
                point: rec.point,
                orientation: rec.orientation,
                motion: rec.motion,
                cloud: hash_of(&rec.obs)?,
            })?);
        }
        for rec in &scene.eval_batch {
            lines.push(serde_json::to_string(&Line::Record {
                kind: RecordKind::Eval,
                point: rec.point,
                orientation: rec.orientation,
                motion: rec.motion,
                cloud: hash_of(&rec.obs)?,
            })?);
        }
    }

    let mut file = fs::File::create(dir.join(INDEX_FILE))?;
    for line in &lines {
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a dataset written by [`save_dataset`]. Every cloud file is
/// verified against its content hash, and records referencing the same
/// hash share one allocation again.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index = fs::read_to_string(dir.join(INDEX_FILE))?;
    let cloud_dir = dir.join(CLOUD_DIR);
    let mut clouds: HashMap<String, Arc<Observation>> = HashMap::new();
    let mut fetch = |hash: &str| -> Result<Arc<Observation>> {
        if let Some(obs) = clouds.get(hash) {
            return Ok(obs.clone());
        }
        let payload = fs::read(cloud_dir.join(hash))?;
        if payload_hash(&payload) != hash {
            return Err(Error::Data(format!("cloud file {hash} fails its content hash")));
        }
        let obs = Arc::new(decode_observation(&payload)?);
        clouds.insert(hash.to_string(), obs.clone());
        Ok(obs)
    };

    let mut header: Option<(TaskKind, u64, usize, usize)> = None;
    let mut scenes: Vec<SceneData> = Vec::new();
    for (ln, raw) in index.lines().enumerate() {
        let line: Line = serde_json::from_str(raw)
            .map_err(|e| Error::Data(format!("bad index line {}: {e}", ln + 1)))?;
        match line {
            Line::Header { task, seed, n_points, n_scenes } => {
                if header.is_some() {
                    return Err(Error::Data("duplicate dataset header".into()));
                }
                header = Some((task, seed, n_points, n_scenes));
            }
            Line::Scene { scene, task } => {
                if header.is_none() {
                    return Err(Error::Data("scene before dataset header".into()));
                }
                scenes.push(SceneData {
                    episode: Episode { scene, task, records: Vec::new() },
                    eval_batch: Vec::new(),
                });
            }
            Line::Record { kind, point, orientation, motion, cloud } => {
                let scene = scenes
                    .last_mut()
                    .ok_or_else(|| Error::Data("record before any scene".into()))?;
                let obs = fetch(&cloud)?;
                if point >= obs.len() {
                    return Err(Error::Data(format!(
                        "record point {point} outside cloud of {} points",
                        obs.len()
                    )));
                }
                let rec = InteractionRecord { obs, point, orientation, motion };
                match kind {
                    RecordKind::Episode => scene.episode.records.push(rec),
                    RecordKind::Eval => scene.eval_batch.push(rec),
                }
            }
        }
    }
    let (task, seed, n_points, n_scenes) =
        header.ok_or_else(|| Error::Data("dataset index has no header".into()))?;
    if scenes.len() != n_scenes {
        return Err(Error::Data(format!(
            "header promises {n_scenes} scenes, index holds {}",
            scenes.len()
        )));
    }
    Ok(Dataset { task, seed, n_points, scenes })
}

#[cfg(test)]
mod tests {
    use super::super::collect_random_episodes;
    use super::*;
    use crate::aap::{AapModel, FeatureCache};
    use crate::cloud::render;
    use crate::sim::{sample_scene, Category};

    fn tiny_dataset() -> Dataset {
        collect_random_episodes(&[Category::Door, Category::Drawer], 4, 2, 5, TaskKind::Push, 24, 5)
            .unwrap()
    }

    #[test]
    fn cloud_round_trip_is_bit_exact() {
        let scene = sample_scene(Category::Faucet, 402);
        let obs = render(&scene, 40, 3).unwrap();
        let bytes = encode_observation(&obs);
        let back = decode_observation(&bytes).unwrap();
        assert_eq!(back.points_cam, obs.points_cam);
        assert_eq!(back.points_world, obs.points_world);
        assert_eq!(back.normals_world, obs.normals_world);
        assert_eq!(back.scene_seed, obs.scene_seed);
        assert_eq!(back.frame_id, obs.frame_id);
        assert_eq!(back.camera.eye, obs.camera.eye);
        assert_eq!(back.camera.forward, obs.camera.forward);
        assert!(back.part_ids.is_empty());
    }

    #[test]
    fn corrupted_payloads_are_rejected() {
        let scene = sample_scene(Category::Door, 7);
        let obs = render(&scene, 16, 0).unwrap();
        let bytes = encode_observation(&obs);
        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xff;
        assert!(decode_observation(&bad_magic).is_err());
        assert!(decode_observation(&bytes[..bytes.len() - 4]).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode_observation(&trailing).is_err());
    }

    #[test]
    fn dataset_round_trip_preserves_records_and_sharing() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();

        assert_eq!(back.task, ds.task);
        assert_eq!(back.seed, ds.seed);
        assert_eq!(back.n_points, ds.n_points);
        assert_eq!(back.scenes.len(), ds.scenes.len());
        for (a, b) in back.scenes.iter().zip(&ds.scenes) {
            assert_eq!(a.episode.scene, b.episode.scene);
            assert_eq!(a.episode.records.len(), b.episode.records.len());
            assert_eq!(a.eval_batch.len(), b.eval_batch.len());
            for (ra, rb) in a
                .episode
                .records
                .iter()
                .chain(&a.eval_batch)
                .zip(b.episode.records.iter().chain(&b.eval_batch))
            {
                assert_eq!(ra.point, rb.point);
                assert_eq!(ra.orientation, rb.orientation);
                assert_eq!(ra.motion, rb.motion);
                assert_eq!(ra.obs.points_cam, rb.obs.points_cam);
            }
            // Eval interactions all observe the initial cloud; that
            // sharing must come back as one allocation.
            for rec in &a.eval_batch[1..] {
                assert!(Arc::ptr_eq(&rec.obs, &a.eval_batch[0].obs));
            }
        }
    }

    #[test]
    fn saved_bytes_are_reproducible() {
        let ds = tiny_dataset();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_dataset(&ds, d1.path()).unwrap();
        save_dataset(&ds, d2.path()).unwrap();
        let i1 = fs::read(d1.path().join(INDEX_FILE)).unwrap();
        let i2 = fs::read(d2.path().join(INDEX_FILE)).unwrap();
        assert_eq!(i1, i2);
        let mut names1: Vec<_> = fs::read_dir(d1.path().join(CLOUD_DIR))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        let mut names2: Vec<_> = fs::read_dir(d2.path().join(CLOUD_DIR))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names1.sort();
        names2.sort();
        assert_eq!(names1, names2);
        // Saving on top of an existing copy is a no-op, not an error.
        save_dataset(&ds, d1.path()).unwrap();
        assert_eq!(fs::read(d1.path().join(INDEX_FILE)).unwrap(), i1);
    }

    #[test]
    fn loaded_dataset_encodes_to_the_same_latent() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();

        let model = AapModel::new(8, 21);
        let mut ca = FeatureCache::new();
        let mut cb = FeatureCache::new();
        let za = model.encode_sequence(&mut ca, &ds.scenes[0].episode.records).z;
        let zb = model.encode_sequence(&mut cb, &back.scenes[0].episode.records).z;
        assert_eq!(za.data(), zb.data());
    }
}
