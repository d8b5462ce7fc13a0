//! Trainers for the conditioned modules. The conditioned critic and
//! affordance heads learn from episode prefixes kept on the training
//! tape, so gradients flow through the aggregation into the interaction
//! encoder. The proposal module regresses measured information gains
//! against a frozen conditioned model.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aap::{top_k_mean, AapModel, FeatureCache, InteractionRecord};
use crate::aip::AipModel;
use crate::cloud::Observation;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{Adam, Graph, NodeId, Tensor};
use crate::prior::{propose_actions, CANDIDATE_ORIENTATIONS, TOP_K};
use crate::sim::Orientation;

use super::{Dataset, TrainConfig};

const AAP_TRAIN_SALT: u64 = 0x0aa9_7341;
const AIP_TRAIN_SALT: u64 = 0x1a1b_52c7;
const PREP_SALT: u64 = 0x93e2_0417;
const PHASE_MIX: u64 = 0x9e37_79b9_97f4_a7c5;

// Conditioning histories at test time never exceed the interaction
// budget, so training prefixes are capped to the same range.
const PREFIX_CAP: usize = 4;

/// Per-phase loss curves and the number of optimizer steps taken.
#[derive(Clone, Debug, Default)]
pub struct PhaseStats {
    pub epoch_critic_loss: Vec<f64>,
    pub epoch_affordance_loss: Vec<f64>,
    pub steps: usize,
}

/// Encodes `obs` on the tape unless an identical cloud (same allocation)
/// was already encoded; returns its slot. Linear scan keeps the slot
/// order equal to first-appearance order regardless of addresses.
fn tape_obs_slot(
    g: &mut Graph,
    distinct: &mut Vec<Arc<Observation>>,
    pp_nodes: &mut Vec<NodeId>,
    obs: &Arc<Observation>,
    encode: impl FnOnce(&mut Graph, &Observation) -> NodeId,
) -> usize {
    if let Some(i) = distinct.iter().position(|o| Arc::ptr_eq(o, obs)) {
        return i;
    }
    let node = encode(g, obs);
    distinct.push(obs.clone());
    pp_nodes.push(node);
    distinct.len() - 1
}

/// Trains a fresh conditioned model on the dataset.
pub fn train_aap(ds: &Dataset, cfg: &TrainConfig, init_seed: u64) -> Result<(AapModel, PhaseStats)> {
    let model = AapModel::new(cfg.feat_dim, init_seed);
    train_aap_from(model, ds, cfg, cfg.aap_epochs, 0)
}

/// Continues training an existing conditioned model. Each scene visit
/// takes one critic step and one affordance step, each on its own tape
/// with the episode prefix re-encoded so the latent code carries
/// gradient.
pub fn train_aap_from(
    mut model: AapModel,
    ds: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    phase: u64,
) -> Result<(AapModel, PhaseStats)> {
    if ds.record_count() == 0 {
        return Err(Error::EmptyDataset("conditioned-model training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        AAP_TRAIN_SALT ^ phase.wrapping_mul(PHASE_MIX),
    ));
    let mut adam = Adam::new(cfg.lr);
    let mut stats = PhaseStats::default();

    let usable: Vec<usize> = (0..ds.scenes.len())
        .filter(|&i| {
            let s = &ds.scenes[i];
            !s.episode.records.is_empty() || !s.eval_batch.is_empty()
        })
        .collect();

    for _epoch in 0..epochs {
        let mut order = usable.clone();
        order.shuffle(&mut rng);
        let mut critic_sum = 0.0;
        let mut aff_sum = 0.0;
        for &si in &order {
            let scene = &ds.scenes[si];
            let ep = &scene.episode.records;
            let pool: Vec<&InteractionRecord> =
                ep.iter().chain(scene.eval_batch.iter()).collect();

            let positives: Vec<usize> =
                (0..pool.len()).filter(|&i| pool[i].succeeded()).collect();
            let negatives: Vec<usize> =
                (0..pool.len()).filter(|&i| !pool[i].succeeded()).collect();
            let pick = |rng: &mut ChaCha8Rng, b: usize| -> usize {
                if positives.is_empty() || negatives.is_empty() {
                    rng.gen_range(0..pool.len())
                } else if b % 2 == 0 {
                    positives[rng.gen_range(0..positives.len())]
                } else {
                    negatives[rng.gen_range(0..negatives.len())]
                }
            };

            // Critic step: score pool records under a random episode
            // prefix whose contributions live on the tape.
            {
                let q = rng.gen_range(0..=ep.len().min(PREFIX_CAP));
                let batch: Vec<usize> = (0..cfg.batch).map(|b| pick(&mut rng, b)).collect();

                let mut g = Graph::new();
                let mut distinct: Vec<Arc<Observation>> = Vec::new();
                let mut pp_nodes: Vec<NodeId> = Vec::new();
                let contribs: Vec<(NodeId, NodeId)> = ep[..q]
                    .iter()
                    .map(|rec| {
                        let slot =
                            tape_obs_slot(&mut g, &mut distinct, &mut pp_nodes, &rec.obs, |g, o| {
                                model.tape_cloud(g, o)
                            });
                        model.tape_contribution(&mut g, pp_nodes[slot], rec)
                    })
                    .collect();
                let z = model.tape_aggregate(&mut g, &contribs);

                let preds: Vec<NodeId> = batch
                    .iter()
                    .map(|&i| {
                        let rec = pool[i];
                        let slot =
                            tape_obs_slot(&mut g, &mut distinct, &mut pp_nodes, &rec.obs, |g, o| {
                                model.tape_cloud(g, o)
                            });
                        model.tape_critic(
                            &mut g,
                            pp_nodes[slot],
                            &rec.obs.camera,
                            rec.point,
                            &rec.orientation,
                            z,
                        )
                    })
                    .collect();
                let preds = g.stack_rows(&preds);
                let labels =
                    Tensor::from_vec(batch.len(), 1, batch.iter().map(|&i| pool[i].label()).collect())
                        .expect("label shape");
                let loss = g.bce_mean(preds, &labels);
                let grads = g.backward(loss)?;
                adam.step(&mut model.params, &grads);
                critic_sum += g.value(loss).item();
                stats.steps += 1;
            }

            // Affordance step: regress sampled points toward the top-k
            // mean of conditioned critic scores under the same latent.
            {
                let q = rng.gen_range(0..=ep.len().min(PREFIX_CAP));
                let mut g = Graph::new();
                let mut distinct: Vec<Arc<Observation>> = Vec::new();
                let mut pp_nodes: Vec<NodeId> = Vec::new();
                let contribs: Vec<(NodeId, NodeId)> = ep[..q]
                    .iter()
                    .map(|rec| {
                        let slot =
                            tape_obs_slot(&mut g, &mut distinct, &mut pp_nodes, &rec.obs, |g, o| {
                                model.tape_cloud(g, o)
                            });
                        model.tape_contribution(&mut g, pp_nodes[slot], rec)
                    })
                    .collect();
                let z = model.tape_aggregate(&mut g, &contribs);
                let z_val = g.value(z).clone();

                let mut rows = Vec::with_capacity(cfg.aff_points);
                let mut targets = Vec::with_capacity(cfg.aff_points);
                for b in 0..cfg.aff_points {
                    let rec = pool[pick(&mut rng, b)];
                    let slot =
                        tape_obs_slot(&mut g, &mut distinct, &mut pp_nodes, &rec.obs, |g, o| {
                            model.tape_cloud(g, o)
                        });
                    let p = rng.gen_range(0..rec.obs.len());
                    let row = g.value(pp_nodes[slot]).row(p).to_vec();
                    let orients = propose_actions(&rec.obs, p, CANDIDATE_ORIENTATIONS, &mut rng);
                    let scores =
                        model.critic_scores_from_row(&row, &rec.obs.camera, &orients, &z_val);
                    targets.push(top_k_mean(&scores, TOP_K));
                    rows.push((pp_nodes[slot], p));
                }
                let pred = model.tape_affordance_rows(&mut g, &rows, z);
                let target_t =
                    Tensor::from_vec(targets.len(), 1, targets).expect("target shape");
                let loss = g.l1_mean(pred, &target_t);
                let grads = g.backward(loss)?;
                adam.step(&mut model.params, &grads);
                aff_sum += g.value(loss).item();
                stats.steps += 1;
            }
        }
        stats.epoch_critic_loss.push(critic_sum / order.len().max(1) as f64);
        stats.epoch_affordance_loss.push(aff_sum / order.len().max(1) as f64);
    }
    Ok((model, stats))
}

/// Frozen per-scene supervision for the proposal module: prefix latents,
/// conditioned scores for the episode candidates, measured gains, and a
/// fixed set of affordance regression sites with their conditioned
/// candidate scores.
struct AffBundle {
    point: usize,
    a_aap: f64,
    orients: Vec<Orientation>,
    s_cand: Vec<f64>,
}

struct ScenePrep {
    scene: usize,
    z: Vec<Tensor>,
    s_aap: Vec<f64>,
    gt: Vec<f64>,
    aff: Vec<Vec<AffBundle>>,
}

fn prepare_scene(
    aap: &AapModel,
    ds: &Dataset,
    si: usize,
    aff_points: usize,
    seed: u64,
) -> ScenePrep {
    let scene = &ds.scenes[si];
    let ep = &scene.episode.records;
    let k = ep.len();
    let mut cache = FeatureCache::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        PREP_SALT ^ (si as u64).wrapping_mul(PHASE_MIX),
    ));

    let z: Vec<Tensor> = (0..=k).map(|q| aap.encode_sequence(&mut cache, &ep[..q]).z).collect();
    let losses: Vec<f64> =
        z.iter().map(|zq| aap.critic_batch_loss(&mut cache, &scene.eval_batch, zq)).collect();
    let gt: Vec<f64> = (0..k).map(|i| losses[i] - losses[i + 1]).collect();

    let s_aap: Vec<f64> = (0..k)
        .map(|i| {
            let rec = &ep[i];
            let feats = aap.features(&mut cache, &rec.obs);
            let per_point = feats.per_point.clone();
            let row = per_point.row(rec.point).to_vec();
            aap.critic_scores_from_row(&row, &rec.obs.camera, &[rec.orientation], &z[i])[0]
        })
        .collect();

    let aff: Vec<Vec<AffBundle>> = (0..=k)
        .map(|q| {
            let obs = &ep[q.min(k - 1)].obs;
            let map = {
                let feats = aap.features(&mut cache, obs);
                aap.affordance_map(feats, &z[q])
            };
            (0..aff_points)
                .map(|_| {
                    let p = rng.gen_range(0..obs.len());
                    let orients = propose_actions(obs, p, CANDIDATE_ORIENTATIONS, &mut rng);
                    let feats = aap.features(&mut cache, obs);
                    let s_cand =
                        aap.critic_scores(feats, &obs.camera, p, &orients, &z[q]);
                    AffBundle { point: p, a_aap: map[p], orients, s_cand }
                })
                .collect()
        })
        .collect();

    ScenePrep { scene: si, z, s_aap, gt, aff }
}

/// Trains a fresh proposal model against a frozen conditioned model.
pub fn train_aip(
    ds: &Dataset,
    aap: &AapModel,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<(AipModel, PhaseStats)> {
    let model = AipModel::new(cfg.feat_dim, init_seed);
    train_aip_from(model, ds, aap, cfg, cfg.aip_epochs, 0)
}

/// Continues training a proposal model. Gains and conditioned scores are
/// precomputed once per scene because the conditioned model is frozen
/// for the whole phase.
pub fn train_aip_from(
    mut model: AipModel,
    ds: &Dataset,
    aap: &AapModel,
    cfg: &TrainConfig,
    epochs: usize,
    phase: u64,
) -> Result<(AipModel, PhaseStats)> {
    let usable: Vec<usize> = (0..ds.scenes.len())
        .filter(|&i| {
            let s = &ds.scenes[i];
            !s.episode.records.is_empty() && !s.eval_batch.is_empty()
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset("gain supervision needs episodes and eval records".into()));
    }

    let prep_seed = derive_seed(cfg.seed, AIP_TRAIN_SALT ^ phase.wrapping_mul(PHASE_MIX));
    let preps: Vec<ScenePrep> = usable
        .par_iter()
        .map(|&si| prepare_scene(aap, ds, si, cfg.aff_points, prep_seed))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(prep_seed, 1));
    let mut adam = Adam::new(cfg.lr);
    let mut stats = PhaseStats::default();

    for _epoch in 0..epochs {
        let mut order: Vec<usize> = (0..preps.len()).collect();
        order.shuffle(&mut rng);
        let mut critic_sum = 0.0;
        let mut aff_sum = 0.0;
        for &pi in &order {
            let prep = &preps[pi];
            let ep = &ds.scenes[prep.scene].episode.records;
            let k = ep.len();

            // Critic step: regress every episode candidate's gain.
            {
                let mut g = Graph::new();
                let mut distinct: Vec<Arc<Observation>> = Vec::new();
                let mut pp_nodes: Vec<NodeId> = Vec::new();
                let preds: Vec<NodeId> = (0..k)
                    .map(|i| {
                        let rec = &ep[i];
                        let slot =
                            tape_obs_slot(&mut g, &mut distinct, &mut pp_nodes, &rec.obs, |g, o| {
                                model.tape_cloud(g, o)
                            });
                        let zn = g.input(prep.z[i].clone());
                        model.tape_critic(
                            &mut g,
                            pp_nodes[slot],
                            &rec.obs.camera,
                            rec.point,
                            &rec.orientation,
                            zn,
                            prep.s_aap[i],
                        )
                    })
                    .collect();
                let preds = g.stack_rows(&preds);
                let target = Tensor::from_vec(k, 1, prep.gt.clone()).expect("target shape");
                let loss = g.l1_mean(preds, &target);
                let grads = g.backward(loss)?;
                adam.step(&mut model.params, &grads);
                critic_sum += g.value(loss).item();
                stats.steps += 1;
            }

            // Affordance step: regress the fixed sites toward the top-k
            // mean of the module's own current candidate gains.
            {
                let q = rng.gen_range(0..=k);
                let obs = &ep[q.min(k - 1)].obs;
                let bundles = &prep.aff[q];

                let mut g = Graph::new();
                let pp = model.tape_cloud(&mut g, obs);
                let zn = g.input(prep.z[q].clone());
                let points: Vec<usize> = bundles.iter().map(|b| b.point).collect();
                let a_aap: Vec<f64> = bundles.iter().map(|b| b.a_aap).collect();
                let targets: Vec<f64> = bundles
                    .iter()
                    .map(|b| {
                        let row = g.value(pp).row(b.point).to_vec();
                        let scores = model.critic_scores_from_row(
                            &row,
                            &obs.camera,
                            &b.orients,
                            &prep.z[q],
                            &b.s_cand,
                        );
                        top_k_mean(&scores, TOP_K)
                    })
                    .collect();
                let pred = model.tape_affordance_at(&mut g, pp, &points, zn, &a_aap);
                let target_t =
                    Tensor::from_vec(targets.len(), 1, targets).expect("target shape");
                let loss = g.l1_mean(pred, &target_t);
                let grads = g.backward(loss)?;
                adam.step(&mut model.params, &grads);
                aff_sum += g.value(loss).item();
                stats.steps += 1;
            }
        }
        stats.epoch_critic_loss.push(critic_sum / order.len() as f64);
        stats.epoch_affordance_loss.push(aff_sum / order.len() as f64);
    }
    Ok((model, stats))
}

/// Mean conditioned-critic loss over a dataset: for every scene and
/// every episode prefix, the eval batch is scored under that prefix's
/// latent. Lower means interactions explain the hidden dynamics better.
pub fn validation_loss(aap: &AapModel, ds: &Dataset) -> f64 {
    let per_scene: Vec<f64> = ds
        .scenes
        .par_iter()
        .filter(|s| !s.eval_batch.is_empty())
        .map(|scene| {
            let mut cache = FeatureCache::new();
            let ep = &scene.episode.records;
            let top = ep.len().min(PREFIX_CAP);
            let mut sum = 0.0;
            for q in 0..=top {
                let z = aap.encode_sequence(&mut cache, &ep[..q]).z;
                sum += aap.critic_batch_loss(&mut cache, &scene.eval_batch, &z);
            }
            sum / (top + 1) as f64
        })
        .collect();
    assert!(!per_scene.is_empty(), "validation needs a scene with eval records");
    per_scene.iter().sum::<f64>() / per_scene.len() as f64
}

#[cfg(test)]
mod tests {
    use super::super::collect_random_episodes;
    use super::*;
    use crate::aip::gt_aip_score;
    use crate::sim::{Category, TaskKind};

    fn tiny_dataset() -> Dataset {
        collect_random_episodes(&[Category::Door], 4, 2, 6, TaskKind::Push, 32, 11).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            feat_dim: 16,
            n_points: 32,
            n_scenes: 4,
            k_interactions: 2,
            eval_records: 6,
            batch: 8,
            aff_points: 3,
            aap_epochs: 5,
            aip_epochs: 5,
            lr: 3e-3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn conditioned_training_reduces_critic_loss() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let (_model, stats) = train_aap(&ds, &cfg, 7).unwrap();
        assert_eq!(stats.steps, cfg.aap_epochs * ds.scenes.len() * 2);
        let first = stats.epoch_critic_loss[0];
        let last = *stats.epoch_critic_loss.last().unwrap();
        assert!(
            last < first,
            "critic loss should drop over training: first {first}, last {last}"
        );
        assert!(stats.epoch_affordance_loss.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn precomputed_gains_match_reference_scorer() {
        let ds = tiny_dataset();
        let aap = AapModel::new(16, 3);
        let prep = prepare_scene(&aap, &ds, 0, 2, 99);
        let scene = &ds.scenes[0];
        let ep = &scene.episode.records;
        let mut cache = FeatureCache::new();
        for i in 1..=ep.len() {
            let reference = gt_aip_score(&aap, &mut cache, &scene.eval_batch, ep, i);
            assert_eq!(prep.gt[i - 1], reference, "gain {i} diverged from reference");
        }
    }

    #[test]
    fn proposal_training_reduces_gain_error() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let (aap, _) = train_aap(&ds, &cfg, 7).unwrap();
        let (_aip, stats) = train_aip(&ds, &aap, &cfg, 13).unwrap();
        assert_eq!(stats.steps, cfg.aip_epochs * ds.scenes.len() * 2);
        let first = stats.epoch_critic_loss[0];
        let last = *stats.epoch_critic_loss.last().unwrap();
        assert!(
            last < first,
            "gain regression should improve: first {first}, last {last}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset();
        let cfg = TrainConfig { aap_epochs: 2, ..tiny_config() };
        let (a, _) = train_aap(&ds, &cfg, 7).unwrap();
        let (b, _) = train_aap(&ds, &cfg, 7).unwrap();
        assert_eq!(a.params.get("aap.zproj.w").data(), b.params.get("aap.zproj.w").data());
        let va = validation_loss(&a, &ds);
        let vb = validation_loss(&b, &ds);
        assert_eq!(va, vb);
        assert!(va.is_finite() && va > 0.0);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = Dataset { task: TaskKind::Push, seed: 0, n_points: 32, scenes: Vec::new() };
        let cfg = tiny_config();
        assert!(train_aap(&ds, &cfg, 7).is_err());
        let aap = AapModel::new(16, 3);
        assert!(train_aip(&ds, &aap, &cfg, 13).is_err());
    }
}
