//! Static per-point affordance: a critic over (cloud, point, orientation),
//! a per-point actionability head, and the hemisphere orientation sampler
//! every candidate set in the system is drawn from. Trained on records of
//! random interactions; knows nothing about interaction history.

use std::f64::consts::TAU;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aap::{top_k_mean, FeatureCache, InteractionRecord};
use crate::cloud::{orientation_features, Camera, Observation};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{Act, Adam, Graph, Mlp, NodeId, ParamStore, PointEncoder, PointFeatures, Tensor};
use crate::sim::{tangent_basis, Orientation};

/// Default width of per-point features.
pub const FEAT_DIM: usize = 128;
/// Candidate orientations sampled per point when building actionability
/// targets or scoring proposals.
pub const CANDIDATE_ORIENTATIONS: usize = 100;
/// Actionability regresses the mean of this many best critic scores.
pub const TOP_K: usize = 5;

const PRIOR_SALT: u64 = 0x7a11_03bd;
const TRAIN_SALT: u64 = 0x51de_7769;

/// Samples k gripper orientations at a cloud point: the forward axis is
/// uniform over the solid angle of the hemisphere opposing the outward
/// surface normal (depth against the surface is cos-uniform), and the up
/// axis gets a uniform roll around it.
pub fn propose_actions(
    obs: &Observation,
    point: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Orientation> {
    assert!(k >= 1, "at least one proposal");
    let normal = obs.world_normal(point);
    let (t1, t2) = tangent_basis(&normal);
    (0..k)
        .map(|_| {
            let depth: f64 = rng.gen(); // cos of polar angle from -normal
            let azimuth = rng.gen_range(0.0..TAU);
            let sin_polar = (1.0 - depth * depth).sqrt();
            let forward = -normal * depth
                + t1 * (sin_polar * azimuth.cos())
                + t2 * (sin_polar * azimuth.sin());
            let (b1, b2) = tangent_basis(&forward);
            let roll = rng.gen_range(0.0..TAU);
            let up = b1 * roll.cos() + b2 * roll.sin();
            Orientation::new(forward, up)
        })
        .collect()
}

/// Static affordance model. Parameters live under the "prior." prefix.
#[derive(Clone, Debug)]
pub struct PriorModel {
    pub params: ParamStore,
    pub feat_dim: usize,
    encoder: PointEncoder,
    critic: Mlp,
    affordance: Mlp,
}

fn architecture(feat_dim: usize) -> (PointEncoder, Mlp, Mlp) {
    (
        PointEncoder::new("prior.enc", feat_dim),
        Mlp::new("prior.critic", &[feat_dim + 6, 128, 128, 1], Act::Logistic),
        Mlp::new("prior.aff", &[feat_dim, 128, 128, 1], Act::Logistic),
    )
}

impl PriorModel {
    pub fn new(feat_dim: usize, seed: u64) -> Self {
        let (encoder, critic, affordance) = architecture(feat_dim);
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PRIOR_SALT));
        encoder.init(&mut params, &mut rng);
        critic.init_head(&mut params, &mut rng);
        affordance.init_head(&mut params, &mut rng);
        Self { params, feat_dim, encoder, critic, affordance }
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let pre0 = "prior.enc.pre0.w";
        if !params.contains(pre0) {
            return Err(Error::Data(format!("missing parameter block {pre0}")));
        }
        let feat_dim = params.get(pre0).cols() * 2;
        let (encoder, critic, affordance) = architecture(feat_dim);
        Ok(Self { params, feat_dim, encoder, critic, affordance })
    }

    pub fn features<'c>(
        &self,
        cache: &'c mut FeatureCache,
        obs: &Arc<Observation>,
    ) -> &'c PointFeatures {
        cache.features(obs, |o| self.encoder.encode(&self.params, &o.cam_tensor()))
    }

    /// Encodes a cloud on a training tape; N x d per-point node.
    pub fn tape_cloud(&self, g: &mut Graph, obs: &Observation) -> NodeId {
        let cloud = g.input(obs.cam_tensor());
        let (per_point, _pooled) = self.encoder.forward(g, &self.params, cloud);
        per_point
    }

    /// Action score node for one (point, orientation).
    pub fn tape_critic(
        &self,
        g: &mut Graph,
        per_point: NodeId,
        camera: &Camera,
        point: usize,
        orientation: &Orientation,
    ) -> NodeId {
        let f = g.select_row(per_point, point);
        let rf = g.input(Tensor::row_vector(&orientation_features(camera, orientation)));
        let x = g.concat_cols(&[f, rf]);
        self.critic.forward(g, &self.params, x)
    }

    /// Actionability node for selected points, k x 1.
    pub fn tape_affordance_at(&self, g: &mut Graph, per_point: NodeId, points: &[usize]) -> NodeId {
        let rows: Vec<NodeId> = points.iter().map(|&p| g.select_row(per_point, p)).collect();
        let x = g.stack_rows(&rows);
        self.affordance.forward(g, &self.params, x)
    }

    fn critic_scores_from_row(
        &self,
        row: &[f64],
        camera: &Camera,
        orientations: &[Orientation],
    ) -> Vec<f64> {
        let width = self.feat_dim + 6;
        let mut data = Vec::with_capacity(orientations.len() * width);
        for r in orientations {
            data.extend_from_slice(row);
            data.extend_from_slice(&orientation_features(camera, r));
        }
        let x = Tensor::from_vec(orientations.len(), width, data).expect("batch shape");
        let mut g = Graph::new();
        let xn = g.input(x);
        let out = self.critic.forward(&mut g, &self.params, xn);
        g.value(out).data().to_vec()
    }

    /// Success likelihoods for many orientations at one point.
    pub fn critic_scores(
        &self,
        feats: &PointFeatures,
        camera: &Camera,
        point: usize,
        orientations: &[Orientation],
    ) -> Vec<f64> {
        self.critic_scores_from_row(feats.per_point.row(point), camera, orientations)
    }

    /// Per-point actionability map, one score per cloud point.
    pub fn affordance_map(&self, feats: &PointFeatures) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.input(feats.per_point.clone());
        let out = self.affordance.forward(&mut g, &self.params, x);
        g.value(out).data().to_vec()
    }

    /// Actionability regression target at one point: mean of the top 5
    /// critic scores over sampled candidate orientations.
    pub fn affordance_target(
        &self,
        feats: &PointFeatures,
        obs: &Observation,
        point: usize,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        let orients = propose_actions(obs, point, CANDIDATE_ORIENTATIONS, rng);
        let scores = self.critic_scores(feats, &obs.camera, point, &orients);
        top_k_mean(&scores, TOP_K)
    }
}

/// Knobs for prior training.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PriorTrainConfig {
    pub feat_dim: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Actionability points regressed per step.
    pub aff_points: usize,
    pub seed: u64,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self { feat_dim: FEAT_DIM, epochs: 12, batch: 24, lr: 1e-3, aff_points: 6, seed: 0 }
    }
}

/// Per-epoch mean losses observed while fitting the prior.
#[derive(Clone, Debug, Default)]
pub struct PriorTrainStats {
    pub epoch_critic_loss: Vec<f64>,
    pub epoch_affordance_loss: Vec<f64>,
}

/// Fits a fresh prior on interaction records: the critic by binary cross
/// entropy on motion labels over label-balanced batches (resampled to
/// 50/50 whenever both classes exist), the actionability head by L1 toward
/// top-5-of-100 critic score means under the current parameters.
pub fn train_prior(
    records: &[InteractionRecord],
    cfg: &PriorTrainConfig,
) -> Result<(PriorModel, PriorTrainStats)> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("prior training set".into()));
    }
    let model = PriorModel::new(cfg.feat_dim, cfg.seed);
    train_prior_from(model, records, cfg)
}

/// Same as `train_prior` but continues from an existing model.
pub fn train_prior_from(
    mut model: PriorModel,
    records: &[InteractionRecord],
    cfg: &PriorTrainConfig,
) -> Result<(PriorModel, PriorTrainStats)> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("prior training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TRAIN_SALT));
    let mut adam = Adam::new(cfg.lr);
    let mut stats = PriorTrainStats::default();

    let positives: Vec<usize> = (0..records.len()).filter(|&i| records[i].succeeded()).collect();
    let negatives: Vec<usize> = (0..records.len()).filter(|&i| !records[i].succeeded()).collect();
    let steps_per_epoch = (records.len() / cfg.batch).max(1);

    for _epoch in 0..cfg.epochs {
        let mut critic_sum = 0.0;
        let mut aff_sum = 0.0;
        for _step in 0..steps_per_epoch {
            // Label-balanced batch when both classes are present.
            let batch: Vec<usize> = (0..cfg.batch)
                .map(|b| {
                    if positives.is_empty() || negatives.is_empty() {
                        rng.gen_range(0..records.len())
                    } else if b % 2 == 0 {
                        positives[rng.gen_range(0..positives.len())]
                    } else {
                        negatives[rng.gen_range(0..negatives.len())]
                    }
                })
                .collect();

            let mut g = Graph::new();
            // Encode each distinct cloud once; records share nodes.
            let mut distinct: Vec<Arc<Observation>> = Vec::new();
            let mut pp_nodes: Vec<NodeId> = Vec::new();
            let mut slots = Vec::with_capacity(batch.len());
            for &i in &batch {
                let obs = &records[i].obs;
                let slot = distinct.iter().position(|o| Arc::ptr_eq(o, obs)).unwrap_or_else(|| {
                    distinct.push(obs.clone());
                    pp_nodes.push(model.tape_cloud(&mut g, obs));
                    distinct.len() - 1
                });
                slots.push(slot);
            }

            let preds: Vec<NodeId> = batch
                .iter()
                .zip(&slots)
                .map(|(&i, &slot)| {
                    let rec = &records[i];
                    model.tape_critic(
                        &mut g,
                        pp_nodes[slot],
                        &rec.obs.camera,
                        rec.point,
                        &rec.orientation,
                    )
                })
                .collect();
            let preds = g.stack_rows(&preds);
            let labels = Tensor::from_vec(
                batch.len(),
                1,
                batch.iter().map(|&i| records[i].label()).collect(),
            )
            .expect("label shape");
            let critic_loss = g.bce_mean(preds, &labels);

            // Actionability: regress sampled points toward targets built
            // from the tape's current per-point features.
            let mut aff_slots = Vec::with_capacity(cfg.aff_points);
            let mut aff_points = Vec::with_capacity(cfg.aff_points);
            let mut targets = Vec::with_capacity(cfg.aff_points);
            for _ in 0..cfg.aff_points {
                let pick = rng.gen_range(0..batch.len());
                let slot = slots[pick];
                let obs = &distinct[slot];
                let p = rng.gen_range(0..obs.len());
                let row = g.value(pp_nodes[slot]).row(p).to_vec();
                let orients = propose_actions(obs, p, CANDIDATE_ORIENTATIONS, &mut rng);
                let scores = model.critic_scores_from_row(&row, &obs.camera, &orients);
                targets.push(top_k_mean(&scores, TOP_K));
                aff_slots.push(slot);
                aff_points.push(p);
            }
            let aff_rows: Vec<NodeId> = aff_slots
                .iter()
                .zip(&aff_points)
                .map(|(&slot, &p)| g.select_row(pp_nodes[slot], p))
                .collect();
            let aff_in = g.stack_rows(&aff_rows);
            let aff_pred = model.affordance.forward(&mut g, &model.params, aff_in);
            let target_t =
                Tensor::from_vec(targets.len(), 1, targets.clone()).expect("target shape");
            let aff_loss = g.l1_mean(aff_pred, &target_t);

            let total = g.add(critic_loss, aff_loss);
            let grads = g.backward(total)?;
            adam.step(&mut model.params, &grads);

            critic_sum += g.value(critic_loss).item();
            aff_sum += g.value(aff_loss).item();
        }
        stats.epoch_critic_loss.push(critic_sum / steps_per_epoch as f64);
        stats.epoch_affordance_loss.push(aff_sum / steps_per_epoch as f64);
    }
    Ok((model, stats))
}
