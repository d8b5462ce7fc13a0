//! Few-shot adaptation: executed interactions are encoded into latent
//! codes with attention weights, aggregated into a single hidden-state
//! estimate z, and the posterior critic and affordance heads condition on
//! that aggregate.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{orientation_features, Camera, Observation};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{
    bce, Act, Graph, Linear, Mlp, NodeId, ParamStore, PointEncoder, PointFeatures, Tensor,
};
use crate::sim::{Orientation, SUCCESS_TAU};

/// Width of the hidden-information code z.
pub const LATENT_DIM: usize = 128;
/// Attention floor keeping the weighted mean well defined.
pub const WEIGHT_FLOOR: f64 = 1e-4;
const AAP_SALT: u64 = 0x11aa_90f3;

/// One executed interaction: the cloud it was proposed on, the contact
/// point index, the gripper orientation (world frame), and the observed
/// part motion. The binary outcome label derives from the motion, so it
/// can never disagree with it.
#[derive(Clone, Debug)]
pub struct InteractionRecord {
    pub obs: Arc<Observation>,
    pub point: usize,
    pub orientation: Orientation,
    pub motion: f64,
}

impl InteractionRecord {
    pub fn succeeded(&self) -> bool {
        self.motion > SUCCESS_TAU
    }

    /// 1.0 iff the motion cleared the success threshold.
    pub fn label(&self) -> f64 {
        if self.succeeded() {
            1.0
        } else {
            0.0
        }
    }
}

/// One encoded interaction: latent code, positive attention weight, and
/// its position in the interaction sequence. The position fixes the
/// summation order of the aggregate, making it permutation independent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Contribution {
    pub z: Tensor,
    pub w: f64,
    pub index: usize,
}

/// The aggregated hidden-information estimate, kept alongside its
/// contributors so z is always recomputable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentInfo {
    pub z: Tensor,
    pub contributors: Vec<Contribution>,
}

impl LatentInfo {
    /// Zero interactions: z is the zero vector by convention.
    pub fn empty(dim: usize) -> Self {
        Self { z: Tensor::zeros(1, dim), contributors: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.contributors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }
}

/// Attention-weighted mean of contributor codes, summed in sequence-index
/// order so any permutation of the input list yields bit-identical z.
/// Empty input gives the zero vector.
pub fn aggregate(contributors: &[Contribution], dim: usize) -> LatentInfo {
    if contributors.is_empty() {
        return LatentInfo::empty(dim);
    }
    let mut sorted = contributors.to_vec();
    sorted.sort_by_key(|c| c.index);
    let mut z = Tensor::zeros(1, dim);
    let mut total_w = 0.0;
    for c in &sorted {
        debug_assert!(c.w > 0.0, "attention weights are strictly positive");
        debug_assert_eq!(c.z.cols(), dim);
        total_w += c.w;
        for d in 0..dim {
            z.data_mut()[d] += c.z.get(0, d) * c.w;
        }
    }
    for v in z.data_mut() {
        *v /= total_w;
    }
    LatentInfo { z, contributors: sorted }
}

/// Mean of the k largest scores (all of them when fewer than k exist).
pub fn top_k_mean(scores: &[f64], k: usize) -> f64 {
    assert!(!scores.is_empty(), "top-k of an empty score list");
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    let k = k.min(sorted.len());
    sorted[..k].iter().sum::<f64>() / k as f64
}

/// Per-point feature cache for a fixed parameter snapshot. Entries are
/// keyed by cloud identity (the Arc allocation, which the cache keeps
/// alive), so it can never serve features of a different cloud. Discard
/// the cache after any parameter update.
pub struct FeatureCache {
    entries: BTreeMap<usize, (Arc<Observation>, PointFeatures)>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn features(
        &mut self,
        obs: &Arc<Observation>,
        encode: impl FnOnce(&Observation) -> PointFeatures,
    ) -> &PointFeatures {
        let key = Arc::as_ptr(obs) as usize;
        &self.entries.entry(key).or_insert_with(|| (obs.clone(), encode(obs))).1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Default for FeatureCache {
    fn default() -> Self {
        Self::new()
    }
}

/// Adaptive model: its own cloud encoder, the interaction encoder
/// (shared trunk with code and attention projections), and the two
/// z-conditioned heads. All parameters live under the "aap." prefix.
///
/// Each conditioned head embeds its query, gates the embedding with a
/// linear map of z, and scores the concatenation [h, h*gate(z), z]. The
/// explicit product makes relations between where an interaction
/// happened and where the head is asked first-order learnable; a plain
/// concatenation leaves them a slow second-order effect.
#[derive(Clone, Debug)]
pub struct AapModel {
    pub params: ParamStore,
    pub feat_dim: usize,
    encoder: PointEncoder,
    trunk: Mlp,
    zproj: Linear,
    wproj: Linear,
    critic_pre: Linear,
    critic_gate: Linear,
    critic: Mlp,
    aff_pre: Linear,
    aff_gate: Linear,
    affordance: Mlp,
}

/// Width of the gated query embedding inside each conditioned head.
const HEAD_DIM: usize = 128;

struct Blocks {
    encoder: PointEncoder,
    trunk: Mlp,
    zproj: Linear,
    wproj: Linear,
    critic_pre: Linear,
    critic_gate: Linear,
    critic: Mlp,
    aff_pre: Linear,
    aff_gate: Linear,
    affordance: Mlp,
}

fn architecture(feat_dim: usize) -> Blocks {
    // Interaction input: point feature + orientation (6) + motion encoding
    // (raw scalar and its binary label).
    let enc_in = feat_dim + 6 + 2;
    let head_in = 2 * HEAD_DIM + LATENT_DIM;
    Blocks {
        encoder: PointEncoder::new("aap.enc", feat_dim),
        // Linear trunk output: a rectified code head can saturate at
        // exactly zero for every input early in training, after which no
        // gradient reaches the encoder again.
        trunk: Mlp::new("aap.trunk", &[enc_in, 256, 128], Act::None),
        zproj: Linear::new("aap.zproj", 128, LATENT_DIM),
        wproj: Linear::new("aap.wproj", 128, 1),
        critic_pre: Linear::new("aap.critic_pre", feat_dim + 6, HEAD_DIM),
        critic_gate: Linear::new("aap.critic_gate", LATENT_DIM, HEAD_DIM),
        critic: Mlp::new("aap.critic", &[head_in, 128, 1], Act::Logistic),
        aff_pre: Linear::new("aap.aff_pre", feat_dim, HEAD_DIM),
        aff_gate: Linear::new("aap.aff_gate", LATENT_DIM, HEAD_DIM),
        affordance: Mlp::new("aap.aff", &[head_in, 128, 1], Act::Logistic),
    }
}

impl AapModel {
    fn assemble(params: ParamStore, feat_dim: usize) -> Self {
        let b = architecture(feat_dim);
        Self {
            params,
            feat_dim,
            encoder: b.encoder,
            trunk: b.trunk,
            zproj: b.zproj,
            wproj: b.wproj,
            critic_pre: b.critic_pre,
            critic_gate: b.critic_gate,
            critic: b.critic,
            aff_pre: b.aff_pre,
            aff_gate: b.aff_gate,
            affordance: b.affordance,
        }
    }

    pub fn new(feat_dim: usize, seed: u64) -> Self {
        let b = architecture(feat_dim);
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, AAP_SALT));
        b.encoder.init(&mut params, &mut rng);
        b.trunk.init(&mut params, &mut rng);
        b.zproj.init(&mut params, &mut rng);
        b.wproj.init(&mut params, &mut rng);
        b.critic_pre.init(&mut params, &mut rng);
        b.critic_gate.init(&mut params, &mut rng);
        b.critic.init_head(&mut params, &mut rng);
        b.aff_pre.init(&mut params, &mut rng);
        b.aff_gate.init(&mut params, &mut rng);
        b.affordance.init_head(&mut params, &mut rng);
        Self::assemble(params, feat_dim)
    }

    /// Rebuilds the model around restored parameters.
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let pre0 = "aap.enc.pre0.w";
        if !params.contains(pre0) {
            return Err(Error::Data(format!("missing parameter block {pre0}")));
        }
        let feat_dim = params.get(pre0).cols() * 2;
        Ok(Self::assemble(params, feat_dim))
    }

    /// Cached per-point features for a cloud under the current parameters.
    pub fn features<'c>(
        &self,
        cache: &'c mut FeatureCache,
        obs: &Arc<Observation>,
    ) -> &'c PointFeatures {
        cache.features(obs, |o| self.encoder.encode(&self.params, &o.cam_tensor()))
    }

    // Tape builders, used by training loops so gradients reach every
    // parameter including the cloud encoder.

    /// Encodes a cloud on the tape; returns the N x d per-point node.
    pub fn tape_cloud(&self, g: &mut Graph, obs: &Observation) -> NodeId {
        let cloud = g.input(obs.cam_tensor());
        let (per_point, _pooled) = self.encoder.forward(g, &self.params, cloud);
        per_point
    }

    fn tape_contribution_from_row(
        &self,
        g: &mut Graph,
        point_feat: NodeId,
        rec: &InteractionRecord,
    ) -> (NodeId, NodeId) {
        let rf = orientation_features(&rec.obs.camera, &rec.orientation);
        let rf = g.input(Tensor::row_vector(&rf));
        let mf = g.input(Tensor::row_vector(&[rec.motion, rec.label()]));
        let x = g.concat_cols(&[point_feat, rf, mf]);
        let h = self.trunk.forward(g, &self.params, x);
        let z = self.zproj.forward(g, &self.params, h);
        let w_raw = self.wproj.forward(g, &self.params, h);
        let w = g.softplus(w_raw);
        let w = g.add_const(w, WEIGHT_FLOOR);
        (z, w)
    }

    /// Encodes one interaction against its cloud's per-point node.
    pub fn tape_contribution(
        &self,
        g: &mut Graph,
        per_point: NodeId,
        rec: &InteractionRecord,
    ) -> (NodeId, NodeId) {
        let f = g.select_row(per_point, rec.point);
        self.tape_contribution_from_row(g, f, rec)
    }

    /// Weighted-mean aggregate on the tape; empty input is the zero code.
    pub fn tape_aggregate(&self, g: &mut Graph, contribs: &[(NodeId, NodeId)]) -> NodeId {
        if contribs.is_empty() {
            return g.input(Tensor::zeros(1, LATENT_DIM));
        }
        let items: Vec<NodeId> = contribs.iter().map(|c| c.0).collect();
        let weights: Vec<NodeId> = contribs.iter().map(|c| c.1).collect();
        g.weighted_mean(&items, &weights)
    }

    /// Gated head input [h, h*gate(z), z] for an M x d query block and a
    /// 1 x LATENT_DIM code, both already on the tape.
    fn tape_gated_input(
        &self,
        g: &mut Graph,
        pre: &Linear,
        gate: &Linear,
        queries: NodeId,
        z: NodeId,
    ) -> NodeId {
        let h = pre.forward(g, &self.params, queries);
        let h = g.relu(h);
        let gamma = gate.forward(g, &self.params, z);
        let rows = g.value(h).rows();
        let gamma = g.broadcast_rows(gamma, rows);
        let hx = g.mul(h, gamma);
        let zb = g.broadcast_rows(z, rows);
        g.concat_cols(&[h, hx, zb])
    }

    /// Conditioned action score for one (point, orientation) on the tape.
    pub fn tape_critic(
        &self,
        g: &mut Graph,
        per_point: NodeId,
        camera: &Camera,
        point: usize,
        orientation: &Orientation,
        z: NodeId,
    ) -> NodeId {
        let f = g.select_row(per_point, point);
        let rf = g.input(Tensor::row_vector(&orientation_features(camera, orientation)));
        let q = g.concat_cols(&[f, rf]);
        let x = self.tape_gated_input(g, &self.critic_pre, &self.critic_gate, q, z);
        self.critic.forward(g, &self.params, x)
    }

    /// Conditioned actionability for selected points, k x 1 on the tape.
    pub fn tape_affordance_at(
        &self,
        g: &mut Graph,
        per_point: NodeId,
        points: &[usize],
        z: NodeId,
    ) -> NodeId {
        let rows: Vec<(NodeId, usize)> = points.iter().map(|&p| (per_point, p)).collect();
        self.tape_affordance_rows(g, &rows, z)
    }

    /// Same as `tape_affordance_at` but each row may come from a different
    /// cloud's per-point node.
    pub fn tape_affordance_rows(
        &self,
        g: &mut Graph,
        rows: &[(NodeId, usize)],
        z: NodeId,
    ) -> NodeId {
        let picked: Vec<NodeId> =
            rows.iter().map(|&(pp, p)| g.select_row(pp, p)).collect();
        let q = g.stack_rows(&picked);
        let x = self.tape_gated_input(g, &self.aff_pre, &self.aff_gate, q, z);
        self.affordance.forward(g, &self.params, x)
    }

    // Value-mode inference.

    /// Encodes one interaction using cached features.
    pub fn encode_with_features(
        &self,
        feats: &PointFeatures,
        rec: &InteractionRecord,
        index: usize,
    ) -> Contribution {
        let mut g = Graph::new();
        let f = g.input(Tensor::from_vec(1, self.feat_dim, feats.per_point.row(rec.point).to_vec())
            .expect("row shape"));
        let (z, w) = self.tape_contribution_from_row(&mut g, f, rec);
        Contribution { z: g.value(z).clone(), w: g.value(w).item(), index }
    }

    /// Encodes and aggregates an ordered interaction sequence.
    pub fn encode_sequence(
        &self,
        cache: &mut FeatureCache,
        records: &[InteractionRecord],
    ) -> LatentInfo {
        let contribs: Vec<Contribution> = records
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                let feats = self.features(cache, &rec.obs);
                let row = Tensor::from_vec(
                    1,
                    self.feat_dim,
                    feats.per_point.row(rec.point).to_vec(),
                )
                .expect("row shape");
                let mut g = Graph::new();
                let f = g.input(row);
                let (z, w) = self.tape_contribution_from_row(&mut g, f, rec);
                Contribution { z: g.value(z).clone(), w: g.value(w).item(), index: i }
            })
            .collect();
        aggregate(&contribs, LATENT_DIM)
    }

    pub(crate) fn critic_scores_from_row(
        &self,
        row: &[f64],
        camera: &Camera,
        orientations: &[Orientation],
        z: &Tensor,
    ) -> Vec<f64> {
        assert_eq!(z.cols(), LATENT_DIM);
        let width = self.feat_dim + 6;
        let mut data = Vec::with_capacity(orientations.len() * width);
        for r in orientations {
            data.extend_from_slice(row);
            data.extend_from_slice(&orientation_features(camera, r));
        }
        let q = Tensor::from_vec(orientations.len(), width, data).expect("batch shape");
        let mut g = Graph::new();
        let qn = g.input(q);
        let zn = g.input(z.clone());
        let x = self.tape_gated_input(&mut g, &self.critic_pre, &self.critic_gate, qn, zn);
        let out = self.critic.forward(&mut g, &self.params, x);
        g.value(out).data().to_vec()
    }

    /// Conditioned scores for many orientations at one point, one forward
    /// pass over a stacked batch.
    pub fn critic_scores(
        &self,
        feats: &PointFeatures,
        camera: &Camera,
        point: usize,
        orientations: &[Orientation],
        z: &Tensor,
    ) -> Vec<f64> {
        self.critic_scores_from_row(feats.per_point.row(point), camera, orientations, z)
    }

    /// Conditioned per-point affordance map.
    pub fn affordance_map(&self, feats: &PointFeatures, z: &Tensor) -> Vec<f64> {
        assert_eq!(z.cols(), LATENT_DIM);
        let mut g = Graph::new();
        let qn = g.input(feats.per_point.clone());
        let zn = g.input(z.clone());
        let x = self.tape_gated_input(&mut g, &self.aff_pre, &self.aff_gate, qn, zn);
        let out = self.affordance.forward(&mut g, &self.params, x);
        g.value(out).data().to_vec()
    }

    /// Regression target for the conditioned affordance at one point: mean
    /// of the top 5 critic scores over sampled candidate orientations.
    pub fn affordance_target(
        &self,
        feats: &PointFeatures,
        obs: &Observation,
        point: usize,
        z: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        let orients =
            crate::prior::propose_actions(obs, point, crate::prior::CANDIDATE_ORIENTATIONS, rng);
        let scores = self.critic_scores(feats, &obs.camera, point, &orients, z);
        top_k_mean(&scores, crate::prior::TOP_K)
    }

    /// Mean binary cross entropy of conditioned critic scores over a batch
    /// of records under a fixed code z. This is the quantity whose drop
    /// measures how informative an interaction was.
    pub fn critic_batch_loss(
        &self,
        cache: &mut FeatureCache,
        records: &[InteractionRecord],
        z: &Tensor,
    ) -> f64 {
        assert!(!records.is_empty(), "loss of an empty batch");
        let mut total = 0.0;
        for rec in records {
            let feats = self.features(cache, &rec.obs);
            let s = self.critic_scores(
                feats,
                &rec.obs.camera,
                rec.point,
                std::slice::from_ref(&rec.orientation),
                z,
            )[0];
            total += bce(s, rec.label());
        }
        total / records.len() as f64
    }
}
