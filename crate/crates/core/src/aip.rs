//! Interaction proposal: score candidate interactions by how much they
//! are expected to shrink the adaptive critic's loss, pick the next
//! interaction greedily, and decide when the budget or the expected
//! information gain runs out.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aap::{top_k_mean, AapModel, FeatureCache, InteractionRecord};
use crate::cloud::{orientation_features, Camera, Observation};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{Act, Graph, Mlp, NodeId, ParamStore, PointEncoder, PointFeatures, Tensor};
use crate::sim::{Action, Orientation, TaskKind};

/// Proposal loop stops when no point's expected gain reaches this.
pub const STOP_THRESHOLD: f64 = 0.05;
const AIP_SALT: u64 = 0x1f0a_6c55;

/// Expected-gain model: scores are real-valued loss reductions, so the
/// heads carry no squashing. Parameters live under the "aip." prefix.
#[derive(Clone, Debug)]
pub struct AipModel {
    pub params: ParamStore,
    pub feat_dim: usize,
    encoder: PointEncoder,
    critic: Mlp,
    affordance: Mlp,
}

fn architecture(feat_dim: usize) -> (PointEncoder, Mlp, Mlp) {
    let latent = crate::aap::LATENT_DIM;
    (
        PointEncoder::new("aip.enc", feat_dim),
        // Inputs: point feature, orientation, z, and the adaptive score of
        // the candidate under the current z.
        Mlp::new("aip.critic", &[feat_dim + 6 + latent + 1, 128, 128, 1], Act::None),
        // Inputs: point feature, z, and the adaptive actionability at p.
        Mlp::new("aip.aff", &[feat_dim + latent + 1, 128, 128, 1], Act::None),
    )
}

impl AipModel {
    pub fn new(feat_dim: usize, seed: u64) -> Self {
        let (encoder, critic, affordance) = architecture(feat_dim);
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, AIP_SALT));
        encoder.init(&mut params, &mut rng);
        critic.init_head(&mut params, &mut rng);
        affordance.init_head(&mut params, &mut rng);
        Self { params, feat_dim, encoder, critic, affordance }
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let pre0 = "aip.enc.pre0.w";
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

    /// Expected-gain score node for one candidate.
    pub fn tape_critic(
        &self,
        g: &mut Graph,
        per_point: NodeId,
        camera: &Camera,
        point: usize,
        orientation: &Orientation,
        z: NodeId,
        s_aap: f64,
    ) -> NodeId {
        let f = g.select_row(per_point, point);
        let rf = g.input(Tensor::row_vector(&orientation_features(camera, orientation)));
        let sa = g.input(Tensor::scalar(s_aap));
        let x = g.concat_cols(&[f, rf, z, sa]);
        self.critic.forward(g, &self.params, x)
    }

    /// Expected-gain actionability node at selected points, k x 1.
    pub fn tape_affordance_at(
        &self,
        g: &mut Graph,
        per_point: NodeId,
        points: &[usize],
        z: NodeId,
        a_aap: &[f64],
    ) -> NodeId {
        assert_eq!(points.len(), a_aap.len());
        let rows: Vec<NodeId> = points
            .iter()
            .zip(a_aap)
            .map(|(&p, &a)| {
                let f = g.select_row(per_point, p);
                let an = g.input(Tensor::scalar(a));
                g.concat_cols(&[f, z, an])
            })
            .collect();
        let x = g.stack_rows(&rows);
        self.affordance.forward(g, &self.params, x)
    }

    pub(crate) fn critic_scores_from_row(
        &self,
        row: &[f64],
        camera: &Camera,
        orientations: &[Orientation],
        z: &Tensor,
        s_aap: &[f64],
    ) -> Vec<f64> {
        assert_eq!(orientations.len(), s_aap.len());
        let width = self.feat_dim + 6 + z.cols() + 1;
        let mut data = Vec::with_capacity(orientations.len() * width);
        for (r, &s) in orientations.iter().zip(s_aap) {
            data.extend_from_slice(row);
            data.extend_from_slice(&orientation_features(camera, r));
            data.extend_from_slice(z.data());
            data.push(s);
        }
        let x = Tensor::from_vec(orientations.len(), width, data).expect("batch shape");
        let mut g = Graph::new();
        let xn = g.input(x);
        let out = self.critic.forward(&mut g, &self.params, xn);
        g.value(out).data().to_vec()
    }

    /// Expected-gain scores for many orientations at one point; `s_aap`
    /// holds the adaptive action score of each candidate.
    pub fn critic_scores(
        &self,
        feats: &PointFeatures,
        camera: &Camera,
        point: usize,
        orientations: &[Orientation],
        z: &Tensor,
        s_aap: &[f64],
    ) -> Vec<f64> {
        self.critic_scores_from_row(feats.per_point.row(point), camera, orientations, z, s_aap)
    }

    /// Expected-gain actionability per point; `a_aap` is the adaptive
    /// affordance map under the same z.
    pub fn affordance_map(&self, feats: &PointFeatures, z: &Tensor, a_aap: &[f64]) -> Vec<f64> {
        let n = feats.per_point.rows();
        assert_eq!(n, a_aap.len());
        let width = self.feat_dim + z.cols() + 1;
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(feats.per_point.row(i));
            data.extend_from_slice(z.data());
            data.push(a_aap[i]);
        }
        let x = Tensor::from_vec(n, width, data).expect("batch shape");
        let mut g = Graph::new();
        let xn = g.input(x);
        let out = self.affordance.forward(&mut g, &self.params, xn);
        g.value(out).data().to_vec()
    }

    /// Regression target for expected-gain actionability at one point:
    /// mean of the top 5 critic scores over sampled candidates.
    pub fn affordance_target(
        &self,
        aap: &AapModel,
        own_feats: &PointFeatures,
        aap_feats: &PointFeatures,
        obs: &Observation,
        point: usize,
        z: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        let orients =
            crate::prior::propose_actions(obs, point, crate::prior::CANDIDATE_ORIENTATIONS, rng);
        let s_aap = aap.critic_scores(aap_feats, &obs.camera, point, &orients, z);
        let scores = self.critic_scores(own_feats, &obs.camera, point, &orients, z, &s_aap);
        top_k_mean(&scores, crate::prior::TOP_K)
    }
}

/// Ground-truth gain of interaction i (1-based) within a sequence: the
/// adaptive critic loss over a fixed held-out batch conditioned on the
/// first i-1 interactions, minus the same loss conditioned on the first i.
/// The i = 1 baseline is the empty prefix (zero code).
pub fn gt_aip_score(
    aap: &AapModel,
    cache: &mut FeatureCache,
    eval_batch: &[InteractionRecord],
    sequence: &[InteractionRecord],
    i: usize,
) -> f64 {
    assert!(i >= 1 && i <= sequence.len(), "i must index the sequence (1-based)");
    let z_prev = aap.encode_sequence(cache, &sequence[..i - 1]).z;
    let z_cur = aap.encode_sequence(cache, &sequence[..i]).z;
    let loss_prev = aap.critic_batch_loss(cache, eval_batch, &z_prev);
    let loss_cur = aap.critic_batch_loss(cache, eval_batch, &z_cur);
    loss_prev - loss_cur
}

/// Lowest index attaining the maximum.
pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    assert!(!values.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A selected next interaction: the executing action, the cloud index it
/// targets, its expected-gain score, and the map the point was chosen from.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub action: Action,
    pub point: usize,
    pub s_aip: f64,
    pub gain_map: Vec<f64>,
}

/// Greedy next-interaction choice: the point maximizing expected-gain
/// actionability (ties to the lowest index), then the best of 100 sampled
/// orientations by expected-gain score (ties to the lowest sample index).
pub fn propose_next(
    aap: &AapModel,
    aip: &AipModel,
    aap_cache: &mut FeatureCache,
    aip_cache: &mut FeatureCache,
    obs: &Arc<Observation>,
    z: &Tensor,
    task: TaskKind,
    rng: &mut ChaCha8Rng,
) -> Result<Proposal> {
    if obs.is_empty() {
        return Err(Error::EmptyView);
    }
    let aap_feats = aap.features(aap_cache, obs).clone();
    let aip_feats = aip.features(aip_cache, obs).clone();
    let a_aap = aap.affordance_map(&aap_feats, z);
    let gain_map = aip.affordance_map(&aip_feats, z, &a_aap);
    let point = argmax_lowest(&gain_map);

    let orients =
        crate::prior::propose_actions(obs, point, crate::prior::CANDIDATE_ORIENTATIONS, rng);
    let s_aap = aap.critic_scores(&aap_feats, &obs.camera, point, &orients, z);
    let s_aip = aip.critic_scores(&aip_feats, &obs.camera, point, &orients, z, &s_aap);
    let pick = argmax_lowest(&s_aip);

    Ok(Proposal {
        action: Action { point: obs.points_world[point], orientation: orients[pick], task },
        point,
        s_aip: s_aip[pick],
        gain_map,
    })
}

/// Stop when the step budget is spent or no point promises enough gain.
pub fn should_stop(gain_map: &[f64], steps_done: usize, budget: usize, threshold: f64) -> bool {
    if steps_done >= budget {
        return true;
    }
    let max = gain_map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max < threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aap::{aggregate, Contribution, LatentInfo};
    use crate::cloud::render;
    use crate::nn::bce;
    use crate::prior::propose_actions;
    use crate::sim::{sample_scene, Category};
    use rand::Rng;

    fn obs_of(seed: u64, n: usize) -> Arc<Observation> {
        let scene = sample_scene(Category::Door, seed);
        Arc::new(render(&scene, n, 0).unwrap())
    }

    fn record(obs: &Arc<Observation>, point: usize, motion: f64, seed: u64) -> InteractionRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let orientation = propose_actions(obs, point, 1, &mut rng).remove(0);
        InteractionRecord { obs: obs.clone(), point, orientation, motion }
    }

    fn randomize(params: &mut ParamStore, name: &str, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in params.get_mut(name).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }

    #[test]
    fn fresh_heads_score_zero_everywhere() {
        let obs = obs_of(1, 24);
        let aip = AipModel::new(16, 4);
        let mut cache = FeatureCache::new();
        let feats = aip.features(&mut cache, &obs).clone();
        let z = LatentInfo::empty(crate::aap::LATENT_DIM).z;
        let a_aap = vec![0.5; obs.len()];
        let map = aip.affordance_map(&feats, &z, &a_aap);
        assert!(map.iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let orients = propose_actions(&obs, 2, 5, &mut rng);
        let scores = aip.critic_scores(&feats, &obs.camera, 2, &orients, &z, &[0.5; 5]);
        assert!(scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scoring_is_deterministic() {
        let obs = obs_of(2, 24);
        let mut aip = AipModel::new(16, 5);
        randomize(&mut aip.params, "aip.critic.2.w", 1);
        let mut cache = FeatureCache::new();
        let feats = aip.features(&mut cache, &obs).clone();
        let z = LatentInfo::empty(crate::aap::LATENT_DIM).z;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let orients = propose_actions(&obs, 1, 4, &mut rng);
        let a = aip.critic_scores(&feats, &obs.camera, 1, &orients, &z, &[0.1, 0.2, 0.3, 0.4]);
        let b = aip.critic_scores(&feats, &obs.camera, 1, &orients, &z, &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gain_scores_telescope_over_any_sequence() {
        let obs = obs_of(3, 24);
        let aap = AapModel::new(16, 6);
        let mut cache = FeatureCache::new();
        let sequence: Vec<InteractionRecord> = (0..4)
            .map(|i| record(&obs, (i * 5) % 24, 0.03 * i as f64, 10 + i as u64))
            .collect();
        let eval_batch: Vec<InteractionRecord> =
            (0..6).map(|i| record(&obs, (i * 3 + 1) % 24, 0.02 * i as f64, 50 + i as u64)).collect();

        let total: f64 = (1..=4)
            .map(|i| gt_aip_score(&aap, &mut cache, &eval_batch, &sequence, i))
            .sum();
        let z_empty = LatentInfo::empty(crate::aap::LATENT_DIM).z;
        let z_full = aap.encode_sequence(&mut cache, &sequence).z;
        let l_empty = aap.critic_batch_loss(&mut cache, &eval_batch, &z_empty);
        let l_full = aap.critic_batch_loss(&mut cache, &eval_batch, &z_full);
        assert!(
            (total - (l_empty - l_full)).abs() < 1e-12,
            "telescoping violated: {total} vs {}",
            l_empty - l_full
        );
    }

    #[test]
    fn duplicate_interaction_has_exactly_zero_gain() {
        let obs = obs_of(4, 24);
        let aap = AapModel::new(16, 7);
        let mut cache = FeatureCache::new();
        let r = record(&obs, 3, 0.2, 21);
        let sequence = vec![r.clone(), r.clone()];
        let eval_batch: Vec<InteractionRecord> =
            (0..5).map(|i| record(&obs, i, 0.01 * i as f64, 60 + i as u64)).collect();
        let gt = gt_aip_score(&aap, &mut cache, &eval_batch, &sequence, 2);
        assert_eq!(gt, 0.0, "identical aggregates must give zero gain");
    }

    #[test]
    fn first_step_gain_uses_the_empty_prefix_baseline() {
        let obs = obs_of(5, 24);
        let aap = AapModel::new(16, 8);
        let mut cache = FeatureCache::new();
        let sequence = vec![record(&obs, 2, 0.4, 31)];
        let eval_batch: Vec<InteractionRecord> =
            (0..4).map(|i| record(&obs, i + 6, 0.05, 70 + i as u64)).collect();
        let gt = gt_aip_score(&aap, &mut cache, &eval_batch, &sequence, 1);
        let z0 = LatentInfo::empty(crate::aap::LATENT_DIM).z;
        let z1 = aap.encode_sequence(&mut cache, &sequence).z;
        let want = aap.critic_batch_loss(&mut cache, &eval_batch, &z0)
            - aap.critic_batch_loss(&mut cache, &eval_batch, &z1);
        assert_eq!(gt, want);
    }

    #[test]
    fn gain_matches_independent_two_loss_recomputation() {
        let obs = obs_of(6, 24);
        let mut aap = AapModel::new(16, 9);
        randomize(&mut aap.params, "aap.critic.2.w", 2);
        let mut cache = FeatureCache::new();
        let sequence: Vec<InteractionRecord> =
            (0..3).map(|i| record(&obs, i * 7 + 1, 0.05 * i as f64, 80 + i as u64)).collect();
        let eval_batch: Vec<InteractionRecord> =
            (0..6).map(|i| record(&obs, i * 2, 0.03 * i as f64, 90 + i as u64)).collect();
        let got = gt_aip_score(&aap, &mut cache, &eval_batch, &sequence, 2);

        // Second implementation: aggregate by hand, loss by scalar loop.
        let feats = aap.features(&mut cache, &obs).clone();
        let hand_z = |prefix: &[InteractionRecord]| -> Tensor {
            let contribs: Vec<Contribution> = prefix
                .iter()
                .enumerate()
                .map(|(i, r)| aap.encode_with_features(&feats, r, i))
                .collect();
            aggregate(&contribs, crate::aap::LATENT_DIM).z
        };
        let hand_loss = |z: &Tensor| -> f64 {
            let mut total = 0.0;
            for r in &eval_batch {
                let s =
                    aap.critic_scores(&feats, &r.obs.camera, r.point, &[r.orientation], z)[0];
                total += bce(s, r.label());
            }
            total / eval_batch.len() as f64
        };
        let want = hand_loss(&hand_z(&sequence[..1])) - hand_loss(&hand_z(&sequence[..2]));
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn proposal_breaks_ties_toward_lowest_indices() {
        // Fresh models: the gain map is constant zero, scores all equal.
        let obs = obs_of(7, 24);
        let aap = AapModel::new(16, 10);
        let aip = AipModel::new(16, 11);
        let (mut ca, mut ci) = (FeatureCache::new(), FeatureCache::new());
        let z = LatentInfo::empty(crate::aap::LATENT_DIM).z;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = propose_next(&aap, &aip, &mut ca, &mut ci, &obs, &z, TaskKind::Push, &mut rng)
            .unwrap();
        assert_eq!(p.point, 0, "constant map must select index 0");
        let mut rng2 = ChaCha8Rng::seed_from_u64(12);
        let orients = propose_actions(&obs, 0, crate::prior::CANDIDATE_ORIENTATIONS, &mut rng2);
        assert_eq!(p.action.orientation.as_floats(), orients[0].as_floats());
        assert_eq!(p.action.point, obs.points_world[0]);
    }

    #[test]
    fn proposal_maximizes_the_gain_score() {
        let obs = obs_of(8, 24);
        let mut aap = AapModel::new(16, 13);
        randomize(&mut aap.params, "aap.critic.2.w", 3);
        randomize(&mut aap.params, "aap.aff.2.w", 4);
        let mut aip = AipModel::new(16, 14);
        randomize(&mut aip.params, "aip.critic.2.w", 5);
        randomize(&mut aip.params, "aip.aff.2.w", 6);
        let (mut ca, mut ci) = (FeatureCache::new(), FeatureCache::new());
        let z = LatentInfo::empty(crate::aap::LATENT_DIM).z;
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let p = propose_next(&aap, &aip, &mut ca, &mut ci, &obs, &z, TaskKind::Pull, &mut rng)
            .unwrap();

        assert_eq!(p.point, argmax_lowest(&p.gain_map));
        let mut rng2 = ChaCha8Rng::seed_from_u64(20);
        let orients =
            propose_actions(&obs, p.point, crate::prior::CANDIDATE_ORIENTATIONS, &mut rng2);
        let aap_feats = aap.features(&mut ca, &obs).clone();
        let aip_feats = aip.features(&mut ci, &obs).clone();
        let s_aap = aap.critic_scores(&aap_feats, &obs.camera, p.point, &orients, &z);
        let s_aip = aip.critic_scores(&aip_feats, &obs.camera, p.point, &orients, &z, &s_aap);
        for s in &s_aip {
            assert!(p.s_aip >= *s);
        }
    }

    #[test]
    fn stop_rule_examples() {
        assert!(should_stop(&[0.9, 0.8], 0, 0, STOP_THRESHOLD), "zero budget stops at once");
        assert!(should_stop(&[0.04, 0.01], 0, 4, STOP_THRESHOLD), "gain below threshold stops");
        assert!(!should_stop(&[0.5], 1, 4, STOP_THRESHOLD));
        assert!(should_stop(&[0.5], 4, 4, STOP_THRESHOLD), "budget spent stops");
    }

    #[test]
    fn stop_rule_is_monotone_in_steps_and_antitone_in_threshold() {
        let map = [0.2, 0.1];
        for steps in 0..5 {
            if should_stop(&map, steps, 3, STOP_THRESHOLD) {
                assert!(should_stop(&map, steps + 1, 3, STOP_THRESHOLD));
            }
        }
        for t in [0.01, 0.1, 0.21, 0.5] {
            if should_stop(&map, 0, 3, t) {
                assert!(should_stop(&map, 0, 3, t + 0.1));
            }
        }
    }

    #[test]
    fn point_choice_ignores_positive_scaling_of_the_gain_map() {
        let map = vec![0.1, 0.7, 0.7, 0.3];
        let scaled: Vec<f64> = map.iter().map(|v| v * 3.5).collect();
        assert_eq!(argmax_lowest(&map), 1, "tie resolves low");
        assert_eq!(argmax_lowest(&map), argmax_lowest(&scaled));
    }

    #[test]
    fn affordance_target_matches_sort_oracle() {
        let obs = obs_of(9, 24);
        let mut aap = AapModel::new(16, 15);
        randomize(&mut aap.params, "aap.critic.2.w", 7);
        let mut aip = AipModel::new(16, 16);
        randomize(&mut aip.params, "aip.critic.2.w", 8);
        let (mut ca, mut ci) = (FeatureCache::new(), FeatureCache::new());
        let aap_feats = aap.features(&mut ca, &obs).clone();
        let aip_feats = aip.features(&mut ci, &obs).clone();
        let z = LatentInfo::empty(crate::aap::LATENT_DIM).z;
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let t = aip.affordance_target(&aap, &aip_feats, &aap_feats, &obs, 5, &z, &mut rng);

        let mut rng2 = ChaCha8Rng::seed_from_u64(30);
        let orients =
            propose_actions(&obs, 5, crate::prior::CANDIDATE_ORIENTATIONS, &mut rng2);
        let s_aap = aap.critic_scores(&aap_feats, &obs.camera, 5, &orients, &z);
        let mut scores = aip.critic_scores(&aip_feats, &obs.camera, 5, &orients, &z, &s_aap);
        scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let want = scores[..crate::prior::TOP_K].iter().sum::<f64>() / crate::prior::TOP_K as f64;
        assert!((t - want).abs() < 1e-12);
    }
}
