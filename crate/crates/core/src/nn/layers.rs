//! Named parameter storage and the small set of network building blocks:
//! linear layers, ReLU MLPs, and the shared-MLP point encoder.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::graph::{Graph, NodeId};
use crate::nn::tensor::Tensor;

/// Named parameter blocks, ordered by name so iteration, checkpointing, and
/// optimizer updates are deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.map.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Moves every block of `other` into `self`. Names must not collide.
    pub fn absorb(&mut self, other: ParamStore) {
        for (name, t) in other.map {
            assert!(!self.map.contains_key(&name), "duplicate parameter `{name}`");
            self.map.insert(name, t);
        }
    }

    /// Splits off every block whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let map = self
            .map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { map }
    }
}

/// Fan-in scaled uniform init for a weight matrix.
fn init_weight(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / rows as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("init shape")
}

/// One affine layer. Parameters live in the store as `{name}.w` (in x out)
/// and `{name}.b` (1 x out).
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self { name: name.into(), in_dim, out_dim }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        store.insert(&format!("{}.w", self.name), init_weight(self.in_dim, self.out_dim, rng));
        store.insert(&format!("{}.b", self.name), Tensor::zeros(1, self.out_dim));
    }

    /// Zero-initialized variant; with a logistic output this scores 0.5.
    pub fn init_zero(&self, store: &mut ParamStore) {
        store.insert(&format!("{}.w", self.name), Tensor::zeros(self.in_dim, self.out_dim));
        store.insert(&format!("{}.b", self.name), Tensor::zeros(1, self.out_dim));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, &format!("{}.w", self.name));
        let b = g.param(store, &format!("{}.b", self.name));
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

/// Output activation of an MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    /// Raw affine output.
    None,
    Relu,
    /// Squash into (0, 1).
    Logistic,
}

/// Fully connected stack with ReLU between hidden layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub out_act: Act,
}

impl Mlp {
    /// `dims` lists input, hidden, and output widths, e.g. [384, 128, 128, 1].
    pub fn new(name: &str, dims: &[usize], out_act: Act) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers, out_act }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    /// Random hidden layers, zero-initialized output layer. A fresh head
    /// starts at its activation's fixed point: 0.5 for logistic, 0 for raw.
    pub fn init_head(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for (i, l) in self.layers.iter().enumerate() {
            if i + 1 < self.layers.len() {
                l.init(store, rng);
            } else {
                l.init_zero(store);
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, store, h);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        match self.out_act {
            Act::None => h,
            Act::Relu => g.relu(h),
            Act::Logistic => g.logistic(h),
        }
    }
}

/// Per-point features of a cloud together with their pooled context.
#[derive(Clone, Debug)]
pub struct PointFeatures {
    /// N x d, one row per cloud point, rows ordered like the cloud.
    pub per_point: Tensor,
    /// 1 x d, the element-wise max over `per_point` rows.
    pub pooled: Tensor,
}

/// Shared-MLP cloud encoder: each point runs 3 -> d/2 -> d, the row-max
/// context is concatenated back onto every point, and a final linear
/// layer projects to d per point. The projection is unrectified so no
/// point can collapse to an all-zero row and lose its identity.
/// Permutation of input points permutes the per-point rows identically
/// and leaves the pooled vector unchanged.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    pre0: Linear,
    pre1: Linear,
    post: Linear,
    pub feat_dim: usize,
}

impl PointEncoder {
    pub fn new(name: &str, feat_dim: usize) -> Self {
        assert!(feat_dim >= 2 && feat_dim % 2 == 0, "feature width must be even");
        Self {
            pre0: Linear::new(format!("{name}.pre0"), 3, feat_dim / 2),
            pre1: Linear::new(format!("{name}.pre1"), feat_dim / 2, feat_dim),
            post: Linear::new(format!("{name}.post"), 2 * feat_dim, feat_dim),
            feat_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.pre0.init(store, rng);
        self.pre1.init(store, rng);
        self.post.init(store, rng);
    }

    /// Returns (per-point N x d node, pooled 1 x d node).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cloud: NodeId) -> (NodeId, NodeId) {
        let n = g.value(cloud).rows();
        let h = self.pre0.forward(g, store, cloud);
        let h = g.relu(h);
        let h = self.pre1.forward(g, store, h);
        let h = g.relu(h);
        let ctx = g.rows_max(h);
        let ctx = g.broadcast_rows(ctx, n);
        let cat = g.concat_cols(&[h, ctx]);
        let pp = self.post.forward(g, store, cat);
        let pooled = g.rows_max(pp);
        (pp, pooled)
    }

    /// Forward pass returning plain values, for inference call sites.
    pub fn encode(&self, store: &ParamStore, cloud: &Tensor) -> PointFeatures {
        let mut g = Graph::new();
        let c = g.input(cloud.clone());
        let (pp, pooled) = self.forward(&mut g, store, c);
        PointFeatures { per_point: g.value(pp).clone(), pooled: g.value(pooled).clone() }
    }
}
