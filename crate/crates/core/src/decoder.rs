//! Transformer decoder with sparse cross-attention and the 3D box heads.
//!
//! Each layer runs joint self-attention over every query, then
//! cross-attention in which a query only sees the keys gathered from its own
//! relevant regions, then a feed-forward block. Sublayers are wrapped in a
//! residual connection followed by layer normalisation.
//!
//! All the queries' key sets are stacked into one key matrix and a
//! block-diagonal mask restricts each query to its own block.
//! [`CrossAttention::PerQuery`] computes the same thing one query at a time
//! over the physically gathered keys.

use nalgebra::Point3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::association::KeyIndex;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::geometry::{unproject_2_5d, CameraView, Point2_5D};
use crate::params::{apply_linear, init_linear, Bound, ParamStore};
use crate::query_gen::{normalize_position, sinusoid_code, FeatureMap};
use crate::tensor::Tensor;

/// Regression layout: `Δx Δy Δz, log w, log l, log h, sin θ, cos θ, v_x, v_y`.
pub const REG_DIMS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
}

impl DecoderConfig {
    pub fn new(channels: usize, layers: usize, heads: usize, num_classes: usize) -> Self {
        DecoderConfig {
            channels,
            layers,
            heads,
            ffn_dim: 4 * channels,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} must be a positive multiple of the head count {}",
                self.channels, self.heads
            )));
        }
        if self.ffn_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("FFN width and class count must be positive".into()));
        }
        Ok(())
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig::new(64, 6, 4, crate::simulator::NUM_CLASSES)
    }
}

/// Key position-embedding MLP, decoder layers and prediction heads.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub cfg: DecoderConfig,
    pub store: ParamStore,
}

const ATTN_PROJ: [&str; 4] = ["q", "k", "v", "o"];

impl DecoderParams {
    fn shapes(cfg: &DecoderConfig) -> Vec<(String, Vec<usize>)> {
        let c = cfg.channels;
        let mut s = Vec::new();
        let mut lin = |p: String, i: usize, o: usize| {
            s.push((format!("{p}.w"), vec![i, o]));
            s.push((format!("{p}.b"), vec![1, o]));
        };
        lin("keype.fc1".into(), c, c);
        lin("keype.fc2".into(), c, c);
        for l in 0..cfg.layers {
            for block in ["self", "cross"] {
                for p in ATTN_PROJ {
                    lin(format!("dec.{l}.{block}.{p}"), c, c);
                }
            }
            lin(format!("dec.{l}.ffn.fc1"), c, cfg.ffn_dim);
            lin(format!("dec.{l}.ffn.fc2"), cfg.ffn_dim, c);
        }
        lin("head.cls.fc1".into(), c, c);
        lin("head.cls.fc2".into(), c, cfg.num_classes);
        lin("head.reg.fc1".into(), c, c);
        lin("head.reg.fc2".into(), c, REG_DIMS);
        for l in 0..cfg.layers {
            for n in 1..=3 {
                s.push((format!("dec.{l}.ln{n}.g"), vec![1, c]));
                s.push((format!("dec.{l}.ln{n}.b"), vec![1, c]));
            }
        }
        s
    }

    pub fn init(cfg: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        for (name, shape) in Self::shapes(&cfg) {
            if let Some(prefix) = name.strip_suffix(".w") {
                init_linear(&mut store, prefix, shape[0], shape[1], rng);
            } else if name.ends_with(".g") {
                store.insert(name, Tensor::filled(&shape, 1.0));
            } else if !store.contains(&name) {
                store.insert(name, Tensor::zeros(&shape));
            }
        }
        // a negative class prior keeps the initial focal loss dominated by positives
        let prior = -(0.99f64 / 0.01).ln();
        store.insert(
            "head.cls.fc2.b",
            Tensor::filled(&[1, cfg.num_classes], prior),
        );
        Ok(DecoderParams { cfg, store })
    }

    pub fn from_store(cfg: DecoderConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut sub = store.subset("dec.");
        sub.extend(store.subset("keype."));
        sub.extend(store.subset("head."));
        for (name, shape) in Self::shapes(&cfg) {
            sub.expect_shape(&name, &shape)?;
        }
        Ok(DecoderParams { cfg, store: sub })
    }

    pub fn zero_heads(&mut self) {
        for name in ["head.cls.fc1", "head.cls.fc2", "head.reg.fc1", "head.reg.fc2"] {
            for suffix in ["w", "b"] {
                let key = format!("{name}.{suffix}");
                if let Some(t) = self.store.get_mut(&key) {
                    t.data.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
}

/// Sinusoidal 3D code of one feature cell: its pixel-centre ray sampled at
/// every depth, each world point encoded, then averaged over depth.
pub fn key_position_code(view: &CameraView, cell: &KeyIndex, stride: usize, depth_values: &[f64], channels: usize) -> Result<Vec<f64>> {
    let s = stride as f64;
    let (u, v) = (cell.col as f64 * s + s / 2.0, cell.row as f64 * s + s / 2.0);
    let mut code = vec![0.0; channels];
    for &d in depth_values {
        let p = unproject_2_5d(&Point2_5D { u, v, d }, &view.intrinsics, &view.extrinsics)?;
        for (acc, x) in code.iter_mut().zip(sinusoid_code(normalize_position(&p), channels)) {
            *acc += x;
        }
    }
    let n = depth_values.len().max(1) as f64;
    code.iter_mut().for_each(|x| *x /= n);
    Ok(code)
}

/// Per-query keys: cell features and their position codes.
#[derive(Clone, Debug, PartialEq)]
pub struct KeySet {
    pub query_id: usize,
    /// `n_k × C`
    pub features: Tensor,
    /// `n_k × C` sinusoidal codes, embedded by the key-PE MLP inside the decoder.
    pub position_codes: Tensor,
    pub origins: Vec<KeyIndex>,
}

impl KeySet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Gathers features and codes for `indices` from the per-view maps.
    pub fn gather(
        query_id: usize,
        indices: &[KeyIndex],
        views: &[CameraView],
        feature_maps: &[FeatureMap],
        depth_values: &[f64],
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config(format!("query {query_id} has no keys")));
        }
        let c = feature_maps
            .first()
            .map(FeatureMap::channels)
            .ok_or_else(|| Error::Config("no feature maps".into()))?;
        let mut features = Vec::with_capacity(indices.len() * c);
        let mut codes = Vec::with_capacity(indices.len() * c);
        for idx in indices {
            let fm = feature_maps
                .iter()
                .find(|f| f.view_id == idx.view_id)
                .ok_or_else(|| Error::Config(format!("no feature map for view {}", idx.view_id)))?;
            let view = views
                .iter()
                .find(|v| v.view_id == idx.view_id)
                .ok_or_else(|| Error::Config(format!("no camera for view {}", idx.view_id)))?;
            if idx.row >= fm.height() || idx.col >= fm.width() {
                return Err(Error::Shape(format!("key {idx:?} outside feature map")));
            }
            features.extend_from_slice(fm.cell(idx.row, idx.col));
            codes.extend(key_position_code(view, idx, fm.stride, depth_values, c)?);
        }
        let n = indices.len();
        Ok(KeySet {
            query_id,
            features: Tensor::matrix(n, c, features),
            position_codes: Tensor::matrix(n, c, codes),
            origins: indices.to_vec(),
        })
    }
}

/// Two-layer perceptron over key position codes.
pub fn key_position_embedding_graph(g: &mut Graph, bound: &Bound, codes: NodeId) -> NodeId {
    let h = apply_linear(g, bound, "keype.fc1", codes);
    let h = g.relu(h);
    apply_linear(g, bound, "keype.fc2", h)
}

pub fn key_position_embedding(codes: &Tensor, params: &DecoderParams) -> Tensor {
    let mut g = Graph::new();
    let bound = params.store.bind(&mut g);
    let c = g.leaf(codes.clone());
    let out = key_position_embedding_graph(&mut g, &bound, c);
    g.value(out).clone()
}

/// Scaled dot-product attention split over `heads` column groups, heads
/// concatenated. `mask[i*n_k + j]` allows query `i` to see key `j`.
/// Returns the output node and each head's attention-weight node.
pub fn attention_core(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: &[bool],
    heads: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let c = g.value(q).cols();
    if g.value(k).cols() != c || g.value(v).cols() != c || g.value(k).rows() != g.value(v).rows() {
        return Err(Error::Shape("attention Q/K/V widths or key counts differ".into()));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("width {c} not divisible by {heads} heads")));
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, scale);
        let attn = g.masked_softmax(scores, mask.to_vec())?;
        weights.push(attn);
        outs.push(g.matmul(attn, vh));
    }
    let out = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
    Ok((out, weights))
}

/// Output of [`masked_attention`].
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `n_q × C`, heads concatenated (before any output projection).
    pub output: Tensor,
    /// Per head, `n_q × n_k` rows of attention weights.
    pub weights: Vec<Tensor>,
}

/// Plain masked multi-head attention on already-projected `Q`, `K`, `V`.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &[bool], heads: usize) -> Result<AttentionOutput> {
    if mask.len() != q.rows() * k.rows() {
        return Err(Error::Shape(format!(
            "mask has {} entries, expected {}",
            mask.len(),
            q.rows() * k.rows()
        )));
    }
    let mut g = Graph::new();
    let (qn, kn, vn) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
    let (out, weights) = attention_core(&mut g, qn, kn, vn, mask, heads)?;
    Ok(AttentionOutput {
        output: g.value(out).clone(),
        weights: weights.into_iter().map(|w| g.value(w).clone()).collect(),
    })
}

/// Projected multi-head attention using `{prefix}.{q,k,v,o}` weights.
fn projected_attention(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    queries: NodeId,
    keys: NodeId,
    values: NodeId,
    mask: &[bool],
    heads: usize,
) -> Result<NodeId> {
    let q = apply_linear(g, bound, &format!("{prefix}.q"), queries);
    let k = apply_linear(g, bound, &format!("{prefix}.k"), keys);
    let v = apply_linear(g, bound, &format!("{prefix}.v"), values);
    let (out, _) = attention_core(g, q, k, v, mask, heads)?;
    Ok(apply_linear(g, bound, &format!("{prefix}.o"), out))
}

/// How sparse cross-attention is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CrossAttention {
    /// All key sets stacked, block-diagonal mask.
    #[default]
    BlockMask,
    /// One attention call per query over its own gathered keys.
    PerQuery,
}

/// Decoder on the tape. `queries` is `n_q × C`; returns updated embeddings.
pub fn decoder_graph(
    g: &mut Graph,
    bound: &Bound,
    cfg: &DecoderConfig,
    queries: NodeId,
    keysets: &[KeySet],
    mode: CrossAttention,
) -> Result<NodeId> {
    let n_q = g.value(queries).rows();
    let c = cfg.channels;
    if n_q == 0 {
        return Err(Error::Config("decoder needs at least one query".into()));
    }
    if keysets.len() != n_q {
        return Err(Error::Shape(format!("{} key sets for {n_q} queries", keysets.len())));
    }
    if g.value(queries).cols() != c {
        return Err(Error::Shape(format!("queries have width {}, model width is {c}", g.value(queries).cols())));
    }
    for (i, ks) in keysets.iter().enumerate() {
        if ks.is_empty() {
            return Err(Error::AllMasked { row: i });
        }
        if ks.features.cols() != c || ks.position_codes.cols() != c {
            return Err(Error::Shape(format!("key set {i} width differs from model width {c}")));
        }
    }

    // stacked keys: values are raw features, keys carry the position embedding
    let total: usize = keysets.iter().map(KeySet::len).sum();
    let mut feat = Vec::with_capacity(total * c);
    let mut codes = Vec::with_capacity(total * c);
    for ks in keysets {
        feat.extend_from_slice(&ks.features.data);
        codes.extend_from_slice(&ks.position_codes.data);
    }
    let values = g.leaf(Tensor::matrix(total, c, feat));
    let codes = g.leaf(Tensor::matrix(total, c, codes));
    let pos = key_position_embedding_graph(g, bound, codes);
    let keys = g.add(values, pos);

    let mut block_mask = vec![false; n_q * total];
    let mut spans = Vec::with_capacity(n_q);
    let mut offset = 0;
    for (i, ks) in keysets.iter().enumerate() {
        block_mask[i * total + offset..i * total + offset + ks.len()].fill(true);
        spans.push((offset, offset + ks.len()));
        offset += ks.len();
    }
    let self_mask = vec![true; n_q * n_q];

    let mut x = queries;
    for l in 0..cfg.layers {
        let sa = projected_attention(g, bound, &format!("dec.{l}.self"), x, x, x, &self_mask, cfg.heads)?;
        let r = g.add(x, sa);
        x = g.layer_norm(r, bound.id(&format!("dec.{l}.ln1.g")), bound.id(&format!("dec.{l}.ln1.b")));

        let prefix = format!("dec.{l}.cross");
        let ca = match mode {
            CrossAttention::BlockMask => {
                projected_attention(g, bound, &prefix, x, keys, values, &block_mask, cfg.heads)?
            }
            CrossAttention::PerQuery => {
                let mut rows = Vec::with_capacity(n_q);
                for (i, &(s, e)) in spans.iter().enumerate() {
                    let qi = g.slice_rows(x, i, i + 1);
                    let ki = g.slice_rows(keys, s, e);
                    let vi = g.slice_rows(values, s, e);
                    let mask = vec![true; e - s];
                    rows.push(projected_attention(g, bound, &prefix, qi, ki, vi, &mask, cfg.heads)?);
                }
                g.concat_rows(&rows)
            }
        };
        let r = g.add(x, ca);
        x = g.layer_norm(r, bound.id(&format!("dec.{l}.ln2.g")), bound.id(&format!("dec.{l}.ln2.b")));

        let h = apply_linear(g, bound, &format!("dec.{l}.ffn.fc1"), x);
        let h = g.relu(h);
        let f = apply_linear(g, bound, &format!("dec.{l}.ffn.fc2"), h);
        let r = g.add(x, f);
        x = g.layer_norm(r, bound.id(&format!("dec.{l}.ln3.g")), bound.id(&format!("dec.{l}.ln3.b")));
    }
    Ok(x)
}

pub fn decoder_forward(queries: &Tensor, keysets: &[KeySet], params: &DecoderParams, mode: CrossAttention) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.store.bind(&mut g);
    let q = g.leaf(queries.clone());
    let out = decoder_graph(&mut g, &bound, &params.cfg, q, keysets, mode)?;
    Ok(g.value(out).clone())
}

/// Head outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    /// `n × K` raw class logits.
    pub logits: NodeId,
    /// `n × 10` regression with the centre already absolute
    /// (`p_ref + Δ`), the rest raw.
    pub regression: NodeId,
}

pub fn heads_graph(g: &mut Graph, bound: &Bound, embeddings: NodeId, p_refs: NodeId) -> HeadNodes {
    let h = apply_linear(g, bound, "head.cls.fc1", embeddings);
    let h = g.relu(h);
    let logits = apply_linear(g, bound, "head.cls.fc2", h);
    let h = apply_linear(g, bound, "head.reg.fc1", embeddings);
    let h = g.relu(h);
    let raw = apply_linear(g, bound, "head.reg.fc2", h);
    let offset = g.slice_cols(raw, 0, 3);
    let rest = g.slice_cols(raw, 3, REG_DIMS);
    let center = g.add(offset, p_refs);
    let regression = g.concat_cols(&[center, rest]);
    HeadNodes { logits, regression }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction3D {
    pub query_id: usize,
    pub logits: Vec<f64>,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    /// Raw regression row: absolute centre, log sizes, sin, cos, velocity.
    pub regression: Vec<f64>,
}

impl Prediction3D {
    /// Highest sigmoid class probability and its class.
    pub fn best_class(&self) -> (usize, f64) {
        self.logits
            .iter()
            .enumerate()
            .map(|(i, &l)| (i, crate::autodiff::sigmoid(l)))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
    }

    pub fn center_point(&self) -> Point3<f64> {
        Point3::from(self.center)
    }
}

/// Decodes head outputs into boxes.
pub fn decode_predictions(logits: &Tensor, regression: &Tensor) -> Result<Vec<Prediction3D>> {
    if !logits.is_finite() || !regression.is_finite() {
        return Err(Error::Numeric("prediction heads".into()));
    }
    (0..logits.rows())
        .map(|i| {
            let r = regression.row(i);
            let (s, c) = (r[6], r[7]);
            let norm = (s * s + c * c).sqrt();
            let yaw = if norm > 0.0 { (s / norm).atan2(c / norm) } else { 0.0 };
            let size = [r[3].exp(), r[4].exp(), r[5].exp()];
            if size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Numeric("predicted box size".into()));
            }
            Ok(Prediction3D {
                query_id: i,
                logits: logits.row(i).to_vec(),
                center: [r[0], r[1], r[2]],
                size,
                yaw,
                velocity: [r[8], r[9]],
                regression: r.to_vec(),
            })
        })
        .collect()
}

pub fn predict_boxes(embeddings: &Tensor, p_refs: &[Point3<f64>], params: &DecoderParams) -> Result<Vec<Prediction3D>> {
    if embeddings.rows() != p_refs.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} reference points",
            embeddings.rows(),
            p_refs.len()
        )));
    }
    let mut g = Graph::new();
    let bound = params.store.bind(&mut g);
    let e = g.leaf(embeddings.clone());
    let p = g.leaf(Tensor::matrix(
        p_refs.len(),
        3,
        p_refs.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
    ));
    let heads = heads_graph(&mut g, &bound, e, p);
    decode_predictions(g.value(heads.logits), g.value(heads.regression))
}
