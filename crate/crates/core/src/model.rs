//! The full differentiable detector: location head, query initialisation,
//! decoder and heads, sharing one parameter store.

use std::collections::BTreeMap;

use nalgebra::Point3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::decoder::{decode_predictions, decoder_graph, heads_graph, CrossAttention, DecoderConfig, DecoderParams, HeadNodes, KeySet, Prediction3D};
use crate::error::{Error, Result};
use crate::geometry::{EquivalentIntrinsics, Extrinsics};
use crate::matching_loss::{detection_loss_graph, total_loss, LossBreakdown, LossWeights};
use crate::params::{apply_linear, Bound, ParamStore};
use crate::query_gen::{
    homogeneous_graph, lift_graph, location_head_graph, positional_encode_graph, LocationHeadParams, ObjectQuery,
    QueryInitParams, QuerySource, RoIFeature,
};
use crate::simulator::Box3D;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub roi_size: usize,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.decoder.channels
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if self.roi_size < 2 {
            return Err(Error::Config("RoI size must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

/// Initial depth guess of the location head, in metres.
const INITIAL_DEPTH: f64 = 20.0;

impl Model {
    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels();
        let mut store = LocationHeadParams::init(c, rng).store;
        // start at the RoI centre at a mid-range depth
        let half = cfg.roi_size as f64 / 2.0;
        store.insert("loc.fc2.b", Tensor::row_vector(vec![half, half, INITIAL_DEPTH.ln()]));
        store.extend(QueryInitParams::init(c, rng).store);
        store.extend(DecoderParams::init(cfg.decoder.clone(), rng)?.store);
        Ok(Model { cfg, store })
    }

    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels();
        LocationHeadParams::from_store(c, &store)?;
        QueryInitParams::from_store(c, &store)?;
        DecoderParams::from_store(cfg.decoder.clone(), &store)?;
        Ok(Model { cfg, store })
    }

    pub fn location_head(&self) -> Result<LocationHeadParams> {
        LocationHeadParams::from_store(self.cfg.channels(), &self.store)
    }

    pub fn decoder(&self) -> Result<DecoderParams> {
        DecoderParams::from_store(self.cfg.decoder.clone(), &self.store)
    }
}

/// How a query obtains its reference point.
#[derive(Clone, Debug, PartialEq)]
pub enum Reference {
    /// Predicted by the location head from RoI features.
    Learned {
        roi: RoIFeature,
        k_roi: EquivalentIntrinsics,
        extrinsics: Extrinsics,
    },
    /// Supplied from outside (oracle, fixed grid, depth heuristics).
    Fixed(Point3<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryInput {
    pub source: QuerySource,
    pub reference: Reference,
    pub keyset: KeySet,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    /// `n × 3`
    pub p_refs: NodeId,
    /// `n × C` initial query embeddings.
    pub queries: NodeId,
    /// `n × C` decoder output.
    pub embeddings: NodeId,
    pub heads: HeadNodes,
}

/// Reference points (`n × 3`) and initial query embeddings (`n × C`).
pub fn lift_queries_graph(g: &mut Graph, bound: &Bound, cfg: &ModelConfig, refs: &[&Reference]) -> (NodeId, NodeId) {
    let rows: Vec<NodeId> = refs
        .iter()
        .map(|r| match r {
            Reference::Learned { roi, k_roi, extrinsics } => {
                let out = location_head_graph(g, bound, roi, k_roi);
                let h = homogeneous_graph(g, out);
                lift_graph(g, h, k_roi, extrinsics)
            }
            Reference::Fixed(p) => g.leaf(Tensor::row_vector(vec![p.x, p.y, p.z])),
        })
        .collect();
    let p_refs = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
    let pe = positional_encode_graph(g, p_refs, cfg.channels());
    let queries = apply_linear(g, bound, "query", pe);
    (p_refs, queries)
}

fn object_queries(g: &Graph, p_refs: NodeId, queries: NodeId, sources: &[QuerySource]) -> Result<Vec<ObjectQuery>> {
    let (p, q) = (g.value(p_refs), g.value(queries));
    if !p.is_finite() || !q.is_finite() {
        return Err(Error::Numeric("reference points".into()));
    }
    Ok(sources
        .iter()
        .enumerate()
        .map(|(i, source)| ObjectQuery {
            embedding: q.row(i).to_vec(),
            p_ref: [p.at(i, 0), p.at(i, 1), p.at(i, 2)],
            source: *source,
        })
        .collect())
}

/// Queries without running the decoder.
pub fn lift_queries(model: &Model, sources: &[QuerySource], refs: &[Reference]) -> Result<Vec<ObjectQuery>> {
    if sources.len() != refs.len() {
        return Err(Error::Shape("sources and references differ in length".into()));
    }
    if refs.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g);
    let refs: Vec<&Reference> = refs.iter().collect();
    let (p, q) = lift_queries_graph(&mut g, &bound, &model.cfg, &refs);
    object_queries(&g, p, q, sources)
}

pub fn forward_graph(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    inputs: &[QueryInput],
    mode: CrossAttention,
) -> Result<ForwardNodes> {
    if inputs.is_empty() {
        return Err(Error::Config("no queries to decode".into()));
    }
    let refs: Vec<&Reference> = inputs.iter().map(|q| &q.reference).collect();
    let (p_refs, queries) = lift_queries_graph(g, bound, cfg, &refs);
    let keysets: Vec<KeySet> = inputs.iter().map(|q| q.keyset.clone()).collect();
    let embeddings = decoder_graph(g, bound, &cfg.decoder, queries, &keysets, mode)?;
    let heads = heads_graph(g, bound, embeddings, p_refs);
    Ok(ForwardNodes {
        p_refs,
        queries,
        embeddings,
        heads,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub queries: Vec<ObjectQuery>,
    pub predictions: Vec<Prediction3D>,
}

pub fn forward(model: &Model, inputs: &[QueryInput]) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g);
    let nodes = forward_graph(&mut g, &bound, &model.cfg, inputs, CrossAttention::BlockMask)?;
    let sources: Vec<QuerySource> = inputs.iter().map(|q| q.source).collect();
    let queries = object_queries(&g, nodes.p_refs, nodes.queries, &sources)?;
    let predictions = decode_predictions(g.value(nodes.heads.logits), g.value(nodes.heads.regression))?;
    Ok(ForwardOutput { queries, predictions })
}

/// Loss evaluation and parameter gradients of `L = L_2d + λ_3d · L_3d` with
/// `L_2d = 0`.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub breakdown: LossBreakdown,
    pub total: f64,
    pub grads: BTreeMap<String, Tensor>,
}

pub fn loss_and_grads(model: &Model, inputs: &[QueryInput], gts: &[Box3D], weights: &LossWeights) -> Result<LossEval> {
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g);
    let nodes = forward_graph(&mut g, &bound, &model.cfg, inputs, CrossAttention::BlockMask)?;
    let (l3d, breakdown) = detection_loss_graph(&mut g, nodes.heads.logits, nodes.heads.regression, gts, weights)?;
    let root = g.scale(l3d, weights.lambda_3d);
    let total = total_loss(0.0, breakdown.l_3d, weights.lambda_3d);
    if !total.is_finite() {
        return Err(Error::Numeric("training loss".into()));
    }
    let grads = g.backward(root).by_name(&g, bound.ids());
    Ok(LossEval { breakdown, total, grads })
}
