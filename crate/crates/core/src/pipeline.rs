//! End-to-end orchestration with JSON artifacts, the toy trainer and the
//! bird's-eye-view plot.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Point3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::association::{gather_key_indices, select_relevant, AssociationConfig, KeyIndexSet, RelevanceRule, RelevantSet, ViewDetections};
use crate::decoder::{DecoderConfig, KeySet, Prediction3D};
use crate::error::{Error, Result};
use crate::geometry::{equivalent_intrinsics, unproject_2_5d, CameraView, Point2_5D};
use crate::matching_loss::{LossBreakdown, LossWeights};
use crate::model::{forward, lift_queries, loss_and_grads, Model, ModelConfig, QueryInput, Reference};
use crate::params::ParamStore;
use crate::query_gen::{linspace, oracle_roi_location, roi_align, scale_based_depth_ref, FeatureMap, ObjectQuery, QuerySource, DEPTH_RANGE};
use crate::simulator::{
    advance_frame, detector_stub, eval_3d_center_distance, eval_projected_2d, generate_scene, render_gt_2d, synth_feature_maps,
    CenterEval, Detection3D, DetectionStubConfig, FeatureSynthConfig, ProjectedEval, Scene, SceneConfig, ViewDetectionRecord,
    CLASS_SIZES, DEFAULT_FRAME_INTERVAL,
};

/// Source of each query's reference point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryGenerator {
    /// Location head on RoI features.
    Learned,
    /// Foot of the ground-truth centre on the box-centre ray.
    Oracle,
    /// Box-centre ray at the middle of the uniform depth range.
    UniformDepth,
    /// Depth from the box height and the class height prior.
    ScaleDepth,
}

impl fmt::Display for QueryGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryGenerator::Learned => "learned",
            QueryGenerator::Oracle => "oracle",
            QueryGenerator::UniformDepth => "uniform_depth",
            QueryGenerator::ScaleDepth => "scale_depth",
        })
    }
}

impl FromStr for QueryGenerator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(QueryGenerator::Learned),
            "oracle" => Ok(QueryGenerator::Oracle),
            "uniform_depth" => Ok(QueryGenerator::UniformDepth),
            "scale_depth" => Ok(QueryGenerator::ScaleDepth),
            other => Err(Error::Config(format!("unknown query generator `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub n_views: usize,
    pub n_objects: usize,
    pub frames: usize,
    pub rule: RelevanceRule,
    pub generator: QueryGenerator,
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub depth_bins: usize,
    pub roi_size: usize,
    pub stride: usize,
    /// All detector noise sources switched off.
    pub noiseless: bool,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub feature_noise: f64,
    pub loss: LossWeights,
    /// Not serialized, so artifacts do not depend on where they are written.
    #[serde(skip, default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            n_views: 6,
            n_objects: 10,
            frames: 1,
            rule: RelevanceRule::Top1,
            generator: QueryGenerator::Learned,
            channels: 64,
            layers: 6,
            heads: 4,
            depth_bins: crate::query_gen::DEFAULT_DEPTH_BINS,
            roi_size: crate::geometry::DEFAULT_ROI,
            stride: crate::query_gen::DEFAULT_STRIDE,
            noiseless: false,
            score_threshold: 0.05,
            nms_iou: 0.6,
            feature_noise: FeatureSynthConfig::default().noise_std,
            loss: LossWeights::default(),
            out_dir: default_out_dir(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.frames) {
            return Err(Error::Config(format!("frames must be 1 or 2, got {}", self.frames)));
        }
        if self.n_views == 0 || self.n_views > 64 {
            return Err(Error::Config(format!("n_views must lie in 1..=64, got {}", self.n_views)));
        }
        if self.n_objects > 1000 {
            return Err(Error::Config(format!("n_objects must be at most 1000, got {}", self.n_objects)));
        }
        if self.depth_bins < 2 {
            return Err(Error::Config("at least 2 depth bins are needed".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if !(self.feature_noise.is_finite() && self.feature_noise >= 0.0) {
            return Err(Error::Config("feature noise must be non-negative".into()));
        }
        self.detector().validate()?;
        self.loss.validate()?;
        self.model().validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            roi_size: self.roi_size,
            decoder: DecoderConfig::new(self.channels, self.layers, self.heads, crate::simulator::NUM_CLASSES),
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        let mut cfg = SceneConfig {
            n_objects: self.n_objects,
            ..Default::default()
        };
        cfg.rig.n_views = self.n_views;
        cfg
    }

    pub fn detector(&self) -> DetectionStubConfig {
        let base = if self.noiseless {
            DetectionStubConfig::noiseless(self.seed)
        } else {
            DetectionStubConfig {
                seed: self.seed,
                ..Default::default()
            }
        };
        DetectionStubConfig {
            score_threshold: self.score_threshold,
            nms_iou: self.nms_iou,
            ..base
        }
    }

    pub fn depth_values(&self) -> Vec<f64> {
        linspace(DEPTH_RANGE.0, DEPTH_RANGE.1, self.depth_bins)
    }

    pub fn association(&self) -> AssociationConfig {
        AssociationConfig {
            roi_w: self.roi_size,
            roi_h: self.roi_size,
            depth_values: self.depth_values(),
            rule: self.rule,
        }
    }
}

pub const SCENE_FILE: &str = "scene.json";
pub const DETECTIONS_FILE: &str = "detections.json";
pub const PARAMS_FILE: &str = "params.json";
pub const QUERIES_FILE: &str = "queries.json";
pub const ASSOCIATIONS_FILE: &str = "associations.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.json";

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn simulate(cfg: &PipelineConfig) -> Result<Scene> {
    let scene = generate_scene(cfg.seed, &cfg.scene_config())?;
    Ok(if cfg.frames == 2 {
        advance_frame(&scene, DEFAULT_FRAME_INTERVAL)
    } else {
        scene
    })
}

pub fn detect(cfg: &PipelineConfig, scene: &Scene) -> Result<Vec<ViewDetectionRecord>> {
    let det = cfg.detector();
    scene
        .rig
        .iter()
        .map(|view| {
            let gt = render_gt_2d(scene, view);
            Ok(ViewDetectionRecord {
                view_id: view.view_id,
                timestamp: view.timestamp,
                boxes: detector_stub(&gt, view, &det)?,
            })
        })
        .collect()
}

pub fn features(cfg: &PipelineConfig, scene: &Scene) -> Result<Vec<FeatureMap>> {
    let fcfg = FeatureSynthConfig {
        noise_std: cfg.feature_noise,
        seed: scene.seed,
    };
    scene
        .rig
        .iter()
        .map(|v| synth_feature_maps(scene, v, cfg.channels, cfg.stride, &fcfg))
        .collect()
}

fn view_detections<'a>(scene: &'a Scene, dets: &'a [ViewDetectionRecord]) -> Result<Vec<ViewDetections<'a>>> {
    scene
        .rig
        .iter()
        .map(|view| {
            let rec = dets
                .iter()
                .find(|d| d.view_id == view.view_id)
                .ok_or_else(|| Error::Config(format!("no detections for view {}", view.view_id)))?;
            Ok(ViewDetections {
                view,
                boxes: &rec.boxes,
            })
        })
        .collect()
}

/// Query sources in `(view, box)` order: one query per detection.
pub fn query_sources(scene: &Scene, dets: &[ViewDetectionRecord]) -> Result<Vec<(CameraView, crate::geometry::Box2D)>> {
    let views = view_detections(scene, dets)?;
    Ok(views
        .iter()
        .flat_map(|vd| vd.boxes.iter().map(move |b| (vd.view.clone(), *b)))
        .collect())
}

/// Reference of one detection under a non-learned generator, or the learned
/// head's inputs.
pub fn reference_for(
    cfg: &PipelineConfig,
    scene: &Scene,
    view: &CameraView,
    b: &crate::geometry::Box2D,
    feature_map: &FeatureMap,
    generator: QueryGenerator,
) -> Result<Reference> {
    let roi = cfg.roi_size;
    Ok(match generator {
        QueryGenerator::Learned => Reference::Learned {
            roi: roi_align(feature_map, b, roi, roi)?,
            k_roi: equivalent_intrinsics(&view.intrinsics, b, roi, roi)?,
            extrinsics: view.extrinsics,
        },
        QueryGenerator::Oracle => {
            let objects = scene.objects_at(view.timestamp);
            match b.object_id.and_then(|id| objects.iter().find(|o| o.object_id == id)) {
                Some(o) => {
                    let p = oracle_roi_location(b, roi, roi, view, &o.center_point());
                    let k = equivalent_intrinsics(&view.intrinsics, b, roi, roi)?;
                    Reference::Fixed(unproject_2_5d(&p, &k, &view.extrinsics)?)
                }
                // false positives have no ground truth to consult
                None => Reference::Fixed(scale_based_depth_ref(b, view, CLASS_SIZES[b.class_id][2])?),
            }
        }
        QueryGenerator::UniformDepth => {
            let k = equivalent_intrinsics(&view.intrinsics, b, roi, roi)?;
            let d = (DEPTH_RANGE.0 + DEPTH_RANGE.1) / 2.0;
            let p = Point2_5D {
                u: roi as f64 / 2.0,
                v: roi as f64 / 2.0,
                d,
            };
            Reference::Fixed(unproject_2_5d(&p, &k, &view.extrinsics)?)
        }
        QueryGenerator::ScaleDepth => Reference::Fixed(scale_based_depth_ref(b, view, CLASS_SIZES[b.class_id][2])?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationRecord {
    pub relevant: RelevantSet,
    pub keys: KeyIndexSet,
}

pub fn associate(cfg: &PipelineConfig, scene: &Scene, dets: &[ViewDetectionRecord]) -> Result<Vec<AssociationRecord>> {
    let views = view_detections(scene, dets)?;
    let acfg = cfg.association();
    query_sources(scene, dets)?
        .iter()
        .enumerate()
        .map(|(qid, (view, b))| {
            let relevant = select_relevant(qid, view, b, &views, &acfg)?;
            let keys = gather_key_indices(&relevant, &views, cfg.stride)?;
            Ok(AssociationRecord { relevant, keys })
        })
        .collect()
}

/// One reference per detection, in query order.
pub fn references(cfg: &PipelineConfig, scene: &Scene, dets: &[ViewDetectionRecord], fmaps: &[FeatureMap]) -> Result<Vec<(QuerySource, Reference)>> {
    query_sources(scene, dets)?
        .iter()
        .map(|(view, b)| {
            let fm = fmaps
                .iter()
                .find(|f| f.view_id == view.view_id)
                .ok_or_else(|| Error::Config(format!("no features for view {}", view.view_id)))?;
            let source = QuerySource {
                view_id: view.view_id,
                box_id: b.box_id,
            };
            Ok((source, reference_for(cfg, scene, view, b, fm, cfg.generator)?))
        })
        .collect()
}

/// Reference points and initial embeddings of every query.
pub fn lift(cfg: &PipelineConfig, model: &Model, scene: &Scene, dets: &[ViewDetectionRecord], fmaps: &[FeatureMap]) -> Result<Vec<ObjectQuery>> {
    let (sources, refs): (Vec<_>, Vec<_>) = references(cfg, scene, dets, fmaps)?.into_iter().unzip();
    lift_queries(model, &sources, &refs)
}

/// Everything the model consumes for one scene.
pub fn query_inputs(
    cfg: &PipelineConfig,
    scene: &Scene,
    dets: &[ViewDetectionRecord],
    fmaps: &[FeatureMap],
    associations: &[AssociationRecord],
) -> Result<Vec<QueryInput>> {
    let refs = references(cfg, scene, dets, fmaps)?;
    if refs.len() != associations.len() {
        return Err(Error::Config(format!(
            "{} queries but {} associations",
            refs.len(),
            associations.len()
        )));
    }
    let depths = cfg.depth_values();
    refs.into_iter()
        .zip(associations)
        .enumerate()
        .map(|(qid, ((source, reference), assoc))| {
            Ok(QueryInput {
                source,
                reference,
                keyset: KeySet::gather(qid, &assoc.keys.indices, &scene.rig, fmaps, &depths)?,
            })
        })
        .collect()
}

pub fn init_model(cfg: &PipelineConfig) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x6d6f64656c);
    Model::init(cfg.model(), &mut rng)
}

pub fn load_or_init_model(cfg: &PipelineConfig, weights: Option<&Path>) -> Result<Model> {
    match weights {
        Some(p) => Model::from_store(cfg.model(), ParamStore::load(p)?),
        None => init_model(cfg),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_views: usize,
    pub n_queries: usize,
    pub loss: LossBreakdown,
    pub total_loss: f64,
    pub projected_2d: ProjectedEval,
    pub center_distance: CenterEval,
    /// Mean distance from each reference point to its nearest object centre;
    /// absent without queries or objects.
    pub mean_reference_distance: Option<f64>,
}

pub fn mean_nearest_distance(points: &[Point3<f64>], centers: &[Point3<f64>]) -> Option<f64> {
    if points.is_empty() || centers.is_empty() {
        return None;
    }
    let total: f64 = points
        .iter()
        .map(|p| centers.iter().map(|c| (c - p).norm()).fold(f64::INFINITY, f64::min))
        .sum();
    Some(total / points.len() as f64)
}

pub fn evaluate(cfg: &PipelineConfig, scene: &Scene, queries: &[ObjectQuery], preds: &[Prediction3D]) -> Result<Metrics> {
    let loss = crate::matching_loss::detection_loss(preds, &scene.objects, &cfg.loss)?;
    let dets: Vec<Detection3D> = preds.iter().map(Detection3D::from_prediction).collect();
    let current = scene.current_views();
    let centers: Vec<_> = scene.objects.iter().map(|o| o.center_point()).collect();
    let refs: Vec<_> = queries.iter().map(ObjectQuery::reference_point).collect();
    Ok(Metrics {
        n_views: scene.rig.len(),
        n_queries: queries.len(),
        total_loss: crate::matching_loss::total_loss(0.0, loss.l_3d, cfg.loss.lambda_3d),
        loss,
        projected_2d: eval_projected_2d(&dets, &scene.objects, &current, 0.5),
        center_distance: eval_3d_center_distance(&dets, &scene.objects, 2.0),
        mean_reference_distance: mean_nearest_distance(&refs, &centers),
    })
}

/// In-memory results of every stage.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub scene: Scene,
    pub detections: Vec<ViewDetectionRecord>,
    pub associations: Vec<AssociationRecord>,
    pub queries: Vec<ObjectQuery>,
    pub predictions: Vec<Prediction3D>,
    pub metrics: Metrics,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Runs every stage and writes its artifact into `cfg.out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig, weights: Option<&Path>) -> Result<PipelineRun> {
    stage("config", cfg.validate())?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let out = |f: &str| cfg.out_dir.join(f);
    write_json(&out(CONFIG_FILE), cfg)?;

    let scene = stage("simulate", simulate(cfg))?;
    write_json(&out(SCENE_FILE), &scene)?;
    let detections = stage("detect", detect(cfg, &scene))?;
    write_json(&out(DETECTIONS_FILE), &detections)?;

    let model = stage("model", load_or_init_model(cfg, weights))?;
    model.store.save(&out(PARAMS_FILE))?;
    let fmaps = stage("features", features(cfg, &scene))?;
    let associations = stage("associate", associate(cfg, &scene, &detections))?;
    write_json(&out(ASSOCIATIONS_FILE), &associations)?;

    let (queries, predictions) = if associations.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let inputs = stage("lift", query_inputs(cfg, &scene, &detections, &fmaps, &associations))?;
        let fwd = stage("forward", forward(&model, &inputs))?;
        (fwd.queries, fwd.predictions)
    };
    write_json(&out(QUERIES_FILE), &queries)?;
    write_json(&out(PREDICTIONS_FILE), &predictions)?;

    let metrics = stage("eval", evaluate(cfg, &scene, &queries, &predictions))?;
    write_json(&out(METRICS_FILE), &metrics)?;
    Ok(PipelineRun {
        scene,
        detections,
        associations,
        queries,
        predictions,
        metrics,
    })
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    /// `L_3d` before each step, then after the last one.
    pub trace: Vec<f64>,
    pub model: Model,
}

/// Fixed-step gradient descent on `L = λ_3d · L_3d` over one fixed scene.
pub fn train_toy(cfg: &PipelineConfig, iters: usize, lr: f64, weights: Option<&Path>) -> Result<TrainResult> {
    stage("config", cfg.validate())?;
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let scene = stage("simulate", simulate(cfg))?;
    let dets = stage("detect", detect(cfg, &scene))?;
    let fmaps = stage("features", features(cfg, &scene))?;
    let assoc = stage("associate", associate(cfg, &scene, &dets))?;
    if assoc.is_empty() {
        return Err(Error::Config("training scene has no detections".into()));
    }
    let inputs = stage("lift", query_inputs(cfg, &scene, &dets, &fmaps, &assoc))?;
    let mut model = stage("model", load_or_init_model(cfg, weights))?;
    let mut trace = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let eval = stage("train", loss_and_grads(&model, &inputs, &scene.objects, &cfg.loss))?;
        trace.push(eval.breakdown.l_3d);
        model.store.descend(&eval.grads, lr);
    }
    let last = stage("train", loss_and_grads(&model, &inputs, &scene.objects, &cfg.loss))?;
    trace.push(last.breakdown.l_3d);
    Ok(TrainResult { trace, model })
}

/// Pixels per metre in the BEV plot.
pub const BEV_SCALE: f64 = 2.0;
pub const BEV_MARGIN: f64 = 40.0;
const BEV_EXTENT: f64 = crate::query_gen::SCENE_RANGE;

/// SVG coordinates of a world `(x, y)`: x to the right, y upwards.
pub fn bev_coords(x: f64, y: f64) -> (f64, f64) {
    (BEV_MARGIN + (x + BEV_EXTENT) * BEV_SCALE, BEV_MARGIN + (BEV_EXTENT - y) * BEV_SCALE)
}

/// Top-down plot: ground-truth centres as circles, other points as squares.
pub fn plot_bev(gt_centers: &[[f64; 2]], points: &[[f64; 2]]) -> String {
    use std::fmt::Write;
    let size = 2.0 * BEV_MARGIN + 2.0 * BEV_EXTENT * BEV_SCALE;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(s, r#"<rect width="{size}" height="{size}" fill="white"/>"#);
    let (x0, y0) = bev_coords(-BEV_EXTENT, 0.0);
    let (x1, _) = bev_coords(BEV_EXTENT, 0.0);
    let (cx, top) = bev_coords(0.0, BEV_EXTENT);
    let (_, bottom) = bev_coords(0.0, -BEV_EXTENT);
    let _ = writeln!(s, r#"<g class="axes" stroke="black" stroke-width="1">"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>"#);
    let _ = writeln!(s, r#"<line x1="{cx}" y1="{top}" x2="{cx}" y2="{bottom}"/>"#);
    let mut t = -60;
    while t <= 60 {
        let (tx, ty) = bev_coords(t as f64, 0.0);
        let _ = writeln!(s, r#"<line x1="{tx}" y1="{}" x2="{tx}" y2="{}"/>"#, ty - 3.0, ty + 3.0);
        let (ux, uy) = bev_coords(0.0, t as f64);
        let _ = writeln!(s, r#"<line x1="{}" y1="{uy}" x2="{}" y2="{uy}"/>"#, ux - 3.0, ux + 3.0);
        t += 20;
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="labels" font-family="sans-serif" font-size="9" text-anchor="middle">"#);
    let mut t = -60;
    while t <= 60 {
        let (tx, ty) = bev_coords(t as f64, 0.0);
        let _ = writeln!(s, r#"<text x="{tx}" y="{}">{t}</text>"#, ty + 13.0);
        if t != 0 {
            let (ux, uy) = bev_coords(0.0, t as f64);
            let _ = writeln!(s, r#"<text x="{}" y="{}">{t}</text>"#, ux - 14.0, uy + 3.0);
        }
        t += 20;
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}">x [m]</text>"#, x1 + 15.0, y0 + 3.0);
    let _ = writeln!(s, r#"<text x="{cx}" y="{}">y [m]</text>"#, top - 8.0);
    let _ = writeln!(s, "</g>");
    for p in gt_centers {
        let (x, y) = bev_coords(p[0], p[1]);
        let _ = writeln!(s, r#"<circle class="gt" cx="{x}" cy="{y}" r="3" fill="none" stroke="green"/>"#);
    }
    for p in points {
        let (x, y) = bev_coords(p[0], p[1]);
        let _ = writeln!(
            s,
            r#"<rect class="ref" x="{}" y="{}" width="4" height="4" fill="red"/>"#,
            x - 2.0,
            y - 2.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Run-level summary printed by the CLI.
pub fn summary(run: &PipelineRun) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("views", run.scene.rig.len() as f64),
        ("objects", run.scene.objects.len() as f64),
        ("queries", run.queries.len() as f64),
        ("l_3d", run.metrics.loss.l_3d),
        ("map_projected_2d", run.metrics.projected_2d.mean_ap),
        ("recall_center_2m", run.metrics.center_distance.recall),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_names_roundtrip() {
        for g in [
            QueryGenerator::Learned,
            QueryGenerator::Oracle,
            QueryGenerator::UniformDepth,
            QueryGenerator::ScaleDepth,
        ] {
            assert_eq!(g.to_string().parse::<QueryGenerator>().unwrap(), g);
        }
        assert!("grid".parse::<QueryGenerator>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let bad = PipelineConfig {
            frames: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn bev_axes_and_coordinates() {
        let empty = plot_bev(&[], &[]);
        assert!(empty.starts_with("<svg") && empty.trim_end().ends_with("</svg>"));
        assert!(!empty.contains("<circle") && !empty.contains(r#"class="ref""#));
        assert_eq!(bev_coords(10.0, 0.0), (BEV_MARGIN + 150.0, BEV_MARGIN + 130.0));
        let svg = plot_bev(&[[10.0, 0.0], [1.0, 2.0]], &[[0.0, 0.0]]);
        assert_eq!(svg.matches(r#"class="gt""#).count(), 2);
        assert_eq!(svg.matches(r#"class="ref""#).count(), 1);
        assert!(svg.contains(r#"cx="190" cy="170""#));
    }
}
