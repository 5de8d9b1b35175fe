//! Synthetic multi-camera driving scenes, a noisy 2D detector stand-in,
//! feature synthesis and evaluation.

use std::collections::BTreeMap;

use nalgebra::{Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::association::iou_2d;
use crate::error::{Error, Result};
use crate::geometry::{camera_rotation_for_yaw, Box2D, CameraView, Extrinsics, Intrinsics, RigFile, BEHIND_CAMERA_EPS};
use crate::query_gen::FeatureMap;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["car", "truck", "pedestrian", "bicycle"];
/// Mean `(w, l, h)` per class in metres.
pub const CLASS_SIZES: [[f64; 3]; NUM_CLASSES] = [[1.9, 4.6, 1.7], [2.5, 8.0, 3.2], [0.7, 0.7, 1.8], [0.6, 1.8, 1.3]];
/// 15 sweeps at ~0.083 s.
pub const DEFAULT_FRAME_INTERVAL: f64 = 15.0 * 0.083;
pub const MIN_VISIBLE_AREA: f64 = 64.0;
/// Objects are not placed closer than this to the ego origin.
const MIN_OBJECT_RANGE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// `(w, l, h)`
    pub size: [f64; 3],
    /// Heading of the length axis, in `(−π, π]`.
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: usize,
    pub object_id: usize,
}

impl Box3D {
    pub fn center_point(&self) -> Point3<f64> {
        Point3::from(self.center)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config(format!("box {} has non-positive size", self.object_id)));
        }
        Ok(())
    }

    /// Corner `b` has bit 0 → ±l, bit 1 → ±w, bit 2 → ±h.
    pub fn corners(&self) -> [Point3<f64>; 8] {
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw);
        let half = Vector3::new(self.size[1] / 2.0, self.size[0] / 2.0, self.size[2] / 2.0);
        let c = self.center_point();
        std::array::from_fn(|b| {
            let s = |bit: usize| if b >> bit & 1 == 1 { 1.0 } else { -1.0 };
            c + rot * Vector3::new(s(0) * half.x, s(1) * half.y, s(2) * half.z)
        })
    }

    /// Maps box-local coordinates in `[−1, 1]³` to world.
    pub fn local_to_world(&self, local: [f64; 3]) -> Point3<f64> {
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw);
        let v = Vector3::new(
            local[0] * self.size[1] / 2.0,
            local[1] * self.size[0] / 2.0,
            local[2] * self.size[2] / 2.0,
        );
        self.center_point() + rot * v
    }

    /// Centre moved by velocity over `dt` seconds.
    pub fn advanced(&self, dt: f64) -> Box3D {
        let mut b = *self;
        b.center[0] += self.velocity[0] * dt;
        b.center[1] += self.velocity[1] * dt;
        b
    }
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.sin().atan2(a.cos());
    if w <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigConfig {
    pub n_views: usize,
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
    /// Cameras sit on a ring of this radius around the ego origin.
    pub mount_radius: f64,
    pub mount_height: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            n_views: 6,
            width: 800,
            height: 450,
            hfov_deg: 70.0,
            mount_radius: 1.0,
            mount_height: 1.5,
        }
    }
}

impl RigConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("rig needs at least one camera and a positive image size".into()));
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return Err(Error::Config(format!("horizontal FOV {} out of (0, 180)", self.hfov_deg)));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = self.width as f64 / 2.0 / (self.hfov_deg.to_radians() / 2.0).tan();
        Intrinsics {
            fx: f,
            fy: f,
            ox: self.width as f64 / 2.0,
            oy: self.height as f64 / 2.0,
        }
    }
}

/// Planar ego pose in the world frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Ego velocity in its own frame and yaw rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EgoMotion {
    pub velocity: [f64; 2],
    pub yaw_rate: f64,
}

impl EgoPose {
    pub fn advanced(&self, motion: &EgoMotion, dt: f64) -> EgoPose {
        let (s, c) = self.yaw.sin_cos();
        let (vx, vy) = (motion.velocity[0], motion.velocity[1]);
        EgoPose {
            x: self.x + (c * vx - s * vy) * dt,
            y: self.y + (s * vx + c * vy) * dt,
            yaw: self.yaw + motion.yaw_rate * dt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub ego: EgoPose,
}

/// Camera views of one frame; `view_id = frame · n_views + camera`.
pub fn build_rig(cfg: &RigConfig, ego: &EgoPose, frame: usize, timestamp: f64) -> Vec<CameraView> {
    let k = cfg.intrinsics();
    (0..cfg.n_views)
        .map(|cam| {
            let heading = ego.yaw + cam as f64 * std::f64::consts::TAU / cfg.n_views as f64;
            let center = Vector3::new(
                ego.x + cfg.mount_radius * heading.cos(),
                ego.y + cfg.mount_radius * heading.sin(),
                cfg.mount_height,
            );
            let r = camera_rotation_for_yaw(heading);
            let t = -(r * center);
            CameraView {
                intrinsics: k,
                extrinsics: Extrinsics::from_rotation_translation(&r, &t),
                width: cfg.width,
                height: cfg.height,
                view_id: frame * cfg.n_views + cam,
                timestamp,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_objects: usize,
    /// Object centres are drawn from `[−xy_range, xy_range]²`.
    pub xy_range: f64,
    pub max_speed: f64,
    pub rig: RigConfig,
    pub ego_motion: EgoMotion,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_objects: 10,
            xy_range: 50.0,
            max_speed: 15.0,
            rig: RigConfig::default(),
            ego_motion: EgoMotion {
                velocity: [5.0, 0.0],
                yaw_rate: 0.05,
            },
        }
    }
}

/// Objects are stored at the time of the latest frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub config: SceneConfig,
    pub objects: Vec<Box3D>,
    #[serde(with = "rig_serde")]
    pub rig: Vec<CameraView>,
    pub frames: Vec<Frame>,
}

mod rig_serde {
    use super::*;

    pub fn serialize<S: serde::Serializer>(views: &[CameraView], s: S) -> std::result::Result<S::Ok, S::Error> {
        RigFile::from_views(views).serialize(s)
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<CameraView>, D::Error> {
        RigFile::deserialize(d)?.to_views().map_err(serde::de::Error::custom)
    }
}

impl Scene {
    pub fn latest_timestamp(&self) -> f64 {
        self.frames.last().map_or(0.0, |f| f.timestamp)
    }

    /// Objects moved back (or forward) to time `t`.
    pub fn objects_at(&self, t: f64) -> Vec<Box3D> {
        let dt = t - self.latest_timestamp();
        self.objects.iter().map(|o| o.advanced(dt)).collect()
    }

    /// Views of the latest frame.
    pub fn current_views(&self) -> Vec<CameraView> {
        let t = self.latest_timestamp();
        self.rig.iter().filter(|v| v.timestamp == t).cloned().collect()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.rig.validate()?;
    if !(cfg.xy_range > MIN_OBJECT_RANGE && cfg.max_speed >= 0.0) {
        return Err(Error::Config("object range must exceed 4 m and speeds be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = Vec::with_capacity(cfg.n_objects);
    for object_id in 0..cfg.n_objects {
        let class_id = rng.random_range(0..NUM_CLASSES);
        let prior = CLASS_SIZES[class_id];
        let size: [f64; 3] = std::array::from_fn(|i| prior[i] * rng.random_range(0.9..1.1));
        let (x, y) = loop {
            let x = rng.random_range(-cfg.xy_range..=cfg.xy_range);
            let y = rng.random_range(-cfg.xy_range..=cfg.xy_range);
            if x.hypot(y) >= MIN_OBJECT_RANGE {
                break (x, y);
            }
        };
        let yaw = wrap_angle(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        let speed = rng.random_range(0.0..=cfg.max_speed);
        let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        objects.push(Box3D {
            center: [x, y, size[2] / 2.0],
            size,
            yaw,
            velocity: [speed * heading.cos(), speed * heading.sin()],
            class_id,
            object_id,
        });
    }
    let ego = EgoPose::default();
    Ok(Scene {
        seed,
        config: cfg.clone(),
        objects,
        rig: build_rig(&cfg.rig, &ego, 0, 0.0),
        frames: vec![Frame {
            index: 0,
            timestamp: 0.0,
            ego,
        }],
    })
}

/// Appends a frame `dt` seconds later: ego and objects move, and the new
/// frame's cameras are added to the rig as extra views.
pub fn advance_frame(scene: &Scene, dt: f64) -> Scene {
    let last = *scene.frames.last().expect("scene has at least one frame");
    let ego = last.ego.advanced(&scene.config.ego_motion, dt);
    let frame = Frame {
        index: last.index + 1,
        timestamp: last.timestamp + dt,
        ego,
    };
    let mut next = scene.clone();
    next.objects = scene.objects.iter().map(|o| o.advanced(dt)).collect();
    next.rig.extend(build_rig(&scene.config.rig, &ego, frame.index, frame.timestamp));
    next.frames.push(frame);
    next
}

/// Hull edges of a box as corner-index pairs differing in one bit.
fn box_edges() -> impl Iterator<Item = (usize, usize)> {
    (0..8).flat_map(|a| (0..3).map(move |bit| (a, a ^ (1 << bit)))).filter(|(a, b)| a < b)
}

/// Min box over the projections of the part of `b` in front of the camera,
/// before clipping; `None` when the box is entirely behind it.
pub fn project_box3d_unclipped(view: &CameraView, b: &Box3D) -> Option<Box2D> {
    let cam: Vec<Point3<f64>> = b.corners().iter().map(|c| view.extrinsics.world_to_camera(c)).collect();
    let mut pts: Vec<Point3<f64>> = cam.iter().filter(|p| p.z > BEHIND_CAMERA_EPS).copied().collect();
    if pts.is_empty() {
        return None;
    }
    for (i, j) in box_edges() {
        let (a, c) = (cam[i], cam[j]);
        if (a.z > BEHIND_CAMERA_EPS) != (c.z > BEHIND_CAMERA_EPS) {
            let t = (BEHIND_CAMERA_EPS - a.z) / (c.z - a.z);
            let mut p = a + (c - a) * t;
            p.z = BEHIND_CAMERA_EPS;
            pts.push(p);
        }
    }
    let k = &view.intrinsics;
    let mut out = Box2D::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in pts {
        let (u, v) = (k.fx * p.x / p.z + k.ox, k.fy * p.y / p.z + k.oy);
        out.x_min = out.x_min.min(u);
        out.y_min = out.y_min.min(v);
        out.x_max = out.x_max.max(u);
        out.y_max = out.y_max.max(v);
    }
    Some(out)
}

/// Projects boxes as given (no time shift) into `view`. Box ids are the
/// input positions, object ids the boxes' own ids.
pub fn render_boxes(boxes: &[Box3D], view: &CameraView) -> Vec<Box2D> {
    boxes
        .iter()
        .filter_map(|b| {
            let clipped = project_box3d_unclipped(view, b)?.clip(view.width as f64, view.height as f64)?;
            (clipped.area() >= MIN_VISIBLE_AREA).then_some(clipped)
                .map(|mut c| {
                    c.class_id = b.class_id;
                    c.object_id = Some(b.object_id);
                    c.score = 1.0;
                    c
                })
        })
        .enumerate()
        .map(|(i, mut c)| {
            c.box_id = i;
            c
        })
        .collect()
}

/// Ground-truth 2D boxes of the scene objects as seen at the view's time.
pub fn render_gt_2d(scene: &Scene, view: &CameraView) -> Vec<Box2D> {
    render_boxes(&scene.objects_at(view.timestamp), view)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionStubConfig {
    /// Edge jitter as a fraction of the box size.
    pub jitter: f64,
    pub drop_prob: f64,
    /// Expected false positives per view.
    pub fp_rate: f64,
    pub score_noise: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub seed: u64,
}

impl Default for DetectionStubConfig {
    fn default() -> Self {
        DetectionStubConfig {
            jitter: 0.02,
            drop_prob: 0.05,
            fp_rate: 0.2,
            score_noise: 0.05,
            score_threshold: 0.05,
            nms_iou: 0.6,
            seed: 0,
        }
    }
}

impl DetectionStubConfig {
    pub fn noiseless(seed: u64) -> Self {
        DetectionStubConfig {
            jitter: 0.0,
            drop_prob: 0.0,
            fp_rate: 0.0,
            score_noise: 0.0,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.drop_prob, self.score_threshold, self.nms_iou];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("probabilities and thresholds must lie in [0, 1]".into()));
        }
        if [self.jitter, self.fp_rate, self.score_noise].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// Greedy per-class suppression; survivors ordered by descending score.
pub fn nms(boxes: &[Box2D], iou_threshold: f64) -> Vec<Box2D> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Box2D> = Vec::new();
    for i in order {
        let b = &boxes[i];
        if kept.iter().all(|k| k.class_id != b.class_id || iou_2d(k, b) <= iou_threshold) {
            kept.push(*b);
        }
    }
    kept
}

/// Drops, jitters and scores ground-truth boxes, adds false positives, then
/// thresholds and suppresses. The random stream depends on the seed and view.
pub fn detector_stub(gt: &[Box2D], view: &CameraView, cfg: &DetectionStubConfig) -> Result<Vec<Box2D>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(view.view_id as u64);
    let (w, h) = (view.width as f64, view.height as f64);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut raw = Vec::new();
    for g in gt {
        if cfg.drop_prob > 0.0 && rng.random_bool(cfg.drop_prob) {
            continue;
        }
        let mut b = *g;
        if cfg.jitter > 0.0 {
            let (bw, bh) = (g.width(), g.height());
            b.x_min += cfg.jitter * bw * unit.sample(&mut rng);
            b.x_max += cfg.jitter * bw * unit.sample(&mut rng);
            b.y_min += cfg.jitter * bh * unit.sample(&mut rng);
            b.y_max += cfg.jitter * bh * unit.sample(&mut rng);
        }
        if let Some(b) = b.clip(w, h) {
            raw.push(b);
        }
    }
    if cfg.fp_rate > 0.0 {
        // Bernoulli thinning of a few slots approximates a Poisson count
        let slots = (cfg.fp_rate.ceil() as usize).max(1) * 4;
        for _ in 0..slots {
            if !rng.random_bool((cfg.fp_rate / slots as f64).min(1.0)) {
                continue;
            }
            let bw = rng.random_range(16.0..w / 3.0);
            let bh = rng.random_range(16.0..h / 3.0);
            let x = rng.random_range(0.0..w - bw);
            let y = rng.random_range(0.0..h - bh);
            let mut b = Box2D::new(x, y, x + bw, y + bh);
            b.class_id = rng.random_range(0..NUM_CLASSES);
            raw.push(b);
        }
    }
    for b in &mut raw {
        let iou = gt.iter().map(|g| iou_2d(g, b)).fold(0.0, f64::max);
        let noise = if cfg.score_noise > 0.0 { cfg.score_noise * unit.sample(&mut rng) } else { 0.0 };
        b.score = (iou + noise).clamp(0.0, 1.0);
    }
    raw.retain(|b| b.score >= cfg.score_threshold);
    let mut out = nms(&raw, cfg.nms_iou);
    for (i, b) in out.iter_mut().enumerate() {
        b.box_id = i;
    }
    Ok(out)
}

/// Per-view detections file entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewDetectionRecord {
    pub view_id: usize,
    pub timestamp: f64,
    pub boxes: Vec<Box2D>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSynthConfig {
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for FeatureSynthConfig {
    fn default() -> Self {
        FeatureSynthConfig { noise_std: 0.05, seed: 0 }
    }
}

/// Fixed per-channel coefficients shared by every scene, so features carry
/// the same meaning everywhere.
struct FeatureBasis {
    class_embed: Vec<Vec<f64>>,
    depth: Vec<f64>,
    du: Vec<f64>,
    dv: Vec<f64>,
    freq: Vec<[f64; 3]>,
}

impl FeatureBasis {
    fn new(channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_f00d);
        let mut vec = |scale: f64| -> Vec<f64> { (0..channels).map(|_| rng.random_range(-scale..scale)).collect() };
        let class_embed = (0..NUM_CLASSES).map(|_| vec(1.0)).collect();
        let depth = vec(1.0);
        let du = vec(1.0);
        let dv = vec(1.0);
        let freq = (0..channels)
            .map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0)))
            .collect();
        FeatureBasis { class_embed, depth, du, dv, freq }
    }
}

/// Synthetic backbone features at the given stride.
///
/// Empty cells hold a smooth code of the cell's world ray. A cell whose
/// centre lies in an object's 2D box instead carries that object's class
/// embedding plus terms linear in its log depth and in the cell's offset from
/// the projected object centre (normalised by box size); the nearest object
/// wins. Seeded Gaussian noise is added everywhere.
pub fn synth_feature_maps(
    scene: &Scene,
    view: &CameraView,
    channels: usize,
    stride: usize,
    cfg: &FeatureSynthConfig,
) -> Result<FeatureMap> {
    if channels == 0 || stride == 0 {
        return Err(Error::Config("feature channels and stride must be positive".into()));
    }
    let basis = FeatureBasis::new(channels);
    let (hf, wf) = FeatureMap::grid_size(view.width, view.height, stride);
    let objects = scene.objects_at(view.timestamp);
    // (box, depth, projected centre)
    let mut footprints: Vec<(Box2D, f64, (f64, f64), usize)> = render_boxes(&objects, view)
        .into_iter()
        .filter_map(|b| {
            let o = &objects[objects.iter().position(|o| Some(o.object_id) == b.object_id)?];
            let pc = view.extrinsics.world_to_camera(&o.center_point());
            if pc.z <= BEHIND_CAMERA_EPS {
                return None;
            }
            let k = &view.intrinsics;
            let uv = (k.fx * pc.x / pc.z + k.ox, k.fy * pc.y / pc.z + k.oy);
            Some((b, pc.z, uv, o.class_id))
        })
        .collect();
    footprints.sort_by(|a, b| a.1.total_cmp(&b.1));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(view.view_id as u64);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(hf * wf * channels);
    let s = stride as f64;
    for row in 0..hf {
        for col in 0..wf {
            let (u, v) = (col as f64 * s + s / 2.0, row as f64 * s + s / 2.0);
            let hit = footprints.iter().find(|f| f.0.contains_strict(u, v));
            let (_, dir) = view.pixel_ray(u, v);
            for c in 0..channels {
                let base = match hit {
                    Some((b, depth, (pu, pv), class)) => {
                        basis.class_embed[*class][c]
                            + basis.depth[c] * depth.ln() / 2.0
                            + basis.du[c] * (u - pu) / b.width()
                            + basis.dv[c] * (v - pv) / b.height()
                    }
                    None => {
                        let f = basis.freq[c];
                        0.3 * (f[0] * dir.x + f[1] * dir.y + f[2] * dir.z).sin()
                    }
                };
                let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(base + n);
            }
        }
    }
    FeatureMap::new(Tensor::from_vec(&[hf, wf, channels], data)?, stride, view.view_id)
}

/// A scored 3D detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection3D {
    pub bbox: Box3D,
    pub score: f64,
}

impl Detection3D {
    pub fn from_prediction(p: &crate::decoder::Prediction3D) -> Self {
        let (class_id, score) = p.best_class();
        Detection3D {
            bbox: Box3D {
                center: p.center,
                size: p.size,
                yaw: p.yaw,
                velocity: p.velocity,
                class_id,
                object_id: p.query_id,
            },
            score,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
    pub n_gt: usize,
}

/// 101-point interpolated AP from true/false-positive flags sorted by score.
pub fn average_precision(tp_flags: &[bool], n_gt: usize) -> PrCurve {
    let mut curve = PrCurve {
        n_gt,
        ..Default::default()
    };
    if n_gt == 0 {
        return curve;
    }
    let mut tp = 0usize;
    for (i, &t) in tp_flags.iter().enumerate() {
        tp += t as usize;
        curve.precision.push(tp as f64 / (i + 1) as f64);
        curve.recall.push(tp as f64 / n_gt as f64);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let best = curve
            .recall
            .iter()
            .zip(&curve.precision)
            .filter(|(rc, _)| **rc >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += best;
    }
    curve.ap = sum / 101.0;
    curve
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectedEval {
    /// Classes with at least one ground-truth box.
    pub per_class: BTreeMap<usize, PrCurve>,
    pub mean_ap: f64,
}

/// Projects predictions and ground truth into every view, matches greedily by
/// score at 2D IoU ≥ `iou_threshold` and reports per-class AP.
pub fn eval_projected_2d(preds: &[Detection3D], gts: &[Box3D], views: &[CameraView], iou_threshold: f64) -> ProjectedEval {
    let mut out = ProjectedEval::default();
    for class in 0..NUM_CLASSES {
        let class_gt: Vec<Box3D> = gts.iter().filter(|g| g.class_id == class).copied().collect();
        let class_pred: Vec<Detection3D> = preds.iter().filter(|p| p.bbox.class_id == class).copied().collect();
        let mut dets: Vec<(f64, usize, Box2D)> = Vec::new();
        let mut gt_boxes: Vec<Vec<Box2D>> = Vec::new();
        for (vi, view) in views.iter().enumerate() {
            gt_boxes.push(render_boxes(&class_gt, view));
            for p in &class_pred {
                if let Some(b) = render_boxes(&[p.bbox], view).pop() {
                    dets.push((p.score, vi, b));
                }
            }
        }
        let n_gt: usize = gt_boxes.iter().map(Vec::len).sum();
        if n_gt == 0 {
            continue;
        }
        dets.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut used: Vec<Vec<bool>> = gt_boxes.iter().map(|g| vec![false; g.len()]).collect();
        let flags: Vec<bool> = dets
            .iter()
            .map(|(_, vi, b)| {
                let best = gt_boxes[*vi]
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| !used[*vi][*j])
                    .map(|(j, g)| (j, iou_2d(g, b)))
                    .filter(|(_, iou)| *iou >= iou_threshold)
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                match best {
                    Some((j, _)) => {
                        used[*vi][j] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        out.per_class.insert(class, average_precision(&flags, n_gt));
    }
    if !out.per_class.is_empty() {
        out.mean_ap = out.per_class.values().map(|c| c.ap).sum::<f64>() / out.per_class.len() as f64;
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CenterEval {
    pub precision: f64,
    pub recall: f64,
    pub ap: f64,
    pub true_positives: usize,
    pub n_pred: usize,
    pub n_gt: usize,
}

/// Greedy score-ordered matching of same-class boxes by centre distance.
pub fn eval_3d_center_distance(preds: &[Detection3D], gts: &[Box3D], threshold: f64) -> CenterEval {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let flags: Vec<bool> = order
        .iter()
        .map(|&i| {
            let p = &preds[i].bbox;
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, g)| !used[*j] && g.class_id == p.class_id)
                .map(|(j, g)| (j, (g.center_point() - p.center_point()).norm()))
                .filter(|(_, d)| *d <= threshold)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            best.map(|(j, _)| used[j] = true).is_some()
        })
        .collect();
    let tp = flags.iter().filter(|f| **f).count();
    CenterEval {
        precision: if preds.is_empty() { 0.0 } else { tp as f64 / preds.len() as f64 },
        recall: if gts.is_empty() { 0.0 } else { tp as f64 / gts.len() as f64 },
        ap: average_precision(&flags, gts.len()).ap,
        true_positives: tp,
        n_pred: preds.len(),
        n_gt: gts.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_view() -> CameraView {
        build_rig(&RigConfig::default(), &EgoPose::default(), 0, 0.0).remove(0)
    }

    #[test]
    fn empty_and_deterministic_scenes() {
        let cfg = SceneConfig {
            n_objects: 0,
            ..Default::default()
        };
        assert!(generate_scene(1, &cfg).unwrap().objects.is_empty());
        let cfg = SceneConfig::default();
        let a = generate_scene(7, &cfg).unwrap();
        let b = generate_scene(7, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_ne!(a.objects, generate_scene(8, &cfg).unwrap().objects);
    }

    #[test]
    fn sampled_values_within_ranges() {
        let cfg = SceneConfig {
            n_objects: 10_000,
            ..Default::default()
        };
        let s = generate_scene(3, &cfg).unwrap();
        for o in &s.objects {
            assert!(o.center[0].abs() <= 50.0 && o.center[1].abs() <= 50.0);
            assert!(o.center[0].hypot(o.center[1]) >= MIN_OBJECT_RANGE);
            assert_eq!(o.center[2], o.size[2] / 2.0);
            for i in 0..3 {
                let p = CLASS_SIZES[o.class_id][i];
                assert!(o.size[i] >= 0.9 * p && o.size[i] <= 1.1 * p);
            }
            assert!(o.yaw > -std::f64::consts::PI && o.yaw <= std::f64::consts::PI);
            assert!(o.velocity[0].hypot(o.velocity[1]) <= 15.0 + 1e-9);
        }
        let ids: std::collections::BTreeSet<_> = s.objects.iter().map(|o| o.object_id).collect();
        assert_eq!(ids.len(), s.objects.len());
    }

    #[test]
    fn rig_covers_the_horizon() {
        let views = build_rig(&RigConfig::default(), &EgoPose::default(), 0, 0.0);
        assert_eq!(views.len(), 6);
        let ids: Vec<_> = views.iter().map(|v| v.view_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
        let (_, d0) = views[0].pixel_ray(400.0, 225.0);
        assert!((d0 - Vector3::x()).norm() < 1e-12);
        let (_, d1) = views[1].pixel_ray(400.0, 225.0);
        assert!((d1.dot(&d0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn object_on_axis_projects_to_principal_point() {
        let view = axis_view();
        let c = view.extrinsics.camera_center();
        let b = Box3D {
            center: [c.x + 10.0, c.y, c.z],
            size: [2.0, 2.0, 2.0],
            yaw: 0.0,
            velocity: [0.0; 2],
            class_id: 0,
            object_id: 0,
        };
        let r = render_boxes(&[b], &view);
        assert_eq!(r.len(), 1);
        let (u, v) = r[0].center();
        assert!((u - 400.0).abs() < 1e-9 && (v - 225.0).abs() < 1e-9);
        assert_eq!(r[0].object_id, Some(0));
    }

    #[test]
    fn object_behind_every_camera_is_absent() {
        let mut cfg = RigConfig::default();
        cfg.n_views = 1;
        let view = build_rig(&cfg, &EgoPose::default(), 0, 0.0).remove(0);
        let b = Box3D {
            center: [-20.0, 0.0, 1.0],
            size: [2.0, 4.0, 1.5],
            yaw: 0.4,
            velocity: [0.0; 2],
            class_id: 1,
            object_id: 3,
        };
        assert!(project_box3d_unclipped(&view, &b).is_none());
        assert!(render_boxes(&[b], &view).is_empty());
    }

    #[test]
    fn noiseless_detector_is_identity() {
        let scene = generate_scene(5, &SceneConfig::default()).unwrap();
        for view in &scene.rig {
            let gt = render_gt_2d(&scene, view);
            let det = detector_stub(&gt, view, &DetectionStubConfig::noiseless(1)).unwrap();
            let mut sorted: Vec<_> = det.iter().map(|b| b.object_id).collect();
            sorted.sort();
            let kept = nms(&gt, 0.6);
            let mut expect: Vec<_> = kept.iter().map(|b| b.object_id).collect();
            expect.sort();
            assert_eq!(sorted, expect);
            assert!(det.iter().all(|b| b.score == 1.0));
        }
    }

    #[test]
    fn nms_and_threshold() {
        let a = Box2D { score: 0.9, ..Box2D::new(0., 0., 10., 10.) };
        let b = Box2D { score: 0.8, ..a };
        let kept = nms(&[b, a], 0.6);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let view = axis_view();
        let gt = vec![Box2D::new(100., 100., 150., 150.)];
        let cfg = DetectionStubConfig {
            score_threshold: 1.0,
            score_noise: 0.0,
            jitter: 0.3,
            ..DetectionStubConfig::noiseless(2)
        };
        assert!(detector_stub(&gt, &view, &cfg).unwrap().is_empty());
    }

    #[test]
    fn zero_interval_frame_is_identical() {
        let scene = generate_scene(9, &SceneConfig::default()).unwrap();
        let next = advance_frame(&scene, 0.0);
        assert_eq!(next.objects, scene.objects);
        assert_eq!(next.rig.len(), 12);
        for (a, b) in scene.rig.iter().zip(&next.rig[6..]) {
            assert_eq!(a.extrinsics, b.extrinsics);
            assert_eq!(b.view_id, a.view_id + 6);
        }
        assert!((DEFAULT_FRAME_INTERVAL - 1.245).abs() < 1e-12);
    }

    #[test]
    fn static_object_under_ego_motion() {
        let mut scene = generate_scene(4, &SceneConfig::default()).unwrap();
        scene.objects.iter_mut().for_each(|o| o.velocity = [0.0; 2]);
        let next = advance_frame(&scene, DEFAULT_FRAME_INTERVAL);
        let ego0 = scene.frames[0].ego;
        let ego1 = next.frames[1].ego;
        for (o0, o1) in scene.objects.iter().zip(&next.objects) {
            assert_eq!(o0.center, o1.center);
            // camera-frame position from the new extrinsics vs. moving the
            // point into the new ego frame by hand, then through the mount
            let p = o1.center_point();
            let via_ext = next.rig[6].extrinsics.world_to_camera(&p);
            let (s, c) = ego1.yaw.sin_cos();
            let (dx, dy) = (p.x - ego1.x, p.y - ego1.y);
            let ego_local = Point3::new(c * dx + s * dy, -s * dx + c * dy, p.z);
            let mount = build_rig(&scene.config.rig, &ego0, 0, 0.0).remove(0);
            let via_ego = mount.extrinsics.world_to_camera(&ego_local);
            assert!((via_ext - via_ego).norm() < 1e-9);
        }
    }

    #[test]
    fn features_have_expected_shape_and_signal() {
        let scene = generate_scene(2, &SceneConfig::default()).unwrap();
        let view = &scene.rig[0];
        let cfg = FeatureSynthConfig::default();
        let a = synth_feature_maps(&scene, view, 16, 16, &cfg).unwrap();
        let b = synth_feature_maps(&scene, view, 16, 16, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.shape, vec![29, 50, 16]);
    }

    #[test]
    fn perfect_predictions_score_full_ap() {
        let scene = generate_scene(6, &SceneConfig::default()).unwrap();
        let preds: Vec<_> = scene.objects.iter().map(|b| Detection3D { bbox: *b, score: 1.0 }).collect();
        let e = eval_projected_2d(&preds, &scene.objects, &scene.rig, 0.5);
        assert!(!e.per_class.is_empty());
        for c in e.per_class.values() {
            assert_eq!(c.ap, 1.0);
        }
        let empty = eval_projected_2d(&[], &scene.objects, &scene.rig, 0.5);
        assert!(empty.per_class.values().all(|c| c.recall.is_empty() && c.ap == 0.0));
    }

    #[test]
    fn centre_distance_metrics() {
        let scene = generate_scene(6, &SceneConfig::default()).unwrap();
        let preds: Vec<_> = scene.objects.iter().map(|b| Detection3D { bbox: *b, score: 0.7 }).collect();
        let e = eval_3d_center_distance(&preds, &scene.objects, 2.0);
        assert_eq!((e.precision, e.recall), (1.0, 1.0));
        let shifted: Vec<_> = preds
            .iter()
            .map(|p| {
                let mut q = *p;
                q.bbox.center[0] += 3.0;
                q
            })
            .collect();
        assert_eq!(eval_3d_center_distance(&shifted, &scene.objects, 2.0).recall, 0.0);
    }

    #[test]
    fn ap_of_hand_built_curve() {
        // TP, FP, TP with 2 gts: precision 1, .5, .667 at recall .5, .5, 1
        let c = average_precision(&[true, false, true], 2);
        let expected = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((c.ap - expected).abs() < 1e-12);
    }
}
