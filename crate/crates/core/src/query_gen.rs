//! Dynamic object query generation from 2D boxes.
//!
//! RoI features are pooled from a view's feature map, a small location head
//! predicts a 2.5D point in the RoI frame from the features and the RoI's
//! equivalent intrinsics, and that point is lifted to a world-space reference
//! point which is sinusoidally encoded and linearly mapped to the query
//! embedding. Two fixed-rule alternatives (uniform depth sampling along the
//! box-centre ray, and depth from apparent size) are provided as well.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::geometry::{
    unproject_2_5d, Box2D, CameraMatrix, CameraView, EquivalentIntrinsics, Extrinsics, Point2_5D,
};
use crate::params::{apply_linear, init_linear, Bound, ParamStore};
use crate::tensor::Tensor;

/// Half-extent (m) of the scene cube used to normalise positions.
pub const SCENE_RANGE: f64 = 65.0;
/// Depth interval (m) shared by uniform sampling, frustum grids and clamping.
pub const DEPTH_RANGE: (f64, f64) = (0.5, 65.0);
pub const DEFAULT_DEPTH_BINS: usize = 10;
pub const DEFAULT_STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    /// `H_f × W_f × C`
    pub values: Tensor,
    pub stride: usize,
    pub view_id: usize,
}

impl FeatureMap {
    pub fn grid_size(width: u32, height: u32, stride: usize) -> (usize, usize) {
        (
            (height as usize).div_ceil(stride),
            (width as usize).div_ceil(stride),
        )
    }

    pub fn new(values: Tensor, stride: usize, view_id: usize) -> Result<Self> {
        if values.shape.len() != 3 || values.shape[2] == 0 || stride == 0 {
            return Err(Error::Shape(format!(
                "feature map must be H x W x C with C > 0, got {:?}",
                values.shape
            )));
        }
        Ok(FeatureMap { values, stride, view_id })
    }

    pub fn height(&self) -> usize {
        self.values.shape[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape[2]
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let c = self.channels();
        let start = (row * self.width() + col) * c;
        &self.values.data[start..start + c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoIFeature {
    /// `H_roi × W_roi × C`
    pub values: Tensor,
    pub box_id: usize,
}

impl RoIFeature {
    pub fn roi_h(&self) -> usize {
        self.values.shape[0]
    }

    pub fn roi_w(&self) -> usize {
        self.values.shape[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape[2]
    }
}

/// Bilinear RoI pooling with one sample at the centre of each output cell.
///
/// Feature cell `(r, c)` is centred on pixel `(c·S + S/2, r·S + S/2)`.
/// Sample positions outside the map are clamped to the border cells.
pub fn roi_align(fm: &FeatureMap, b: &Box2D, roi_w: usize, roi_h: usize) -> Result<RoIFeature> {
    b.ensure_valid()?;
    if roi_w == 0 || roi_h == 0 {
        return Err(Error::Config("RoI size must be at least 1x1".into()));
    }
    let s = fm.stride as f64;
    let (hf, wf, c) = (fm.height(), fm.width(), fm.channels());
    let extent_w = wf as f64 * s;
    let extent_h = hf as f64 * s;
    if b.x_max <= 0.0 || b.y_max <= 0.0 || b.x_min >= extent_w || b.y_min >= extent_h {
        return Err(Error::EmptyRegion);
    }
    let bin_w = b.width() / roi_w as f64;
    let bin_h = b.height() / roi_h as f64;
    let mut out = Tensor::zeros(&[roi_h, roi_w, c]);
    for i in 0..roi_h {
        let y = b.y_min + (i as f64 + 0.5) * bin_h;
        let fy = (y / s - 0.5).clamp(0.0, (hf - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(hf - 1);
        let ty = fy - y0 as f64;
        for j in 0..roi_w {
            let x = b.x_min + (j as f64 + 0.5) * bin_w;
            let fx = (x / s - 0.5).clamp(0.0, (wf - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(wf - 1);
            let tx = fx - x0 as f64;
            let weights = [
                ((1.0 - ty) * (1.0 - tx), y0, x0),
                ((1.0 - ty) * tx, y0, x1),
                (ty * (1.0 - tx), y1, x0),
                (ty * tx, y1, x1),
            ];
            let dst = &mut out.data[(i * roi_w + j) * c..(i * roi_w + j + 1) * c];
            for (w, r, col) in weights {
                if w == 0.0 {
                    continue;
                }
                for (o, v) in dst.iter_mut().zip(fm.cell(r, col)) {
                    *o += w * v;
                }
            }
        }
    }
    Ok(RoIFeature {
        values: out,
        box_id: b.box_id,
    })
}

/// Weights of the location head: 3×3 same-padded conv (C→C), ReLU, global
/// average pool, concatenation with the 4-entry intrinsic descriptor, then
/// an MLP `(C+4) → C → 3` producing `(u', v', log d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationHeadParams {
    pub channels: usize,
    pub store: ParamStore,
}

pub const LOC_PREFIX: &str = "loc";

impl LocationHeadParams {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        init_linear(&mut store, "loc.conv", 9 * channels, channels, rng);
        init_linear(&mut store, "loc.fc1", channels + 4, channels, rng);
        init_linear(&mut store, "loc.fc2", channels, 3, rng);
        LocationHeadParams { channels, store }
    }

    pub fn zeros(channels: usize) -> Self {
        let mut store = ParamStore::new();
        for (name, shape) in Self::shapes(channels) {
            store.insert(name, Tensor::zeros(&shape));
        }
        LocationHeadParams { channels, store }
    }

    fn shapes(c: usize) -> Vec<(String, Vec<usize>)> {
        vec![
            ("loc.conv.w".into(), vec![9 * c, c]),
            ("loc.conv.b".into(), vec![1, c]),
            ("loc.fc1.w".into(), vec![c + 4, c]),
            ("loc.fc1.b".into(), vec![1, c]),
            ("loc.fc2.w".into(), vec![c, 3]),
            ("loc.fc2.b".into(), vec![1, 3]),
        ]
    }

    pub fn from_store(channels: usize, store: &ParamStore) -> Result<Self> {
        let sub = store.subset("loc.");
        for (name, shape) in Self::shapes(channels) {
            sub.expect_shape(&name, &shape)?;
        }
        Ok(LocationHeadParams { channels, store: sub })
    }
}

/// 3×3 zero-padded neighbourhoods of every RoI cell, `(H·W) × 9C`.
fn im2col3x3(roi: &RoIFeature) -> Tensor {
    let (h, w, c) = (roi.roi_h(), roi.roi_w(), roi.channels());
    let mut out = Tensor::zeros(&[h * w, 9 * c]);
    for i in 0..h {
        for j in 0..w {
            let row = i * w + j;
            for di in 0..3 {
                for dj in 0..3 {
                    let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                        continue;
                    }
                    let src = ((ii as usize) * w + jj as usize) * c;
                    let dst = row * 9 * c + (di * 3 + dj) * c;
                    out.data[dst..dst + c].copy_from_slice(&roi.values.data[src..src + c]);
                }
            }
        }
    }
    out
}

/// Location head on the tape; returns the `1×3` row `(u', v', log d)`.
pub fn location_head_graph(g: &mut Graph, bound: &Bound, roi: &RoIFeature, k_roi: &EquivalentIntrinsics) -> NodeId {
    let cols = g.leaf(im2col3x3(roi));
    let conv = apply_linear(g, bound, "loc.conv", cols);
    let conv = g.relu(conv);
    let pooled = g.mean_rows(conv);
    let desc = g.leaf(Tensor::row_vector(k_roi.descriptor().to_vec()));
    let joined = g.concat_cols(&[pooled, desc]);
    let hidden = apply_linear(g, bound, "loc.fc1", joined);
    let hidden = g.relu(hidden);
    apply_linear(g, bound, "loc.fc2", hidden)
}

/// `(u', v', log d)` → homogeneous RoI point `(u'·d, v'·d, d)` as a `1×3` row.
pub fn homogeneous_graph(g: &mut Graph, head_out: NodeId) -> NodeId {
    let uv = g.slice_cols(head_out, 0, 2);
    let log_d = g.slice_cols(head_out, 2, 3);
    let d = g.exp(log_d);
    let dd = g.concat_cols(&[d, d]);
    let scaled = g.mul(uv, dd);
    g.concat_cols(&[scaled, d])
}

/// World point from a homogeneous RoI row, as a `1×3` row.
pub fn lift_graph(g: &mut Graph, homogeneous: NodeId, k_roi: &impl CameraMatrix, ext: &Extrinsics) -> NodeId {
    let linear: Matrix3<f64> = ext.rotation().transpose() * k_roi.inverse3();
    let offset: Vector3<f64> = -ext.rotation().transpose() * ext.translation();
    // row-vector convention: world_row = h_row · linearᵀ + offset
    let lt = g.leaf(Tensor::matrix(
        3,
        3,
        (0..3)
            .flat_map(|r| (0..3).map(move |c| (r, c)))
            .map(|(r, c)| linear[(c, r)])
            .collect(),
    ));
    let off = g.leaf(Tensor::row_vector(offset.iter().copied().collect()));
    let p = g.matmul(homogeneous, lt);
    g.add_row(p, off)
}

pub fn predict_roi_location(roi: &RoIFeature, k_roi: &EquivalentIntrinsics, params: &LocationHeadParams) -> Result<Point2_5D> {
    if roi.channels() != params.channels {
        return Err(Error::Shape(format!(
            "RoI has {} channels, head expects {}",
            roi.channels(),
            params.channels
        )));
    }
    let mut g = Graph::new();
    let bound = params.store.bind(&mut g);
    let out = location_head_graph(&mut g, &bound, roi, k_roi);
    let v = g.value(out);
    let p = Point2_5D {
        u: v.data[0],
        v: v.data[1],
        d: v.data[2].exp(),
    };
    if !(p.u.is_finite() && p.v.is_finite() && p.d.is_finite() && p.d > 0.0) {
        return Err(Error::Numeric("location head output".into()));
    }
    Ok(p)
}

/// Test-time stand-in for the learned head: RoI centre at the depth where the
/// box-centre ray passes closest to the ground-truth centre.
pub fn oracle_roi_location(b: &Box2D, roi_w: usize, roi_h: usize, view: &CameraView, gt_center: &Point3<f64>) -> Point2_5D {
    let (cx, cy) = b.center();
    let k = view.intrinsics;
    let dir = Vector3::new((cx - k.ox) / k.fx, (cy - k.oy) / k.fy, 1.0);
    let p_cam = view.extrinsics.world_to_camera(gt_center).coords;
    let t = p_cam.dot(&dir) / dir.dot(&dir);
    Point2_5D {
        u: roi_w as f64 / 2.0,
        v: roi_h as f64 / 2.0,
        d: t.max(f64::MIN_POSITIVE),
    }
}

pub fn lift_reference_point(p: &Point2_5D, k_roi: &EquivalentIntrinsics, ext: &Extrinsics) -> Result<Point3<f64>> {
    unproject_2_5d(p, k_roi, ext)
}

/// Columns of the sinusoidal code: frequency matrix (`3 × len`) and the
/// per-column cosine flags. Code length is `6·⌈len/6⌉` truncated to `len`;
/// frequency `i` is `1 / 10000^{2i/len}`.
fn sinusoid_layout(len: usize) -> (Tensor, Vec<bool>) {
    let mut freq = Tensor::zeros(&[3, len]);
    let mut use_cos = vec![false; len];
    for col in 0..len {
        let i = col / 6;
        let k = col % 6;
        let f = 1.0 / 10000f64.powf(2.0 * i as f64 / len as f64);
        freq.set(k % 3, col, f);
        use_cos[col] = k >= 3;
    }
    (freq, use_cos)
}

/// Sinusoidal code of a point already mapped to radians.
pub fn sinusoid_code(p: [f64; 3], len: usize) -> Vec<f64> {
    (0..len)
        .map(|col| {
            let i = col / 6;
            let k = col % 6;
            let arg = p[k % 3] / 10000f64.powf(2.0 * i as f64 / len as f64);
            if k >= 3 {
                arg.cos()
            } else {
                arg.sin()
            }
        })
        .collect()
}

/// Maps metres to radians so that `±SCENE_RANGE` becomes `±π`.
pub fn normalize_position(p: &Point3<f64>) -> [f64; 3] {
    let s = PI / SCENE_RANGE;
    [p.x * s, p.y * s, p.z * s]
}

/// Query positional encoding: `sin` / `cos` blocks of six per frequency.
pub fn positional_encode(p_ref: &Point3<f64>, channels: usize) -> Result<Tensor> {
    if channels == 0 || channels % 6 != 0 {
        return Err(Error::Config(format!(
            "positional encoding width {channels} must be a positive multiple of 6"
        )));
    }
    Ok(Tensor::row_vector(sinusoid_code(normalize_position(p_ref), channels)))
}

/// [`positional_encode`] on the tape for `n×3` rows of world points.
pub fn positional_encode_graph(g: &mut Graph, points: NodeId, channels: usize) -> NodeId {
    let (freq, use_cos) = sinusoid_layout(channels);
    let normalized = g.scale(points, PI / SCENE_RANGE);
    let freq = g.leaf(freq);
    let args = g.matmul(normalized, freq);
    g.sin_cos(args, use_cos)
}

/// Query embedding `Linear(PE)` with weights `query.w` (`C×C`) and `query.b`.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryInitParams {
    pub channels: usize,
    pub store: ParamStore,
}

impl QueryInitParams {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        init_linear(&mut store, "query", channels, channels, rng);
        QueryInitParams { channels, store }
    }

    pub fn from_store(channels: usize, store: &ParamStore) -> Result<Self> {
        let sub = store.subset("query.");
        sub.expect_shape("query.w", &[channels, channels])?;
        sub.expect_shape("query.b", &[1, channels])?;
        Ok(QueryInitParams { channels, store: sub })
    }
}

pub fn init_query(pe: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = pe.len();
    if weights.shape != [c, c] || bias.len() != c {
        return Err(Error::Shape(format!(
            "query init expects {c}x{c} weights and {c} biases, got {:?} and {:?}",
            weights.shape, bias.shape
        )));
    }
    let mut out = Tensor::row_vector(pe.data.clone()).matmul(weights);
    for (o, b) in out.data.iter_mut().zip(&bias.data) {
        *o += b;
    }
    Ok(out)
}

/// Where a query came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QuerySource {
    pub view_id: usize,
    pub box_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectQuery {
    pub embedding: Vec<f64>,
    pub p_ref: [f64; 3],
    pub source: QuerySource,
}

impl ObjectQuery {
    pub fn reference_point(&self) -> Point3<f64> {
        Point3::from(self.p_ref)
    }
}

/// Depths `start, start + step, …, end` (`count = 1` gives `[start]`).
pub fn linspace(start: f64, end: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![start],
        _ => (0..count)
            .map(|k| start + (end - start) * k as f64 / (count - 1) as f64)
            .collect(),
    }
}

fn point_on_center_ray(b: &Box2D, view: &CameraView, depth: f64) -> Result<Point3<f64>> {
    let (u, v) = b.center();
    unproject_2_5d(&Point2_5D { u, v, d: depth }, &view.intrinsics, &view.extrinsics)
}

/// `count` reference points on the box-centre ray at evenly spaced depths.
pub fn uniform_depth_queries(b: &Box2D, view: &CameraView, count: usize, range: (f64, f64)) -> Result<Vec<Point3<f64>>> {
    b.ensure_valid()?;
    linspace(range.0, range.1, count)
        .into_iter()
        .map(|d| point_on_center_ray(b, view, d))
        .collect()
}

/// Depth from similar triangles, `f_y · H / box_height`, clamped to [`DEPTH_RANGE`].
pub fn scale_based_depth(b: &Box2D, view: &CameraView, class_height: f64) -> Result<f64> {
    if !(b.height() > 0.0) {
        return Err(Error::DegenerateBox {
            width: b.width(),
            height: b.height(),
        });
    }
    Ok((view.intrinsics.fy * class_height / b.height()).clamp(DEPTH_RANGE.0, DEPTH_RANGE.1))
}

pub fn scale_based_depth_ref(b: &Box2D, view: &CameraView, class_height: f64) -> Result<Point3<f64>> {
    let d = scale_based_depth(b, view, class_height)?;
    point_on_center_ray(b, view, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{camera_rotation_for_yaw, equivalent_intrinsics, Intrinsics};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_view() -> CameraView {
        CameraView {
            intrinsics: Intrinsics::new(1000.0, 1000.0, 800.0, 450.0).unwrap(),
            extrinsics: Extrinsics::from_rotation_translation(
                &camera_rotation_for_yaw(0.4),
                &Vector3::new(0.3, -1.2, 0.8),
            ),
            width: 1600,
            height: 900,
            view_id: 0,
            timestamp: 0.0,
        }
    }

    fn feature_map(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> FeatureMap {
        let mut t = Tensor::zeros(&[h, w, c]);
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    let o = t.offset(&[r, col, ch]);
                    t.data[o] = f(r, col, ch);
                }
            }
        }
        FeatureMap::new(t, 16, 0).unwrap()
    }

    #[test]
    fn roi_align_constant_map() {
        let fm = feature_map(10, 12, 3, |_, _, _| 2.5);
        let roi = roi_align(&fm, &Box2D::new(13.0, 7.0, 101.0, 90.0), 7, 7).unwrap();
        assert_eq!(roi.values.shape, vec![7, 7, 3]);
        assert!(roi.values.data.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn roi_align_reproduces_affine_maps() {
        let fm = feature_map(20, 20, 2, |r, c, ch| if ch == 0 { 3.0 * c as f64 - 1.0 } else { -0.5 * r as f64 + 2.0 });
        let b = Box2D::new(40.0, 50.0, 200.0, 170.0);
        let roi = roi_align(&fm, &b, 7, 7).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let x = b.x_min + (j as f64 + 0.5) * b.width() / 7.0;
                let y = b.y_min + (i as f64 + 0.5) * b.height() / 7.0;
                let ex = 3.0 * (x / 16.0 - 0.5) - 1.0;
                let ey = -0.5 * (y / 16.0 - 0.5) + 2.0;
                assert!((roi.values.get(&[i, j, 0]) - ex).abs() < 1e-12);
                assert!((roi.values.get(&[i, j, 1]) - ey).abs() < 1e-12);
            }
        }
        // slope along x between adjacent samples is exact
        let dx = roi.values.get(&[0, 1, 0]) - roi.values.get(&[0, 0, 0]);
        assert!((dx - 3.0 * b.width() / 7.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn roi_align_rejects_outside_boxes() {
        let fm = feature_map(4, 4, 1, |_, _, _| 1.0);
        let err = roi_align(&fm, &Box2D::new(100.0, 100.0, 120.0, 130.0), 7, 7).unwrap_err();
        assert!(matches!(err, Error::EmptyRegion));
        assert!(roi_align(&fm, &Box2D::new(-30.0, -30.0, -1.0, -2.0), 7, 7).is_err());
    }

    #[test]
    fn zero_location_head_outputs_unit_depth() {
        let fm = feature_map(8, 8, 6, |r, c, ch| (r + c + ch) as f64 * 0.1);
        let b = Box2D::new(10.0, 10.0, 90.0, 70.0);
        let roi = roi_align(&fm, &b, 7, 7).unwrap();
        let k = equivalent_intrinsics(&test_view().intrinsics, &b, 7, 7).unwrap();
        let p = predict_roi_location(&roi, &k, &LocationHeadParams::zeros(6)).unwrap();
        assert_eq!(p, Point2_5D { u: 0.0, v: 0.0, d: 1.0 });
        assert_eq!(p.homogeneous(), nalgebra::Vector4::new(0.0, 0.0, 1.0, 1.0));
        assert!(predict_roi_location(&roi, &k, &LocationHeadParams::zeros(5)).is_err());
    }

    #[test]
    fn oracle_head_recovers_ray_point() {
        let view = test_view();
        let gt = Point3::new(20.0, 9.0, 0.8);
        let (u, v, _) = crate::geometry::project_world_to_pixel(&view, &gt).visible().unwrap();
        let b = Box2D::new(u - 40.0, v - 25.0, u + 60.0, v + 35.0);
        let k = equivalent_intrinsics(&view.intrinsics, &b, 7, 7).unwrap();
        let p = oracle_roi_location(&b, 7, 7, &view, &gt);
        assert_eq!((p.u, p.v), (3.5, 3.5));
        let p_ref = lift_reference_point(&p, &k, &view.extrinsics).unwrap();
        // closest point on the centre ray to gt
        let (c, dir) = view.pixel_ray(b.center().0, b.center().1);
        let foot = c + dir * (gt - c).dot(&dir);
        assert!((p_ref - foot).norm() < 1e-9);
    }

    #[test]
    fn lift_matches_explicit_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let view = test_view();
        for _ in 0..1000 {
            let x0 = rng.random_range(0.0..1400.0);
            let y0 = rng.random_range(0.0..800.0);
            let b = Box2D::new(x0, y0, x0 + rng.random_range(5.0..200.0), y0 + rng.random_range(5.0..100.0));
            let k = equivalent_intrinsics(&view.intrinsics, &b, 7, 7).unwrap();
            let p = Point2_5D {
                u: rng.random_range(0.0..7.0),
                v: rng.random_range(0.0..7.0),
                d: rng.random_range(0.5..65.0),
            };
            let lifted = lift_reference_point(&p, &k, &view.extrinsics).unwrap();
            // explicit element-wise inverse of K_roi then of [R|t]
            let ki = k.intrinsics;
            let cam = Vector3::new((p.u - ki.ox) / ki.fx * p.d, (p.v - ki.oy) / ki.fy * p.d, p.d);
            let r = view.extrinsics.rotation();
            let t = view.extrinsics.translation();
            let mut world = [0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    world[i] += r[(j, i)] * (cam[j] - t[j]);
                }
            }
            assert!((lifted - Point3::from(world)).norm() < 1e-9);
            // tape version agrees
            let mut g = Graph::new();
            let h = g.leaf(Tensor::row_vector(vec![p.u * p.d, p.v * p.d, p.d]));
            let w = lift_graph(&mut g, h, &k, &view.extrinsics);
            let wv = g.value(w);
            assert!((Point3::new(wv.data[0], wv.data[1], wv.data[2]) - lifted).norm() < 1e-9);
        }
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encode(&Point3::origin(), 12).unwrap();
        assert_eq!(pe.data, vec![0., 0., 0., 1., 1., 1., 0., 0., 0., 1., 1., 1.]);
        assert!(positional_encode(&Point3::origin(), 16).is_err());
        let p = Point3::new(12.3, -40.0, 1.1);
        let a = positional_encode(&p, 24).unwrap();
        let b = positional_encode(&p, 24).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| v.abs() <= 1.0));
        // tape layout agrees with the direct formula
        let mut g = Graph::new();
        let pn = g.leaf(Tensor::row_vector(vec![p.x, p.y, p.z]));
        let code = positional_encode_graph(&mut g, pn, 24);
        assert!(g.value(code).max_abs_diff(&a) < 1e-12);
        // second frequency block uses 10000^{2/C}
        let f1 = 1.0 / 10000f64.powf(2.0 / 24.0);
        assert!((a.data[6] - (p.x * PI / SCENE_RANGE * f1).sin()).abs() < 1e-12);
        assert!((a.data[9] - (p.x * PI / SCENE_RANGE * f1).cos()).abs() < 1e-12);
    }

    #[test]
    fn positional_encoding_is_injective_on_grid() {
        let mut codes = std::collections::HashSet::new();
        let mut count = 0;
        let mut x = -SCENE_RANGE;
        while x <= SCENE_RANGE {
            let mut y = -SCENE_RANGE;
            while y <= SCENE_RANGE {
                for z in [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0] {
                    let pe = positional_encode(&Point3::new(x, y, z), 12).unwrap();
                    let key: Vec<i64> = pe.data.iter().map(|v| (v * 1e9).round() as i64).collect();
                    codes.insert(key);
                    count += 1;
                }
                y += 0.5;
            }
            x += 0.5;
        }
        assert_eq!(codes.len(), count, "collisions on the 0.5 m grid");
    }

    #[test]
    fn init_query_identity_and_zero() {
        let pe = positional_encode(&Point3::new(1.0, 2.0, 3.0), 6).unwrap();
        let q = init_query(&pe, &Tensor::identity(6), &Tensor::zeros(&[1, 6])).unwrap();
        assert_eq!(q.data, pe.data);
        let bias = Tensor::row_vector(vec![1., 2., 3., 4., 5., 6.]);
        let q = init_query(&pe, &Tensor::zeros(&[6, 6]), &bias).unwrap();
        assert_eq!(q.data, bias.data);
        assert!(init_query(&pe, &Tensor::zeros(&[5, 6]), &bias).is_err());
    }

    #[test]
    fn uniform_depth_samples_lie_on_one_ray() {
        let view = test_view();
        let b = Box2D::new(500.0, 300.0, 620.0, 380.0);
        let pts = uniform_depth_queries(&b, &view, 10, DEPTH_RANGE).unwrap();
        assert_eq!(pts.len(), 10);
        let depths: Vec<f64> = pts.iter().map(|p| view.extrinsics.world_to_camera(p).z).collect();
        for (k, d) in depths.iter().enumerate() {
            assert!((d - (0.5 + 64.5 / 9.0 * k as f64)).abs() < 1e-9);
        }
        assert!((depths[1] - 7.666_666_666_666_667).abs() < 1e-9);
        let c = view.extrinsics.camera_center();
        let d0 = (pts[0] - c).normalize();
        for p in &pts[1..] {
            assert!(d0.cross(&(p - c).normalize()).norm() < 1e-9);
        }
        let single = uniform_depth_queries(&b, &view, 1, DEPTH_RANGE).unwrap();
        assert!((view.extrinsics.world_to_camera(&single[0]).z - 0.5).abs() < 1e-12);
    }

    #[test]
    fn scale_based_depth_follows_similar_triangles() {
        let mut view = test_view();
        view.intrinsics.fy = 1000.0;
        let b = Box2D::new(100.0, 100.0, 150.0, 200.0);
        assert!((scale_based_depth(&b, &view, 1.5).unwrap() - 15.0).abs() < 1e-12);
        let tall = Box2D::new(100.0, 100.0, 150.0, 300.0);
        assert!((scale_based_depth(&tall, &view, 1.5).unwrap() - 7.5).abs() < 1e-12);
        let tiny = Box2D::new(100.0, 100.0, 101.0, 101.0);
        assert_eq!(scale_based_depth(&tiny, &view, 1.5).unwrap(), 65.0);
        let huge = Box2D::new(0.0, 0.0, 100.0, 900.0);
        assert_eq!(scale_based_depth(&huge, &view, 0.1).unwrap(), 0.5);
        assert!(scale_based_depth(&Box2D::new(0.0, 5.0, 1.0, 5.0), &view, 1.5).is_err());
        let p = scale_based_depth_ref(&b, &view, 1.5).unwrap();
        assert!((view.extrinsics.world_to_camera(&p).z - 15.0).abs() < 1e-9);
    }

    #[test]
    fn grid_size_rounds_up() {
        assert_eq!(FeatureMap::grid_size(1600, 900, 16), (57, 100));
        assert_eq!(FeatureMap::grid_size(800, 450, 16), (29, 50));
    }
}
