//! Cross-view association of detections through projected RoI frustums.
//!
//! Each query box spans a frustum: the RoI rectangle swept over a fixed set
//! of depths. Mapping that frustum into another view gives a minimum
//! bounding box there, and the other view's detections that overlap it are
//! the query's relevant regions. The feature cells covered by the source box
//! and the relevant boxes become the query's keys and values.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Point3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    equivalent_intrinsics, view_transform, Box2D, CameraMatrix, CameraView, EquivalentIntrinsics,
    BEHIND_CAMERA_EPS,
};
use crate::query_gen::FeatureMap;
use crate::tensor::Tensor;

/// RoI-frame meshgrid swept over depth, `W_roi × H_roi × D × 4`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrustumGrid {
    pub points: Tensor,
    pub depth_values: Vec<f64>,
    pub roi_w: usize,
    pub roi_h: usize,
}

impl FrustumGrid {
    pub fn len(&self) -> usize {
        self.roi_w * self.roi_h * self.depth_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Homogeneous point `(x·d, y·d, d, 1)` at grid index `(i, j, k)`.
    pub fn point(&self, i: usize, j: usize, k: usize) -> Vector4<f64> {
        let o = self.points.offset(&[i, j, k, 0]);
        Vector4::from_column_slice(&self.points.data[o..o + 4])
    }

    /// RoI-frame camera points of the eight hull corners, indexed by bits
    /// `(x_max, y_max, far)`.
    fn corners(&self) -> [Vector4<f64>; 8] {
        let (wi, hi, di) = (self.roi_w - 1, self.roi_h - 1, self.depth_values.len() - 1);
        std::array::from_fn(|bits| {
            self.point(
                if bits & 1 != 0 { wi } else { 0 },
                if bits & 2 != 0 { hi } else { 0 },
                if bits & 4 != 0 { di } else { 0 },
            )
        })
    }
}

pub fn build_frustum_grid(roi_w: usize, roi_h: usize, depth_values: &[f64]) -> Result<FrustumGrid> {
    if roi_w < 2 || roi_h < 2 {
        return Err(Error::Config(format!(
            "frustum grid needs at least 2x2 RoI samples, got {roi_w}x{roi_h}"
        )));
    }
    if depth_values.is_empty() {
        return Err(Error::Config("frustum grid needs at least one depth".into()));
    }
    if depth_values.iter().any(|&d| !(d > 0.0 && d.is_finite()))
        || depth_values.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::Config("depths must be positive and strictly increasing".into()));
    }
    let d = depth_values.len();
    let mut points = Tensor::zeros(&[roi_w, roi_h, d, 4]);
    for i in 0..roi_w {
        let x = i as f64 * roi_w as f64 / (roi_w - 1) as f64;
        for j in 0..roi_h {
            let y = j as f64 * roi_h as f64 / (roi_h - 1) as f64;
            for (k, &dz) in depth_values.iter().enumerate() {
                let o = points.offset(&[i, j, k, 0]);
                points.data[o..o + 4].copy_from_slice(&[x * dz, y * dz, dz, 1.0]);
            }
        }
    }
    Ok(FrustumGrid {
        points,
        depth_values: depth_values.to_vec(),
        roi_w,
        roi_h,
    })
}

/// Frustum hull edges as corner-index pairs.
const HULL_EDGES: [(usize, usize); 12] = [
    (0, 1), (2, 3), (4, 5), (6, 7), // along x
    (0, 2), (1, 3), (4, 6), (5, 7), // along y
    (0, 4), (1, 5), (2, 6), (3, 7), // along depth
];

/// Bounding box of the frustum's part in front of `dst`, without clipping
/// to the image. Grid points behind the camera are dropped; where the hull
/// crosses the camera plane, the crossing points of its edges are added so
/// the box bounds the whole visible part of the frustum.
pub fn frustum_min_box_unclipped(
    grid: &FrustumGrid,
    k_roi: &EquivalentIntrinsics,
    src: &CameraView,
    dst: &CameraView,
) -> Option<Box2D> {
    let to_dst = view_transform(src, dst) * k_roi.inverse_matrix();
    let k = dst.intrinsics;
    let mut acc: Option<(f64, f64, f64, f64)> = None;
    let mut add = |p: &Vector4<f64>| {
        let (u, v) = (k.fx * p.x / p.z + k.ox, k.fy * p.y / p.z + k.oy);
        acc = Some(match acc {
            None => (u, v, u, v),
            Some((a, b, c, d)) => (a.min(u), b.min(v), c.max(u), d.max(v)),
        });
    };
    let d = grid.depth_values.len();
    for i in 0..grid.roi_w {
        for j in 0..grid.roi_h {
            for kk in 0..d {
                let p = to_dst * grid.point(i, j, kk);
                if p.z > BEHIND_CAMERA_EPS {
                    add(&p);
                }
            }
        }
    }
    let corners = grid.corners().map(|c| to_dst * c);
    for (a, b) in HULL_EDGES {
        let (pa, pb) = (corners[a], corners[b]);
        if (pa.z - BEHIND_CAMERA_EPS) * (pb.z - BEHIND_CAMERA_EPS) < 0.0 {
            let t = (BEHIND_CAMERA_EPS - pa.z) / (pb.z - pa.z);
            let mut p = pa + (pb - pa) * t;
            p.z = BEHIND_CAMERA_EPS;
            add(&p);
        }
    }
    acc.map(|(x0, y0, x1, y1)| {
        let mut b = Box2D::new(x0, y0, x1, y1);
        b.box_id = k_roi.box_id;
        b
    })
}

/// Minimum box of the projected frustum, clipped to the `dst` image.
pub fn project_frustum_min_box(
    grid: &FrustumGrid,
    k_roi: &EquivalentIntrinsics,
    src: &CameraView,
    dst: &CameraView,
) -> Option<Box2D> {
    frustum_min_box_unclipped(grid, k_roi, src, dst)?.clip(dst.width as f64, dst.height as f64)
}

pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceRule {
    /// Per other view, the single box with the highest positive IoU.
    Top1,
    /// Every box with positive IoU.
    AllOverlapped,
}

impl fmt::Display for RelevanceRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelevanceRule::Top1 => "top1",
            RelevanceRule::AllOverlapped => "all_overlapped",
        })
    }
}

impl FromStr for RelevanceRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(RelevanceRule::Top1),
            "all_overlapped" | "ao" => Ok(RelevanceRule::AllOverlapped),
            other => Err(Error::Config(format!("unknown relevance rule `{other}`"))),
        }
    }
}

/// Box ids in `candidates` selected against a projected frustum box.
/// Ties in the top-1 rule go to the lowest box id.
pub fn select_from_projection(projected: &Box2D, candidates: &[Box2D], rule: RelevanceRule) -> Vec<usize> {
    match rule {
        RelevanceRule::AllOverlapped => {
            let mut ids: Vec<usize> = candidates
                .iter()
                .filter(|b| iou_2d(projected, b) > 0.0)
                .map(|b| b.box_id)
                .collect();
            ids.sort_unstable();
            ids
        }
        RelevanceRule::Top1 => candidates
            .iter()
            .map(|b| (iou_2d(projected, b), b.box_id))
            .filter(|(iou, _)| *iou > 0.0)
            .fold(None, |best: Option<(f64, usize)>, (iou, id)| match best {
                Some((bi, bid)) if bi > iou || (bi == iou && bid < id) => Some((bi, bid)),
                _ => Some((iou, id)),
            })
            .map(|(_, id)| vec![id])
            .unwrap_or_default(),
    }
}

/// A `(view, box)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RegionRef {
    pub view_id: usize,
    pub box_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedBox {
    pub view_id: usize,
    pub bbox: Box2D,
}

/// The regions whose features a query may attend to. The source region is
/// always first; the rest are sorted by `(view_id, box_id)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevantSet {
    pub query_id: usize,
    pub source: RegionRef,
    pub rule: RelevanceRule,
    pub members: Vec<RegionRef>,
    pub projected_boxes: Vec<ProjectedBox>,
}

impl RelevantSet {
    pub fn member_set(&self) -> BTreeSet<RegionRef> {
        self.members.iter().copied().collect()
    }
}

/// One view's camera and its detections.
#[derive(Clone, Copy, Debug)]
pub struct ViewDetections<'a> {
    pub view: &'a CameraView,
    pub boxes: &'a [Box2D],
}

/// Frustum projection settings shared by every query.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationConfig {
    pub roi_w: usize,
    pub roi_h: usize,
    pub depth_values: Vec<f64>,
    pub rule: RelevanceRule,
}

pub fn select_relevant(
    query_id: usize,
    source_view: &CameraView,
    source_box: &Box2D,
    views: &[ViewDetections<'_>],
    cfg: &AssociationConfig,
) -> Result<RelevantSet> {
    let k_roi = equivalent_intrinsics(&source_view.intrinsics, source_box, cfg.roi_w, cfg.roi_h)?;
    let grid = build_frustum_grid(cfg.roi_w, cfg.roi_h, &cfg.depth_values)?;
    let source = RegionRef {
        view_id: source_view.view_id,
        box_id: source_box.box_id,
    };
    let mut others = BTreeSet::new();
    let mut projected_boxes = Vec::new();
    for vd in views {
        if vd.view.view_id == source_view.view_id {
            continue;
        }
        let Some(projected) = project_frustum_min_box(&grid, &k_roi, source_view, vd.view) else {
            continue;
        };
        for box_id in select_from_projection(&projected, vd.boxes, cfg.rule) {
            others.insert(RegionRef {
                view_id: vd.view.view_id,
                box_id,
            });
        }
        projected_boxes.push(ProjectedBox {
            view_id: vd.view.view_id,
            bbox: projected,
        });
    }
    let mut members = vec![source];
    members.extend(others);
    Ok(RelevantSet {
        query_id,
        source,
        rule: cfg.rule,
        members,
        projected_boxes,
    })
}

/// A feature cell in one view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyIndex {
    pub view_id: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyIndexSet {
    pub query_id: usize,
    pub indices: Vec<KeyIndex>,
}

fn find_box<'a>(views: &'a [ViewDetections<'_>], r: &RegionRef) -> Result<(&'a CameraView, &'a Box2D)> {
    views
        .iter()
        .find(|vd| vd.view.view_id == r.view_id)
        .and_then(|vd| vd.boxes.iter().find(|b| b.box_id == r.box_id).map(|b| (vd.view, b)))
        .ok_or_else(|| Error::Config(format!("region {r:?} not found among detections")))
}

/// Feature cells whose centres lie strictly inside a member box, in
/// `(view, row, col)` order. When no cell qualifies, the cell containing the
/// source box centre is used so every query has at least one key.
pub fn gather_key_indices(rset: &RelevantSet, views: &[ViewDetections<'_>], stride: usize) -> Result<KeyIndexSet> {
    let s = stride as f64;
    let mut cells = BTreeSet::new();
    for member in &rset.members {
        let (view, b) = find_box(views, member)?;
        let (hf, wf) = FeatureMap::grid_size(view.width, view.height, stride);
        let row_lo = ((b.y_min / s - 0.5).floor().max(0.0)) as usize;
        let row_hi = ((b.y_max / s - 0.5).ceil().max(0.0) as usize).min(hf.saturating_sub(1));
        let col_lo = ((b.x_min / s - 0.5).floor().max(0.0)) as usize;
        let col_hi = ((b.x_max / s - 0.5).ceil().max(0.0) as usize).min(wf.saturating_sub(1));
        for row in row_lo..=row_hi {
            for col in col_lo..=col_hi {
                let (cx, cy) = (col as f64 * s + s / 2.0, row as f64 * s + s / 2.0);
                if b.contains_strict(cx, cy) {
                    cells.insert(KeyIndex {
                        view_id: member.view_id,
                        row,
                        col,
                    });
                }
            }
        }
    }
    if cells.is_empty() {
        let (view, b) = find_box(views, &rset.source)?;
        let (hf, wf) = FeatureMap::grid_size(view.width, view.height, stride);
        let (cx, cy) = b.center();
        cells.insert(KeyIndex {
            view_id: rset.source.view_id,
            row: ((cy / s).floor().max(0.0) as usize).min(hf - 1),
            col: ((cx / s).floor().max(0.0) as usize).min(wf - 1),
        });
    }
    Ok(KeyIndexSet {
        query_id: rset.query_id,
        indices: cells.into_iter().collect(),
    })
}

/// World point from a source-view RoI coordinate and depth (test helper for
/// frustum sampling).
pub fn roi_point_to_world(k_roi: &EquivalentIntrinsics, src: &CameraView, x: f64, y: f64, d: f64) -> Point3<f64> {
    let cam = k_roi.inverse_matrix() * Vector4::new(x * d, y * d, d, 1.0);
    src.extrinsics.camera_to_world(&Point3::new(cam.x, cam.y, cam.z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{camera_rotation_for_yaw, project_world_to_pixel, Extrinsics, Intrinsics};
    use crate::query_gen::{linspace, DEPTH_RANGE};
    use nalgebra::Vector3;

    fn view(yaw: f64, pos: Vector3<f64>, id: usize) -> CameraView {
        let rot = camera_rotation_for_yaw(yaw);
        let t = -(rot * pos);
        CameraView {
            intrinsics: Intrinsics::new(600.0, 600.0, 400.0, 225.0).unwrap(),
            extrinsics: Extrinsics::from_rotation_translation(&rot, &t),
            width: 800,
            height: 450,
            view_id: id,
            timestamp: 0.0,
        }
    }

    #[test]
    fn grid_corners_and_size() {
        let g = build_frustum_grid(2, 2, &[1.0, 2.0]).unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g.point(0, 0, 0), Vector4::new(0.0, 0.0, 1.0, 1.0));
        assert_eq!(g.point(1, 1, 1), Vector4::new(4.0, 4.0, 2.0, 1.0));
        // (x, y) = (2, 2) at d = 2 is stored as (x·d, y·d, d, 1)
        assert_eq!(g.point(1, 1, 1) / 2.0, Vector4::new(2.0, 2.0, 1.0, 0.5));
        let default = build_frustum_grid(7, 7, &linspace(DEPTH_RANGE.0, DEPTH_RANGE.1, 10)).unwrap();
        assert_eq!(default.len(), 490);
        assert!(default.points.data.chunks(4).all(|p| p[3] == 1.0));
        assert!(build_frustum_grid(1, 7, &[1.0]).is_err());
        assert!(build_frustum_grid(7, 7, &[2.0, 1.0]).is_err());
        assert!(build_frustum_grid(7, 7, &[]).is_err());
    }

    #[test]
    fn identity_transform_recovers_source_box() {
        let v = view(0.0, Vector3::new(0.0, 0.0, 1.5), 0);
        let b = Box2D::new(300.0, 150.0, 420.0, 260.0);
        let k = equivalent_intrinsics(&v.intrinsics, &b, 7, 7).unwrap();
        let grid = build_frustum_grid(7, 7, &linspace(0.5, 65.0, 10)).unwrap();
        let m = project_frustum_min_box(&grid, &k, &v, &v).unwrap();
        for (a, e) in [(m.x_min, b.x_min), (m.y_min, b.y_min), (m.x_max, b.x_max), (m.y_max, b.y_max)] {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn camera_facing_away_sees_nothing() {
        let src = view(0.0, Vector3::new(0.0, 0.0, 1.5), 0);
        let dst = view(std::f64::consts::PI, Vector3::new(-2.0, 0.0, 1.5), 1);
        let b = Box2D::new(350.0, 180.0, 450.0, 260.0);
        let k = equivalent_intrinsics(&src.intrinsics, &b, 7, 7).unwrap();
        let grid = build_frustum_grid(7, 7, &linspace(0.5, 65.0, 10)).unwrap();
        assert!(frustum_min_box_unclipped(&grid, &k, &src, &dst).is_none());
        assert!(project_frustum_min_box(&grid, &k, &src, &dst).is_none());
    }

    #[test]
    fn iou_reference_values() {
        let a = Box2D::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou_2d(&a, &a), 1.0);
        assert_eq!(iou_2d(&a, &Box2D::new(3.0, 3.0, 4.0, 4.0)), 0.0);
        assert_eq!(iou_2d(&a, &Box2D::new(2.0, 0.0, 4.0, 2.0)), 0.0, "touching edges");
        assert!((iou_2d(&a, &Box2D::new(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn top1_tie_break_prefers_lowest_id() {
        let p = Box2D::new(0.0, 0.0, 10.0, 10.0);
        let c = vec![
            Box2D::new(5.0, 0.0, 15.0, 10.0).with_ids(0, 4),
            Box2D::new(-5.0, 0.0, 5.0, 10.0).with_ids(0, 2),
            Box2D::new(20.0, 20.0, 30.0, 30.0).with_ids(0, 1),
        ];
        assert_eq!(select_from_projection(&p, &c, RelevanceRule::Top1), vec![2]);
        let mut rev = c.clone();
        rev.reverse();
        assert_eq!(select_from_projection(&p, &rev, RelevanceRule::Top1), vec![2]);
        assert_eq!(select_from_projection(&p, &c, RelevanceRule::AllOverlapped), vec![2, 4]);
        let far = Box2D::new(100.0, 100.0, 110.0, 110.0);
        assert!(select_from_projection(&far, &c, RelevanceRule::Top1).is_empty());
    }

    #[test]
    fn isolated_query_keeps_only_its_source() {
        let v0 = view(0.0, Vector3::new(0.0, 0.0, 1.5), 0);
        let v1 = view(std::f64::consts::PI, Vector3::new(-1.0, 0.0, 1.5), 1);
        let b0 = [Box2D::new(300.0, 150.0, 420.0, 260.0).with_ids(0, 0)];
        let b1 = [Box2D::new(10.0, 10.0, 60.0, 60.0).with_ids(0, 0)];
        let views = [ViewDetections { view: &v0, boxes: &b0 }, ViewDetections { view: &v1, boxes: &b1 }];
        let cfg = AssociationConfig {
            roi_w: 7,
            roi_h: 7,
            depth_values: linspace(0.5, 65.0, 10),
            rule: RelevanceRule::AllOverlapped,
        };
        let r = select_relevant(3, &v0, &b0[0], &views, &cfg).unwrap();
        assert_eq!(r.members, vec![RegionRef { view_id: 0, box_id: 0 }]);
        assert_eq!(r.query_id, 3);
    }

    #[test]
    fn gather_counts_cells_by_centre() {
        let v = view(0.0, Vector3::zeros(), 0);
        let boxes = [
            Box2D::new(0.0, 0.0, 32.0, 32.0).with_ids(0, 0),
            Box2D::new(16.0, 16.0, 48.0, 48.0).with_ids(0, 1),
            Box2D::new(84.0, 52.0, 90.0, 58.0).with_ids(0, 2),
        ];
        let views = [ViewDetections { view: &v, boxes: &boxes }];
        let rset = |members: Vec<usize>| RelevantSet {
            query_id: 0,
            source: RegionRef { view_id: 0, box_id: members[0] },
            rule: RelevanceRule::Top1,
            members: members.into_iter().map(|b| RegionRef { view_id: 0, box_id: b }).collect(),
            projected_boxes: vec![],
        };
        let k = gather_key_indices(&rset(vec![0]), &views, 16).unwrap();
        assert_eq!(k.indices.len(), 4);
        let k = gather_key_indices(&rset(vec![0, 1]), &views, 16).unwrap();
        // union of 2x2 blocks at (0..1) and (1..2) shares one cell
        assert_eq!(k.indices.len(), 7);
        assert!(k.indices.windows(2).all(|w| w[0] < w[1]));
        let k = gather_key_indices(&rset(vec![2]), &views, 16).unwrap();
        assert_eq!(k.indices, vec![KeyIndex { view_id: 0, row: 3, col: 5 }]);
    }

    #[test]
    fn frustum_contains_sampled_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let depths = linspace(0.5, 65.0, 10);
        let grid = build_frustum_grid(7, 7, &depths).unwrap();
        let mut checked = 0;
        for _ in 0..2000 {
            let src = view(rng.random_range(-3.1..3.1), Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 1.5), 0);
            let dst = view(rng.random_range(-3.1..3.1), Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 1.5), 1);
            let x0 = rng.random_range(0.0..700.0);
            let y0 = rng.random_range(0.0..400.0);
            let b = Box2D::new(x0, y0, x0 + rng.random_range(4.0..100.0), y0 + rng.random_range(4.0..50.0));
            let k = equivalent_intrinsics(&src.intrinsics, &b, 7, 7).unwrap();
            let mb = frustum_min_box_unclipped(&grid, &k, &src, &dst);
            let x = roi_point_to_world(&k, &src, rng.random_range(0.0..7.0), rng.random_range(0.0..7.0), rng.random_range(0.5..65.0));
            if let Some((u, v, _)) = project_world_to_pixel(&dst, &x).visible() {
                let mb = mb.expect("visible point implies a box");
                assert!(u >= mb.x_min && u <= mb.x_max && v >= mb.y_min && v <= mb.y_max);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}
