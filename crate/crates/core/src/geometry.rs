//! Pinhole cameras, rigid transforms, and per-RoI equivalent intrinsics.
//!
//! Conventions: camera frame is x right, y down, z forward. Extrinsics map
//! homogeneous world points into the camera frame. A 2.5D point `(u, v, d)`
//! is packed homogeneously as `(u·d, v·d, d, 1)`, so `K⁻¹` applied to it
//! gives the camera-frame point directly.

use nalgebra::{Matrix3, Matrix4, Point3, Rotation3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points with camera-frame z at or below this are behind the camera.
pub const BEHIND_CAMERA_EPS: f64 = 1e-6;

/// Default RoI extent (cells per side).
pub const DEFAULT_ROI: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub ox: f64,
    pub oy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, ox: f64, oy: f64) -> Result<Self> {
        let k = Intrinsics { fx, fy, ox, oy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.ox.is_finite() || !self.oy.is_finite() {
            return Err(Error::Geometry(format!(
                "focal lengths must be positive and finite, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn identity() -> Self {
        Intrinsics {
            fx: 1.0,
            fy: 1.0,
            ox: 0.0,
            oy: 0.0,
        }
    }
}

/// Anything usable as a 4×4 pinhole intrinsic matrix.
pub trait CameraMatrix {
    fn pinhole(&self) -> Intrinsics;

    fn matrix(&self) -> Matrix4<f64> {
        let k = self.pinhole();
        Matrix4::new(
            k.fx, 0.0, k.ox, 0.0, //
            0.0, k.fy, k.oy, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        )
    }

    fn inverse_matrix(&self) -> Matrix4<f64> {
        let k = self.pinhole();
        Matrix4::new(
            1.0 / k.fx, 0.0, -k.ox / k.fx, 0.0, //
            0.0, 1.0 / k.fy, -k.oy / k.fy, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        )
    }

    /// Upper-left 3×3 inverse, mapping `(u·d, v·d, d)` to camera coordinates.
    fn inverse3(&self) -> Matrix3<f64> {
        self.inverse_matrix().fixed_view::<3, 3>(0, 0).into_owned()
    }
}

impl CameraMatrix for Intrinsics {
    fn pinhole(&self) -> Intrinsics {
        *self
    }
}

/// Intrinsics of a rescaled RoI treated as its own camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalentIntrinsics {
    pub intrinsics: Intrinsics,
    pub r_x: f64,
    pub r_y: f64,
    pub box_id: usize,
}

impl CameraMatrix for EquivalentIntrinsics {
    fn pinhole(&self) -> Intrinsics {
        self.intrinsics
    }
}

impl EquivalentIntrinsics {
    /// The four informative entries, each divided by 100.
    pub fn descriptor(&self) -> [f64; 4] {
        let k = self.intrinsics;
        [k.fx / 100.0, k.fy / 100.0, k.ox / 100.0, k.oy / 100.0]
    }
}

/// Rigid world→camera transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsics(Matrix4<f64>);

impl Extrinsics {
    pub fn identity() -> Self {
        Extrinsics(Matrix4::identity())
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 {
            return Err(Error::Geometry(format!("rotation not orthonormal (err {ortho:e})")));
        }
        if (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Geometry("rotation determinant is not +1".into()));
        }
        let bottom = m.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
            return Err(Error::Geometry("bottom row must be (0,0,0,1)".into()));
        }
        Ok(Extrinsics(m))
    }

    pub fn from_rotation_translation(rotation: &Rotation3<f64>, translation: &Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
        Extrinsics(m)
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::Shape(format!("extrinsic needs 16 values, got {}", values.len())));
        }
        Extrinsics::from_matrix(Matrix4::from_row_slice(values))
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.0.transpose().as_slice().to_vec()
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Closed-form rigid inverse (camera→world).
    pub fn inverse_matrix(&self) -> Matrix4<f64> {
        let rt = self.rotation().transpose();
        let t = -rt * self.translation();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }

    /// Camera centre in world coordinates.
    pub fn camera_center(&self) -> Point3<f64> {
        Point3::from(-self.rotation().transpose() * self.translation())
    }

    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation() * p.coords + self.translation())
    }

    pub fn camera_to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation().transpose() * (p.coords - self.translation()))
    }
}

impl Serialize for Extrinsics {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Extrinsics {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Extrinsics::from_row_major(&v).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
    pub width: u32,
    pub height: u32,
    pub view_id: usize,
    pub timestamp: f64,
}

impl CameraView {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.width == 0 || self.height == 0 {
            return Err(Error::Geometry("image size must be positive".into()));
        }
        Ok(())
    }

    /// Full 3×4-style projection matrix `K · [R|t]`.
    pub fn projection_matrix(&self) -> Matrix4<f64> {
        self.intrinsics.matrix() * self.extrinsics.matrix()
    }

    /// Unit ray direction in world coordinates through pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> (Point3<f64>, Vector3<f64>) {
        let k = self.intrinsics;
        let dir_cam = Vector3::new((u - k.ox) / k.fx, (v - k.oy) / k.fy, 1.0);
        let dir = self.extrinsics.rotation().transpose() * dir_cam;
        (self.extrinsics.camera_center(), dir.normalize())
    }
}

/// Axis-aligned image box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
    pub class_id: usize,
    pub box_id: usize,
    /// Ground-truth object this box was derived from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<usize>,
}

impl Box2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Box2D {
            x_min,
            y_min,
            x_max,
            y_max,
            score: 1.0,
            class_id: 0,
            box_id: 0,
            object_id: None,
        }
    }

    pub fn with_ids(mut self, class_id: usize, box_id: usize) -> Self {
        self.class_id = class_id;
        self.box_id = box_id;
        self
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_max > self.x_min && self.y_max > self.y_min
    }

    pub fn ensure_valid(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::DegenerateBox {
                width: self.width(),
                height: self.height(),
            })
        }
    }

    pub fn contains_strict(&self, x: f64, y: f64) -> bool {
        x > self.x_min && x < self.x_max && y > self.y_min && y < self.y_max
    }

    /// Intersection with `[0,w]×[0,h]`, `None` when empty.
    pub fn clip(&self, width: f64, height: f64) -> Option<Box2D> {
        let mut b = *self;
        b.x_min = b.x_min.max(0.0);
        b.y_min = b.y_min.max(0.0);
        b.x_max = b.x_max.min(width);
        b.y_max = b.y_max.min(height);
        b.is_valid().then_some(b)
    }
}

/// A pixel plus depth; homogeneous form `(u·d, v·d, d, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2_5D {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

impl Point2_5D {
    pub fn homogeneous(&self) -> Vector4<f64> {
        Vector4::new(self.u * self.d, self.v * self.d, self.d, 1.0)
    }
}

/// RoI rescale factors for `box` resampled to `roi_w × roi_h`.
fn roi_scale(b: &Box2D, roi_w: usize, roi_h: usize) -> Result<(f64, f64)> {
    b.ensure_valid()?;
    if roi_w == 0 || roi_h == 0 {
        return Err(Error::Config("RoI size must be at least 1x1".into()));
    }
    Ok((roi_w as f64 / b.width(), roi_h as f64 / b.height()))
}

pub fn equivalent_intrinsics(k: &Intrinsics, b: &Box2D, roi_w: usize, roi_h: usize) -> Result<EquivalentIntrinsics> {
    let (r_x, r_y) = roi_scale(b, roi_w, roi_h)?;
    Ok(EquivalentIntrinsics {
        intrinsics: Intrinsics {
            fx: k.fx * r_x,
            fy: k.fy * r_y,
            ox: (k.ox - b.x_min) * r_x,
            oy: (k.oy - b.y_min) * r_y,
        },
        r_x,
        r_y,
        box_id: b.box_id,
    })
}

pub fn pixel_to_roi_coords(b: &Box2D, roi_w: usize, roi_h: usize, u: f64, v: f64) -> Result<(f64, f64)> {
    let (r_x, r_y) = roi_scale(b, roi_w, roi_h)?;
    Ok(((u - b.x_min) * r_x, (v - b.y_min) * r_y))
}

pub fn roi_to_pixel_coords(b: &Box2D, roi_w: usize, roi_h: usize, u: f64, v: f64) -> Result<(f64, f64)> {
    let (r_x, r_y) = roi_scale(b, roi_w, roi_h)?;
    Ok((u / r_x + b.x_min, v / r_y + b.y_min))
}

/// `[R|t]⁻¹ K⁻¹ (u·d, v·d, d, 1)`, dehomogenised.
pub fn unproject_2_5d(p: &Point2_5D, k: &impl CameraMatrix, ext: &Extrinsics) -> Result<Point3<f64>> {
    if !(p.d > 0.0) {
        return Err(Error::InvalidDepth(p.d));
    }
    let h = ext.inverse_matrix() * k.inverse_matrix() * p.homogeneous();
    Ok(Point3::new(h.x / h.w, h.y / h.w, h.z / h.w))
}

/// Pixel and depth of a world point as seen by one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Visible { u: f64, v: f64, depth: f64 },
    BehindCamera,
}

impl Projection {
    pub fn visible(self) -> Option<(f64, f64, f64)> {
        match self {
            Projection::Visible { u, v, depth } => Some((u, v, depth)),
            Projection::BehindCamera => None,
        }
    }
}

pub fn project_camera_point(k: &impl CameraMatrix, p_cam: &Point3<f64>) -> Projection {
    if p_cam.z <= BEHIND_CAMERA_EPS {
        return Projection::BehindCamera;
    }
    let k = k.pinhole();
    Projection::Visible {
        u: k.fx * p_cam.x / p_cam.z + k.ox,
        v: k.fy * p_cam.y / p_cam.z + k.oy,
        depth: p_cam.z,
    }
}

pub fn project_world_to_pixel(view: &CameraView, p_world: &Point3<f64>) -> Projection {
    project_camera_point(&view.intrinsics, &view.extrinsics.world_to_camera(p_world))
}

/// `T_{src→dst} = ext_dst · ext_src⁻¹`, mapping src-camera to dst-camera coordinates.
pub fn view_transform(src: &CameraView, dst: &CameraView) -> Matrix4<f64> {
    dst.extrinsics.matrix() * src.extrinsics.inverse_matrix()
}

/// Rotation that takes camera axes (x right, y down, z forward) to a world
/// frame with x forward, y left, z up, for a camera looking along `yaw`.
pub fn camera_rotation_for_yaw(yaw: f64) -> Rotation3<f64> {
    let forward = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let left = Vector3::new(-yaw.sin(), yaw.cos(), 0.0);
    let up = Vector3::z();
    // rows are the camera axes expressed in world coordinates
    let m = Matrix3::from_rows(&[(-left).transpose(), (-up).transpose(), forward.transpose()]);
    Rotation3::from_matrix_unchecked(m)
}

/// One entry of the camera rig JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigViewRecord {
    pub id: usize,
    pub timestamp: f64,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub ox: f64,
    pub oy: f64,
    /// 16 numbers, row-major.
    pub extrinsic: Vec<f64>,
}

/// `{ "views": [ ... ] }`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigFile {
    pub views: Vec<RigViewRecord>,
}

impl RigFile {
    pub fn from_views(views: &[CameraView]) -> Self {
        RigFile {
            views: views
                .iter()
                .map(|v| RigViewRecord {
                    id: v.view_id,
                    timestamp: v.timestamp,
                    width: v.width,
                    height: v.height,
                    fx: v.intrinsics.fx,
                    fy: v.intrinsics.fy,
                    ox: v.intrinsics.ox,
                    oy: v.intrinsics.oy,
                    extrinsic: v.extrinsics.to_row_major(),
                })
                .collect(),
        }
    }

    pub fn to_views(&self) -> Result<Vec<CameraView>> {
        let mut seen = std::collections::BTreeSet::new();
        self.views
            .iter()
            .map(|r| {
                if !seen.insert(r.id) {
                    return Err(Error::Geometry(format!("duplicate view id {}", r.id)));
                }
                let view = CameraView {
                    intrinsics: Intrinsics::new(r.fx, r.fy, r.ox, r.oy)?,
                    extrinsics: Extrinsics::from_row_major(&r.extrinsic)?,
                    width: r.width,
                    height: r.height,
                    view_id: r.id,
                    timestamp: r.timestamp,
                };
                view.validate()?;
                Ok(view)
            })
            .collect()
    }
}

impl Serialize for CameraView {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RigViewRecord {
            id: self.view_id,
            timestamp: self.timestamp,
            width: self.width,
            height: self.height,
            fx: self.intrinsics.fx,
            fy: self.intrinsics.fy,
            ox: self.intrinsics.ox,
            oy: self.intrinsics.oy,
            extrinsic: self.extrinsics.to_row_major(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraView {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = RigViewRecord::deserialize(d)?;
        RigFile { views: vec![r] }
            .to_views()
            .map(|mut v| v.remove(0))
            .map_err(serde::de::Error::custom)
    }
}
