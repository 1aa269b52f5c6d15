//! Domain types for Gaussian points, frames and cameras, and the geometric
//! conversions the renderer, warp and codec share.
//!
//! Point features are split into [`Pose`] (mean, rotation) and
//! [`Appearance`] (scale, opacity, SH). Refinement freezes the appearance of
//! reference points by never handing out a mutable [`Appearance`] for them.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{Matrix2, Matrix3, Matrix4, Vector2, Vector3};

use crate::error::{EgsError, Result};
use crate::quat::{self, Quat};
use crate::raster::{FlowMap, Mask, RgbImage};
use crate::sh::ShCoeffs;

pub type Vec3 = Vector3<f64>;

/// Stable point identifier, unique within a sequence and never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PointId(pub u64);

impl fmt::Display for PointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which stream a point belongs to during refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PointClass {
    /// Inherited through the warp; appearance frozen.
    #[default]
    Reference,
    /// Spawned during refinement from `ancestor`.
    Extension { ancestor: PointId },
}

impl PointClass {
    pub fn is_reference(&self) -> bool {
        matches!(self, PointClass::Reference)
    }

    pub fn ancestor(&self) -> Option<PointId> {
        match self {
            PointClass::Reference => None,
            PointClass::Extension { ancestor } => Some(*ancestor),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub mean: Vec3,
    /// (w, x, y, z); unit length after normalization passes.
    pub rotation: Quat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Appearance {
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    pub sh: ShCoeffs,
}

impl Appearance {
    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPoint {
    pub id: PointId,
    pub pose: Pose,
    pub appearance: Appearance,
    pub class: PointClass,
    pub birth_frame: u32,
}

impl GaussianPoint {
    pub fn new(id: u64, mean: Vec3, rotation: Quat, log_scale: Vec3, opacity_logit: f64, sh: ShCoeffs) -> Self {
        Self {
            id: PointId(id),
            pose: Pose { mean, rotation },
            appearance: Appearance {
                log_scale,
                opacity_logit,
                sh,
            },
            class: PointClass::Reference,
            birth_frame: 0,
        }
    }

    pub fn mean(&self) -> &Vec3 {
        &self.pose.mean
    }

    pub fn check_finite(&self) -> Result<()> {
        let p = &self.pose;
        let a = &self.appearance;
        let finite = p.mean.iter().all(|v| v.is_finite())
            && quat::to_array(&p.rotation).iter().all(|v| v.is_finite())
            && a.log_scale.iter().all(|v| v.is_finite() && v.exp() > 0.0 && v.exp().is_finite())
            && a.opacity_logit.is_finite()
            && a.sh.coeffs().iter().flatten().all(|v| v.is_finite());
        if finite {
            Ok(())
        } else {
            Err(EgsError::InvalidParameter(format!("point {} has non-finite features", self.id)))
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut b = Self::empty();
        for p in pts {
            b.min = b.min.inf(p);
            b.max = b.max.sup(p);
        }
        b
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x
    }

    pub fn diagonal(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            (self.max - self.min).norm()
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn expanded(&self, margin: f64) -> Self {
        Self {
            min: self.min.add_scalar(-margin),
            max: self.max.add_scalar(margin),
        }
    }
}

/// The explicit scene state at one time step, ordered by ascending id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianFrame {
    pub frame_index: u32,
    points: Vec<GaussianPoint>,
}

impl GaussianFrame {
    pub fn new(frame_index: u32, mut points: Vec<GaussianPoint>) -> Result<Self> {
        points.sort_by_key(|p| p.id);
        if points.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(EgsError::InvalidInput("duplicate point ids in frame".into()));
        }
        Ok(Self { frame_index, points })
    }

    pub fn points(&self) -> &[GaussianPoint] {
        &self.points
    }

    /// Mutable access to the points. Ids must not be changed through it.
    pub fn points_mut(&mut self) -> &mut [GaussianPoint] {
        &mut self.points
    }

    pub fn into_points(self) -> Vec<GaussianPoint> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bbox(&self) -> Aabb {
        Aabb::from_points(self.points.iter().map(|p| &p.pose.mean))
    }

    pub fn max_id(&self) -> Option<PointId> {
        self.points.last().map(|p| p.id)
    }

    pub fn index_of(&self, id: PointId) -> Option<usize> {
        self.points.binary_search_by_key(&id, |p| p.id).ok()
    }

    pub fn get(&self, id: PointId) -> Option<&GaussianPoint> {
        self.index_of(id).map(|i| &self.points[i])
    }

    pub fn ids(&self) -> HashSet<PointId> {
        self.points.iter().map(|p| p.id).collect()
    }

    /// Retains points for which `keep` is true.
    pub fn retain(&mut self, mut keep: impl FnMut(&GaussianPoint) -> bool) {
        self.points.retain(|p| keep(p));
    }

    /// Appends points with ids above the current maximum.
    pub fn extend(&mut self, new_points: Vec<GaussianPoint>) -> Result<()> {
        let mut all = std::mem::take(&mut self.points);
        all.extend(new_points);
        *self = Self::new(self.frame_index, all)?;
        Ok(())
    }

    /// Normalizes every rotation to the canonical hemisphere.
    pub fn normalize_rotations(&mut self) -> Result<()> {
        for p in &mut self.points {
            p.pose.rotation = normalize_rotation(&p.pose.rotation)?;
        }
        Ok(())
    }

    /// Highest SH degree present.
    pub fn sh_degree(&self) -> u8 {
        self.points.iter().map(|p| p.appearance.sh.degree()).max().unwrap_or(0)
    }

    /// Fraction of points in the extension stream.
    pub fn extension_fraction(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let ext = self.points.iter().filter(|p| !p.class.is_reference()).count();
        ext as f64 / self.points.len() as f64
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// World-to-camera transform `x_cam = rotation * x_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        if !(rotation.determinant().abs() > 1e-9) {
            return Err(EgsError::Format("extrinsic rotation block is not invertible".into()));
        }
        Ok(Self {
            rotation,
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        })
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Builds a camera at `eye` looking at `target` (+z forward, +y down).
    pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self {
            rotation,
            translation: -(rotation * eye),
        }
    }

    pub fn camera_center(&self) -> Vec3 {
        let inv = self.rotation.try_inverse().expect("validated invertible");
        -(inv * self.translation)
    }
}

/// Pinhole camera with optional per-frame supervision rasters.
///
/// `image` and `mask` describe the target frame; `flow` maps pixels of the
/// source frame to the target frame.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub view_id: String,
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
    pub near: f64,
    pub far: f64,
    pub flow: Option<FlowMap>,
    pub mask: Option<Mask>,
    pub image: Option<RgbImage>,
}

impl CameraView {
    pub fn new(view_id: impl Into<String>, intrinsics: Intrinsics, extrinsics: Extrinsics, near: f64, far: f64) -> Result<Self> {
        let cam = Self {
            view_id: view_id.into(),
            intrinsics,
            extrinsics,
            near,
            far,
            flow: None,
            mask: None,
            image: None,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(EgsError::InvalidParameter(format!("camera {}: fx and fy must be positive", self.view_id)));
        }
        if k.width == 0 || k.height == 0 {
            return Err(EgsError::InvalidParameter(format!("camera {}: empty image size", self.view_id)));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(EgsError::InvalidParameter(format!("camera {}: need 0 < near < far", self.view_id)));
        }
        if !(self.extrinsics.rotation.determinant().abs() > 1e-9) {
            return Err(EgsError::Format(format!("camera {}: extrinsic rotation block is not invertible", self.view_id)));
        }
        let dims = (k.width, k.height);
        if let Some(f) = &self.flow {
            if (f.width, f.height) != dims {
                return Err(EgsError::Format(format!("camera {}: flow is {}x{}, expected {}x{}", self.view_id, f.width, f.height, dims.0, dims.1)));
            }
        }
        if let Some(m) = &self.mask {
            if (m.width, m.height) != dims {
                return Err(EgsError::Format(format!("camera {}: mask is {}x{}, expected {}x{}", self.view_id, m.width, m.height, dims.0, dims.1)));
            }
        }
        if let Some(i) = &self.image {
            if (i.width, i.height) != dims {
                return Err(EgsError::Format(format!("camera {}: image is {}x{}, expected {}x{}", self.view_id, i.width, i.height, dims.0, dims.1)));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.extrinsics.rotation * p + self.extrinsics.translation
    }

    pub fn center(&self) -> Vec3 {
        self.extrinsics.camera_center()
    }

    /// Pixel coordinates of a camera-space point (no clipping).
    pub fn project_camera_point(&self, pc: &Vec3) -> Vector2<f64> {
        let k = &self.intrinsics;
        Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy)
    }

    /// Pixel coordinates of a world point, `None` when outside the clip range.
    pub fn project_point(&self, p: &Vec3) -> Option<Vector2<f64>> {
        let pc = self.to_camera(p);
        (pc.z > self.near && pc.z < self.far).then(|| self.project_camera_point(&pc))
    }

    /// Jacobian of the pixel projection w.r.t. camera-space position.
    pub fn projection_jacobian(&self, pc: &Vec3) -> nalgebra::Matrix2x3<f64> {
        let k = &self.intrinsics;
        let iz = 1.0 / pc.z;
        nalgebra::Matrix2x3::new(
            k.fx * iz,
            0.0,
            -k.fx * pc.x * iz * iz,
            0.0,
            k.fy * iz,
            -k.fy * pc.y * iz * iz,
        )
    }

    /// The same camera geometry without any attached rasters.
    pub fn geometry_only(&self) -> Self {
        Self {
            flow: None,
            mask: None,
            image: None,
            ..self.clone()
        }
    }
}

/// `R diag(exp(2 s)) R^T` for a normalized rotation.
pub fn covariance_from(log_scale: &Vec3, rotation: &Quat) -> Result<Matrix3<f64>> {
    if !log_scale.iter().all(|v| v.is_finite()) || !quat::to_array(rotation).iter().all(|v| v.is_finite()) {
        return Err(EgsError::InvalidParameter("non-finite covariance parameters".into()));
    }
    let r = quat::rotation_matrix(rotation);
    let s = log_scale.map(|v| (2.0 * v).exp());
    let m = r * Matrix3::from_diagonal(&s) * r.transpose();
    Ok(0.5 * (m + m.transpose()))
}

/// Screen-space footprint of a Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible(ProjectedGaussian),
    Culled,
}

/// Perspective projection with first-order covariance propagation.
pub fn project_gaussian(point: &GaussianPoint, cam: &CameraView) -> Result<Projection> {
    let pc = cam.to_camera(&point.pose.mean);
    if !(pc.z > cam.near && pc.z < cam.far) {
        return Ok(Projection::Culled);
    }
    let cov3 = covariance_from(&point.appearance.log_scale, &point.pose.rotation)?;
    let t = cam.projection_jacobian(&pc) * cam.extrinsics.rotation;
    let cov2d = t * cov3 * t.transpose();
    Ok(Projection::Visible(ProjectedGaussian {
        mean2d: cam.project_camera_point(&pc),
        cov2d: 0.5 * (cov2d + cov2d.transpose()),
        depth: pc.z,
    }))
}

/// Unit quaternion on the `w >= 0` hemisphere.
pub fn normalize_rotation(q: &Quat) -> Result<Quat> {
    quat::normalized_canonical(q)
        .ok_or_else(|| EgsError::InvalidParameter("quaternion norm is too small to normalize".into()))
}
