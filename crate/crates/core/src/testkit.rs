//! Synthetic scenes with analytic motion, and brute-force oracles used to
//! check the optimized code paths.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Matrix3, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{EgsError, Result};
use crate::io::cameras::{expand_template, write_cameras, CameraEntry};
use crate::io::{dataset, write_flow, write_gaussian_ply, write_image, write_mask, Precision};
use crate::model::{logit, CameraView, Extrinsics, GaussianFrame, GaussianPoint, Intrinsics, PointId, Vec3};
use crate::quat::{self, Quat};
use crate::raster::{FlowMap, Mask};
use crate::sh::{rotate_sh, ShCoeffs};
use crate::splatter::{self, RenderOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionKind {
    Static,
    /// The whole scene rotates and translates a little every frame.
    Rigid,
    /// Points with x > 0 bend about the z axis through the origin.
    Articulated,
    /// Smooth non-rigid displacement field growing over time.
    SlowDeform,
    /// The last blob is absent before `event_frame`.
    Appear,
    /// The last blob is absent from `event_frame` on.
    Vanish,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Points generated before those the rig barely sees are dropped.
    pub points: usize,
    pub blobs: usize,
    pub cameras: usize,
    pub image_size: usize,
    pub frames: usize,
    pub motion: MotionKind,
    /// Multiplies the per-frame motion amplitude.
    pub motion_scale: f64,
    pub sh_degree: u8,
    pub event_frame: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            points: 1500,
            blobs: 2,
            cameras: 4,
            image_size: 64,
            frames: 5,
            motion: MotionKind::Static,
            motion_scale: 1.0,
            sh_degree: 0,
            event_frame: 2,
            seed: 0,
        }
    }
}

/// Ground-truth frames and a camera rig (geometry only).
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub rig: Vec<CameraView>,
    pub frames: Vec<GaussianFrame>,
    /// Ids of the points in the last blob (the one that appears or vanishes).
    pub event_ids: Vec<PointId>,
}

struct Blob {
    center: Vec3,
    axes: Vec3,
    count: usize,
}

fn blob_layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let event = matches!(spec.motion, MotionKind::Appear | MotionKind::Vanish);
    let main = spec.blobs;
    // the appearing/vanishing blob is smaller and sits on top of the first one
    let weights: Vec<f64> = (0..main).map(|_| 1.0).chain(event.then_some(0.4)).collect();
    let total: f64 = weights.iter().sum();
    let mut blobs: Vec<Blob> = Vec::with_capacity(weights.len());
    let mut assigned = 0;
    for (b, w) in weights.iter().enumerate() {
        let count = if b + 1 == weights.len() {
            spec.points - assigned
        } else {
            (spec.points as f64 * w / total).round() as usize
        };
        assigned += count;
        let axes = if b < main {
            Vec3::new(rng.random_range(0.2..0.28), rng.random_range(0.16..0.24), rng.random_range(0.16..0.24))
        } else {
            Vec3::repeat(rng.random_range(0.11..0.14))
        };
        let center = if b < main {
            let x = if main == 1 { 0.0 } else { -0.35 + 0.7 * b as f64 / (main - 1) as f64 };
            let y = if b % 2 == 0 { 0.0 } else { 0.08 };
            Vec3::new(x * (main as f64 / 2.0).max(1.0), y, 0.0)
        } else {
            blobs[0].center + Vec3::new(0.05, blobs[0].axes.y + 0.06, 0.0)
        };
        blobs.push(Blob { center, axes, count });
    }
    blobs
}

fn base_frame(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<GaussianPoint>, Vec<PointId>)> {
    let event = matches!(spec.motion, MotionKind::Appear | MotionKind::Vanish);
    let nblobs = spec.blobs + usize::from(event);
    if spec.blobs == 0 || spec.points < nblobs {
        return Err(EgsError::InvalidParameter("scene needs at least one point per blob".into()));
    }
    let blobs = blob_layout(spec, rng);
    let mut points = Vec::with_capacity(spec.points);
    let mut event_ids = Vec::new();
    let mut id = 0u64;
    for (b, blob) in blobs.iter().enumerate() {
        let (c, axes, count) = (blob.center, blob.axes, blob.count);
        let area = 4.0 * std::f64::consts::PI * (axes.x * axes.y + axes.y * axes.z + axes.x * axes.z) / 3.0;
        let sigma = 0.5 * (area / count.max(1) as f64).sqrt();
        let color = [rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.2..0.9)];
        for _ in 0..count {
            let dir = loop {
                let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let n = v.norm();
                if n > 1e-3 && n <= 1.0 {
                    break v / n;
                }
            };
            let mean = c + dir.component_mul(&axes);
            let rot = quat::normalized_canonical(&quat::quat(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ))
            .unwrap_or_else(quat::identity);
            let log_scale = Vec3::new(
                (sigma * rng.random_range(0.8..1.2)).ln(),
                (sigma * rng.random_range(0.8..1.2)).ln(),
                (sigma * rng.random_range(0.8..1.2)).ln(),
            );
            let rgb = color.map(|v| v + rng.random_range(-0.05..0.05));
            let mut sh = ShCoeffs::from_base_color(rgb).with_degree(spec.sh_degree);
            for k in sh.coeffs_mut().iter_mut().skip(1) {
                *k = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
            }
            let p = GaussianPoint::new(id, mean, rot, log_scale, logit(0.85), sh);
            if event && b == blobs.len() - 1 {
                event_ids.push(p.id);
            }
            points.push(p);
            id += 1;
        }
    }
    Ok((points, event_ids))
}

/// Camera ring around the origin looking inward, alternating elevation.
pub fn camera_ring(count: usize, image_size: usize, radius: f64) -> Result<Vec<CameraView>> {
    let k = Intrinsics {
        fx: 1.1 * image_size as f64,
        fy: 1.1 * image_size as f64,
        cx: image_size as f64 / 2.0,
        cy: image_size as f64 / 2.0,
        width: image_size,
        height: image_size,
    };
    (0..count)
        .map(|q| {
            let a = 2.0 * std::f64::consts::PI * q as f64 / count as f64;
            let elevation = if q % 2 == 0 { 0.35 } else { -0.35 } * radius;
            let eye = Vec3::new(radius * a.sin(), elevation, -radius * a.cos());
            let ext = Extrinsics::look_at(&eye, &Vec3::zeros(), &Vec3::y());
            CameraView::new(format!("cam{q:02}"), k.clone(), ext, 0.1, 20.0)
        })
        .collect()
}

/// Rigid transform `(R, b)` applied to a base point at time `t`.
fn motion_at(spec: &SceneSpec, base_mean: &Vec3, t: usize) -> (Quat, Vec3) {
    let s = spec.motion_scale * t as f64;
    match spec.motion {
        MotionKind::Static | MotionKind::Appear | MotionKind::Vanish => (quat::identity(), Vec3::zeros()),
        MotionKind::Rigid => {
            let axis = Vec3::new(0.2, 1.0, 0.1).normalize();
            let q = quat::from_axis_angle(&(axis * 0.04 * s));
            (q, Vec3::new(0.01, 0.004, -0.006) * s)
        }
        MotionKind::Articulated => {
            if base_mean.x > 0.0 {
                (quat::from_axis_angle(&Vec3::new(0.0, 0.0, 0.06 * s)), Vec3::zeros())
            } else {
                (quat::identity(), Vec3::zeros())
            }
        }
        MotionKind::SlowDeform => {
            let m = base_mean;
            let d = Vec3::new(0.3 * (2.0 * m.y).sin(), 0.5 * (2.0 * m.x).sin(), 0.2 * (2.0 * m.x).cos() - 0.2) * 0.012 * s;
            (quat::identity(), d)
        }
    }
}

fn apply_motion(spec: &SceneSpec, p: &GaussianPoint, t: usize) -> GaussianPoint {
    let (q, b) = motion_at(spec, &p.pose.mean, t);
    let mut out = p.clone();
    if q != quat::identity() {
        out.pose.mean = quat::rotation_matrix(&q) * p.pose.mean + b;
        out.pose.rotation = quat::normalized_canonical(&quat::mul(&q, &p.pose.rotation)).unwrap_or_else(quat::identity);
        if p.appearance.sh.degree() > 0 {
            out.appearance.sh = rotate_sh(&p.appearance.sh, &quat::rotation_matrix(&q));
        }
    } else {
        out.pose.mean = p.pose.mean + b;
    }
    out.birth_frame = 0;
    out
}

/// Builds the ground-truth sequence for `spec`. Deterministic in the seed.
pub fn gen_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    if spec.frames == 0 || spec.cameras == 0 || spec.image_size == 0 {
        return Err(EgsError::InvalidParameter("scene needs frames, cameras and a positive image size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (base, mut event_ids) = base_frame(spec, &mut rng)?;
    let rig = camera_ring(spec.cameras, spec.image_size, 2.6)?;
    // drop points the rig barely sees, with a margin over the default prune thresholds
    let mut all = GaussianFrame::new(0, base)?;
    let report = splatter::contribution(&all, &rig, &RenderOptions::default(), false)?;
    let weak: Vec<PointId> = (0..all.len())
        .filter(|&i| report.max(i) < 1.5 * 0.075 || report.sum(i) < 1.5 * 0.225)
        .map(|i| report.ids[i])
        .collect();
    all.retain(|p| weak.binary_search(&p.id).is_err());
    event_ids.retain(|id| all.index_of(*id).is_some());
    let base = all.into_points();
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let present = |p: &GaussianPoint| {
            let is_event = event_ids.binary_search(&p.id).is_ok();
            match spec.motion {
                MotionKind::Appear => !is_event || t >= spec.event_frame,
                MotionKind::Vanish => !is_event || t < spec.event_frame,
                _ => true,
            }
        };
        let pts = base.iter().filter(|p| present(p)).map(|p| apply_motion(spec, p, t)).collect();
        frames.push(GaussianFrame::new(t as u32, pts)?);
    }
    Ok(SyntheticScene {
        spec: spec.clone(),
        rig,
        frames,
        event_ids,
    })
}

/// Pixel flow from `src` to `dst` as seen by `cam`: the composited-weight
/// average of the projected displacement of points present in both frames.
pub fn synth_flow(src: &GaussianFrame, dst: &GaussianFrame, cam: &CameraView) -> Result<FlowMap> {
    let geo = cam.geometry_only();
    let out = splatter::render(src, &geo, &RenderOptions::base_color_only())?;
    let disp: Vec<Option<Vector2<f64>>> = src
        .points()
        .iter()
        .map(|p| {
            let q = dst.get(p.id)?;
            Some(geo.project_point(&q.pose.mean)? - geo.project_point(&p.pose.mean)?)
        })
        .collect();
    let (w, h) = (geo.width(), geo.height());
    let mut flow = FlowMap::zeros(w, h);
    for pix in 0..w * h {
        let mut acc = Vector2::zeros();
        let mut total = 0.0;
        for f in out.pixel_fragments(pix) {
            let i = out.splats[f.splat as usize].point;
            if let Some(d) = disp[i] {
                acc += f.weight() * d;
                total += f.weight();
            }
        }
        if total > 1e-6 {
            let v = acc / total;
            flow.data[pix] = [v.x as f32, v.y as f32];
        }
    }
    Ok(flow)
}

/// Foreground mask where the accumulated opacity exceeds 0.01.
pub fn synth_mask(alpha: &[f64], width: usize, height: usize) -> Mask {
    Mask {
        width,
        height,
        data: alpha.iter().map(|a| if *a > 0.01 { 255 } else { 0 }).collect(),
    }
}

impl SyntheticScene {
    /// Cameras supervising frame `t`: ground-truth image and mask of frame
    /// `t`, and (when `with_flow` and `t > 0`) the flow from `t-1` to `t`.
    pub fn views_for(&self, t: usize, with_flow: bool) -> Result<Vec<CameraView>> {
        let frame = self
            .frames
            .get(t)
            .ok_or_else(|| EgsError::InvalidParameter(format!("frame {t} out of range")))?;
        self.rig
            .iter()
            .map(|cam| {
                let out = splatter::render(frame, cam, &RenderOptions::default())?;
                let mut v = cam.clone();
                v.mask = Some(synth_mask(&out.alpha, v.width(), v.height()));
                v.image = Some(out.image);
                if with_flow && t > 0 {
                    v.flow = Some(synth_flow(&self.frames[t - 1], frame, cam)?);
                }
                Ok(v)
            })
            .collect()
    }

    /// Ground-truth mean of `id` at frame `t`.
    pub fn gt_mean(&self, t: usize, id: PointId) -> Option<Vec3> {
        self.frames.get(t)?.get(id).map(|p| p.pose.mean)
    }
}

/// Writes `scene` as a dataset directory: rig document, the first frame's
/// point file, ground-truth point files, and per-frame images, masks and
/// flow for every camera. Returns the files written.
pub fn write_dataset(scene: &SyntheticScene, root: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut entries = Vec::with_capacity(scene.rig.len());
    for cam in &scene.rig {
        let id = &cam.view_id;
        for sub in ["images", "masks", "flow"] {
            std::fs::create_dir_all(root.join(sub).join(id))?;
        }
        let mut e = CameraEntry::from_view(cam);
        e.image = Some(format!("images/{id}/{{frame}}.png"));
        e.mask = Some(format!("masks/{id}/{{frame}}.png"));
        e.flow = Some(format!("flow/{id}/{{frame}}.flo2"));
        entries.push(e);
    }
    std::fs::create_dir_all(root.join("points"))?;
    std::fs::create_dir_all(root.join("truth"))?;
    let cams = root.join(dataset::CAMERAS_FILE);
    write_cameras(&entries, &cams)?;
    written.push(cams);
    let first = dataset::frame_file(&root.join("points"), 0);
    write_gaussian_ply(&scene.frames[0], &first, Precision::F64)?;
    written.push(first);
    for t in 0..scene.frames.len() {
        let truth = dataset::frame_file(&root.join("truth"), t as u32);
        write_gaussian_ply(&scene.frames[t], &truth, Precision::F64)?;
        written.push(truth);
        for (v, e) in scene.views_for(t, true)?.iter().zip(&entries) {
            let at = |tpl: &Option<String>| root.join(expand_template(tpl.as_deref().expect("set above"), t as u32));
            let (img, mask) = (at(&e.image), at(&e.mask));
            write_image(v.image.as_ref().expect("rendered"), &img)?;
            write_mask(v.mask.as_ref().expect("rendered"), &mask)?;
            written.extend([img, mask]);
            if let Some(f) = &v.flow {
                let path = at(&e.flow);
                write_flow(f, &path)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Root-mean-square distance between the means of `frame` and the
/// ground truth for the ids present in both.
pub fn mean_rmse(frame: &GaussianFrame, truth: &GaussianFrame) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in frame.points() {
        if let Some(g) = truth.get(p.id) {
            sum += (p.pose.mean - g.pose.mean).norm_squared();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Exhaustive k-nearest neighbours of each query, ties by lower index.
pub fn oracle_knn(points: &[Vec3], queries: &[Vec3], k: usize) -> Vec<Vec<usize>> {
    queries
        .iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| ((p - q).norm_squared(), i)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, i)| i).collect()
        })
        .collect()
}

/// Central finite-difference gradient of `f` at `params`.
pub fn oracle_fd_gradient(f: impl Fn(&[f64]) -> f64, params: &[f64], step: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            p[i] = params[i] + step;
            let fp = f(&p);
            p[i] = params[i] - step;
            let fm = f(&p);
            p[i] = params[i];
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

fn oracle_rotation(q: &Quat) -> Matrix3<f64> {
    let n = (q.w * q.w + q.i * q.i + q.j * q.j + q.k * q.k).sqrt();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Per-point contribution of one view by brute force: every pixel tests
/// every point, sorts the hits by depth and composites them.
pub fn oracle_contribution(frame: &GaussianFrame, cam: &CameraView) -> Vec<f64> {
    struct Proj {
        idx: usize,
        id: PointId,
        depth: f64,
        mean: Vector2<f64>,
        conic: Matrix2<f64>,
        opacity: f64,
    }
    let k = &cam.intrinsics;
    let wrot = cam.extrinsics.rotation;
    let projs: Vec<Proj> = frame
        .points()
        .iter()
        .enumerate()
        .filter_map(|(idx, p)| {
            let pc = wrot * p.pose.mean + cam.extrinsics.translation;
            if !(pc.z > cam.near && pc.z < cam.far) {
                return None;
            }
            let r = oracle_rotation(&p.pose.rotation);
            let s2 = Matrix3::from_diagonal(&p.appearance.log_scale.map(|v| (2.0 * v).exp()));
            let cov3 = r * s2 * r.transpose();
            let j = nalgebra::Matrix2x3::new(k.fx / pc.z, 0.0, -k.fx * pc.x / (pc.z * pc.z), 0.0, k.fy / pc.z, -k.fy * pc.y / (pc.z * pc.z));
            let t = j * wrot;
            let cov2 = t * cov3 * t.transpose();
            let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
            let tr = cov2[(0, 0)] + cov2[(1, 1)];
            let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
            let (l1, l2) = (0.5 * tr + disc, 0.5 * tr - disc);
            if !(det > 0.0 && l2 > 0.0 && l1 / l2 <= splatter::MAX_CONDITION) {
                return None;
            }
            Some(Proj {
                idx,
                id: p.id,
                depth: pc.z,
                mean: Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy),
                conic: cov2.try_inverse()?,
                opacity: 1.0 / (1.0 + (-p.appearance.opacity_logit).exp()),
            })
        })
        .collect();
    let floor = (-4.5f64).exp();
    let mut phi = vec![0.0; frame.len()];
    for y in 0..cam.height() {
        for x in 0..cam.width() {
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut hits: Vec<(f64, PointId, usize, f64)> = projs
                .iter()
                .filter_map(|p| {
                    let d = px - p.mean;
                    let m = (d.transpose() * p.conic * d)[(0, 0)];
                    if m >= 9.0 {
                        return None;
                    }
                    let a = (p.opacity * ((-0.5 * m).exp() - floor) / (1.0 - floor)).min(0.99);
                    (a > 0.0).then_some((p.depth, p.id, p.idx, a))
                })
                .collect();
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut t = 1.0;
            for (_, _, idx, a) in hits {
                phi[idx] += a * t;
                t *= 1.0 - a;
                if t < 1e-4 {
                    break;
                }
            }
        }
    }
    phi
}

/// Random small scene for oracle comparisons.
pub fn random_frame(n: usize, seed: u64, sh_degree: u8) -> GaussianFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|i| {
            let mean = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let rot = quat::normalized_canonical(&quat::quat(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ))
            .unwrap_or_else(quat::identity);
            let log_scale = Vec3::new(rng.random_range(-3.5..-2.0), rng.random_range(-3.5..-2.0), rng.random_range(-3.5..-2.0));
            let mut sh = ShCoeffs::from_base_color([rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)])
                .with_degree(sh_degree);
            for c in sh.coeffs_mut().iter_mut().skip(1) {
                *c = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
            }
            GaussianPoint::new(i as u64, mean, rot, log_scale, rng.random_range(-1.0..2.0), sh)
        })
        .collect();
    GaussianFrame::new(0, pts).expect("unique ids")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(motion: MotionKind) -> SceneSpec {
        SceneSpec {
            points: 200,
            cameras: 2,
            image_size: 24,
            frames: 4,
            motion,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_scene(&small_spec(MotionKind::Rigid)).unwrap();
        let b = gen_scene(&small_spec(MotionKind::Rigid)).unwrap();
        assert_eq!(a.frames, b.frames);
        let va = a.views_for(2, true).unwrap();
        let vb = b.views_for(2, true).unwrap();
        for (x, y) in va.iter().zip(&vb) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.flow, y.flow);
        }
    }

    #[test]
    fn vanishing_blob_leaves_mask_and_frames() {
        let spec = SceneSpec {
            event_frame: 2,
            ..small_spec(MotionKind::Vanish)
        };
        let s = gen_scene(&spec).unwrap();
        assert!(!s.event_ids.is_empty());
        assert_eq!(s.frames[2].len(), s.frames[1].len() - s.event_ids.len());
        let before: usize = s.views_for(1, false).unwrap().iter().map(|v| v.mask.as_ref().unwrap().foreground_count()).sum();
        let after: usize = s.views_for(2, false).unwrap().iter().map(|v| v.mask.as_ref().unwrap().foreground_count()).sum();
        assert!(after < before);
    }

    #[test]
    fn articulated_motion_is_piecewise_rigid() {
        let s = gen_scene(&small_spec(MotionKind::Articulated)).unwrap();
        let r = quat::rotation_matrix(&quat::from_axis_angle(&Vec3::new(0.0, 0.0, 0.18)));
        for (p0, p3) in s.frames[0].points().iter().zip(s.frames[3].points()) {
            let expect = if p0.pose.mean.x > 0.0 { r * p0.pose.mean } else { p0.pose.mean };
            assert!((p3.pose.mean - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn static_scene_has_zero_flow() {
        let s = gen_scene(&small_spec(MotionKind::Static)).unwrap();
        let v = s.views_for(1, true).unwrap();
        assert!(v[0].flow.as_ref().unwrap().data.iter().all(|f| *f == [0.0, 0.0]));
    }

    #[test]
    fn knn_oracle_orders_and_ties() {
        let pts = vec![Vec3::x(), -Vec3::x(), Vec3::new(0.0, 0.5, 0.0)];
        let all = oracle_knn(&pts, &[Vec3::zeros()], 3);
        assert_eq!(all[0], vec![2, 0, 1]);
    }

    #[test]
    fn fd_oracle_on_quadratic() {
        let g = oracle_fd_gradient(|p| p[0] * p[0] + 3.0 * p[1], &[2.0, 5.0], 1e-3);
        assert!((g[0] - 4.0).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn zero_opacity_point_has_no_contribution() {
        let mut f = random_frame(5, 1, 0);
        f.points_mut()[0].appearance.opacity_logit = -1e9;
        let cam = &camera_ring(1, 24, 2.0).unwrap()[0];
        assert_eq!(oracle_contribution(&f, cam)[0], 0.0);
    }

    #[test]
    fn single_point_contribution_matches_gaussian_integral() {
        // a small isotropic low-opacity point integrates to about o * 2 pi sigma_px^2
        // times the normalized mass of the tapered footprint
        let cam = &camera_ring(1, 64, 2.0).unwrap()[0];
        let p = GaussianPoint::new(0, Vec3::zeros(), quat::identity(), Vec3::repeat((0.05f64).ln()), logit(0.05), ShCoeffs::zeros(0));
        let f = GaussianFrame::new(0, vec![p]).unwrap();
        let phi = oracle_contribution(&f, cam)[0];
        let sigma_px = cam.intrinsics.fx * 0.05 / cam.center().norm();
        let floor = (-4.5f64).exp();
        // integral of (e^{-m/2} - floor)/(1 - floor) over the 3-sigma disc
        let mass = 2.0 * std::f64::consts::PI * sigma_px * sigma_px * ((1.0 - floor) - 4.5 * floor) / (1.0 - floor);
        let expect = 0.05 * mass;
        assert!((phi - expect).abs() / expect < 0.02, "phi {phi} expect {expect}");
    }
}
