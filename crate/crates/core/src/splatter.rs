//! CPU tile-based Gaussian splatting: forward compositing, per-point
//! contribution sums, and analytic gradients for the warp and refinement
//! optimizers.
//!
//! Per-pixel opacity uses a footprint that is shifted and rescaled so it
//! reaches exactly zero on the 3-sigma ellipse:
//! `g(m) = (exp(-m/2) - exp(-9/2)) / (1 - exp(-9/2))` for Mahalanobis
//! distance `m < 9`. It equals one at the center, keeps the result
//! independent of the tile size, and has no jump for finite differences to
//! trip over.

use nalgebra::{Matrix2, Matrix3, Vector2};
use rayon::prelude::*;

use crate::error::{EgsError, Result};
use crate::model::{CameraView, GaussianFrame, PointId, Vec3};
use crate::quat;
use crate::raster::{Mask, RgbImage};
use crate::sh::{self, coeff_count};

pub const ALPHA_MAX: f64 = 0.99;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Squared Mahalanobis radius of the footprint (3 sigma).
pub const CUTOFF_M: f64 = 9.0;
pub const MAX_CONDITION: f64 = 1e8;

fn footprint(m: f64) -> f64 {
    if m >= CUTOFF_M {
        return 0.0;
    }
    let floor = (-0.5 * CUTOFF_M).exp();
    ((-0.5 * m).exp() - floor) / (1.0 - floor)
}

fn footprint_deriv(m: f64) -> f64 {
    if m >= CUTOFF_M {
        return 0.0;
    }
    let floor = (-0.5 * CUTOFF_M).exp();
    -0.5 * (-0.5 * m).exp() / (1.0 - floor)
}

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub tile_size: usize,
    /// Highest SH band used for color; the warp stage renders with 0.
    pub max_sh_degree: u8,
    /// Largest accepted image side.
    pub max_dim: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            tile_size: 16,
            max_sh_degree: sh::MAX_SH_DEGREE,
            max_dim: 256,
        }
    }
}

impl RenderOptions {
    pub fn base_color_only() -> Self {
        Self {
            max_sh_degree: 0,
            ..Self::default()
        }
    }
}

/// A point projected into one view.
#[derive(Debug, Clone)]
pub struct Splat {
    /// Index of the point in the rendered frame.
    pub point: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    color_active: [bool; 3],
    cam_pos: Vec3,
    view_dir: Vec3,
    view_dist: f64,
    sh_degree: u8,
    pixel_range: [usize; 4],
}

/// One point's entry in a pixel's compositing list.
#[derive(Debug, Clone, Copy)]
pub struct Fragment {
    /// Index into [`RenderOutput::splats`].
    pub splat: u32,
    pub alpha: f64,
    /// Transmittance in front of this fragment.
    pub transmittance: f64,
}

impl Fragment {
    /// Composited weight `alpha * prod_{closer}(1 - alpha)`.
    pub fn weight(&self) -> f64 {
        self.alpha * self.transmittance
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub view_id: String,
    pub width: usize,
    pub height: usize,
    pub image: RgbImage,
    pub alpha: Vec<f64>,
    pub final_transmittance: Vec<f64>,
    pub splats: Vec<Splat>,
    pixel_offsets: Vec<usize>,
    fragments: Vec<Fragment>,
    point_count: usize,
    signature: u64,
    /// Points skipped because their projected covariance was degenerate.
    pub degenerate_skipped: usize,
}

impl RenderOutput {
    pub fn pixel_fragments(&self, pixel: usize) -> &[Fragment] {
        &self.fragments[self.pixel_offsets[pixel]..self.pixel_offsets[pixel + 1]]
    }

    /// `(frame point index, pixel index, weight)` for every composited pair.
    pub fn transmissions(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.width * self.height).flat_map(move |pix| {
            self.pixel_fragments(pix)
                .iter()
                .map(move |f| (self.splats[f.splat as usize].point, pix, f.weight()))
        })
    }

    /// Per-point sum of composited weights, optionally only over foreground pixels.
    pub fn point_contributions(&self, mask: Option<&Mask>) -> Vec<f64> {
        let mut phi = vec![0.0; self.point_count];
        for pix in 0..self.width * self.height {
            if let Some(m) = mask {
                if m.data[pix] < 128 {
                    continue;
                }
            }
            for f in self.pixel_fragments(pix) {
                phi[self.splats[f.splat as usize].point] += f.weight();
            }
        }
        phi
    }

    /// Weight of point `point` at pixel `pix`, zero if it does not composite there.
    pub fn weight_at(&self, point: usize, pix: usize) -> f64 {
        self.pixel_fragments(pix)
            .iter()
            .filter(|f| self.splats[f.splat as usize].point == point)
            .map(|f| f.weight())
            .sum()
    }

    pub fn fragment_count(&self) -> usize {
        self.fragments.len()
    }
}

fn frame_signature(frame: &GaussianFrame) -> u64 {
    frame.points().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, p| {
        (h ^ p.id.0).wrapping_mul(0x0100_0000_01b3)
    })
}

fn project_splats(frame: &GaussianFrame, cam: &CameraView, opts: &RenderOptions) -> Result<(Vec<Splat>, usize)> {
    let (w, h) = (cam.width(), cam.height());
    let cam_center = cam.center();
    let wrot = cam.extrinsics.rotation;
    let mut splats = Vec::with_capacity(frame.len());
    let mut degenerate = 0;
    for (i, p) in frame.points().iter().enumerate() {
        let pc = cam.to_camera(&p.pose.mean);
        if !(pc.z > cam.near && pc.z < cam.far) {
            continue;
        }
        let cov3 = crate::model::covariance_from(&p.appearance.log_scale, &p.pose.rotation)?;
        let t = cam.projection_jacobian(&pc) * wrot;
        let cov2d = t * cov3 * t.transpose();
        let cov2d = 0.5 * (cov2d + cov2d.transpose());
        let det = cov2d.determinant();
        let tr = cov2d.trace();
        let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
        let (lmax, lmin) = (0.5 * tr + disc, 0.5 * tr - disc);
        if !(det > 0.0) || !(lmin > 0.0) || lmax / lmin > MAX_CONDITION || !det.is_finite() {
            degenerate += 1;
            continue;
        }
        let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
        let mean2d = cam.project_camera_point(&pc);
        let rx = 3.0 * cov2d[(0, 0)].sqrt();
        let ry = 3.0 * cov2d[(1, 1)].sqrt();
        let x0 = (mean2d.x - rx - 0.5).ceil().max(0.0);
        let x1 = (mean2d.x + rx - 0.5).floor().min(w as f64 - 1.0);
        let y0 = (mean2d.y - ry - 0.5).ceil().max(0.0);
        let y1 = (mean2d.y + ry - 0.5).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let v = p.pose.mean - cam_center;
        let view_dist = v.norm();
        let view_dir = v / view_dist;
        let sh_degree = p.appearance.sh.degree().min(opts.max_sh_degree);
        let raw = p.appearance.sh.eval_raw(&view_dir, sh_degree);
        let mut color = [0.0; 3];
        let mut color_active = [false; 3];
        for ch in 0..3 {
            let c = raw[ch] + 0.5;
            color_active[ch] = c > 0.0;
            color[ch] = c.max(0.0);
        }
        splats.push(Splat {
            point: i,
            mean2d,
            cov2d,
            conic,
            depth: pc.z,
            opacity: p.appearance.opacity(),
            color,
            color_active,
            cam_pos: pc,
            view_dir,
            view_dist,
            sh_degree,
            pixel_range: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
        });
    }
    Ok((splats, degenerate))
}

fn splat_alpha(s: &Splat, px: f64, py: f64) -> Option<(f64, f64)> {
    let d = Vector2::new(px - s.mean2d.x, py - s.mean2d.y);
    let m = d.dot(&(s.conic * d));
    if !(m < CUTOFF_M) {
        return None;
    }
    let a = s.opacity * footprint(m);
    (a > 0.0).then_some((a.min(ALPHA_MAX), m))
}

/// Renders one view. Points are composited front to back in ascending
/// camera depth (ties by id).
pub fn render(frame: &GaussianFrame, cam: &CameraView, opts: &RenderOptions) -> Result<RenderOutput> {
    let (w, h) = (cam.width(), cam.height());
    if w > opts.max_dim || h > opts.max_dim {
        return Err(EgsError::InvalidInput(format!(
            "image {w}x{h} exceeds the {} pixel cap",
            opts.max_dim
        )));
    }
    if opts.tile_size == 0 {
        return Err(EgsError::InvalidParameter("tile size must be positive".into()));
    }
    let (mut splats, degenerate_skipped) = project_splats(frame, cam, opts)?;
    if degenerate_skipped > 0 {
        log::debug!("view {}: skipped {degenerate_skipped} degenerate splats", cam.view_id);
    }
    let points = frame.points();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(points[a.point].id.cmp(&points[b.point].id)));

    let ts = opts.tile_size;
    let (tiles_x, tiles_y) = (w.div_ceil(ts), h.div_ceil(ts));
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.pixel_range;
        for ty in y0 / ts..=y1 / ts {
            for tx in x0 / ts..=x1 / ts {
                bins[ty * tiles_x + tx].push(si as u32);
            }
        }
    }

    struct PixelResult {
        pix: usize,
        color: [f64; 3],
        alpha: f64,
        transmittance: f64,
        frags: Vec<Fragment>,
    }

    let tile_results: Vec<Vec<PixelResult>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let bin = &bins[tile];
            let mut out = Vec::new();
            for y in ty * ts..((ty + 1) * ts).min(h) {
                for x in tx * ts..((tx + 1) * ts).min(w) {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = 1.0;
                    let mut color = [0.0; 3];
                    let mut acc = 0.0;
                    let mut frags = Vec::new();
                    for &si in bin {
                        let s = &splats[si as usize];
                        let Some((a, _)) = splat_alpha(s, px, py) else { continue };
                        let wgt = a * t;
                        for ch in 0..3 {
                            color[ch] += s.color[ch] * wgt;
                        }
                        acc += wgt;
                        frags.push(Fragment {
                            splat: si,
                            alpha: a,
                            transmittance: t,
                        });
                        t *= 1.0 - a;
                        if t < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                    out.push(PixelResult {
                        pix: y * w + x,
                        color,
                        alpha: acc,
                        transmittance: t,
                        frags,
                    });
                }
            }
            out
        })
        .collect();

    let mut image = RgbImage::new(w, h);
    let mut alpha = vec![0.0; w * h];
    let mut final_transmittance = vec![1.0; w * h];
    let mut per_pixel: Vec<Vec<Fragment>> = vec![Vec::new(); w * h];
    for r in tile_results.into_iter().flatten() {
        image.data[r.pix] = r.color;
        alpha[r.pix] = r.alpha;
        final_transmittance[r.pix] = r.transmittance;
        per_pixel[r.pix] = r.frags;
    }
    let mut pixel_offsets = Vec::with_capacity(w * h + 1);
    let mut fragments = Vec::with_capacity(per_pixel.iter().map(Vec::len).sum());
    pixel_offsets.push(0);
    for f in per_pixel {
        fragments.extend(f);
        pixel_offsets.push(fragments.len());
    }

    Ok(RenderOutput {
        view_id: cam.view_id.clone(),
        width: w,
        height: h,
        image,
        alpha,
        final_transmittance,
        splats,
        pixel_offsets,
        fragments,
        point_count: frame.len(),
        signature: frame_signature(frame),
        degenerate_skipped,
    })
}

/// Per-point, per-view contribution sums.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionReport {
    pub ids: Vec<PointId>,
    /// `phi[i][q]` for point `i` (frame order) and view `q`.
    pub phi: Vec<Vec<f64>>,
}

impl ContributionReport {
    pub fn max(&self, i: usize) -> f64 {
        self.phi[i].iter().copied().fold(0.0, f64::max)
    }

    pub fn sum(&self, i: usize) -> f64 {
        self.phi[i].iter().sum()
    }
}

/// Contribution of every point in every view. When `use_masks` is set and a
/// view carries a mask, only foreground pixels are summed.
pub fn contribution(frame: &GaussianFrame, cams: &[CameraView], opts: &RenderOptions, use_masks: bool) -> Result<ContributionReport> {
    let mut phi = vec![vec![0.0; cams.len()]; frame.len()];
    for (q, cam) in cams.iter().enumerate() {
        let out = render(frame, cam, opts)?;
        let mask = if use_masks { cam.mask.as_ref() } else { None };
        for (i, v) in out.point_contributions(mask).into_iter().enumerate() {
            phi[i][q] = v;
        }
    }
    Ok(ContributionReport {
        ids: frame.points().iter().map(|p| p.id).collect(),
        phi,
    })
}

/// Gradient of a scalar loss w.r.t. one point's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointGrad {
    pub mean2d: Vector2<f64>,
    pub mean: Vec3,
    /// w.r.t. the raw (w, x, y, z) quaternion; the renderer normalizes it.
    pub rotation: [f64; 4],
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    /// Same length as the point's SH coefficient list.
    pub sh: Vec<[f64; 3]>,
    /// Sum over pixels of absolute per-pixel screen-space gradients (norm of
    /// the per-axis sums), the densification signal.
    pub abs_mean2d: f64,
    pub visible: bool,
}

impl PointGrad {
    fn zeros(sh_len: usize) -> Self {
        Self {
            mean2d: Vector2::zeros(),
            mean: Vec3::zeros(),
            rotation: [0.0; 4],
            log_scale: Vec3::zeros(),
            opacity_logit: 0.0,
            sh: vec![[0.0; 3]; sh_len],
            abs_mean2d: 0.0,
            visible: false,
        }
    }

    pub fn accumulate(&mut self, other: &PointGrad) {
        self.mean2d += other.mean2d;
        self.mean += other.mean;
        for c in 0..4 {
            self.rotation[c] += other.rotation[c];
        }
        self.log_scale += other.log_scale;
        self.opacity_logit += other.opacity_logit;
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            for ch in 0..3 {
                a[ch] += b[ch];
            }
        }
        self.abs_mean2d += other.abs_mean2d;
        self.visible |= other.visible;
    }
}

/// Gradients for every point of a frame, in frame order.
#[derive(Debug, Clone)]
pub struct FrameGrad {
    pub points: Vec<PointGrad>,
}

impl FrameGrad {
    pub fn zeros(frame: &GaussianFrame) -> Self {
        Self {
            points: frame
                .points()
                .iter()
                .map(|p| PointGrad::zeros(p.appearance.sh.coeffs().len()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &FrameGrad) {
        for (a, b) in self.points.iter_mut().zip(&other.points) {
            a.accumulate(b);
        }
    }
}

#[derive(Default, Clone)]
struct SplatAccum {
    mean2d: Vector2<f64>,
    abs2d: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
}

/// Full backward pass through compositing, projection and SH evaluation.
pub fn backward(out: &RenderOutput, frame: &GaussianFrame, cam: &CameraView, dl_dimage: &[[f64; 3]]) -> Result<FrameGrad> {
    if out.point_count != frame.len() || out.signature != frame_signature(frame) || out.view_id != cam.view_id {
        return Err(EgsError::Contract("render output does not belong to this frame and view".into()));
    }
    if dl_dimage.len() != out.width * out.height || out.width != cam.width() || out.height != cam.height() {
        return Err(EgsError::Contract("image gradient has the wrong size".into()));
    }
    let mut acc = vec![SplatAccum::default(); out.splats.len()];
    for pix in 0..out.width * out.height {
        let g = dl_dimage[pix];
        if g == [0.0; 3] {
            continue;
        }
        let frags = out.pixel_fragments(pix);
        let (px, py) = ((pix % out.width) as f64 + 0.5, (pix / out.width) as f64 + 0.5);
        // suffix sum of color * weight behind the current fragment
        let mut behind = [0.0; 3];
        for f in frags.iter().rev() {
            let s = &out.splats[f.splat as usize];
            let a = &mut acc[f.splat as usize];
            let wgt = f.weight();
            for ch in 0..3 {
                a.color[ch] += g[ch] * wgt;
            }
            let mut dl_dalpha = 0.0;
            for ch in 0..3 {
                dl_dalpha += g[ch] * (f.transmittance * s.color[ch] - behind[ch] / (1.0 - f.alpha));
            }
            for ch in 0..3 {
                behind[ch] += s.color[ch] * wgt;
            }
            let d = Vector2::new(px - s.mean2d.x, py - s.mean2d.y);
            let m = d.dot(&(s.conic * d));
            let raw = s.opacity * footprint(m);
            if raw >= ALPHA_MAX {
                continue;
            }
            a.opacity += dl_dalpha * footprint(m);
            let dl_dm = dl_dalpha * s.opacity * footprint_deriv(m);
            let g2d = -2.0 * dl_dm * (s.conic * d);
            a.mean2d += g2d;
            a.abs2d += g2d.abs();
            a.conic += dl_dm * d * d.transpose();
        }
    }

    let mut grads = FrameGrad::zeros(frame);
    let wrot = cam.extrinsics.rotation;
    let k = &cam.intrinsics;
    for (s, a) in out.splats.iter().zip(&acc) {
        let p = &frame.points()[s.point];
        let pg = &mut grads.points[s.point];
        pg.visible = true;
        pg.mean2d = a.mean2d;
        pg.abs_mean2d = a.abs2d.norm();

        // conic = cov2d^-1
        let dl_dcov2d = -(s.conic * a.conic * s.conic);
        let pc = s.cam_pos;
        let jac = cam.projection_jacobian(&pc);
        let t = jac * wrot;
        let cov3 = crate::model::covariance_from(&p.appearance.log_scale, &p.pose.rotation)?;
        let dl_dcov3: Matrix3<f64> = t.transpose() * dl_dcov2d * t;
        let dl_dt = 2.0 * dl_dcov2d * t * cov3;
        let dl_dj = dl_dt * wrot.transpose();
        let (iz, iz2, iz3) = (1.0 / pc.z, 1.0 / (pc.z * pc.z), 1.0 / (pc.z * pc.z * pc.z));
        let mut dl_dpc = jac.transpose() * a.mean2d;
        dl_dpc.x += dl_dj[(0, 2)] * (-k.fx * iz2);
        dl_dpc.y += dl_dj[(1, 2)] * (-k.fy * iz2);
        dl_dpc.z += dl_dj[(0, 0)] * (-k.fx * iz2)
            + dl_dj[(0, 2)] * (2.0 * k.fx * pc.x * iz3)
            + dl_dj[(1, 1)] * (-k.fy * iz2)
            + dl_dj[(1, 2)] * (2.0 * k.fy * pc.y * iz3);
        let _ = iz;
        let mut dl_dmean = wrot.transpose() * dl_dpc;

        // color through SH
        let n_used = coeff_count(s.sh_degree);
        let basis = sh::basis(&s.view_dir);
        let mut dl_draw = [0.0; 3];
        for ch in 0..3 {
            if s.color_active[ch] {
                dl_draw[ch] = a.color[ch];
            }
        }
        for kk in 0..n_used {
            for ch in 0..3 {
                pg.sh[kk][ch] = dl_draw[ch] * basis[kk];
            }
        }
        if s.sh_degree > 0 {
            let bgrad = sh::basis_poly_grad(&s.view_dir);
            let coeffs = p.appearance.sh.coeffs();
            let mut dl_ddir = Vec3::zeros();
            for kk in 1..n_used {
                let wk: f64 = (0..3).map(|ch| dl_draw[ch] * coeffs[kk][ch]).sum();
                dl_ddir += wk * bgrad[kk];
            }
            let d = s.view_dir;
            dl_dmean += (dl_ddir - d * d.dot(&dl_ddir)) / s.view_dist;
        }
        pg.mean = dl_dmean;

        let o = s.opacity;
        pg.opacity_logit = a.opacity * o * (1.0 - o);

        // cov3 = M M^T with M = R S
        let q = &p.pose.rotation;
        let r = quat::rotation_matrix(q);
        let scale = p.appearance.log_scale.map(f64::exp);
        let m = r * Matrix3::from_diagonal(&scale);
        let dl_dm = 2.0 * dl_dcov3 * m;
        let mut dl_dr = Matrix3::zeros();
        for kk in 0..3 {
            let col_dot: f64 = (0..3).map(|i| dl_dm[(i, kk)] * r[(i, kk)]).sum();
            pg.log_scale[kk] = col_dot * scale[kk];
            for i in 0..3 {
                dl_dr[(i, kk)] = dl_dm[(i, kk)] * scale[kk];
            }
        }
        let n2 = quat::dot(q, q);
        let sandwich = quat::sandwich_matrix(q);
        let derivs = quat::sandwich_matrix_derivs(q);
        let comps = quat::to_array(q);
        for c in 0..4 {
            let dr = derivs[c] / n2 - sandwich * (2.0 * comps[c] / (n2 * n2));
            pg.rotation[c] = dl_dr.component_mul(&dr).sum();
        }
    }
    Ok(grads)
}

/// Mean absolute error over (masked) pixels and channels, with its image
/// gradient.
pub fn l1_loss(rendered: &RgbImage, target: &RgbImage, mask: Option<&Mask>) -> (f64, Vec<[f64; 3]>) {
    let n = rendered.data.len();
    let active = |pix: usize| mask.map_or(true, |m| m.data[pix] >= 128);
    let count = (0..n).filter(|&p| active(p)).count();
    let mut grad = vec![[0.0; 3]; n];
    if count == 0 {
        return (0.0, grad);
    }
    let norm = 1.0 / (3 * count) as f64;
    let mut loss = 0.0;
    for pix in 0..n {
        if !active(pix) {
            continue;
        }
        for ch in 0..3 {
            let d = rendered.data[pix][ch] - target.data[pix][ch];
            loss += d.abs();
            grad[pix][ch] = if d > 0.0 {
                norm
            } else if d < 0.0 {
                -norm
            } else {
                0.0
            };
        }
    }
    (loss * norm, grad)
}
