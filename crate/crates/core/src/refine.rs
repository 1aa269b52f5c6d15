//! Detail refinement of a warped frame: reference points adjust only their
//! pose, spawned extension points optimize everything, points with too
//! little rendered contribution are pruned, and an EMA plateau test ends
//! the loop early.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EgsError, Result};
use crate::model::{CameraView, GaussianFrame, GaussianPoint, PointClass, PointId, Vec3};
use crate::optim::Adam;
use crate::quat::{self, Quat};
use crate::sh::coeff_count;
use crate::splatter::{self, ContributionReport, FrameGrad, RenderOptions};

/// Optimized scalars per point: mean (3), rotation (4), log_scale (3),
/// opacity logit (1), degree-0 SH (3).
const BLOCK: usize = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub eps_alpha: f64,
    pub eps_beta: f64,
    pub eps_gamma: f64,
    pub omega_mean: f64,
    pub omega_rot: f64,
    pub densify_interval: usize,
    pub grad_threshold: f64,
    /// Fraction of the bbox diagonal separating clone from split.
    pub split_scale_threshold: f64,
    pub max_iterations: usize,
    pub ema_decay: f64,
    pub window: usize,
    pub densify: bool,
    pub prune: bool,
    /// Mean learning rates as fractions of the bbox diagonal.
    pub lr_mean: f64,
    pub lr_mean_extension: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_sh: f64,
    pub sh_iterations: usize,
    pub lr_sh_rest: f64,
    /// Set from the top-level seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            eps_alpha: 0.075,
            eps_beta: 0.225,
            eps_gamma: 0.01,
            omega_mean: 1e-4,
            omega_rot: 1e-4,
            densify_interval: 100,
            grad_threshold: 0.0008,
            split_scale_threshold: 0.01,
            max_iterations: 500,
            ema_decay: 0.9,
            window: 10,
            densify: true,
            prune: true,
            lr_mean: 2e-4,
            lr_mean_extension: 2e-3,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 0.05,
            lr_sh: 5e-3,
            sh_iterations: 200,
            lr_sh_rest: 1e-3,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.eps_alpha,
            self.eps_beta,
            self.eps_gamma,
            self.grad_threshold,
            self.split_scale_threshold,
            self.lr_mean,
            self.lr_mean_extension,
            self.lr_rotation,
            self.lr_scale,
            self.lr_opacity,
            self.lr_sh,
            self.lr_sh_rest,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(EgsError::InvalidParameter("refinement thresholds and rates must be positive".into()));
        }
        if self.eps_beta < self.eps_alpha {
            return Err(EgsError::InvalidParameter("eps_beta must be at least eps_alpha".into()));
        }
        if !(self.omega_mean >= 0.0 && self.omega_rot >= 0.0) {
            return Err(EgsError::InvalidParameter("pose regularizer weights must be non-negative".into()));
        }
        if !(self.ema_decay >= 0.0 && self.ema_decay < 1.0) {
            return Err(EgsError::InvalidParameter("ema_decay must lie in [0, 1)".into()));
        }
        if self.densify_interval == 0 || self.window == 0 {
            return Err(EgsError::InvalidParameter("densify interval and window must be positive".into()));
        }
        Ok(())
    }
}

/// Exponential moving average of the loss with per-window averages.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaTrace {
    pub decay: f64,
    pub window: usize,
    pub ema: Vec<f64>,
    pub window_averages: Vec<f64>,
    pub non_finite: bool,
    window_start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Plateau,
    NonFinite,
}

impl EmaTrace {
    pub fn new(decay: f64, window: usize) -> Self {
        Self {
            decay,
            window,
            ema: Vec::new(),
            window_averages: Vec::new(),
            non_finite: false,
            window_start: 0,
        }
    }

    /// A trace holding only the given window averages.
    pub fn from_window_averages(decay: f64, window: usize, averages: &[f64]) -> Self {
        Self {
            window_averages: averages.to_vec(),
            ..Self::new(decay, window)
        }
    }

    pub fn push(&mut self, loss: f64) {
        if !loss.is_finite() {
            self.non_finite = true;
        }
        let next = match self.ema.last() {
            Some(prev) => self.decay * prev + (1.0 - self.decay) * loss,
            None => loss,
        };
        self.ema.push(next);
        if (self.ema.len() - self.window_start) % self.window == 0 {
            let w = &self.ema[self.ema.len() - self.window..];
            self.window_averages.push(w.iter().sum::<f64>() / self.window as f64);
        }
    }

    /// Forgets the window averages so far; the next window starts at the
    /// current iteration. The EMA itself continues.
    pub fn restart_windows(&mut self) {
        self.window_averages.clear();
        self.window_start = self.ema.len();
    }

    /// Decline ratios between consecutive window averages.
    pub fn ratios(&self) -> Vec<f64> {
        self.window_averages
            .windows(2)
            .map(|w| if w[0] == 0.0 { 0.0 } else { (w[0] - w[1]) / w[0] })
            .collect()
    }
}

/// Stops once the decline ratio has been below `eps_gamma` at two
/// consecutive window boundaries.
pub fn adaptive_stop(trace: &EmaTrace, eps_gamma: f64) -> StopDecision {
    if trace.non_finite {
        return StopDecision::NonFinite;
    }
    let r = trace.ratios();
    if r.len() >= 2 && r[r.len() - 1] < eps_gamma && r[r.len() - 2] < eps_gamma {
        StopDecision::Plateau
    } else {
        StopDecision::Continue
    }
}

/// Removes points with `max_q phi < eps_alpha` or `sum_q phi < eps_beta`.
pub fn prune_by_contribution(frame: &mut GaussianFrame, report: &ContributionReport, eps_alpha: f64, eps_beta: f64) -> Result<Vec<PointId>> {
    if report.ids.len() != frame.len() || report.ids.iter().zip(frame.points()).any(|(a, p)| *a != p.id) {
        return Err(EgsError::Contract("contribution report does not cover this frame".into()));
    }
    let mut doomed = Vec::new();
    for (i, id) in report.ids.iter().enumerate() {
        if report.max(i) < eps_alpha || report.sum(i) < eps_beta {
            doomed.push(*id);
        }
    }
    if !doomed.is_empty() {
        frame.retain(|p| doomed.binary_search(&p.id).is_err());
    }
    Ok(doomed)
}

/// Averaged absolute screen-space gradient per point id.
#[derive(Debug, Clone, Default)]
pub struct DensifyStats {
    pub sum: HashMap<PointId, f64>,
    pub count: HashMap<PointId, u32>,
}

impl DensifyStats {
    pub fn add(&mut self, id: PointId, value: f64) {
        *self.sum.entry(id).or_default() += value;
        *self.count.entry(id).or_default() += 1;
    }

    pub fn mean(&self, id: PointId) -> f64 {
        match (self.sum.get(&id), self.count.get(&id)) {
            (Some(s), Some(&c)) if c > 0 => s / c as f64,
            _ => 0.0,
        }
    }

    pub fn clear(&mut self) {
        self.sum.clear();
        self.count.clear();
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub spawned: Vec<PointId>,
    /// Split sources, removed from the frame.
    pub removed: Vec<PointId>,
}

/// Clones small and splits large points whose averaged absolute
/// screen-space gradient exceeds the threshold. Spawned points are
/// extension points that take a fresh id from `next_id`.
pub fn densify(
    frame: &mut GaussianFrame,
    stats: &DensifyStats,
    grad_threshold: f64,
    split_scale: f64,
    rng: &mut ChaCha8Rng,
    next_id: &mut u64,
) -> Result<DensifyOutcome> {
    let mut out = DensifyOutcome::default();
    let mut new_points = Vec::new();
    let birth = frame.frame_index;
    for p in frame.points() {
        if !(stats.mean(p.id) > grad_threshold) {
            continue;
        }
        // spawns of points born in this frame inherit their ancestor
        let ancestor = match p.class {
            PointClass::Extension { ancestor } if p.birth_frame == birth => ancestor,
            _ => p.id,
        };
        let mut spawn = |mean: Vec3, log_scale: Vec3| {
            let mut c = p.clone();
            c.id = PointId(*next_id);
            *next_id += 1;
            c.pose.mean = mean;
            c.appearance.log_scale = log_scale;
            c.class = PointClass::Extension { ancestor };
            c.birth_frame = birth;
            out.spawned.push(c.id);
            c
        };
        let scale = p.appearance.scale();
        if scale.max() < split_scale {
            new_points.push(spawn(p.pose.mean, p.appearance.log_scale));
            out.cloned += 1;
        } else {
            let r = quat::rotation_matrix(&p.pose.rotation);
            let shrunk = p.appearance.log_scale.map(|s| s - 1.6f64.ln());
            for _ in 0..2 {
                let z = Vec3::from_fn(|_, _| StandardNormal.sample(rng));
                let mean = p.pose.mean + r * scale.component_mul(&z);
                new_points.push(spawn(mean, shrunk));
            }
            out.removed.push(p.id);
            out.split += 1;
        }
    }
    if !out.removed.is_empty() {
        let removed = out.removed.clone();
        frame.retain(|p| removed.binary_search(&p.id).is_err());
    }
    frame.extend(new_points)?;
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefineStats {
    pub iterations: usize,
    pub spawned: usize,
    pub pruned: usize,
    pub extension_fraction: f64,
    pub initial_loss: f64,
    /// Masked L1 of the returned frame.
    pub final_loss: f64,
    pub stopped_early: bool,
    /// Every id that left the frame during refinement.
    pub removed: Vec<PointId>,
}

impl RefineStats {
    pub fn to_record(&self) -> String {
        format!(
            "iterations={} spawned={} pruned={} ext_fraction={:.5} initial_loss={:.6} final_loss={:.6} early_stop={}",
            self.iterations, self.spawned, self.pruned, self.extension_fraction, self.initial_loss, self.final_loss, self.stopped_early
        )
    }
}

fn views_with_images(cams: &[CameraView]) -> Result<Vec<&CameraView>> {
    let v: Vec<&CameraView> = cams.iter().filter(|c| c.image.is_some()).collect();
    if v.is_empty() {
        return Err(EgsError::InvalidInput("refinement needs at least one view with an image".into()));
    }
    Ok(v)
}

/// Mean masked L1 over views and its per-point gradient. When `stats` is
/// given, every point visible in a view records that view's absolute
/// screen-space gradient of the view's own loss in pixel units.
pub fn render_loss(
    frame: &GaussianFrame,
    views: &[&CameraView],
    opts: &RenderOptions,
    mut stats: Option<&mut DensifyStats>,
) -> Result<(f64, FrameGrad)> {
    let mut total = FrameGrad::zeros(frame);
    let mut loss = 0.0;
    let scale = 1.0 / views.len() as f64;
    for cam in views {
        let out = splatter::render(frame, cam, opts)?;
        let (l, mut dimg) = splatter::l1_loss(&out.image, cam.image.as_ref().expect("filtered"), cam.mask.as_ref());
        loss += scale * l;
        dimg.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
        let g = splatter::backward(&out, frame, cam, &dimg)?;
        if let Some(st) = stats.as_deref_mut() {
            for (p, pg) in frame.points().iter().zip(&g.points) {
                if pg.visible {
                    st.add(p.id, pg.abs_mean2d / scale);
                }
            }
        }
        total.accumulate(&g);
    }
    Ok((loss, total))
}

/// Masked L1 of the frame, averaged over views with images.
pub fn eval_loss(frame: &GaussianFrame, cams: &[CameraView], opts: &RenderOptions) -> Result<f64> {
    let views = views_with_images(cams)?;
    let mut loss = 0.0;
    for cam in &views {
        let out = splatter::render(frame, cam, opts)?;
        loss += splatter::l1_loss(&out.image, cam.image.as_ref().expect("filtered"), cam.mask.as_ref()).0;
    }
    Ok(loss / views.len() as f64)
}

fn pack(p: &GaussianPoint, out: &mut [f64]) {
    out[0..3].copy_from_slice(p.pose.mean.as_slice());
    out[3..7].copy_from_slice(&quat::to_array(&p.pose.rotation));
    out[7..10].copy_from_slice(p.appearance.log_scale.as_slice());
    out[10] = p.appearance.opacity_logit;
    out[11..14].copy_from_slice(&p.appearance.sh.dc());
}

fn unpack(p: &mut GaussianPoint, v: &[f64]) {
    p.pose.mean = Vec3::new(v[0], v[1], v[2]);
    p.pose.rotation = quat::from_array([v[3], v[4], v[5], v[6]]);
    if !p.class.is_reference() {
        p.appearance.log_scale = Vec3::new(v[7], v[8], v[9]);
        p.appearance.opacity_logit = v[10];
        p.appearance.sh.coeffs_mut()[0] = [v[11], v[12], v[13]];
    }
}

struct Anchor {
    mean: Vec3,
    rotation: Quat,
}

/// Optimizes a warped frame against the views' images. `next_id` supplies
/// ids for spawned points and is advanced past every id handed out.
pub fn refine_frame(warped: &GaussianFrame, cams: &[CameraView], cfg: &RefineConfig, next_id: &mut u64) -> Result<(GaussianFrame, RefineStats)> {
    cfg.validate()?;
    let views = views_with_images(cams)?;
    if let Some(max) = warped.max_id() {
        *next_id = (*next_id).max(max.0 + 1);
    }
    let opts = RenderOptions::default();
    let diag = warped.bbox().diagonal().max(1e-9);
    let split_scale = cfg.split_scale_threshold * diag;
    let anchors: HashMap<PointId, Anchor> = warped
        .points()
        .iter()
        .filter(|p| p.class.is_reference())
        .map(|p| {
            (
                p.id,
                Anchor {
                    mean: p.pose.mean,
                    rotation: p.pose.rotation,
                },
            )
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (u64::from(warped.frame_index) << 32));
    let mut frame = warped.clone();
    let mut params = vec![0.0; frame.len() * BLOCK];
    for (p, chunk) in frame.points().iter().zip(params.chunks_exact_mut(BLOCK)) {
        pack(p, chunk);
    }
    let mut adam = Adam::new(params.len());
    let mut trace = EmaTrace::new(cfg.ema_decay, cfg.window);
    let mut dstats = DensifyStats::default();
    let mut stats = RefineStats::default();
    let mut since_densify = 0usize;
    let lr_mean = cfg.lr_mean * diag;
    let lr_mean_ext = cfg.lr_mean_extension * diag;

    let resync = |frame: &GaussianFrame, params: &mut Vec<f64>, adam: &mut Adam, old_ids: &[PointId]| {
        let keep: Vec<bool> = old_ids.iter().map(|id| frame.index_of(*id).is_some()).collect();
        adam.retain_blocks(BLOCK, &keep);
        let kept = keep.iter().filter(|k| **k).count();
        adam.grow((frame.len() - kept) * BLOCK);
        params.resize(frame.len() * BLOCK, 0.0);
        for (p, chunk) in frame.points().iter().zip(params.chunks_exact_mut(BLOCK)) {
            pack(p, chunk);
        }
    };

    let densify_and_prune = |frame: &mut GaussianFrame,
                                 params: &mut Vec<f64>,
                                 adam: &mut Adam,
                                 dstats: &mut DensifyStats,
                                 stats: &mut RefineStats,
                                 rng: &mut ChaCha8Rng,
                                 next_id: &mut u64|
     -> Result<usize> {
        let old_ids: Vec<PointId> = frame.points().iter().map(|p| p.id).collect();
        let mut spawned = 0;
        if cfg.densify {
            let d = densify(frame, dstats, cfg.grad_threshold, split_scale, rng, next_id)?;
            spawned = d.spawned.len();
            stats.spawned += spawned;
            stats.removed.extend(d.removed);
        }
        dstats.clear();
        if cfg.prune {
            let report = splatter::contribution(frame, cams, &opts, true)?;
            let removed = prune_by_contribution(frame, &report, cfg.eps_alpha, cfg.eps_beta)?;
            stats.pruned += removed.len();
            stats.removed.extend(removed);
        }
        resync(frame, params, adam, &old_ids);
        Ok(spawned)
    };

    let mut it = 0;
    while it < cfg.max_iterations {
        let (loss, grads) = render_loss(&frame, &views, &opts, Some(&mut dstats))?;
        if it == 0 {
            stats.initial_loss = loss;
        }
        trace.push(loss);
        if !loss.is_finite() {
            return Err(EgsError::Diverged(format!("non-finite render loss at iteration {it}; {}", stats.to_record())));
        }
        let mut flat = vec![0.0; params.len()];
        for (i, (p, pg)) in frame.points().iter().zip(&grads.points).enumerate() {
            let g = &mut flat[i * BLOCK..(i + 1) * BLOCK];
            g[0..3].copy_from_slice(pg.mean.as_slice());
            g[3..7].copy_from_slice(&pg.rotation);
            if p.class.is_reference() {
                if let Some(a) = anchors.get(&p.id) {
                    for k in 0..3 {
                        g[k] += cfg.omega_mean * sign(p.pose.mean[k] - a.mean[k]);
                    }
                    let (q, q0) = (quat::to_array(&p.pose.rotation), quat::to_array(&a.rotation));
                    for k in 0..4 {
                        g[3 + k] += cfg.omega_rot * sign(q[k] - q0[k]);
                    }
                }
            } else {
                g[7..10].copy_from_slice(pg.log_scale.as_slice());
                g[10] = pg.opacity_logit;
                g[11..14].copy_from_slice(&pg.sh[0]);
            }
        }
        let is_ext: Vec<bool> = frame.points().iter().map(|p| !p.class.is_reference()).collect();
        adam.step(&mut params, &flat, |i| match i % BLOCK {
            0..=2 if is_ext[i / BLOCK] => lr_mean_ext,
            0..=2 => lr_mean,
            3..=6 => cfg.lr_rotation,
            7..=9 => cfg.lr_scale,
            10 => cfg.lr_opacity,
            _ => cfg.lr_sh,
        });
        if params.iter().any(|v| !v.is_finite()) {
            return Err(EgsError::Diverged(format!("non-finite parameters at iteration {it}; {}", stats.to_record())));
        }
        for (p, chunk) in frame.points_mut().iter_mut().zip(params.chunks_exact(BLOCK)) {
            unpack(p, chunk);
        }
        it += 1;
        since_densify += 1;
        if since_densify == cfg.densify_interval && it < cfg.max_iterations {
            since_densify = 0;
            densify_and_prune(&mut frame, &mut params, &mut adam, &mut dstats, &mut stats, &mut rng, next_id)?;
        }
        match adaptive_stop(&trace, cfg.eps_gamma) {
            StopDecision::NonFinite => {
                return Err(EgsError::Diverged(format!("non-finite loss trace; {}", stats.to_record())));
            }
            StopDecision::Plateau => {
                // spend pending densification before giving up
                if cfg.densify && since_densify >= cfg.window && it < cfg.max_iterations {
                    since_densify = 0;
                    let spawned = densify_and_prune(&mut frame, &mut params, &mut adam, &mut dstats, &mut stats, &mut rng, next_id)?;
                    if spawned > 0 {
                        trace.restart_windows();
                        continue;
                    }
                }
                stats.stopped_early = true;
                break;
            }
            StopDecision::Continue => {}
        }
    }
    if cfg.prune {
        let report = splatter::contribution(&frame, cams, &opts, true)?;
        let removed = prune_by_contribution(&mut frame, &report, cfg.eps_alpha, cfg.eps_beta)?;
        stats.pruned += removed.len();
        stats.removed.extend(removed);
    }
    frame.normalize_rotations()?;
    stats.final_loss = eval_loss(&frame, cams, &opts)?;
    stats.iterations = it;
    stats.extension_fraction = frame.extension_fraction();
    stats.removed.sort_unstable();
    Ok((frame, stats))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Optimizes SH bands >= 1 (raised to `degree` with zero padding) against
/// the views' images with every other field frozen. When
/// `include_reference` is false only extension points change.
pub fn optimize_high_order_sh(
    frame: &GaussianFrame,
    cams: &[CameraView],
    degree: u8,
    iterations: usize,
    lr: f64,
    include_reference: bool,
) -> Result<GaussianFrame> {
    let mut out = frame.clone();
    if iterations == 0 || degree == 0 {
        return Ok(out);
    }
    let views = views_with_images(cams)?;
    let active: Vec<bool> = out.points().iter().map(|p| include_reference || !p.class.is_reference()).collect();
    if !active.iter().any(|a| *a) {
        return Ok(out);
    }
    for (p, a) in out.points_mut().iter_mut().zip(&active) {
        if *a && p.appearance.sh.degree() < degree {
            p.appearance.sh = p.appearance.sh.with_degree(degree);
        }
    }
    let per_point = 3 * (coeff_count(degree) - 1);
    let mut adam = Adam::new(out.len() * per_point);
    let mut params = vec![0.0; out.len() * per_point];
    let pack_rest = |f: &GaussianFrame, params: &mut [f64]| {
        for (p, chunk) in f.points().iter().zip(params.chunks_exact_mut(per_point)) {
            for (k, c) in p.appearance.sh.coeffs().iter().skip(1).take(coeff_count(degree) - 1).enumerate() {
                chunk[3 * k..3 * k + 3].copy_from_slice(c);
            }
        }
    };
    pack_rest(&out, &mut params);
    let opts = RenderOptions::default();
    for _ in 0..iterations {
        let (_, grads) = render_loss(&out, &views, &opts, None)?;
        let mut flat = vec![0.0; params.len()];
        for (i, pg) in grads.points.iter().enumerate() {
            if !active[i] {
                continue;
            }
            for (k, g) in pg.sh.iter().skip(1).take(coeff_count(degree) - 1).enumerate() {
                flat[i * per_point + 3 * k..i * per_point + 3 * k + 3].copy_from_slice(g);
            }
        }
        adam.step(&mut params, &flat, |_| lr);
        for ((p, chunk), a) in out.points_mut().iter_mut().zip(params.chunks_exact(per_point)).zip(&active) {
            if !*a {
                continue;
            }
            for (k, c) in p.appearance.sh.coeffs_mut().iter_mut().skip(1).enumerate() {
                *c = [chunk[3 * k], chunk[3 * k + 1], chunk[3 * k + 2]];
            }
        }
    }
    Ok(out)
}
