//! Frame-by-frame tracking: the previous result is promoted to reference
//! points, warped by an optimized deformation graph, then refined.

use crate::codec::WarpHint;
use crate::config::Config;
use crate::deform::{bind_weights, optimize_warp, sample_control_nodes};
use crate::error::{EgsError, Result};
use crate::model::{CameraView, GaussianFrame, PointClass};
use crate::refine::{eval_loss, optimize_high_order_sh, refine_frame, RefineStats};
use crate::splatter::RenderOptions;

/// Outcome of one tracked frame.
#[derive(Debug, Clone)]
pub struct TrackReport {
    pub frame_index: u32,
    pub points: usize,
    pub warp_iterations: usize,
    /// Masked L1 of the warped frame before refinement.
    pub post_warp_loss: f64,
    pub refine: RefineStats,
    /// The warp that was applied, in the form the codec transmits.
    pub warp: WarpHint,
    /// The frame after the warp, before refinement.
    pub warped: GaussianFrame,
}

impl TrackReport {
    /// One structured line for the stats log.
    pub fn to_record(&self) -> String {
        format!(
            "frame={} points={} warp_iterations={} post_warp_loss={:.6} {}",
            self.frame_index,
            self.points,
            self.warp_iterations,
            self.post_warp_loss,
            self.refine.to_record()
        )
    }
}

/// Evolves one point set through a sequence.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: Config,
    current: GaussianFrame,
    next_id: u64,
}

fn mix(seed: u64, frame: u32) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ u64::from(frame)
}

impl Tracker {
    pub fn new(mut initial: GaussianFrame, cfg: Config) -> Result<Self> {
        cfg.validate()?;
        if initial.is_empty() {
            return Err(EgsError::InvalidInput("initial frame has no points".into()));
        }
        initial.normalize_rotations()?;
        let next_id = initial.max_id().map_or(0, |id| id.0 + 1);
        Ok(Self {
            cfg,
            current: initial,
            next_id,
        })
    }

    pub fn current(&self) -> &GaussianFrame {
        &self.current
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    /// Tracks the next frame against `views`, which carry that frame's
    /// images and masks and the flow from the current frame to it.
    pub fn step(&mut self, views: &[CameraView]) -> Result<TrackReport> {
        let frame_index = self.current.frame_index + 1;
        let mut prev = self.current.clone();
        prev.frame_index = frame_index;
        for p in prev.points_mut() {
            p.class = PointClass::Reference;
        }
        let k_g = self.cfg.codec.k_g;
        let (warped, warp, warp_iterations) = if self.cfg.stages.warp {
            let w = &self.cfg.warp;
            let mut graph = sample_control_nodes(&prev, w.num_nodes.min(prev.len()), mix(w.seed, frame_index))?;
            bind_weights(&mut graph, &prev, w.k_g, w.k_c)?;
            let out = optimize_warp(graph, &prev, views, w)?;
            let hint = WarpHint::from_graph(&out.graph, k_g)?;
            (out.frame, hint, out.iterations)
        } else {
            (prev, WarpHint::identity(k_g), 0)
        };
        let post_warp_loss = eval_loss(&warped, views, &RenderOptions::default())?;
        let before = warped.clone();
        let (frame, refine) = if self.cfg.stages.refine {
            let mut rc = self.cfg.refine.clone();
            rc.seed = mix(rc.seed, frame_index);
            let (mut refined, stats) = refine_frame(&warped, views, &rc, &mut self.next_id)?;
            let degree = refined.sh_degree();
            if self.cfg.stages.high_order_sh && degree > 0 && rc.sh_iterations > 0 {
                refined = optimize_high_order_sh(&refined, views, degree, rc.sh_iterations, rc.lr_sh_rest, false)?;
            }
            (refined, stats)
        } else {
            let stats = RefineStats {
                initial_loss: post_warp_loss,
                final_loss: post_warp_loss,
                extension_fraction: warped.extension_fraction(),
                ..RefineStats::default()
            };
            (warped, stats)
        };
        self.current = frame;
        Ok(TrackReport {
            frame_index,
            points: self.current.len(),
            warp_iterations,
            post_warp_loss,
            refine,
            warp,
            warped: before,
        })
    }
}
