//! Warp parameters carried in inter chunks, and the deterministic re-warp
//! that encoder and decoder both use as the pose predictor.

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{bind_weights, warp_frame, DeformationGraph};
use crate::error::{EgsError, Result};
use crate::model::{GaussianFrame, PointId, Vec3};
use crate::quat::{self, Quat};

use super::QuantSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintNode {
    /// Id of the previous-frame point the node sits on.
    pub id: u64,
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

/// Node transforms describing the motion from one frame to the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpHint {
    pub k_g: usize,
    pub nodes: Vec<HintNode>,
}

impl WarpHint {
    /// No nodes: the prediction is the previous frame unchanged.
    pub fn identity(k_g: usize) -> Self {
        Self { k_g, nodes: Vec::new() }
    }

    /// Converts an optimized deformation graph sampled with
    /// [`crate::deform::sample_control_nodes`].
    pub fn from_graph(graph: &DeformationGraph, k_g: usize) -> Result<Self> {
        if graph.node_ids.len() != graph.len() {
            return Err(EgsError::InvalidInput("deformation graph has no node ids".into()));
        }
        let mut nodes: Vec<HintNode> = graph
            .nodes
            .iter()
            .zip(&graph.node_ids)
            .map(|(n, id)| HintNode {
                id: id.0,
                axis_angle: quat::to_axis_angle(&quat::normalized_canonical(&n.rotation).unwrap_or_else(quat::identity)).into(),
                translation: n.translation.into(),
            })
            .collect();
        nodes.sort_by_key(|n| n.id);
        Ok(Self { k_g, nodes })
    }

    /// Estimates node transforms from point correspondences between `prev`
    /// and `cur` (shared ids). Each node takes whichever of the weighted
    /// rigid fit, the mean rotation of its points, or no rotation leaves the
    /// smallest mean and rotation residuals, measured in quantizer steps.
    pub fn fit(prev: &GaussianFrame, cur: &GaussianFrame, nodes: usize, k_g: usize, seed: u64, quant: &QuantSpec) -> Result<Self> {
        if k_g == 0 {
            return Err(EgsError::InvalidParameter("K^g must be positive".into()));
        }
        let survivors: Vec<usize> = (0..prev.len()).filter(|&i| cur.get(prev.points()[i].id).is_some()).collect();
        if survivors.is_empty() || nodes == 0 {
            return Ok(Self::identity(k_g));
        }
        let m = nodes.min(survivors.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, survivors.len(), m)
            .into_iter()
            .map(|k| survivors[k])
            .collect();
        picks.sort_unstable();
        let mut graph = DeformationGraph::from_centers(picks.iter().map(|&i| prev.points()[i].pose.mean).collect());
        bind_weights(&mut graph, prev, k_g, 0)?;

        let mut acc = vec![NodeFit::default(); m];
        for (i, b) in graph.point_bindings.iter().enumerate() {
            let p = &prev.points()[i];
            let Some(q) = cur.get(p.id) else { continue };
            let turn = quat::mul(&unit(&q.pose.rotation), &quat::conjugate(&unit(&p.pose.rotation)));
            for (&j, &w) in b.nodes.iter().zip(&b.weights) {
                acc[j].push(w, p.pose.mean, q.pose.mean, turn);
            }
        }
        let cost = Residual {
            mean_step: quant.mean.step,
            rot_step: quant.rotation.step,
        };
        let nodes = picks
            .iter()
            .zip(&acc)
            .zip(&graph.nodes)
            .map(|((&i, fit), node)| {
                let (r, t) = fit.solve(&node.center, &cost);
                HintNode {
                    id: prev.points()[i].id.0,
                    axis_angle: quat::to_axis_angle(&quat::from_rotation_matrix(&r)).into(),
                    translation: t.into(),
                }
            })
            .collect();
        Ok(Self { k_g, nodes })
    }
}

fn unit(q: &Quat) -> Quat {
    quat::normalized_canonical(q).unwrap_or_else(quat::identity)
}

struct Residual {
    mean_step: f64,
    rot_step: f64,
}

#[derive(Debug, Clone, Default)]
struct NodeFit {
    w: f64,
    /// Weight, previous mean, current mean, rotation from previous to current.
    src: Vec<(f64, Vec3, Vec3, Quat)>,
}

impl NodeFit {
    fn push(&mut self, w: f64, a: Vec3, b: Vec3, turn: Quat) {
        if w > 0.0 {
            self.w += w;
            self.src.push((w, a, b, turn));
        }
    }

    /// Rotation `R` and node translation `t` such that `R (a - c) + c + t`
    /// best matches `b` while `R` stays close to the points' own rotations.
    fn solve(&self, c: &Vec3, cost: &Residual) -> (Matrix3<f64>, Vec3) {
        if self.w <= 0.0 {
            return (Matrix3::identity(), Vec3::zeros());
        }
        let ca: Vec3 = self.src.iter().map(|(w, a, _, _)| *w * a).sum::<Vec3>() / self.w;
        let cb: Vec3 = self.src.iter().map(|(w, _, b, _)| *w * b).sum::<Vec3>() / self.w;
        let translation = |r: &Matrix3<f64>| cb - c - r * (ca - c);
        let score = |r: &Matrix3<f64>| {
            let t = translation(r);
            let q = quat::from_rotation_matrix(r);
            self.src
                .iter()
                .map(|(w, a, b, turn)| {
                    let dm = (r * (a - c) + c + t - b).norm_squared() / (cost.mean_step * cost.mean_step);
                    let cos_half = quat::dot(&q, turn).abs().min(1.0);
                    let angle = 2.0 * cos_half.acos();
                    w * (dm + angle * angle / (cost.rot_step * cost.rot_step))
                })
                .sum::<f64>()
        };
        let mut best = Matrix3::identity();
        let mut best_score = score(&best);
        for r in [self.kabsch(&ca, &cb), self.mean_turn()].into_iter().flatten() {
            let s = score(&r);
            if s < best_score {
                best = r;
                best_score = s;
            }
        }
        (best, translation(&best))
    }

    fn kabsch(&self, ca: &Vec3, cb: &Vec3) -> Option<Matrix3<f64>> {
        if self.src.len() < 3 {
            return None;
        }
        let h: Matrix3<f64> = self.src.iter().map(|(w, a, b, _)| *w * (b - cb) * (a - ca).transpose()).sum();
        let svd = h.svd(true, true);
        let (u, v_t) = (svd.u?, svd.v_t?);
        let d = (u * v_t).determinant().signum();
        let r = u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v_t;
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    /// Normalized weighted average of the points' rotations, sign-aligned
    /// to the first.
    fn mean_turn(&self) -> Option<Matrix3<f64>> {
        let first = self.src.first()?.3;
        let sum = self.src.iter().fold(Quat::new(0.0, 0.0, 0.0, 0.0), |acc, (w, _, _, q)| {
            let s = if quat::dot(q, &first) < 0.0 { -*w } else { *w };
            acc + q * s
        });
        quat::normalized_canonical(&sum).map(|q| quat::rotation_matrix(&q))
    }
}

/// Re-warps `prev` with quantized node transforms. Nodes must be sorted by id
/// and sit on points of `prev`.
pub(crate) fn predict(prev: &GaussianFrame, node_ids: &[u64], params: &[(Vec3, Vec3)], k_g: usize) -> Result<GaussianFrame> {
    if node_ids.is_empty() {
        return Ok(prev.clone());
    }
    if k_g == 0 {
        return Err(EgsError::CorruptChunk("warp with K^g = 0".into()));
    }
    let centers = node_ids
        .iter()
        .map(|&id| {
            prev.get(PointId(id))
                .map(|p| p.pose.mean)
                .ok_or_else(|| EgsError::CorruptChunk(format!("warp node {id} is not a point of the previous frame")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut graph = DeformationGraph::from_centers(centers);
    for (n, (aa, t)) in graph.nodes.iter_mut().zip(params) {
        n.rotation = quat::from_axis_angle(aa);
        n.translation = *t;
    }
    bind_weights(&mut graph, prev, k_g, 0)?;
    warp_frame(&graph, prev)
}
