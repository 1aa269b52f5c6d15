//! Coarse alignment of a frame to the next time step with an embedded
//! deformation graph: node sampling, weight binding, blended warping, the
//! energy terms and their gradients, and the relaxation-schedule optimizer.

use nalgebra::{Matrix4, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EgsError, Result};
use crate::knn::KdTree;
use crate::model::{CameraView, GaussianFrame, PointId, Vec3};
use crate::optim::Adam;
use crate::quat::{self, Quat};
use crate::sh::rotate_sh;
use crate::splatter::{self, RenderOptions};

/// Parameters per node in the flat layout: (qw, qx, qy, qz, tx, ty, tz).
pub const NODE_PARAMS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct ControlNode {
    pub center: Vec3,
    pub rotation: Quat,
    pub translation: Vec3,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Binding {
    pub nodes: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeformationGraph {
    pub nodes: Vec<ControlNode>,
    /// Indexed like the points of the frame the graph was bound to.
    pub point_bindings: Vec<Binding>,
    pub node_bindings: Vec<Binding>,
    /// Ids of the points the nodes were sampled at; empty for graphs built
    /// from bare centers.
    pub node_ids: Vec<PointId>,
    bound_ids: Vec<PointId>,
}

impl DeformationGraph {
    /// Nodes at the given centers with identity transforms and no bindings.
    pub fn from_centers(centers: Vec<Vec3>) -> Self {
        Self {
            nodes: centers
                .into_iter()
                .map(|center| ControlNode {
                    center,
                    rotation: quat::identity(),
                    translation: Vec3::zeros(),
                })
                .collect(),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_bound_to(&self, frame: &GaussianFrame) -> bool {
        self.bound_ids.len() == frame.len() && frame.points().iter().zip(&self.bound_ids).all(|(p, id)| p.id == *id)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.nodes.len() * NODE_PARAMS);
        for n in &self.nodes {
            out.extend_from_slice(&quat::to_array(&n.rotation));
            out.extend_from_slice(n.translation.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.nodes.len() * NODE_PARAMS);
        for (n, p) in self.nodes.iter_mut().zip(params.chunks_exact(NODE_PARAMS)) {
            n.rotation = quat::from_array([p[0], p[1], p[2], p[3]]);
            n.translation = Vec3::new(p[4], p[5], p[6]);
        }
    }

    pub fn reset_transforms(&mut self) {
        for n in &mut self.nodes {
            n.rotation = quat::identity();
            n.translation = Vec3::zeros();
        }
    }
}

/// Picks `m` distinct points uniformly at random (seeded) as node centers.
pub fn sample_control_nodes(frame: &GaussianFrame, m: usize, seed: u64) -> Result<DeformationGraph> {
    if m == 0 {
        return Err(EgsError::InvalidParameter("control node count must be positive".into()));
    }
    let n = frame.len();
    let m = m.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    let mut graph = DeformationGraph::from_centers(idx.iter().map(|&i| frame.points()[i].pose.mean).collect());
    graph.node_ids = idx.iter().map(|&i| frame.points()[i].id).collect();
    Ok(graph)
}

fn binding_for(tree: &KdTree, q: &Vec3, k: usize, exclude: Option<usize>) -> Binding {
    let nb = tree.nearest(q, k + 1, exclude);
    if nb.is_empty() {
        return Binding::default();
    }
    let bound = nb.len().min(k);
    let kth = nb[bound - 1].dist;
    let mut d_max = if nb.len() > k {
        nb[k].dist
    } else {
        // fewer candidates than requested: no farther neighbor exists
        kth + kth.max(1e-9)
    };
    if d_max <= 0.0 {
        log::warn!("coincident control nodes; using a 1e-9 m distance floor");
    }
    if d_max <= kth {
        d_max = kth + 1e-9;
    }
    let mut weights: Vec<f64> = nb[..bound].iter().map(|n| (1.0 - n.dist / d_max).powi(2)).collect();
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    } else {
        weights.iter_mut().for_each(|w| *w = 1.0 / bound as f64);
    }
    Binding {
        nodes: nb[..bound].iter().map(|n| n.index).collect(),
        weights,
    }
}

/// Binds every point to its `k_g` nearest nodes and every node to its `k_c`
/// nearest other nodes.
pub fn bind_weights(graph: &mut DeformationGraph, frame: &GaussianFrame, k_g: usize, k_c: usize) -> Result<()> {
    if graph.is_empty() {
        return Err(EgsError::InvalidParameter("graph has no nodes".into()));
    }
    if k_g == 0 {
        return Err(EgsError::InvalidParameter("K^g must be positive".into()));
    }
    let centers: Vec<Vec3> = graph.nodes.iter().map(|n| n.center).collect();
    let tree = KdTree::new(&centers);
    graph.point_bindings = frame.points().iter().map(|p| binding_for(&tree, &p.pose.mean, k_g, None)).collect();
    graph.node_bindings = if k_c == 0 {
        vec![Binding::default(); centers.len()]
    } else {
        centers.iter().enumerate().map(|(j, c)| binding_for(&tree, c, k_c, Some(j))).collect()
    };
    graph.bound_ids = frame.points().iter().map(|p| p.id).collect();
    Ok(())
}

/// Per-point intermediate values of the rotation blend, kept for the backward pass.
#[derive(Debug, Clone)]
struct Blend {
    /// Hemisphere-aligned weighted quaternion sum.
    sum: Quat,
    signs: Vec<f64>,
}

fn blend_rotation(graph: &DeformationGraph, b: &Binding) -> Blend {
    let first = graph.nodes[b.nodes[0]].rotation;
    let mut sum = Quat::new(0.0, 0.0, 0.0, 0.0);
    let mut signs = Vec::with_capacity(b.nodes.len());
    for (&j, &w) in b.nodes.iter().zip(&b.weights) {
        let q = graph.nodes[j].rotation;
        let s = if quat::dot(&q, &first) < 0.0 { -1.0 } else { 1.0 };
        signs.push(s);
        sum += q * (w * s);
    }
    Blend { sum, signs }
}

fn check_bound(graph: &DeformationGraph, frame: &GaussianFrame) -> Result<()> {
    if !graph.is_bound_to(frame) {
        return Err(EgsError::Contract("deformation graph is not bound to this frame".into()));
    }
    Ok(())
}

fn warp_mean(graph: &DeformationGraph, b: &Binding, mean: &Vec3) -> Vec3 {
    let mut delta = Vec3::zeros();
    for (&j, &w) in b.nodes.iter().zip(&b.weights) {
        let n = &graph.nodes[j];
        let off = mean - n.center;
        delta += w * (quat::sandwich_matrix(&n.rotation) * off - off + n.translation);
    }
    mean + delta
}

fn warp_impl(graph: &DeformationGraph, frame: &GaussianFrame, with_sh: bool) -> Result<(GaussianFrame, Vec<Blend>)> {
    check_bound(graph, frame)?;
    let mut out = frame.clone();
    let mut blends = Vec::with_capacity(frame.len());
    for (p, b) in out.points_mut().iter_mut().zip(&graph.point_bindings) {
        if b.nodes.is_empty() {
            blends.push(Blend {
                sum: quat::identity(),
                signs: Vec::new(),
            });
            continue;
        }
        p.pose.mean = warp_mean(graph, b, &p.pose.mean);
        let blend = blend_rotation(graph, b);
        let first = graph.nodes[b.nodes[0]].rotation;
        let uniform = b.nodes.iter().all(|&j| graph.nodes[j].rotation == first);
        if !(uniform && first == quat::identity()) {
            let qb = if uniform {
                quat::normalized_canonical(&first)
            } else {
                quat::normalized_canonical(&blend.sum)
            }
            .unwrap_or_else(quat::identity);
            let composed = quat::mul(&qb, &p.pose.rotation);
            p.pose.rotation = quat::normalized_canonical(&composed).unwrap_or_else(quat::identity);
            if with_sh && p.appearance.sh.degree() > 0 {
                p.appearance.sh = rotate_sh(&p.appearance.sh, &quat::rotation_matrix(&qb));
            }
        }
        blends.push(blend);
    }
    Ok((out, blends))
}

/// Applies the graph to a bound frame. Means follow the blended node
/// transforms, orientations and SH bands >= 1 follow the blended node
/// rotation; every other field is copied unchanged.
pub fn warp_frame(graph: &DeformationGraph, frame: &GaussianFrame) -> Result<GaussianFrame> {
    Ok(warp_impl(graph, frame, true)?.0)
}

fn right_mul_matrix(q: &Quat) -> Matrix4<f64> {
    // columns: e_c (x) q for the four basis quaternions
    let mut m = Matrix4::zeros();
    for c in 0..4 {
        let mut e = [0.0; 4];
        e[c] = 1.0;
        let col = quat::to_array(&quat::mul(&quat::from_array(e), q));
        for r in 0..4 {
            m[(r, c)] = col[r];
        }
    }
    m
}

/// Chains per-point gradients w.r.t. warped means and warped (raw)
/// quaternions back to the flat node parameters.
fn chain_to_nodes(
    graph: &DeformationGraph,
    source: &GaussianFrame,
    blends: &[Blend],
    dl_dmean: &[Vec3],
    dl_drot: Option<&[[f64; 4]]>,
) -> Vec<f64> {
    let mut grad = vec![0.0; graph.len() * NODE_PARAMS];
    for (i, (p, b)) in source.points().iter().zip(&graph.point_bindings).enumerate() {
        let gm = dl_dmean[i];
        let has_mean = gm != Vec3::zeros();
        let gr = dl_drot.map(|r| r[i]).filter(|r| *r != [0.0; 4]);
        if b.nodes.is_empty() || (!has_mean && gr.is_none()) {
            continue;
        }
        if has_mean {
            for (&j, &w) in b.nodes.iter().zip(&b.weights) {
                let n = &graph.nodes[j];
                let jac = quat::rotate_jacobian(&n.rotation, &(p.pose.mean - n.center));
                let g = &mut grad[j * NODE_PARAMS..(j + 1) * NODE_PARAMS];
                for c in 0..4 {
                    g[c] += w * gm.dot(&jac[c]);
                }
                for a in 0..3 {
                    g[4 + a] += w * gm[a];
                }
            }
        }
        if let Some(gr) = gr {
            let blend = &blends[i];
            let u = blend.sum;
            let un = quat::norm(&u);
            if un <= 1e-12 {
                continue;
            }
            let qb = u / un;
            let sign_b = if qb.w < 0.0 { -1.0 } else { 1.0 };
            let qb_c = qb * sign_b;
            let pmat = right_mul_matrix(&p.pose.rotation);
            let pq = quat::mul(&qb_c, &p.pose.rotation);
            let pn = quat::norm(&pq);
            let sign_p = if pq.w < 0.0 { -1.0 } else { 1.0 };
            let phat = nalgebra::Vector4::from(quat::to_array(&pq)) / pn;
            let g_out = nalgebra::Vector4::from(gr);
            // q~ = sign_p * pq / |pq|
            let dl_dpq = sign_p * (g_out - phat * phat.dot(&g_out)) / pn;
            let dl_dqbc = pmat.transpose() * dl_dpq;
            let uhat = nalgebra::Vector4::from(quat::to_array(&qb));
            let dl_dqb = sign_b * dl_dqbc;
            let dl_du = (dl_dqb - uhat * uhat.dot(&dl_dqb)) / un;
            for ((&j, &w), &s) in b.nodes.iter().zip(&b.weights).zip(&blend.signs) {
                let g = &mut grad[j * NODE_PARAMS..j * NODE_PARAMS + 4];
                for c in 0..4 {
                    g[c] += w * s * dl_du[c];
                }
            }
        }
    }
    grad
}

/// `(1/M) sum_j (1 - |q_j|)^2` and its gradient.
pub fn energy_rot(graph: &DeformationGraph) -> (f64, Vec<f64>) {
    let m = graph.len().max(1) as f64;
    let mut grad = vec![0.0; graph.len() * NODE_PARAMS];
    let mut e = 0.0;
    for (j, n) in graph.nodes.iter().enumerate() {
        let norm = quat::norm(&n.rotation);
        e += (1.0 - norm).powi(2);
        if norm > 0.0 {
            let f = -2.0 * (1.0 - norm) / (norm * m);
            let q = quat::to_array(&n.rotation);
            for c in 0..4 {
                grad[j * NODE_PARAMS + c] = f * q[c];
            }
        }
    }
    (e / m, grad)
}

/// As-rigid-as-possible energy over the node graph and its gradient.
pub fn energy_arap(graph: &DeformationGraph) -> (f64, Vec<f64>) {
    let m = graph.len().max(1) as f64;
    let mut grad = vec![0.0; graph.len() * NODE_PARAMS];
    let mut e = 0.0;
    for (j, b) in graph.node_bindings.iter().enumerate() {
        let nj = &graph.nodes[j];
        let s = quat::sandwich_matrix(&nj.rotation);
        for (&k, &w) in b.nodes.iter().zip(&b.weights) {
            let nk = &graph.nodes[k];
            let off = nk.center - nj.center;
            let r = s * off + nj.center + nj.translation - nk.center - nk.translation;
            e += w * r.norm_squared();
            let gr = 2.0 * w / m * r;
            let jac = quat::rotate_jacobian(&nj.rotation, &off);
            for c in 0..4 {
                grad[j * NODE_PARAMS + c] += gr.dot(&jac[c]);
            }
            for a in 0..3 {
                grad[j * NODE_PARAMS + 4 + a] += gr[a];
                grad[k * NODE_PARAMS + 4 + a] -= gr[a];
            }
        }
    }
    (e / m, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTarget {
    pub point: usize,
    pub view: usize,
    pub target: Vector2<f64>,
    pub weight: f64,
}

/// Flow correspondences of a source frame, fixed for the whole optimization.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowTargets {
    pub entries: Vec<FlowTarget>,
    /// Number of (point, view) pairs whose flow passes the magnitude test.
    pub active_pairs: usize,
}

impl FlowTargets {
    /// For every view with a flow map and every point projecting inside it,
    /// samples the flow at the projected mean. A pair is active when the
    /// flow magnitude is at least `eps_flow` pixels; its weight is the
    /// point's composited weight at the pixel containing the projection.
    pub fn build(frame: &GaussianFrame, cams: &[CameraView], eps_flow: f64) -> Result<Self> {
        let mut out = Self::default();
        let opts = RenderOptions::base_color_only();
        for (q, cam) in cams.iter().enumerate() {
            let Some(flow) = &cam.flow else { continue };
            let render = splatter::render(frame, cam, &opts)?;
            for (i, p) in frame.points().iter().enumerate() {
                let pc = cam.to_camera(&p.pose.mean);
                if !(pc.z > cam.near && pc.z < cam.far) {
                    continue;
                }
                let uv = cam.project_camera_point(&pc);
                if !(uv.x >= 0.0 && uv.y >= 0.0 && uv.x < cam.width() as f64 && uv.y < cam.height() as f64) {
                    continue;
                }
                let f = flow.sample(uv.x, uv.y);
                if f[0].hypot(f[1]) < eps_flow {
                    continue;
                }
                out.active_pairs += 1;
                let pix = uv.y as usize * cam.width() + uv.x as usize;
                let weight = render.weight_at(i, pix);
                if weight > 0.0 {
                    out.entries.push(FlowTarget {
                        point: i,
                        view: q,
                        target: uv + Vector2::new(f[0], f[1]),
                        weight,
                    });
                }
            }
        }
        if out.active_pairs == 0 {
            log::debug!("no active flow pairs");
        }
        Ok(out)
    }
}

/// Flow term: weighted distance between warped projections and flow targets,
/// normalized by the number of active pairs.
pub fn energy_flow(graph: &DeformationGraph, frame: &GaussianFrame, cams: &[CameraView], targets: &FlowTargets) -> Result<(f64, Vec<f64>)> {
    check_bound(graph, frame)?;
    if targets.active_pairs == 0 {
        return Ok((0.0, vec![0.0; graph.len() * NODE_PARAMS]));
    }
    let norm = 1.0 / targets.active_pairs as f64;
    let mut warped_means: Vec<Option<Vec3>> = vec![None; frame.len()];
    let mut dl_dmean = vec![Vec3::zeros(); frame.len()];
    let mut e = 0.0;
    for t in &targets.entries {
        let cam = cams
            .get(t.view)
            .ok_or_else(|| EgsError::Contract("flow target refers to a missing view".into()))?;
        let mean = *warped_means[t.point]
            .get_or_insert_with(|| warp_mean(graph, &graph.point_bindings[t.point], &frame.points()[t.point].pose.mean));
        let pc = cam.to_camera(&mean);
        if !(pc.z > cam.near) {
            continue;
        }
        let r = cam.project_camera_point(&pc) - t.target;
        let d = r.norm();
        e += t.weight * d;
        if d > 1e-12 {
            let g2 = t.weight * norm * r / d;
            let jac = cam.projection_jacobian(&pc);
            dl_dmean[t.point] += cam.extrinsics.rotation.transpose() * (jac.transpose() * g2);
        }
    }
    let grad = chain_to_nodes(graph, frame, &[], &dl_dmean, None);
    Ok((e * norm, grad))
}

/// Masked L1 photometric term of the warped frame rendered with base color
/// only, averaged over views with images.
pub fn energy_data(graph: &DeformationGraph, frame: &GaussianFrame, cams: &[CameraView]) -> Result<(f64, Vec<f64>)> {
    let views: Vec<&CameraView> = cams.iter().filter(|c| c.image.is_some()).collect();
    if views.is_empty() {
        return Err(EgsError::InvalidInput("data term needs at least one view with an image".into()));
    }
    let (warped, blends) = warp_impl(graph, frame, false)?;
    let opts = RenderOptions::base_color_only();
    let scale = 1.0 / views.len() as f64;
    let mut e = 0.0;
    let mut dl_dmean = vec![Vec3::zeros(); frame.len()];
    let mut dl_drot = vec![[0.0; 4]; frame.len()];
    for cam in views {
        let out = splatter::render(&warped, cam, &opts)?;
        let (loss, dl_dimg) = splatter::l1_loss(&out.image, cam.image.as_ref().unwrap(), cam.mask.as_ref());
        e += loss * scale;
        let g = splatter::backward(&out, &warped, cam, &dl_dimg)?;
        for (i, pg) in g.points.iter().enumerate() {
            if !pg.visible {
                continue;
            }
            dl_dmean[i] += scale * pg.mean;
            for c in 0..4 {
                dl_drot[i][c] += scale * pg.rotation[c];
            }
        }
    }
    let grad = chain_to_nodes(graph, frame, &blends, &dl_dmean, Some(&dl_drot));
    Ok((e, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpConfig {
    pub num_nodes: usize,
    pub k_g: usize,
    pub k_c: usize,
    pub eps_flow: f64,
    pub omega_flow: f64,
    pub omega_arap: f64,
    pub omega_rot: f64,
    pub cycles: usize,
    pub iters_per_cycle: usize,
    pub flow_decay: f64,
    pub reg_decay: f64,
    /// Translation learning rate as a fraction of the bbox diagonal.
    pub lr_translation: f64,
    pub lr_rotation: f64,
    /// Weight of the structural-similarity part of the data term. Accepted
    /// for configuration completeness and ignored: the data term is pure L1.
    pub lambda_dssim: f64,
    pub use_flow: bool,
    pub use_data: bool,
    /// Set from the top-level seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self {
            num_nodes: 5000,
            k_g: 4,
            k_c: 6,
            eps_flow: 1.0,
            omega_flow: 0.25,
            omega_arap: 1000.0,
            omega_rot: 1000.0,
            cycles: 10,
            iters_per_cycle: 600,
            flow_decay: 0.8,
            reg_decay: 0.58,
            lr_translation: 1e-3,
            lr_rotation: 1e-3,
            lambda_dssim: 0.0,
            use_flow: true,
            use_data: true,
            seed: 0,
        }
    }
}

impl WarpConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.eps_flow, self.lr_translation, self.lr_rotation, self.flow_decay, self.reg_decay];
        if self.num_nodes == 0 || self.k_g == 0 || positive.iter().any(|v| !(*v > 0.0)) {
            return Err(EgsError::InvalidParameter("warp configuration values must be positive".into()));
        }
        if [self.omega_flow, self.omega_arap, self.omega_rot].iter().any(|v| !(*v >= 0.0)) {
            return Err(EgsError::InvalidParameter("energy weights must be non-negative".into()));
        }
        Ok(())
    }

    /// `(omega_flow, omega_arap, omega_rot)` in effect during `cycle` (0-based).
    pub fn weights_for_cycle(&self, cycle: usize) -> (f64, f64, f64) {
        let c = cycle as i32;
        (
            self.omega_flow * self.flow_decay.powi(c),
            self.omega_arap * self.reg_decay.powi(c),
            self.omega_rot * self.reg_decay.powi(c),
        )
    }
}

#[derive(Debug, Clone)]
pub struct WarpOutcome {
    pub graph: DeformationGraph,
    pub frame: GaussianFrame,
    /// Total weighted energy before every step, plus the final value.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Total energy and gradient for the given term weights.
pub fn total_energy(
    graph: &DeformationGraph,
    frame: &GaussianFrame,
    cams: &[CameraView],
    targets: Option<&FlowTargets>,
    weights: (f64, f64, f64),
    use_data: bool,
) -> Result<(f64, Vec<f64>)> {
    let (w_flow, w_arap, w_rot) = weights;
    let (mut e, mut g) = if use_data {
        energy_data(graph, frame, cams)?
    } else {
        (0.0, vec![0.0; graph.len() * NODE_PARAMS])
    };
    let mut add = |(ei, gi): (f64, Vec<f64>), w: f64| {
        if w == 0.0 {
            return;
        }
        e += w * ei;
        for (a, b) in g.iter_mut().zip(gi) {
            *a += w * b;
        }
    };
    if let Some(t) = targets {
        add(energy_flow(graph, frame, cams, t)?, w_flow);
    }
    add(energy_arap(graph), w_arap);
    add(energy_rot(graph), w_rot);
    Ok((e, g))
}

/// Energies below this never count as divergent, whatever the initial energy.
const DIVERGENCE_FLOOR: f64 = 1e-2;

/// Minimizes the weighted warp energy with Adam under the relaxation schedule.
pub fn optimize_warp(mut graph: DeformationGraph, frame: &GaussianFrame, cams: &[CameraView], cfg: &WarpConfig) -> Result<WarpOutcome> {
    cfg.validate()?;
    check_bound(&graph, frame)?;
    if cfg.lambda_dssim != 0.0 {
        log::warn!("lambda_dssim = {} is ignored; the data term is pure L1", cfg.lambda_dssim);
    }
    // only base color is rendered while warping
    let mut base = frame.clone();
    for p in base.points_mut() {
        p.appearance.sh = p.appearance.sh.with_degree(0);
    }
    let targets = if cfg.use_flow {
        Some(FlowTargets::build(&base, cams, cfg.eps_flow)?)
    } else {
        None
    };
    let lr_t = cfg.lr_translation * frame.bbox().diagonal().max(1e-9);
    let lr = |i: usize| if i % NODE_PARAMS < 4 { cfg.lr_rotation } else { lr_t };
    let mut params = graph.params();
    let mut adam = Adam::new(params.len());
    let mut trace = Vec::with_capacity(cfg.cycles * cfg.iters_per_cycle + 1);
    let mut initial = None;
    let mut above = 0usize;
    let mut iterations = 0;
    for cycle in 0..cfg.cycles {
        let weights = cfg.weights_for_cycle(cycle);
        for _ in 0..cfg.iters_per_cycle {
            let (e, g) = total_energy(&graph, &base, cams, targets.as_ref(), weights, cfg.use_data)?;
            if !e.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(EgsError::Diverged(format!("non-finite warp energy at iteration {iterations}")));
            }
            let e0 = *initial.get_or_insert(e);
            if e > (10.0 * e0).max(DIVERGENCE_FLOOR) {
                above += 1;
                if above >= 100 {
                    return Err(EgsError::Diverged(format!(
                        "warp energy {e:.3e} above 10x the initial {e0:.3e} for 100 iterations"
                    )));
                }
            } else {
                above = 0;
            }
            trace.push(e);
            adam.step(&mut params, &g, lr);
            graph.set_params(&params);
            iterations += 1;
        }
    }
    let last_weights = cfg.weights_for_cycle(cfg.cycles.saturating_sub(1));
    let (e_final, _) = total_energy(&graph, &base, cams, targets.as_ref(), last_weights, cfg.use_data)?;
    trace.push(e_final);
    let warped = warp_frame(&graph, frame)?;
    Ok(WarpOutcome {
        graph,
        frame: warped,
        trace,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianPoint;
    use crate::sh::ShCoeffs;
    use rand::Rng;

    fn cloud(n: usize, seed: u64) -> GaussianFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|i| {
                let mut sh = ShCoeffs::zeros(2);
                for c in sh.coeffs_mut() {
                    *c = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
                }
                let q = quat::normalized_canonical(&quat::quat(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ))
                .unwrap();
                GaussianPoint::new(
                    i as u64,
                    Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                    q,
                    Vec3::repeat(-3.0),
                    0.5,
                    sh,
                )
            })
            .collect();
        GaussianFrame::new(0, pts).unwrap()
    }

    fn bound_graph(frame: &GaussianFrame, m: usize) -> DeformationGraph {
        let mut g = sample_control_nodes(frame, m, 7).unwrap();
        bind_weights(&mut g, frame, 4, 6).unwrap();
        g
    }

    #[test]
    fn sampling_all_points_makes_every_point_a_node() {
        let f = cloud(30, 1);
        let g = sample_control_nodes(&f, 30, 3).unwrap();
        let mut centers: Vec<[f64; 3]> = g.nodes.iter().map(|n| [n.center.x, n.center.y, n.center.z]).collect();
        let mut means: Vec<[f64; 3]> = f.points().iter().map(|p| [p.pose.mean.x, p.pose.mean.y, p.pose.mean.z]).collect();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(centers, means);
    }

    #[test]
    fn sampling_is_deterministic_and_clamped() {
        let f = cloud(50, 1);
        assert_eq!(sample_control_nodes(&f, 10, 5).unwrap(), sample_control_nodes(&f, 10, 5).unwrap());
        assert_eq!(sample_control_nodes(&f, 500, 5).unwrap().len(), 50);
        assert!(sample_control_nodes(&f, 0, 5).is_err());
    }

    #[test]
    fn coincident_point_takes_full_weight() {
        let f = GaussianFrame::new(0, vec![GaussianPoint::new(0, Vec3::new(1.0, 2.0, 3.0), quat::identity(), Vec3::zeros(), 0.0, ShCoeffs::zeros(0))]).unwrap();
        let mut g = DeformationGraph::from_centers(vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(5.0, 0.0, 0.0)]);
        bind_weights(&mut g, &f, 1, 1).unwrap();
        assert_eq!(g.point_bindings[0].nodes, vec![0]);
        assert_eq!(g.point_bindings[0].weights, vec![1.0]);
    }

    #[test]
    fn equidistant_nodes_share_weight() {
        let f = GaussianFrame::new(0, vec![GaussianPoint::new(0, Vec3::zeros(), quat::identity(), Vec3::zeros(), 0.0, ShCoeffs::zeros(0))]).unwrap();
        let mut g = DeformationGraph::from_centers(vec![Vec3::x(), -Vec3::x(), Vec3::new(0.0, 3.0, 0.0)]);
        bind_weights(&mut g, &f, 2, 1).unwrap();
        for w in &g.point_bindings[0].weights {
            assert!((w - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_are_partition_of_unity() {
        let f = cloud(200, 2);
        let g = bound_graph(&f, 40);
        for b in &g.point_bindings {
            assert_eq!(b.nodes.len(), 4);
            assert!((b.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(b.weights.iter().all(|w| *w >= 0.0));
        }
        for (j, b) in g.node_bindings.iter().enumerate() {
            assert!(!b.nodes.contains(&j));
        }
    }

    #[test]
    fn identity_warp_is_exact() {
        let f = cloud(100, 3);
        let g = bound_graph(&f, 20);
        assert_eq!(warp_frame(&g, &f).unwrap(), f);
    }

    #[test]
    fn single_node_quarter_turn() {
        let f = GaussianFrame::new(0, vec![GaussianPoint::new(0, Vec3::x(), quat::identity(), Vec3::zeros(), 0.0, ShCoeffs::zeros(0))]).unwrap();
        let mut g = DeformationGraph::from_centers(vec![Vec3::zeros()]);
        bind_weights(&mut g, &f, 1, 0).unwrap();
        g.nodes[0].rotation = quat::from_axis_angle(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let w = warp_frame(&g, &f).unwrap();
        assert!((w.points()[0].pose.mean - Vec3::y()).norm() < 1e-12);
    }

    fn apply_rigid(g: &mut DeformationGraph, q: &Quat, b: &Vec3) {
        let r = quat::rotation_matrix(q);
        for n in &mut g.nodes {
            n.rotation = *q;
            n.translation = r * n.center + b - n.center;
        }
    }

    #[test]
    fn rigid_motion_is_reproduced() {
        let f = cloud(150, 4);
        let mut g = bound_graph(&f, 30);
        let q = quat::from_axis_angle(&Vec3::new(0.3, -0.5, 0.8));
        let b = Vec3::new(0.1, -0.2, 0.3);
        apply_rigid(&mut g, &q, &b);
        let r = quat::rotation_matrix(&q);
        let w = warp_frame(&g, &f).unwrap();
        for (a, o) in w.points().iter().zip(f.points()) {
            assert!((a.pose.mean - (r * o.pose.mean + b)).norm() < 1e-9);
            assert_eq!(a.appearance.opacity_logit, o.appearance.opacity_logit);
            assert_eq!(a.appearance.log_scale, o.appearance.log_scale);
            assert_eq!(a.appearance.sh.dc(), o.appearance.sh.dc());
            let expect = quat::normalized_canonical(&quat::mul(&q, &o.pose.rotation)).unwrap();
            assert!((a.pose.rotation - expect).norm() < 1e-9);
        }
        let (e, _) = energy_arap(&g);
        assert!(e < 1e-10);
    }

    #[test]
    fn unbound_frame_is_rejected() {
        let f = cloud(20, 5);
        let g = bound_graph(&f, 5);
        let other = cloud(21, 5);
        assert!(matches!(warp_frame(&g, &other), Err(EgsError::Contract(_))));
    }

    #[test]
    fn rot_energy_examples() {
        let mut g = DeformationGraph::from_centers(vec![Vec3::zeros()]);
        assert_eq!(energy_rot(&g).0, 0.0);
        g.nodes[0].rotation = quat::quat(2.0, 0.0, 0.0, 0.0);
        assert_eq!(energy_rot(&g).0, 1.0);
    }

    #[test]
    fn arap_single_translated_node() {
        // three collinear nodes, each bound to both others
        let f = cloud(10, 6);
        let mut g = DeformationGraph::from_centers(vec![Vec3::zeros(), Vec3::x(), 2.0 * Vec3::x()]);
        bind_weights(&mut g, &f, 2, 2).unwrap();
        let delta = Vec3::new(0.0, 0.2, 0.1);
        g.nodes[1].translation = delta;
        // node 1 appears in its own two terms and once in each neighbor's list
        let mut expect = 0.0;
        for (j, b) in g.node_bindings.iter().enumerate() {
            for (&k, &w) in b.nodes.iter().zip(&b.weights) {
                if j == 1 || k == 1 {
                    expect += w * delta.norm_squared();
                }
            }
        }
        let (e, _) = energy_arap(&g);
        assert!((e - expect / 3.0).abs() < 1e-15);
    }

    #[test]
    fn flow_energy_single_term() {
        let f = GaussianFrame::new(0, vec![GaussianPoint::new(0, Vec3::new(0.0, 0.0, 2.0), quat::identity(), Vec3::repeat(-3.0), 0.0, ShCoeffs::zeros(0))]).unwrap();
        let mut g = DeformationGraph::from_centers(vec![Vec3::zeros()]);
        bind_weights(&mut g, &f, 1, 0).unwrap();
        let k = crate::model::Intrinsics {
            fx: 50.0,
            fy: 50.0,
            cx: 16.0,
            cy: 16.0,
            width: 32,
            height: 32,
        };
        let cam = CameraView::new("a", k, crate::model::Extrinsics::identity(), 0.1, 10.0).unwrap();
        let targets = FlowTargets {
            entries: vec![FlowTarget {
                point: 0,
                view: 0,
                target: Vector2::new(18.0, 16.0),
                weight: 1.0,
            }],
            active_pairs: 1,
        };
        let (e, _) = energy_flow(&g, &f, &[cam], &targets).unwrap();
        assert!((e - 2.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_after_first_cycle() {
        let (w1, w2, w3) = WarpConfig::default().weights_for_cycle(1);
        assert!((w1 - 0.2).abs() < 1e-12);
        assert!((w2 - 580.0).abs() < 1e-9);
        assert!((w3 - 580.0).abs() < 1e-9);
    }

    fn fd_check(graph: &DeformationGraph, f: impl Fn(&DeformationGraph) -> (f64, Vec<f64>), step: f64, tol: f64) {
        let (_, g) = f(graph);
        let p0 = graph.params();
        let mut probe = graph.clone();
        for i in 0..p0.len() {
            let mut p = p0.clone();
            p[i] += step;
            probe.set_params(&p);
            let ep = f(&probe).0;
            p[i] -= 2.0 * step;
            probe.set_params(&p);
            let em = f(&probe).0;
            let fd = (ep - em) / (2.0 * step);
            let scale = fd.abs().max(g[i].abs()).max(1e-6);
            assert!((fd - g[i]).abs() / scale < tol, "param {i}: fd {fd} analytic {}", g[i]);
        }
    }

    fn perturbed(seed: u64) -> (GaussianFrame, DeformationGraph) {
        let f = cloud(60, seed);
        let mut g = bound_graph(&f, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for n in &mut g.nodes {
            n.rotation = quat::quat(
                1.0 + rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            );
            n.translation = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        }
        (f, g)
    }

    #[test]
    fn rot_and_arap_gradients_match_finite_differences() {
        for seed in 0..3 {
            let (_, g) = perturbed(seed);
            fd_check(&g, energy_rot, 1e-6, 1e-5);
            fd_check(&g, energy_arap, 1e-6, 1e-5);
        }
    }
}
