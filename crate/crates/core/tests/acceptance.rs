//! Acceptance gate: runs the ten criteria and prints one PASS/FAIL line
//! for each. Every tolerance is a named constant below.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use egs_core::codec::{decode_stream, entropy_decode, entropy_encode, feature_crc, raw_frame_size, EncoderConfig, EvolvingStream, FrequencyModel, QuantSpec, SequenceEncoder, WarpHint};
use egs_core::config::Config;
use egs_core::deform::{bind_weights, energy_arap, energy_data, energy_flow, energy_rot, sample_control_nodes, warp_frame, DeformationGraph, FlowTargets};
use egs_core::model::{CameraView, GaussianFrame, PointClass, Vec3};
use egs_core::pipeline::{TrackReport, Tracker};
use egs_core::quat::{self, Quat};
use egs_core::refine::{adaptive_stop, eval_loss, EmaTrace, StopDecision};
use egs_core::sh::{coeff_count, rotate_sh, ShCoeffs};
use egs_core::splatter::{backward, contribution, l1_loss, render, RenderOptions};
use egs_core::testkit::{camera_ring, gen_scene, mean_rmse, oracle_contribution, random_frame, MotionKind, SceneSpec, SyntheticScene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// 1. warp correctness
const EQUIVARIANCE_TOL: f64 = 1e-6;
const RIGID_ARAP_TOL: f64 = 1e-10;
const WARP_INSTANCES: u64 = 20;
// 2. gradient suite
const GRAD_TOL: f64 = 1e-3;
const GRAD_TOL_REG: f64 = 1e-5;
const GRAD_INSTANCES: u64 = 20;
const FD_STEP: f64 = 1e-6;
/// Components whose magnitude is below this are compared in absolute terms.
const GRAD_ABS_FLOOR: f64 = 1e-6;
// 3. contribution oracle
const ORACLE_TOL: f64 = 1e-6;
const CONSERVATION_TOL: f64 = 1e-5;
const ORACLE_SCENES: u64 = 50;
// 4. pruning behaviour
const PRUNE_FRAMES: usize = 30;
const PRUNE_BAND: f64 = 0.20;
// 5. tracking accuracy
const TRACK_FRAMES: usize = 6;
const RMSE_FRACTION: f64 = 0.01;
// 6. two-stream guarantee
const QUIESCENT_EXT_FRACTION: f64 = 0.05;
// 7. codec exactness
const FUZZ_CASES: u64 = 1000;
// 8. compression ratio
const COMPRESSION_POINTS: usize = 10_000;
const COMPRESSION_FRAMES: usize = 6;
const RATIO_TARGET_MOTION: f64 = 20.0;
const RATIO_TARGET_STATIC: f64 = 100.0;
const RATIO_FLOOR: f64 = 10.0;
// 9. adaptive stop
const EPS_GAMMA: f64 = 0.01;
// 10. ablations
const NO_REFINE_ERROR_FACTOR: f64 = 1.5;
/// Articulation amplitude at which flow vectors clear the 1 px flow threshold.
const ABLATION_MOTION_SCALE: f64 = 6.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = fn() -> Outcome;

const CRITERIA: [(&str, Check); 10] = [
    ("warp correctness", criterion_1),
    ("gradient suite", criterion_2),
    ("contribution oracle", criterion_3),
    ("pruning behaviour", criterion_4),
    ("tracking accuracy", criterion_5),
    ("two-stream guarantee", criterion_6),
    ("codec exactness", criterion_7),
    ("compression ratio", criterion_8),
    ("adaptive stop", criterion_9),
    ("ablation directions", criterion_10),
];

#[test]
fn acceptance() {
    let results: Vec<(Outcome, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = CRITERIA
            .iter()
            .map(|(_, check)| {
                s.spawn(move || {
                    let t0 = Instant::now();
                    let out = check();
                    (out, t0.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| (outcome(false, "panicked".into()), 0.0)))
            .collect()
    });
    // written to the real stdout so the lines survive test output capture
    let mut out = std::io::stdout().lock();
    let mut failed = Vec::new();
    for (k, ((name, _), (o, secs))) in CRITERIA.iter().zip(&results).enumerate() {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        writeln!(out, "criterion {:>2} {tag} {name}: {} ({secs:.1}s)", k + 1, o.detail).unwrap();
        if !o.pass {
            failed.push(k + 1);
        }
    }
    out.flush().unwrap();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

// ---------------------------------------------------------------- helpers

fn max_abs_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn quat_diff(a: &Quat, b: &Quat) -> f64 {
    let (a, b) = (quat::to_array(a), quat::to_array(b));
    let plus = max_abs_diff(a, b);
    let minus = max_abs_diff(a, b.map(|v| -v));
    plus.min(minus)
}

fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Quat {
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-6 { Vec3::x() } else { axis.normalize() };
    quat::from_axis_angle(&(axis * rng.random_range(0.0..max_angle)))
}

fn transform_frame(frame: &GaussianFrame, q: &Quat, b: &Vec3) -> GaussianFrame {
    let r = quat::rotation_matrix(q);
    let mut out = frame.clone();
    for p in out.points_mut() {
        p.pose.mean = r * p.pose.mean + b;
        p.pose.rotation = quat::normalized_canonical(&quat::mul(q, &p.pose.rotation)).unwrap();
        if p.appearance.sh.degree() > 0 {
            p.appearance.sh = rotate_sh(&p.appearance.sh, &r);
        }
    }
    out
}

fn perturb_graph(g: &mut DeformationGraph, rng: &mut ChaCha8Rng, rot: f64, trans: f64) {
    for n in &mut g.nodes {
        n.rotation = quat::quat(
            1.0 + rng.random_range(-rot..rot),
            rng.random_range(-rot..rot),
            rng.random_range(-rot..rot),
            rng.random_range(-rot..rot),
        );
        n.translation = Vec3::new(rng.random_range(-trans..trans), rng.random_range(-trans..trans), rng.random_range(-trans..trans));
    }
}

fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, p: &mut [f64], i: usize, h: f64) -> f64 {
    let x = p[i];
    p[i] = x + h;
    let ep = f(p);
    p[i] = x - h;
    let em = f(p);
    p[i] = x;
    (ep - em) / (2.0 * h)
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_ABS_FLOOR)
}

/// Largest per-component relative error between `analytic` and central
/// differences of `f` around `params`.
fn fd_error(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], analytic: &[f64]) -> f64 {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| relative_error(central_difference(&mut f, &mut p, i, FD_STEP), analytic[i]))
        .fold(0.0, f64::max)
}

/// As [`fd_error`] for rendered energies, which are only piecewise smooth:
/// depth-order swaps and the alpha cutoff make them jump. `None` when some
/// component's differences at `FD_STEP` and `FD_STEP / 10` disagree by more
/// than `GRAD_TOL`, i.e. the stencil straddles a jump or kink.
fn smooth_fd_error(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], analytic: &[f64]) -> Option<f64> {
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let coarse = central_difference(&mut f, &mut p, i, FD_STEP);
        let fine = central_difference(&mut f, &mut p, i, FD_STEP / 10.0);
        if relative_error(coarse, fine) > GRAD_TOL {
            return None;
        }
        worst = worst.max(relative_error(coarse, analytic[i]));
    }
    Some(worst)
}

fn graph_fd_error(graph: &DeformationGraph, energy: impl Fn(&DeformationGraph) -> (f64, Vec<f64>)) -> f64 {
    let (_, grad) = energy(graph);
    let mut probe = graph.clone();
    fd_error(
        |p| {
            probe.set_params(p);
            energy(&probe).0
        },
        &graph.params(),
        &grad,
    )
}

fn graph_smooth_fd_error(graph: &DeformationGraph, energy: impl Fn(&DeformationGraph) -> (f64, Vec<f64>)) -> Option<f64> {
    let (_, grad) = energy(graph);
    let mut probe = graph.clone();
    smooth_fd_error(
        |p| {
            probe.set_params(p);
            energy(&probe).0
        },
        &graph.params(),
        &grad,
    )
}

fn scene(motion: MotionKind, points: usize, cameras: usize, image_size: usize, frames: usize) -> SyntheticScene {
    gen_scene(&SceneSpec {
        points,
        cameras,
        image_size,
        frames,
        motion,
        ..SceneSpec::default()
    })
    .unwrap()
}

/// Reduced optimizer schedules so a tracked frame takes about a second.
fn desk_config() -> Config {
    let mut c = Config::default();
    c.warp.num_nodes = 200;
    c.warp.cycles = 4;
    c.warp.iters_per_cycle = 60;
    c.refine.max_iterations = 300;
    c.refine.sh_iterations = 20;
    c
}

struct TrackedRun {
    scene: SyntheticScene,
    /// Frame 0 as the tracker holds it, then every tracked frame.
    frames: Vec<GaussianFrame>,
    reports: Vec<TrackReport>,
    /// Masked L1 of each tracked frame after refinement.
    final_losses: Vec<f64>,
}

fn track(scene: SyntheticScene, cfg: Config, with_flow: bool) -> TrackedRun {
    let mut tracker = Tracker::new(scene.frames[0].clone(), cfg).unwrap();
    let mut frames = vec![tracker.current().clone()];
    let mut reports = Vec::new();
    let mut final_losses = Vec::new();
    for t in 1..scene.frames.len() {
        let views = scene.views_for(t, with_flow).unwrap();
        reports.push(tracker.step(&views).unwrap());
        final_losses.push(eval_loss(tracker.current(), &views, &RenderOptions::default()).unwrap());
        frames.push(tracker.current().clone());
    }
    TrackedRun {
        scene,
        frames,
        reports,
        final_losses,
    }
}

fn tracking_scene(motion: MotionKind) -> SyntheticScene {
    scene(motion, 1200, 4, 128, TRACK_FRAMES)
}

fn rigid_run() -> &'static TrackedRun {
    static RUN: OnceLock<TrackedRun> = OnceLock::new();
    RUN.get_or_init(|| track(tracking_scene(MotionKind::Rigid), desk_config(), true))
}

fn articulated_run() -> &'static TrackedRun {
    static RUN: OnceLock<TrackedRun> = OnceLock::new();
    RUN.get_or_init(|| track(tracking_scene(MotionKind::Articulated), desk_config(), true))
}

fn encode_run(run: &TrackedRun) -> EvolvingStream {
    let mut enc = SequenceEncoder::new(EncoderConfig::default()).unwrap();
    enc.push(&run.frames[0], None).unwrap();
    for (f, r) in run.frames[1..].iter().zip(&run.reports) {
        enc.push(f, Some(&r.warp)).unwrap();
    }
    enc.finish()
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let (mut equi, mut arap, mut identity_ok) = (0.0f64, 0.0f64, true);
    for seed in 0..WARP_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_frame(80, seed, 2);
        let mut g = sample_control_nodes(&f, 16, seed).unwrap();
        bind_weights(&mut g, &f, 4, 6).unwrap();

        let mut id_graph = g.clone();
        id_graph.reset_transforms();
        identity_ok &= warp_frame(&id_graph, &f).unwrap() == f;

        perturb_graph(&mut g, &mut rng, 0.3, 0.1);
        let warped = warp_frame(&g, &f).unwrap();
        let q = random_rotation(&mut rng, 3.0);
        let b = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let r = quat::rotation_matrix(&q);
        let moved = transform_frame(&f, &q, &b);
        let mut mg = DeformationGraph::from_centers(g.nodes.iter().map(|n| r * n.center + b).collect());
        bind_weights(&mut mg, &moved, 4, 6).unwrap();
        for (m, n) in mg.nodes.iter_mut().zip(&g.nodes) {
            m.rotation = quat::mul(&quat::mul(&q, &n.rotation), &quat::conjugate(&q));
            m.translation = r * n.translation;
        }
        let lhs = warp_frame(&mg, &moved).unwrap();
        let rhs = transform_frame(&warped, &q, &b);
        for (a, e) in lhs.points().iter().zip(rhs.points()) {
            equi = equi.max((a.pose.mean - e.pose.mean).amax());
            equi = equi.max(quat_diff(&a.pose.rotation, &e.pose.rotation));
            equi = equi.max(max_abs_diff(a.appearance.sh.coeffs().iter().flatten().copied(), e.appearance.sh.coeffs().iter().flatten().copied()));
            identity_ok &= a.appearance.log_scale == e.appearance.log_scale && a.appearance.opacity_logit == e.appearance.opacity_logit;
        }

        let mut rigid = g.clone();
        for n in &mut rigid.nodes {
            n.rotation = q;
            n.translation = r * n.center + b - n.center;
        }
        arap = arap.max(energy_arap(&rigid).0);
    }
    outcome(
        equi <= EQUIVARIANCE_TOL && arap <= RIGID_ARAP_TOL && identity_ok,
        format!("{WARP_INSTANCES} instances; equivariance error {equi:.2e} (tol {EQUIVARIANCE_TOL:e}), rigid E_arap {arap:.2e} (tol {RIGID_ARAP_TOL:e}), identity warp bit-exact: {identity_ok}"),
    )
}

// ---------------------------------------------------------------- 2

fn point_params(frame: &GaussianFrame) -> Vec<f64> {
    let mut v = Vec::new();
    for p in frame.points() {
        v.extend(p.pose.mean.iter());
        v.extend(quat::to_array(&p.pose.rotation));
        v.extend(p.appearance.log_scale.iter());
        v.push(p.appearance.opacity_logit);
        v.extend(p.appearance.sh.coeffs().iter().flatten());
    }
    v
}

fn set_point_params(frame: &mut GaussianFrame, v: &[f64]) {
    let mut k = 0;
    let mut take = |n: usize| {
        let s = &v[k..k + n];
        k += n;
        s
    };
    for p in frame.points_mut() {
        let m = take(3);
        p.pose.mean = Vec3::new(m[0], m[1], m[2]);
        let q = take(4);
        p.pose.rotation = quat::from_array([q[0], q[1], q[2], q[3]]);
        let s = take(3);
        p.appearance.log_scale = Vec3::new(s[0], s[1], s[2]);
        p.appearance.opacity_logit = take(1)[0];
        let d = p.appearance.sh.degree();
        let c = take(3 * coeff_count(d));
        p.appearance.sh = ShCoeffs::new(d, c.chunks_exact(3).map(|x| [x[0], x[1], x[2]]).collect()).unwrap();
    }
}

fn splat_grad(frame: &GaussianFrame, cams: &[CameraView]) -> (f64, Vec<f64>) {
    let opts = RenderOptions::default();
    let mut loss = 0.0;
    let mut grad = vec![0.0; point_params(frame).len()];
    for cam in cams {
        let out = render(frame, cam, &opts).unwrap();
        let (l, dimg) = l1_loss(&out.image, cam.image.as_ref().unwrap(), None);
        loss += l;
        let g = backward(&out, frame, cam, &dimg).unwrap();
        let mut k = 0;
        for pg in &g.points {
            let flat = pg
                .mean
                .iter()
                .copied()
                .chain(pg.rotation)
                .chain(pg.log_scale.iter().copied())
                .chain([pg.opacity_logit])
                .chain(pg.sh.iter().flatten().copied());
            for v in flat {
                grad[k] += v;
                k += 1;
            }
        }
    }
    (loss, grad)
}

/// Draws instances from successive seeds until `GRAD_INSTANCES` of them are
/// smooth around the probe point; returns the worst error and the number
/// of instances skipped.
fn rendered_fd_suite(check: impl Fn(u64) -> Option<f64>) -> (f64, u64) {
    let (mut worst, mut accepted, mut skipped) = (0.0f64, 0, 0);
    let mut seed = 0;
    while accepted < GRAD_INSTANCES && seed < 5 * GRAD_INSTANCES {
        match check(seed) {
            Some(e) => {
                worst = worst.max(e);
                accepted += 1;
            }
            None => skipped += 1,
        }
        seed += 1;
    }
    if accepted < GRAD_INSTANCES {
        worst = f64::INFINITY;
    }
    (worst, skipped)
}

/// A deformation graph slightly off the true motion of a small rigid scene.
fn warp_instance(seed: u64) -> (SyntheticScene, Vec<CameraView>, DeformationGraph) {
    let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
    let sc = gen_scene(&SceneSpec {
        points: 250,
        cameras: 2,
        image_size: 32,
        frames: 2,
        motion: MotionKind::Rigid,
        motion_scale: 2.0,
        seed,
        ..SceneSpec::default()
    })
    .unwrap();
    let views = sc.views_for(1, true).unwrap();
    let mut g = sample_control_nodes(&sc.frames[0], 10, seed).unwrap();
    bind_weights(&mut g, &sc.frames[0], 4, 6).unwrap();
    perturb_graph(&mut g, &mut rng, 0.02, 0.01);
    (sc, views, g)
}

fn splat_instance(seed: u64) -> Option<f64> {
    let mut frame = random_frame(30, 2000 + seed, 1);
    let target = random_frame(30, 3000 + seed, 1);
    let cams: Vec<CameraView> = camera_ring(2, 24, 2.0)
        .unwrap()
        .into_iter()
        .map(|mut c| {
            c.image = Some(render(&target, &c, &RenderOptions::default()).unwrap().image);
            c
        })
        .collect();
    let (_, grad) = splat_grad(&frame, &cams);
    let params = point_params(&frame);
    smooth_fd_error(
        |p| {
            set_point_params(&mut frame, p);
            splat_grad(&frame, &cams).0
        },
        &params,
        &grad,
    )
}

fn criterion_2() -> Outcome {
    let (mut rot, mut arap) = (0.0f64, 0.0f64);
    for seed in 0..GRAD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let f = random_frame(60, seed, 0);
        let mut g = sample_control_nodes(&f, 12, seed).unwrap();
        bind_weights(&mut g, &f, 4, 6).unwrap();
        perturb_graph(&mut g, &mut rng, 0.3, 0.1);
        rot = rot.max(graph_fd_error(&g, energy_rot));
        arap = arap.max(graph_fd_error(&g, energy_arap));
    }
    let (flow, flow_skip) = rendered_fd_suite(|seed| {
        let (sc, views, g) = warp_instance(seed);
        let targets = FlowTargets::build(&sc.frames[0], &views, 0.0).unwrap();
        graph_smooth_fd_error(&g, |gr| energy_flow(gr, &sc.frames[0], &views, &targets).unwrap())
    });
    let (data, data_skip) = rendered_fd_suite(|seed| {
        let (sc, views, g) = warp_instance(seed);
        graph_smooth_fd_error(&g, |gr| energy_data(gr, &sc.frames[0], &views).unwrap())
    });
    let (splat, splat_skip) = rendered_fd_suite(splat_instance);
    let pass = rot <= GRAD_TOL_REG && arap <= GRAD_TOL_REG && flow <= GRAD_TOL && data <= GRAD_TOL && splat <= GRAD_TOL;
    outcome(
        pass,
        format!(
            "{GRAD_INSTANCES} instances each; max relative error E_rot {rot:.1e}, E_arap {arap:.1e} (tol {GRAD_TOL_REG:e}), E_flow {flow:.1e}, E_data {data:.1e}, splatter L1 {splat:.1e} (tol {GRAD_TOL:e}); non-smooth instances redrawn: flow {flow_skip}, data {data_skip}, splatter {splat_skip}"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let cams = camera_ring(2, 32, 2.0).unwrap();
    let (mut phi_err, mut cons_err) = (0.0f64, 0.0f64);
    for seed in 0..ORACLE_SCENES {
        let n = 10 + (seed as usize * 37) % 91;
        let frame = random_frame(n, 500 + seed, (seed % 3) as u8);
        let report = contribution(&frame, &cams, &RenderOptions::default(), false).unwrap();
        for (q, cam) in cams.iter().enumerate() {
            let oracle = oracle_contribution(&frame, cam);
            phi_err = phi_err.max(max_abs_diff(report.phi.iter().map(|p| p[q]), oracle));
            let out = render(&frame, cam, &RenderOptions::default()).unwrap();
            for pix in 0..out.width * out.height {
                let w: f64 = out.pixel_fragments(pix).iter().map(|f| f.weight()).sum();
                cons_err = cons_err.max((w + out.final_transmittance[pix] - 1.0).abs());
            }
        }
    }
    outcome(
        phi_err <= ORACLE_TOL && cons_err <= CONSERVATION_TOL,
        format!("{ORACLE_SCENES} scenes; phi vs oracle {phi_err:.1e} (tol {ORACLE_TOL:e}), weight conservation {cons_err:.1e} (tol {CONSERVATION_TOL:e})"),
    )
}

// ---------------------------------------------------------------- 4

fn point_counts(prune: bool) -> Vec<usize> {
    let sc = scene(MotionKind::SlowDeform, 800, 4, 40, PRUNE_FRAMES);
    let mut cfg = desk_config();
    cfg.refine.prune = prune;
    let mut tracker = Tracker::new(sc.frames[0].clone(), cfg).unwrap();
    let mut counts = vec![tracker.current().len()];
    for t in 1..PRUNE_FRAMES {
        tracker.step(&sc.views_for(t, true).unwrap()).unwrap();
        counts.push(tracker.current().len());
    }
    counts
}

fn criterion_4() -> Outcome {
    let (with, without) = std::thread::scope(|s| {
        let a = s.spawn(|| point_counts(true));
        let b = s.spawn(|| point_counts(false));
        (a.join().unwrap(), b.join().unwrap())
    });
    let n0 = with[0] as f64;
    let (lo, hi) = (with.iter().min().unwrap(), with.iter().max().unwrap());
    let banded = (*lo as f64) >= (1.0 - PRUNE_BAND) * n0 && (*hi as f64) <= (1.0 + PRUNE_BAND) * n0;
    let monotone = without.windows(2).all(|w| w[1] >= w[0]) && without.last() > without.first();
    outcome(
        banded && monotone,
        format!(
            "{PRUNE_FRAMES} frames from {} points; with pruning range {lo}..{hi} (band ±{:.0}%), without pruning {} -> {} monotone: {monotone}",
            with[0],
            PRUNE_BAND * 100.0,
            without[0],
            without.last().unwrap()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, run) in [("rigid", rigid_run()), ("articulated", articulated_run())] {
        let diag = run.scene.frames[0].bbox().diagonal();
        let mut worst = 0.0f64;
        let mut decreased = true;
        for (t, (r, fin)) in run.reports.iter().zip(&run.final_losses).enumerate() {
            worst = worst.max(mean_rmse(&r.warped, &run.scene.frames[t + 1]) / diag);
            decreased &= *fin < r.post_warp_loss;
        }
        pass &= worst < RMSE_FRACTION && decreased;
        parts.push(format!("{name}: worst post-warp RMSE {:.3}% of diagonal, refinement lowers L1 every frame: {decreased}", worst * 100.0));
    }
    outcome(pass, format!("{} (tol {:.1}%)", parts.join("; "), RMSE_FRACTION * 100.0))
}

// ---------------------------------------------------------------- 6

fn frozen_violations(run: &TrackedRun) -> usize {
    let mut bad = 0;
    for (f, r) in run.frames[1..].iter().zip(&run.reports) {
        for p in f.points().iter().filter(|p| p.class == PointClass::Reference) {
            match r.warped.get(p.id) {
                Some(w) if w.appearance == p.appearance => {}
                _ => bad += 1,
            }
        }
    }
    bad
}

fn criterion_6() -> Outcome {
    let quiet = track(tracking_scene(MotionKind::Static), desk_config(), true);
    let violations: usize = [rigid_run(), articulated_run(), &quiet].iter().map(|r| frozen_violations(r)).sum();
    let checked: usize = [rigid_run(), articulated_run(), &quiet]
        .iter()
        .flat_map(|r| r.frames[1..].iter())
        .map(|f| f.points().iter().filter(|p| p.class == PointClass::Reference).count())
        .sum();
    let worst_ext = quiet.frames[1..].iter().map(|f| f.extension_fraction()).fold(0.0, f64::max);
    outcome(
        violations == 0 && worst_ext < QUIESCENT_EXT_FRACTION,
        format!(
            "{violations} of {checked} reference points differ from their warped predecessor; quiescent extension fraction max {:.2}% (bound {:.0}%)",
            worst_ext * 100.0,
            QUIESCENT_EXT_FRACTION * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let spec = QuantSpec::default();
    let run = rigid_run();
    let mut enc = SequenceEncoder::new(EncoderConfig::default()).unwrap();
    let mut recons = Vec::new();
    for (t, f) in run.frames.iter().enumerate() {
        let hint: Option<&WarpHint> = t.checked_sub(1).map(|k| &run.reports[k].warp);
        recons.push(enc.push(f, hint).unwrap().clone());
    }
    let bytes = enc.finish().to_bytes();
    let decoded = decode_stream(&EvolvingStream::from_bytes(&bytes).unwrap()).unwrap();
    let crc_ok = decoded.len() == recons.len() && decoded.iter().zip(&recons).all(|(d, r)| feature_crc(&d.frame) == feature_crc(r) && d.frame == *r);

    let (mut e_mean, mut e_rot, mut e_scale, mut e_op, mut e_dc) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (orig, rec) in run.frames.iter().zip(&recons) {
        for a in orig.points() {
            let Some(b) = rec.get(a.id) else { continue };
            e_mean = e_mean.max((a.pose.mean - b.pose.mean).amax());
            let (qa, qb) = (quat::to_axis_angle(&a.pose.rotation), quat::to_axis_angle(&b.pose.rotation));
            e_rot = e_rot.max((qa - qb).amax());
            e_scale = e_scale.max((a.appearance.log_scale - b.appearance.log_scale).amax());
            e_op = e_op.max((a.appearance.opacity_logit - b.appearance.opacity_logit).abs());
            e_dc = e_dc.max(max_abs_diff(a.appearance.sh.dc(), b.appearance.sh.dc()));
        }
    }
    let half = |step: f64| step / 2.0 + 1e-12;
    let within = e_mean <= half(spec.mean.step)
        && e_rot <= half(spec.rotation.step)
        && e_scale <= half(spec.log_scale.step)
        && e_op <= half(spec.opacity.step)
        && e_dc <= half(spec.sh_dc.step);

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut fuzz_ok = 0;
    for case in 0..FUZZ_CASES {
        let len = rng.random_range(0..400);
        let symbols: Vec<i32> = (0..len)
            .map(|_| match case % 4 {
                0 => rng.random_range(-3..=3),
                1 => rng.random_range(-40_000..=40_000),
                2 => rng.random(),
                _ => {
                    if rng.random_bool(0.9) {
                        0
                    } else {
                        rng.random_range(-1000..=1000)
                    }
                }
            })
            .collect();
        let model = FrequencyModel::from_symbols(&symbols);
        let ok = entropy_encode(&symbols, &model).and_then(|b| entropy_decode(&b, symbols.len(), &model)).map(|d| d == symbols);
        fuzz_ok += usize::from(matches!(ok, Ok(true)));
    }
    outcome(
        crc_ok && within && fuzz_ok == FUZZ_CASES as usize,
        format!(
            "{} frames CRC-exact: {crc_ok}; max error mean {e_mean:.2e} rot {e_rot:.2e} scale {e_scale:.2e} opacity {e_op:.2e} (half-step {:.0e}), dc {e_dc:.2e} (half-step {:.0e}); fuzz {fuzz_ok}/{FUZZ_CASES}",
            recons.len(),
            spec.mean.step / 2.0,
            spec.sh_dc.step / 2.0
        ),
    )
}

// ---------------------------------------------------------------- 8

/// Raw float32 size over the mean inter-chunk size.
fn inter_ratio(motion: MotionKind) -> (f64, usize) {
    let sc = gen_scene(&SceneSpec {
        points: COMPRESSION_POINTS,
        blobs: 3,
        cameras: 8,
        image_size: 128,
        frames: COMPRESSION_FRAMES,
        motion,
        ..SceneSpec::default()
    })
    .unwrap();
    let mut enc = SequenceEncoder::new(EncoderConfig::default()).unwrap();
    for f in &sc.frames {
        enc.push(f, None).unwrap();
    }
    let stream = enc.finish();
    let inter: Vec<usize> = stream.chunks[1..].iter().map(|c| c.size_bytes()).collect();
    let mean_chunk = inter.iter().sum::<usize>() as f64 / inter.len() as f64;
    let raw = sc.frames[1..].iter().map(raw_frame_size).sum::<usize>() as f64 / inter.len() as f64;
    (raw / mean_chunk, sc.frames[0].len())
}

fn criterion_8() -> Outcome {
    let ((moving, n), (still, _)) = std::thread::scope(|s| {
        let a = s.spawn(|| inter_ratio(MotionKind::SlowDeform));
        let b = s.spawn(|| inter_ratio(MotionKind::Static));
        (a.join().unwrap(), b.join().unwrap())
    });
    let pass = moving >= RATIO_TARGET_MOTION && still >= RATIO_TARGET_STATIC;
    let floor = moving >= RATIO_FLOOR && still >= RATIO_FLOOR;
    outcome(
        pass,
        format!(
            "{n} points; slow deformation {moving:.1}x (target {RATIO_TARGET_MOTION}x), zero motion {still:.1}x (target {RATIO_TARGET_STATIC}x); above the {RATIO_FLOOR}x floor: {floor}"
        ),
    )
}

// ---------------------------------------------------------------- 9

/// Iteration (1-based) at which the rule first fires on a per-iteration trace.
fn stop_iteration(losses: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut t = EmaTrace::new(0.9, 10);
    for (i, l) in losses.into_iter().enumerate() {
        t.push(l);
        if adaptive_stop(&t, EPS_GAMMA) != StopDecision::Continue {
            return Some(i + 1);
        }
    }
    None
}

/// Window count at which the rule first fires on given window averages.
fn stop_window(averages: &[f64]) -> Option<usize> {
    (1..=averages.len()).find(|&k| adaptive_stop(&EmaTrace::from_window_averages(0.9, 10, &averages[..k]), EPS_GAMMA) == StopDecision::Plateau)
}

fn criterion_9() -> Outcome {
    let plateau = stop_iteration(std::iter::repeat_n(0.5, 200));
    let decline = stop_iteration((0..2000).map(|i| 0.95f64.powf(i as f64 / 10.0)));
    let mixed = stop_window(&[1.0, 1.0, 0.995, 0.9949]);
    let alternating = stop_window(&[1.0, 0.9, 0.895, 0.85, 0.8496, 0.8495]);
    let non_finite = stop_iteration([1.0, 0.9, f64::NAN, 0.8]);
    let pass = plateau == Some(30) && decline.is_none() && mixed == Some(3) && alternating == Some(6) && non_finite == Some(3);
    outcome(
        pass,
        format!("plateau stops at iteration {plateau:?} (expect 30), 5%/window decline {decline:?} (expect none), mixed trace at window {mixed:?} (expect 3), alternating trace at window {alternating:?} (expect 6), non-finite at {non_finite:?} (expect 3)"),
    )
}

// ---------------------------------------------------------------- 10

struct Ablation {
    ext_fraction: f64,
    bytes: usize,
    render_error: f64,
}

fn ablation(run: &TrackedRun) -> Ablation {
    let n = run.reports.len() as f64;
    Ablation {
        ext_fraction: run.frames[1..].iter().map(|f| f.extension_fraction()).sum::<f64>() / n,
        bytes: encode_run(run).total_bytes(),
        render_error: run.final_losses.iter().sum::<f64>() / n,
    }
}

fn criterion_10() -> Outcome {
    let variant = |flow: bool, warp: bool, refine: bool| {
        let mut cfg = desk_config();
        cfg.warp.use_flow = flow;
        cfg.stages.warp = warp;
        cfg.stages.refine = refine;
        let sc = gen_scene(&SceneSpec {
            motion_scale: ABLATION_MOTION_SCALE,
            ..tracking_scene(MotionKind::Articulated).spec
        })
        .unwrap();
        ablation(&track(sc, cfg, flow))
    };
    let (full, no_flow, no_warp, no_refine) = std::thread::scope(|s| {
        let a = s.spawn(|| variant(true, true, true));
        let b = s.spawn(|| variant(false, true, true));
        let c = s.spawn(|| variant(false, false, true));
        let d = s.spawn(|| variant(true, true, false));
        (a.join().unwrap(), b.join().unwrap(), c.join().unwrap(), d.join().unwrap())
    });
    let flow_dir = no_flow.ext_fraction > full.ext_fraction && no_flow.bytes > full.bytes;
    let warp_dir = no_warp.ext_fraction > no_flow.ext_fraction && no_warp.bytes > no_flow.bytes;
    let refine_dir = no_refine.render_error >= NO_REFINE_ERROR_FACTOR * full.render_error;
    let row = |name: &str, a: &Ablation| format!("{name} ext {:.2}% {}B L1 {:.5}", a.ext_fraction * 100.0, a.bytes, a.render_error);
    outcome(
        flow_dir && warp_dir && refine_dir,
        format!(
            "{} | {} | {} | {}; flow order {flow_dir}, warp order {warp_dir}, refinement error x{:.2} (need x{NO_REFINE_ERROR_FACTOR})",
            row("full", &full),
            row("no-flow", &no_flow),
            row("no-warp", &no_warp),
            row("no-refine", &no_refine),
            no_refine.render_error / full.render_error
        ),
    )
}
