//! Intra and inter frame chunks: payload layout, closed-loop encoding and
//! bit-exact decoding.

use std::collections::{HashMap, HashSet};

use crate::codec::bytes::{read_sorted_ids, write_sorted_ids, ByteReader, ByteWriter};
use crate::codec::entropy::{empirical_bits_per_symbol, read_stream, write_stream};
use crate::codec::quant::{GroupSpec, QuantSpec, ScaledQuant};
use crate::codec::warp::{predict, WarpHint};
use crate::error::{EgsError, Result};
use crate::model::{GaussianFrame, GaussianPoint, PointClass, PointId, Vec3};
use crate::quat;
use crate::sh::{coeff_count, ShCoeffs, MAX_SH_DEGREE};

const MAX_SYMBOLS: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkKind {
    Intra = 0,
    Inter = 1,
}

impl ChunkKind {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Intra),
            1 => Ok(Self::Inter),
            _ => Err(EgsError::CorruptChunk(format!("unknown chunk kind {v}"))),
        }
    }
}

/// One encoded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameChunk {
    pub kind: ChunkKind,
    pub frame_index: u32,
    pub payload: Vec<u8>,
    /// CRC-32 of the decoded-feature byte image.
    pub checksum: u32,
}

impl FrameChunk {
    /// Bytes taken in the container: kind, index, length and checksum fields plus payload.
    pub const HEADER_BYTES: usize = 13;

    pub fn size_bytes(&self) -> usize {
        Self::HEADER_BYTES + self.payload.len()
    }
}

/// Size and empirical cost of one section of a chunk payload.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStat {
    pub name: &'static str,
    pub bytes: usize,
    pub symbols: usize,
    /// Empirical token entropy plus raw refinement bits, per symbol.
    pub bits_per_symbol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkStats {
    pub kind: ChunkKind,
    pub frame_index: u32,
    pub bytes: usize,
    pub groups: Vec<GroupStat>,
}

/// CRC-32 over the decoded features in id order: id, mean, rotation,
/// log-scale, opacity logit and SH coefficients, all little-endian.
pub fn feature_crc(frame: &GaussianFrame) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for p in frame.points() {
        h.update(&p.id.0.to_le_bytes());
        for v in p.pose.mean.iter() {
            h.update(&v.to_le_bytes());
        }
        for v in quat::to_array(&p.pose.rotation) {
            h.update(&v.to_le_bytes());
        }
        for v in p.appearance.log_scale.iter() {
            h.update(&v.to_le_bytes());
        }
        h.update(&p.appearance.opacity_logit.to_le_bytes());
        for c in p.appearance.sh.coeffs() {
            for v in c {
                h.update(&v.to_le_bytes());
            }
        }
    }
    h.finalize()
}

/// Size of the frame as plain float32 features (mean, rotation, scale,
/// opacity, SH), the reference for compression ratios.
pub fn raw_frame_size(frame: &GaussianFrame) -> usize {
    frame
        .points()
        .iter()
        .map(|p| 4 * (3 + 4 + 3 + 1 + 3 * coeff_count(p.appearance.sh.degree())))
        .sum()
}

fn axis_angle(p: &GaussianPoint) -> Vec3 {
    quat::to_axis_angle(&quat::normalized_canonical(&p.pose.rotation).unwrap_or_else(quat::identity))
}

fn rest_len(degree: u8) -> usize {
    3 * (coeff_count(degree) - 1)
}

fn rest_values(sh: &ShCoeffs) -> impl Iterator<Item = f64> + '_ {
    sh.coeffs().iter().skip(1).flatten().copied()
}

fn sh_from(dc: [f64; 3], rest: &[f64], degree: u8) -> ShCoeffs {
    let mut coeffs = Vec::with_capacity(coeff_count(degree));
    coeffs.push(dc);
    coeffs.extend(rest.chunks_exact(3).map(|c| [c[0], c[1], c[2]]));
    ShCoeffs::new(degree, coeffs).expect("coefficient count matches degree")
}

/// Applies an axis-angle residual; a zero residual keeps `base` bit for bit.
fn rotate_by(base: &GaussianPoint, residual: &[i32], g: &GroupSpec) -> quat::Quat {
    if residual.iter().all(|&s| s == 0) {
        return base.pose.rotation;
    }
    quat::from_axis_angle(&(axis_angle(base) + deq3(g, residual)))
}

fn push3(out: &mut Vec<i32>, g: &GroupSpec, v: &Vec3) {
    out.extend(v.iter().map(|x| g.quantize_residual(*x)));
}

fn deq3(g: &GroupSpec, s: &[i32]) -> Vec3 {
    Vec3::new(g.dequantize_residual(s[0]), g.dequantize_residual(s[1]), g.dequantize_residual(s[2]))
}

fn check_len(v: &[i32], expected: usize, what: &str) -> Result<()> {
    if v.len() != expected {
        return Err(EgsError::CorruptChunk(format!("{what} stream has {} symbols, expected {expected}", v.len())));
    }
    Ok(())
}

fn read_degree(r: &mut ByteReader<'_>) -> Result<u8> {
    let d = r.u8()?;
    if d > MAX_SH_DEGREE {
        return Err(EgsError::CorruptChunk(format!("SH degree {d}")));
    }
    Ok(d)
}

// ---------------------------------------------------------------- intra

#[derive(Debug, Default)]
struct IntraPayload {
    degree: u8,
    ids: Vec<u64>,
    mean: Vec<i32>,
    rot: Vec<i32>,
    scale: Vec<i32>,
    opacity: Vec<i32>,
    dc: Vec<i32>,
    rest_step: f64,
    rest: Vec<i32>,
}

impl IntraPayload {
    fn write(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u8(self.degree);
        write_sorted_ids(&mut w, &self.ids);
        for s in [&self.mean, &self.rot, &self.scale, &self.opacity, &self.dc] {
            write_stream(&mut w, s);
        }
        w.f64(self.rest_step);
        write_stream(&mut w, &self.rest);
        w.into_inner()
    }

    fn parse(bytes: &[u8], stats: &mut Vec<GroupStat>) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let mut p = Self {
            degree: read_degree(&mut r)?,
            ..Self::default()
        };
        let start = r.position();
        p.ids = read_sorted_ids(&mut r)?;
        section(stats, "ids", r.position() - start, &[], p.ids.len());
        let names = ["mean", "rot", "scale", "opacity", "dc"];
        let mut streams: Vec<Vec<i32>> = Vec::with_capacity(5);
        for name in names {
            let start = r.position();
            let s = read_stream(&mut r, MAX_SYMBOLS)?;
            section(stats, name, r.position() - start, &s, s.len());
            streams.push(s);
        }
        let start = r.position();
        p.rest_step = r.f64()?;
        p.rest = read_stream(&mut r, MAX_SYMBOLS)?;
        section(stats, "rest", r.position() - start, &p.rest, p.rest.len());
        if !r.is_empty() {
            return Err(EgsError::CorruptChunk("trailing bytes after intra payload".into()));
        }
        let mut it = streams.into_iter();
        p.mean = it.next().unwrap_or_default();
        p.rot = it.next().unwrap_or_default();
        p.scale = it.next().unwrap_or_default();
        p.opacity = it.next().unwrap_or_default();
        p.dc = it.next().unwrap_or_default();
        let n = p.ids.len();
        check_len(&p.mean, 3 * n, "mean")?;
        check_len(&p.rot, 3 * n, "rotation")?;
        check_len(&p.scale, 3 * n, "scale")?;
        check_len(&p.opacity, n, "opacity")?;
        check_len(&p.dc, 3 * n, "dc")?;
        check_len(&p.rest, n * rest_len(p.degree), "rest")?;
        if !(p.rest_step >= 0.0 && p.rest_step.is_finite()) {
            return Err(EgsError::CorruptChunk("invalid SH rest step".into()));
        }
        Ok(p)
    }
}

fn section(stats: &mut Vec<GroupStat>, name: &'static str, bytes: usize, symbols: &[i32], count: usize) {
    stats.push(GroupStat {
        name,
        bytes,
        symbols: count,
        bits_per_symbol: empirical_bits_per_symbol(symbols),
    });
}

/// Self-contained chunk: every feature quantized with the stream steps on
/// an absolute grid of at least [`INTRA_BITS`](crate::codec::quant::INTRA_BITS) bits.
/// Returns the chunk and the frame the decoder will reconstruct.
pub fn encode_intra(frame: &GaussianFrame, spec: &QuantSpec) -> Result<(FrameChunk, GaussianFrame)> {
    spec.validate()?;
    let spec = &spec.intra();
    let degree = frame.sh_degree();
    let n = frame.len();
    let mut p = IntraPayload {
        degree,
        ids: frame.points().iter().map(|q| q.id.0).collect(),
        ..IntraPayload::default()
    };
    let rest_q = ScaledQuant::fit(
        spec.sh_rest_bits,
        frame.points().iter().flat_map(|q| rest_values(&q.appearance.sh.with_degree(degree)).collect::<Vec<_>>()),
    );
    p.rest_step = rest_q.step;
    for q in frame.points() {
        let a = &q.appearance;
        p.mean.extend(q.pose.mean.iter().map(|v| spec.mean.quantize(*v)));
        p.rot.extend(axis_angle(q).iter().map(|v| spec.rotation.quantize(*v)));
        p.scale.extend(a.log_scale.iter().map(|v| spec.log_scale.quantize(*v)));
        p.opacity.push(spec.opacity.quantize(a.opacity_logit));
        let sh = a.sh.with_degree(degree);
        p.dc.extend(sh.dc().iter().map(|v| spec.sh_dc.quantize(*v)));
        p.rest.extend(rest_values(&sh).map(|v| rest_q.quantize(v)));
    }
    debug_assert_eq!(p.mean.len(), 3 * n);
    let recon = reconstruct_intra(&p, spec, frame.frame_index)?;
    let chunk = FrameChunk {
        kind: ChunkKind::Intra,
        frame_index: frame.frame_index,
        payload: p.write(),
        checksum: feature_crc(&recon),
    };
    Ok((chunk, recon))
}

/// `spec` must already be widened with [`QuantSpec::intra`].
fn reconstruct_intra(p: &IntraPayload, spec: &QuantSpec, frame_index: u32) -> Result<GaussianFrame> {
    let rl = rest_len(p.degree);
    let rest_q = ScaledQuant {
        bits: spec.sh_rest_bits,
        step: p.rest_step,
    };
    let d3 = |g: &GroupSpec, s: &[i32]| Vec3::new(g.dequantize(s[0]), g.dequantize(s[1]), g.dequantize(s[2]));
    let pts = p
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let rest: Vec<f64> = p.rest[i * rl..(i + 1) * rl].iter().map(|&s| rest_q.dequantize(s)).collect();
            let dc = d3(&spec.sh_dc, &p.dc[3 * i..3 * i + 3]);
            let mut pt = GaussianPoint::new(
                id,
                d3(&spec.mean, &p.mean[3 * i..3 * i + 3]),
                quat::from_axis_angle(&d3(&spec.rotation, &p.rot[3 * i..3 * i + 3])),
                d3(&spec.log_scale, &p.scale[3 * i..3 * i + 3]),
                spec.opacity.dequantize(p.opacity[i]),
                sh_from(dc.into(), &rest, p.degree),
            );
            pt.birth_frame = frame_index;
            pt
        })
        .collect();
    GaussianFrame::new(frame_index, pts).map_err(|e| EgsError::CorruptChunk(e.to_string()))
}

// ---------------------------------------------------------------- inter

#[derive(Debug, Default)]
struct InterPayload {
    degree: u8,
    removed: Vec<u64>,
    k_g: u8,
    node_ids: Vec<u64>,
    node_rot: Vec<i32>,
    node_trans: Vec<i32>,
    ref_mean: Vec<i32>,
    ref_rot: Vec<i32>,
    ext_ids: Vec<u64>,
    ext_anc: Vec<u64>,
    ext_mean: Vec<i32>,
    ext_rot: Vec<i32>,
    ext_scale: Vec<i32>,
    ext_opacity: Vec<i32>,
    ext_dc: Vec<i32>,
    rest_step: f64,
    ext_rest: Vec<i32>,
}

impl InterPayload {
    fn write(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u8(self.degree);
        write_sorted_ids(&mut w, &self.removed);
        w.u8(self.k_g);
        write_sorted_ids(&mut w, &self.node_ids);
        write_stream(&mut w, &self.node_rot);
        write_stream(&mut w, &self.node_trans);
        write_stream(&mut w, &self.ref_mean);
        write_stream(&mut w, &self.ref_rot);
        write_sorted_ids(&mut w, &self.ext_ids);
        for a in &self.ext_anc {
            w.varint(*a);
        }
        for s in [&self.ext_mean, &self.ext_rot, &self.ext_scale, &self.ext_opacity, &self.ext_dc] {
            write_stream(&mut w, s);
        }
        w.f64(self.rest_step);
        write_stream(&mut w, &self.ext_rest);
        w.into_inner()
    }

    fn parse(bytes: &[u8], stats: &mut Vec<GroupStat>) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let mut p = Self {
            degree: read_degree(&mut r)?,
            ..Self::default()
        };
        let start = r.position();
        p.removed = read_sorted_ids(&mut r)?;
        section(stats, "removed", r.position() - start, &[], p.removed.len());

        let start = r.position();
        p.k_g = r.u8()?;
        p.node_ids = read_sorted_ids(&mut r)?;
        section(stats, "node_ids", r.position() - start, &[], p.node_ids.len());
        let mut stream = |r: &mut ByteReader<'_>, name: &'static str| -> Result<Vec<i32>> {
            let start = r.position();
            let s = read_stream(r, MAX_SYMBOLS)?;
            section(stats, name, r.position() - start, &s, s.len());
            Ok(s)
        };
        p.node_rot = stream(&mut r, "node_rot")?;
        p.node_trans = stream(&mut r, "node_trans")?;
        p.ref_mean = stream(&mut r, "ref_mean")?;
        p.ref_rot = stream(&mut r, "ref_rot")?;
        let start = r.position();
        p.ext_ids = read_sorted_ids(&mut r)?;
        p.ext_anc = (0..p.ext_ids.len()).map(|_| r.varint()).collect::<Result<_>>()?;
        let ext_id_bytes = r.position() - start;
        p.ext_mean = stream(&mut r, "ext_mean")?;
        p.ext_rot = stream(&mut r, "ext_rot")?;
        p.ext_scale = stream(&mut r, "ext_scale")?;
        p.ext_opacity = stream(&mut r, "ext_opacity")?;
        p.ext_dc = stream(&mut r, "ext_dc")?;
        let start = r.position();
        p.rest_step = r.f64()?;
        let step_bytes = r.position() - start;
        p.ext_rest = stream(&mut r, "ext_rest")?;
        if let Some(last) = stats.last_mut() {
            last.bytes += step_bytes;
        }
        let at = stats.len() - 6;
        stats.insert(
            at,
            GroupStat {
                name: "ext_ids",
                bytes: ext_id_bytes,
                symbols: p.ext_ids.len(),
                bits_per_symbol: 0.0,
            },
        );
        if !r.is_empty() {
            return Err(EgsError::CorruptChunk("trailing bytes after inter payload".into()));
        }
        let m = p.node_ids.len();
        check_len(&p.node_rot, 3 * m, "node rotation")?;
        check_len(&p.node_trans, 3 * m, "node translation")?;
        let e = p.ext_ids.len();
        check_len(&p.ext_mean, 3 * e, "extension mean")?;
        check_len(&p.ext_rot, 3 * e, "extension rotation")?;
        check_len(&p.ext_scale, 3 * e, "extension scale")?;
        check_len(&p.ext_opacity, e, "extension opacity")?;
        check_len(&p.ext_dc, 3 * e, "extension dc")?;
        check_len(&p.ext_rest, e * rest_len(p.degree), "extension rest")?;
        if check_len(&p.ref_rot, p.ref_mean.len(), "reference rotation").is_err() || p.ref_mean.len() % 3 != 0 {
            return Err(EgsError::CorruptChunk("reference streams disagree in length".into()));
        }
        if !(p.rest_step >= 0.0 && p.rest_step.is_finite()) {
            return Err(EgsError::CorruptChunk("invalid SH rest step".into()));
        }
        Ok(p)
    }
}

/// State shared by the inter encoder and decoder once the prediction exists.
struct Reconstruction {
    pred: GaussianFrame,
    points: Vec<GaussianPoint>,
    index: HashMap<PointId, usize>,
}

impl Reconstruction {
    fn ancestor(&self, id: PointId) -> Result<&GaussianPoint> {
        if let Some(&i) = self.index.get(&id) {
            return Ok(&self.points[i]);
        }
        self.pred.get(id).ok_or_else(|| EgsError::CorruptChunk(format!("unknown ancestor id {id}")))
    }

    fn push(&mut self, p: GaussianPoint) {
        self.index.insert(p.id, self.points.len());
        self.points.push(p);
    }
}

fn dequantized_nodes(spec: &QuantSpec, rot: &[i32], trans: &[i32]) -> Vec<(Vec3, Vec3)> {
    rot.chunks_exact(3)
        .zip(trans.chunks_exact(3))
        .map(|(r, t)| (deq3(&spec.rotation, r), deq3(&spec.mean, t)))
        .collect()
}

fn survivor_ids(prev: &GaussianFrame, removed: &[u64]) -> Vec<PointId> {
    let removed: HashSet<u64> = removed.iter().copied().collect();
    prev.points().iter().map(|p| p.id).filter(|id| !removed.contains(&id.0)).collect()
}

/// Builds the prediction and applies reference residuals; shared by both sides.
fn reconstruct_reference(prev: &GaussianFrame, p: &InterPayload, spec: &QuantSpec) -> Result<Reconstruction> {
    for id in &p.removed {
        if prev.get(PointId(*id)).is_none() {
            return Err(EgsError::CorruptChunk(format!("removed id {id} is not in the previous frame")));
        }
    }
    let nodes = dequantized_nodes(spec, &p.node_rot, &p.node_trans);
    let pred = predict(prev, &p.node_ids, &nodes, usize::from(p.k_g))?;
    let survivors = survivor_ids(prev, &p.removed);
    if p.ref_mean.len() != 3 * survivors.len() {
        return Err(EgsError::CorruptChunk(format!(
            "chunk carries residuals for {} points but {} survive",
            p.ref_mean.len() / 3,
            survivors.len()
        )));
    }
    let mut rec = Reconstruction {
        points: Vec::with_capacity(survivors.len() + p.ext_ids.len()),
        index: HashMap::with_capacity(survivors.len() + p.ext_ids.len()),
        pred,
    };
    for (k, id) in survivors.into_iter().enumerate() {
        let base = rec.pred.get(id).expect("prediction covers the previous frame");
        let mut q = base.clone();
        q.pose.mean = base.pose.mean + deq3(&spec.mean, &p.ref_mean[3 * k..3 * k + 3]);
        q.pose.rotation = rotate_by(base, &p.ref_rot[3 * k..3 * k + 3], &spec.rotation);
        q.appearance.sh = q.appearance.sh.with_degree(p.degree);
        q.class = PointClass::Reference;
        rec.push(q);
    }
    Ok(rec)
}

struct ExtDiff<'a> {
    spec: &'a QuantSpec,
    rest: ScaledQuant,
}

impl ExtDiff<'_> {
    fn apply(&self, anc: &GaussianPoint, p: &InterPayload, k: usize, id: u64, frame_index: u32) -> GaussianPoint {
        let s = self.spec;
        let rl = rest_len(p.degree);
        let sh = anc.appearance.sh.with_degree(p.degree);
        let dc_d = deq3(&s.sh_dc, &p.ext_dc[3 * k..3 * k + 3]);
        let dc = [sh.dc()[0] + dc_d.x, sh.dc()[1] + dc_d.y, sh.dc()[2] + dc_d.z];
        let rest: Vec<f64> = rest_values(&sh)
            .zip(&p.ext_rest[k * rl..(k + 1) * rl])
            .map(|(a, &sym)| a + self.rest.dequantize(sym))
            .collect();
        let mut out = GaussianPoint::new(
            id,
            anc.pose.mean + deq3(&s.mean, &p.ext_mean[3 * k..3 * k + 3]),
            rotate_by(anc, &p.ext_rot[3 * k..3 * k + 3], &s.rotation),
            anc.appearance.log_scale + deq3(&s.log_scale, &p.ext_scale[3 * k..3 * k + 3]),
            anc.appearance.opacity_logit + s.opacity.dequantize_residual(p.ext_opacity[k]),
            sh_from(dc, &rest, p.degree),
        );
        out.class = PointClass::Extension {
            ancestor: PointId(p.ext_anc[k]),
        };
        out.birth_frame = frame_index;
        out
    }
}

/// Encodes `cur` against the decoder-side reconstruction `prev`.
///
/// Points of `cur` already in `prev` are coded as pose residuals against the
/// re-warped `prev`; their appearance is carried over. New points must be
/// extension points and are coded as differentials against their ancestor.
/// Returns the chunk and the decoder's reconstruction of `cur`.
pub fn encode_frame(
    prev: &GaussianFrame,
    cur: &GaussianFrame,
    removed: &[PointId],
    spec: &QuantSpec,
    hint: &WarpHint,
) -> Result<(FrameChunk, GaussianFrame)> {
    spec.validate()?;
    let degree = cur.sh_degree();
    let mut removed_ids: Vec<u64> = removed.iter().map(|id| id.0).collect();
    removed_ids.sort_unstable();
    removed_ids.dedup();
    if removed_ids.len() != removed.len() {
        return Err(EgsError::CorruptState("removal list has duplicates".into()));
    }
    for id in &removed_ids {
        if prev.get(PointId(*id)).is_none() || cur.get(PointId(*id)).is_some() {
            return Err(EgsError::CorruptState(format!("removed id {id} must be in the previous frame only")));
        }
    }
    let survivors = survivor_ids(prev, &removed_ids);
    for id in &survivors {
        if cur.get(*id).is_none() {
            return Err(EgsError::CorruptState(format!("point {id} vanished without being listed as removed")));
        }
    }
    let k_g = u8::try_from(hint.k_g).map_err(|_| EgsError::InvalidParameter("K^g must fit in a byte".into()))?;
    let mut nodes: Vec<_> = hint.nodes.iter().collect();
    nodes.sort_by_key(|n| n.id);
    if nodes.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(EgsError::InvalidParameter("warp hint repeats a node".into()));
    }
    let mut p = InterPayload {
        degree,
        removed: removed_ids,
        k_g,
        node_ids: nodes.iter().map(|n| n.id).collect(),
        ..InterPayload::default()
    };
    for n in &nodes {
        if prev.get(PointId(n.id)).is_none() {
            return Err(EgsError::CorruptState(format!("warp node {} is not in the previous frame", n.id)));
        }
        push3(&mut p.node_rot, &spec.rotation, &Vec3::from(n.axis_angle));
        push3(&mut p.node_trans, &spec.mean, &Vec3::from(n.translation));
    }
    // reference residuals against the re-warped prediction
    let nodes_dq = dequantized_nodes(spec, &p.node_rot, &p.node_trans);
    let pred = predict(prev, &p.node_ids, &nodes_dq, usize::from(k_g))?;
    for id in &survivors {
        let (c, b) = (cur.get(*id).expect("checked"), pred.get(*id).expect("prediction covers prev"));
        push3(&mut p.ref_mean, &spec.mean, &(c.pose.mean - b.pose.mean));
        push3(&mut p.ref_rot, &spec.rotation, &(axis_angle(c) - axis_angle(b)));
    }
    let mut rec = reconstruct_reference(prev, &p, spec)?;

    // extension differentials
    let new_points: Vec<&GaussianPoint> = cur.points().iter().filter(|q| prev.get(q.id).is_none()).collect();
    let new_ids: HashSet<PointId> = new_points.iter().map(|q| q.id).collect();
    let mut ancestors = Vec::with_capacity(new_points.len());
    for q in &new_points {
        let anc = q.class.ancestor().ok_or_else(|| {
            EgsError::CorruptState(format!("new point {} is not an extension point", q.id))
        })?;
        if anc >= q.id && new_ids.contains(&anc) || (prev.get(anc).is_none() && !new_ids.contains(&anc)) {
            return Err(EgsError::CorruptState(format!("point {} has unusable ancestor {anc}", q.id)));
        }
        ancestors.push(anc);
    }
    let rl = rest_len(degree);
    let rest_q = {
        let mut diffs = Vec::with_capacity(new_points.len() * rl);
        for (q, anc) in new_points.iter().zip(&ancestors) {
            let a = cur.get(*anc).filter(|_| new_ids.contains(anc)).or_else(|| rec.ancestor(*anc).ok()).expect("validated");
            let (qs, as_) = (q.appearance.sh.with_degree(degree), a.appearance.sh.with_degree(degree));
            diffs.extend(rest_values(&qs).zip(rest_values(&as_)).map(|(x, y)| x - y));
        }
        ScaledQuant::fit(spec.sh_rest_bits, diffs)
    };
    p.rest_step = rest_q.step;
    p.ext_ids = new_points.iter().map(|q| q.id.0).collect();
    p.ext_anc = ancestors.iter().map(|a| a.0).collect();
    let diff = ExtDiff { spec, rest: rest_q };
    for (k, (q, anc)) in new_points.iter().zip(&ancestors).enumerate() {
        let a = rec.ancestor(*anc)?.clone();
        push3(&mut p.ext_mean, &spec.mean, &(q.pose.mean - a.pose.mean));
        push3(&mut p.ext_rot, &spec.rotation, &(axis_angle(q) - axis_angle(&a)));
        push3(&mut p.ext_scale, &spec.log_scale, &(q.appearance.log_scale - a.appearance.log_scale));
        p.ext_opacity.push(spec.opacity.quantize_residual(q.appearance.opacity_logit - a.appearance.opacity_logit));
        let (qs, as_) = (q.appearance.sh.with_degree(degree), a.appearance.sh.with_degree(degree));
        for c in 0..3 {
            p.ext_dc.push(spec.sh_dc.quantize_residual(qs.dc()[c] - as_.dc()[c]));
        }
        p.ext_rest.extend(rest_values(&qs).zip(rest_values(&as_)).map(|(x, y)| rest_q.quantize(x - y)));
        let point = diff.apply(&a, &p, k, q.id.0, cur.frame_index);
        rec.push(point);
    }
    let recon = GaussianFrame::new(cur.frame_index, rec.points)?;
    let chunk = FrameChunk {
        kind: ChunkKind::Inter,
        frame_index: cur.frame_index,
        payload: p.write(),
        checksum: feature_crc(&recon),
    };
    Ok((chunk, recon))
}

fn verify(frame: GaussianFrame, chunk: &FrameChunk) -> Result<GaussianFrame> {
    let crc = feature_crc(&frame);
    if crc != chunk.checksum {
        return Err(EgsError::CorruptChunk(format!(
            "checksum mismatch in frame {}: stored {:08x}, decoded {crc:08x}",
            chunk.frame_index, chunk.checksum
        )));
    }
    Ok(frame)
}

/// Decodes an intra chunk.
pub fn decode_intra(chunk: &FrameChunk, spec: &QuantSpec) -> Result<GaussianFrame> {
    if chunk.kind != ChunkKind::Intra {
        return Err(EgsError::CorruptChunk("expected an intra chunk".into()));
    }
    let p = IntraPayload::parse(&chunk.payload, &mut Vec::new())?;
    verify(reconstruct_intra(&p, &spec.intra(), chunk.frame_index)?, chunk)
}

/// Decodes an inter chunk against the previous decoded frame. Also returns
/// the dequantized warp carried by the chunk.
pub fn decode_frame(prev: &GaussianFrame, chunk: &FrameChunk, spec: &QuantSpec) -> Result<(GaussianFrame, WarpHint)> {
    if chunk.kind != ChunkKind::Inter {
        return Err(EgsError::CorruptChunk("expected an inter chunk".into()));
    }
    let p = InterPayload::parse(&chunk.payload, &mut Vec::new())?;
    let mut rec = reconstruct_reference(prev, &p, spec)?;
    let rest = ScaledQuant {
        bits: spec.sh_rest_bits,
        step: p.rest_step,
    };
    let diff = ExtDiff { spec, rest };
    for (k, &id) in p.ext_ids.iter().enumerate() {
        if prev.get(PointId(id)).is_some() {
            return Err(EgsError::CorruptChunk(format!("spawned id {id} already exists")));
        }
        let a = rec.ancestor(PointId(p.ext_anc[k]))?.clone();
        rec.push(diff.apply(&a, &p, k, id, chunk.frame_index));
    }
    let frame = GaussianFrame::new(chunk.frame_index, rec.points).map_err(|e| EgsError::CorruptChunk(e.to_string()))?;
    let hint = WarpHint {
        k_g: usize::from(p.k_g),
        nodes: p
            .node_ids
            .iter()
            .zip(dequantized_nodes(spec, &p.node_rot, &p.node_trans))
            .map(|(&id, (aa, t))| crate::codec::warp::HintNode {
                id,
                axis_angle: aa.into(),
                translation: t.into(),
            })
            .collect(),
    };
    Ok((verify(frame, chunk)?, hint))
}

/// Per-section sizes and empirical entropies, read from the payload alone.
pub fn chunk_stats(chunk: &FrameChunk) -> Result<ChunkStats> {
    let mut groups = Vec::new();
    let header = 1;
    match chunk.kind {
        ChunkKind::Intra => {
            IntraPayload::parse(&chunk.payload, &mut groups)?;
        }
        ChunkKind::Inter => {
            InterPayload::parse(&chunk.payload, &mut groups)?;
        }
    }
    debug_assert_eq!(groups.iter().map(|g| g.bytes).sum::<usize>() + header, chunk.payload.len());
    Ok(ChunkStats {
        kind: chunk.kind,
        frame_index: chunk.frame_index,
        bytes: chunk.size_bytes(),
        groups,
    })
}
