//! Binary little-endian PLY files in the conventional explicit-Gaussian
//! layout (`x y z`, `f_dc_*`, `f_rest_*`, `opacity`, `scale_*`, `rot_*`).
//!
//! `f_rest_*` is channel-major: all red coefficients of bands 1 and up,
//! then green, then blue. Optional `id_lo`/`id_hi`, `class`,
//! `ancestor_lo`/`ancestor_hi` and `birth` properties carry stream
//! metadata; without them ids follow record order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{EgsError, Result};
use crate::model::{GaussianFrame, GaussianPoint, PointClass, PointId, Vec3};
use crate::quat;
use crate::sh::{coeff_count, ShCoeffs, MAX_SH_DEGREE};

/// Floating-point width used for feature properties when writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => f64::from(b[0] as i8),
            Scalar::U8 => f64::from(b[0]),
            Scalar::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Scalar::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Scalar::I32 => f64::from(i32::from_le_bytes(b[..4].try_into().expect("4 bytes"))),
            Scalar::U32 => f64::from(u32::from_le_bytes(b[..4].try_into().expect("4 bytes"))),
            Scalar::F32 => f64::from(f32::from_le_bytes(b[..4].try_into().expect("4 bytes"))),
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
}

impl Element {
    fn stride(&self) -> usize {
        self.props.iter().map(|(_, s)| s.size()).sum()
    }
}

struct Header {
    elements: Vec<Element>,
    frame_index: u32,
}

fn fmt_err(msg: impl Into<String>) -> EgsError {
    EgsError::Format(msg.into())
}

fn parse_header(r: &mut impl BufRead) -> Result<Header> {
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<bool> {
        line.clear();
        Ok(r.read_line(line)? > 0)
    };
    if !next(&mut line)? || line.trim_end() != "ply" {
        return Err(fmt_err("not a PLY file (missing 'ply' magic)"));
    }
    let mut format_seen = false;
    let mut elements: Vec<Element> = Vec::new();
    let mut frame_index = 0;
    loop {
        if !next(&mut line)? {
            return Err(fmt_err("PLY header ends without 'end_header'"));
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", "1.0"] => format_seen = true,
            ["format", other, ..] => return Err(fmt_err(format!("unsupported PLY format '{other}', expected binary_little_endian"))),
            ["comment", "frame", n] => frame_index = n.parse().map_err(|_| fmt_err(format!("bad frame comment '{n}'")))?,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: (*name).to_string(),
                count: count.parse().map_err(|_| fmt_err(format!("bad element count '{count}'")))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => return Err(fmt_err("list properties are not supported")),
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| fmt_err("property before any element"))?;
                let s = Scalar::parse(ty).ok_or_else(|| fmt_err(format!("unknown property type '{ty}'")))?;
                if el.props.iter().any(|(n, _)| n == name) {
                    return Err(fmt_err(format!("duplicate property {name}")));
                }
                el.props.push(((*name).to_string(), s));
            }
            _ => return Err(fmt_err(format!("unrecognized PLY header line '{}'", line.trim_end()))),
        }
    }
    if !format_seen {
        return Err(fmt_err("PLY header has no format line"));
    }
    Ok(Header { elements, frame_index })
}

/// Reads a Gaussian frame from a PLY file.
pub fn read_gaussian_ply(path: &Path) -> Result<GaussianFrame> {
    let file = std::fs::File::open(path).map_err(|e| EgsError::InvalidInput(format!("{}: {e}", path.display())))?;
    read_gaussian_ply_from(&mut BufReader::new(file)).map_err(|e| match e {
        EgsError::Format(m) => EgsError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn read_gaussian_ply_from(r: &mut impl BufRead) -> Result<GaussianFrame> {
    let header = parse_header(r)?;
    let mut points = None;
    for el in &header.elements {
        let mut body = vec![0u8; el.count.checked_mul(el.stride()).ok_or_else(|| fmt_err("element too large"))?];
        r.read_exact(&mut body).map_err(|_| fmt_err(format!("file ends inside element '{}'", el.name)))?;
        if el.name == "vertex" {
            points = Some(parse_vertices(el, &body)?);
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(fmt_err("trailing bytes after the last element"));
    }
    let points = points.ok_or_else(|| fmt_err("no vertex element"))?;
    GaussianFrame::new(header.frame_index, points).map_err(|e| fmt_err(e.to_string()))
}

fn parse_vertices(el: &Element, body: &[u8]) -> Result<Vec<GaussianPoint>> {
    let mut offsets: HashMap<&str, (usize, Scalar)> = HashMap::new();
    let mut off = 0;
    for (name, s) in &el.props {
        offsets.insert(name.as_str(), (off, *s));
        off += s.size();
    }
    let need = |name: &str| offsets.get(name).copied().ok_or_else(|| fmt_err(format!("missing property {name}")));
    let opt = |name: &str| offsets.get(name).copied();
    let needs = |names: &[&str]| names.iter().map(|n| need(n)).collect::<Result<Vec<_>>>();
    let pos = needs(&["x", "y", "z"])?;
    let dc = needs(&["f_dc_0", "f_dc_1", "f_dc_2"])?;
    let opacity = need("opacity")?;
    let scale = needs(&["scale_0", "scale_1", "scale_2"])?;
    let rot = needs(&["rot_0", "rot_1", "rot_2", "rot_3"])?;

    let n_rest = (0..).take_while(|k| offsets.contains_key(format!("f_rest_{k}").as_str())).count();
    if offsets.keys().filter(|k| k.starts_with("f_rest_")).count() != n_rest {
        return Err(fmt_err("f_rest_* properties are not numbered contiguously from 0"));
    }
    let degree = (0..=MAX_SH_DEGREE)
        .find(|&d| 3 * (coeff_count(d) - 1) == n_rest)
        .ok_or_else(|| fmt_err(format!("{n_rest} f_rest coefficients do not match any SH degree up to {MAX_SH_DEGREE}")))?;
    let rest: Vec<(usize, Scalar)> = (0..n_rest).map(|k| offsets[format!("f_rest_{k}").as_str()]).collect();
    let per_channel = coeff_count(degree) - 1;

    let id_parts = match (opt("id_lo"), opt("id_hi")) {
        (Some(lo), Some(hi)) => Some((lo, hi)),
        (None, None) => None,
        _ => return Err(fmt_err("id_lo and id_hi must appear together")),
    };
    let anc_parts = match (opt("ancestor_lo"), opt("ancestor_hi")) {
        (Some(lo), Some(hi)) => Some((lo, hi)),
        (None, None) => None,
        _ => return Err(fmt_err("ancestor_lo and ancestor_hi must appear together")),
    };
    let class = opt("class");
    if class.is_some() != anc_parts.is_some() {
        return Err(fmt_err("class and ancestor_lo/ancestor_hi must appear together"));
    }
    let birth = opt("birth");

    let stride = el.stride();
    let mut out = Vec::with_capacity(el.count);
    for i in 0..el.count {
        let rec = &body[i * stride..(i + 1) * stride];
        let get = |(o, s): (usize, Scalar)| s.read(&rec[o..]);
        let v3 = |p: &[(usize, Scalar)]| Vec3::new(get(p[0]), get(p[1]), get(p[2]));
        let join = |(lo, hi): ((usize, Scalar), (usize, Scalar))| (get(hi) as u64) << 32 | get(lo) as u64;
        let mut coeffs = vec![[0.0; 3]; coeff_count(degree)];
        coeffs[0] = [get(dc[0]), get(dc[1]), get(dc[2])];
        for c in 0..3 {
            for k in 0..per_channel {
                coeffs[k + 1][c] = get(rest[c * per_channel + k]);
            }
        }
        let id = id_parts.map_or(i as u64, join);
        let mut p = GaussianPoint::new(
            id,
            v3(&pos),
            quat::quat(get(rot[0]), get(rot[1]), get(rot[2]), get(rot[3])),
            v3(&scale),
            get(opacity),
            ShCoeffs::new(degree, coeffs)?,
        );
        if let (Some(c), Some(a)) = (class, anc_parts) {
            p.class = match get(c) as u8 {
                0 => PointClass::Reference,
                1 => PointClass::Extension { ancestor: PointId(join(a)) },
                other => return Err(fmt_err(format!("vertex {i}: unknown class {other}"))),
            };
        }
        if let Some(b) = birth {
            p.birth_frame = get(b) as u32;
        }
        p.check_finite().map_err(|_| fmt_err(format!("vertex {i} has non-finite features")))?;
        out.push(p);
    }
    Ok(out)
}

/// Writes `frame` with ids, class and birth metadata.
pub fn write_gaussian_ply(frame: &GaussianFrame, path: &Path, precision: Precision) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_gaussian_ply_to(frame, &mut w, precision)?;
    w.flush()?;
    Ok(())
}

pub fn write_gaussian_ply_to(frame: &GaussianFrame, w: &mut impl Write, precision: Precision) -> Result<()> {
    let degree = frame.sh_degree();
    let per_channel = coeff_count(degree) - 1;
    let ty = match precision {
        Precision::F32 => "float",
        Precision::F64 => "double",
    };
    let mut h = format!("ply\nformat binary_little_endian 1.0\ncomment frame {}\nelement vertex {}\n", frame.frame_index, frame.len());
    let mut float_props: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"].map(String::from).to_vec();
    float_props.extend((0..3 * per_channel).map(|k| format!("f_rest_{k}")));
    float_props.extend(["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"].map(String::from));
    for p in &float_props {
        h.push_str(&format!("property {ty} {p}\n"));
    }
    for p in ["id_lo", "id_hi", "ancestor_lo", "ancestor_hi"] {
        h.push_str(&format!("property uint {p}\n"));
    }
    h.push_str("property uchar class\nproperty uint birth\nend_header\n");
    w.write_all(h.as_bytes())?;

    let mut rec = Vec::new();
    for p in frame.points() {
        rec.clear();
        let sh = p.appearance.sh.with_degree(degree);
        let mut vals: Vec<f64> = p.pose.mean.iter().copied().collect();
        vals.extend(sh.dc());
        for c in 0..3 {
            vals.extend(sh.coeffs()[1..].iter().map(|k| k[c]));
        }
        vals.push(p.appearance.opacity_logit);
        vals.extend(p.appearance.log_scale.iter());
        vals.extend(quat::to_array(&p.pose.rotation));
        for v in vals {
            match precision {
                Precision::F32 => rec.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => rec.extend_from_slice(&v.to_le_bytes()),
            }
        }
        let (class, anc) = match p.class {
            PointClass::Reference => (0u8, 0u64),
            PointClass::Extension { ancestor } => (1, ancestor.0),
        };
        for v in [p.id.0, anc] {
            rec.extend_from_slice(&(v as u32).to_le_bytes());
            rec.extend_from_slice(&((v >> 32) as u32).to_le_bytes());
        }
        rec.push(class);
        rec.extend_from_slice(&p.birth_frame.to_le_bytes());
        w.write_all(&rec)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::random_frame;

    fn round_trip(frame: &GaussianFrame, precision: Precision) -> GaussianFrame {
        let mut buf = Vec::new();
        write_gaussian_ply_to(frame, &mut buf, precision).unwrap();
        read_gaussian_ply_from(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let mut f = random_frame(50, 3, 2);
        f.frame_index = 7;
        f.points_mut()[4].class = PointClass::Extension { ancestor: PointId(1 << 40) };
        f.points_mut()[4].birth_frame = 6;
        assert_eq!(round_trip(&f, Precision::F64), f);
    }

    #[test]
    fn f32_round_trip_within_float_precision() {
        let f = random_frame(100, 4, 3);
        let g = round_trip(&f, Precision::F32);
        assert_eq!(g.len(), f.len());
        for (a, b) in f.points().iter().zip(g.points()) {
            assert_eq!(a.id, b.id);
            assert!((a.pose.mean - b.pose.mean).amax() <= 1e-6 * a.pose.mean.amax().max(1.0));
            for (x, y) in a.appearance.sh.coeffs().iter().flatten().zip(b.appearance.sh.coeffs().iter().flatten()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    fn plain_header(props: &[&str], n: usize) -> Vec<u8> {
        let mut h = format!("ply\nformat binary_little_endian 1.0\nelement vertex {n}\n");
        for p in props {
            h.push_str(&format!("property float {p}\n"));
        }
        h.push_str("end_header\n");
        h.into_bytes()
    }

    fn conventional_props(n_rest: usize) -> Vec<String> {
        let mut v: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"].map(String::from).to_vec();
        v.extend((0..n_rest).map(|k| format!("f_rest_{k}")));
        v.extend(["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"].map(String::from));
        v
    }

    #[test]
    fn missing_rotation_component_is_named() {
        let props = conventional_props(0);
        let props: Vec<&str> = props.iter().map(String::as_str).filter(|p| *p != "rot_3").collect();
        let mut bytes = plain_header(&props, 1);
        bytes.extend(std::iter::repeat_n(0u8, 4 * props.len()));
        let err = read_gaussian_ply_from(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(&err, EgsError::Format(m) if m.contains("missing property rot_3")), "{err}");
    }

    #[test]
    fn degree_three_file_parses_bands_channel_major() {
        let props = conventional_props(45);
        let names: Vec<&str> = props.iter().map(String::as_str).collect();
        let mut bytes = plain_header(&names, 2);
        for i in 0..2 {
            for name in &names {
                let v = match *name {
                    "rot_0" => 1.0,
                    n if n.starts_with("f_rest_") => n[7..].parse::<f32>().unwrap() + 100.0 * i as f32,
                    _ => 0.0,
                };
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let f = read_gaussian_ply_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(f.len(), 2);
        let sh = &f.points()[1].appearance.sh;
        assert_eq!(sh.degree(), 3);
        assert_eq!(sh.coeffs().len(), 16);
        // 15 coefficients per channel: red takes f_rest_0..14, green 15..29, blue 30..44
        assert_eq!(sh.coeffs()[1], [100.0, 115.0, 130.0]);
        assert_eq!(sh.coeffs()[15], [114.0, 129.0, 144.0]);
        assert_eq!(f.points()[0].id, PointId(0));
        assert_eq!(f.points()[1].id, PointId(1));
    }

    #[test]
    fn structural_deviations_are_rejected() {
        let bad_count = conventional_props(7);
        let names: Vec<&str> = bad_count.iter().map(String::as_str).collect();
        let bytes = plain_header(&names, 0);
        assert!(matches!(read_gaussian_ply_from(&mut bytes.as_slice()), Err(EgsError::Format(_))));

        let ascii = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n".to_vec();
        assert!(matches!(read_gaussian_ply_from(&mut ascii.as_slice()), Err(EgsError::Format(_))));

        let props = conventional_props(0);
        let names: Vec<&str> = props.iter().map(String::as_str).collect();
        let mut short = plain_header(&names, 2);
        short.extend(std::iter::repeat_n(0u8, 4 * names.len()));
        assert!(matches!(read_gaussian_ply_from(&mut short.as_slice()), Err(EgsError::Format(_))));
    }
}
