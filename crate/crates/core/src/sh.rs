//! Real spherical harmonics up to degree 3 in the layout used by explicit
//! Gaussian point files, plus the per-band rotation used while warping.

use std::sync::LazyLock;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{EgsError, Result};

pub const MAX_SH_DEGREE: u8 = 3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of coefficients per channel for a degree.
pub const fn coeff_count(degree: u8) -> usize {
    (degree as usize + 1) * (degree as usize + 1)
}

/// Per-channel real SH coefficients; `coeffs[k]` holds (r, g, b) for basis `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoeffs {
    degree: u8,
    coeffs: Vec<[f64; 3]>,
}

impl ShCoeffs {
    pub fn new(degree: u8, coeffs: Vec<[f64; 3]>) -> Result<Self> {
        if degree > MAX_SH_DEGREE {
            return Err(EgsError::InvalidParameter(format!(
                "SH degree {degree} exceeds {MAX_SH_DEGREE}"
            )));
        }
        if coeffs.len() != coeff_count(degree) {
            return Err(EgsError::InvalidParameter(format!(
                "degree {degree} needs {} coefficients per channel, got {}",
                coeff_count(degree),
                coeffs.len()
            )));
        }
        Ok(Self { degree, coeffs })
    }

    /// Degree-0 coefficients producing a constant linear color.
    pub fn from_base_color(rgb: [f64; 3]) -> Self {
        Self {
            degree: 0,
            coeffs: vec![rgb.map(|c| (c - 0.5) / SH_C0)],
        }
    }

    pub fn zeros(degree: u8) -> Self {
        assert!(degree <= MAX_SH_DEGREE);
        Self {
            degree,
            coeffs: vec![[0.0; 3]; coeff_count(degree)],
        }
    }

    pub fn degree(&self) -> u8 {
        self.degree
    }

    pub fn coeffs(&self) -> &[[f64; 3]] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.coeffs
    }

    pub fn dc(&self) -> [f64; 3] {
        self.coeffs[0]
    }

    /// Total scalar count, `3 (degree + 1)^2`.
    pub fn scalar_count(&self) -> usize {
        3 * self.coeffs.len()
    }

    /// View-independent base color from the degree-0 band.
    pub fn base_color(&self) -> [f64; 3] {
        self.coeffs[0].map(|c| (SH_C0 * c + 0.5).max(0.0))
    }

    /// Returns a copy raised (zero padded) or truncated to `degree`.
    pub fn with_degree(&self, degree: u8) -> Self {
        let mut coeffs = self.coeffs.clone();
        coeffs.resize(coeff_count(degree), [0.0; 3]);
        Self { degree, coeffs }
    }

    /// Raw radiance (before the +0.5 offset and clamp) along `dir`, using
    /// at most `max_degree` bands.
    pub fn eval_raw(&self, dir: &Vector3<f64>, max_degree: u8) -> [f64; 3] {
        let deg = self.degree.min(max_degree);
        let basis = basis(dir);
        let mut out = [0.0; 3];
        for (k, c) in self.coeffs.iter().take(coeff_count(deg)).enumerate() {
            for ch in 0..3 {
                out[ch] += basis[k] * c[ch];
            }
        }
        out
    }
}

/// Basis values at unit direction `d`.
pub fn basis(d: &Vector3<f64>) -> [f64; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Gradients of the basis polynomials w.r.t. (x, y, z), evaluated at `d`.
/// These are polynomial gradients; callers chain through the normalization.
pub fn basis_poly_grad(d: &Vector3<f64>) -> [Vector3<f64>; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let v = Vector3::new;
    let (c1, c2, c3) = (SH_C1, SH_C2, SH_C3);
    [
        v(0.0, 0.0, 0.0),
        v(0.0, -c1, 0.0),
        v(0.0, 0.0, c1),
        v(-c1, 0.0, 0.0),
        v(c2[0] * y, c2[0] * x, 0.0),
        v(0.0, c2[1] * z, c2[1] * y),
        v(-2.0 * x * c2[2], -2.0 * y * c2[2], 4.0 * z * c2[2]),
        v(c2[3] * z, 0.0, c2[3] * x),
        v(2.0 * x * c2[4], -2.0 * y * c2[4], 0.0),
        v(6.0 * x * y * c3[0], (3.0 * xx - 3.0 * yy) * c3[0], 0.0),
        v(c3[1] * y * z, c3[1] * x * z, c3[1] * x * y),
        v(
            -2.0 * x * y * c3[2],
            (4.0 * zz - xx - 3.0 * yy) * c3[2],
            8.0 * y * z * c3[2],
        ),
        v(
            -6.0 * x * z * c3[3],
            -6.0 * y * z * c3[3],
            (6.0 * zz - 3.0 * xx - 3.0 * yy) * c3[3],
        ),
        v(
            (4.0 * zz - 3.0 * xx - yy) * c3[4],
            -2.0 * x * y * c3[4],
            8.0 * x * z * c3[4],
        ),
        v(2.0 * x * z * c3[5], -2.0 * y * z * c3[5], (xx - yy) * c3[5]),
        v((3.0 * xx - 3.0 * yy) * c3[6], -6.0 * x * y * c3[6], 0.0),
    ]
}

// Fixed sample directions on a Fibonacci sphere; rotated band coefficients
// are recovered from them by least squares, which is exact because each
// band is closed under rotation.
const SAMPLE_DIRS: usize = 24;

fn sample_dirs() -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..SAMPLE_DIRS)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / SAMPLE_DIRS as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            Vector3::new(r * th.cos(), y, r * th.sin())
        })
        .collect()
}

struct BandSolver {
    dirs: Vec<Vector3<f64>>,
    // pseudo-inverse per band l = 1..=3, shape (2l+1) x SAMPLE_DIRS
    pinv: Vec<DMatrix<f64>>,
}

static SOLVER: LazyLock<BandSolver> = LazyLock::new(|| {
    let dirs = sample_dirs();
    let pinv = (1..=3u8)
        .map(|l| {
            let start = coeff_count(l - 1);
            let width = 2 * l as usize + 1;
            let y = DMatrix::from_fn(SAMPLE_DIRS, width, |r, c| basis(&dirs[r])[start + c]);
            y.pseudo_inverse(1e-12).expect("SH sample matrix has full rank")
        })
        .collect();
    BandSolver { dirs, pinv }
});

/// Rotates SH so that the result evaluated at `d` equals the input evaluated
/// at `R^T d`. Band 0 is left untouched.
pub fn rotate_sh(sh: &ShCoeffs, rotation: &Matrix3<f64>) -> ShCoeffs {
    if sh.degree == 0 {
        return sh.clone();
    }
    let solver = &*SOLVER;
    let inv = rotation.transpose();
    let rotated_dirs: Vec<Vector3<f64>> = solver.dirs.iter().map(|d| inv * d).collect();
    let mut out = sh.clone();
    for l in 1..=sh.degree {
        let start = coeff_count(l - 1);
        let width = 2 * l as usize + 1;
        let y_rot = DMatrix::from_fn(SAMPLE_DIRS, width, |r, c| {
            basis(&rotated_dirs[r])[start + c]
        });
        let band = &solver.pinv[(l - 1) as usize] * y_rot;
        for ch in 0..3 {
            let c = DVector::from_fn(width, |m, _| sh.coeffs[start + m][ch]);
            let r = &band * c;
            for m in 0..width {
                out.coeffs[start + m][ch] = r[m];
            }
        }
    }
    out
}
