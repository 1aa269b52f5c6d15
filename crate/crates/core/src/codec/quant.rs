//! Uniform scalar quantizers for each feature group.

use serde::{Deserialize, Serialize};

use crate::error::{EgsError, Result};

/// A symmetric uniform quantizer: `bits` wide, `step` apart, centered on
/// `zero_point`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub bits: u8,
    pub step: f64,
    #[serde(default)]
    pub zero_point: f64,
}

impl GroupSpec {
    pub const fn new(bits: u8, step: f64) -> Self {
        Self {
            bits,
            step,
            zero_point: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=31).contains(&self.bits) {
            return Err(EgsError::InvalidParameter(format!("quantizer bit width {} outside 2..=31", self.bits)));
        }
        if !(self.step > 0.0 && self.step.is_finite()) || !self.zero_point.is_finite() {
            return Err(EgsError::InvalidParameter(format!("quantizer step {} must be positive", self.step)));
        }
        Ok(())
    }

    /// Largest symbol magnitude, `2^(bits-1) - 1`.
    pub fn max_symbol(&self) -> i32 {
        (1i32 << (self.bits - 1)) - 1
    }

    /// Symbol nearest to `x`, clamped to the representable range. NaN maps to 0.
    pub fn quantize(&self, x: f64) -> i32 {
        quantize_with(x - self.zero_point, self.step, self.max_symbol())
    }

    pub fn dequantize(&self, s: i32) -> f64 {
        self.zero_point + f64::from(s) * self.step
    }

    /// Quantizes a difference; residuals are always centered on zero.
    pub fn quantize_residual(&self, x: f64) -> i32 {
        quantize_with(x, self.step, self.max_symbol())
    }

    pub fn dequantize_residual(&self, s: i32) -> f64 {
        f64::from(s) * self.step
    }
}

fn quantize_with(x: f64, step: f64, max: i32) -> i32 {
    let r = (x / step).round();
    if r.is_nan() {
        0
    } else {
        r.clamp(-f64::from(max), f64::from(max)) as i32
    }
}

/// Quantizer settings for every feature group of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSpec {
    pub mean: GroupSpec,
    /// Applied per axis-angle component, in radians.
    pub rotation: GroupSpec,
    pub log_scale: GroupSpec,
    pub opacity: GroupSpec,
    pub sh_dc: GroupSpec,
    /// Bit width for SH bands >= 1; the step is chosen per chunk.
    pub sh_rest_bits: u8,
}

/// Bit width of absolute values in intra chunks.
pub const INTRA_BITS: u8 = 24;

impl QuantSpec {
    /// The same steps on a grid wide enough for absolute values.
    pub fn intra(&self) -> Self {
        let widen = |g: GroupSpec| GroupSpec {
            bits: g.bits.max(INTRA_BITS),
            ..g
        };
        Self {
            mean: widen(self.mean),
            rotation: widen(self.rotation),
            log_scale: widen(self.log_scale),
            opacity: widen(self.opacity),
            sh_dc: widen(self.sh_dc),
            sh_rest_bits: self.sh_rest_bits,
        }
    }
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self {
            mean: GroupSpec::new(16, 0.0002),
            rotation: GroupSpec::new(16, 0.0002),
            log_scale: GroupSpec::new(16, 0.0002),
            opacity: GroupSpec::new(16, 0.0002),
            sh_dc: GroupSpec::new(10, 0.001),
            sh_rest_bits: 6,
        }
    }
}

impl QuantSpec {
    pub fn validate(&self) -> Result<()> {
        for g in [self.mean, self.rotation, self.log_scale, self.opacity, self.sh_dc] {
            g.validate()?;
        }
        GroupSpec::new(self.sh_rest_bits, 1.0).validate()
    }
}

/// Quantizer whose step is fitted to the largest magnitude in a block of
/// values, so the whole block is representable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledQuant {
    pub bits: u8,
    pub step: f64,
}

impl ScaledQuant {
    /// Step `max|x| / (2^(bits-1) - 1)`, rounded to the nearest f32 so that
    /// refitting on the dequantized values gives the same step.
    pub fn fit(bits: u8, values: impl IntoIterator<Item = f64>) -> Self {
        let max_abs = values.into_iter().fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { m });
        let max_symbol = (1i32 << (bits - 1)) - 1;
        Self {
            bits,
            step: f64::from((max_abs / f64::from(max_symbol)) as f32),
        }
    }

    pub fn quantize(&self, x: f64) -> i32 {
        if self.step == 0.0 {
            return 0;
        }
        quantize_with(x, self.step, (1i32 << (self.bits - 1)) - 1)
    }

    pub fn dequantize(&self, s: i32) -> f64 {
        f64::from(s) * self.step
    }
}
