//! Masks (PGM or PNG, 8 or 16 bit grayscale) and color images (PPM or PNG,
//! sRGB encoded, decoded to linear RGB).

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{EgsError, Result};
use crate::raster::{Mask, RgbImage};

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(EgsError::InvalidInput(format!("{}: no such file", path.display())));
    }
    image::open(path).map_err(|e| EgsError::Format(format!("{}: {e}", path.display())))
}

pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(c: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

/// Reads a single-channel mask; 16-bit input keeps its high byte.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| (v >> 8) as u8).collect(),
        other => {
            return Err(EgsError::Format(format!("{}: mask must be grayscale, found {:?}", path.display(), other.color())));
        }
    };
    Ok(Mask { width: w, height: h, data })
}

pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(mask.width as u32, mask.height as u32, mask.data.clone())
        .ok_or_else(|| EgsError::InvalidParameter("mask buffer does not match its size".into()))?;
    buf.save(path).map_err(|e| EgsError::Format(format!("{}: {e}", path.display())))
}

/// Reads an RGB image and converts sRGB to linear values in [0, 1].
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageRgb8(b) => b.pixels().map(|p| p.0.map(|c| srgb_to_linear(f64::from(c) / 255.0))).collect(),
        DynamicImage::ImageRgb16(b) => b.pixels().map(|p| p.0.map(|c| srgb_to_linear(f64::from(c) / 65535.0))).collect(),
        other => {
            return Err(EgsError::Format(format!("{}: image must be 8 or 16 bit RGB, found {:?}", path.display(), other.color())));
        }
    };
    RgbImage::from_data(w, h, data)
}

/// Writes a linear image as 16-bit sRGB; values are clamped to [0, 1].
pub fn write_image(img: &RgbImage, path: &Path) -> Result<()> {
    let raw: Vec<u16> = img
        .data
        .iter()
        .flat_map(|px| px.map(|c| (linear_to_srgb(c) * 65535.0).round() as u16))
        .collect();
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| EgsError::InvalidParameter("image buffer does not match its size".into()))?;
    buf.save(path).map_err(|e| EgsError::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfer_functions_invert() {
        for k in 0..=100 {
            let c = k as f64 / 100.0;
            assert!((srgb_to_linear(linear_to_srgb(c)) - c).abs() < 1e-12);
        }
        assert_eq!(srgb_to_linear(1.0), 1.0);
        assert!((srgb_to_linear(0.5) - 0.214_041_140_482_232_5).abs() < 1e-12);
    }

    #[test]
    fn full_mask_is_all_foreground() {
        let dir = tempfile::tempdir().unwrap();
        for ext in ["pgm", "png"] {
            let p = dir.path().join(format!("m.{ext}"));
            write_mask(&Mask::full(4, 3), &p).unwrap();
            let m = read_mask(&p).unwrap();
            assert_eq!(m.foreground_count(), 12);
        }
    }

    #[test]
    fn image_round_trip_within_sixteen_bit_precision() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(3, 2);
        img.set(0, 0, [0.0, 0.5, 1.0]);
        img.set(2, 1, [0.001, 0.2, 0.9]);
        for ext in ["png", "ppm"] {
            let p = dir.path().join(format!("i.{ext}"));
            write_image(&img, &p).unwrap();
            let back = read_image(&p).unwrap();
            for (a, b) in img.data.iter().flatten().zip(back.data.iter().flatten()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn color_mask_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        write_image(&RgbImage::new(2, 2), &p).unwrap();
        assert!(matches!(read_mask(&p), Err(EgsError::Format(_))));
        assert!(matches!(read_mask(&dir.path().join("none.png")), Err(EgsError::InvalidInput(_))));
    }
}
