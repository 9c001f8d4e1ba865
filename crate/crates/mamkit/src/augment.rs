//! Lossy-operation augmentation: probabilistic motion blur followed by a
//! PNG-or-JPEG encode/decode round trip.
//!
//! Every random choice comes from the caller's [`RngStream`] in a fixed draw
//! order and is written into a [`SampleRecord`], so a record fully replays
//! the transformation. The draw order is: blur coin, kernel size, angle,
//! format coin, JPEG quality.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::codecs::png::PngEncoder;
use image::{ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("kernel size {0} outside 3..=7")]
    KernelSize(usize),
    #[error("codec failure: {0}")]
    Codec(#[from] image::ImageError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AugmentConfig {
    pub blur_prob: f64,
    pub kernel_min: usize,
    pub kernel_max: usize,
    pub jpeg_prob: f64,
    pub quality_min: u8,
    pub quality_max: u8,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            blur_prob: 0.5,
            kernel_min: 3,
            kernel_max: 7,
            jpeg_prob: 0.5,
            quality_min: 80,
            quality_max: 95,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct BlurRecord {
    pub kernel: usize,
    pub angle_deg: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    Png,
    Jpeg,
}

/// Replayable record of every sampled choice for one image.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleRecord {
    pub blur: Option<BlurRecord>,
    pub codec: Codec,
    pub quality: Option<u8>,
}

/// Normalized line kernel of `size` taps at `angle_deg`, bilinearly splatted
/// onto a `size` x `size` grid.
pub fn line_kernel(size: usize, angle_deg: f64) -> Result<Vec<f64>, AugmentError> {
    if !(3..=7).contains(&size) {
        return Err(AugmentError::KernelSize(size));
    }
    let k = size;
    let mut kernel = vec![0.0f64; k * k];
    let (dy, dx) = (angle_deg.to_radians().sin(), angle_deg.to_radians().cos());
    let c = (k - 1) as f64 / 2.0;
    let w = 1.0 / k as f64;
    for t in 0..k {
        let off = t as f64 - c;
        let (y, x) = (c + off * dy, c + off * dx);
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        for (ddy, ddx, wt) in [
            (0, 0, (1.0 - fy) * (1.0 - fx)),
            (0, 1, (1.0 - fy) * fx),
            (1, 0, fy * (1.0 - fx)),
            (1, 1, fy * fx),
        ] {
            if wt == 0.0 {
                continue;
            }
            let yy = (y0 as isize + ddy).clamp(0, k as isize - 1) as usize;
            let xx = (x0 as isize + ddx).clamp(0, k as isize - 1) as usize;
            kernel[yy * k + xx] += w * wt;
        }
    }
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= total);
    Ok(kernel)
}

/// Convolve with the line kernel; clamp-edge padding, rounded and clamped to
/// the 8-bit range.
pub fn motion_blur(
    image: &RgbImage,
    kernel_size: usize,
    angle_deg: f64,
) -> Result<RgbImage, AugmentError> {
    let kernel = line_kernel(kernel_size, angle_deg)?;
    let k = kernel_size as isize;
    let half = (k - 1) / 2;
    let (w, h) = (image.width() as isize, image.height() as isize);
    let mut out = RgbImage::new(image.width(), image.height());
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for ky in 0..k {
                for kx in 0..k {
                    let wt = kernel[(ky * k + kx) as usize];
                    if wt == 0.0 {
                        continue;
                    }
                    let sy = (y + ky - half).clamp(0, h - 1) as u32;
                    let sx = (x + kx - half).clamp(0, w - 1) as u32;
                    let p = image.get_pixel(sx, sy);
                    for c in 0..3 {
                        acc[c] += wt * p.0[c] as f64;
                    }
                }
            }
            let px = out.get_pixel_mut(x as u32, y as u32);
            for c in 0..3 {
                px.0[c] = acc[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

fn encode(image: &RgbImage, codec: Codec, quality: Option<u8>) -> Result<Vec<u8>, AugmentError> {
    let mut buf = Vec::new();
    match codec {
        Codec::Png => PngEncoder::new(&mut buf).write_image(
            image.as_raw(),
            image.width(),
            image.height(),
            image::ExtendedColorType::Rgb8,
        )?,
        Codec::Jpeg => {
            let q = quality.expect("jpeg quality required");
            JpegEncoder::new_with_quality(&mut buf, q).write_image(
                image.as_raw(),
                image.width(),
                image.height(),
                image::ExtendedColorType::Rgb8,
            )?
        }
    }
    Ok(buf)
}

fn decode(bytes: &[u8]) -> Result<RgbImage, AugmentError> {
    Ok(image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .expect("cursor io cannot fail")
        .decode()?
        .to_rgb8())
}

/// Apply a freshly sampled transformation.
pub fn lossy_roundtrip(
    image: &RgbImage,
    rng: &mut RngStream,
    cfg: &AugmentConfig,
) -> Result<(RgbImage, SampleRecord), AugmentError> {
    let blur = if rng.next_bool(cfg.blur_prob) {
        Some(BlurRecord {
            kernel: rng.next_range(cfg.kernel_min as u64, cfg.kernel_max as u64) as usize,
            angle_deg: rng.next_f64() * 180.0,
        })
    } else {
        None
    };
    let codec = if rng.next_bool(cfg.jpeg_prob) {
        Codec::Jpeg
    } else {
        Codec::Png
    };
    let quality = match codec {
        Codec::Jpeg => {
            Some(rng.next_range(cfg.quality_min as u64, cfg.quality_max as u64) as u8)
        }
        Codec::Png => None,
    };
    let record = SampleRecord {
        blur,
        codec,
        quality,
    };
    Ok((replay(image, &record)?, record))
}

/// Re-apply a recorded transformation.
pub fn replay(image: &RgbImage, record: &SampleRecord) -> Result<RgbImage, AugmentError> {
    let blurred = match record.blur {
        Some(b) => motion_blur(image, b.kernel, b.angle_deg)?,
        None => image.clone(),
    };
    let bytes = encode(&blurred, record.codec, record.quality)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(seed: u64, w: u32, h: u32) -> RgbImage {
        let mut rng = RngStream::new(seed, "noise");
        RgbImage::from_fn(w, h, |_, _| {
            image::Rgb([
                rng.next_below(256) as u8,
                rng.next_below(256) as u8,
                rng.next_below(256) as u8,
            ])
        })
    }

    #[test]
    fn kernel_sums_to_one_over_sizes_and_angles() {
        for size in 3..=7 {
            for a in 0..18 {
                let k = line_kernel(size, a as f64 * 10.0).unwrap();
                let s: f64 = k.iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "size {size} angle {a}0");
            }
        }
    }

    #[test]
    fn kernel_size_out_of_range_is_rejected() {
        assert!(line_kernel(2, 0.0).is_err());
        assert!(line_kernel(8, 0.0).is_err());
    }

    #[test]
    fn constant_image_is_unchanged() {
        let img = RgbImage::from_pixel(9, 9, image::Rgb([120, 64, 200]));
        for angle in [0.0, 37.0, 90.0, 145.0] {
            let out = motion_blur(&img, 5, angle).unwrap();
            assert_eq!(out.as_raw(), img.as_raw());
        }
    }

    #[test]
    fn horizontal_impulse_spreads_to_three_thirds() {
        let mut img = RgbImage::new(7, 7);
        img.get_pixel_mut(3, 3).0 = [255, 255, 255];
        let out = motion_blur(&img, 3, 0.0).unwrap();
        let third = (255.0f64 / 3.0).round() as u8;
        for x in 2..=4 {
            assert_eq!(out.get_pixel(x, 3).0[0], third, "x {x}");
        }
        assert_eq!(out.get_pixel(3, 2).0[0], 0);
        assert_eq!(out.get_pixel(3, 4).0[0], 0);
    }

    #[test]
    fn same_seed_gives_identical_output_and_record() {
        let img = noise_image(51, 24, 24);
        let cfg = AugmentConfig::default();
        let run = || {
            let mut rng = RngStream::new(51, "aug");
            lossy_roundtrip(&img, &mut rng, &cfg).unwrap()
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(ra, rb);
        assert_eq!(a.as_raw(), b.as_raw());
    }

    #[test]
    fn record_replays_exactly() {
        let img = noise_image(52, 24, 24);
        let cfg = AugmentConfig::default();
        let mut rng = RngStream::new(52, "aug");
        for _ in 0..8 {
            let (out, rec) = lossy_roundtrip(&img, &mut rng, &cfg).unwrap();
            let again = replay(&img, &rec).unwrap();
            assert_eq!(out.as_raw(), again.as_raw());
        }
    }

    #[test]
    fn png_without_blur_is_lossless() {
        let img = noise_image(53, 24, 24);
        let rec = SampleRecord {
            blur: None,
            codec: Codec::Png,
            quality: None,
        };
        let out = replay(&img, &rec).unwrap();
        assert_eq!(out.as_raw(), img.as_raw());
    }

    #[test]
    fn jpeg_is_lossier_than_png_on_noise() {
        use crate::labels::Psnr;
        let img = noise_image(54, 32, 32);
        let png = replay(
            &img,
            &SampleRecord {
                blur: None,
                codec: Codec::Png,
                quality: None,
            },
        )
        .unwrap();
        let jpg = replay(
            &img,
            &SampleRecord {
                blur: None,
                codec: Codec::Jpeg,
                quality: Some(80),
            },
        )
        .unwrap();
        let p_png = crate::labels::psnr(img.as_raw(), png.as_raw()).unwrap();
        let p_jpg = crate::labels::psnr(img.as_raw(), jpg.as_raw()).unwrap();
        assert_eq!(p_png, Psnr::Infinite);
        match p_jpg {
            Psnr::Decibels(db) => assert!(db < 50.0, "jpeg psnr {db}"),
            Psnr::Infinite => panic!("jpeg round trip cannot be lossless on noise"),
        }
    }

    #[test]
    fn sampled_choices_match_statistics() {
        let cfg = AugmentConfig::default();
        let mut rng = RngStream::new(55, "stats");
        let mut blurred = 0usize;
        let mut hist = [0usize; 16];
        let n = 10_000;
        for _ in 0..n {
            // draw the record only; no need to run the codecs here
            if rng.next_bool(cfg.blur_prob) {
                blurred += 1;
                let _k = rng.next_range(3, 7);
                let _a = rng.next_f64();
            }
            if rng.next_bool(cfg.jpeg_prob) {
                let q = rng.next_range(80, 95);
                hist[(q - 80) as usize] += 1;
            }
        }
        // blur frequency within 0.5 +- 3 sigma, sigma = sqrt(0.25/n)
        let freq = blurred as f64 / n as f64;
        assert!((freq - 0.5).abs() < 3.0 * (0.25f64 / n as f64).sqrt());
        // chi-square over 16 quality bins, df=15, p=0.01 critical 30.58
        let total: usize = hist.iter().sum();
        let expect = total as f64 / 16.0;
        let chi2: f64 = hist
            .iter()
            .map(|&o| (o as f64 - expect).powi(2) / expect)
            .sum();
        assert!(chi2 < 30.58, "chi2 {chi2}");
    }
}
