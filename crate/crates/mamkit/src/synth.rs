//! Procedural four-factor face task: a desk-scale stand-in corpus whose four
//! generative factors mirror the four retouching operations.
//!
//! Each image is an ellipse head with two disc eyes over blemished, textured
//! skin. Levels map to strictly monotone factor magnitudes: Smooth fades the
//! freckles and the texture out, EyeEnlarge scales the eye radius, FaceLift
//! narrows the head, Whiten brightens the skin. Rendering is deterministic
//! given (seed, id, annotation); texture and freckle placement depend only
//! on (seed, id) so Smooth levels of the same face fade the same features.

use std::fs;
use std::io::Write as IoWrite;
use std::path::Path;

use anyhow::{Context, Result};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::labels::{
    subset_combinations, Annotation, Level, ManifestRecord, RetouchType, SourceApi, Split,
};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub canvas: (u32, u32),
    /// Eye radius multiplier per EyeEnlarge level.
    pub eye_scale: [f64; 4],
    /// Face width multiplier per FaceLift level.
    pub face_scale: [f64; 4],
    /// Additive skin brightness (of 255) per Whiten level.
    pub whiten_offset: [f64; 4],
    /// Fraction of the skin texture removed per Smooth level (1 = flat skin).
    pub smooth_strength: [f64; 4],
    /// Deviation of the skin texture, in 8-bit counts.
    pub noise_std: f64,
    /// Correlation radius of the skin texture.
    pub noise_scale: f64,
    /// Blemish spots on the unretouched skin; Smooth fades their count.
    /// Spot features survive lossy augmentation where plain texture
    /// variance does not.
    pub freckle_count: usize,
    pub freckle_radius: f64,
    /// Peak darkening of a freckle center, in 8-bit counts.
    pub freckle_depth: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            canvas: (64, 64),
            eye_scale: [1.0, 1.4, 1.8, 2.2],
            face_scale: [1.0, 0.88, 0.76, 0.64],
            whiten_offset: [0.0, 22.0, 44.0, 66.0],
            smooth_strength: [0.0, 0.5, 0.85, 1.0],
            noise_std: 20.0,
            noise_scale: 1.0,
            freckle_count: 40,
            freckle_radius: 2.0,
            freckle_depth: 70.0,
        }
    }
}

const SKIN: [f64; 3] = [180.0, 150.0, 128.0];
const EYE: [f64; 3] = [24.0, 24.0, 32.0];
const BACKGROUND: [f64; 3] = [38.0, 38.0, 44.0];

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Separable Gaussian blur of a scalar field; radius 0 is the identity.
fn gaussian_blur(field: &[f64], w: usize, h: usize, radius: f64) -> Vec<f64> {
    if radius <= 0.0 {
        return field.to_vec();
    }
    let half = (3.0 * radius).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half)
        .map(|i| (-0.5 * (i as f64 / radius).powi(2)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / norm).collect();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let sx = (x + i as isize - half).clamp(0, w as isize - 1);
                acc += kv * field[y as usize * w + sx as usize];
            }
            tmp[y as usize * w + x as usize] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let sy = (y + i as isize - half).clamp(0, h as isize - 1);
                acc += kv * tmp[sy as usize * w + x as usize];
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// Render one face. All randomness comes from (seed, id); the annotation
/// only selects factor magnitudes.
pub fn render(spec: &SyntheticSpec, seed: u64, id: u32, ann: &Annotation) -> RgbImage {
    let (w, h) = (spec.canvas.0 as usize, spec.canvas.1 as usize);
    let classes = ann.classes();
    let eye_r = 0.045 * w as f64 * spec.eye_scale[classes[RetouchType::EyeEnlarge.index()] as usize];
    let face_a = 0.30 * w as f64 * spec.face_scale[classes[RetouchType::FaceLift.index()] as usize];
    let face_b = 0.40 * h as f64;
    let whiten = spec.whiten_offset[classes[RetouchType::Whiten.index()] as usize];
    let keep = 1.0 - spec.smooth_strength[classes[RetouchType::Smooth.index()] as usize];

    let mut rng = RngStream::new(seed, &format!("synth/noise/{id}"));
    let raw_noise: Vec<f64> = (0..w * h).map(|_| rng.next_gaussian()).collect();
    let bumps = gaussian_blur(&raw_noise, w, h, spec.noise_scale);
    // renormalize so the correlated texture has deviation noise_std at level 0
    let var = bumps.iter().map(|v| v * v).sum::<f64>() / bumps.len() as f64;
    let gain = keep * spec.noise_std / var.sqrt().max(1e-9);
    let noise: Vec<f64> = bumps.iter().map(|v| gain * v).collect();

    let (cx, cy) = (w as f64 / 2.0, h as f64 * 0.52);

    // Freckle positions depend only on (seed, id), in face-normalized
    // coordinates so they ride along with FaceLift; each Smooth level keeps
    // a prefix of the same list, so levels are nested and strictly monotone.
    let kept = (keep * spec.freckle_count as f64).round() as usize;
    let mut freckles = Vec::with_capacity(spec.freckle_count);
    let mut frng = RngStream::new(seed, &format!("synth/freckles/{id}"));
    while freckles.len() < spec.freckle_count {
        let u = 2.0 * frng.next_f64() - 1.0;
        // lower face only: clear of the eye band at every eye scale
        let v = 0.10 + 0.65 * frng.next_f64();
        if u * u + v * v <= 0.8 * 0.8 {
            freckles.push((u, v));
        }
    }
    let splat = |field: &mut [f64], u: f64, v: f64| {
        let (fx, fy) = (cx + u * face_a, cy + v * face_b);
        let r = spec.freckle_radius;
        let lo_y = ((fy - r - 2.0).floor().max(0.0)) as usize;
        let hi_y = ((fy + r + 2.0).ceil().min(h as f64 - 1.0)) as usize;
        let lo_x = ((fx - r - 2.0).floor().max(0.0)) as usize;
        let hi_x = ((fx + r + 2.0).ceil().min(w as f64 - 1.0)) as usize;
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let d = ((x as f64 + 0.5 - fx).powi(2) + (y as f64 + 0.5 - fy).powi(2)).sqrt() - r;
                let a = 1.0 - smoothstep(-0.75, 0.75, d);
                let cell = &mut field[y * w + x];
                *cell = f64::max(*cell, a * spec.freckle_depth);
            }
        }
    };
    let mut freckle_field = vec![0.0; w * h];
    let mut full_field = vec![0.0; w * h];
    for (i, &(u, v)) in freckles.iter().enumerate() {
        if i < kept {
            splat(&mut freckle_field, u, v);
        }
        splat(&mut full_field, u, v);
    }
    // Spread the removed freckle mass uniformly over the face so Smooth
    // leaves the mean skin brightness unchanged and cannot mimic Whiten.
    let removed: f64 =
        full_field.iter().sum::<f64>() - freckle_field.iter().sum::<f64>();
    let comp = removed / (std::f64::consts::PI * face_a * face_b);
    let eye_dx = 0.40 * face_a;
    let eye_y = cy - 0.12 * h as f64;
    let band = 1.5;

    let mut img = RgbImage::new(spec.canvas.0, spec.canvas.1);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            // implicit ellipse, scaled to approximate pixel distance
            let e = ((fx - cx) / face_a).powi(2) + ((fy - cy) / face_b).powi(2);
            let d_face = (e.sqrt() - 1.0) * face_a.min(face_b);
            let face_alpha = 1.0 - smoothstep(-band / 2.0, band / 2.0, d_face);
            let d_left = ((fx - (cx - eye_dx)).powi(2) + (fy - eye_y).powi(2)).sqrt() - eye_r;
            let d_right = ((fx - (cx + eye_dx)).powi(2) + (fy - eye_y).powi(2)).sqrt() - eye_r;
            let eye_alpha = (1.0 - smoothstep(-band / 2.0, band / 2.0, d_left))
                .max(1.0 - smoothstep(-band / 2.0, band / 2.0, d_right));
            let n = noise[y * w + x] - freckle_field[y * w + x] - comp;
            let px = img.get_pixel_mut(x as u32, y as u32);
            for c in 0..3 {
                let skin = SKIN[c] + whiten + n;
                let v = BACKGROUND[c] * (1.0 - face_alpha) + skin * face_alpha;
                let v = v * (1.0 - eye_alpha) + EYE[c] * eye_alpha;
                px.0[c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    img
}

/// Annotation draw per the corpus mix: subset kind uniform over {0..4}, the
/// operated-type combination uniform within the kind, positive levels
/// uniform over {1, 2, 3}.
pub fn draw_annotation(seed: u64, id: u32) -> Annotation {
    let mut rng = RngStream::new(seed, &format!("synth/ann/{id}"));
    let kind = rng.next_below(5) as u8;
    if kind == 0 {
        return Annotation::all_off();
    }
    let combos = subset_combinations(kind).expect("kind in range");
    let combo = &combos[rng.next_below(combos.len() as u64) as usize];
    let mut ann = Annotation::all_off();
    for &t in combo {
        let level = Level::from_class(1 + rng.next_below(3) as u8).unwrap();
        ann.set_level(t, level);
    }
    ann
}

fn draw_api(seed: u64, id: u32, kind: u8) -> SourceApi {
    if kind == 0 {
        return SourceApi::None;
    }
    let mut rng = RngStream::new(seed, &format!("synth/api/{id}"));
    if kind == 1 {
        [SourceApi::Megvii, SourceApi::Tencent, SourceApi::Alibaba][rng.next_below(3) as usize]
    } else {
        // multi-operated images exist only for Megvii and Tencent
        [SourceApi::Megvii, SourceApi::Tencent][rng.next_below(2) as usize]
    }
}

/// Generate a corpus under `dir`: `images/#####.png` plus `manifest.jsonl`.
/// Splits are assigned by a seeded shuffle of the id range with the exact
/// requested counts.
pub fn generate(
    dir: &Path,
    seed: u64,
    spec: &SyntheticSpec,
    counts: (usize, usize, usize),
) -> Result<Vec<ManifestRecord>> {
    let (n_train, n_val, n_test) = counts;
    let n = n_train + n_val + n_test;
    anyhow::ensure!(n > 0, "empty corpus requested");
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).with_context(|| format!("create {}", img_dir.display()))?;

    let mut ids: Vec<u32> = (0..n as u32).collect();
    RngStream::new(seed, "synth/split").shuffle(&mut ids);
    let split_of = |pos: usize| {
        if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    };
    let mut split_by_id = vec![Split::Train; n];
    for (pos, &id) in ids.iter().enumerate() {
        split_by_id[id as usize] = split_of(pos);
    }

    let mut records = Vec::with_capacity(n);
    for id in 0..n as u32 {
        let ann = draw_annotation(seed, id);
        let classes = ann.classes();
        let img = render(spec, seed, id, &ann);
        let rel = format!("images/{id:05}.png");
        img.save(dir.join(&rel))
            .with_context(|| format!("write {rel}"))?;
        records.push(ManifestRecord {
            id,
            api: draw_api(seed, id, ann.subset_kind()),
            kind: ann.subset_kind(),
            smooth: classes[0],
            eye_enlarge: classes[1],
            face_lift: classes[2],
            whiten: classes[3],
            path: rel,
            split: split_by_id[id as usize],
            exclusions: Vec::new(),
            version: 0,
        });
    }

    let mut out = fs::File::create(dir.join("manifest.jsonl"))?;
    for r in &records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(records)
}

/// `[3, H, W]` tensor in [-1, 1] from an 8-bit image.
pub fn image_to_tensor(image: &RgbImage) -> Tensor {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = image.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[c * h * w + y * w + x] = p.0[c] as f64 / 127.5 - 1.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}
