//! Fundus-like synthetic images with a controllable cataract signal
//! (global blur plus a central whitening veil), written in ODIR layout.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DualEyeSample, Label, LabeledSample};
use crate::error::{Error, Result};
use crate::preprocess::PlanarImage;

pub const METADATA_FILE: &str = "metadata.csv";
pub const IMAGE_DIR: &str = "images";
/// Keyword given to the spare eye when the image count is odd.
pub const FILLER_KEYWORD: &str = "drusen";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub image_size: usize,
    pub n_normal: usize,
    pub n_cataract: usize,
    pub cataract_blur_sigma: f32,
    pub opacity_strength: f32,
    pub vessel_count_range: (usize, usize),
    pub seed: u64,
    pub jpeg_quality: u8,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 224,
            n_normal: 100,
            n_cataract: 100,
            cataract_blur_sigma: 3.0,
            opacity_strength: 0.6,
            vessel_count_range: (6, 12),
            seed: 0,
            jpeg_quality: 95,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.image_size < 32 {
            return bad(format!("image_size {} is below 32", self.image_size));
        }
        if !(self.cataract_blur_sigma > 0.0) {
            return bad(format!("cataract_blur_sigma {} must be positive", self.cataract_blur_sigma));
        }
        if !(0.0..=1.0).contains(&self.opacity_strength) {
            return bad(format!("opacity_strength {} outside [0, 1]", self.opacity_strength));
        }
        let (lo, hi) = self.vessel_count_range;
        if lo > hi {
            return bad(format!("vessel_count_range ({lo}, {hi}) is reversed"));
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            return bad(format!("jpeg_quality {} outside 1..=100", self.jpeg_quality));
        }
        Ok(())
    }
}

/// Per-image stream derived from `(seed, index, label)`.
fn image_rng(seed: u64, index: usize, label: Label) -> ChaCha8Rng {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((label as u64 + 1) << 56);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

struct Canvas {
    size: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, rgb: [f32; 3], a: f32) {
        let plane = self.size * self.size;
        let i = y * self.size + x;
        for (c, v) in rgb.iter().enumerate() {
            let p = &mut self.data[c * plane + i];
            *p = *p * (1.0 - a) + v * a;
        }
    }

    /// Soft-edged segment of width `w`.
    fn segment(&mut self, a: (f32, f32), b: (f32, f32), w: f32, rgb: [f32; 3], alpha: f32, mask: &[bool]) {
        let pad = w + 1.0;
        let (x0, x1) = (a.0.min(b.0) - pad, a.0.max(b.0) + pad);
        let (y0, y1) = (a.1.min(b.1) - pad, a.1.max(b.1) + pad);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dx * dx + dy * dy).max(1e-6);
        let n = self.size as f32;
        for y in (y0.max(0.0) as usize)..=(y1.min(n - 1.0) as usize) {
            for x in (x0.max(0.0) as usize)..=(x1.min(n - 1.0) as usize) {
                if !mask[y * self.size + x] {
                    continue;
                }
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
                let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
                let d = (qx * qx + qy * qy).sqrt();
                let cover = (w * 0.5 + 0.5 - d).clamp(0.0, 1.0);
                if cover > 0.0 {
                    self.blend(x, y, rgb, alpha * cover);
                }
            }
        }
    }
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &PlanarImage, sigma: f32) -> PlanarImage {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (w, h) = (img.width as isize, img.height as isize);
    let plane = img.width * img.height;
    let mut tmp = vec![0.0f32; img.data.len()];
    let mut out = vec![0.0f32; img.data.len()];
    for c in 0..3 {
        let src = &img.data[c * plane..][..plane];
        let t = &mut tmp[c * plane..][..plane];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += kv * src[(y * w + xx) as usize];
                }
                t[(y * w + x) as usize] = acc;
            }
        }
        let o = &mut out[c * plane..][..plane];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += kv * t[(yy * w + x) as usize];
                }
                o[(y * w + x) as usize] = acc;
            }
        }
    }
    PlanarImage {
        width: img.width,
        height: img.height,
        data: out,
    }
}

/// Deterministic fundus-like image for `(spec.seed, index, label)`.
pub fn generate_image(label: Label, spec: &SynthSpec, index: usize) -> PlanarImage {
    let mut rng = image_rng(spec.seed, index, label);
    let n = spec.image_size;
    let nf = n as f32;
    let mut cv = Canvas {
        size: n,
        data: vec![0.0; 3 * n * n],
    };
    let cx = nf * 0.5 + rng.random_range(-0.02..0.02) * nf;
    let cy = nf * 0.5 + rng.random_range(-0.02..0.02) * nf;
    let radius = nf * rng.random_range(0.42..0.47);
    let tone: f32 = rng.random_range(0.85..1.1);
    let base = [0.62 * tone, 0.26 * tone, 0.12 * tone];
    let mut inside = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let r = (dx * dx + dy * dy).sqrt() / radius;
            if r <= 1.0 {
                inside[y * n + x] = true;
                // darker towards the rim
                let shade = 1.0 - 0.45 * r * r;
                let edge = ((1.0 - r) * radius).clamp(0.0, 1.0);
                cv.blend(x, y, [base[0] * shade, base[1] * shade, base[2] * shade], edge);
            }
        }
    }
    // optic disc to one side of the centre
    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let ox = cx + side * radius * rng.random_range(0.45..0.6);
    let oy = cy + rng.random_range(-0.1..0.1) * radius;
    let (ra, rb) = (radius * rng.random_range(0.11..0.14), radius * rng.random_range(0.13..0.17));
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = ((x as f32 + 0.5 - ox) / ra, (y as f32 + 0.5 - oy) / rb);
            let d = (dx * dx + dy * dy).sqrt();
            if d < 1.3 && inside[y * n + x] {
                let a = (1.3 - d).clamp(0.0, 0.3) / 0.3;
                cv.blend(x, y, [0.97, 0.87, 0.62], a * 0.95);
            }
        }
    }
    // vessels radiating from the optic disc
    let (vlo, vhi) = spec.vessel_count_range;
    let vessels = rng.random_range(vlo..=vhi);
    for _ in 0..vessels {
        let mut p = (ox, oy);
        let mut ang: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let mut width: f32 = rng.random_range(1.6..3.2);
        let step = radius * 0.12;
        for _ in 0..rng.random_range(6..11) {
            ang += rng.random_range(-0.45..0.45);
            let q = (p.0 + ang.cos() * step, p.1 + ang.sin() * step);
            cv.segment(p, q, width, [0.28, 0.04, 0.03], 0.85, &inside);
            p = q;
            width = (width * 0.88).max(0.8);
        }
    }
    let noise = Normal::new(0.0f32, 0.012).expect("valid std");
    let plane = n * n;
    for c in 0..3 {
        for i in 0..plane {
            if inside[i] {
                let v = &mut cv.data[c * plane + i];
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    let mut img = PlanarImage {
        width: n,
        height: n,
        data: cv.data,
    };
    if label == Label::Cataract {
        img = gaussian_blur(&img, spec.cataract_blur_sigma);
        let veil_sigma = radius * 0.55;
        let strength = spec.opacity_strength * rng.random_range(0.85..1.0);
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let a = strength * (-(dx * dx + dy * dy) / (2.0 * veil_sigma * veil_sigma)).exp();
                for (c, w) in [0.93f32, 0.92, 0.88].iter().enumerate() {
                    let p = &mut img.data[c * plane + y * n + x];
                    *p = (*p * (1.0 - a) + w * a).clamp(0.0, 1.0);
                }
            }
        }
    }
    img
}

/// Variance of the 4-neighbour Laplacian of the luma channel.
pub fn laplacian_variance(img: &PlanarImage) -> f64 {
    let (w, h) = (img.width, img.height);
    let plane = w * h;
    let luma: Vec<f64> = (0..plane)
        .map(|i| (0.299 * img.data[i] + 0.587 * img.data[plane + i] + 0.114 * img.data[2 * plane + i]) as f64)
        .collect();
    let mut vals = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            vals.push(luma[i - 1] + luma[i + 1] + luma[i - w] + luma[i + w] - 4.0 * luma[i]);
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
}

/// Mean luma over the central square covering `frac` of each side.
pub fn center_brightness(img: &PlanarImage, frac: f32) -> f64 {
    let (w, h) = (img.width, img.height);
    let plane = w * h;
    let (pw, ph) = (((w as f32 * frac) as usize).max(1), ((h as f32 * frac) as usize).max(1));
    let (x0, y0) = ((w - pw) / 2, (h - ph) / 2);
    let mut s = 0.0f64;
    for y in y0..y0 + ph {
        for x in x0..x0 + pw {
            let i = y * w + x;
            s += (0.299 * img.data[i] + 0.587 * img.data[plane + i] + 0.114 * img.data[2 * plane + i]) as f64;
        }
    }
    s / (pw * ph) as f64
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub single: Vec<LabeledSample>,
    pub pairs: Vec<DualEyeSample>,
    pub metadata_csv: PathBuf,
    /// Image root the sample paths are relative to.
    pub image_root: PathBuf,
}

/// Eye label slots per patient: the four label combinations first (as far
/// as counts allow), then the remaining eyes in seeded random order.
/// `None` marks the spare non-target eye of an odd total.
pub fn pair_layout(n_normal: usize, n_cataract: usize, seed: u64) -> Vec<(Option<Label>, Option<Label>)> {
    let (mut nn, mut nc) = (n_normal, n_cataract);
    let mut rows = Vec::new();
    for (l, r) in [
        (Label::Normal, Label::Normal),
        (Label::Normal, Label::Cataract),
        (Label::Cataract, Label::Normal),
        (Label::Cataract, Label::Cataract),
    ] {
        let need_n = (l == Label::Normal) as usize + (r == Label::Normal) as usize;
        let need_c = 2 - need_n;
        if nn >= need_n && nc >= need_c {
            nn -= need_n;
            nc -= need_c;
            rows.push((Some(l), Some(r)));
        }
    }
    let mut rest: Vec<Option<Label>> = std::iter::repeat_n(Some(Label::Normal), nn)
        .chain(std::iter::repeat_n(Some(Label::Cataract), nc))
        .collect();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5A1F));
    if rest.len() % 2 == 1 {
        rest.push(None);
    }
    rows.extend(rest.chunks(2).map(|c| (c[0], c[1])));
    rows
}

fn write_jpeg(img: &PlanarImage, path: &Path, quality: u8) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut w, quality);
    img.to_rgb8().write_with_encoder(enc).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes images under `out_dir/images` and an ODIR-layout `metadata.csv`.
pub fn generate_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<SynthDataset> {
    spec.validate()?;
    if spec.n_normal + spec.n_cataract == 0 {
        return Err(Error::Input("synthetic dataset needs at least one image".into()));
    }
    let image_dir = out_dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let rows = pair_layout(spec.n_normal, spec.n_cataract, spec.seed);
    let mut jobs = Vec::new();
    for (r, &(l, rr)) in rows.iter().enumerate() {
        jobs.push((2 * r, format!("{}_left.jpg", r + 1), l));
        jobs.push((2 * r + 1, format!("{}_right.jpg", r + 1), rr));
    }
    jobs.par_iter().try_for_each(|(index, name, label)| {
        let img = generate_image(label.unwrap_or(Label::Normal), spec, *index);
        write_jpeg(&img, &image_dir.join(name), spec.jpeg_quality)
    })?;
    let csv_path = out_dir.join(METADATA_FILE);
    let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(dataset::COLUMNS)?;
    let mut demo = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(17));
    let keyword = |l: Option<Label>| match l {
        Some(Label::Normal) => "normal fundus",
        Some(Label::Cataract) => "cataract",
        None => FILLER_KEYWORD,
    };
    for (r, &(l, rr)) in rows.iter().enumerate() {
        let id = (r + 1).to_string();
        let age = demo.random_range(40..85u32).to_string();
        let sex = if demo.random::<bool>() { "Male" } else { "Female" };
        w.write_record([
            id.as_str(),
            age.as_str(),
            sex,
            &format!("{IMAGE_DIR}/{id}_left.jpg"),
            &format!("{IMAGE_DIR}/{id}_right.jpg"),
            keyword(l),
            keyword(rr),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let meta = dataset::load_metadata(&csv_path)?;
    Ok(SynthDataset {
        single: dataset::filter_binary(&meta.records),
        pairs: dataset::build_dual_eye_samples(&meta.records),
        metadata_csv: csv_path,
        image_root: out_dir.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_covers_all_combinations_first() {
        let rows = pair_layout(5, 4, 1);
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0], (Some(Label::Normal), Some(Label::Normal)));
        assert_eq!(rows[1], (Some(Label::Normal), Some(Label::Cataract)));
        assert_eq!(rows[2], (Some(Label::Cataract), Some(Label::Normal)));
        assert_eq!(rows[3], (Some(Label::Cataract), Some(Label::Cataract)));
        let eyes: Vec<_> = rows.iter().flat_map(|r| [r.0, r.1]).collect();
        assert_eq!(eyes.iter().filter(|e| **e == Some(Label::Normal)).count(), 5);
        assert_eq!(eyes.iter().filter(|e| **e == Some(Label::Cataract)).count(), 4);
        assert_eq!(eyes.iter().filter(|e| e.is_none()).count(), 1);
        assert_eq!(pair_layout(1, 0, 0), vec![(Some(Label::Normal), None)]);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = PlanarImage::filled(16, 16, [0.3, 0.6, 0.9]);
        let b = gaussian_blur(&img, 2.0);
        for (a, c) in b.data.iter().zip(&img.data) {
            assert!((a - c).abs() < 1e-5);
        }
    }
}
