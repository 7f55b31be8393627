//! Image decoding, augmentation and normalization into `3x224x224` tensors.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 224;

/// Per-channel normalization constants (ImageNet by default).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for NormalizationStats {
    fn default() -> Self {
        NormalizationStats {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl NormalizationStats {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Parameter(format!("normalization std must be positive, got {:?}", self.std)));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Parameter(format!("normalization mean must be finite, got {:?}", self.mean)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    /// Area fraction range of the random resized crop.
    pub crop_scale: (f32, f32),
    /// Aspect-ratio range of the random resized crop.
    pub crop_ratio: (f32, f32),
    pub hflip_probability: f32,
    /// Rotation drawn uniformly from `[-rotation_degrees, rotation_degrees]`.
    pub rotation_degrees: f32,
    pub brightness: f32,
    pub contrast: f32,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            crop_scale: (0.8, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            hflip_probability: 0.5,
            rotation_degrees: 15.0,
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

impl AugmentationPolicy {
    /// Policy under which the train transform equals the eval transform.
    pub fn identity() -> Self {
        AugmentationPolicy {
            crop_scale: (1.0, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            hflip_probability: 0.0,
            rotation_degrees: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.crop_scale;
        let (r0, r1) = self.crop_ratio;
        let bad = |m: String| Err(Error::Parameter(m));
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return bad(format!("crop_scale {:?} must satisfy 0 < min <= max <= 1", self.crop_scale));
        }
        if !(r0 > 0.0 && r0 <= r1) {
            return bad(format!("crop_ratio {:?} must satisfy 0 < min <= max", self.crop_ratio));
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return bad(format!("hflip_probability {} outside [0, 1]", self.hflip_probability));
        }
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees <= 180.0) {
            return bad(format!("rotation_degrees {} outside [0, 180]", self.rotation_degrees));
        }
        if !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.contrast) {
            return bad("brightness and contrast jitter must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// RGB image as three planes of `f32` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarImage {
    pub width: usize,
    pub height: usize,
    /// `[3, height, width]` row-major.
    pub data: Vec<f32>,
}

impl PlanarImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "planar image {width}x{height} cannot hold {} values",
                data.len()
            )));
        }
        Ok(PlanarImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for c in 0..3 {
            data[c * plane..(c + 1) * plane].fill(rgb[c]);
        }
        PlanarImage { width, height, data }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = w * h;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px.0[c] as f32 / 255.0;
            }
        }
        PlanarImage { width: w, height: h, data }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let plane = self.width * self.height;
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            image::Rgb(std::array::from_fn(|c| (self.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    /// Converts a `[3, H, W]` tensor of `[0, 1]` values.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 3 || t.dim(0) != 3 {
            return Err(Error::Shape(format!("expected [3, H, W], got {:?}", t.shape())));
        }
        PlanarImage::new(t.dim(2), t.dim(1), t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([3, self.height, self.width], self.data.clone())
    }
}

/// Decodes a JPEG/PNG file. Images without three colour channels are rejected.
pub fn load_image(path: &Path) -> Result<PlanarImage> {
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| decode_err(e.to_string()))?;
    if img.color().channel_count() < 3 {
        return Err(decode_err(format!("expected an RGB image, found {:?}", img.color())));
    }
    if img.width() == 0 || img.height() == 0 {
        return Err(decode_err("image has no pixels".into()));
    }
    Ok(PlanarImage::from_rgb8(&img.to_rgb8()))
}

/// Bilinear resampling of the source rectangle `(x0, y0, w, h)` to `out_w x out_h`,
/// with half-pixel centres and edge clamping.
pub fn resize_region(
    img: &PlanarImage,
    (x0, y0, w, h): (usize, usize, usize, usize),
    out_w: usize,
    out_h: usize,
) -> PlanarImage {
    assert!(x0 + w <= img.width && y0 + h <= img.height && w > 0 && h > 0);
    let taps = |out: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f32 / out as f32;
        (0..out)
            .map(|o| {
                let s = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let lo = (s.floor() as usize).min(src - 1);
                let hi = (lo + 1).min(src - 1);
                (lo, hi, s - lo as f32)
            })
            .collect()
    };
    let xt = taps(out_w, w);
    let yt = taps(out_h, h);
    let mut data = vec![0.0f32; 3 * out_w * out_h];
    for c in 0..3 {
        let src = img.plane(c);
        let dst = &mut data[c * out_w * out_h..][..out_w * out_h];
        for (oy, &(ylo, yhi, fy)) in yt.iter().enumerate() {
            let r0 = &src[(y0 + ylo) * img.width + x0..];
            let r1 = &src[(y0 + yhi) * img.width + x0..];
            for (ox, &(xlo, xhi, fx)) in xt.iter().enumerate() {
                let top = r0[xlo] + (r0[xhi] - r0[xlo]) * fx;
                let bot = r1[xlo] + (r1[xhi] - r1[xlo]) * fx;
                dst[oy * out_w + ox] = top + (bot - top) * fy;
            }
        }
    }
    PlanarImage {
        width: out_w,
        height: out_h,
        data,
    }
}

pub fn resize(img: &PlanarImage, out_w: usize, out_h: usize) -> PlanarImage {
    resize_region(img, (0, 0, img.width, img.height), out_w, out_h)
}

/// Random resized crop rectangle: ten rejection-sampled attempts, then a
/// centre crop with the aspect ratio clamped into range.
pub fn sample_crop(width: usize, height: usize, scale: (f32, f32), ratio: (f32, f32), rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    // the full area leaves no room for any other rectangle
    if scale.0 >= 1.0 {
        return (0, 0, width, height);
    }
    let area = (width * height) as f32;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ar = if lr0 < lr1 { rng.random_range(lr0..lr1).exp() } else { ratio.0 };
        let w = (target * ar).sqrt().round() as usize;
        let h = (target / ar).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let y = rng.random_range(0..=height - h);
            let x = rng.random_range(0..=width - w);
            return (x, y, w, h);
        }
    }
    let in_ratio = width as f32 / height as f32;
    let (w, h) = if in_ratio < ratio.0 {
        (width, ((width as f32 / ratio.0).round() as usize).clamp(1, height))
    } else if in_ratio > ratio.1 {
        (((height as f32 * ratio.1).round() as usize).clamp(1, width), height)
    } else {
        (width, height)
    };
    ((width - w) / 2, (height - h) / 2, w, h)
}

pub fn hflip(img: &mut PlanarImage) {
    let w = img.width;
    for row in img.data.chunks_mut(w) {
        row.reverse();
    }
}

/// Rotates about the image centre by `degrees` (counter-clockwise), sampling
/// bilinearly; samples outside the source read as black.
pub fn rotate(img: &PlanarImage, degrees: f32) -> PlanarImage {
    let (w, h) = (img.width, img.height);
    let (s, c) = degrees.to_radians().sin_cos();
    let (cx, cy) = (w as f32 * 0.5, h as f32 * 0.5);
    let mut data = vec![0.0f32; img.data.len()];
    let plane = w * h;
    for oy in 0..h {
        for ox in 0..w {
            let dx = ox as f32 + 0.5 - cx;
            let dy = oy as f32 + 0.5 - cy;
            // inverse rotation maps the output pixel back into the source
            let sx = c * dx - s * dy + cx - 0.5;
            let sy = s * dx + c * dy + cy - 0.5;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..3 {
                let src = &img.data[ch * plane..][..plane];
                let at = |x: isize, y: isize| {
                    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                        0.0
                    } else {
                        src[y as usize * w + x as usize]
                    }
                };
                let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
                let bot = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
                data[ch * plane + oy * w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    PlanarImage { width: w, height: h, data }
}

pub fn adjust_brightness(img: &mut PlanarImage, factor: f32) {
    img.data.iter_mut().for_each(|v| *v = (*v * factor).clamp(0.0, 1.0));
}

/// Blends towards the mean grey level of the image.
pub fn adjust_contrast(img: &mut PlanarImage, factor: f32) {
    let plane = img.width * img.height;
    let mut sum = 0.0f64;
    for i in 0..plane {
        sum += (0.299 * img.data[i] + 0.587 * img.data[plane + i] + 0.114 * img.data[2 * plane + i]) as f64;
    }
    let mean = (sum / plane as f64) as f32;
    img.data
        .iter_mut()
        .for_each(|v| *v = (factor * *v + (1.0 - factor) * mean).clamp(0.0, 1.0));
}

/// `out[c] = (in[c] - mean[c]) / std[c]` over a `[3, H, W]` tensor.
pub fn normalize(pixels: &Tensor, stats: &NormalizationStats) -> Result<Tensor> {
    stats.validate()?;
    channel_map(pixels, |c, v| (v - stats.mean[c]) / stats.std[c])
}

pub fn denormalize(t: &Tensor, stats: &NormalizationStats) -> Result<Tensor> {
    stats.validate()?;
    channel_map(t, |c, v| v * stats.std[c] + stats.mean[c])
}

fn channel_map(t: &Tensor, f: impl Fn(usize, f32) -> f32) -> Result<Tensor> {
    if t.rank() != 3 || t.dim(0) != 3 {
        return Err(Error::Shape(format!("expected [3, H, W], got {:?}", t.shape())));
    }
    let plane = t.dim(1) * t.dim(2);
    let data = t.data().iter().enumerate().map(|(i, &v)| f(i / plane, v)).collect();
    Ok(Tensor::new(t.shape().to_vec(), data))
}

fn finish(img: PlanarImage, stats: &NormalizationStats) -> Result<Tensor> {
    normalize(&img.to_tensor(), stats)
}

/// Deterministic resize to `224x224` and normalization.
pub fn eval_transform(img: &PlanarImage, stats: &NormalizationStats) -> Result<Tensor> {
    finish(resize(img, IMAGE_SIZE, IMAGE_SIZE), stats)
}

/// Random resized crop, horizontal flip, rotation, brightness/contrast jitter,
/// normalization; a pure function of `(img, policy, seed)`.
pub fn train_transform(img: &PlanarImage, policy: &AugmentationPolicy, stats: &NormalizationStats, seed: u64) -> Result<Tensor> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rect = sample_crop(img.width, img.height, policy.crop_scale, policy.crop_ratio, &mut rng);
    let mut out = resize_region(img, rect, IMAGE_SIZE, IMAGE_SIZE);
    if rng.random::<f32>() < policy.hflip_probability {
        hflip(&mut out);
    }
    if policy.rotation_degrees > 0.0 {
        let angle = rng.random_range(-policy.rotation_degrees..=policy.rotation_degrees);
        out = rotate(&out, angle);
    }
    if policy.brightness > 0.0 {
        let f = rng.random_range(1.0 - policy.brightness..=1.0 + policy.brightness);
        adjust_brightness(&mut out, f);
    }
    if policy.contrast > 0.0 {
        let f = rng.random_range(1.0 - policy.contrast..=1.0 + policy.contrast);
        adjust_contrast(&mut out, f);
    }
    finish(out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> PlanarImage {
        let mut data = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(((x * 3 + y * 5 + c * 7) % 17) as f32 / 16.0);
                }
            }
        }
        PlanarImage::new(w, h, data).unwrap()
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = gradient_image(9, 7);
        assert_eq!(resize(&img, 9, 7), img);
        let flat = PlanarImage::filled(13, 11, [0.2, 0.5, 0.9]);
        let r = resize(&flat, 5, 4);
        assert!(r.plane(1).iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn downscale_by_two_averages_pairs() {
        // half-pixel centres: output pixel k samples source position 2k + 0.5
        let data: Vec<f32> = (0..3).flat_map(|_| (0..4).map(|x| x as f32 / 4.0)).collect();
        let img = PlanarImage::new(4, 1, data).unwrap();
        let r = resize(&img, 2, 1);
        assert!((r.plane(0)[0] - 0.125).abs() < 1e-6);
        assert!((r.plane(0)[1] - 0.625).abs() < 1e-6);
    }

    #[test]
    fn normalize_known_pixels() {
        let s = NormalizationStats::default();
        let t = Tensor::new([3, 1, 2], vec![0.485, 0.485 + 0.229, 0.456, 0.456 + 0.224, 0.406, 0.406 + 0.225]);
        let n = normalize(&t, &s).unwrap();
        for c in 0..3 {
            assert!(n.data()[2 * c].abs() < 1e-6);
            assert!((n.data()[2 * c + 1] - 1.0).abs() < 1e-5);
        }
        let back = denormalize(&n, &s).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-6);
        let bad = NormalizationStats {
            std: [0.2, 0.0, 0.2],
            ..s
        };
        assert!(matches!(normalize(&t, &bad), Err(Error::Parameter(_))));
    }

    #[test]
    fn identity_policy_matches_eval() {
        let s = NormalizationStats::default();
        for (w, h) in [(300, 300), (320, 240), (97, 131)] {
            let img = gradient_image(w, h);
            let a = train_transform(&img, &AugmentationPolicy::identity(), &s, 11).unwrap();
            let b = eval_transform(&img, &s).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn train_transform_is_seeded() {
        let s = NormalizationStats::default();
        let img = gradient_image(260, 250);
        let p = AugmentationPolicy::default();
        let a = train_transform(&img, &p, &s, 3).unwrap();
        let b = train_transform(&img, &p, &s, 3).unwrap();
        let c = train_transform(&img, &p, &s, 4).unwrap();
        assert_eq!(a.shape(), &[3, 224, 224]);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        assert!(a.all_finite());
    }

    #[test]
    fn crop_stays_inside_and_respects_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (x, y, w, h) = sample_crop(400, 300, (0.8, 1.0), (0.75, 4.0 / 3.0), &mut rng);
            assert!(x + w <= 400 && y + h <= 300);
            let frac = (w * h) as f32 / 120_000.0;
            assert!(frac > 0.78 && frac <= 1.0, "{frac}");
        }
        // impossible ratio falls back to a centred crop
        let r = sample_crop(100, 10, (0.9, 0.9), (1.0, 1.0), &mut rng);
        assert_eq!(r, (45, 0, 10, 10));
    }

    #[test]
    fn rotation_by_zero_is_identity_and_fills_black() {
        let img = gradient_image(20, 20);
        let r0 = rotate(&img, 0.0);
        for (a, b) in r0.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-5);
        }
        let white = PlanarImage::filled(20, 20, [1.0; 3]);
        let r = rotate(&white, 45.0);
        assert_eq!(r.plane(0)[0], 0.0);
        assert!((r.plane(0)[10 * 20 + 10] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hflip_reverses_rows() {
        let mut img = gradient_image(5, 3);
        let orig = img.clone();
        hflip(&mut img);
        assert_eq!(img.plane(2)[5], orig.plane(2)[9]);
        hflip(&mut img);
        assert_eq!(img, orig);
    }
}
