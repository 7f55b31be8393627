//! Grad-CAM heatmaps for CNN backbones and colour overlays.

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::modelzoo::ModelHandle;
use crate::preprocess::{denormalize, eval_transform, resize, NormalizationStats, PlanarImage, IMAGE_SIZE};
use crate::tensor::Tensor;

pub const DEFAULT_OPACITY: f32 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f32>,
    pub source_layer: String,
    pub target_class: usize,
}

impl Heatmap {
    pub fn max(&self) -> f32 {
        self.values.iter().cloned().fold(0.0, f32::max)
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

/// Divides by the maximum; an all-zero map stays zero.
pub fn normalize_map(values: &mut [f32]) {
    let m = values.iter().cloned().fold(0.0f32, f32::max);
    if m > 0.0 {
        for v in values.iter_mut() {
            *v /= m;
        }
    }
}

/// `ReLU(sum_k w_k A_k)` with `w_k` the spatial mean of `grad[k]`, max-normalized.
/// Both inputs are `[C, h, w]` or `[1, C, h, w]`.
pub fn cam_from_activations(activations: &Tensor, gradient: &Tensor) -> Result<Vec<f32>> {
    if activations.shape() != gradient.shape() {
        return Err(Error::Shape(format!(
            "activation {:?} and gradient {:?} differ",
            activations.shape(),
            gradient.shape()
        )));
    }
    let s = activations.shape();
    let (c, hw) = match s.len() {
        3 => (s[0], s[1] * s[2]),
        4 if s[0] == 1 => (s[1], s[2] * s[3]),
        _ => return Err(Error::Shape(format!("expected one [C, h, w] feature map, got {s:?}"))),
    };
    let mut map = vec![0.0f64; hw];
    for k in 0..c {
        let g = &gradient.data()[k * hw..(k + 1) * hw];
        let w = g.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        if w == 0.0 {
            continue;
        }
        for (m, &a) in map.iter_mut().zip(&activations.data()[k * hw..(k + 1) * hw]) {
            *m += w * a as f64;
        }
    }
    let mut out: Vec<f32> = map.into_iter().map(|v| v.max(0.0) as f32).collect();
    normalize_map(&mut out);
    Ok(out)
}

/// Half-pixel bilinear resampling of a single-channel map.
pub fn upsample(values: &[f32], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    let mut data = Vec::with_capacity(3 * values.len());
    for _ in 0..3 {
        data.extend_from_slice(values);
    }
    let img = PlanarImage { width, height, data };
    let mut r = resize(&img, out_w, out_h).data;
    r.truncate(out_w * out_h);
    r
}

/// Grad-CAM of `layer` on an already-built graph, upsampled to `out` pixels square.
/// `logits` must be `[1, C]`; the target is the raw logit of `target_class`.
pub fn grad_cam_graph(g: &Graph, layer: Var, logits: Var, target_class: usize, layer_name: &str, out: usize) -> Result<Heatmap> {
    let ls = g.shape(logits).to_vec();
    if ls.len() != 2 || ls[0] != 1 || target_class >= ls[1] {
        return Err(Error::Input(format!(
            "target class {target_class} does not index a single row of logits {ls:?}"
        )));
    }
    let fs = g.shape(layer).to_vec();
    if fs.len() != 4 {
        return Err(Error::UnsupportedLayer {
            layer: layer_name.to_string(),
            reason: format!("output {fs:?} is not a spatial feature map"),
        });
    }
    let mut seed = vec![0.0f32; ls[1]];
    seed[target_class] = 1.0;
    let grads = g.backward(logits, Tensor::new(ls, seed))?;
    let grad = grads.get(layer).ok_or_else(|| {
        Error::State(format!("no gradient reached layer `{layer_name}`; was the input marked as requiring gradients?"))
    })?;
    let coarse = cam_from_activations(g.value(layer), grad)?;
    let (h, w) = (fs[2], fs[3]);
    Ok(Heatmap {
        width: out,
        height: out,
        values: upsample(&coarse, w, h, out, out),
        source_layer: layer_name.to_string(),
        target_class,
    })
}

/// Grad-CAM for a single-eye CNN on one normalized image `[3, H, W]` or `[1, 3, H, W]`.
pub fn grad_cam(model: &ModelHandle, image: &Tensor, target_layer: &str, target_class: usize) -> Result<Heatmap> {
    if model.is_dual() {
        return Err(Error::Input("Grad-CAM runs on single-eye models".into()));
    }
    if !model.cam_layers().contains(&target_layer) {
        let reason = if model.spec.backbone.is_cnn() {
            "unknown layer; available: features".to_string()
        } else {
            format!("{} has no convolutional feature map", model.spec.backbone)
        };
        return Err(Error::UnsupportedLayer {
            layer: target_layer.to_string(),
            reason,
        });
    }
    let x = match image.rank() {
        3 => image.reshape([1, image.dim(0), image.dim(1), image.dim(2)]),
        4 if image.dim(0) == 1 => image.clone(),
        _ => return Err(Error::Shape(format!("expected a single image, got {:?}", image.shape()))),
    };
    let mut g = Graph::inference();
    let xv = g.input(x, true);
    let logits = model.forward_var(&mut g, xv)?;
    let layer = g
        .tapped(target_layer)
        .ok_or_else(|| Error::State(format!("layer `{target_layer}` produced no activation")))?;
    grad_cam_graph(&g, layer, logits, target_class, target_layer, IMAGE_SIZE)
}

/// Jet-style blue to red colour for `v` in `[0, 1]`; zero maps to dark blue `(0, 0, 0.5)`.
pub fn colormap(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |centre: f32| (1.5 - (4.0 * v - centre).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Alpha-blends the colourized heatmap over `image`; the map is resampled to the image size.
pub fn overlay(image: &PlanarImage, heatmap: &Heatmap, opacity: f32) -> Result<PlanarImage> {
    if !(0.0..=1.0).contains(&opacity) {
        return Err(Error::Parameter(format!("opacity {opacity} outside [0, 1]")));
    }
    let (w, h) = (image.width, image.height);
    let values = if (heatmap.width, heatmap.height) == (w, h) {
        heatmap.values.clone()
    } else {
        upsample(&heatmap.values, heatmap.width, heatmap.height, w, h)
    };
    let mut out = image.clone();
    for (i, &v) in values.iter().enumerate() {
        let col = colormap(v);
        for (c, &cv) in col.iter().enumerate() {
            let p = &mut out.data[c * w * h + i];
            *p = (1.0 - opacity) * *p + opacity * cv;
        }
    }
    Ok(out)
}

/// Mean heatmap value inside and outside a centred disc of radius `radius_frac * min(w, h)`.
pub fn region_mass(heatmap: &Heatmap, radius_frac: f32) -> (f64, f64) {
    let (w, h) = (heatmap.width, heatmap.height);
    let r = radius_frac * w.min(h) as f32;
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let (mut si, mut ni, mut so, mut no) = (0.0f64, 0usize, 0.0f64, 0usize);
    for y in 0..h {
        for x in 0..w {
            let d = ((x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2)).sqrt();
            let v = heatmap.at(x, y) as f64;
            if d <= r {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
    }
    (si / ni.max(1) as f64, so / no.max(1) as f64)
}

/// Heatmap plus its overlay on the eval-transformed image.
pub fn explain_image(
    model: &ModelHandle,
    image: &PlanarImage,
    stats: &NormalizationStats,
    target_class: usize,
    opacity: f32,
) -> Result<(Heatmap, PlanarImage)> {
    let x = eval_transform(image, stats)?;
    let layer = *model.cam_layers().first().ok_or_else(|| Error::UnsupportedLayer {
        layer: "features".into(),
        reason: format!("{} has no convolutional feature map", model.spec.backbone),
    })?;
    let heat = grad_cam(model, &x, layer, target_class)?;
    let base = PlanarImage::from_tensor(&denormalize(&x, stats)?)?;
    let mut base = base;
    for v in &mut base.data {
        *v = v.clamp(0.0, 1.0);
    }
    let over = overlay(&base, &heat, opacity)?;
    Ok((heat, over))
}

pub fn write_heatmap_csv(path: &Path, heatmap: &Heatmap) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in heatmap.values.chunks(heatmap.width) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_heatmap_csv(path: &Path) -> Result<Vec<Vec<f32>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f32>().map_err(|e| Error::Decode {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn save_png(path: &Path, image: &PlanarImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image
        .to_rgb8()
        .save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}
