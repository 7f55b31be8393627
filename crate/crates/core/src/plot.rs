//! Minimal raster charts: ROC curves, learning curves and grouped bars, written as PNG.
//!
//! Charts carry no text; series colours follow [`PALETTE`] in input order.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::evaluation::{AblationTable, RocPoint};
use crate::training::EpochRecord;

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

const W: u32 = 480;
const H: u32 = 360;
const MARGIN: f64 = 40.0;

struct Canvas {
    img: RgbImage,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Canvas {
    fn new(x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
        let grey = Rgb([200, 200, 200]);
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let y = (H as f64 - MARGIN - t * (H as f64 - 2.0 * MARGIN)) as u32;
            let x = (MARGIN + t * (W as f64 - 2.0 * MARGIN)) as u32;
            for px in MARGIN as u32..=(W - MARGIN as u32) {
                img.put_pixel(px, y, grey);
            }
            for py in MARGIN as u32..=(H - MARGIN as u32) {
                img.put_pixel(x, py, grey);
            }
        }
        let black = Rgb([0, 0, 0]);
        for px in MARGIN as u32..=(W - MARGIN as u32) {
            img.put_pixel(px, H - MARGIN as u32, black);
        }
        for py in MARGIN as u32..=(H - MARGIN as u32) {
            img.put_pixel(MARGIN as u32, py, black);
        }
        Canvas { img, x_range, y_range }
    }

    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let span = |r: (f64, f64)| if r.1 > r.0 { r.1 - r.0 } else { 1.0 };
        let fx = (x - self.x_range.0) / span(self.x_range);
        let fy = (y - self.y_range.0) / span(self.y_range);
        (
            MARGIN + fx * (W as f64 - 2.0 * MARGIN),
            H as f64 - MARGIN - fy * (H as f64 - 2.0 * MARGIN),
        )
    }

    fn dot(&mut self, x: f64, y: f64, col: [u8; 3]) {
        for dx in -1..=1i64 {
            for dy in -1..=1i64 {
                let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
                if px >= 0 && py >= 0 && (px as u32) < W && (py as u32) < H {
                    self.img.put_pixel(px as u32, py as u32, Rgb(col));
                }
            }
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), col: [u8; 3]) {
        let (x0, y0) = self.to_px(a.0, a.1);
        let (x1, y1) = self.to_px(b.0, b.1);
        let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            self.dot(x0 + t * (x1 - x0), y0 + t * (y1 - y0), col);
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], col: [u8; 3]) {
        for w in pts.windows(2) {
            self.line(w[0], w[1], col);
        }
        if let [p] = pts {
            let (x, y) = self.to_px(p.0, p.1);
            self.dot(x, y, col);
        }
    }

    fn bar(&mut self, x0: f64, x1: f64, height: f64, col: [u8; 3]) {
        let (px0, py) = self.to_px(x0, height);
        let (px1, base) = self.to_px(x1, self.y_range.0);
        for x in px0.round() as u32..px1.round() as u32 {
            for y in py.round() as u32..base.round() as u32 {
                if x < W && y < H {
                    self.img.put_pixel(x, y, Rgb(col));
                }
            }
        }
    }

    fn save(self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.img
            .save(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

/// ROC curves for several models on one chart, with the chance diagonal in grey.
pub fn roc_plot(path: &Path, curves: &[(&str, &[RocPoint])]) -> Result<()> {
    let mut c = Canvas::new((0.0, 1.0), (0.0, 1.0));
    c.line((0.0, 0.0), (1.0, 1.0), [160, 160, 160]);
    for (i, (_, pts)) in curves.iter().enumerate() {
        let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.fpr, p.tpr)).collect();
        c.polyline(&xy, PALETTE[i % PALETTE.len()]);
    }
    c.save(path)
}

/// Train loss, validation loss and validation accuracy against epoch.
pub fn learning_curves(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let last = history.last().map_or(1.0, |r| r.epoch as f64);
    let top = history
        .iter()
        .flat_map(|r| [r.train_loss, r.val_loss, r.val_acc])
        .filter(|v| v.is_finite())
        .fold(1.0, f64::max);
    let mut c = Canvas::new((1.0, last.max(2.0)), (0.0, top));
    let series: [fn(&EpochRecord) -> f64; 3] = [|r| r.train_loss, |r| r.val_loss, |r| r.val_acc];
    for (i, f) in series.iter().enumerate() {
        let xy: Vec<(f64, f64)> = history.iter().map(|r| (r.epoch as f64, f(r))).collect();
        c.polyline(&xy, PALETTE[i]);
    }
    c.save(path)
}

/// Grouped bars per model: FT accuracy, FT F1, FR accuracy, FR F1.
pub fn ablation_bars(path: &Path, table: &AblationTable) -> Result<()> {
    let n = table.rows.len().max(1) as f64;
    let mut c = Canvas::new((0.0, n), (0.0, 1.0));
    for (i, row) in table.rows.iter().enumerate() {
        let vals = [
            row.ft.map(|v| v.0),
            row.ft.map(|v| v.1),
            row.fr.map(|v| v.0),
            row.fr.map(|v| v.1),
        ];
        for (j, v) in vals.iter().enumerate() {
            if let Some(v) = v {
                let x0 = i as f64 + 0.1 + j as f64 * 0.2;
                c.bar(x0, x0 + 0.18, v.clamp(0.0, 1.0), PALETTE[j]);
            }
        }
    }
    c.save(path)
}
