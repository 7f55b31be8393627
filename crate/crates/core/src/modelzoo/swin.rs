use std::sync::Arc;

use super::layers::join;
use super::vit::{merge_heads, split_heads, Mlp};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Init, LayerNorm, Linear, LinearInit, ParamId, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f32 = 1e-5;
const MASK_FILL: f32 = -100.0;

#[derive(Clone, Debug)]
pub(crate) struct SwinConfig {
    pub embed: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub patch: usize,
    pub img: usize,
}

impl SwinConfig {
    pub fn base() -> Self {
        SwinConfig {
            embed: 128,
            depths: [2, 2, 18, 2],
            heads: [4, 8, 16, 32],
            window: 7,
            patch: 4,
            img: 224,
        }
    }
}

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    bias_table: ParamId,
    proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
    heads: usize,
    window: usize,
    shift: usize,
}

struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
}

struct Stage {
    downsample: Option<PatchMerging>,
    blocks: Vec<Block>,
    res: usize,
}

pub(crate) struct SwinTransformer {
    cfg: SwinConfig,
    patch_embed: Conv2d,
    patch_norm: LayerNorm,
    stages: Vec<Stage>,
    norm: LayerNorm,
}

/// Flat gather index taking `[B, H*W, C]` to windows `[B*nW, ws*ws, C]`
/// of the image cyclically shifted up-left by `shift`.
fn partition_index(b: usize, res: usize, ws: usize, shift: usize, c: usize) -> Vec<u32> {
    let nw = res / ws;
    let mut idx = Vec::with_capacity(b * res * res * c);
    for bi in 0..b {
        for wh in 0..nw {
            for ww in 0..nw {
                for th in 0..ws {
                    for tw in 0..ws {
                        let h = (wh * ws + th + shift) % res;
                        let w = (ww * ws + tw + shift) % res;
                        let base = ((bi * res + h) * res + w) * c;
                        idx.extend((0..c).map(|ch| (base + ch) as u32));
                    }
                }
            }
        }
    }
    idx
}

fn invert(idx: &[u32]) -> Vec<u32> {
    let mut inv = vec![0u32; idx.len()];
    for (o, &i) in idx.iter().enumerate() {
        inv[i as usize] = o as u32;
    }
    inv
}

/// Additive mask `[nW, 1, ws*ws, ws*ws]` that blocks attention across regions
/// that were not adjacent before the cyclic shift.
fn shift_mask(res: usize, ws: usize, shift: usize) -> Tensor {
    let region = |p: usize| {
        if p < res - ws {
            0
        } else if p < res - shift {
            1
        } else {
            2
        }
    };
    let nw = res / ws;
    let t = ws * ws;
    let mut data = Vec::with_capacity(nw * nw * t * t);
    for wh in 0..nw {
        for ww in 0..nw {
            let ids: Vec<usize> = (0..t)
                .map(|k| region(wh * ws + k / ws) * 3 + region(ww * ws + k % ws))
                .collect();
            for i in 0..t {
                for j in 0..t {
                    data.push(if ids[i] == ids[j] { 0.0 } else { MASK_FILL });
                }
            }
        }
    }
    Tensor::new([nw * nw, 1, t, t], data)
}

/// Gather index producing the `[heads, ws*ws, ws*ws]` bias from a
/// `[(2ws-1)^2, heads]` table.
fn relative_bias_index(ws: usize, heads: usize) -> Vec<u32> {
    let t = ws * ws;
    let span = 2 * ws - 1;
    let mut idx = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for i in 0..t {
            for j in 0..t {
                let dh = i / ws + ws - 1 - j / ws;
                let dw = i % ws + ws - 1 - j % ws;
                idx.push(((dh * span + dw) * heads + h) as u32);
            }
        }
    }
    idx
}

impl Block {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, res: usize) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, l, c) = (s[0], s[1], s[2]);
        let ws = self.window;
        let t = ws * ws;
        let nw = (res / ws) * (res / ws);
        let h = self.norm1.forward(g, store, x)?;
        let fwd = partition_index(b, res, ws, self.shift, c);
        let back = Arc::new(invert(&fwd));
        let win = g.gather(h, Arc::new(fwd), &[b * nw, t, c])?;
        let qkv = self.qkv.forward(g, store, win)?;
        let (q, k, v) = split_heads(g, qkv, self.heads)?;
        let q = g.scale(q, 1.0 / ((c / self.heads) as f32).sqrt());
        let attn = g.matmul(q, k, false, true)?;
        let table = store.var(g, self.bias_table);
        let bias = g.gather(table, Arc::new(relative_bias_index(ws, self.heads)), &[self.heads, t, t])?;
        let mut attn = g.add(attn, bias)?;
        if self.shift > 0 {
            let a5 = g.reshape(attn, &[b, nw, self.heads, t, t])?;
            let mask = g.constant(shift_mask(res, ws, self.shift));
            let a5 = g.add(a5, mask)?;
            attn = g.reshape(a5, &[b * nw, self.heads, t, t])?;
        }
        let attn = g.softmax(attn);
        let o = g.matmul(attn, v, false, false)?;
        let o = merge_heads(g, o)?;
        let o = self.proj.forward(g, store, o)?;
        let o = g.gather(o, back, &[b, l, c])?;
        let x = g.add(x, o)?;
        let h = self.norm2.forward(g, store, x)?;
        let h = self.mlp.forward(g, store, h)?;
        g.add(x, h)
    }
}

impl PatchMerging {
    /// `[B, R*R, C] -> [B, (R/2)^2, 2C]`, concatenating each 2x2 neighbourhood.
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, res: usize) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, c) = (s[0], s[2]);
        let half = res / 2;
        let r = g.reshape(x, &[b, half, 2, half, 2, c])?;
        let p = g.permute(r, &[0, 1, 3, 4, 2, 5])?;
        let m = g.reshape(p, &[b, half * half, 4 * c])?;
        let m = self.norm.forward(g, store, m)?;
        self.reduction.forward(g, store, m)
    }
}

impl SwinTransformer {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, prefix: &str, cfg: SwinConfig) -> Self {
        let p = |n: &str| join(prefix, n);
        let e = cfg.embed;
        let patch_embed = Conv2d::new(store, init, &p("patch_embed.proj"), 3, e, cfg.patch, cfg.patch, 0, 1, true);
        let patch_norm = LayerNorm::new(store, &p("patch_embed.norm"), e, LN_EPS);
        let mut stages = Vec::new();
        let mut res = cfg.img / cfg.patch;
        let mut dim = e;
        for i in 0..4 {
            let sp = p(&format!("layers.{i}"));
            let downsample = (i > 0).then(|| {
                let m = PatchMerging {
                    norm: LayerNorm::new(store, &join(&sp, "downsample.norm"), 4 * dim, LN_EPS),
                    reduction: Linear::new(
                        store,
                        init,
                        &join(&sp, "downsample.reduction"),
                        4 * dim,
                        2 * dim,
                        false,
                        LinearInit::TruncNormal,
                    ),
                };
                dim *= 2;
                res /= 2;
                m
            });
            let heads = cfg.heads[i];
            let window = cfg.window.min(res);
            let blocks = (0..cfg.depths[i])
                .map(|j| {
                    let bp = join(&sp, &format!("blocks.{j}"));
                    let span = 2 * window - 1;
                    let table = init.trunc_normal(&[span * span, heads], 0.02);
                    Block {
                        norm1: LayerNorm::new(store, &join(&bp, "norm1"), dim, LN_EPS),
                        qkv: Linear::new(store, init, &join(&bp, "attn.qkv"), dim, 3 * dim, true, LinearInit::TruncNormal),
                        bias_table: store.add_weight(join(&bp, "attn.relative_position_bias_table"), table),
                        proj: Linear::new(store, init, &join(&bp, "attn.proj"), dim, dim, true, LinearInit::TruncNormal),
                        norm2: LayerNorm::new(store, &join(&bp, "norm2"), dim, LN_EPS),
                        mlp: Mlp::new(store, init, &join(&bp, "mlp"), dim, 4 * dim),
                        heads,
                        window,
                        shift: if j % 2 == 1 && res > cfg.window { cfg.window / 2 } else { 0 },
                    }
                })
                .collect();
            stages.push(Stage { downsample, blocks, res });
        }
        let norm = LayerNorm::new(store, &p("norm"), dim, LN_EPS);
        SwinTransformer {
            cfg,
            patch_embed,
            patch_norm,
            stages,
            norm,
        }
    }

    pub fn forward_features(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s[2] != self.cfg.img || s[3] != self.cfg.img {
            return Err(Error::Shape(format!(
                "swin expects {0}x{0} input, got {1}x{2}",
                self.cfg.img, s[2], s[3]
            )));
        }
        let b = s[0];
        let e = self.patch_embed.forward(g, store, x)?;
        let es = g.shape(e).to_vec();
        let e = g.reshape(e, &[b, es[1], es[2] * es[3]])?;
        let e = g.permute(e, &[0, 2, 1])?;
        let mut x = self.patch_norm.forward(g, store, e)?;
        let mut res = es[2];
        for stage in &self.stages {
            if let Some(m) = &stage.downsample {
                x = m.forward(g, store, x, res)?;
            }
            res = stage.res;
            for blk in &stage.blocks {
                x = blk.forward(g, store, x, res)?;
            }
        }
        let x = self.norm.forward(g, store, x)?;
        g.mean_axis(x, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unshifted_partition_keeps_window_blocks() {
        let idx = partition_index(1, 4, 2, 0, 1);
        // window 0 covers rows 0-1, cols 0-1
        assert_eq!(&idx[..4], &[0, 1, 4, 5]);
        assert_eq!(&idx[4..8], &[2, 3, 6, 7]);
        let back = invert(&idx);
        for (o, &i) in idx.iter().enumerate() {
            assert_eq!(back[i as usize] as usize, o);
        }
    }

    #[test]
    fn shift_mask_only_blocks_last_row_and_column_windows() {
        let m = shift_mask(4, 2, 1);
        let t = 4;
        // the top-left window never straddles the wrap-around
        assert!(m.data()[..t * t].iter().all(|&v| v == 0.0));
        // the bottom-right window mixes four regions
        let last = &m.data()[3 * t * t..];
        assert_eq!(last.iter().filter(|&&v| v == 0.0).count(), 4);
    }

    #[test]
    fn relative_index_is_centered_on_diagonal() {
        let idx = relative_bias_index(7, 1);
        let centre = (6 * 13 + 6) as u32;
        for i in 0..49 {
            assert_eq!(idx[i * 49 + i], centre);
        }
    }
}
