use super::layers::join;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Init, LayerNorm, Linear, LinearInit, ParamId, ParamStore};

const LN_EPS: f32 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub(crate) struct VitConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub img: usize,
}

impl VitConfig {
    pub fn tiny() -> Self {
        VitConfig {
            dim: 192,
            depth: 12,
            heads: 3,
            patch: 16,
            img: 224,
        }
    }

    pub fn base() -> Self {
        VitConfig {
            dim: 768,
            depth: 12,
            heads: 12,
            patch: 16,
            img: 224,
        }
    }
}

/// Pre-norm MLP with exact GELU: `fc2(gelu(fc1(x)))`.
pub(crate) struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, prefix: &str, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(store, init, &join(prefix, "fc1"), dim, hidden, true, LinearInit::TruncNormal),
            fc2: Linear::new(store, init, &join(prefix, "fc2"), hidden, dim, true, LinearInit::TruncNormal),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Splits `[B, N, 3*D]` qkv activations into `q, k, v` of shape `[B, H, N, hd]`.
pub(crate) fn split_heads(g: &mut Graph, qkv: Var, heads: usize) -> Result<(Var, Var, Var)> {
    let s = g.shape(qkv).to_vec();
    let (b, n, d3) = (s[0], s[1], s[2]);
    let hd = d3 / 3 / heads;
    let r = g.reshape(qkv, &[b, n, 3, heads, hd])?;
    let p = g.permute(r, &[2, 0, 3, 1, 4])?;
    let one = b * heads * n * hd;
    let flat = g.reshape(p, &[3, one])?;
    let mut out = Vec::with_capacity(3);
    for i in 0..3 {
        let t = g.slice(flat, 0, i, 1)?;
        out.push(g.reshape(t, &[b, heads, n, hd])?);
    }
    Ok((out[0], out[1], out[2]))
}

/// `[B, H, N, hd] -> [B, N, H*hd]`.
pub(crate) fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
}

pub(crate) struct VisionTransformer {
    cfg: VitConfig,
    patch_embed: Conv2d,
    cls_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl VisionTransformer {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, prefix: &str, cfg: VitConfig) -> Self {
        let p = |n: &str| join(prefix, n);
        let d = cfg.dim;
        let tokens = (cfg.img / cfg.patch).pow(2) + 1;
        let patch_embed = Conv2d::new(store, init, &p("patch_embed.proj"), 3, d, cfg.patch, cfg.patch, 0, 1, true);
        let cls = init.trunc_normal(&[1, 1, d], 1e-6);
        let cls_token = store.add_weight(p("cls_token"), cls);
        let pos = init.trunc_normal(&[1, tokens, d], 0.02);
        let pos_embed = store.add_weight(p("pos_embed"), pos);
        let blocks = (0..cfg.depth)
            .map(|i| {
                let b = p(&format!("blocks.{i}"));
                Block {
                    norm1: LayerNorm::new(store, &join(&b, "norm1"), d, LN_EPS),
                    qkv: Linear::new(store, init, &join(&b, "attn.qkv"), d, 3 * d, true, LinearInit::TruncNormal),
                    proj: Linear::new(store, init, &join(&b, "attn.proj"), d, d, true, LinearInit::TruncNormal),
                    norm2: LayerNorm::new(store, &join(&b, "norm2"), d, LN_EPS),
                    mlp: Mlp::new(store, init, &join(&b, "mlp"), d, 4 * d),
                }
            })
            .collect();
        let norm = LayerNorm::new(store, &p("norm"), d, LN_EPS);
        VisionTransformer {
            cfg,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
        }
    }

    pub fn forward_features(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let d = self.cfg.dim;
        let b = g.shape(x)[0];
        let e = self.patch_embed.forward(g, store, x)?;
        let s = g.shape(e).to_vec();
        let e = g.reshape(e, &[b, d, s[2] * s[3]])?;
        let tokens = g.permute(e, &[0, 2, 1])?;
        let cls = store.var(g, self.cls_token);
        let cls_rep = if b == 1 { cls } else { g.concat(&vec![cls; b], 0)? };
        let x = g.concat(&[cls_rep, tokens], 1)?;
        let pos = store.var(g, self.pos_embed);
        let mut x = g.add(x, pos)?;
        let scale = 1.0 / ((d / self.cfg.heads) as f32).sqrt();
        for blk in &self.blocks {
            let h = blk.norm1.forward(g, store, x)?;
            let qkv = blk.qkv.forward(g, store, h)?;
            let (q, k, v) = split_heads(g, qkv, self.cfg.heads)?;
            let q = g.scale(q, scale);
            let attn = g.matmul(q, k, false, true)?;
            let attn = g.softmax(attn);
            let o = g.matmul(attn, v, false, false)?;
            let o = merge_heads(g, o)?;
            let o = blk.proj.forward(g, store, o)?;
            x = g.add(x, o)?;
            let h = blk.norm2.forward(g, store, x)?;
            let h = blk.mlp.forward(g, store, h)?;
            x = g.add(x, h)?;
        }
        let x = self.norm.forward(g, store, x)?;
        let cls = g.slice(x, 1, 0, 1)?;
        g.reshape(cls, &[b, d])
    }
}
