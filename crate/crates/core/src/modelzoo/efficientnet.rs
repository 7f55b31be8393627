use super::layers::{join, ConvBn};
use super::FEATURE_TAP;
use crate::error::Result;
use crate::graph::{Activation, Graph, Var};
use crate::nn::{Conv2d, Init, ParamStore};

const ACT: Option<Activation> = Some(Activation::Silu);

/// (expansion, kernel, first stride, out channels, repeats) per MBConv stage.
const STAGES: [(usize, usize, usize, usize, usize); 6] = [
    (6, 3, 2, 24, 2),
    (6, 5, 2, 40, 2),
    (6, 3, 2, 80, 3),
    (6, 5, 1, 112, 3),
    (6, 5, 2, 192, 4),
    (6, 3, 1, 320, 1),
];

/// Squeeze-excitation gate; the reduced width is a quarter of the block input.
struct SqueezeExcite {
    reduce: Conv2d,
    expand: Conv2d,
}

impl SqueezeExcite {
    fn new(store: &mut ParamStore, init: &mut Init<'_>, prefix: &str, chs: usize, block_in: usize) -> Self {
        let rd = block_in / 4;
        SqueezeExcite {
            reduce: Conv2d::new(store, init, &join(prefix, "conv_reduce"), chs, rd, 1, 1, 0, 1, true),
            expand: Conv2d::new(store, init, &join(prefix, "conv_expand"), rd, chs, 1, 1, 0, 1, true),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let pooled = g.global_avg_pool(x)?;
        let pooled = g.reshape(pooled, &[s[0], s[1], 1, 1])?;
        let r = self.reduce.forward(g, store, pooled)?;
        let r = g.silu(r);
        let e = self.expand.forward(g, store, r)?;
        let gate = g.sigmoid(e);
        g.mul(x, gate)
    }
}

enum Block {
    DepthwiseSeparable {
        dw: ConvBn,
        se: SqueezeExcite,
        pw: ConvBn,
    },
    InvertedResidual {
        pw: ConvBn,
        dw: ConvBn,
        se: SqueezeExcite,
        pwl: ConvBn,
        skip: bool,
    },
}

pub(crate) struct EfficientNetB0 {
    stem: ConvBn,
    blocks: Vec<Block>,
    head: ConvBn,
}

impl EfficientNetB0 {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, prefix: &str) -> Self {
        let p = |n: &str| join(prefix, n);
        let stem = ConvBn::new(store, init, &p("conv_stem"), &p("bn1"), 3, 32, 3, 2, 1, ACT);
        let b0 = p("blocks.0.0");
        let mut blocks = vec![Block::DepthwiseSeparable {
            dw: ConvBn::new(store, init, &join(&b0, "conv_dw"), &join(&b0, "bn1"), 32, 32, 3, 1, 32, ACT),
            se: SqueezeExcite::new(store, init, &join(&b0, "se"), 32, 32),
            pw: ConvBn::new(store, init, &join(&b0, "conv_pw"), &join(&b0, "bn2"), 32, 16, 1, 1, 1, None),
        }];
        let mut cin = 16;
        for (si, &(e, k, s, c, n)) in STAGES.iter().enumerate() {
            for bi in 0..n {
                let stride = if bi == 0 { s } else { 1 };
                let mid = cin * e;
                let b = p(&format!("blocks.{}.{bi}", si + 1));
                blocks.push(Block::InvertedResidual {
                    pw: ConvBn::new(store, init, &join(&b, "conv_pw"), &join(&b, "bn1"), cin, mid, 1, 1, 1, ACT),
                    dw: ConvBn::new(store, init, &join(&b, "conv_dw"), &join(&b, "bn2"), mid, mid, k, stride, mid, ACT),
                    se: SqueezeExcite::new(store, init, &join(&b, "se"), mid, cin),
                    pwl: ConvBn::new(store, init, &join(&b, "conv_pwl"), &join(&b, "bn3"), mid, c, 1, 1, 1, None),
                    skip: stride == 1 && cin == c,
                });
                cin = c;
            }
        }
        let head = ConvBn::new(store, init, &p("conv_head"), &p("bn2"), cin, 1280, 1, 1, 1, ACT);
        EfficientNetB0 { stem, blocks, head }
    }

    pub fn forward_features(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut x = self.stem.forward(g, store, x)?;
        for block in &self.blocks {
            x = match block {
                Block::DepthwiseSeparable { dw, se, pw } => {
                    let y = dw.forward(g, store, x)?;
                    let y = se.forward(g, store, y)?;
                    pw.forward(g, store, y)?
                }
                Block::InvertedResidual { pw, dw, se, pwl, skip } => {
                    let y = pw.forward(g, store, x)?;
                    let y = dw.forward(g, store, y)?;
                    let y = se.forward(g, store, y)?;
                    let y = pwl.forward(g, store, y)?;
                    if *skip {
                        g.add(y, x)?
                    } else {
                        y
                    }
                }
            };
        }
        let f = self.head.forward(g, store, x)?;
        g.tap(FEATURE_TAP, f);
        g.global_avg_pool(f)
    }
}
