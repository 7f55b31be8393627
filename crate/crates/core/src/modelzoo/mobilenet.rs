use super::layers::{join, ConvBn};
use super::FEATURE_TAP;
use crate::error::Result;
use crate::graph::{Activation, Graph, Var};
use crate::nn::{Init, ParamStore};

const ACT: Option<Activation> = Some(Activation::Relu6);

/// (expansion, out channels, repeats, first stride) per inverted-residual stage.
const STAGES: [(usize, usize, usize, usize); 6] = [
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

enum Block {
    DepthwiseSeparable { dw: ConvBn, pw: ConvBn },
    InvertedResidual { pw: ConvBn, dw: ConvBn, pwl: ConvBn, skip: bool },
}

pub(crate) struct MobileNetV2 {
    stem: ConvBn,
    blocks: Vec<Block>,
    head: ConvBn,
}

impl MobileNetV2 {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, prefix: &str) -> Self {
        let p = |n: &str| join(prefix, n);
        let stem = ConvBn::new(store, init, &p("conv_stem"), &p("bn1"), 3, 32, 3, 2, 1, ACT);
        let mut blocks = Vec::new();
        let b0 = p("blocks.0.0");
        blocks.push(Block::DepthwiseSeparable {
            dw: ConvBn::new(store, init, &join(&b0, "conv_dw"), &join(&b0, "bn1"), 32, 32, 3, 1, 32, ACT),
            pw: ConvBn::new(store, init, &join(&b0, "conv_pw"), &join(&b0, "bn2"), 32, 16, 1, 1, 1, None),
        });
        let mut cin = 16;
        for (si, &(t, c, n, s)) in STAGES.iter().enumerate() {
            for bi in 0..n {
                let stride = if bi == 0 { s } else { 1 };
                let mid = cin * t;
                let b = p(&format!("blocks.{}.{bi}", si + 1));
                blocks.push(Block::InvertedResidual {
                    pw: ConvBn::new(store, init, &join(&b, "conv_pw"), &join(&b, "bn1"), cin, mid, 1, 1, 1, ACT),
                    dw: ConvBn::new(store, init, &join(&b, "conv_dw"), &join(&b, "bn2"), mid, mid, 3, stride, mid, ACT),
                    pwl: ConvBn::new(store, init, &join(&b, "conv_pwl"), &join(&b, "bn3"), mid, c, 1, 1, 1, None),
                    skip: stride == 1 && cin == c,
                });
                cin = c;
            }
        }
        let head = ConvBn::new(store, init, &p("conv_head"), &p("bn2"), cin, 1280, 1, 1, 1, ACT);
        MobileNetV2 { stem, blocks, head }
    }

    pub fn forward_features(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut x = self.stem.forward(g, store, x)?;
        for block in &self.blocks {
            x = match block {
                Block::DepthwiseSeparable { dw, pw } => {
                    let y = dw.forward(g, store, x)?;
                    pw.forward(g, store, y)?
                }
                Block::InvertedResidual { pw, dw, pwl, skip } => {
                    let y = pw.forward(g, store, x)?;
                    let y = dw.forward(g, store, y)?;
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
