use super::layers::join;
use super::FEATURE_TAP;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::PoolGeom;
use crate::nn::{BatchNorm2d, Conv2d, Init, ParamStore};

const BLOCKS: [usize; 4] = [6, 12, 24, 16];
const GROWTH: usize = 32;
const BN_SIZE: usize = 4;

struct DenseLayer {
    norm1: BatchNorm2d,
    conv1: Conv2d,
    norm2: BatchNorm2d,
    conv2: Conv2d,
}

struct Transition {
    norm: BatchNorm2d,
    conv: Conv2d,
}

pub(crate) struct DenseNet121 {
    conv0: Conv2d,
    norm0: BatchNorm2d,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    norm5: BatchNorm2d,
}

impl DenseNet121 {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, prefix: &str) -> Self {
        let p = |n: &str| join(prefix, &format!("features.{n}"));
        let conv0 = Conv2d::new(store, init, &p("conv0"), 3, 64, 7, 2, 3, 1, false);
        let norm0 = BatchNorm2d::new(store, &p("norm0"), 64);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let mut c = 64;
        for (bi, &n) in BLOCKS.iter().enumerate() {
            let mut layers = Vec::new();
            for li in 0..n {
                let l = p(&format!("denseblock{}.denselayer{}", bi + 1, li + 1));
                let cin = c + li * GROWTH;
                let mid = BN_SIZE * GROWTH;
                layers.push(DenseLayer {
                    norm1: BatchNorm2d::new(store, &join(&l, "norm1"), cin),
                    conv1: Conv2d::new(store, init, &join(&l, "conv1"), cin, mid, 1, 1, 0, 1, false),
                    norm2: BatchNorm2d::new(store, &join(&l, "norm2"), mid),
                    conv2: Conv2d::new(store, init, &join(&l, "conv2"), mid, GROWTH, 3, 1, 1, 1, false),
                });
            }
            blocks.push(layers);
            c += n * GROWTH;
            if bi + 1 < BLOCKS.len() {
                let t = p(&format!("transition{}", bi + 1));
                transitions.push(Transition {
                    norm: BatchNorm2d::new(store, &join(&t, "norm"), c),
                    conv: Conv2d::new(store, init, &join(&t, "conv"), c, c / 2, 1, 1, 0, 1, false),
                });
                c /= 2;
            }
        }
        let norm5 = BatchNorm2d::new(store, &p("norm5"), c);
        DenseNet121 {
            conv0,
            norm0,
            blocks,
            transitions,
            norm5,
        }
    }

    pub fn forward_features(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let x = self.conv0.forward(g, store, x)?;
        let x = self.norm0.forward(g, store, x)?;
        let x = g.relu(x);
        let mut x = g.max_pool2d(x, PoolGeom { kernel: 3, stride: 2, pad: 1 })?;
        for (bi, layers) in self.blocks.iter().enumerate() {
            let mut feats = vec![x];
            for l in layers {
                let cat = if feats.len() == 1 { feats[0] } else { g.concat(&feats, 1)? };
                let y = l.norm1.forward(g, store, cat)?;
                let y = g.relu(y);
                let y = l.conv1.forward(g, store, y)?;
                let y = l.norm2.forward(g, store, y)?;
                let y = g.relu(y);
                feats.push(l.conv2.forward(g, store, y)?);
            }
            x = g.concat(&feats, 1)?;
            if let Some(t) = self.transitions.get(bi) {
                let y = t.norm.forward(g, store, x)?;
                let y = g.relu(y);
                let y = t.conv.forward(g, store, y)?;
                x = g.avg_pool2d(y, PoolGeom { kernel: 2, stride: 2, pad: 0 })?;
            }
        }
        let y = self.norm5.forward(g, store, x)?;
        let f = g.relu(y);
        g.tap(FEATURE_TAP, f);
        g.global_avg_pool(f)
    }
}
