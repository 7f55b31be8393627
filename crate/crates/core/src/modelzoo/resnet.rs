use super::layers::{join, ConvBn};
use super::FEATURE_TAP;
use crate::error::Result;
use crate::graph::{Activation, Graph, Var};
use crate::kernels::PoolGeom;
use crate::nn::{BatchNorm2d, Conv2d, Init, ParamStore};

const LAYERS: [usize; 4] = [3, 4, 6, 3];

struct Bottleneck {
    c1: ConvBn,
    c2: ConvBn,
    c3: ConvBn,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

pub(crate) struct ResNet50 {
    stem: ConvBn,
    blocks: Vec<Bottleneck>,
}

impl ResNet50 {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, prefix: &str) -> Self {
        let p = |n: &str| join(prefix, n);
        let relu = Some(Activation::Relu);
        let stem = ConvBn::new(store, init, &p("conv1"), &p("bn1"), 3, 64, 7, 2, 1, relu);
        let mut blocks = Vec::new();
        let mut cin = 64;
        for (li, &n) in LAYERS.iter().enumerate() {
            let width = 64 << li;
            let cout = width * 4;
            for bi in 0..n {
                let stride = if bi == 0 && li > 0 { 2 } else { 1 };
                let b = p(&format!("layer{}.{bi}", li + 1));
                let c1 = ConvBn::new(store, init, &join(&b, "conv1"), &join(&b, "bn1"), cin, width, 1, 1, 1, relu);
                let c2 = ConvBn::new(store, init, &join(&b, "conv2"), &join(&b, "bn2"), width, width, 3, stride, 1, relu);
                let c3 = ConvBn::new(store, init, &join(&b, "conv3"), &join(&b, "bn3"), width, cout, 1, 1, 1, None);
                let downsample = (bi == 0).then(|| {
                    let conv = Conv2d::new(store, init, &join(&b, "downsample.0"), cin, cout, 1, stride, 0, 1, false);
                    let bn = BatchNorm2d::new(store, &join(&b, "downsample.1"), cout);
                    (conv, bn)
                });
                blocks.push(Bottleneck { c1, c2, c3, downsample });
                cin = cout;
            }
        }
        ResNet50 { stem, blocks }
    }

    pub fn forward_features(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let x = self.stem.forward(g, store, x)?;
        let mut x = g.max_pool2d(x, PoolGeom { kernel: 3, stride: 2, pad: 1 })?;
        for b in &self.blocks {
            let y = b.c1.forward(g, store, x)?;
            let y = b.c2.forward(g, store, y)?;
            let y = b.c3.forward(g, store, y)?;
            let shortcut = match &b.downsample {
                Some((conv, bn)) => {
                    let s = conv.forward(g, store, x)?;
                    bn.forward(g, store, s)?
                }
                None => x,
            };
            let s = g.add(y, shortcut)?;
            x = g.relu(s);
        }
        g.tap(FEATURE_TAP, x);
        g.global_avg_pool(x)
    }
}
