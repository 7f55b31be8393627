use crate::error::Result;
use crate::graph::{Activation, Graph, Var};
use crate::nn::{BatchNorm2d, Conv2d, Init, ParamStore};

/// Joins a prefix and a leaf name with a dot, skipping an empty prefix.
pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Convolution without bias, batch norm and an optional activation, with
/// the conv and norm named independently (timm style: `conv_pw` + `bn1`).
#[derive(Clone, Debug)]
pub(crate) struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Option<Activation>,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        conv_name: &str,
        bn_name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        act: Option<Activation>,
    ) -> Self {
        let conv = Conv2d::new(store, init, conv_name, cin, cout, kernel, stride, kernel / 2, groups, false);
        let bn = BatchNorm2d::new(store, bn_name, cout);
        ConvBn { conv, bn, act }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y)?;
        Ok(match self.act {
            Some(a) => g.activation(y, a),
            None => y,
        })
    }
}
