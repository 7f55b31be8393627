//! Backbone registry, training regimes and the dual-eye Siamese classifier.
//!
//! Parameter names follow the timm layout for each architecture so that
//! converted ImageNet weights load by name.

mod checkpoint;
mod densenet;
mod efficientnet;
mod layers;
mod mobilenet;
mod resnet;
mod siamese;
mod swin;
mod vit;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Init, Linear, LinearInit, ParamStore};
use crate::tensor::Tensor;

pub use checkpoint::{export_weights, load_checkpoint, save_checkpoint, CheckpointMeta};
pub use siamese::{build_siamese, SiameseSpec};

/// Name of the tap holding the final convolutional feature map (after its activation).
pub const FEATURE_TAP: &str = "features";
/// Name of the tap holding the pooled per-image embedding.
pub const POOLED_TAP: &str = "pooled";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Resnet50,
    Densenet121,
    EfficientnetB0,
    VitTiny,
    VitBase,
    SwinBase,
    DeitTiny,
    DeitBase,
    MobilenetV2,
}

impl Backbone {
    pub const ALL: [Backbone; 9] = [
        Backbone::Resnet50,
        Backbone::Densenet121,
        Backbone::EfficientnetB0,
        Backbone::VitTiny,
        Backbone::VitBase,
        Backbone::SwinBase,
        Backbone::DeitTiny,
        Backbone::DeitBase,
        Backbone::MobilenetV2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Resnet50 => "resnet50",
            Backbone::Densenet121 => "densenet121",
            Backbone::EfficientnetB0 => "efficientnet_b0",
            Backbone::VitTiny => "vit_tiny",
            Backbone::VitBase => "vit_base",
            Backbone::SwinBase => "swin_base",
            Backbone::DeitTiny => "deit_tiny",
            Backbone::DeitBase => "deit_base",
            Backbone::MobilenetV2 => "mobilenet_v2",
        }
    }

    pub fn feature_dim(self) -> usize {
        match self {
            Backbone::Resnet50 => 2048,
            Backbone::Densenet121 | Backbone::SwinBase => 1024,
            Backbone::EfficientnetB0 | Backbone::MobilenetV2 => 1280,
            Backbone::VitTiny | Backbone::DeitTiny => 192,
            Backbone::VitBase | Backbone::DeitBase => 768,
        }
    }

    /// Convolutional backbones expose a spatial feature map for Grad-CAM.
    pub fn is_cnn(self) -> bool {
        matches!(
            self,
            Backbone::Resnet50 | Backbone::Densenet121 | Backbone::EfficientnetB0 | Backbone::MobilenetV2
        )
    }

    /// Name prefix of the classification head.
    pub fn head_prefix(self) -> &'static str {
        match self {
            Backbone::Resnet50 => "fc.",
            Backbone::Densenet121 | Backbone::EfficientnetB0 | Backbone::MobilenetV2 => "classifier.",
            Backbone::VitTiny | Backbone::VitBase | Backbone::DeitTiny | Backbone::DeitBase => "head.",
            Backbone::SwinBase => "head.fc.",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::UnknownBackbone(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    FullFinetune,
    FrozenBackbone,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::FullFinetune => "full_finetune",
            Regime::FrozenBackbone => "frozen_backbone",
        }
    }

    /// Short label used in reports.
    pub fn short(self) -> &'static str {
        match self {
            Regime::FullFinetune => "FT",
            Regime::FrozenBackbone => "FR",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_finetune" => Ok(Regime::FullFinetune),
            "frozen_backbone" => Ok(Regime::FrozenBackbone),
            other => Err(Error::Parameter(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: Backbone,
    pub regime: Regime,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl ModelSpec {
    pub fn new(backbone: Backbone, regime: Regime) -> Self {
        ModelSpec {
            backbone,
            regime,
            num_classes: 2,
            feature_dim: backbone.feature_dim(),
        }
    }
}

/// Where pretrained backbone weights come from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Pretrained {
    /// Seeded random initialization.
    #[default]
    Random,
    /// A safetensors file, or a directory holding `<backbone>.safetensors`.
    From(PathBuf),
}

/// Batch fed to a classifier.
#[derive(Clone, Debug)]
pub enum ModelInput {
    Single(Tensor),
    Pair { left: Tensor, right: Tensor },
}

impl ModelInput {
    pub fn batch_size(&self) -> usize {
        match self {
            ModelInput::Single(x) => x.dim(0),
            ModelInput::Pair { left, .. } => left.dim(0),
        }
    }
}

pub(crate) enum Arch {
    MobileNetV2(mobilenet::MobileNetV2),
    ResNet50(resnet::ResNet50),
    DenseNet121(densenet::DenseNet121),
    EfficientNetB0(efficientnet::EfficientNetB0),
    Vit(vit::VisionTransformer),
    Swin(swin::SwinTransformer),
}

impl Arch {
    fn build(backbone: Backbone, store: &mut ParamStore, init: &mut Init<'_>, prefix: &str) -> Arch {
        match backbone {
            Backbone::MobilenetV2 => Arch::MobileNetV2(mobilenet::MobileNetV2::new(store, init, prefix)),
            Backbone::Resnet50 => Arch::ResNet50(resnet::ResNet50::new(store, init, prefix)),
            Backbone::Densenet121 => Arch::DenseNet121(densenet::DenseNet121::new(store, init, prefix)),
            Backbone::EfficientnetB0 => Arch::EfficientNetB0(efficientnet::EfficientNetB0::new(store, init, prefix)),
            Backbone::VitTiny | Backbone::DeitTiny => {
                Arch::Vit(vit::VisionTransformer::new(store, init, prefix, vit::VitConfig::tiny()))
            }
            Backbone::VitBase | Backbone::DeitBase => {
                Arch::Vit(vit::VisionTransformer::new(store, init, prefix, vit::VitConfig::base()))
            }
            Backbone::SwinBase => Arch::Swin(swin::SwinTransformer::new(store, init, prefix, swin::SwinConfig::base())),
        }
    }

    /// Pooled features `[B, feature_dim]`. CNNs tap their final feature map.
    fn features(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Arch::MobileNetV2(m) => m.forward_features(g, store, x),
            Arch::ResNet50(m) => m.forward_features(g, store, x),
            Arch::DenseNet121(m) => m.forward_features(g, store, x),
            Arch::EfficientNetB0(m) => m.forward_features(g, store, x),
            Arch::Vit(m) => m.forward_features(g, store, x),
            Arch::Swin(m) => m.forward_features(g, store, x),
        }
    }
}

pub(crate) enum Net {
    Single {
        arch: Arch,
        head: Linear,
    },
    Siamese {
        arch: Arch,
        projection: Linear,
        fuse: Linear,
        classifier: Linear,
        projection_dropout: f32,
        classifier_dropout: f32,
    },
}

/// A classifier together with its parameters and regime.
pub struct ModelHandle {
    pub spec: ModelSpec,
    /// Present for the dual-eye model.
    pub siamese: Option<SiameseSpec>,
    pub(crate) store: ParamStore,
    pub(crate) net: Net,
}

impl fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelHandle")
            .field("spec", &self.spec)
            .field("siamese", &self.siamese)
            .field("tensors", &self.store.len())
            .finish()
    }
}

fn input_check(g: &Graph, x: Var) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != 3 || s[0] == 0 {
        return Err(Error::Shape(format!("expected a non-empty [B, 3, H, W] batch, got {s:?}")));
    }
    Ok(())
}

impl ModelHandle {
    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_dual(&self) -> bool {
        self.siamese.is_some()
    }

    /// Display name used in reports and artifact file names.
    pub fn display_name(&self) -> String {
        if self.is_dual() {
            format!("dual_eye_{}", self.spec.backbone)
        } else {
            self.spec.backbone.to_string()
        }
    }

    /// Whether a parameter belongs to the part trained in the frozen regime.
    pub fn is_head_param(&self, name: &str) -> bool {
        match self.net {
            Net::Single { .. } => name.starts_with(self.spec.backbone.head_prefix()),
            Net::Siamese { .. } => !name.starts_with(siamese::BACKBONE_PREFIX),
        }
    }

    pub fn set_regime(&mut self, regime: Regime) {
        self.spec.regime = regime;
        match regime {
            Regime::FullFinetune => self.store.set_trainable_where(|_| true),
            Regime::FrozenBackbone => {
                let dual = self.is_dual();
                let prefix = self.spec.backbone.head_prefix();
                self.store.set_trainable_where(|n| {
                    if dual {
                        !n.starts_with(siamese::BACKBONE_PREFIX)
                    } else {
                        n.starts_with(prefix)
                    }
                });
            }
        }
    }

    pub fn trainable_params(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn total_params(&self) -> usize {
        self.store.weight_count()
    }

    /// Logits `[B, num_classes]` for a batch placed on `g`.
    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<Var> {
        match (input, &self.net) {
            (ModelInput::Single(x), Net::Single { .. }) => {
                let xv = g.input(x.clone(), false);
                self.forward_var(g, xv)
            }
            (ModelInput::Pair { left, right }, Net::Siamese { .. }) => {
                let l = g.input(left.clone(), false);
                let r = g.input(right.clone(), false);
                self.dual_forward_vars(g, l, r)
            }
            (ModelInput::Single(_), Net::Siamese { .. }) => {
                Err(Error::Input("the dual-eye model needs left/right image pairs".into()))
            }
            (ModelInput::Pair { .. }, Net::Single { .. }) => {
                Err(Error::Input("a single-eye model cannot take image pairs".into()))
            }
        }
    }

    /// Single-eye forward from a variable already on the graph.
    pub fn forward_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let Net::Single { arch, head } = &self.net else {
            return Err(Error::Input("the dual-eye model needs left/right image pairs".into()));
        };
        input_check(g, x)?;
        let f = arch.features(g, &self.store, x)?;
        g.tap(POOLED_TAP, f);
        head.forward(g, &self.store, f)
    }

    pub fn dual_forward_vars(&self, g: &mut Graph, left: Var, right: Var) -> Result<Var> {
        let Net::Siamese {
            arch,
            projection,
            fuse,
            classifier,
            projection_dropout,
            classifier_dropout,
        } = &self.net
        else {
            return Err(Error::Input("a single-eye model cannot take image pairs".into()));
        };
        input_check(g, left)?;
        input_check(g, right)?;
        if g.shape(left) != g.shape(right) {
            return Err(Error::Shape(format!(
                "left batch {:?} and right batch {:?} differ",
                g.shape(left),
                g.shape(right)
            )));
        }
        let b = g.shape(left)[0];
        // one pass through the shared extractor for both eyes
        let both = g.concat(&[left, right], 0)?;
        let f = arch.features(g, &self.store, both)?;
        g.tap(POOLED_TAP, f);
        let p = projection.forward(g, &self.store, f)?;
        let p = g.relu(p);
        let p = g.dropout(p, *projection_dropout);
        g.tap(siamese::EMBED_TAP, p);
        let pl = g.slice(p, 0, 0, b)?;
        let pr = g.slice(p, 0, b, b)?;
        let z = g.concat(&[pl, pr], 1)?;
        let h = fuse.forward(g, &self.store, z)?;
        let h = g.relu(h);
        let h = g.dropout(h, *classifier_dropout);
        classifier.forward(g, &self.store, h)
    }

    /// Eval-mode logits for a batch, without building gradients.
    pub fn predict(&self, input: &ModelInput) -> Result<Tensor> {
        let mut g = Graph::inference();
        let y = self.forward(&mut g, input)?;
        Ok(g.value(y).clone())
    }

    /// Eval-mode dual-eye logits.
    pub fn dual_forward(&self, left: &Tensor, right: &Tensor) -> Result<Tensor> {
        if left.rank() != 4 || right.rank() != 4 || left.dim(0) != right.dim(0) {
            return Err(Error::Shape(format!(
                "left batch {:?} and right batch {:?} differ",
                left.shape(),
                right.shape()
            )));
        }
        self.predict(&ModelInput::Pair {
            left: left.clone(),
            right: right.clone(),
        })
    }

    /// Layers usable as Grad-CAM targets.
    pub fn cam_layers(&self) -> Vec<&'static str> {
        if self.spec.backbone.is_cnn() {
            vec![FEATURE_TAP]
        } else {
            Vec::new()
        }
    }

    /// Copies every tensor whose name exists in `other`'s store with the same shape,
    /// mapping names through `rename`. Returns the number of tensors copied.
    pub fn copy_matching(&mut self, other: &ParamStore, rename: impl Fn(&str) -> Option<String>) -> usize {
        let mut copied = 0;
        let names: Vec<String> = self.store.entries().iter().map(|e| e.name.clone()).collect();
        for name in names {
            let Some(src) = rename(&name) else { continue };
            if let Some(t) = other.by_name(&src) {
                if self.store.assign(&name, t.clone()).is_ok() {
                    copied += 1;
                }
            }
        }
        copied
    }
}

fn weights_file(backbone: Backbone, path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{}.safetensors", backbone.name()))
    } else {
        path.to_path_buf()
    }
}

/// Builds a classifier with a fresh `feature_dim -> num_classes` head.
pub fn build_model(spec: &ModelSpec, pretrained: &Pretrained, seed: u64) -> Result<ModelHandle> {
    if spec.feature_dim != spec.backbone.feature_dim() {
        return Err(Error::Construction(format!(
            "{} produces {}-d features, spec says {}",
            spec.backbone,
            spec.backbone.feature_dim(),
            spec.feature_dim
        )));
    }
    if spec.num_classes < 2 {
        return Err(Error::Construction("num_classes must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init { rng: &mut rng };
    let mut store = ParamStore::new();
    let arch = Arch::build(spec.backbone, &mut store, &mut init, "");
    let head_name = spec.backbone.head_prefix().trim_end_matches('.');
    let scheme = if spec.backbone.is_cnn() {
        LinearInit::FanInUniform
    } else {
        LinearInit::TruncNormal
    };
    let head = Linear::new(&mut store, &mut init, head_name, spec.feature_dim, spec.num_classes, true, scheme);
    let mut model = ModelHandle {
        spec: spec.clone(),
        siamese: None,
        store,
        net: Net::Single { arch, head },
    };
    if let Pretrained::From(path) = pretrained {
        let file = weights_file(spec.backbone, path);
        let loaded = checkpoint::read_tensors(&file).map_err(|e| Error::PretrainedUnavailable {
            backbone: spec.backbone.to_string(),
            reason: e.to_string(),
        })?;
        let head_prefix = spec.backbone.head_prefix();
        let mut missing = Vec::new();
        for e in model.store.entries().to_vec() {
            if e.name.starts_with(head_prefix) {
                continue;
            }
            match loaded.get(&e.name) {
                Some(t) => model.store.assign(&e.name, t.clone()).map_err(|err| Error::PretrainedUnavailable {
                    backbone: spec.backbone.to_string(),
                    reason: err.to_string(),
                })?,
                None => missing.push(e.name),
            }
        }
        if !missing.is_empty() {
            return Err(Error::PretrainedUnavailable {
                backbone: spec.backbone.to_string(),
                reason: format!("{} tensors missing from {}, e.g. `{}`", missing.len(), file.display(), missing[0]),
            });
        }
    }
    model.set_regime(spec.regime);
    Ok(model)
}

/// Number of parameters an optimizer would update.
pub fn count_trainable_params(model: &ModelHandle) -> usize {
    model.trainable_params()
}
