use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{checkpoint, Arch, Backbone, ModelHandle, ModelSpec, Net, Pretrained, Regime};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, LinearInit, ParamStore};

/// Prefix under which the shared feature extractor's tensors are stored.
pub(crate) const BACKBONE_PREFIX: &str = "backbone.";
/// Tap holding the projected per-eye embeddings, left batch first.
pub const EMBED_TAP: &str = "embedding";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiameseSpec {
    pub backbone: ModelSpec,
    pub projection_dim: usize,
    pub fused_dim: usize,
    pub hidden_dim: usize,
    pub projection_dropout: f32,
    pub classifier_dropout: f32,
}

impl Default for SiameseSpec {
    fn default() -> Self {
        SiameseSpec {
            backbone: ModelSpec::new(Backbone::MobilenetV2, Regime::FullFinetune),
            projection_dim: 128,
            fused_dim: 256,
            hidden_dim: 64,
            projection_dropout: 0.3,
            classifier_dropout: 0.3,
        }
    }
}

/// Builds the weight-sharing dual-eye classifier.
///
/// `pretrained` may point at a single-eye checkpoint or weight file of the
/// same backbone (e.g. the distilled student); its non-head tensors seed the
/// shared extractor.
pub fn build_siamese(spec: &SiameseSpec, pretrained: &Pretrained, seed: u64) -> Result<ModelHandle> {
    let bb = spec.backbone.backbone;
    if !bb.is_cnn() || bb.feature_dim() != 1280 || spec.backbone.feature_dim != 1280 {
        return Err(Error::Construction(format!(
            "dual-eye model needs a 1280-d convolutional extractor, `{bb}` gives {}",
            bb.feature_dim()
        )));
    }
    if spec.fused_dim != 2 * spec.projection_dim {
        return Err(Error::Construction(format!(
            "fused_dim {} must be twice projection_dim {}",
            spec.fused_dim, spec.projection_dim
        )));
    }
    for p in [spec.projection_dropout, spec.classifier_dropout] {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout {p} outside [0, 1)")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init { rng: &mut rng };
    let mut store = ParamStore::new();
    let arch = Arch::build(bb, &mut store, &mut init, BACKBONE_PREFIX.trim_end_matches('.'));
    let fi = LinearInit::FanInUniform;
    let projection = Linear::new(&mut store, &mut init, "projection", 1280, spec.projection_dim, true, fi);
    let fuse = Linear::new(&mut store, &mut init, "fuse", spec.fused_dim, spec.hidden_dim, true, fi);
    let classifier = Linear::new(
        &mut store,
        &mut init,
        "classifier",
        spec.hidden_dim,
        spec.backbone.num_classes,
        true,
        fi,
    );
    let mut model = ModelHandle {
        spec: spec.backbone.clone(),
        siamese: Some(spec.clone()),
        store,
        net: Net::Siamese {
            arch,
            projection,
            fuse,
            classifier,
            projection_dropout: spec.projection_dropout,
            classifier_dropout: spec.classifier_dropout,
        },
    };
    if let Pretrained::From(path) = pretrained {
        let file = super::weights_file(bb, path);
        let unavailable = |reason: String| Error::PretrainedUnavailable {
            backbone: bb.to_string(),
            reason,
        };
        let loaded = checkpoint::read_tensors(&file).map_err(|e| unavailable(e.to_string()))?;
        let src = ParamStore::from_map(loaded);
        let wanted = model
            .store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with(BACKBONE_PREFIX))
            .count();
        let copied = model.copy_matching(&src, |n| n.strip_prefix(BACKBONE_PREFIX).map(str::to_string));
        if copied != wanted {
            return Err(unavailable(format!(
                "{} has only {copied} of {wanted} extractor tensors",
                file.display()
            )));
        }
    }
    model.set_regime(spec.backbone.regime);
    Ok(model)
}

impl ModelHandle {
    /// Seeds the shared extractor from a single-eye model of the same backbone.
    pub fn load_extractor_from(&mut self, single: &ModelHandle) -> Result<usize> {
        if !self.is_dual() || single.is_dual() || single.spec.backbone != self.spec.backbone {
            return Err(Error::Construction(
                "extractor transfer needs a single-eye model of the same backbone".into(),
            ));
        }
        Ok(self.copy_matching(&single.store, |n| n.strip_prefix(BACKBONE_PREFIX).map(str::to_string)))
    }
}
