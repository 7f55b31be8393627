//! Image sets and deterministic batch assembly for single- and dual-eye models.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::dataset::{DualEyeSample, Label, LabeledSample};
use crate::error::{Error, Result};
use crate::modelzoo::ModelInput;
use crate::preprocess::{eval_transform, load_image, train_transform, AugmentationPolicy, NormalizationStats, PlanarImage};
use crate::tensor::Tensor;

/// Where an image comes from.
#[derive(Clone, Debug)]
pub enum ImageRef {
    Path(PathBuf),
    Memory(Arc<PlanarImage>),
}

impl ImageRef {
    pub fn load(&self) -> Result<PlanarImage> {
        match self {
            ImageRef::Path(p) => load_image(p),
            ImageRef::Memory(img) => Ok((**img).clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Example {
    /// One entry for single-eye sets, `[left, right]` for dual-eye sets.
    pub images: Vec<ImageRef>,
    pub label: Label,
}

/// A labelled collection of images, single- or dual-eye.
#[derive(Clone, Debug)]
pub struct ImageSet {
    examples: Vec<Example>,
    dual: bool,
}

/// An assembled batch.
pub struct Batch {
    pub input: ModelInput,
    pub labels: Vec<usize>,
}

/// Augmentation applied while assembling a batch.
#[derive(Clone, Copy, Debug)]
pub struct Augment<'a> {
    pub policy: &'a AugmentationPolicy,
    pub seed: u64,
    pub epoch: usize,
}

pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ImageSet {
    pub fn single(root: &Path, samples: &[LabeledSample]) -> Self {
        let examples = samples
            .iter()
            .map(|s| Example {
                images: vec![ImageRef::Path(root.join(&s.image_path))],
                label: s.label,
            })
            .collect();
        ImageSet { examples, dual: false }
    }

    pub fn dual(root: &Path, pairs: &[DualEyeSample]) -> Self {
        let examples = pairs
            .iter()
            .map(|p| Example {
                images: vec![ImageRef::Path(root.join(&p.left_path)), ImageRef::Path(root.join(&p.right_path))],
                label: p.label,
            })
            .collect();
        ImageSet { examples, dual: true }
    }

    /// Builds a set from examples; every example must carry one image (or two when `dual`).
    pub fn from_examples(examples: Vec<Example>, dual: bool) -> Result<Self> {
        let want = if dual { 2 } else { 1 };
        if let Some(bad) = examples.iter().position(|e| e.images.len() != want) {
            return Err(Error::Input(format!("example {bad} has {} images, expected {want}", examples[bad].images.len())));
        }
        Ok(ImageSet { examples, dual })
    }

    pub fn in_memory(images: Vec<(PlanarImage, Label)>) -> Self {
        let examples = images
            .into_iter()
            .map(|(img, label)| Example {
                images: vec![ImageRef::Memory(Arc::new(img))],
                label,
            })
            .collect();
        ImageSet { examples, dual: false }
    }

    /// Decodes every referenced image once and keeps it in memory.
    pub fn preload(&self) -> Result<ImageSet> {
        let examples = self
            .examples
            .par_iter()
            .map(|e| {
                let images = e
                    .images
                    .iter()
                    .map(|r| r.load().map(|img| ImageRef::Memory(Arc::new(img))))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Example { images, label: e.label })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageSet { examples, dual: self.dual })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn is_dual(&self) -> bool {
        self.dual
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label.index()).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        ImageSet {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            dual: self.dual,
        }
    }

    /// Assembles the examples at `indices`. With `augment`, each image's transform seed is
    /// derived from `(seed, epoch, example index, eye)`, so batches do not depend on order
    /// of evaluation or thread count.
    pub fn batch(&self, indices: &[usize], augment: Option<Augment<'_>>, stats: &NormalizationStats) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let eyes = if self.dual { 2 } else { 1 };
        let tensors = indices
            .par_iter()
            .map(|&i| {
                let ex = self
                    .examples
                    .get(i)
                    .ok_or_else(|| Error::Input(format!("example index {i} out of range")))?;
                (0..eyes)
                    .map(|eye| {
                        let img = ex.images[eye].load()?;
                        match augment {
                            Some(a) => train_transform(
                                &img,
                                a.policy,
                                stats,
                                mix_seed(&[a.seed, a.epoch as u64, i as u64, eye as u64]),
                            ),
                            None => eval_transform(&img, stats),
                        }
                    })
                    .collect::<Result<Vec<Tensor>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = indices.iter().map(|&i| self.examples[i].label.index()).collect();
        let stack = |eye: usize| Tensor::stack(&tensors.iter().map(|t| t[eye].clone()).collect::<Vec<_>>());
        let input = if self.dual {
            ModelInput::Pair {
                left: stack(0)?,
                right: stack(1)?,
            }
        } else {
            ModelInput::Single(stack(0)?)
        };
        Ok(Batch { input, labels })
    }
}
