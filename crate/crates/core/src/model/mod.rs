//! Segmentation network, head expansion and frozen memory snapshots.

pub mod checkpoint;
mod label_space;
pub mod linknet;
pub mod nn;

use std::sync::Arc;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use label_space::LabelSpace;
pub use linknet::{ArchConfig, ForwardCache, NetOutput, SegNet, ENCODER_STRIDE};

use crate::error::Result;
use crate::types::ImageChip;

/// The trainable `f32` network.
pub type SegModel = SegNet<f32>;

/// Single-image forward result.
#[derive(Debug, Clone)]
pub struct SegOutput {
    /// `(num_classes, H, W)`
    pub logits: Array3<f32>,
    /// `(C_f, H / 8, W / 8)`
    pub features: Array3<f32>,
}

/// How the appended head row starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    #[default]
    Zero,
    BackgroundCopy,
}

impl SegModel {
    pub fn forward(&self, image: &ImageChip) -> Result<SegOutput> {
        let x = image.data().view().insert_axis(Axis(0)).to_owned();
        let (out, _) = self.forward_batch(&x)?;
        Ok(SegOutput {
            logits: out.logits.index_axis_move(Axis(0), 0),
            features: out.features.index_axis_move(Axis(0), 0),
        })
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn weights_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in self.params().iter() {
            hasher.update(name.as_bytes());
            for &d in tensor.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in tensor.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Returns a copy of `model` whose head has one more output for `new_class_name`.
pub fn expand_head(model: &SegModel, new_class_name: &str, init: HeadInit) -> Result<SegModel> {
    let copy_from = match init {
        HeadInit::Zero => None,
        HeadInit::BackgroundCopy => Some(model.label_space().background_id()),
    };
    model.with_expanded_head(new_class_name, copy_from)
}

/// Frozen copy of a model: the memory network.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    model: Arc<SegModel>,
    hash: Arc<str>,
}

impl ModelSnapshot {
    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn label_space(&self) -> &LabelSpace {
        self.model.label_space()
    }

    pub fn forward(&self, image: &ImageChip) -> Result<SegOutput> {
        self.model.forward(image)
    }

    /// Hash taken when the snapshot was created.
    pub fn weights_hash(&self) -> &str {
        &self.hash
    }

    /// Recomputes the hash from the stored weights.
    pub fn verify(&self) -> bool {
        self.model.weights_hash() == *self.hash
    }
}

pub fn snapshot(model: &SegModel) -> ModelSnapshot {
    ModelSnapshot {
        hash: model.weights_hash().into(),
        model: Arc::new(model.clone()),
    }
}
