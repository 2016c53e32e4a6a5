//! Seedable feed-forward network engine.

mod model;
mod spec;
mod train;

pub use model::{argmax, softmax, DenseParams, Lineage, LossKind, Model, Provenance, Targets};
pub use spec::{Activation, Families, FamilyId, FamilyShape, LayerSpec, ModelSpec};
pub use train::{train, train_on, Optimizer, TrainConfig};
