//! Reverse-mode differentiation over dense matrices and the models built on it.

pub mod checkpoint;
pub mod decode;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;
pub mod transducer;
pub mod weighter;

pub use graph::{Graph, NodeId};
pub use params::{Adam, AdamConfig, Grads, ParamId, ParamStore};
pub use tensor::Matrix;
pub use transducer::{TransducerConfig, TransducerModel};
pub use weighter::{Pooling, WeighterConfig, WeighterInput, WeighterModel};
