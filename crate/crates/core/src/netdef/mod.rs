//! Model construction, receptive fields, forward pass and fusion.

pub mod checkpoint;
pub mod fusion;
pub mod model;
pub mod rf;
pub mod spec;

pub use fusion::fuse_predictions;
pub use model::{build_model, DflHead, FilterBank, Model, StreamOutputs, TapeForward, Trace};
pub use rf::{receptive_field, ReceptiveFieldInfo};
pub use spec::{BackboneSpec, DflModuleSpec, LayerKind, LayerSpec, ModelSpec, PoolMode, TapPoint};
