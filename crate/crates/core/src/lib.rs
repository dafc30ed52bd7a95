pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod flops;
pub mod mnist;
pub mod model;
pub mod pruning;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, ValueId};
pub use error::{Error, Result, ShapeError};
pub use model::{build_lenet5, FeatureId, LayerSpec, Lineage, MaskableModel, Params};
pub use tensor::{Scalar, Tensor};
pub use pruning::{BetaMode, PruneCandidate, PruneEvent, SignalAccumulator, SignalKind};
pub use mnist::Dataset;
pub use checkpoint::Checkpoint;
