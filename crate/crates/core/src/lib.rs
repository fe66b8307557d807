//! RGB-D salient object detection toolkit: depth enhancement, a forward-only
//! cross-modal fusion pyramid, training losses and evaluation metrics.

pub mod depth;
pub mod fusion;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod oracle;
pub mod tensor;
pub mod weights;

pub use depth::{DepthMap, EnhanceConfig, HhaImage, Intrinsics, OtsuResult};
pub use fusion::{forward_full, BackboneKind, ForwardConfig, RgbImage, SaliencyOutput};
pub use maps::{BinaryMask, ScalarMap};
pub use metrics::{EvalPair, MetricConfig, MetricReport};
pub use tensor::{ResizeMode, Tensor};
pub use weights::{NetworkLayout, NetworkWeights, WeightStore};
