//! A small NCHW tensor engine with reverse-mode autodiff, the multi-residual
//! coupled-attention backbone, the adaptive screening pyramid neck, a dense
//! detection head, detection metrics, a cost model and a synthetic bare-PCB
//! dataset generator.

pub mod aspn;
pub mod autograd;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod mrdcb;
pub mod nn;
pub mod ops;
pub mod params;
pub mod tensor;

pub use autograd::{Gradients, Tape, Var};
pub use config::{ExperimentConfig, Preset};
pub use error::{Error, Result};
pub use metrics::{BBox, Detection, EvalReport, GroundTruth};
pub use model::Detector;
pub use nn::{Ctx, Mode};
pub use params::{InitSpec, ParamId, ParamStore, ParamTensor, Role};
pub use tensor::{DType, Element, Shape, Tensor};
