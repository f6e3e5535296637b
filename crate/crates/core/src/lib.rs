//! Progressive-sampling vision transformer: tensors with hand-written
//! adjoints, the sampling loop, encoder layers, a convolutional stem, the
//! assembled classifier, training utilities and gradient audits.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod kinks;
pub mod mode;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod sampling;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod trajectory;
pub mod transformer;

pub use data::Dataset;
pub use error::{Error, Result};
pub use mode::Mode;
pub use model::{cost_report, count_flops, count_params, CostReport, ForwardPass, ParamStore, PsVit, PsVitConfig};
pub use params::{ParamKind, Params};
pub use scalar::Real;
pub use tensor::Tensor;
pub use trajectory::TrajectoryLog;
