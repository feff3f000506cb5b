//! Seg-LSTM semantic segmentation: a Vision-LSTM encoder built from
//! stabilized mLSTM cells, a UperNet decoder, the training recipe and mIoU
//! evaluation, all on a small float64 reverse-mode autodiff engine.

pub mod check;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod xlstm;

pub use error::{Error, Result};
pub use params::{Init, ParamSpec, ParamStore};
pub use tensor::{Tape, Tensor, Var};
