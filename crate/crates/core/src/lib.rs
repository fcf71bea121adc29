//! Core numerics for mixed-cost video classification.
//!
//! Everything in this crate is `no_std` (it needs `alloc`): a small dense
//! tensor type with a reverse-mode tape, the recurrent feature aggregators
//! (FAST-GRU, GRU, LSTM, concat, score averaging), the clip backbones, the
//! clip scheduler, the analytic MAC cost model and the synthetic video tasks.
//! File formats, training loops and the command line live in `faster-lab`.

#![no_std]

extern crate alloc;

pub mod aggregate;
pub mod backbone;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod param;
pub mod schedule;
pub mod synth;
pub mod tensor;

mod kernels;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, Gradients, Mode, Var};
pub use kernels::Window3;
pub use param::{ParamId, ParamStore};
pub use tensor::{DType, Real, Tensor};
