//! A small reverse-mode automatic differentiation engine.
//!
//! Every value is a dense row-major matrix ([`Tensor`]); vectors are `1×n`
//! matrices and scalars are `1×1`. Operations are recorded on a [`Tape`] and
//! differentiated with [`Tape::backward`] or, when upstream gradients come from
//! somewhere else, [`Tape::backward_from`].
//!
//! The engine is generic over [`Real`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference verification. Inner
//! products and reductions always accumulate in `f64`.

mod check;
mod error;
mod meter;
mod params;
mod tape;
mod tensor;

pub use check::{finite_diff_check, relative_error};
pub use error::{AutogradError, Result};
pub use meter::MemoryMeter;
pub use params::{GradStore, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};

use num_traits::Float;
use std::fmt::Debug;

/// Floating point element type of a tensor.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
