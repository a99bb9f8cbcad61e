//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass in creation order,
//! which is also a valid topological order, so [`Tape::backward`] is a single
//! reverse sweep. Trainable tensors live in a [`ParamStore`] and are copied onto
//! the tape at the start of each pass; gradients are accumulated back into the
//! store afterwards.
//!
//! All kernels are generic over [`Real`] so that training can run in `f32`
//! while gradient checks run the very same code in `f64`.

mod kernels;
pub mod layers;
mod params;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use layers::{LayerNormLayer, LinearLayer, Mlp, MlpBlock, TransformerBlock};
pub use params::{ParamId, ParamStore};
pub use tape::{CustomOp, Tape, TensorNode, Var};

/// Floating point scalar usable by the tape.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal, panicking only for values the type cannot hold.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in target float type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// `sqrt(2 / pi)`, the constant of the tanh GELU approximation.
pub(crate) const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub(crate) const GELU_CUBIC: f64 = 0.044_715;

/// Tanh approximation of GELU evaluated in `f64`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

/// Numerical epsilon added to the variance inside LayerNorm.
pub const LAYER_NORM_EPS: f64 = 1e-5;
