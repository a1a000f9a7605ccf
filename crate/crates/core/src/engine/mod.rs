//! Minimal reverse-mode tensor engine.
//!
//! Values are `f32`. A [`Tape`] records one forward pass; parameters live in a
//! [`ParamStore`] and are copied onto the tape per step so that a store can be
//! updated freely between steps.

mod conv;
mod pool;
mod tape;
mod tensor;

pub use conv::ConvConfig;
pub use tape::{softmax_values, Gradients, Tape, Var};
pub use tensor::{ParamGroup, ParamId, ParamStore, Tensor};


/// Normwise relative error `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(floor, f64::max);
    diff / scale
}
