//! Minimal layers with hand-written backward passes.
//!
//! Activations and gradients are `f64`; parameter values are kept on the
//! `f32` grid so 32-bit checkpoints are lossless.

mod adam;
mod batchnorm;
mod conv;
mod mat;
mod param;

pub use adam::Adam;
pub use batchnorm::{BatchNorm1d, BnCache};
pub use conv::Conv1d;
pub use mat::{gemm, Mat, View, ViewMut};
pub use param::{join, Param, Parameterized};

pub fn relu(x: &Mat) -> Mat {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient of ReLU given the layer's output.
pub fn relu_backward(y: &Mat, dy: &Mat) -> Mat {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
