//! A small convolutional classifier written from scratch: layers with exact
//! backward passes, Adam, a training loop over balanced augmented epochs,
//! whole-image classification, metrics and checkpoints.
//!
//! Activations are `Tensor4` in batch, height, width, channel order. Every
//! matrix product goes through one blocked GEMM whose per-element
//! summation order does not depend on the batch size, so batched and
//! per-sample inference agree.

mod checkpoint;
mod eval;
mod layers;
mod model;
mod optim;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, TrainedModel};
pub use eval::{classify_image, classify_image_with_probabilities, evaluate, write_confusion_csv, Metrics};
pub use layers::{relu, relu_backward, softmax, softmax_cross_entropy, BatchNorm, Conv2d, Dense, Dropout, Mode};
pub use model::{
    patches_to_tensor, train, train_epoch, write_history, Cnn, EpochStats, ModelConfig, TrainConfig,
};
pub use optim::{Adam, Param};
pub use tensor::Tensor4;

use serde::{Deserialize, Serialize};

/// Scalar type of the matrix products inside the convolution layers.
///
/// `F64` computes everything in double precision. `F32` rounds the
/// convolution operands to single precision for the products and keeps
/// parameters, accumulation across layers, batch norm and the optimizer in
/// double precision; it roughly halves training time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    #[default]
    F32,
}

pub(crate) trait Elem: Copy + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// # Safety
    /// Strides must keep every access inside the three buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    );
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
}

/// `c = op(a) * op(b) + beta * c` for row-major `a` (`m x k`, or `k x m`
/// when `ta`) and `b` (`k x n`, or `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Elem>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assert above bounds every index the strides can reach.
    unsafe {
        T::raw_gemm(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize);
    }
}
