//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. [`Tape::grad`]
//! walks the record backwards; with `create_graph` set, the backward pass is
//! itself recorded so penalties on gradients (such as a critic's
//! gradient-norm penalty) can be optimized.
//!
//! ```
//! use bpcgen_tape::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.variable(Tensor::from_vec([1, 2], vec![3.0, -1.0]));
//! let y = (x * x).sum(); // x₀² + x₁²
//! let dx = tape.grad(y, &[x], true)[0];
//! assert_eq!(dx.value().data(), &[6.0, -2.0]);
//! let d2 = tape.grad(dx.sum(), &[x], false)[0];
//! assert_eq!(d2.value().data(), &[2.0, 2.0]);
//! ```

pub mod fd;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{
    add_row, col2im, gather_rows, im2col, matmul, scatter_add_rows, sum_rows, ConvGeometry, Real,
    Tensor,
};
