//! Numeric substrate: dense `f64` tensors, a reverse-mode autodiff tape,
//! SGD/Adam optimizers, the polynomial learning-rate schedule and spectral
//! normalization.
//!
//! ```
//! use tensorcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(&Tensor::new(&[1], vec![3.0]).unwrap().with_requires_grad(true));
//! let y = tape.square(x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

mod error;
pub mod gradcheck;
pub mod io;
mod kernels;
mod ops;
pub mod optim;
pub mod spectral;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::gradcheck;
pub use ops::LOG1M_CLAMP;
pub use optim::{poly_lr, AdamConfig, AdamState, SgdConfig, SgdState};
pub use spectral::{spectral_normalize, spectral_normalize_tensor, SpectralState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Tensor, MAX_RANK};
