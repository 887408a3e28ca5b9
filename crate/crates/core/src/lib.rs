//! Streaming CNN inference runtime with a flattened 1-D convolution core.
//!
//! The crate executes feed-forward CNNs (convolution, max pooling, LRN,
//! ReLU, fully connected, softmax, elementwise add, concat) two ways:
//!
//! * a plain sequential reference executor, and
//! * a four-stage pipeline per fused segment — DataIn, Compute, Aux,
//!   DataOut — connected by bounded channels, so interlayer tensors inside a
//!   segment never touch the global-memory traffic ledger.
//!
//! Convolution is computed in its flattened form: each output pixel's window
//! is gathered into a vector indexed by `x_i = c*K*K + ky*K + kx` and dotted
//! against the matching flat weight row. With sequential accumulation this
//! is bit-identical to the direct triple-sum; a tree-reduction mode models a
//! multiplier-adder tree within a small relative tolerance.
//!
//! Alongside execution, [`perf`] provides the analytical side: MAC and
//! parameter counts per layer, parameter/operation distribution, DSP-budget
//! resource estimates for lane configurations, and global-traffic
//! projections that match the measured ledger byte-for-byte.

pub mod error;
pub mod io;
pub mod layers;
pub mod model;
pub mod perf;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ConvWeights, Shape3, Tensor};
