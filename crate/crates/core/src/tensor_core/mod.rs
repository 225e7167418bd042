//! Dense arrays, a reverse-mode tape, attention and gradient checking.

mod attention;
pub mod gradcheck;
mod tape;
mod tensor;

pub use attention::{multi_head_self_attention, scaled_dot_product_attention, AttentionOutput, QkvProjection};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub(crate) use tape::top_k_indices;
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
