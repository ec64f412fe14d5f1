//! Minimal dense-tensor library: the exact layer set the architectures
//! need, reverse-mode differentiation, and Adam.

mod adam;
mod conv;
mod elem;
pub mod fdcheck;

mod graph;
mod norm;
mod pool;
mod tensor;

pub use adam::AdamState;
pub use elem::{gemm_rm, Elem};
pub use graph::{BnMode, BnStats, BnUpdate, Graph, ParamId, ParamStore, Var};
pub use norm::{softmax_rows, updated_running_stats};
pub use tensor::Tensor;
