//! Numeric kernels behind the autograd graph.

pub mod conv;
pub(crate) mod gemm;
pub(crate) mod layout;
pub(crate) mod norm;
pub mod pool;

pub use conv::ConvGeom;
pub use pool::PoolGeom;
