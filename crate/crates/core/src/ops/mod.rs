//! Differentiable primitives recorded on the [`Tape`](crate::tape::Tape).

pub mod conv;
pub mod elementwise;
mod gemm;
pub mod loss;
pub mod pool;
pub mod resize;
pub mod roi_align;
pub mod shape;
pub mod softmax;

pub use conv::conv2d_output_size;
pub use elementwise::sigmoid;
pub use pool::maxpool2d_tensor;
pub use resize::bilinear_resize_tensor;
pub use roi_align::{roi_align_tensor, RoiAlignParams, RoiBox};
pub use softmax::softmax_tensor;
