pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod bench;
pub mod decoder;
pub mod detector;
pub mod error;
pub mod flops;
pub mod losses;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
