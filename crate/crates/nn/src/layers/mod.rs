mod activation;
mod conv;
mod dropout;
mod linear;
mod norm;
mod pool;

pub use activation::{sigmoid, Relu, Sigmoid};
pub use conv::{Conv2d, ConvSpec};
pub use dropout::Dropout;
pub use linear::Linear;
pub use norm::BatchNorm2d;
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d};
