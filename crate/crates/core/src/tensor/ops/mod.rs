pub(crate) mod activation;
pub(crate) mod conv;
mod elementwise;
mod linalg;
pub(crate) mod norm;
mod reduce;
mod shape_ops;
mod softmax;

#[allow(unused_imports)]
pub(crate) use elementwise::sigmoid;
