//! Convolutional network core: tensors, layer primitives, the fixed
//! architecture with exact backpropagation, Adam, and the weight-file format.

mod adam;
mod io;
mod model;
mod ops;
mod scalar;
mod tensor;

pub use adam::{AdamConfig, AdamState, adam_step};
pub use io::{
    WEIGHT_MAGIC, WeightManifest, decode_manifest, decode_weights, encode_weights, load_weights,
    save_weights,
};
pub use model::{
    Architecture, ForwardPass, Gradients, ModelWeights, ParamBlock, backward, forward,
};
pub use ops::{
    BCE_CLAMP, ConvLayer, KERNEL_SIZE, avgpool2, bce, conv2d_forward, relu, relu_scalar, sigmoid,
    sigmoid_scalar,
};
pub(crate) use ops::{bce_dprob, bce_slices};
pub use scalar::Scalar;
pub use tensor::Tensor4;
