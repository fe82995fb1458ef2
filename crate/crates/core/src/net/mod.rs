//! A small encoder-decoder pixel labeler built from hand-written layers.

mod checkpoint;
pub mod layers;
mod model;
mod tensor;
mod train;

pub use checkpoint::{load_model, save_model};
pub use layers::{
    conv2d_backward, conv2d_forward, maxpool_backward, maxpool_with_indices, relu_backward, relu_forward,
    softmax_backward, softmax_channels, softmax_cross_entropy_grad, transposed_conv_backward,
    transposed_conv_forward, unpool_backward, unpool_by_indices, weighted_cross_entropy, ConvGrads, LossOutput,
    PoolIndices, TransposedConvGrads, IGNORE_LABEL, LOG_CLAMP,
};
pub use model::{BandNorm, DecoderKind, LayerParams, LayerSpec, Model, NetworkSpec, Topology};
pub use tensor::{Scalar, Tensor};
pub use train::{
    median_frequency_weights, normalization_from, sgd_step, train, train_with_progress, weighted_cross_entropy_map,
    write_loss_curve, LossReduction, LossWeighting, TrainConfig, TrainOutcome, TrainingChip,
};
