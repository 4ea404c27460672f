//! Velocity model, energy-balanced loss, and the supervised training steps.

pub mod loss;
pub mod model;
pub mod net;
pub mod train;

pub use loss::{
    eb_flow_loss, eb_flow_loss_with_weights, eb_weights, eb_weights_raw, estimate_channel_scales, freq_ramp, time_factor,
    EbWeightConfig, LossValue, ScaleKind, SCALE_FLOOR,
};
pub use model::{CondInputs, ModelCache, ModelConfig, SvcModel};
pub use net::{time_embedding, NetCache, NetConfig, VelocityNet};
pub use train::{
    eval_loss, example_loss, train_step_cpt, train_step_sft, MultiTrackClip, SampleStreams, StepReport, TrainConfig,
};
