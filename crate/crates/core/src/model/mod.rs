//! Duration-informed acoustic model: phone encoder, state expansion, frame
//! conditioning, windowed-attention decoder and residual post-net.

mod acoustic;
mod cbhg;
mod config;
mod layout;
mod loss;
mod net;
mod train;

pub use acoustic::{AcousticModel, ModelSidecar, Prediction};
pub use cbhg::{bidirectional, Cbhg};
pub use config::{FeatureNorm, ModelConfig, FRAMES_PER_STEP};
pub use layout::{expansion_index, SeqLayout};
pub use loss::spectrogram_loss;
pub use net::{pack_frames, state_expand, Decoded, DurianNet, Forward, ModelInput};
pub use train::{
    batch_for_step, batch_loss, latest_checkpoint, optimizer_path, resume, train_model, train_session, CheckpointSink,
    ModelStep, ModelTrainConfig, TrainItem,
};

#[cfg(test)]
mod tests;
