//! Speaker d-vectors: TDNN with statistics pooling, multi-task training,
//! scoring, EER and pseudo-labelling by agglomerative clustering.

mod cluster;
mod loss;
mod metrics;
mod net;
mod train;

pub use cluster::{first_appearance, hac_cluster};
pub use loss::{lmcl_loss, mine_triplets, multitask_loss, triplet_hinge, triplet_loss, LossConfig, MultitaskLoss};
pub use metrics::{adjusted_rand_index, eer, parse_trials, TrialPair};
pub use net::{cosine_score, normalize, sidecar_path, EmbedConfig, EmbedNet, SpeakerEncoder, CHUNK_FRAMES, MIN_FRAMES};
pub use train::{augment, random_segment, train_embedder, EmbedStep, EmbedTrainConfig, LabeledFrames};
