//! Recommendation model: item embeddings, fusion MLP, frozen backbone and
//! training of the fusion MLP.

pub mod backbone;
pub mod embedding;
pub mod fusion;
pub mod train;

pub use backbone::{score, Backbone, BackboneConfig, Encoded, LayerTrace, SequenceEncoder, TfmSettings};
pub use embedding::{
    cosine, load_external, pretrain_id_embeddings, text_surrogate_embeddings, EmbeddingTable, Provenance,
    SkipGramConfig,
};
pub use fusion::{concat_inputs, fuse, Activation, FusionMlp};
pub use train::{train, Checkpoint, CheckpointHeader, ModelConfig, StopReason, TrainConfig, TrainOutcome};
