pub mod autodiff;
pub mod canonical;
pub mod corpus;
pub mod error;
pub mod faithfulness;
pub mod jobs;
pub mod metrics;
pub mod model;
pub mod saliency;
pub mod synth;
pub mod tensor;
pub mod training;

pub use autodiff::{finite_difference_check, FiniteDifferenceReport, Gradients, Graph, NodeId};
pub use corpus::{PageRecord, Snippet, SnippetId, WriterSplit};
pub use error::{Error, Result};
pub use model::{DepthPreset, EmbeddingNetwork, FeatureField, ModelConfig};
pub use tensor::{cosine_similarity, Tensor};
