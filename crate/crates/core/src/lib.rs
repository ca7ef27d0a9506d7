//! Contrastive training, memorization and retrieval-augmented inference for
//! inductive multimodal knowledge graph completion.

pub mod binio;
pub mod contrastive;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod featurize;
pub mod kg;
pub mod pipeline;
pub mod retrieval;
pub mod stores;
pub mod synthetic;

pub use contrastive::{train, EpochRecord, TrainConfig, TrainOutcome};
pub use dataset::{Dataset, DatasetManifest};
pub use encoders::{EncoderParams, EntityEncoding, HyperParams};
pub use error::{CmrError, Result};
pub use eval::{evaluate, EvalMode, Metrics, Predictor, TieMode};
pub use featurize::{FeatureSet, FeaturizerConfig};
pub use kg::{EntityId, FilterIndex, GraphSplit, RelationId, SplitMode, Triple, Vocabulary};
pub use retrieval::{knn_search, DistanceKind, Distribution, InferenceConfig, NeighborHit};
pub use stores::{EntityStore, KnowledgeStore, StoreScope};
pub use synthetic::{generate, SyntheticSpec};
pub use pipeline::{ExperimentConfig, RunManifest};
