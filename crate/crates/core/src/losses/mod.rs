//! Training objectives, each returning a value and an analytic gradient.

pub mod contrastive;
pub mod detection;
pub mod gaussian;
pub mod prototype;
pub mod total;
pub mod track;

pub use contrastive::{contrastive_terms, pull_loss, push_distance, push_loss, ContrastiveConfig};
pub use detection::detection_loss;
pub use gaussian::{bhattacharyya, pull_divergence};
pub use prototype::{batch_stats, queue_update, ClassPrototypes, MemoryQueue, Prototype, QueueConfig};
pub use total::{batch_loss, total_loss, BatchLoss, LossParts, TrainBatch};
pub use track::{sample_pairs, track_contrastive_loss, AnchorPairs};
