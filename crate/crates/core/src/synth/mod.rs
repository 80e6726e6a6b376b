//! Synthetic walker silhouettes, datasets on disk and batch sampling.

pub mod dataset;
pub mod sampler;
pub mod walker;

pub use dataset::{build_dataset, DatasetSpec, GalleryProtocol, ManifestEntry, Role};
pub use sampler::{pk_sample_batch, Batch, TrainSequence};
pub use walker::{apply_covariate, generate_walker, Covariate, SilhouetteSequence, View, WalkerIdentity};
