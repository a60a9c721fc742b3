//! Retrieval, clustering and embedding-structure metrics.

mod cluster;
mod retrieval;
mod structure;

pub use cluster::{kmeans, nmi, ClusterReport, DEFAULT_MAX_ITERS};
pub use retrieval::{knn, map_at, recall_at_k, retrieval_report, Metric, RetrievalReport};
pub use structure::{density, spectral_decay, structure_report, Density, StructureReport, DEFAULT_SKIP_FIRST};
