//! Link-prediction ranking metrics, clustering with label matching, and
//! latent correlation diagnostics.

mod clustering;
mod correlation;
mod kmeans;
mod munkres;
mod rank;

pub use clustering::{cluster_embedding, clustering_metrics, ClusterMetrics};
pub use correlation::{latent_correlation, Correlation};
pub use kmeans::{kmeans, kmeans_with, KMeansConfig};
pub use munkres::{apply_matching, hungarian, munkres_match};
pub use rank::rank_metrics;
