//! Deep clustering (DC) and manifold-aware deep clustering (M-DC) for
//! single-channel source separation.
//!
//! DC trains per-bin embeddings whose Gram matrix matches the Gram matrix of
//! one-hot speaker indicators. M-DC swaps the one-hot rows for the vertices
//! of a regular simplex inscribed in the unit hypersphere, so embeddings of
//! different speakers are pushed to cosine `-1/(N-1)` instead of `0`.
//!
//! The crate is organized bottom-up:
//!
//! - [`simplex`]: regular-simplex target geometry.
//! - [`objective`]: affinity losses, their gradients and the Chimera blend.
//! - [`network`]: a small embedding network with exact backpropagation.
//! - [`trainer`]: rmsprop with plateau decay and early stopping.
//! - [`signal`]: STFT, synthetic scenes, targets, masks and WAV I/O.
//! - [`clustering`]: k-means on embeddings and label-to-mask conversion.
//! - [`metrics`]: SI-SDR and projection-based SDR/SIR/SAR.
//! - [`harness`]: config-driven experiments used by the `mdc` binary.

pub mod clustering;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod objective;
pub mod signal;
pub mod simplex;
pub mod trainer;

pub use clustering::{kmeans, labels_to_masks, ClusterResult, KMeansConfig};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use metrics::{align_and_report, bss_metrics, si_sdr, BssMetrics, Db, SeparationReport};
pub use network::{Activation, Network, NetworkConfig, NetworkParams};
pub use objective::{
    affinity_loss_expanded, affinity_loss_gradient, affinity_loss_pairwise, chimera_loss,
    EmbeddingMatrix, LossValue, TargetMatrix,
};
pub use signal::{MixtureScene, SceneKind, SceneParams, Spectrogram, StftConfig};
pub use simplex::{limit_deviation, simplex_vertices, target_cosine, SimplexVertices, TargetMode};
pub use trainer::{train, TrainConfig, TrainLog};

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
struct ReadmeDoctests;
