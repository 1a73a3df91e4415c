pub mod classifier;
pub mod config;
pub mod error;
pub mod imaging;
pub mod label;
pub mod mask;
pub mod service;
pub mod soxai;
pub mod synthgen;
pub mod triage;
pub mod trust;
pub mod xai;

pub use classifier::{Confidence, ReferenceScorer, ScoreRecord, ScorerBackend, ScorerFailure};
pub use config::Config;
pub use error::{Error, Result};
pub use imaging::{preprocess, NormalizedImage};
pub use label::Label;
pub use mask::Mask;
pub use synthgen::{DatasetManifest, DefectKind, ManifestEntry};
pub use triage::{TriageDecision, TriageThresholds};
