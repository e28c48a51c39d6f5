//! Multi-rater consensus, clinical-rule explanations and Grad-CAM agreement
//! statistics for dermoscopic basal cell carcinoma (BCC) pattern classifiers.
//!
//! The crate consumes annotations, network predictions and heatmaps as files;
//! it does not train or run a network.

pub mod augment;
pub mod cli;
pub mod consensus;
pub mod focal;
pub mod folds;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rules;
pub mod saliency;
pub mod simulate;

pub use model::{AnnotationDataset, AnnotationRecord, DiagnosisGroup, Pattern, PatternVector};
pub use rules::{binary_of, explain, group_of, Diagnosis};
