//! Diagnostic assistance over a medical knowledge graph: guided history taking,
//! path-scored candidate diagnoses, expert-reviewed graph evolution, evidence
//! bundles and view layout.

pub mod config;
pub mod diagnosis;
pub mod evidence;
pub mod evolution;
pub mod gateway;
pub mod history;
pub mod kg;
pub mod layout;
pub mod linker;
pub mod scalar;
pub mod scenario;
pub mod text;

/// `f64` instantiations of the generic types.
pub type Candidate = diagnosis::CandidateDiagnosis<f64>;
pub type Record = diagnosis::DiagnosisRecord<f64>;
pub type Index = linker::SimilarityIndex<f64>;
pub type Layout = layout::LayoutResult<f64>;
pub type LayoutNode = layout::LayoutNode<f64>;
pub type Bar = layout::SeverityBar<f64>;
