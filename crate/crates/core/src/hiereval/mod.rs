//! Hierarchical evaluation: taxonomy metrics, zero-shot classification,
//! retrieval and embedding statistics.

pub mod metrics;
pub mod retrieval;
pub mod stats;
pub mod taxonomy;

pub use metrics::{evaluate_labels, evaluate_pair, lca_error, set_metrics, tie, AncestorConvention, MetricReport, SetMetrics};
pub use retrieval::{accuracy, retrieve_topk, zero_shot_classify, ClassPrototypes};
pub use stats::{radius, radius_histogram, RoleRadii};
pub use taxonomy::TaxonomyGraph;
