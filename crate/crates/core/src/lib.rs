//! Contrastive correlation distillation of precomputed patch features, plus
//! the cluster-probe / linear-probe evaluation used to compare feature
//! representations (raw, distilled, PCA, random projection).

mod binio;
pub mod correlation;
pub mod dimred;
pub mod error;
pub mod feature_store;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod presets;
pub mod probes;
pub mod seg_head;
pub mod synthetic;

pub use dimred::{PcaModel, RpModel};
pub use error::{Error, FormatError, Result};
pub use feature_store::{FeatureMap, ImageRecord, KnnIndex, LabelMap, Manifest, ManifestRecord, Split};
pub use metrics::{ConfusionMatrix, MetricRow};
pub use numerics::Matrix;
pub use pipeline::{ExperimentConfig, ProbeSettings, Representation, RepresentationKind};
pub use presets::Preset;
pub use seg_head::{HeadParams, TrainConfig};
