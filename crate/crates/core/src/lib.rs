//! Wireless environment digital twin: ray-traced channels over a learnable
//! surface EM property field, Bayesian channel maps from sparse samples, and
//! calibration of the field against those maps.

pub mod bcm;
pub mod calib;
pub mod channel;
pub mod diffgraph;
pub mod emfield;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod scenes;
pub mod tracer;

pub use bcm::{BcmEntry, FusedFeature, MeasurementSample};
pub use calib::{BiasState, Checkpoint, TrainConfig};
pub use channel::{Antennas, AntennaPattern, ChannelParams, Csi, OfdmConfig};
pub use emfield::{EmFieldNet, EmProperties, MaterialTable, NetArch};
pub use error::{Error, Result};
pub use geometry::{Facet, SceneGeometry, Vec3};
pub use metrics::{GainMap, MetricsReport};
pub use pipeline::{RunConfig, SamplingMode};
pub use tracer::{PathSet, PropagationPath, TraceConfig};
