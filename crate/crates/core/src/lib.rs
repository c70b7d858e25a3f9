//! Few-shot common action localization in time and space.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod frontend;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod model;
pub mod transformer;

pub use error::{Error, Result};
pub use autodiff::{Checkpoint, ParamStore, Tensor};
pub use data::{DataConfig, Episode, Split, SyntheticVideo};
pub use frontend::RawVideo;
pub use harness::{Report, RunConfig};
pub use metrics::BBox;
pub use model::{Model, ModelConfig};
