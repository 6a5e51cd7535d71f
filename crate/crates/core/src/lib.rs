pub mod attention;
pub mod diagnostics;
pub mod error;
pub mod flash;
pub mod harness;
pub mod linalg;
pub mod numerics;

pub use attention::{AttnGrads, AttnTape, DeltaSource, PrecisionPlan};
pub use diagnostics::{GradErrorReport, NormSeries};
pub use error::{Error, Result};
pub use flash::{FlashOutput, TileConfig};
pub use linalg::{Mat, Vector};
pub use numerics::{Grid, Precision, B16};
