pub mod error;
pub mod estimation;
pub mod glm;
pub mod histogram;
pub mod io;
pub mod knn;
pub mod lmm;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod ppm;
pub mod stats;
pub mod synth;
pub mod types;
pub mod varsel;
pub mod weibull;

pub use error::{Error, Result};
