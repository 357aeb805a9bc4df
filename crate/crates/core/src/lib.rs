//! Focal and global feature distillation for detector feature maps.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`graph`] and [`gradcheck`]: dense `f64` arrays, a
//!   reverse-mode tape and a central-difference oracle;
//! * [`masks`]: binary, scale and attention masks on one feature level;
//! * [`gcblock`]: the global-context relation extractor;
//! * [`losses`]: the feature, attention and global terms and their assembly;
//! * [`pipeline`]: synthetic scenes, toy teacher/student networks and the
//!   training loop;
//! * [`config`] and [`io`]: run configuration, atomic writes and mask dumps;
//! * [`checks`]: the named gradient checks run by the CLI.

pub mod checks;
pub mod config;
pub mod error;
pub mod gcblock;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod losses;
pub mod masks;
pub mod pipeline;
pub mod tensor;

pub use error::{FgdError, Result};
pub use graph::{Graph, Var};
pub use tensor::{Parameter, Tensor};
