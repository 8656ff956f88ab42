//! The guide's chapters, one module each, so that `cargo test --doc` runs
//! every code block in them.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/polar-grids.md")]
pub mod polar_grids {}
#[doc = include_str!("../../../book/src/radar-signal.md")]
pub mod radar_signal {}
#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}
#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/testing.md")]
pub mod testing {}
