//! Runs every Rust code block in `book/` as a doctest, keeping the
//! guide and the library in lockstep. One module per chapter so a
//! failure names its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/getting-started.md")]
pub mod getting_started {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/grids.md")]
pub mod grids {}

#[doc = include_str!("../../../book/src/vpd.md")]
pub mod vpd {}

#[doc = include_str!("../../../book/src/lwd.md")]
pub mod lwd {}

#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
