//! Compiles and tests the snippets of the mdbook guide under `book/`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}

#[doc = include_str!("../../../book/src/gradnorm.md")]
pub mod gradnorm {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
