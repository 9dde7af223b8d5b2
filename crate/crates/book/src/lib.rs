//! Runs the code blocks of the guide in `book/src` as doc-tests, one module
//! per chapter so a failure names its chapter.

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}
#[doc = include_str!("../../../book/src/privacy.md")]
pub mod privacy {}
#[doc = include_str!("../../../book/src/histograms.md")]
pub mod histograms {}
#[doc = include_str!("../../../book/src/covariance.md")]
pub mod covariance {}
#[doc = include_str!("../../../book/src/unbounded.md")]
pub mod unbounded {}
#[doc = include_str!("../../../book/src/mean.md")]
pub mod mean {}
#[doc = include_str!("../../../book/src/product.md")]
pub mod product {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/attacks.md")]
pub mod attacks {}
#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}
