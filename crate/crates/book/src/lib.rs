//! The guide under `book/`, compiled so its snippets run as doctests.

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}
#[doc = include_str!("../../../book/src/groups.md")]
pub mod groups {}
#[doc = include_str!("../../../book/src/networks.md")]
pub mod networks {}
#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}
#[doc = include_str!("../../../book/src/environment.md")]
pub mod environment {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/probe.md")]
pub mod probe {}
#[doc = include_str!("../../../book/src/tabular.md")]
pub mod tabular {}
