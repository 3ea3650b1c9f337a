/*!
This crate embeds every chapter of the guide in `book/` so that the code
blocks in the book run as doc-tests. `cargo test -p piecewise-book --doc`
fails whenever the book drifts out of sync with the `piecewise` API.

The crate has no code of its own and is never published.
*/

#[doc = include_str!("../../../book/src/ch01-overview.md")]
pub mod ch01 {}

#[doc = include_str!("../../../book/src/ch02-graphs-and-gradients.md")]
pub mod ch02 {}

#[doc = include_str!("../../../book/src/ch03-models.md")]
pub mod ch03 {}

#[doc = include_str!("../../../book/src/ch04-label-transmission.md")]
pub mod ch04 {}

#[doc = include_str!("../../../book/src/ch05-confidence.md")]
pub mod ch05 {}

#[doc = include_str!("../../../book/src/ch06-divergences-and-fisher.md")]
pub mod ch06 {}

#[doc = include_str!("../../../book/src/ch07-smoothness.md")]
pub mod ch07 {}

#[doc = include_str!("../../../book/src/ch08-training.md")]
pub mod ch08 {}

#[doc = include_str!("../../../book/src/ch09-evaluation.md")]
pub mod ch09 {}

#[doc = include_str!("../../../book/src/ch10-cli.md")]
pub mod ch10 {}
