pub mod checkpoint;
pub mod data;
pub mod diff;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod lla;
pub mod metrics;
pub mod models;
pub mod network;
pub mod optim;
pub mod params;
pub mod sketch;
pub mod surrogate;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/sketching.md")]
    mod sketching {}
    #[doc = include_str!("../../../book/src/laplace.md")]
    mod laplace {}
    #[doc = include_str!("../../../book/src/surrogate.md")]
    mod surrogate {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
