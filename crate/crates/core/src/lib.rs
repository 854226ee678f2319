pub mod analysis;
pub mod augmentation;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod seqmodel;
pub mod simulator;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/dropout.md")]
    mod dropout {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/jacobians.md")]
    mod jacobians {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
