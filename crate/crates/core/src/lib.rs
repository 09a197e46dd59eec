pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data_model;
pub mod dataset_tools;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod metrics;
pub mod params;
pub mod prompt;
pub mod tokenizer;
pub mod tracker;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/tracker.md")]
    mod tracker {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/dataset-tools.md")]
    mod dataset_tools {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
