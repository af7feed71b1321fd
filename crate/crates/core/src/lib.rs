//! Attentive few-shot object detection at desk scale.
pub mod attention;
pub mod detector;
pub mod error;
pub mod fewshot;
pub mod ppm;
pub mod saliency;
pub mod synthdata;
pub mod tensor;
pub mod verify;
pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/saliency.md")]
    mod saliency {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/detector.md")]
    mod detector {}
    #[doc = include_str!("../../../book/src/fewshot.md")]
    mod fewshot {}
    #[doc = include_str!("../../../book/src/synthdata.md")]
    mod synthdata {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
