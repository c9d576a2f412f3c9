pub mod autograd;
pub mod backbone;
pub mod check;
pub mod container;
pub mod error;
pub mod evalbench;
pub mod flow;
pub mod icg;
pub mod image;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod synthworld;
pub mod tensor;
pub mod vae3d;

pub use error::{Error, Result};

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/synthworld.md")]
    mod synthworld {}
    #[doc = include_str!("../../../book/src/captions.md")]
    mod captions {}
    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}
    #[doc = include_str!("../../../book/src/vae.md")]
    mod vae {}
    #[doc = include_str!("../../../book/src/backbone.md")]
    mod backbone {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
