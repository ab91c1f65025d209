pub mod baselines;
pub mod design;
pub mod error;
pub mod estimation;
pub mod experiments;
pub mod fdr;
pub mod io;
pub mod mixture;
pub mod seed;

// The guide's Rust snippets run as doctests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/lfdr.md")]
    mod lfdr {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/design.md")]
    mod design {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/studies.md")]
    mod studies {}
}
