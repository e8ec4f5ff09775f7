//! Embeddable content repository engine.
//!
//! Each content item lives in one self-describing, page-segmented file
//! ([`format`]) placed at an identifier-derived path ([`store`]). A rebuildable
//! in-memory [`catalog`] keeps one index agent per metadata attribute, and
//! [`query`] dispatches conjunctive filters to those agents in parallel,
//! streaming partial and complete matches. [`signatures`] appends detached
//! signature records over byte ranges of an item's sections.

pub mod catalog;
pub mod cli;
pub mod error;
pub mod format;
pub mod query;
pub mod signatures;
pub mod store;

pub use error::{Error, Result};
