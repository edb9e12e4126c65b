//! Retrieval-based speculative decoding for code generation.
//!
//! Drafts come from suffix matches against a repository index, a common-code
//! index, and a per-session cache of verified output. A greedy target model
//! checks a whole draft tree per forward step, so the decoded tokens are
//! exactly those plain autoregressive decoding would produce.

pub mod bench;
mod binio;
pub mod cache;
pub mod datastore;
pub mod draft_tree;
pub mod engine;
pub mod model;
pub mod report;
pub mod token;

pub use binio::sha256_hex;
pub use token::{TokenId, TokenMeta, TokenSequence, Vocabulary};
