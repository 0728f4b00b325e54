//! Command-line tools and the HTTP service around `radfield`.

pub mod cli;
pub mod http;
pub mod jobs;
pub mod ops;
