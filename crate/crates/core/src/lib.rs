// `!(x > 0.0)` is used on purpose so that NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod config;
pub mod curvelet;
pub mod evaluation;
pub mod features;
pub mod fft2;
pub mod geometry;
pub mod io;
pub mod matching;
pub mod pipeline;
pub mod range_image;
pub mod selftest;
