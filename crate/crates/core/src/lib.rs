//! Explicit facial-expression transfer on procedural glyph faces.

pub mod checkpoint;
pub mod data;
pub mod diagnostics;
mod error;
pub mod evaluator;
pub mod kv;
pub mod losses;
pub mod networks;
pub mod trainer;

pub use error::{EetError, Result};
