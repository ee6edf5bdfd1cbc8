//! Mine narrated screen-capture videos into cursor-grounded image captions,
//! instruction-tuning dialogues and visual question-answer pairs.

pub mod caption;
pub mod chunk;
pub mod cli;
pub mod cluster;
pub mod config;
pub mod cursor;
pub mod error;
pub mod eval;
pub mod frame;
pub mod instruct;
pub mod llm;
pub mod prompts;
pub mod synth;
pub mod vqa;

pub use error::{Error, Result};
