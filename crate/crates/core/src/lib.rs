pub mod kg;
pub mod text;
pub mod cohort;
pub mod llm;
pub mod prompts;
pub mod align;
pub mod evidence;
pub mod cot;
pub mod eval;
pub mod study;
pub mod config;
pub mod pipeline;
