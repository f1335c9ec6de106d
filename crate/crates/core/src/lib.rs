//! Zero-shot referring image segmentation from generated descriptions.
//!
//! Given an image, a referring expression and a set of instance mask
//! proposals, the pipeline asks a multimodal LLM for an attribute
//! description and a surrounding description of the referent, encodes text
//! and per-proposal renderings with a CLIP-style encoder pair, and picks the
//! proposal maximising `S_van + alpha * S_att + beta * S_sur`.

pub mod backends;
pub mod dataset;
pub mod evaluation;
pub mod masks;
pub mod pipeline;
pub mod prompts;
pub mod scoring;
