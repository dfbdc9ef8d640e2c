//! Minimal neural-network building blocks with explicit backward passes.

pub mod chunk;
pub mod conv;
pub mod dual_path;
pub mod layers;
pub mod lstm;
pub mod params;

pub use chunk::{chunk, merge_chunks, ChunkLayout, Chunks};
pub use conv::{Decoder, Encoder, FeatureMap};
pub use dual_path::{condition, DualPathBlock, DualPathStack};
pub use params::{Init, ParamInfo, ParamStore, Slot};
