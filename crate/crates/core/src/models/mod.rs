//! Architecture configs and the encoder-decoder builder.

mod config;
mod graph;

pub use config::{ArchConfig, ShortcutGrouping, UpsampleMode, Variant, WidthSpec};
pub use graph::{DecoderStage, LayerKind, LayerTrace, ModelGraph, Region, UpPath, STAGES};
