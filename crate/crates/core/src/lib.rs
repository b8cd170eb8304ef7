//! Effective-rank diagnostics, projection gradient-flow simulation and
//! activation-aware initialization for width-reduced distillation.

pub mod analysis;
mod binio;
pub mod checks;
pub mod dumps;
pub mod error;
pub mod flowsim;
pub mod initlab;
pub mod linalg;
pub mod proxytrain;
pub mod spectral;
pub mod synth;
pub mod widthnet;

pub use dumps::{
    load_dump, read_dump, save_dump, write_dump, ActivationDump, DumpManifest, F32Matrix,
    PostNormStreams, SequenceRecord, UnembeddingBlock,
};
pub use error::{Error, Result};
pub use spectral::{
    erank, max_abs_cosine, preprocess, LogitHead, PreppedMatrix, RepMatrix, SpectrumSummary,
};
pub use synth::{synth_dump, synth_matrix, LayerProfile, SynthDumpConfig};
pub use analysis::{analyze_dump, DumpAnalysis, LayerRecord};
pub use flowsim::{FlowConfig, FlowTrace, Integrator, ProjectionPair, SpectralSnapshot};
pub use initlab::{ChannelSelection, ImportanceReport, InitKind, InitSpec, Strategy};
pub use proxytrain::{TrainConfig, TrainReport};
pub use widthnet::{LayerStack, MergedLayer, TeacherLayer, WrappedLayer};
