//! Early classification of network flows from packet-level and time-slot
//! views, with recurrent classifiers trained by deep Q-learning to decide
//! when they have seen enough.

pub mod augment;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod representation;
pub mod rl;
pub mod selection;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
pub use model::io::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{ClassificationResult, DeciderConfig, SeqClassifier};
pub use representation::{FeatureConfig, FeatureSequence, Granularity};
pub use selection::{FlowSystem, FusionMode, ResultEvent, SelectedResult, SelectionConfig};
pub use trace::{FiveTuple, FlowTrace, Packet, PacketRecord};
