//! Expert-token routing: a frozen meta language model whose output head
//! gains one token per expert model, plus the data, training and evaluation
//! machinery around it.

pub mod backbone;
pub mod collector;
pub mod dataset;
pub mod dedup;
pub mod domains;
pub mod eval;
pub mod error;
pub mod head;
pub mod lm;
pub mod optim;
pub mod orchestrator;
pub mod pipeline;
pub mod stub;
pub mod tensor;
pub mod vocab;

pub use backbone::{Backbone, BackboneParams, Dims, TrainReport, TrainingSequence};
pub use collector::{collect, loss_gap, Collection, CollectionReport, CollectorConfig, ExpertQuerySet};
pub use dataset::InstructionDataset;
pub use domains::{grade, Domain, DomainSpec, Grade, QueryResponsePair};
pub use error::{EtrError, Result};
pub use head::{train_head, ExpertInfo, ExpertTokenHead, HeadFeatures, HeadTrainReport};
pub use lm::{Capabilities, Generation, LanguageModel, PairLoss, Prompt, StopReason};
pub use optim::TrainConfig;
pub use orchestrator::{Choice, Framework, Limits, RoutingMode, Trace, TraceEvent};
pub use pipeline::{BenchmarkConfig, World};
pub use vocab::{TokenId, Vocabulary};
