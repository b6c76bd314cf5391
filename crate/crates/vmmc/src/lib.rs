//! Vehicle make-model recognition toolkit.
//!
//! File formats, image handling, the synthetic corpus, annotation
//! campaigns, the three experiment pipelines, evaluation reports, the plate
//! fraud service and the HTTP APIs, on top of `vmmc-core` and `vmmc-nn`.

pub mod checkpoint;
pub mod detection;
pub mod evaluation;
pub mod fraudwatch;
pub mod http;
pub mod imaging;
pub mod ingest;
pub mod manifest;
pub mod pipeline;
pub mod review;
pub mod synth;
