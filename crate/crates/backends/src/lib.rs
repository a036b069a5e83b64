//! Live-mode adapters for remote generator, refiner, labeler, scorer and
//! detector endpoints, a content-addressed image store, and the dataset
//! construction pipeline. The wire protocol is described in `PROTOCOL.md`.

pub mod adapters;
pub mod client;
pub mod config;
pub mod dataset;
pub mod error;
pub mod store;

pub use adapters::{
    http_chat, http_detect, http_generate, http_label, http_refine, http_score,
    render_user_message, Detection, HttpGenerator, HttpRefiner, HttpScorer,
    LABELER_SYSTEM_PROMPT, LABELER_USER_TEMPLATE,
};
pub use client::HttpClient;
pub use config::{EndpointConfig, Protocol};
pub use dataset::{
    build_dataset, build_dataset_with, read_dataset, BuildOptions, DatasetDecision, DatasetError,
    DatasetRecord, DatasetSummary, HttpLabeler, Labeler,
};
pub use error::HttpError;
pub use store::ContentStore;
