//! HTTP screening service: upload a radiograph, run the cascade, keep the
//! record and its heatmaps.

pub mod api;
pub mod config;
pub mod error;
pub mod registry;
pub mod store;

pub use api::{router, serve, start, AppState, RunningServer, ScreeningResponse};
pub use config::{RegistryEntry, ServiceConfig};
pub use error::{Result, ServiceError};
