//! Session-oriented HTTP API for the interactive loop: upload an image, view
//! the prediction, register a new class, click, fine-tune, view the update.

pub mod api;
pub mod config;
pub mod rle;
pub mod state;

use std::sync::Arc;

pub use api::router;
pub use config::ServiceConfig;
pub use state::{spawn_workers, AppState};

/// Builds the shared state, starts the job workers and returns the router.
/// Must be called inside a Tokio runtime.
pub fn app(config: ServiceConfig) -> (Arc<AppState>, axum::Router) {
    let (state, rx) = AppState::new(config);
    spawn_workers(state.clone(), rx);
    (state.clone(), router(state))
}
