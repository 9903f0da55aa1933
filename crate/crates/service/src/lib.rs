//! HTTP/JSON session API. One engine session per API session; requests to
//! the same session are serialized and a concurrent writer gets 409.

pub mod error;
pub mod reasoner;
pub mod routes;
pub mod state;

use std::sync::Arc;
use std::time::{Duration, Instant};

pub use error::ApiError;
pub use reasoner::HttpReasoner;
pub use routes::router;
pub use state::{AppState, Mode, ServiceConfig};

const EVICTION_PERIOD: Duration = Duration::from_secs(60);

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: AppState, addr: &str) -> std::io::Result<()> {
    let state = Arc::new(state);
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(EVICTION_PERIOD);
        loop {
            tick.tick().await;
            let n = sweeper.evict_idle(Instant::now());
            if n > 0 {
                tracing::info!(evicted = n, "dropped idle sessions");
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "session service listening");
    axum::serve(listener, router(state)).await
}
