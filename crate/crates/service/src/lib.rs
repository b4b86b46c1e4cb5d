//! HTTP and server-sent-events front end for casegraph.
//!
//! Three roles talk to it through bearer tokens: patients run the history
//! interview, physicians review the diagnosis and release an explanation,
//! experts curate knowledge graph updates.

pub mod auth;
pub mod config;
pub mod error;
pub mod routes;
pub mod service;
pub mod session;

use std::sync::Arc;

pub use auth::{Principal, Role};
pub use config::{ServerConfig, ServiceConfig, TokenGrant};
pub use error::ApiError;
pub use routes::router;
pub use service::{Clock, ServerEvent, Service, ServiceError};
pub use session::{Session, SessionStatus};

/// Binds the configured address and serves until interrupted.
pub async fn serve(config: ServiceConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let bind = config.server.bind.clone();
    let svc = Arc::new(tokio::task::spawn_blocking(move || Service::open(config)).await??);
    let listener = tokio::net::TcpListener::bind(&bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
