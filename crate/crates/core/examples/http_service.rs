//! Runs the HTTP service on the configured address (127.0.0.1:8080 by
//! default). Try:
//!
//!     curl -s localhost:8080/v1/chat -H 'content-type: application/json' \
//!          -d '{"session_id":"s1","text":"how do i reset my password"}'
//!
//! Admin routes need `HYBRID_ROUTER_ADMIN_TOKEN` set and a matching
//! `Authorization: Bearer ...` header.

use std::sync::Arc;

use hybrid_router::config::AppConfig;
use hybrid_router::service::{serve, RouterService};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let cfg = AppConfig::load(None)?;
    let addr = cfg.bind_addr();
    let svc = Arc::new(RouterService::from_config(cfg)?);
    tokio::runtime::Runtime::new()?.block_on(serve(svc, &addr))?;
    Ok(())
}
