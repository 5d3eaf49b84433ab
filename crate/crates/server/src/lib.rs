//! HTTP service.
//!
//! Model backends are served at `POST /v1/{kind}` with the `{kind, version,
//! payload}` envelope. A live session, when present, streams its events over
//! a websocket at `GET /v1/session/events?since=SEQ` and takes commands there
//! or at `POST /v1/session/command`.

pub mod hub;
pub mod live;
mod routes;

pub use hub::{Batch, Hub, Initial, Subscription};
pub use live::{Clock, LiveError, LiveSession};
pub use routes::{router, AppState};

use std::net::SocketAddr;

use tokio::net::TcpListener;

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Binds `addr` and serves on a background runtime. Returns the bound
/// address; the server lives as long as the process.
pub fn spawn(addr: SocketAddr, state: AppState) -> std::io::Result<SocketAddr> {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::Builder::new().name("scope-http".into()).spawn(move || {
        let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
            Ok(rt) => rt,
            Err(e) => {
                let _ = tx.send(Err(e));
                return;
            }
        };
        rt.block_on(async move {
            let listener = match TcpListener::bind(addr).await {
                Ok(l) => l,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    return;
                }
            };
            let _ = tx.send(listener.local_addr());
            if let Err(e) = serve(listener, state).await {
                tracing::error!(error = %e, "server stopped");
            }
        });
    })?;
    rx.recv().map_err(std::io::Error::other)?
}
