use crate::api::{router, AppState};
use crate::snapshot::Snapshot;
use std::path::PathBuf;
use tokio::net::TcpListener;

/// Serves `state` until ctrl-c or SIGTERM. With `reload_from`, SIGHUP reloads the
/// snapshot directory and swaps it in; a snapshot that fails to load is
/// logged and the old one stays in place.
pub async fn serve(listener: TcpListener, state: AppState, reload_from: Option<PathBuf>) -> std::io::Result<()> {
    if let Some(dir) = reload_from {
        spawn_reloader(state.clone(), dir)?;
    }
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            shutdown_signal().await;
            log::info!("shutting down");
        })
        .await
}

#[cfg(unix)]
async fn shutdown_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    match signal(SignalKind::terminate()) {
        Ok(mut term) => {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
        }
        Err(_) => {
            let _ = tokio::signal::ctrl_c().await;
        }
    }
}

#[cfg(not(unix))]
async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

#[cfg(unix)]
fn spawn_reloader(state: AppState, dir: PathBuf) -> std::io::Result<()> {
    use tokio::signal::unix::{signal, SignalKind};
    let mut hangups = signal(SignalKind::hangup())?;
    tokio::spawn(async move {
        while hangups.recv().await.is_some() {
            match tokio::task::spawn_blocking({
                let dir = dir.clone();
                move || Snapshot::load(dir)
            })
            .await
            {
                Ok(Ok(snapshot)) => {
                    state.replace(snapshot);
                    log::info!("reloaded snapshot from {}", dir.display());
                }
                Ok(Err(e)) => log::error!("reload failed, keeping current snapshot: {e}"),
                Err(e) => log::error!("reload task failed: {e}"),
            }
        }
    });
    Ok(())
}

#[cfg(not(unix))]
fn spawn_reloader(_state: AppState, _dir: PathBuf) -> std::io::Result<()> {
    log::warn!("snapshot reload on signal is only supported on unix");
    Ok(())
}
