//! Background store persistence. Forget handlers only mark the store dirty;
//! a dedicated thread writes snapshots at most once per interval.

use std::path::PathBuf;
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use forgetgate::io::save_store;
use forgetgate::{ForgetStore, Result};

enum Msg {
    Dirty,
    Flush(Sender<Result<()>>),
    Stop,
}

pub struct Persister {
    tx: Sender<Msg>,
    handle: Option<JoinHandle<()>>,
}

impl Persister {
    pub fn spawn(store: Arc<ForgetStore>, path: PathBuf, interval: Duration) -> Self {
        let (tx, rx) = mpsc::channel();
        let handle = std::thread::Builder::new()
            .name("store-writer".into())
            .spawn(move || {
                let write = || {
                    let snap = store.snapshot();
                    let r = save_store(&path, &snap);
                    match &r {
                        Ok(()) => tracing::debug!(records = snap.len(), path = %path.display(), "store persisted"),
                        Err(e) => tracing::error!(path = %path.display(), "store write failed: {e}"),
                    }
                    r
                };
                let mut dirty_since: Option<Instant> = None;
                loop {
                    let wait = dirty_since.map_or(Duration::from_secs(3600), |t| interval.saturating_sub(t.elapsed()));
                    match rx.recv_timeout(wait) {
                        Ok(Msg::Dirty) => {
                            dirty_since.get_or_insert_with(Instant::now);
                        }
                        Ok(Msg::Flush(ack)) => {
                            let _ = ack.send(write());
                            dirty_since = None;
                        }
                        Ok(Msg::Stop) | Err(RecvTimeoutError::Disconnected) => {
                            if dirty_since.is_some() {
                                let _ = write();
                            }
                            return;
                        }
                        Err(RecvTimeoutError::Timeout) => {}
                    }
                    if dirty_since.is_some_and(|t| t.elapsed() >= interval) {
                        let _ = write();
                        dirty_since = None;
                    }
                }
            })
            .expect("spawn store writer");
        Self { tx, handle: Some(handle) }
    }

    pub fn mark_dirty(&self) {
        let _ = self.tx.send(Msg::Dirty);
    }

    /// Write the current snapshot now and wait for the result.
    pub fn flush(&self) -> Result<()> {
        let (ack, done) = mpsc::channel();
        if self.tx.send(Msg::Flush(ack)).is_err() {
            return Ok(());
        }
        done.recv().unwrap_or(Ok(()))
    }
}

impl Drop for Persister {
    fn drop(&mut self) {
        let _ = self.tx.send(Msg::Stop);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
