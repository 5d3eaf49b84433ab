//! A session driven by a clock on its own thread.
//!
//! Commands queue up and are handed to the session at the next frame, in
//! arrival order, exactly as scripted commands are. All session state is
//! owned by the runner thread; readers see it only through the [`Hub`].

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use scope_core::session::{AdvanceReport, ClientCommand, CommandEnvelope, Session};
use tokio::sync::oneshot;
use tracing::{info, warn};

use crate::hub::Hub;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    /// One frame per interval of wall time.
    Realtime(Duration),
    /// Frames advance only on request.
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LiveError {
    #[error("the session has finished")]
    Finished,
    #[error("frames advance on their own clock")]
    NotManual,
    #[error("session thread stopped")]
    Stopped,
}

enum Control {
    Command(ClientCommand),
    Advance(usize, oneshot::Sender<AdvanceReport>),
    Shutdown,
}

pub struct LiveSession {
    hub: Arc<Hub>,
    clock: Clock,
    tx: Mutex<mpsc::Sender<Control>>,
    seen: Mutex<HashSet<String>>,
    finished: Arc<AtomicBool>,
    thread: Mutex<Option<JoinHandle<()>>>,
    frame_count: usize,
}

impl LiveSession {
    pub fn start(session: Session, clock: Clock, buffer: usize) -> Arc<Self> {
        let hub = Arc::new(Hub::new(buffer));
        let (tx, rx) = mpsc::channel();
        let finished = Arc::new(AtomicBool::new(false));
        let frame_count = session.frames().count;
        let runner = Runner {
            session,
            hub: hub.clone(),
            rx,
            clock,
            pending: Vec::new(),
            finished: finished.clone(),
        };
        let thread = std::thread::Builder::new()
            .name("scope-session".into())
            .spawn(move || runner.run())
            .expect("spawn session thread");
        Arc::new(Self {
            hub,
            clock,
            tx: Mutex::new(tx),
            seen: Mutex::new(HashSet::new()),
            finished,
            thread: Mutex::new(Some(thread)),
            frame_count,
        })
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn is_finished(&self) -> bool {
        self.finished.load(Ordering::SeqCst)
    }

    /// Queues a command for the next frame. Returns `true` if a command with
    /// the same id was already accepted, in which case nothing is queued.
    pub fn submit(&self, envelope: CommandEnvelope) -> Result<bool, LiveError> {
        if self.is_finished() {
            return Err(LiveError::Finished);
        }
        if let Some(id) = &envelope.id {
            if !self.seen.lock().expect("id set").insert(id.clone()) {
                return Ok(true);
            }
        }
        self.send(Control::Command(envelope.command))?;
        Ok(false)
    }

    /// Processes up to `frames` frames. Manual clock only.
    pub async fn advance(&self, frames: usize) -> Result<AdvanceReport, LiveError> {
        if self.clock != Clock::Manual {
            return Err(LiveError::NotManual);
        }
        let (reply, rx) = oneshot::channel();
        self.send(Control::Advance(frames, reply))?;
        rx.await.map_err(|_| LiveError::Stopped)
    }

    /// Blocking form of [`advance`](Self::advance) for non-async callers.
    pub fn advance_blocking(&self, frames: usize) -> Result<AdvanceReport, LiveError> {
        if self.clock != Clock::Manual {
            return Err(LiveError::NotManual);
        }
        let (reply, rx) = oneshot::channel();
        self.send(Control::Advance(frames, reply))?;
        rx.blocking_recv().map_err(|_| LiveError::Stopped)
    }

    fn send(&self, c: Control) -> Result<(), LiveError> {
        self.tx.lock().expect("sender").send(c).map_err(|_| LiveError::Stopped)
    }

    pub fn shutdown(&self) {
        let _ = self.send(Control::Shutdown);
        if let Some(t) = self.thread.lock().expect("thread handle").take() {
            let _ = t.join();
        }
    }
}

impl Drop for LiveSession {
    fn drop(&mut self) {
        let _ = self.tx.get_mut().map(|tx| tx.send(Control::Shutdown));
    }
}

struct Runner {
    session: Session,
    hub: Arc<Hub>,
    rx: mpsc::Receiver<Control>,
    clock: Clock,
    pending: Vec<ClientCommand>,
    finished: Arc<AtomicBool>,
}

impl Runner {
    fn run(mut self) {
        info!(frames = self.session.frames().count, clock = ?self.clock, "live session started");
        let mut next_tick = Instant::now();
        loop {
            let control = match self.clock {
                Clock::Manual => match self.rx.recv() {
                    Ok(c) => c,
                    Err(_) => break,
                },
                Clock::Realtime(interval) => {
                    let now = Instant::now();
                    if now >= next_tick && !self.session.is_finished() {
                        self.step();
                        next_tick += interval;
                        continue;
                    }
                    let wait = if self.session.is_finished() {
                        Duration::from_secs(3600)
                    } else {
                        next_tick - now
                    };
                    match self.rx.recv_timeout(wait) {
                        Ok(c) => c,
                        Err(RecvTimeoutError::Timeout) => continue,
                        Err(RecvTimeoutError::Disconnected) => break,
                    }
                }
            };
            match control {
                Control::Command(c) => {
                    if self.session.is_finished() {
                        warn!("command after the last frame ignored");
                    } else {
                        self.pending.push(c);
                    }
                }
                Control::Advance(n, reply) => {
                    let mut processed = 0;
                    while processed < n && !self.session.is_finished() {
                        self.step();
                        processed += 1;
                    }
                    let _ = reply.send(AdvanceReport {
                        processed,
                        current_frame: self.session.current_frame(),
                        finished: self.session.is_finished(),
                    });
                }
                Control::Shutdown => break,
            }
        }
        self.finished.store(true, Ordering::SeqCst);
        self.hub.close();
        info!("live session stopped");
    }

    fn step(&mut self) {
        let commands = std::mem::take(&mut self.pending);
        let events = self.session.process_frame(&commands);
        self.hub.publish(&events);
        if self.session.is_finished() {
            self.finished.store(true, Ordering::SeqCst);
            self.hub.close();
            info!("live session reached its last frame");
        }
    }
}
