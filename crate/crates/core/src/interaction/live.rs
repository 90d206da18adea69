//! Live sessions: the loop runs on its own thread and blocks on a mailbox
//! whenever it needs feedback. Readers see a snapshot that the loop
//! republishes after every change.

use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, RwLock};
use std::thread::{self, JoinHandle};

use log::{error, info};
use serde::{Deserialize, Serialize};

use super::{Event, Feedback, FeedbackProvider, IterationMetrics, LoopData, LoopState, Neighbors, QueryView, Role, StopReason, Strategy};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::saliency::SaliencyMap;

/// The query currently waiting for feedback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingQuery {
    pub role: Role,
    pub id: String,
    pub predicted: Label,
    pub confidence: f64,
    #[serde(skip)]
    pub saliency: Option<SaliencyMap>,
    pub neighbors: Neighbors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "kebab-case")]
pub enum SessionPhase {
    Starting,
    AwaitingFeedback,
    Training,
    Stopped { reason: StopReason },
    Failed { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionStatus {
    #[serde(flatten)]
    pub phase: SessionPhase,
    pub strategy: Strategy,
    pub iteration: usize,
    pub steps: usize,
    pub training_size: usize,
    pub pool_size: usize,
    pub classifier_version: u64,
    pub latest: Option<IterationMetrics>,
}

#[derive(Clone, Debug)]
pub struct SessionSnapshot {
    pub pending: Option<PendingQuery>,
    pub status: SessionStatus,
    pub metrics: Vec<IterationMetrics>,
}

enum Command {
    Feedback {
        id: String,
        feedback: Feedback,
        reply: Sender<Result<SessionStatus>>,
    },
    Retrain {
        reply: Sender<Result<SessionStatus>>,
    },
}

/// Client side of a running session. Dropping every handle ends the session.
#[derive(Clone)]
pub struct SessionHandle {
    tx: Sender<Command>,
    snapshot: Arc<RwLock<SessionSnapshot>>,
    events: Arc<RwLock<Vec<Event>>>,
    data: Arc<LoopData>,
}

impl SessionHandle {
    pub fn snapshot(&self) -> SessionSnapshot {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Every committed step so far.
    pub fn events(&self) -> Vec<Event> {
        self.events.read().expect("events lock").clone()
    }

    pub fn data(&self) -> &Arc<LoopData> {
        &self.data
    }

    /// Answer the pending query `id`. Blocks until the loop has applied the
    /// feedback or moved on to the next query of the same step.
    pub fn submit_feedback(&self, id: &str, feedback: Feedback) -> Result<SessionStatus> {
        let (reply, rx) = mpsc::channel();
        self.send(Command::Feedback {
            id: id.to_string(),
            feedback,
            reply,
        })?;
        rx.recv().map_err(|_| Error::Interrupted("session ended".into()))?
    }

    /// Retrain now. Only allowed between steps, i.e. while the first query
    /// of a step is pending.
    pub fn retrain(&self) -> Result<SessionStatus> {
        let (reply, rx) = mpsc::channel();
        self.send(Command::Retrain { reply })?;
        rx.recv().map_err(|_| Error::Interrupted("session ended".into()))?
    }

    fn send(&self, command: Command) -> Result<()> {
        self.tx
            .send(command)
            .map_err(|_| Error::Interrupted("session ended".into()))
    }
}

fn status_of(state: &LoopState, phase: SessionPhase) -> SessionStatus {
    SessionStatus {
        phase,
        strategy: state.config().strategy,
        iteration: state.iteration(),
        steps: state.steps(),
        training_size: state.training().len(),
        pool_size: state.pool().len(),
        classifier_version: state.classifier_version(),
        latest: state.metrics().last().copied(),
    }
}

struct Publisher {
    snapshot: Arc<RwLock<SessionSnapshot>>,
    events: Arc<RwLock<Vec<Event>>>,
}

impl Publisher {
    fn publish(&self, state: &LoopState, phase: SessionPhase, pending: Option<PendingQuery>) -> SessionStatus {
        let status = status_of(state, phase);
        {
            let mut events = self.events.write().expect("events lock");
            let known = events.len();
            events.extend_from_slice(&state.events()[known..]);
        }
        let mut s = self.snapshot.write().expect("snapshot lock");
        s.pending = pending;
        s.status = status.clone();
        s.metrics = state.metrics().to_vec();
        status
    }

    fn set_pending(&self, pending: PendingQuery) -> SessionStatus {
        let mut s = self.snapshot.write().expect("snapshot lock");
        s.pending = Some(pending);
        s.status.phase = SessionPhase::AwaitingFeedback;
        s.status.clone()
    }
}

struct Mailbox {
    rx: Receiver<Command>,
    publisher: Publisher,
    /// Feedback accepted but not yet acknowledged.
    unacked: Option<Sender<Result<SessionStatus>>>,
    retrain: Option<Sender<Result<SessionStatus>>>,
}

impl FeedbackProvider for Mailbox {
    fn feedback(&mut self, view: &QueryView<'_>) -> Result<Feedback> {
        let predicted = view.confidence.label();
        let status = self.publisher.set_pending(PendingQuery {
            role: view.role,
            id: view.instance.id.clone(),
            predicted,
            confidence: view.confidence.value(),
            saliency: view.saliency.cloned(),
            neighbors: view.neighbors.clone(),
        });
        if let Some(reply) = self.unacked.take() {
            let _ = reply.send(Ok(status));
        }
        loop {
            let command = self
                .rx
                .recv()
                .map_err(|_| Error::Interrupted("session closed".into()))?;
            match command {
                Command::Feedback { id, feedback, reply } => {
                    if id != view.instance.id {
                        let _ = reply.send(Err(Error::Conflict(format!(
                            "feedback for {id} but {} is pending",
                            view.instance.id
                        ))));
                        continue;
                    }
                    if let Err(e) = feedback.validate(predicted, view.instance.image.side()) {
                        let _ = reply.send(Err(e));
                        continue;
                    }
                    self.unacked = Some(reply);
                    return Ok(feedback);
                }
                Command::Retrain { reply } if view.role == Role::Selected => {
                    self.retrain = Some(reply);
                    return Err(Error::Interrupted("retrain requested".into()));
                }
                Command::Retrain { reply } => {
                    let _ = reply.send(Err(Error::Conflict(
                        "cannot retrain while a near hit or miss is pending".into(),
                    )));
                }
            }
        }
    }
}

/// Start a live session on a background thread.
pub fn spawn_session(state: LoopState) -> (SessionHandle, JoinHandle<()>) {
    let (tx, rx) = mpsc::channel();
    let data = Arc::clone(state.data());
    let snapshot = Arc::new(RwLock::new(SessionSnapshot {
        pending: None,
        status: status_of(&state, SessionPhase::Starting),
        metrics: state.metrics().to_vec(),
    }));
    let events = Arc::new(RwLock::new(Vec::new()));
    let mailbox = Mailbox {
        rx,
        publisher: Publisher {
            snapshot: Arc::clone(&snapshot),
            events: Arc::clone(&events),
        },
        unacked: None,
        retrain: None,
    };
    let join = thread::spawn(move || drive(state, mailbox));
    (
        SessionHandle {
            tx,
            snapshot,
            events,
            data,
        },
        join,
    )
}

fn drive(mut state: LoopState, mut mailbox: Mailbox) {
    loop {
        let result = state.advance(&mut mailbox);
        match result {
            Ok(None) => {
                let status = mailbox.publisher.publish(&state, SessionPhase::Training, None);
                if let Some(reply) = mailbox.unacked.take() {
                    let _ = reply.send(Ok(status));
                }
            }
            Ok(Some(reason)) => {
                let status = mailbox.publisher.publish(&state, SessionPhase::Stopped { reason }, None);
                if let Some(reply) = mailbox.unacked.take() {
                    let _ = reply.send(Ok(status));
                }
                info!("session stopped: {reason:?}");
                drain_stopped(&state, &mailbox);
                return;
            }
            Err(Error::Interrupted(_)) if mailbox.retrain.is_some() => {
                let reply = mailbox.retrain.take().expect("checked");
                mailbox.publisher.publish(&state, SessionPhase::Training, None);
                let outcome = state.retrain().map(|_| status_of(&state, SessionPhase::Training));
                mailbox.publisher.publish(&state, SessionPhase::Training, None);
                let _ = reply.send(outcome);
            }
            Err(Error::Interrupted(_)) => return,
            Err(e) => {
                error!("session step failed: {e}");
                let message = e.to_string();
                if let Some(reply) = mailbox.unacked.take() {
                    let _ = reply.send(Err(e));
                }
                mailbox.publisher.publish(&state, SessionPhase::Failed { message }, None);
                drain_stopped(&state, &mailbox);
                return;
            }
        }
    }
}

/// After the run ends every mutation is rejected until the session closes.
fn drain_stopped(state: &LoopState, mailbox: &Mailbox) {
    while let Ok(command) = mailbox.rx.recv() {
        let reply = match command {
            Command::Feedback { reply, .. } | Command::Retrain { reply } => reply,
        };
        let _ = reply.send(Err(Error::Conflict(format!(
            "session has ended after {} steps",
            state.steps()
        ))));
    }
}
