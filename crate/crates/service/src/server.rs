//! WebSocket frame service.
//!
//! Each connection keeps its own (pose, camera, format) state. Incoming
//! control messages update that state and overwrite a one-slot mailbox; a
//! per-connection worker renders whatever is in the slot when it becomes
//! free, so stale requests are dropped but replies never reorder.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use futures_util::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, Notify};
use tokio_tungstenite::tungstenite::Message;

use splat_avatar::render::Camera;
use splat_avatar::rig::{GraphFrame, PoseFrame};

use crate::pipeline::FramePipeline;
use crate::wire::{camera_from_message, encode_frame, error_reply, pose_from_message, ClientMessage, FrameFormat};

struct Shared {
    pipeline: FramePipeline,
    graph: GraphFrame,
    pose: PoseFrame,
    camera: Camera,
}

/// A bound, not yet running, frame server.
pub struct Server {
    listener: TcpListener,
    shared: Arc<Shared>,
}

#[derive(Debug, Clone)]
struct Job {
    pose: PoseFrame,
    camera: Camera,
    frame_id: u32,
    format: FrameFormat,
}

#[derive(Default)]
struct Mailbox {
    slot: Mutex<Option<Job>>,
    ready: Notify,
}

impl Mailbox {
    fn put(&self, job: Job) {
        *self.slot.lock().unwrap() = Some(job);
        self.ready.notify_one();
    }

    fn take(&self) -> Option<Job> {
        self.slot.lock().unwrap().take()
    }
}

struct ConnState {
    pose: PoseFrame,
    camera: Camera,
    frame_id: u32,
    format: FrameFormat,
}

impl ConnState {
    /// Applies one control message; returns the render it triggers.
    fn apply(&mut self, text: &str, joints: usize) -> Result<Option<Job>, String> {
        match ClientMessage::parse(text)? {
            ClientMessage::Pose { frame_id, root, joints: q } => {
                self.pose = pose_from_message(frame_id, &root, &q, joints)?;
                self.frame_id = frame_id;
            }
            ClientMessage::Camera {
                k,
                w2c,
                width,
                height,
                frame_id,
            } => {
                self.camera = camera_from_message(&k, &w2c, width, height)?;
                if let Some(id) = frame_id {
                    self.frame_id = id;
                }
            }
            ClientMessage::Hello { format } => {
                self.format = format;
                return Ok(None);
            }
        }
        Ok(Some(Job {
            pose: self.pose.clone(),
            camera: self.camera.clone(),
            frame_id: self.frame_id,
            format: self.format,
        }))
    }
}

fn render_job(shared: &Shared, job: &Job) -> Result<Vec<u8>, String> {
    let (image, _) = shared
        .pipeline
        .run(&job.pose, &shared.graph, &job.camera)
        .map_err(|e| e.to_string())?;
    encode_frame(&image, job.frame_id, job.format)
}

impl Server {
    /// Binds `addr`; `pose` and `camera` are used until a client sends its own.
    pub async fn bind(addr: &str, pipeline: FramePipeline, pose: PoseFrame, camera: Camera) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let rig = &pipeline.avatar.rig;
        let graph = GraphFrame::rest(rig.graph.nodes.len(), rig.mesh.positions.len());
        Ok(Self {
            listener,
            shared: Arc::new(Shared {
                pipeline,
                graph,
                pose,
                camera,
            }),
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub async fn run(self) -> std::io::Result<()> {
        loop {
            let (stream, _) = self.listener.accept().await?;
            tokio::spawn(connection(stream, self.shared.clone()));
        }
    }
}

async fn connection(stream: TcpStream, shared: Arc<Shared>) {
    let Ok(ws) = tokio_tungstenite::accept_async(stream).await else {
        return;
    };
    let (mut sink, mut source) = ws.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();
    let writer = tokio::spawn(async move {
        while let Some(m) = rx.recv().await {
            if sink.send(m).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    let mailbox = Arc::new(Mailbox::default());
    let worker = {
        let (mailbox, shared, tx) = (mailbox.clone(), shared.clone(), tx.clone());
        tokio::spawn(async move {
            loop {
                mailbox.ready.notified().await;
                let Some(job) = mailbox.take() else { continue };
                let s = shared.clone();
                let reply = match tokio::task::spawn_blocking(move || render_job(&s, &job)).await {
                    Ok(Ok(bytes)) => Message::Binary(bytes),
                    Ok(Err(e)) => Message::Text(error_reply(&e)),
                    Err(e) => Message::Text(error_reply(&format!("render task failed: {e}"))),
                };
                if tx.send(reply).is_err() {
                    break;
                }
            }
        })
    };

    let joints = shared.pipeline.avatar.rig.skeleton.len();
    let mut state = ConnState {
        pose: shared.pose.clone(),
        camera: shared.camera.clone(),
        frame_id: shared.pose.frame_id as u32,
        format: FrameFormat::Png,
    };
    while let Some(Ok(msg)) = source.next().await {
        match msg {
            Message::Text(text) => match state.apply(&text, joints) {
                Ok(Some(job)) => mailbox.put(job),
                Ok(None) => {}
                Err(e) => {
                    let _ = tx.send(Message::Text(error_reply(&e)));
                }
            },
            Message::Binary(_) => {
                let _ = tx.send(Message::Text(error_reply("control messages must be JSON text")));
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    worker.abort();
    drop(tx);
    let _ = writer.await;
}
