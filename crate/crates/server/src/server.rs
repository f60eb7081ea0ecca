//! WebSocket frame server. One render loop per session; poses coalesce so
//! each frame uses the newest pose received before it started.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use fovnerf_core::engine::{Engine, SessionState};
use fovnerf_core::foveation::{StereoMode, StereoRig};
use fovnerf_core::math::{Quat, Vec3};
use fovnerf_core::protocol::{encode_frame, ClientMessage, FrameEncoding, ServerMessage, PROTOCOL_VERSION};
use fovnerf_core::{Error, Result};
use futures_util::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio_tungstenite::tungstenite::Message;

pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Clone, Copy, Debug)]
pub struct ServeOptions {
    pub encoding: FrameEncoding,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            encoding: FrameEncoding::Png,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct PoseInput {
    t_ms: f64,
    rig: StereoRig,
    stereo: bool,
}

/// Accepts sessions until the listener fails.
pub async fn serve(engine: Arc<Engine>, listener: TcpListener, opts: ServeOptions) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let engine = engine.clone();
        tokio::spawn(async move {
            if let Err(e) = session(engine, stream, peer, opts).await {
                log::info!("session {peer} ended: {e}");
            }
        });
    }
}

async fn session(engine: Arc<Engine>, stream: TcpStream, peer: SocketAddr, opts: ServeOptions) -> Result<(), String> {
    let ws = tokio_tungstenite::accept_async(stream)
        .await
        .map_err(|e| e.to_string())?;
    let (mut sink, mut source) = ws.split();

    let greeting = tokio::time::timeout(HANDSHAKE_TIMEOUT, source.next()).await;
    let reject = match greeting {
        Ok(Some(Ok(Message::Text(t)))) => match ClientMessage::parse(&t) {
            Ok(ClientMessage::Hello { version }) if version == PROTOCOL_VERSION => None,
            Ok(ClientMessage::Hello { version }) => Some(format!("protocol version {version} is not supported")),
            Ok(_) => Some("first message must be hello".to_string()),
            Err(e) => Some(e.to_string()),
        },
        Ok(_) => Some("expected a hello text message".to_string()),
        Err(_) => Some("handshake timed out".to_string()),
    };
    if let Some(reason) = reject {
        let msg = ServerMessage::Reject {
            version: PROTOCOL_VERSION,
            reason: reason.clone(),
        };
        let _ = sink.send(Message::text(msg.to_json())).await;
        let _ = sink.close().await;
        return Err(reason);
    }
    let hello = ServerMessage::Hello {
        version: PROTOCOL_VERSION,
        server: format!("fovnerf {}", env!("CARGO_PKG_VERSION")),
    };
    sink.send(Message::text(hello.to_json()))
        .await
        .map_err(|e| e.to_string())?;
    log::info!("session {peer} connected");

    let (out_tx, mut out_rx) = mpsc::channel::<Message>(8);
    let writer = tokio::spawn(async move {
        while let Some(m) = out_rx.recv().await {
            if sink.send(m).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    let state = Arc::new(Mutex::new(SessionState::default()));
    let (pose_tx, pose_rx) = watch::channel::<Option<PoseInput>>(None);
    let renderer = tokio::spawn(render_loop(
        engine.clone(),
        state.clone(),
        pose_rx,
        out_tx.clone(),
        opts,
    ));

    while let Some(msg) = source.next().await {
        let msg = match msg {
            Ok(m) => m,
            Err(_) => break,
        };
        let reply = match msg {
            Message::Text(t) => handle_text(&engine, &state, &pose_tx, &t),
            Message::Binary(_) => Some(ServerMessage::error(&Error::Protocol(
                "binary messages are not accepted".into(),
            ))),
            Message::Close(_) => break,
            _ => None,
        };
        if let Some(r) = reply {
            if out_tx.send(Message::text(r.to_json())).await.is_err() {
                break;
            }
        }
    }
    drop(pose_tx);
    let _ = renderer.await;
    drop(out_tx);
    let _ = writer.await;
    log::info!("session {peer} closed");
    Ok(())
}

fn handle_text(
    engine: &Engine,
    state: &Mutex<SessionState>,
    pose_tx: &watch::Sender<Option<PoseInput>>,
    text: &str,
) -> Option<ServerMessage> {
    let msg = match ClientMessage::parse(text) {
        Ok(m) => m,
        Err(e) => return Some(ServerMessage::error(&e)),
    };
    match msg {
        ClientMessage::Hello { .. } => Some(ServerMessage::error(&Error::Protocol("session already greeted".into()))),
        ClientMessage::Config => Some(ServerMessage::Config {
            config: serde_json::to_value(engine.config()).expect("config serializes"),
        }),
        ClientMessage::Pose {
            pos,
            quat,
            gaze,
            stereo,
            t_ms,
        } => {
            let rig = engine
                .gaze_from_display(gaze[0], gaze[1])
                .and_then(|g| engine.rig(Vec3::from_array(pos), Quat::from_wxyz(quat), g));
            match rig {
                Err(e) => Some(ServerMessage::error(&e)),
                Ok(rig) => {
                    if state.lock().expect("session lock").offer(t_ms, rig, stereo) {
                        pose_tx.send_replace(Some(PoseInput { t_ms, rig, stereo }));
                    }
                    None
                }
            }
        }
    }
}

async fn render_loop(
    engine: Arc<Engine>,
    state: Arc<Mutex<SessionState>>,
    mut poses: watch::Receiver<Option<PoseInput>>,
    out: mpsc::Sender<Message>,
    opts: ServeOptions,
) {
    while poses.changed().await.is_ok() {
        let Some(input) = *poses.borrow_and_update() else {
            continue;
        };
        let mode = if input.stereo {
            engine.config().mode
        } else {
            StereoMode::Mono
        };
        let eng = engine.clone();
        let rendered = tokio::task::spawn_blocking(move || -> Result<_> {
            let r = eng.render_frame_mode(&input.rig, mode)?;
            Ok(r)
        })
        .await;
        let r = match rendered {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => {
                let _ = out.send(Message::text(ServerMessage::error(&e).to_json())).await;
                continue;
            }
            Err(e) => {
                log::error!("render task failed: {e}");
                break;
            }
        };
        let (frame_id, breakdown) = {
            let mut s = state.lock().expect("session lock");
            let id = s.record(r.timing);
            (id as u32, s.breakdown(mode))
        };
        let eyes = if input.stereo {
            vec![&r.frame.left, &r.frame.right]
        } else {
            vec![&r.frame.left]
        };
        let bytes = match encode_frame(frame_id, &eyes, opts.encoding) {
            Ok(b) => b,
            Err(e) => {
                let _ = out.send(Message::text(ServerMessage::error(&e).to_json())).await;
                continue;
            }
        };
        let stats = ServerMessage::Stats {
            frame_id,
            pose_t_ms: input.t_ms,
            evaluations: r.stats.evaluations,
            timing: breakdown,
        };
        if out.send(Message::binary(bytes)).await.is_err() || out.send(Message::text(stats.to_json())).await.is_err() {
            break;
        }
    }
}
