//! The environment server: one TCP listener, one thread and one isolated
//! simulator per connection, strict request/reply in session order.

use std::io::Read;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;

use super::frame::{write_frame, MAX_FRAME_BYTES};
use super::messages::{
    from_payload_bytes, to_payload_bytes, ConfigBody, Payload, WireMessage, PROTOCOL_VERSION,
};
use crate::environment::{
    builtin_action_space, EnvHandle, EpisodeConfig, ReachEnv, RewardKind, Stage,
};
use crate::error::{ReachError, Result};
use crate::kinematics::{JointVector, KinematicChain, TableGeometry};
use crate::rng::SeedSplitter;
use crate::vision::CameraConfig;

/// Conventional port when none is given on the command line.
pub const DEFAULT_PORT: u16 = 7777;

/// How often blocked session reads wake up to check for shutdown.
const SHUTDOWN_POLL: Duration = Duration::from_millis(100);

/// What a session's environment looks like before its first `CONFIG`
/// overrides arrive.
#[derive(Debug, Clone)]
pub struct ServiceDefaults {
    pub chain: KinematicChain,
    pub table: TableGeometry,
    pub camera: CameraConfig,
    pub episode: EpisodeConfig,
    /// Master seed whose "env" stream seeds sessions that do not send one.
    pub seed: u64,
}

impl Default for ServiceDefaults {
    fn default() -> Self {
        let table = TableGeometry::default();
        Self {
            chain: KinematicChain::default_chain(),
            camera: CameraConfig::for_table(&table),
            table,
            episode: EpisodeConfig {
                reward_kind: RewardKind::Sparse,
                threshold: 0.20,
                max_tries: 1,
                action_space: builtin_action_space(Stage::A1),
            },
            seed: 0,
        }
    }
}

/// A running environment service. Dropping (or calling [`EnvService::stop`])
/// stops accepting, winds down every live session, and joins all threads.
pub struct EnvService {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl EnvService {
    /// Binds `bind` (e.g. `"127.0.0.1:7777"`, port 0 for an ephemeral port)
    /// and starts accepting sessions in background threads.
    pub fn start(bind: &str, defaults: ServiceDefaults) -> Result<Self> {
        defaults.chain.validate()?;
        defaults.table.validate()?;
        defaults.camera.validate()?;
        defaults.episode.validate()?;
        let listener = TcpListener::bind(bind)
            .map_err(|e| ReachError::Transport(format!("binding {bind}: {e}")))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| ReachError::Transport(format!("configuring listener: {e}")))?;
        let addr = listener
            .local_addr()
            .map_err(|e| ReachError::Transport(format!("reading bound address: {e}")))?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&shutdown);
        let accept_thread = std::thread::spawn(move || accept_loop(listener, defaults, flag));
        log::info!("environment service listening on {addr}");
        Ok(Self { addr, shutdown, accept_thread: Some(accept_thread) })
    }

    /// The actually bound address (resolves port 0).
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Signals shutdown and waits for the accept loop and every session to
    /// finish.
    pub fn stop(mut self) {
        self.wind_down();
    }

    fn wind_down(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for EnvService {
    fn drop(&mut self) {
        self.wind_down();
    }
}

fn accept_loop(listener: TcpListener, defaults: ServiceDefaults, shutdown: Arc<AtomicBool>) {
    let mut sessions: Vec<JoinHandle<()>> = Vec::new();
    while !shutdown.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::debug!("session opened by {peer}");
                let d = defaults.clone();
                let flag = Arc::clone(&shutdown);
                sessions.push(std::thread::spawn(move || {
                    if let Err(e) = run_session(stream, &d, &flag) {
                        log::debug!("session from {peer} ended with error: {e}");
                    }
                }));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                log::error!("accept failed: {e}");
                break;
            }
        }
        sessions.retain(|h| !h.is_finished());
    }
    for handle in sessions {
        let _ = handle.join();
    }
}

/// Pulls one complete frame out of `pending`, topping it up from the stream
/// as needed. Returns `Ok(None)` when shutdown was requested while waiting.
/// Read timeouts are just wake-ups to check the flag; a closed connection is
/// a transport error.
fn next_payload(
    stream: &mut TcpStream,
    pending: &mut Vec<u8>,
    shutdown: &AtomicBool,
) -> Result<Option<Vec<u8>>> {
    loop {
        if pending.len() >= 4 {
            let len =
                u32::from_be_bytes([pending[0], pending[1], pending[2], pending[3]]) as usize;
            if len > MAX_FRAME_BYTES {
                return Err(ReachError::Protocol(format!(
                    "declared frame length {len} exceeds the {MAX_FRAME_BYTES} byte cap"
                )));
            }
            if pending.len() >= 4 + len {
                let payload = pending[4..4 + len].to_vec();
                pending.drain(..4 + len);
                return Ok(Some(payload));
            }
        }
        if shutdown.load(Ordering::Relaxed) {
            return Ok(None);
        }
        let mut chunk = [0u8; 16 * 1024];
        match stream.read(&mut chunk) {
            Ok(0) => return Err(ReachError::Transport("connection closed by peer".into())),
            Ok(n) => pending.extend_from_slice(&chunk[..n]),
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut => {}
            Err(e) => return Err(ReachError::Transport(format!("reading from peer: {e}"))),
        }
    }
}

fn send(stream: &mut TcpStream, id: u64, payload: Payload) -> Result<()> {
    write_frame(stream, &to_payload_bytes(&WireMessage { id, payload })?)
}

fn send_error(stream: &mut TcpStream, id: u64, message: String) -> Result<()> {
    send(stream, id, Payload::Error { message })
}

/// Applies a `CONFIG` body. A body carrying `seed`, `chain`, `table`, or
/// `camera` (or arriving before any environment exists) builds a fresh
/// environment; otherwise the live one is updated in place, keeping its rng
/// state. Returns the effective episode configuration.
fn apply_config(
    env: &mut Option<ReachEnv>,
    defaults: &ServiceDefaults,
    body: ConfigBody,
) -> Result<EpisodeConfig> {
    let base = env.as_ref().map(|e| *e.config()).unwrap_or(defaults.episode);
    let episode = EpisodeConfig {
        reward_kind: body.reward_kind.unwrap_or(base.reward_kind),
        threshold: body.threshold.unwrap_or(base.threshold),
        max_tries: body.max_tries.unwrap_or(base.max_tries),
        action_space: body.action_space.unwrap_or(base.action_space),
    };
    if env.is_none() || body.rebuilds() {
        let chain = body.chain.clone().unwrap_or_else(|| defaults.chain.clone());
        let table = body.table.unwrap_or(defaults.table);
        // A custom table without an explicit camera gets one fitted to it,
        // so the rendered scene stays in frame.
        let camera = body.camera.unwrap_or_else(|| {
            if body.table.is_some() {
                CameraConfig::for_table(&table)
            } else {
                defaults.camera
            }
        });
        let seed = body.seed.unwrap_or(defaults.seed);
        let rng = SeedSplitter::new(seed).stream("env");
        *env = Some(ReachEnv::new(chain, table, camera, episode, rng)?);
    } else {
        env.as_mut().expect("checked above").set_episode_config(episode)?;
    }
    Ok(episode)
}

/// Handles one request against the session environment. Errors returned
/// here become `ERROR` replies; the session continues.
fn handle_request(
    env: &mut Option<ReachEnv>,
    defaults: &ServiceDefaults,
    payload: Payload,
) -> Result<Payload> {
    fn live(env: &mut Option<ReachEnv>) -> Result<&mut ReachEnv> {
        env.as_mut().ok_or_else(|| {
            ReachError::Env("session not initialized: send CONFIG before RESET/STEP/RENDER".into())
        })
    }
    match payload {
        Payload::Config(body) => {
            let config = apply_config(env, defaults, body)?;
            Ok(Payload::ConfigReply { config })
        }
        Payload::Reset => {
            let obs = live(env)?.reset()?;
            Ok(Payload::ResetReply { observation: obs.flatten() })
        }
        Payload::Step { action } => {
            let out = live(env)?.step(&JointVector(action))?;
            Ok(Payload::StepReply {
                observation: out.observation.flatten(),
                reward: out.reward,
                done: out.done,
                distance: out.info.distance,
                success: out.info.success,
            })
        }
        Payload::Render => {
            let img = live(env)?.render()?;
            let mut ppm = Vec::new();
            img.write_ppm(&mut ppm)?;
            Ok(Payload::RenderReply {
                width: img.width,
                height: img.height,
                ppm_base64: BASE64.encode(&ppm),
            })
        }
        other => Err(ReachError::Protocol(format!(
            "{} is not a request the server accepts",
            other.type_name()
        ))),
    }
}

/// Runs one session to completion: HELLO handshake, then request/reply until
/// CLOSE, disconnect, shutdown, or a protocol violation.
fn run_session(
    mut stream: TcpStream,
    defaults: &ServiceDefaults,
    shutdown: &AtomicBool,
) -> Result<()> {
    stream.set_nodelay(true).ok();
    stream
        .set_read_timeout(Some(SHUTDOWN_POLL))
        .map_err(|e| ReachError::Transport(format!("configuring session socket: {e}")))?;
    let mut pending = Vec::new();

    // The first message must be HELLO with a version this build speaks.
    let first = match next_payload(&mut stream, &mut pending, shutdown)? {
        Some(bytes) => match from_payload_bytes(&bytes) {
            Ok(msg) => msg,
            Err(e) => {
                let _ = send_error(&mut stream, 0, e.to_string());
                return Ok(());
            }
        },
        None => return Ok(()),
    };
    match first.payload {
        Payload::Hello { ref protocol_version } if protocol_version == PROTOCOL_VERSION => {
            send(
                &mut stream,
                first.id,
                Payload::HelloReply { protocol_version: PROTOCOL_VERSION.into() },
            )?;
        }
        Payload::Hello { protocol_version } => {
            let _ = send_error(
                &mut stream,
                first.id,
                format!(
                    "unsupported protocol version {protocol_version:?}; this server speaks {PROTOCOL_VERSION:?}"
                ),
            );
            return Ok(());
        }
        other => {
            let _ = send_error(
                &mut stream,
                first.id,
                format!("session must open with HELLO, got {}", other.type_name()),
            );
            return Ok(());
        }
    }

    let mut env: Option<ReachEnv> = None;
    loop {
        let msg = match next_payload(&mut stream, &mut pending, shutdown) {
            Ok(Some(bytes)) => match from_payload_bytes(&bytes) {
                Ok(msg) => msg,
                Err(e) => {
                    // The byte stream may be desynchronized; reply once with
                    // id 0 and give up on the session.
                    let _ = send_error(&mut stream, 0, e.to_string());
                    return Ok(());
                }
            },
            Ok(None) => return Ok(()),                     // shutdown requested
            Err(ReachError::Transport(_)) => return Ok(()), // peer went away
            Err(e) => {
                let _ = send_error(&mut stream, 0, e.to_string());
                return Ok(());
            }
        };
        match msg.payload {
            Payload::Close => {
                send(&mut stream, msg.id, Payload::CloseReply)?;
                return Ok(());
            }
            Payload::Hello { .. } => {
                let _ = send_error(
                    &mut stream,
                    msg.id,
                    "HELLO is only valid as a session's first message".into(),
                );
                return Ok(());
            }
            payload => match handle_request(&mut env, defaults, payload) {
                Ok(reply) => send(&mut stream, msg.id, reply)?,
                Err(ReachError::Protocol(e)) => {
                    // A client speaking nonsense (reply types as requests)
                    // forfeits the session.
                    let _ = send_error(&mut stream, msg.id, e);
                    return Ok(());
                }
                Err(e) => send_error(&mut stream, msg.id, e.to_string())?,
            },
        }
    }
}
