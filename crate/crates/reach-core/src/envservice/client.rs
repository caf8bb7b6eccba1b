//! The remote-environment client: a TCP connection wrapped in the same
//! [`EnvHandle`] interface the in-process simulator implements, so training
//! code cannot tell where the environment lives.

use std::net::TcpStream;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;

use super::frame::{read_frame, write_frame};
use super::messages::{
    from_payload_bytes, to_payload_bytes, ConfigBody, Payload, WireMessage, PROTOCOL_VERSION,
};
use crate::environment::{
    ActionSpace, EnvHandle, EpisodeConfig, Observation, RewardKind, StepInfo, StepOutcome,
};
use crate::error::{ReachError, Result};
use crate::kinematics::JointVector;
use crate::vision::TopViewImage;

/// How long a reply may take before the client gives up.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

/// A connected session against an environment service. Strictly synchronous:
/// one request in flight at a time, replies matched by correlation id.
///
/// The constructor performs the HELLO handshake and an initial CONFIG, so a
/// fresh client is immediately ready for `reset`. The episode configuration
/// echoed by the server is cached locally, which is what the read accessors
/// (`threshold`, `action_space`, …) report.
pub struct RemoteEnv {
    stream: TcpStream,
    next_id: u64,
    config: EpisodeConfig,
}

impl RemoteEnv {
    /// Connects with the default timeout and the server's default
    /// environment configuration.
    pub fn connect(addr: &str) -> Result<Self> {
        Self::connect_with(addr, ConfigBody::default(), DEFAULT_TIMEOUT)
    }

    /// Connects, shakes hands, and applies `config` (typically at least the
    /// seed) in one go.
    pub fn connect_with(addr: &str, config: ConfigBody, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| ReachError::Transport(format!("connecting to {addr}: {e}")))?;
        stream.set_nodelay(true).ok();
        stream
            .set_read_timeout(Some(timeout))
            .and_then(|()| stream.set_write_timeout(Some(timeout)))
            .map_err(|e| ReachError::Transport(format!("configuring socket: {e}")))?;
        let mut client = Self {
            stream,
            next_id: 1,
            // Placeholder until the handshake CONFIG reply overwrites it.
            config: EpisodeConfig {
                reward_kind: RewardKind::Sparse,
                threshold: 0.20,
                max_tries: 1,
                action_space: crate::environment::builtin_action_space(
                    crate::environment::Stage::A1,
                ),
            },
        };
        match client.request(Payload::Hello { protocol_version: PROTOCOL_VERSION.into() })? {
            Payload::HelloReply { protocol_version } => {
                if protocol_version != PROTOCOL_VERSION {
                    return Err(ReachError::Protocol(format!(
                        "server speaks protocol version {protocol_version:?}, this client needs {PROTOCOL_VERSION:?}"
                    )));
                }
            }
            other => {
                return Err(ReachError::Protocol(format!(
                    "expected HELLO_REPLY, got {}",
                    other.type_name()
                )))
            }
        }
        client.configure(config)?;
        Ok(client)
    }

    /// Sends a partial reconfiguration and refreshes the cached episode
    /// configuration from the server's reply.
    pub fn configure(&mut self, body: ConfigBody) -> Result<EpisodeConfig> {
        match self.request(Payload::Config(body))? {
            Payload::ConfigReply { config } => {
                self.config = config;
                Ok(config)
            }
            other => Err(ReachError::Protocol(format!(
                "expected CONFIG_REPLY, got {}",
                other.type_name()
            ))),
        }
    }

    /// Ends the session politely. Dropping the client works too — the
    /// server notices the closed socket — but this waits for the
    /// acknowledgement.
    pub fn close(&mut self) -> Result<()> {
        match self.request(Payload::Close)? {
            Payload::CloseReply => Ok(()),
            other => Err(ReachError::Protocol(format!(
                "expected CLOSE_REPLY, got {}",
                other.type_name()
            ))),
        }
    }

    fn request(&mut self, payload: Payload) -> Result<Payload> {
        let id = self.next_id;
        self.next_id += 1;
        write_frame(&mut self.stream, &to_payload_bytes(&WireMessage { id, payload })?)?;
        let reply = from_payload_bytes(&read_frame(&mut self.stream)?)?;
        if reply.id != id {
            return Err(ReachError::Protocol(format!(
                "correlation id mismatch: request {id}, reply {}",
                reply.id
            )));
        }
        if let Payload::Error { message } = reply.payload {
            return Err(ReachError::Env(message));
        }
        Ok(reply.payload)
    }
}

impl EnvHandle for RemoteEnv {
    fn reset(&mut self) -> Result<Observation> {
        match self.request(Payload::Reset)? {
            Payload::ResetReply { observation } => Observation::from_flat(&observation),
            other => Err(ReachError::Protocol(format!(
                "expected RESET_REPLY, got {}",
                other.type_name()
            ))),
        }
    }

    fn step(&mut self, action: &JointVector) -> Result<StepOutcome> {
        match self.request(Payload::Step { action: action.0 })? {
            Payload::StepReply { observation, reward, done, distance, success } => Ok(StepOutcome {
                observation: Observation::from_flat(&observation)?,
                reward,
                done,
                info: StepInfo { distance, success, exhausted: done && !success },
            }),
            other => Err(ReachError::Protocol(format!(
                "expected STEP_REPLY, got {}",
                other.type_name()
            ))),
        }
    }

    fn render(&mut self) -> Result<TopViewImage> {
        match self.request(Payload::Render)? {
            Payload::RenderReply { width, height, ppm_base64 } => {
                let ppm = BASE64
                    .decode(ppm_base64.as_bytes())
                    .map_err(|e| ReachError::Protocol(format!("undecodable image payload: {e}")))?;
                let img = TopViewImage::read_ppm(&mut ppm.as_slice())?;
                if img.width != width || img.height != height {
                    return Err(ReachError::Protocol(format!(
                        "image dimensions {}×{} disagree with the declared {width}×{height}",
                        img.width, img.height
                    )));
                }
                Ok(img)
            }
            other => Err(ReachError::Protocol(format!(
                "expected RENDER_REPLY, got {}",
                other.type_name()
            ))),
        }
    }

    fn set_threshold(&mut self, tau: f64) -> Result<()> {
        self.configure(ConfigBody { threshold: Some(tau), ..ConfigBody::default() })?;
        Ok(())
    }

    fn set_action_space(&mut self, space: &ActionSpace) -> Result<()> {
        self.configure(ConfigBody { action_space: Some(*space), ..ConfigBody::default() })?;
        Ok(())
    }

    fn action_space(&self) -> ActionSpace {
        self.config.action_space
    }

    fn threshold(&self) -> f64 {
        self.config.threshold
    }

    fn reward_kind(&self) -> RewardKind {
        self.config.reward_kind
    }

    fn max_tries(&self) -> u32 {
        self.config.max_tries
    }
}
