//! The JSON message vocabulary riding inside frames. See the module-level
//! protocol table in [`super`] for the field-by-field contract.

use serde::{Deserialize, Serialize};

use crate::environment::{ActionSpace, EpisodeConfig, RewardKind};
use crate::error::{ReachError, Result};
use crate::kinematics::{KinematicChain, TableGeometry};
use crate::vision::CameraConfig;

/// The only protocol revision this build speaks.
pub const PROTOCOL_VERSION: &str = "1";

/// One message: correlation id plus the typed payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub id: u64,
    #[serde(flatten)]
    pub payload: Payload,
}

/// Partial environment (re)configuration. Fields left `None` keep their
/// current values. `seed`, `chain`, `table`, and `camera` rebuild the
/// session's environment (the seed names the master whose "env" stream the
/// environment draws from); the remaining fields mutate it in place without
/// touching its rng state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_kind: Option<RewardKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tries: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_space: Option<ActionSpace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<KinematicChain>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<TableGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraConfig>,
}

impl ConfigBody {
    /// Whether applying this body requires building a fresh environment.
    pub fn rebuilds(&self) -> bool {
        self.seed.is_some() || self.chain.is_some() || self.table.is_some() || self.camera.is_some()
    }
}

/// Message types. Unit variants serialize without a `body` key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body")]
pub enum Payload {
    #[serde(rename = "HELLO")]
    Hello { protocol_version: String },
    #[serde(rename = "HELLO_REPLY")]
    HelloReply { protocol_version: String },
    #[serde(rename = "CONFIG")]
    Config(ConfigBody),
    #[serde(rename = "CONFIG_REPLY")]
    ConfigReply { config: EpisodeConfig },
    #[serde(rename = "RESET")]
    Reset,
    #[serde(rename = "RESET_REPLY")]
    ResetReply { observation: [f64; 12] },
    #[serde(rename = "STEP")]
    Step { action: [f64; 6] },
    #[serde(rename = "STEP_REPLY")]
    StepReply {
        observation: [f64; 12],
        reward: f64,
        done: bool,
        distance: f64,
        success: bool,
    },
    #[serde(rename = "RENDER")]
    Render,
    #[serde(rename = "RENDER_REPLY")]
    RenderReply {
        width: u32,
        height: u32,
        ppm_base64: String,
    },
    #[serde(rename = "CLOSE")]
    Close,
    #[serde(rename = "CLOSE_REPLY")]
    CloseReply,
    #[serde(rename = "ERROR")]
    Error { message: String },
}

impl Payload {
    /// The wire name of this message type (for diagnostics).
    pub fn type_name(&self) -> &'static str {
        match self {
            Payload::Hello { .. } => "HELLO",
            Payload::HelloReply { .. } => "HELLO_REPLY",
            Payload::Config(_) => "CONFIG",
            Payload::ConfigReply { .. } => "CONFIG_REPLY",
            Payload::Reset => "RESET",
            Payload::ResetReply { .. } => "RESET_REPLY",
            Payload::Step { .. } => "STEP",
            Payload::StepReply { .. } => "STEP_REPLY",
            Payload::Render => "RENDER",
            Payload::RenderReply { .. } => "RENDER_REPLY",
            Payload::Close => "CLOSE",
            Payload::CloseReply => "CLOSE_REPLY",
            Payload::Error { .. } => "ERROR",
        }
    }
}

/// Serializes a message to its JSON payload bytes.
pub fn to_payload_bytes(msg: &WireMessage) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(msg)?)
}

/// Parses JSON payload bytes into a message; invalid UTF-8, malformed JSON,
/// or an unknown shape all surface as protocol errors naming the fault.
pub fn from_payload_bytes(bytes: &[u8]) -> Result<WireMessage> {
    serde_json::from_slice(bytes)
        .map_err(|e| ReachError::Protocol(format!("undecodable message payload: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{builtin_action_space, Stage};

    fn round_trip(msg: &WireMessage) -> WireMessage {
        let bytes = to_payload_bytes(msg).unwrap();
        from_payload_bytes(&bytes).unwrap()
    }

    #[test]
    fn every_variant_round_trips() {
        let samples = vec![
            Payload::Hello { protocol_version: PROTOCOL_VERSION.into() },
            Payload::HelloReply { protocol_version: PROTOCOL_VERSION.into() },
            Payload::Config(ConfigBody {
                seed: Some(42),
                threshold: Some(0.2),
                action_space: Some(builtin_action_space(Stage::A2Prime)),
                ..ConfigBody::default()
            }),
            Payload::ConfigReply {
                config: EpisodeConfig {
                    reward_kind: RewardKind::Dense,
                    threshold: 0.07,
                    max_tries: 3,
                    action_space: builtin_action_space(Stage::A3),
                },
            },
            Payload::Reset,
            Payload::ResetReply { observation: [0.125; 12] },
            Payload::Step { action: [0.1, -0.2, 0.3, 0.0, 0.5, -0.6] },
            Payload::StepReply {
                observation: [1.0; 12],
                reward: -0.25,
                done: true,
                distance: 0.25,
                success: false,
            },
            Payload::Render,
            Payload::RenderReply { width: 4, height: 2, ppm_base64: "UDY=".into() },
            Payload::Close,
            Payload::CloseReply,
            Payload::Error { message: "boom".into() },
        ];
        for (i, payload) in samples.into_iter().enumerate() {
            let msg = WireMessage { id: i as u64, payload };
            assert_eq!(round_trip(&msg), msg);
        }
    }

    #[test]
    fn the_json_shape_is_pinned() {
        let close = WireMessage { id: 9, payload: Payload::Close };
        assert_eq!(
            String::from_utf8(to_payload_bytes(&close).unwrap()).unwrap(),
            r#"{"id":9,"type":"CLOSE"}"#
        );
        let hello = WireMessage {
            id: 1,
            payload: Payload::Hello { protocol_version: "1".into() },
        };
        assert_eq!(
            String::from_utf8(to_payload_bytes(&hello).unwrap()).unwrap(),
            r#"{"id":1,"type":"HELLO","body":{"protocol_version":"1"}}"#
        );
        let step = WireMessage {
            id: 2,
            payload: Payload::Step { action: [0.5, 0.0, -1.0, 0.0, 0.0, 0.0] },
        };
        assert_eq!(
            String::from_utf8(to_payload_bytes(&step).unwrap()).unwrap(),
            r#"{"id":2,"type":"STEP","body":{"action":[0.5,0.0,-1.0,0.0,0.0,0.0]}}"#
        );
    }

    #[test]
    fn floats_cross_the_wire_bit_exactly() {
        // Awkward values: subnormal-ish, repeating-binary, negative zero.
        let values = [
            0.1 + 0.2,
            1.0 / 3.0,
            f64::MIN_POSITIVE,
            -0.0,
            982.123456789e-12,
            std::f64::consts::PI,
        ];
        let mut action = [0.0; 6];
        action.copy_from_slice(&values);
        let msg = WireMessage { id: 3, payload: Payload::Step { action } };
        match round_trip(&msg).payload {
            Payload::Step { action: back } => {
                for (a, b) in action.iter().zip(back.iter()) {
                    assert_eq!(a.to_bits(), b.to_bits(), "{a} came back as {b}");
                }
            }
            other => panic!("wrong variant: {other:?}"),
        }
    }

    #[test]
    fn malformed_payloads_name_the_fault() {
        for bad in [
            &b"not json"[..],
            b"{\"id\":1}",
            b"{\"id\":1,\"type\":\"NOPE\"}",
            b"{\"type\":\"RESET\"}",
            b"\xff\xfe",
        ] {
            assert!(matches!(
                from_payload_bytes(bad),
                Err(ReachError::Protocol(_))
            ));
        }
    }
}
