//! Versioned agent checkpoints.
//!
//! Layout: an 8-byte magic, a u32 format version, a u32 length-prefixed
//! JSON header describing the agent (algorithm, configuration, action
//! space, and the name/shape/head/optimizer of every network), then the raw
//! parameter payload: for each network in header order, each layer's
//! weights (row-major) and biases as little-endian f64, followed — when the
//! network has an optimizer — by the Adam first moments and then second
//! moments in the same layer order. The replay buffer is deliberately not
//! part of a checkpoint; a resumed run refills it before learning resumes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{Agent, AgentConfig, Algorithm, DdpgAgent, SacAgent, Td3Agent};
use crate::environment::{ActionSpace, RewardKind};
use crate::error::{ReachError, Result};
use crate::neuralnet::{AdamHyper, AdamState, DenseLayer, Mlp, OutputHead};

const MAGIC: &[u8; 8] = b"REACHAGT";
const VERSION: u32 = 1;
/// Upper bound on the JSON header, to reject garbage length prefixes early.
const MAX_HEADER_BYTES: u32 = 16 * 1024 * 1024;

#[derive(Serialize, Deserialize)]
struct Header {
    algorithm: Algorithm,
    config: AgentConfig,
    action_space: ActionSpace,
    reward_kind: RewardKind,
    updates: u64,
    nets: Vec<NetHeader>,
}

#[derive(Serialize, Deserialize)]
struct NetHeader {
    name: String,
    /// `[output, input]` per layer, first layer first.
    layers: Vec<[usize; 2]>,
    head: HeadSpec,
    optimizer: Option<OptHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum HeadSpec {
    Linear,
    TanhScaled { center: Vec<f64>, half: Vec<f64> },
    MeanLogStd { dim: usize, log_std_min: f64, log_std_max: f64 },
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

impl HeadSpec {
    fn from_head(head: &OutputHead) -> Self {
        match head {
            OutputHead::Linear => HeadSpec::Linear,
            OutputHead::TanhScaled { center, half } => HeadSpec::TanhScaled {
                center: center.to_vec(),
                half: half.to_vec(),
            },
            OutputHead::MeanLogStd { dim, log_std_min, log_std_max } => HeadSpec::MeanLogStd {
                dim: *dim,
                log_std_min: *log_std_min,
                log_std_max: *log_std_max,
            },
        }
    }

    fn into_head(self) -> OutputHead {
        match self {
            HeadSpec::Linear => OutputHead::Linear,
            HeadSpec::TanhScaled { center, half } => OutputHead::TanhScaled {
                center: Array1::from(center),
                half: Array1::from(half),
            },
            HeadSpec::MeanLogStd { dim, log_std_min, log_std_max } => {
                OutputHead::MeanLogStd { dim, log_std_min, log_std_max }
            }
        }
    }

    /// Required width of the final layer, if the head constrains it.
    fn raw_width(&self) -> Option<usize> {
        match self {
            HeadSpec::Linear => None,
            HeadSpec::TanhScaled { center, .. } => Some(center.len()),
            HeadSpec::MeanLogStd { dim, .. } => Some(2 * dim),
        }
    }
}

fn chk<E: std::fmt::Display>(what: &str) -> impl Fn(E) -> ReachError + '_ {
    move |e| ReachError::Checkpoint(format!("{what}: {e}"))
}

/// One network scheduled for writing.
pub(crate) struct NetEntry<'a> {
    pub name: &'a str,
    pub net: &'a Mlp,
    pub opt: Option<&'a AdamState>,
}

pub(crate) fn write_checkpoint(
    w: &mut dyn Write,
    algorithm: Algorithm,
    config: &AgentConfig,
    space: &ActionSpace,
    reward_kind: RewardKind,
    updates: u64,
    nets: &[NetEntry],
) -> Result<()> {
    let header = Header {
        algorithm,
        config: config.clone(),
        action_space: *space,
        reward_kind,
        updates,
        nets: nets
            .iter()
            .map(|e| NetHeader {
                name: e.name.to_string(),
                layers: e.net.layers.iter().map(|l| [l.output_dim(), l.input_dim()]).collect(),
                head: HeadSpec::from_head(&e.net.head),
                optimizer: e.opt.map(|o| OptHeader {
                    lr: o.hyper.lr,
                    beta1: o.hyper.beta1,
                    beta2: o.hyper.beta2,
                    eps: o.hyper.eps,
                    t: o.t,
                }),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    w.write_all(MAGIC).map_err(chk("write magic"))?;
    w.write_all(&VERSION.to_le_bytes()).map_err(chk("write version"))?;
    let len = u32::try_from(header_bytes.len())
        .map_err(|_| ReachError::Checkpoint("header too large".into()))?;
    w.write_all(&len.to_le_bytes()).map_err(chk("write header length"))?;
    w.write_all(&header_bytes).map_err(chk("write header"))?;
    for e in nets {
        for layer in &e.net.layers {
            write_f64s(w, layer.weights.iter())?;
            write_f64s(w, layer.biases.iter())?;
        }
        if let Some(opt) = e.opt {
            for (mw, mb) in &opt.moments {
                write_f64s(w, mw.iter())?;
                write_f64s(w, mb.iter())?;
            }
            for (vw, vb) in &opt.velocities {
                write_f64s(w, vw.iter())?;
                write_f64s(w, vb.iter())?;
            }
        }
    }
    Ok(())
}

fn write_f64s<'a>(w: &mut dyn Write, vals: impl Iterator<Item = &'a f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * 1024);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
        if buf.len() >= 8 * 1024 {
            w.write_all(&buf).map_err(chk("write parameters"))?;
            buf.clear();
        }
    }
    w.write_all(&buf).map_err(chk("write parameters"))
}

/// Everything read back from a checkpoint, with networks claimable by name.
#[derive(Debug)]
pub(crate) struct CheckpointData {
    pub algorithm: Algorithm,
    pub config: AgentConfig,
    pub space: ActionSpace,
    pub reward_kind: RewardKind,
    pub updates: u64,
    nets: Vec<Option<(String, Mlp, Option<AdamState>)>>,
}

impl CheckpointData {
    pub fn expect_algorithm(&self, want: Algorithm) -> Result<()> {
        if self.algorithm != want {
            return Err(ReachError::Checkpoint(format!(
                "checkpoint holds a {} agent, expected {want}",
                self.algorithm
            )));
        }
        Ok(())
    }

    pub fn take_net(&mut self, name: &str) -> Result<(Mlp, Option<AdamState>)> {
        for slot in &mut self.nets {
            if slot.as_ref().is_some_and(|(n, _, _)| n == name) {
                let (_, net, opt) = slot.take().unwrap();
                return Ok((net, opt));
            }
        }
        Err(ReachError::Checkpoint(format!("checkpoint is missing network {name:?}")))
    }

    pub fn take_net_with_opt(&mut self, name: &str) -> Result<(Mlp, AdamState)> {
        let (net, opt) = self.take_net(name)?;
        let opt = opt.ok_or_else(|| {
            ReachError::Checkpoint(format!("network {name:?} has no optimizer state"))
        })?;
        Ok((net, opt))
    }
}

pub(crate) fn read_checkpoint(r: &mut dyn Read) -> Result<CheckpointData> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(chk("read magic"))?;
    if &magic != MAGIC {
        return Err(ReachError::Checkpoint("not an agent checkpoint (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(chk("read version"))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(ReachError::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    r.read_exact(&mut word).map_err(chk("read header length"))?;
    let header_len = u32::from_le_bytes(word);
    if header_len > MAX_HEADER_BYTES {
        return Err(ReachError::Checkpoint(format!(
            "implausible header length {header_len}"
        )));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    r.read_exact(&mut header_bytes).map_err(chk("read header"))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| ReachError::Checkpoint(format!("malformed header: {e}")))?;
    header.config.validate()?;
    header.action_space.validate()?;

    let mut nets = Vec::with_capacity(header.nets.len());
    for nh in header.nets {
        if nh.layers.is_empty() {
            return Err(ReachError::Checkpoint(format!("network {:?} has no layers", nh.name)));
        }
        for pair in nh.layers.windows(2) {
            if pair[1][1] != pair[0][0] {
                return Err(ReachError::Checkpoint(format!(
                    "network {:?}: layer widths do not chain ({} out vs {} in)",
                    nh.name, pair[0][0], pair[1][1]
                )));
            }
        }
        if let Some(want) = nh.head.raw_width() {
            let got = nh.layers.last().unwrap()[0];
            if got != want {
                return Err(ReachError::Checkpoint(format!(
                    "network {:?}: head needs {want} raw outputs, layers give {got}",
                    nh.name
                )));
            }
        }
        let mut layers = Vec::with_capacity(nh.layers.len());
        for [out, inp] in &nh.layers {
            let weights = read_matrix(r, *out, *inp)?;
            let biases = Array1::from(read_f64s(r, *out)?);
            layers.push(DenseLayer { weights, biases });
        }
        let opt = match nh.optimizer {
            None => None,
            Some(oh) => {
                let read_pairs = |r: &mut dyn Read| -> Result<Vec<(Array2<f64>, Array1<f64>)>> {
                    nh.layers
                        .iter()
                        .map(|[out, inp]| {
                            Ok((read_matrix(r, *out, *inp)?, Array1::from(read_f64s(r, *out)?)))
                        })
                        .collect()
                };
                let moments = read_pairs(r)?;
                let velocities = read_pairs(r)?;
                Some(AdamState {
                    hyper: AdamHyper { lr: oh.lr, beta1: oh.beta1, beta2: oh.beta2, eps: oh.eps },
                    t: oh.t,
                    moments,
                    velocities,
                })
            }
        };
        let net = Mlp { layers, head: nh.head.into_head() };
        if !net.all_finite() {
            return Err(ReachError::Checkpoint(format!(
                "network {:?} holds non-finite parameters",
                nh.name
            )));
        }
        nets.push(Some((nh.name, net, opt)));
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(ReachError::Checkpoint("trailing bytes after payload".into())),
        Err(e) => return Err(ReachError::Checkpoint(format!("probing for end of file: {e}"))),
    }
    Ok(CheckpointData {
        algorithm: header.algorithm,
        config: header.config,
        space: header.action_space,
        reward_kind: header.reward_kind,
        updates: header.updates,
        nets,
    })
}

fn read_matrix(r: &mut dyn Read, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let data = read_f64s(r, rows.checked_mul(cols).ok_or_else(|| {
        ReachError::Checkpoint(format!("implausible matrix shape {rows}×{cols}"))
    })?)?;
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| ReachError::Checkpoint(format!("matrix shape: {e}")))
}

fn read_f64s(r: &mut dyn Read, n: usize) -> Result<Vec<f64>> {
    if n > (1 << 28) {
        return Err(ReachError::Checkpoint(format!("implausible parameter count {n}")));
    }
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(chk("read parameters (truncated checkpoint?)"))?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Saves any agent to a file through its own `save` implementation.
pub fn save_agent_to_path(agent: &dyn Agent, path: &Path) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| ReachError::Checkpoint(format!("create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    agent.save(&mut w)?;
    w.flush().map_err(chk("flush checkpoint"))?;
    Ok(())
}

/// Restores an agent from a checkpoint file. The replay buffer starts
/// empty; `sample_rng` becomes the agent's sampling stream.
pub fn load_agent(path: &Path, sample_rng: ChaCha20Rng) -> Result<Box<dyn Agent>> {
    let file = File::open(path)
        .map_err(|e| ReachError::Checkpoint(format!("open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let data = read_checkpoint(&mut r)?;
    Ok(match data.algorithm {
        Algorithm::Ddpg => Box::new(DdpgAgent::from_checkpoint(data, sample_rng)?),
        Algorithm::Td3 => Box::new(Td3Agent::from_checkpoint(data, sample_rng)?),
        Algorithm::Sac => Box::new(SacAgent::from_checkpoint(data, sample_rng)?),
    })
}
