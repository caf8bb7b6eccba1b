//! Off-policy actor-critic learners over the reaching environment.
//!
//! Three algorithms share one [`Agent`] interface: deterministic-policy
//! learners with one critic ([`DdpgAgent`]) or clipped twin critics and
//! delayed policy updates ([`Td3Agent`]), and a maximum-entropy learner with
//! a squashed-Gaussian policy and a separate state-value network
//! ([`SacAgent`]). All of them consume [`Transition`]s through
//! [`Agent::remember`], optionally append hindsight-relabeled copies when an
//! episode closes, and perform one gradient update per [`Agent::learn`] call
//! once the replay buffer holds enough data.

mod buffer;
mod checkpoint;
mod ddpg;
mod her;
mod sac;
mod td3;

pub use buffer::ReplayBuffer;
pub use checkpoint::{load_agent, save_agent_to_path};
pub use ddpg::DdpgAgent;
pub use her::{her_relabel, HerConfig, HerStrategy};
pub use sac::{squashed_gaussian_log_prob, SacAgent};
pub use td3::Td3Agent;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::environment::{ActionSpace, Observation, RewardKind};
use crate::error::{ReachError, Result};
use crate::kinematics::{JointVector, JOINT_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Ddpg,
    Td3,
    Sac,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Algorithm::Ddpg => "ddpg",
            Algorithm::Td3 => "td3",
            Algorithm::Sac => "sac",
        };
        f.write_str(s)
    }
}

impl FromStr for Algorithm {
    type Err = ReachError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ddpg" => Ok(Algorithm::Ddpg),
            "td3" => Ok(Algorithm::Td3),
            "sac" => Ok(Algorithm::Sac),
            other => Err(ReachError::InvalidConfig(format!(
                "unknown algorithm {other:?} (expected ddpg, td3 or sac)"
            ))),
        }
    }
}

/// Whether an action request may explore or must be the policy's best guess.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Train,
    Eval,
}

/// One stored step of experience.
///
/// `done` is the bootstrap-terminal flag: true when the step succeeded, and
/// also when the episode ended with its only allowed try (a one-try episode
/// has no continuation worth bootstrapping into). Running out of tries in a
/// multi-try episode is a budget cut, not a property of the state, so those
/// transitions keep `done == false`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: JointVector,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
    /// Goal the episode was asked to reach (the observation's target).
    pub desired_goal: [f64; 3],
    /// Where the end effector actually ended up.
    pub achieved_goal: [f64; 3],
}

/// Hyperparameters shared by every learner. Noise scales are expressed as
/// fractions of each joint's half-range so one setting fits all stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Hidden layer widths shared by every network.
    pub hidden: Vec<usize>,
    /// Learning rates; `None` picks the per-algorithm default
    /// (1e-3 for the deterministic learners, 3e-4 for SAC).
    pub lr_actor: Option<f64>,
    pub lr_critic: Option<f64>,
    pub lr_value: Option<f64>,
    /// Polyak mixing weight for target networks.
    pub rho: f64,
    /// Exploration noise std, per joint: `gaussian_sigma · half_range`.
    /// Kept small by default — the success-radius curriculum only tightens
    /// on unbroken success streaks, and wide Gaussian scatter stalls it.
    pub gaussian_sigma: f64,
    /// Probability of replacing the whole action with a uniform draw.
    /// Doubles as the curriculum's pace regulator: random episodes break
    /// success streaks, so tightening waits for genuinely reliable policies.
    pub epsilon_random: f64,
    /// Target-smoothing noise std (fraction of half-range).
    pub target_noise_sigma: f64,
    /// Target-smoothing noise is clamped to ± this fraction of half-range.
    pub target_noise_clip: f64,
    /// Critic updates per actor/target update.
    pub policy_delay: u64,
    /// Fixed entropy temperature, scaled to the unit-magnitude rewards
    /// (values tuned for larger reward scales drown the return and leave
    /// the policy near-uniform).
    pub entropy_alpha: f64,
    pub log_std_bounds: [f64; 2],
    pub her: HerConfig,
    /// Updates begin once the buffer holds this many transitions;
    /// `None` means `max(batch_size, 1000)`.
    pub learn_start: Option<usize>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 256,
            buffer_capacity: 100_000,
            hidden: vec![256, 256],
            lr_actor: None,
            lr_critic: None,
            lr_value: None,
            rho: 0.005,
            gaussian_sigma: 0.02,
            epsilon_random: 0.15,
            target_noise_sigma: 0.2,
            target_noise_clip: 0.5,
            policy_delay: 2,
            entropy_alpha: 0.03,
            log_std_bounds: [-20.0, 2.0],
            her: HerConfig::default(),
            learn_start: None,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(ReachError::InvalidConfig(msg.into()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if self.buffer_capacity < self.batch_size {
            return bad("buffer_capacity must be ≥ batch_size");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden must list at least one nonzero layer width");
        }
        for (name, lr) in [
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("lr_value", self.lr_value),
        ] {
            if let Some(v) = lr {
                if !(v.is_finite() && v > 0.0) {
                    return bad(&format!("{name} must be positive and finite"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if !(self.gaussian_sigma.is_finite() && self.gaussian_sigma >= 0.0) {
            return bad("gaussian_sigma must be ≥ 0");
        }
        if !(0.0..=1.0).contains(&self.epsilon_random) {
            return bad("epsilon_random must lie in [0, 1]");
        }
        if !(self.target_noise_sigma.is_finite() && self.target_noise_sigma >= 0.0) {
            return bad("target_noise_sigma must be ≥ 0");
        }
        if !(self.target_noise_clip.is_finite() && self.target_noise_clip >= 0.0) {
            return bad("target_noise_clip must be ≥ 0");
        }
        if self.policy_delay == 0 {
            return bad("policy_delay must be ≥ 1");
        }
        if !(self.entropy_alpha.is_finite() && self.entropy_alpha >= 0.0) {
            return bad("entropy_alpha must be ≥ 0");
        }
        if !(self.log_std_bounds[0].is_finite()
            && self.log_std_bounds[1].is_finite()
            && self.log_std_bounds[0] < self.log_std_bounds[1])
        {
            return bad("log_std_bounds must be finite with min < max");
        }
        Ok(())
    }

    pub fn lr_actor_for(&self, algo: Algorithm) -> f64 {
        self.lr_actor.unwrap_or(default_lr(algo))
    }

    pub fn lr_critic_for(&self, algo: Algorithm) -> f64 {
        self.lr_critic.unwrap_or(default_lr(algo))
    }

    pub fn lr_value_for(&self, algo: Algorithm) -> f64 {
        self.lr_value.unwrap_or(default_lr(algo))
    }

    /// Buffer size at which updates begin. Never below `batch_size`, since
    /// a batch cannot be sampled from fewer transitions than it holds.
    pub fn learn_start_resolved(&self) -> usize {
        self.learn_start.unwrap_or(self.batch_size.max(1000)).max(self.batch_size)
    }
}

fn default_lr(algo: Algorithm) -> f64 {
    match algo {
        Algorithm::Sac => 3e-4,
        _ => 1e-3,
    }
}

/// Scalars produced by one gradient update, for the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    /// 1-based index of the update that produced these numbers.
    pub update: u64,
    pub critic_loss: f64,
    /// Second critic's loss (twin-critic learners only).
    pub critic2_loss: Option<f64>,
    /// State-value loss (SAC only).
    pub value_loss: Option<f64>,
    /// Objective the actor step minimized; `None` when the actor update was
    /// skipped this round (delayed policy updates).
    pub actor_objective: Option<f64>,
}

pub trait Agent {
    fn algorithm(&self) -> Algorithm;
    fn config(&self) -> &AgentConfig;
    fn action_space(&self) -> &ActionSpace;
    /// Swaps the action bounds (curriculum stage changes). Learned
    /// parameters are kept.
    fn set_action_space(&mut self, space: &ActionSpace) -> Result<()>;
    fn reward_kind(&self) -> RewardKind;

    /// Picks an action. In `Eval` mode this is deterministic and draws
    /// nothing from `rng`; in `Train` mode exploration noise (or the
    /// policy's own stochasticity) applies. The result always lies inside
    /// the action space, with frozen joints exactly zero.
    fn act(&self, obs: &Observation, mode: ActMode, rng: &mut ChaCha20Rng) -> JointVector;

    /// Stores a transition in the replay buffer (and queues it for
    /// hindsight relabeling when that is enabled).
    fn remember(&mut self, t: Transition);

    /// Closes the running episode: flushes hindsight-relabeled copies of its
    /// transitions into the buffer, recomputing rewards under the threshold
    /// `tau` the episode was played with.
    fn end_episode(&mut self, tau: f64) -> Result<()>;

    /// One gradient update from a sampled minibatch. Returns `None` (and
    /// does nothing) while the buffer is still below the learn-start size.
    fn learn(&mut self) -> Result<Option<UpdateDiagnostics>>;

    /// Number of gradient updates performed so far.
    fn updates(&self) -> u64;

    fn buffer(&self) -> &ReplayBuffer;

    /// Writes a checkpoint (parameters, optimizer state, configuration; the
    /// replay buffer is deliberately not included).
    fn save(&self, w: &mut dyn Write) -> Result<()>;
}

/// Constructs an agent of the requested kind. `init_rng` drives weight
/// initialization (networks are drawn in a fixed documented order);
/// `sample_rng` is handed to the agent for minibatch sampling and in-update
/// noise.
pub fn build_agent(
    algo: Algorithm,
    config: &AgentConfig,
    space: &ActionSpace,
    reward_kind: RewardKind,
    init_rng: &mut ChaCha20Rng,
    sample_rng: ChaCha20Rng,
) -> Result<Box<dyn Agent>> {
    Ok(match algo {
        Algorithm::Ddpg => Box::new(DdpgAgent::new(config, space, reward_kind, init_rng, sample_rng)?),
        Algorithm::Td3 => Box::new(Td3Agent::new(config, space, reward_kind, init_rng, sample_rng)?),
        Algorithm::Sac => Box::new(SacAgent::new(config, space, reward_kind, init_rng, sample_rng)?),
    })
}

// ---------------------------------------------------------------------------
// Shared internals for the concrete learners.
// ---------------------------------------------------------------------------

/// A minibatch laid out as dense arrays (one row per transition).
pub(crate) struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_obs: Array2<f64>,
    /// 1.0 where the transition may bootstrap, 0.0 where it is terminal.
    pub not_done: Array1<f64>,
    /// True when every transition is terminal (the bootstrap pass can be
    /// skipped entirely).
    pub all_done: bool,
}

pub(crate) fn assemble_batch(transitions: &[&Transition]) -> Batch {
    let n = transitions.len();
    let mut obs = Array2::zeros((n, Observation::DIM));
    let mut actions = Array2::zeros((n, JOINT_COUNT));
    let mut rewards = Array1::zeros(n);
    let mut next_obs = Array2::zeros((n, Observation::DIM));
    let mut not_done = Array1::zeros(n);
    let mut all_done = true;
    for (i, t) in transitions.iter().enumerate() {
        let o = t.obs.flatten();
        let no = t.next_obs.flatten();
        for j in 0..Observation::DIM {
            obs[(i, j)] = o[j];
            next_obs[(i, j)] = no[j];
        }
        for j in 0..JOINT_COUNT {
            actions[(i, j)] = t.action.0[j];
        }
        rewards[i] = t.reward;
        not_done[i] = if t.done { 0.0 } else { 1.0 };
        all_done &= t.done;
    }
    Batch { obs, actions, rewards, next_obs, not_done, all_done }
}

/// State-action input for the critics: observations and actions side by side.
pub(crate) fn concat_state_action(obs: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[obs.view(), actions.view()])
        .expect("row counts match by construction")
}

/// Exploration for deterministic policies: with probability
/// `epsilon_random` a fresh uniform action, otherwise per-joint Gaussian
/// noise scaled by `gaussian_sigma · half_range`, clamped back into bounds.
/// Frozen joints stay exactly zero.
pub(crate) fn explore_deterministic(
    policy_action: &JointVector,
    space: &ActionSpace,
    gaussian_sigma: f64,
    epsilon_random: f64,
    rng: &mut ChaCha20Rng,
) -> JointVector {
    let u: f64 = rng.random();
    if u < epsilon_random {
        return space.sample_uniform(rng);
    }
    let half = space.half_range();
    let mut a = policy_action.0;
    for i in 0..JOINT_COUNT {
        if half[i] > 0.0 {
            let n: f64 = StandardNormal.sample(rng);
            a[i] += n * gaussian_sigma * half[i];
        }
    }
    crate::environment::clip_action(&a, space)
}

/// Runs a single observation through an actor network and returns the raw
/// output row.
pub(crate) fn forward_single(
    net: &crate::neuralnet::Mlp,
    obs: &Observation,
) -> Result<Array1<f64>> {
    let x = Array2::from_shape_vec((1, Observation::DIM), obs.flatten().to_vec())
        .expect("fixed shape");
    let (y, _) = net.forward(&x)?;
    Ok(y.row(0).to_owned())
}

/// Mean squared error between a critic column and its target, with the
/// matching upstream gradient (d mse / d prediction).
pub(crate) fn mse_and_grad(pred: &Array1<f64>, target: &Array1<f64>) -> (f64, Array2<f64>) {
    let n = pred.len() as f64;
    let err = pred - target;
    let loss = err.mapv(|e| e * e).mean().unwrap_or(0.0);
    let grad = err.mapv(|e| 2.0 * e / n).insert_axis(Axis(1));
    (loss, grad)
}

/// Layer widths for a network from `input` through the shared hidden stack
/// to `output`.
pub(crate) fn net_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

/// Tanh-squashing head matching an action space (frozen joints get a zero
/// half-range and stay constant).
pub(crate) fn tanh_head(space: &ActionSpace) -> crate::neuralnet::OutputHead {
    crate::neuralnet::OutputHead::TanhScaled {
        center: Array1::from(space.center().to_vec()),
        half: Array1::from(space.half_range().to_vec()),
    }
}

/// Replay storage plus the per-episode staging area for hindsight
/// relabeling. Originals enter the buffer immediately on `remember`; the
/// relabeled copies are appended when the episode closes, because only then
/// is the substitute goal known.
pub(crate) struct Memory {
    pub buffer: ReplayBuffer,
    pending: Vec<Transition>,
    her: HerConfig,
    reward_kind: RewardKind,
}

impl Memory {
    pub fn new(capacity: usize, her: HerConfig, reward_kind: RewardKind) -> Result<Self> {
        Ok(Self { buffer: ReplayBuffer::new(capacity)?, pending: Vec::new(), her, reward_kind })
    }

    pub fn remember(&mut self, t: Transition) {
        if self.her.enabled && self.her.relabels_per_transition > 0 {
            self.pending.push(t.clone());
        }
        self.buffer.push(t);
    }

    pub fn end_episode(&mut self, tau: f64) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let originals = self.pending.len();
        let full = her_relabel(
            &self.pending,
            self.her.strategy,
            self.her.relabels_per_transition,
            tau,
            self.reward_kind,
        )?;
        for t in full.into_iter().skip(originals) {
            self.buffer.push(t);
        }
        self.pending.clear();
        Ok(())
    }
}

/// Samples a training batch once the buffer has reached the learn-start
/// size; `None` before that.
pub(crate) fn sample_if_ready(
    memory: &Memory,
    config: &AgentConfig,
    rng: &mut ChaCha20Rng,
) -> Result<Option<Batch>> {
    if memory.buffer.len() < config.learn_start_resolved() {
        return Ok(None);
    }
    let picks = memory.buffer.sample(config.batch_size, rng)?;
    Ok(Some(assemble_batch(&picks)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{builtin_action_space, Stage};
    use crate::rng::SeedSplitter;

    #[test]
    fn algorithm_names_round_trip() {
        for algo in [Algorithm::Ddpg, Algorithm::Td3, Algorithm::Sac] {
            assert_eq!(algo.to_string().parse::<Algorithm>().unwrap(), algo);
            let json = serde_json::to_string(&algo).unwrap();
            assert_eq!(serde_json::from_str::<Algorithm>(&json).unwrap(), algo);
        }
        assert!("a2c".parse::<Algorithm>().is_err());
    }

    #[test]
    fn config_defaults_and_resolution() {
        let cfg = AgentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.gamma, 0.99);
        assert_eq!(cfg.batch_size, 256);
        assert_eq!(cfg.buffer_capacity, 100_000);
        assert_eq!(cfg.rho, 0.005);
        assert_eq!(cfg.policy_delay, 2);
        assert_eq!(cfg.entropy_alpha, 0.03);
        assert_eq!(cfg.learn_start_resolved(), 1000);
        assert_eq!(cfg.lr_actor_for(Algorithm::Ddpg), 1e-3);
        assert_eq!(cfg.lr_critic_for(Algorithm::Td3), 1e-3);
        assert_eq!(cfg.lr_actor_for(Algorithm::Sac), 3e-4);
        let mut big_batch = cfg.clone();
        big_batch.batch_size = 4096;
        assert_eq!(big_batch.learn_start_resolved(), 4096);
        let mut tiny_start = cfg.clone();
        tiny_start.learn_start = Some(1);
        assert_eq!(tiny_start.learn_start_resolved(), 256, "never below the batch size");
        let mut pinned = cfg.clone();
        pinned.lr_actor = Some(5e-4);
        assert_eq!(pinned.lr_actor_for(Algorithm::Sac), 5e-4);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let base = AgentConfig::default();
        let mut c = base.clone();
        c.gamma = 1.5;
        assert!(c.validate().is_err());
        c = base.clone();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        c = base.clone();
        c.buffer_capacity = 10;
        assert!(c.validate().is_err(), "capacity below batch size");
        c = base.clone();
        c.policy_delay = 0;
        assert!(c.validate().is_err());
        c = base.clone();
        c.hidden = vec![];
        assert!(c.validate().is_err());
        c = base.clone();
        c.log_std_bounds = [2.0, -20.0];
        assert!(c.validate().is_err());
        c = base;
        c.lr_actor = Some(-1.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn exploration_respects_bounds_and_frozen_joints() {
        let space = builtin_action_space(Stage::A1);
        let mut rng = SeedSplitter::new(9).stream("explore-test");
        let center = JointVector(space.center());
        for _ in 0..2000 {
            let a = explore_deterministic(&center, &space, 0.4, 0.1, &mut rng);
            assert!(space.contains(&a));
            for i in 0..JOINT_COUNT {
                if space.low[i] == space.high[i] {
                    assert_eq!(a.0[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn batch_assembly_matches_fields() {
        let obs = Observation {
            ee_position: [1.0, 2.0, 3.0],
            target_position: [4.0, 5.0, 6.0],
            joint_angles: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        };
        let next = Observation { ee_position: [7.0, 8.0, 9.0], ..obs };
        let t1 = Transition {
            obs,
            action: JointVector([0.5; 6]),
            reward: -0.25,
            next_obs: next,
            done: false,
            desired_goal: obs.target_position,
            achieved_goal: next.ee_position,
        };
        let mut t2 = t1.clone();
        t2.done = true;
        t2.reward = 1.0;
        let batch = assemble_batch(&[&t1, &t2]);
        assert_eq!(batch.obs.shape(), &[2, 12]);
        assert_eq!(batch.obs[(0, 0)], 1.0);
        assert_eq!(batch.next_obs[(1, 2)], 9.0);
        assert_eq!(batch.actions[(0, 3)], 0.5);
        assert_eq!(batch.rewards[1], 1.0);
        assert_eq!(batch.not_done[0], 1.0);
        assert_eq!(batch.not_done[1], 0.0);
        assert!(!batch.all_done);
        let sa = concat_state_action(&batch.obs, &batch.actions);
        assert_eq!(sa.shape(), &[2, 18]);
        assert_eq!(sa[(0, 12)], 0.5);
    }
}
