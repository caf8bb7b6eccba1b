//! The one-step reaching environment: reset/step semantics, the sparse and
//! dense reward rules, the 12-dim observation, and the staged action spaces.
//!
//! An episode is: reset to the zero pose with a freshly sampled target, then
//! up to `max_tries` absolute joint commands. Success means the end effector
//! lands strictly closer than the threshold τ to the cylinder center.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ReachError, Result};
use crate::kinematics::{
    distance_to_target, forward_kinematics, sample_target, JointVector, KinematicChain,
    TableGeometry, TargetPosition, JOINT_COUNT,
};
use crate::vision::{render_scene, CameraConfig, TopViewImage};

/// Progressive action-space stages. A2 is the variant exactly as printed
/// (joints 1–3 with tighter shoulder/elbow ranges); A2' additionally opens
/// joint 5, matching the "joints 1–3, 5" experiments; A3 actuates everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "a1")]
    A1,
    #[serde(rename = "a2")]
    A2,
    #[serde(rename = "a2p")]
    A2Prime,
    #[serde(rename = "a3")]
    A3,
}

impl Stage {
    /// Curriculum rank; stages may only advance toward A3. A2 and A2' share
    /// a rank — they are readings of the same intermediate stage.
    pub fn rank(&self) -> u8 {
        match self {
            Stage::A1 => 0,
            Stage::A2 | Stage::A2Prime => 1,
            Stage::A3 => 2,
        }
    }

    /// Human-readable label of the actuated joint set, 1-based.
    pub fn joints_label(&self) -> &'static str {
        match self {
            Stage::A1 | Stage::A2 => "1-3",
            Stage::A2Prime => "1-3,5",
            Stage::A3 => "1-6",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::A1 => write!(f, "A1"),
            Stage::A2 => write!(f, "A2"),
            Stage::A2Prime => write!(f, "A2'"),
            Stage::A3 => write!(f, "A3"),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = ReachError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a1" => Ok(Stage::A1),
            "a2" => Ok(Stage::A2),
            "a2'" | "a2p" | "a2prime" => Ok(Stage::A2Prime),
            "a3" => Ok(Stage::A3),
            other => Err(ReachError::InvalidConfig(format!(
                "unknown stage {other:?} (expected a1, a2, a2', or a3)"
            ))),
        }
    }
}

/// Per-joint command bounds in radians. Joints with `low == high == 0` are
/// frozen: they always command exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub low: [f64; JOINT_COUNT],
    pub high: [f64; JOINT_COUNT],
}

impl ActionSpace {
    pub fn validate(&self) -> Result<()> {
        for i in 0..JOINT_COUNT {
            if !self.low[i].is_finite() || !self.high[i].is_finite() {
                return Err(ReachError::NonFinite(format!("action bounds, joint {}", i + 1)));
            }
            if self.low[i] > self.high[i] {
                return Err(ReachError::InvalidConfig(format!(
                    "action bounds inverted on joint {}: {} > {}",
                    i + 1,
                    self.low[i],
                    self.high[i]
                )));
            }
            if self.low[i] == self.high[i] && self.low[i] != 0.0 {
                return Err(ReachError::InvalidConfig(format!(
                    "non-actuated joint {} must be pinned at 0",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// True where the joint actually moves (low < high).
    pub fn actuated_mask(&self) -> [bool; JOINT_COUNT] {
        std::array::from_fn(|i| self.low[i] < self.high[i])
    }

    pub fn actuated_count(&self) -> usize {
        self.actuated_mask().iter().filter(|&&m| m).count()
    }

    /// Midpoint of each joint range; 0 for frozen joints.
    pub fn center(&self) -> [f64; JOINT_COUNT] {
        std::array::from_fn(|i| 0.5 * (self.low[i] + self.high[i]))
    }

    /// Half the range of each joint; 0 for frozen joints. This is the scale
    /// used for exploration and smoothing noise.
    pub fn half_range(&self) -> [f64; JOINT_COUNT] {
        std::array::from_fn(|i| 0.5 * (self.high[i] - self.low[i]))
    }

    /// Uniform sample within bounds; frozen joints stay 0. Draws one value
    /// per actuated joint, in joint order.
    pub fn sample_uniform(&self, rng: &mut ChaCha20Rng) -> JointVector {
        use rand::Rng;
        let mut q = [0.0; JOINT_COUNT];
        for i in 0..JOINT_COUNT {
            if self.low[i] < self.high[i] {
                q[i] = rng.random_range(self.low[i]..self.high[i]);
            }
        }
        JointVector(q)
    }

    pub fn contains(&self, q: &JointVector) -> bool {
        (0..JOINT_COUNT).all(|i| q.0[i] >= self.low[i] && q.0[i] <= self.high[i])
    }
}

/// The printed bounds of each stage.
pub fn builtin_action_space(stage: Stage) -> ActionSpace {
    use std::f64::consts::{FRAC_PI_2, PI};
    let two_thirds_pi = 2.0 * PI / 3.0;
    let three_quarters_pi = 3.0 * PI / 4.0;
    match stage {
        Stage::A1 => ActionSpace {
            low: [-FRAC_PI_2, -FRAC_PI_2, 0.0, 0.0, 0.0, 0.0],
            high: [FRAC_PI_2, 0.0, PI, 0.0, 0.0, 0.0],
        },
        Stage::A2 => ActionSpace {
            low: [-FRAC_PI_2, -two_thirds_pi, 0.0, 0.0, 0.0, 0.0],
            high: [FRAC_PI_2, 0.0, three_quarters_pi, 0.0, 0.0, 0.0],
        },
        Stage::A2Prime => ActionSpace {
            low: [-FRAC_PI_2, -two_thirds_pi, 0.0, 0.0, -FRAC_PI_2, 0.0],
            high: [FRAC_PI_2, 0.0, three_quarters_pi, 0.0, FRAC_PI_2, 0.0],
        },
        Stage::A3 => ActionSpace {
            low: [-FRAC_PI_2, -two_thirds_pi, 0.0, -FRAC_PI_2, 0.0, -PI],
            high: [FRAC_PI_2, 0.0, three_quarters_pi, FRAC_PI_2, FRAC_PI_2, PI],
        },
    }
}

/// The built-in stage whose action space equals `space`, if any — lets
/// callers recover a stage label from a checkpoint's action space.
pub fn stage_for_space(space: &ActionSpace) -> Option<Stage> {
    [Stage::A1, Stage::A2, Stage::A2Prime, Stage::A3]
        .into_iter()
        .find(|s| builtin_action_space(*s) == *space)
}

/// Component-wise clamp into the action space; frozen joints become exactly
/// zero. Input must be finite.
pub fn clip_action(a: &[f64; JOINT_COUNT], space: &ActionSpace) -> JointVector {
    let mut q = [0.0; JOINT_COUNT];
    for i in 0..JOINT_COUNT {
        q[i] = if space.low[i] < space.high[i] {
            a[i].clamp(space.low[i], space.high[i])
        } else {
            0.0
        };
    }
    JointVector(q)
}

/// Reward rule selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewardKind {
    #[serde(rename = "sparse")]
    Sparse,
    #[serde(rename = "dense")]
    Dense,
}

impl std::fmt::Display for RewardKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RewardKind::Sparse => write!(f, "sparse"),
            RewardKind::Dense => write!(f, "dense"),
        }
    }
}

impl std::str::FromStr for RewardKind {
    type Err = ReachError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sparse" => Ok(RewardKind::Sparse),
            "dense" => Ok(RewardKind::Dense),
            other => Err(ReachError::InvalidConfig(format!(
                "unknown reward kind {other:?} (expected sparse or dense)"
            ))),
        }
    }
}

/// Reward as a function of the achieved distance `d` and threshold `τ`:
/// sparse gives 1 on success else 0; dense gives 1 on success else −d.
/// Success is strictly `d < τ`.
pub fn compute_reward(d: f64, tau: f64, kind: RewardKind) -> Result<f64> {
    if !d.is_finite() || d < 0.0 {
        return Err(ReachError::Usage(format!("reward needs a distance ≥ 0, got {d}")));
    }
    if !tau.is_finite() || tau <= 0.0 {
        return Err(ReachError::Usage(format!("reward needs a threshold > 0, got {tau}")));
    }
    Ok(match kind {
        RewardKind::Sparse => {
            if d < tau {
                1.0
            } else {
                0.0
            }
        }
        RewardKind::Dense => {
            if d < tau {
                1.0
            } else {
                -d
            }
        }
    })
}

/// Episode-level parameters of the task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub reward_kind: RewardKind,
    /// Success threshold τ, meters.
    pub threshold: f64,
    /// Attempts per episode before it ends unsuccessfully.
    pub max_tries: u32,
    pub action_space: ActionSpace,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() || self.threshold <= 0.0 {
            return Err(ReachError::InvalidConfig(format!(
                "threshold must be > 0, got {}",
                self.threshold
            )));
        }
        if self.max_tries < 1 {
            return Err(ReachError::InvalidConfig("max_tries must be ≥ 1".into()));
        }
        self.action_space.validate()
    }
}

/// The 12-number state the agent sees: end-effector position, target
/// position, and all six joint angles, in that order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub ee_position: [f64; 3],
    pub target_position: [f64; 3],
    pub joint_angles: [f64; JOINT_COUNT],
}

impl Observation {
    pub const DIM: usize = 12;

    pub fn flatten(&self) -> [f64; Self::DIM] {
        let mut out = [0.0; Self::DIM];
        out[..3].copy_from_slice(&self.ee_position);
        out[3..6].copy_from_slice(&self.target_position);
        out[6..].copy_from_slice(&self.joint_angles);
        out
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != Self::DIM {
            return Err(ReachError::Dimension {
                what: "observation",
                expected: Self::DIM,
                got: values.len(),
            });
        }
        Ok(Self {
            ee_position: [values[0], values[1], values[2]],
            target_position: [values[3], values[4], values[5]],
            joint_angles: std::array::from_fn(|i| values[6 + i]),
        })
    }
}

// On the wire and on disk an observation is exactly its 12 numbers.
impl Serialize for Observation {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.flatten().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Observation {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let values = <[f64; Self::DIM]>::deserialize(deserializer)?;
        Observation::from_flat(&values).map_err(serde::de::Error::custom)
    }
}

/// Extra per-step facts alongside the reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Achieved end-effector-to-target distance, meters.
    pub distance: f64,
    /// Whether distance < τ.
    pub success: bool,
    /// True when the episode ended because tries ran out, not by success.
    pub exhausted: bool,
}

/// Everything a step returns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Uniform interface over the in-process environment and the remote client,
/// so training code cannot tell them apart.
pub trait EnvHandle {
    fn reset(&mut self) -> Result<Observation>;
    fn step(&mut self, action: &JointVector) -> Result<StepOutcome>;
    fn render(&mut self) -> Result<TopViewImage>;
    fn set_threshold(&mut self, tau: f64) -> Result<()>;
    fn set_action_space(&mut self, space: &ActionSpace) -> Result<()>;
    fn action_space(&self) -> ActionSpace;
    fn threshold(&self) -> f64;
    fn reward_kind(&self) -> RewardKind;
    fn max_tries(&self) -> u32;
}

/// The in-process reaching environment.
#[derive(Debug, Clone)]
pub struct ReachEnv {
    chain: KinematicChain,
    table: TableGeometry,
    camera: CameraConfig,
    config: EpisodeConfig,
    rng: ChaCha20Rng,
    joints: JointVector,
    target: TargetPosition,
    tries_used: u32,
    episode_active: bool,
}

impl ReachEnv {
    pub fn new(
        chain: KinematicChain,
        table: TableGeometry,
        camera: CameraConfig,
        config: EpisodeConfig,
        rng: ChaCha20Rng,
    ) -> Result<Self> {
        chain.validate()?;
        table.validate()?;
        camera.validate()?;
        config.validate()?;
        Ok(Self {
            chain,
            table,
            camera,
            config,
            rng,
            joints: JointVector::zero(),
            target: TargetPosition { p: [0.0, 0.0, table.target_z()] },
            tries_used: 0,
            episode_active: false,
        })
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    pub fn table(&self) -> &TableGeometry {
        &self.table
    }

    pub fn camera(&self) -> &CameraConfig {
        &self.camera
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    /// Current target; meaningful only between reset and episode end.
    pub fn target(&self) -> &TargetPosition {
        &self.target
    }

    /// Replaces the episode parameters wholesale, preserving the rng and any
    /// in-flight episode state. Mid-run reconfiguration (curriculum updates)
    /// must not fork the random sequence, which ruling out a rebuild here
    /// guarantees.
    pub fn set_episode_config(&mut self, config: EpisodeConfig) -> Result<()> {
        config.validate()?;
        self.config = config;
        Ok(())
    }

    fn observation(&self) -> Result<Observation> {
        Ok(Observation {
            ee_position: forward_kinematics(&self.chain, &self.joints)?,
            target_position: self.target.p,
            joint_angles: self.joints.0,
        })
    }
}

impl EnvHandle for ReachEnv {
    /// Zero pose, fresh target, try counter cleared.
    fn reset(&mut self) -> Result<Observation> {
        self.joints = JointVector::zero();
        self.target = sample_target(&self.table, &mut self.rng);
        self.tries_used = 0;
        self.episode_active = true;
        self.observation()
    }

    /// Sets the joints to the clipped action (absolute, instantaneous),
    /// recomputes the end effector, and scores the attempt.
    fn step(&mut self, action: &JointVector) -> Result<StepOutcome> {
        if !self.episode_active {
            return Err(ReachError::Usage(
                "step called without an active episode (reset first)".into(),
            ));
        }
        if !action.is_finite() {
            return Err(ReachError::NonFinite("action".into()));
        }
        self.joints = clip_action(&action.0, &self.config.action_space);
        self.tries_used += 1;
        let observation = self.observation()?;
        let distance = distance_to_target(&observation.ee_position, &self.target);
        let reward = compute_reward(distance, self.config.threshold, self.config.reward_kind)?;
        let success = distance < self.config.threshold;
        let done = success || self.tries_used >= self.config.max_tries;
        if done {
            self.episode_active = false;
        }
        Ok(StepOutcome {
            observation,
            reward,
            done,
            info: StepInfo { distance, success, exhausted: done && !success },
        })
    }

    fn render(&mut self) -> Result<TopViewImage> {
        let target = if self.episode_active || self.tries_used > 0 {
            Some(&self.target)
        } else {
            None
        };
        render_scene(&self.chain, &self.joints, &self.table, target, &self.camera)
    }

    fn set_threshold(&mut self, tau: f64) -> Result<()> {
        let candidate = EpisodeConfig { threshold: tau, ..self.config };
        candidate.validate()?;
        self.config = candidate;
        Ok(())
    }

    fn set_action_space(&mut self, space: &ActionSpace) -> Result<()> {
        space.validate()?;
        self.config.action_space = *space;
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

/// The per-episode line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpisodeRecord {
    /// 1-based episode index.
    pub episode: u64,
    /// Threshold τ the episode was played under.
    pub threshold: f64,
    /// Distance after the final attempt.
    pub distance: f64,
    /// Reward of the final attempt.
    pub reward: f64,
    pub success: bool,
    /// Attempts consumed.
    pub tries: u32,
}

/// Plays one training episode: reset, then per attempt act → step →
/// remember → learn, until the environment reports done. The agent's
/// episode memory is closed with the τ that was in force, and the
/// `after_episode` hook (curriculum scheduling, logging) runs exactly once,
/// after that.
///
/// The transition's bootstrap flag is set on success and on the final
/// attempt of single-try episodes (which have no continuation worth
/// bootstrapping into); running out of tries in a multi-try episode stays
/// bootstrap-eligible since the cutoff is a budget, not a property of the
/// state.
pub fn run_episode_loop(
    env: &mut dyn EnvHandle,
    agent: &mut dyn crate::agents::Agent,
    explore_rng: &mut ChaCha20Rng,
    episode: u64,
    mut on_update: impl FnMut(&crate::agents::UpdateDiagnostics),
    after_episode: &mut dyn FnMut(&EpisodeRecord) -> Result<()>,
) -> Result<EpisodeRecord> {
    let tau = env.threshold();
    let single_try = env.max_tries() == 1;
    let mut obs = env.reset()?;
    let mut tries = 0u32;
    let last = loop {
        let action = agent.act(&obs, crate::agents::ActMode::Train, explore_rng);
        let out = env.step(&action)?;
        tries += 1;
        agent.remember(crate::agents::Transition {
            obs,
            action,
            reward: out.reward,
            next_obs: out.observation,
            done: out.info.success || (out.done && single_try),
            desired_goal: obs.target_position,
            achieved_goal: out.observation.ee_position,
        });
        if let Some(diag) = agent.learn()? {
            on_update(&diag);
        }
        if out.done {
            break out;
        }
        obs = out.observation;
    };
    agent.end_episode(tau)?;
    let record = EpisodeRecord {
        episode,
        threshold: tau,
        distance: last.info.distance,
        reward: last.reward,
        success: last.info.success,
        tries,
    };
    after_episode(&record)?;
    Ok(record)
}
