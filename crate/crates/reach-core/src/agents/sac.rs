//! Maximum-entropy learner with a squashed-Gaussian policy, twin Q critics,
//! and a separate state-value network whose target copy provides the
//! bootstrap.
//!
//! Per update: the value net regresses onto `min(Q₁,Q₂)(s,ã) − α·log π(ã|s)`
//! at freshly sampled actions ã; both critics regress onto
//! `r + γ·(1−done)·V'(s')`; the actor minimizes
//! `mean(α·log π(ã|s) − min(Q₁,Q₂)(s,ã))` by the reparameterization trick,
//! with the chain rule through the squash worked out by hand; the value
//! target trails by Polyak averaging. The entropy temperature α is fixed.

use std::io::Write;

use ndarray::{s, Array1, Array2};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::checkpoint::{self, CheckpointData, NetEntry};
use super::{
    concat_state_action, forward_single, mse_and_grad, net_sizes, sample_if_ready, ActMode,
    Agent, AgentConfig, Algorithm, Batch, Memory, ReplayBuffer, Transition, UpdateDiagnostics,
};
use crate::environment::{clip_action, ActionSpace, Observation, RewardKind};
use crate::error::{ReachError, Result};
use crate::kinematics::{JointVector, JOINT_COUNT};
use crate::neuralnet::{adam_step, soft_update, AdamHyper, AdamState, Mlp, OutputHead};

/// Log density of a squashed-Gaussian action, evaluated from pre-squash
/// values: the action is `a_i = center_i + half_i · tanh(u_i)` with
/// `u_i ~ Normal(mean_i, exp(log_std_i))`. The density sums over dimensions
/// with `half_i > 0`; frozen dimensions are constants and carry no density.
///
/// The change of variables contributes `−ln(half_i) − ln(1 − tanh²(u_i))`
/// per dimension, with the latter evaluated in the overflow-safe form
/// `2·(ln 2 − u − softplus(−2u))`.
pub fn squashed_gaussian_log_prob(
    mean: &[f64],
    log_std: &[f64],
    u: &[f64],
    half: &[f64],
) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut lp = 0.0;
    for i in 0..u.len() {
        if half[i] > 0.0 {
            let xi = (u[i] - mean[i]) / log_std[i].exp();
            lp += -0.5 * xi * xi - log_std[i] - 0.5 * ln_2pi;
            lp -= half[i].ln() + ln_one_minus_tanh_sq(u[i]);
        }
    }
    lp
}

/// `ln(1 − tanh²(u)) = 2(ln 2 − u − softplus(−2u))`, exact and finite for
/// any `u` where the naive form would underflow to `ln 0`.
fn ln_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// One batch of freshly sampled squashed actions with everything their
/// gradients need.
struct SampledActions {
    /// Standard-normal draws, zero on frozen dimensions.
    xi: Array2<f64>,
    /// tanh(u) per dimension.
    tanh_u: Array2<f64>,
    /// Final actions in joint space.
    actions: Array2<f64>,
    /// Row log densities.
    log_prob: Array1<f64>,
}

pub struct SacAgent {
    config: AgentConfig,
    space: ActionSpace,
    reward_kind: RewardKind,
    actor: Mlp,
    critic1: Mlp,
    critic2: Mlp,
    value: Mlp,
    value_target: Mlp,
    actor_opt: AdamState,
    critic1_opt: AdamState,
    critic2_opt: AdamState,
    value_opt: AdamState,
    memory: Memory,
    sample_rng: ChaCha20Rng,
    updates: u64,
}

impl SacAgent {
    /// Networks are drawn from `init_rng` in order: actor, critic 1,
    /// critic 2, value. The value target starts as an exact copy.
    pub fn new(
        config: &AgentConfig,
        space: &ActionSpace,
        reward_kind: RewardKind,
        init_rng: &mut ChaCha20Rng,
        sample_rng: ChaCha20Rng,
    ) -> Result<Self> {
        config.validate()?;
        space.validate()?;
        let head = OutputHead::MeanLogStd {
            dim: JOINT_COUNT,
            log_std_min: config.log_std_bounds[0],
            log_std_max: config.log_std_bounds[1],
        };
        let actor = Mlp::he_init(
            &net_sizes(Observation::DIM, &config.hidden, 2 * JOINT_COUNT),
            head,
            init_rng,
        )?;
        let critic_sizes = net_sizes(Observation::DIM + JOINT_COUNT, &config.hidden, 1);
        let critic1 = Mlp::he_init(&critic_sizes, OutputHead::Linear, init_rng)?;
        let critic2 = Mlp::he_init(&critic_sizes, OutputHead::Linear, init_rng)?;
        let value = Mlp::he_init(
            &net_sizes(Observation::DIM, &config.hidden, 1),
            OutputHead::Linear,
            init_rng,
        )?;
        let lr_actor = AdamHyper::with_lr(config.lr_actor_for(Algorithm::Sac));
        let lr_critic = AdamHyper::with_lr(config.lr_critic_for(Algorithm::Sac));
        let lr_value = AdamHyper::with_lr(config.lr_value_for(Algorithm::Sac));
        Ok(Self {
            actor_opt: AdamState::new(&actor, lr_actor),
            critic1_opt: AdamState::new(&critic1, lr_critic),
            critic2_opt: AdamState::new(&critic2, lr_critic),
            value_opt: AdamState::new(&value, lr_value),
            value_target: value.clone(),
            actor,
            critic1,
            critic2,
            value,
            memory: Memory::new(config.buffer_capacity, config.her, reward_kind)?,
            config: config.clone(),
            space: *space,
            reward_kind,
            sample_rng,
            updates: 0,
        })
    }

    pub(crate) fn from_checkpoint(mut data: CheckpointData, sample_rng: ChaCha20Rng) -> Result<Self> {
        data.expect_algorithm(Algorithm::Sac)?;
        let (actor, actor_opt) = data.take_net_with_opt("actor")?;
        let (critic1, critic1_opt) = data.take_net_with_opt("critic1")?;
        let (critic2, critic2_opt) = data.take_net_with_opt("critic2")?;
        let (value, value_opt) = data.take_net_with_opt("value")?;
        let (value_target, _) = data.take_net("value_target")?;
        Ok(Self {
            memory: Memory::new(data.config.buffer_capacity, data.config.her, data.reward_kind)?,
            config: data.config,
            space: data.space,
            reward_kind: data.reward_kind,
            actor,
            critic1,
            critic2,
            value,
            value_target,
            actor_opt,
            critic1_opt,
            critic2_opt,
            value_opt,
            sample_rng,
            updates: data.updates,
        })
    }

    /// Squashes one actor output row into an action. In train mode `rng`
    /// supplies one standard-normal draw per actuated joint, in joint order;
    /// eval mode squashes the mean and draws nothing.
    fn squash_row(&self, row: &Array1<f64>, mode: ActMode, rng: &mut ChaCha20Rng) -> JointVector {
        let center = self.space.center();
        let half = self.space.half_range();
        let mut a = [0.0; JOINT_COUNT];
        for i in 0..JOINT_COUNT {
            if half[i] > 0.0 {
                let mut u = row[i];
                if mode == ActMode::Train {
                    let n: f64 = StandardNormal.sample(rng);
                    u += row[JOINT_COUNT + i].exp() * n;
                }
                a[i] = center[i] + half[i] * u.tanh();
            }
        }
        clip_action(&a, &self.space)
    }

    /// Fresh reparameterized actions for a whole batch. Noise is drawn from
    /// the given rng row by row, actuated joints in order.
    fn sample_actions_in(
        space: &ActionSpace,
        mean_log_std: &Array2<f64>,
        rng: &mut ChaCha20Rng,
    ) -> SampledActions {
        let n = mean_log_std.nrows();
        let center = space.center();
        let half = space.half_range();
        let mut xi = Array2::zeros((n, JOINT_COUNT));
        let mut tanh_u = Array2::zeros((n, JOINT_COUNT));
        let mut actions = Array2::zeros((n, JOINT_COUNT));
        let mut log_prob = Array1::zeros(n);
        let mut mean = [0.0; JOINT_COUNT];
        let mut log_std = [0.0; JOINT_COUNT];
        let mut u = [0.0; JOINT_COUNT];
        for r in 0..n {
            for j in 0..JOINT_COUNT {
                mean[j] = mean_log_std[(r, j)];
                log_std[j] = mean_log_std[(r, JOINT_COUNT + j)];
                if half[j] > 0.0 {
                    let draw: f64 = StandardNormal.sample(rng);
                    xi[(r, j)] = draw;
                    u[j] = mean[j] + log_std[j].exp() * draw;
                    let t = u[j].tanh();
                    tanh_u[(r, j)] = t;
                    actions[(r, j)] = center[j] + half[j] * t;
                } else {
                    u[j] = 0.0;
                }
            }
            log_prob[r] = squashed_gaussian_log_prob(&mean, &log_std, &u, &half);
        }
        SampledActions { xi, tanh_u, actions, log_prob }
    }

    fn update_from_batch(&mut self, batch: &Batch) -> Result<UpdateDiagnostics> {
        let n = batch.obs.nrows();
        let nf = n as f64;
        let alpha = self.config.entropy_alpha;
        let half = self.space.half_range();

        // Fresh actions at the sampled states, with both critics' opinions.
        let (mean_log_std, actor_cache) = self.actor.forward(&batch.obs)?;
        let sampled = Self::sample_actions_in(&self.space, &mean_log_std, &mut self.sample_rng);
        let sa_new = concat_state_action(&batch.obs, &sampled.actions);
        let (q1_new, q1_cache) = self.critic1.forward(&sa_new)?;
        let (q2_new, q2_cache) = self.critic2.forward(&sa_new)?;
        let q1_col = q1_new.column(0).to_owned();
        let q2_col = q2_new.column(0).to_owned();
        let q_min = Array1::from_shape_fn(n, |i| q1_col[i].min(q2_col[i]));

        // Value regression onto min Q − α·log π at the fresh actions.
        let (v, v_cache) = self.value.forward(&batch.obs)?;
        let v_target_vals = &q_min - &sampled.log_prob.mapv(|l| alpha * l);
        let (value_loss, dv) = mse_and_grad(&v.column(0).to_owned(), &v_target_vals);
        let (v_grads, _) = self.value.backward(&v_cache, &dv)?;
        adam_step(&mut self.value, &v_grads, &mut self.value_opt)?;

        // Critic regression onto r + γ·(1−done)·V'(s') at the buffer actions.
        let y = if batch.all_done {
            batch.rewards.clone()
        } else {
            let (v_next, _) = self.value_target.forward(&batch.next_obs)?;
            &batch.rewards
                + &(&batch.not_done * self.config.gamma * &v_next.column(0).to_owned())
        };
        let sa = concat_state_action(&batch.obs, &batch.actions);
        let (q1, c1_cache) = self.critic1.forward(&sa)?;
        let (critic_loss, dq1) = mse_and_grad(&q1.column(0).to_owned(), &y);
        let (g1, _) = self.critic1.backward(&c1_cache, &dq1)?;
        adam_step(&mut self.critic1, &g1, &mut self.critic1_opt)?;
        let (q2, c2_cache) = self.critic2.forward(&sa)?;
        let (critic2_loss, dq2) = mse_and_grad(&q2.column(0).to_owned(), &y);
        let (g2, _) = self.critic2.backward(&c2_cache, &dq2)?;
        adam_step(&mut self.critic2, &g2, &mut self.critic2_opt)?;

        // Actor loss L = mean(α·log π − min Q) under reparameterization.
        // The critic contribution flows through whichever critic produced
        // the row minimum; its gradient wrt the action columns comes from a
        // backward pass with −1/B on the selected rows.
        let gq1 = Array2::from_shape_fn((n, 1), |(r, _)| {
            if q1_col[r] <= q2_col[r] { -1.0 / nf } else { 0.0 }
        });
        let gq2 = Array2::from_shape_fn((n, 1), |(r, _)| {
            if q1_col[r] <= q2_col[r] { 0.0 } else { -1.0 / nf }
        });
        let (_, d_sa1) = self.critic1.backward(&q1_cache, &gq1)?;
        let (_, d_sa2) = self.critic2.backward(&q2_cache, &gq2)?;
        let d_action =
            &d_sa1.slice(s![.., Observation::DIM..]) + &d_sa2.slice(s![.., Observation::DIM..]);

        // Chain by hand through a = center + half·tanh(u), u = m + σ·ξ:
        //   ∂L/∂m_j      = α/B·2t_j                + gA_j·half_j(1−t_j²)
        //   ∂L/∂logstd_j = α/B·(2t_j·σ_j·ξ_j − 1)  + gA_j·half_j(1−t_j²)·σ_j·ξ_j
        // where gA is the critic path above and 2t is d(−ln(1−t²))/du.
        let mut d_head = Array2::zeros((n, 2 * JOINT_COUNT));
        for r in 0..n {
            for j in 0..JOINT_COUNT {
                if half[j] > 0.0 {
                    let t = sampled.tanh_u[(r, j)];
                    let sigma = mean_log_std[(r, JOINT_COUNT + j)].exp();
                    let sigma_xi = sigma * sampled.xi[(r, j)];
                    let d_a_du = half[j] * (1.0 - t * t);
                    let ga = d_action[(r, j)];
                    d_head[(r, j)] = (alpha / nf) * 2.0 * t + ga * d_a_du;
                    d_head[(r, JOINT_COUNT + j)] =
                        (alpha / nf) * (2.0 * t * sigma_xi - 1.0) + ga * d_a_du * sigma_xi;
                }
            }
        }
        let (actor_grads, _) = self.actor.backward(&actor_cache, &d_head)?;
        adam_step(&mut self.actor, &actor_grads, &mut self.actor_opt)?;
        let actor_objective =
            alpha * sampled.log_prob.mean().unwrap_or(0.0) - q_min.mean().unwrap_or(0.0);

        soft_update(&mut self.value_target, &self.value, self.config.rho)?;

        self.updates += 1;
        let finite = critic_loss.is_finite()
            && critic2_loss.is_finite()
            && value_loss.is_finite()
            && actor_objective.is_finite();
        if !finite {
            return Err(ReachError::NanDetected(format!(
                "update {}: critic_loss={critic_loss}, critic2_loss={critic2_loss}, \
                 value_loss={value_loss}, actor_objective={actor_objective}",
                self.updates
            )));
        }
        Ok(UpdateDiagnostics {
            update: self.updates,
            critic_loss,
            critic2_loss: Some(critic2_loss),
            value_loss: Some(value_loss),
            actor_objective: Some(actor_objective),
        })
    }

    /// The actor objective `mean(α·log π − min Q)` over explicit
    /// transitions with noise from a throwaway seed — a pure probe used to
    /// study how the objective responds to the temperature.
    #[cfg(test)]
    fn probe_actor_objective(&self, transitions: &[&Transition], alpha: f64, noise_seed: u64) -> f64 {
        use rand::SeedableRng;
        let batch = super::assemble_batch(transitions);
        let (mean_log_std, _) = self.actor.forward(&batch.obs).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(noise_seed);
        let sampled = Self::sample_actions_in(&self.space, &mean_log_std, &mut rng);
        let sa = concat_state_action(&batch.obs, &sampled.actions);
        let (q1, _) = self.critic1.forward(&sa).unwrap();
        let (q2, _) = self.critic2.forward(&sa).unwrap();
        let n = batch.obs.nrows();
        let q_min =
            Array1::from_shape_fn(n, |i| q1.column(0)[i].min(q2.column(0)[i]));
        alpha * sampled.log_prob.mean().unwrap() - q_min.mean().unwrap()
    }
}

impl Agent for SacAgent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Sac
    }

    fn config(&self) -> &AgentConfig {
        &self.config
    }

    fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    fn set_action_space(&mut self, space: &ActionSpace) -> Result<()> {
        space.validate()?;
        // The squash happens outside the network, so only the bounds move.
        self.space = *space;
        Ok(())
    }

    fn reward_kind(&self) -> RewardKind {
        self.reward_kind
    }

    fn act(&self, obs: &Observation, mode: ActMode, rng: &mut ChaCha20Rng) -> JointVector {
        let row = forward_single(&self.actor, obs).expect("actor forward with fixed shapes");
        self.squash_row(&row, mode, rng)
    }

    fn remember(&mut self, t: Transition) {
        self.memory.remember(t);
    }

    fn end_episode(&mut self, tau: f64) -> Result<()> {
        self.memory.end_episode(tau)
    }

    fn learn(&mut self) -> Result<Option<UpdateDiagnostics>> {
        match sample_if_ready(&self.memory, &self.config, &mut self.sample_rng)? {
            None => Ok(None),
            Some(batch) => self.update_from_batch(&batch).map(Some),
        }
    }

    fn updates(&self) -> u64 {
        self.updates
    }

    fn buffer(&self) -> &ReplayBuffer {
        &self.memory.buffer
    }

    fn save(&self, w: &mut dyn Write) -> Result<()> {
        checkpoint::write_checkpoint(
            w,
            Algorithm::Sac,
            &self.config,
            &self.space,
            self.reward_kind,
            self.updates,
            &[
                NetEntry { name: "actor", net: &self.actor, opt: Some(&self.actor_opt) },
                NetEntry { name: "critic1", net: &self.critic1, opt: Some(&self.critic1_opt) },
                NetEntry { name: "critic2", net: &self.critic2, opt: Some(&self.critic2_opt) },
                NetEntry { name: "value", net: &self.value, opt: Some(&self.value_opt) },
                NetEntry { name: "value_target", net: &self.value_target, opt: None },
            ],
        )
    }
}
