//! Deterministic policy gradient with one critic and target copies of both
//! networks.
//!
//! The critic regresses onto `r + γ·(1−done)·Q'(s', μ'(s'))`; the actor
//! ascends the critic at its own actions, implemented as minimizing
//! `−mean Q(s, μ(s))`. Both target networks trail their online copies via
//! Polyak averaging after every update.

use std::io::Write;

use ndarray::{s, Array2};
use rand_chacha::ChaCha20Rng;

use super::checkpoint::{self, CheckpointData, NetEntry};
use super::{
    concat_state_action, explore_deterministic, forward_single, mse_and_grad, net_sizes,
    sample_if_ready, tanh_head, ActMode, Agent, AgentConfig, Algorithm, Batch, Memory,
    ReplayBuffer, Transition, UpdateDiagnostics,
};
use crate::environment::{clip_action, ActionSpace, Observation, RewardKind};
use crate::error::{ReachError, Result};
use crate::kinematics::{JointVector, JOINT_COUNT};
use crate::neuralnet::{adam_step, soft_update, AdamHyper, AdamState, Mlp};

pub struct DdpgAgent {
    config: AgentConfig,
    space: ActionSpace,
    reward_kind: RewardKind,
    actor: Mlp,
    actor_target: Mlp,
    critic: Mlp,
    critic_target: Mlp,
    actor_opt: AdamState,
    critic_opt: AdamState,
    memory: Memory,
    sample_rng: ChaCha20Rng,
    updates: u64,
}

impl DdpgAgent {
    /// Networks are drawn from `init_rng` in order: actor, then critic.
    /// Targets start as exact copies.
    pub fn new(
        config: &AgentConfig,
        space: &ActionSpace,
        reward_kind: RewardKind,
        init_rng: &mut ChaCha20Rng,
        sample_rng: ChaCha20Rng,
    ) -> Result<Self> {
        config.validate()?;
        space.validate()?;
        let actor = Mlp::he_init(
            &net_sizes(Observation::DIM, &config.hidden, JOINT_COUNT),
            tanh_head(space),
            init_rng,
        )?;
        let critic = Mlp::he_init(
            &net_sizes(Observation::DIM + JOINT_COUNT, &config.hidden, 1),
            crate::neuralnet::OutputHead::Linear,
            init_rng,
        )?;
        let actor_opt = AdamState::new(&actor, AdamHyper::with_lr(config.lr_actor_for(Algorithm::Ddpg)));
        let critic_opt =
            AdamState::new(&critic, AdamHyper::with_lr(config.lr_critic_for(Algorithm::Ddpg)));
        Ok(Self {
            config: config.clone(),
            space: *space,
            reward_kind,
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            actor_opt,
            critic_opt,
            memory: Memory::new(config.buffer_capacity, config.her, reward_kind)?,
            sample_rng,
            updates: 0,
        })
    }

    pub(crate) fn from_checkpoint(mut data: CheckpointData, sample_rng: ChaCha20Rng) -> Result<Self> {
        data.expect_algorithm(Algorithm::Ddpg)?;
        let (actor, actor_opt) = data.take_net_with_opt("actor")?;
        let (critic, critic_opt) = data.take_net_with_opt("critic")?;
        let (actor_target, _) = data.take_net("actor_target")?;
        let (critic_target, _) = data.take_net("critic_target")?;
        Ok(Self {
            memory: Memory::new(data.config.buffer_capacity, data.config.her, data.reward_kind)?,
            config: data.config,
            space: data.space,
            reward_kind: data.reward_kind,
            actor,
            actor_target,
            critic,
            critic_target,
            actor_opt,
            critic_opt,
            sample_rng,
            updates: data.updates,
        })
    }

    fn policy_action(&self, obs: &Observation) -> JointVector {
        let row = forward_single(&self.actor, obs).expect("actor forward with fixed shapes");
        let mut a = [0.0; JOINT_COUNT];
        a.copy_from_slice(row.as_slice().expect("contiguous row"));
        clip_action(&a, &self.space)
    }

    fn update_from_batch(&mut self, batch: &Batch) -> Result<UpdateDiagnostics> {
        let n = batch.obs.nrows();
        let gamma = self.config.gamma;

        // Critic regression target, bootstrapped through the target copies
        // unless every sampled transition is terminal.
        let y = if batch.all_done {
            batch.rewards.clone()
        } else {
            let (a_next, _) = self.actor_target.forward(&batch.next_obs)?;
            let sa_next = concat_state_action(&batch.next_obs, &a_next);
            let (q_next, _) = self.critic_target.forward(&sa_next)?;
            &batch.rewards + &(&batch.not_done * gamma * &q_next.column(0).to_owned())
        };

        let sa = concat_state_action(&batch.obs, &batch.actions);
        let (q, q_cache) = self.critic.forward(&sa)?;
        let (critic_loss, dq) = mse_and_grad(&q.column(0).to_owned(), &y);
        let (critic_grads, _) = self.critic.backward(&q_cache, &dq)?;
        adam_step(&mut self.critic, &critic_grads, &mut self.critic_opt)?;

        // Actor step: minimize −mean Q(s, μ(s)), differentiating the critic
        // wrt its action columns and chaining through the actor.
        let (a_pi, actor_cache) = self.actor.forward(&batch.obs)?;
        let sa_pi = concat_state_action(&batch.obs, &a_pi);
        let (q_pi, q_pi_cache) = self.critic.forward(&sa_pi)?;
        let actor_objective = -q_pi.column(0).mean().unwrap_or(0.0);
        let dq_pi = Array2::from_elem((n, 1), -1.0 / n as f64);
        let (_, d_sa) = self.critic.backward(&q_pi_cache, &dq_pi)?;
        let d_action = d_sa.slice(s![.., Observation::DIM..]).to_owned();
        let (actor_grads, _) = self.actor.backward(&actor_cache, &d_action)?;
        adam_step(&mut self.actor, &actor_grads, &mut self.actor_opt)?;

        soft_update(&mut self.actor_target, &self.actor, self.config.rho)?;
        soft_update(&mut self.critic_target, &self.critic, self.config.rho)?;

        self.updates += 1;
        if !(critic_loss.is_finite() && actor_objective.is_finite()) {
            return Err(ReachError::NanDetected(format!(
                "update {}: critic_loss={critic_loss}, actor_objective={actor_objective}",
                self.updates
            )));
        }
        Ok(UpdateDiagnostics {
            update: self.updates,
            critic_loss,
            critic2_loss: None,
            value_loss: None,
            actor_objective: Some(actor_objective),
        })
    }
}

impl Agent for DdpgAgent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Ddpg
    }

    fn config(&self) -> &AgentConfig {
        &self.config
    }

    fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    fn set_action_space(&mut self, space: &ActionSpace) -> Result<()> {
        space.validate()?;
        self.actor.set_tanh_bounds(&space.low, &space.high)?;
        self.actor_target.set_tanh_bounds(&space.low, &space.high)?;
        self.space = *space;
        Ok(())
    }

    fn reward_kind(&self) -> RewardKind {
        self.reward_kind
    }

    fn act(&self, obs: &Observation, mode: ActMode, rng: &mut ChaCha20Rng) -> JointVector {
        let a = self.policy_action(obs);
        match mode {
            ActMode::Eval => a,
            ActMode::Train => explore_deterministic(
                &a,
                &self.space,
                self.config.gaussian_sigma,
                self.config.epsilon_random,
                rng,
            ),
        }
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
            Algorithm::Ddpg,
            &self.config,
            &self.space,
            self.reward_kind,
            self.updates,
            &[
                NetEntry { name: "actor", net: &self.actor, opt: Some(&self.actor_opt) },
                NetEntry { name: "critic", net: &self.critic, opt: Some(&self.critic_opt) },
                NetEntry { name: "actor_target", net: &self.actor_target, opt: None },
                NetEntry { name: "critic_target", net: &self.critic_target, opt: None },
            ],
        )
    }
}
