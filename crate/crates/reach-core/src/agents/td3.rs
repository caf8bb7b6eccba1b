//! Twin-critic deterministic learner with target smoothing and delayed
//! policy updates.
//!
//! Differences from the single-critic learner, in the order they bite:
//! the bootstrap action is the target policy's output plus clamped Gaussian
//! smoothing noise; the bootstrap value is the minimum of the two target
//! critics; both critics regress onto that shared target every update; the
//! actor (through critic 1) and all three target networks move only every
//! `policy_delay`-th update.

use std::io::Write;

use ndarray::{s, Array1, Array2};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

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

pub struct Td3Agent {
    config: AgentConfig,
    space: ActionSpace,
    reward_kind: RewardKind,
    actor: Mlp,
    actor_target: Mlp,
    critic1: Mlp,
    critic1_target: Mlp,
    critic2: Mlp,
    critic2_target: Mlp,
    actor_opt: AdamState,
    critic1_opt: AdamState,
    critic2_opt: AdamState,
    memory: Memory,
    sample_rng: ChaCha20Rng,
    updates: u64,
}

impl Td3Agent {
    /// Networks are drawn from `init_rng` in order: actor, critic 1,
    /// critic 2. Targets start as exact copies.
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
        let critic_sizes = net_sizes(Observation::DIM + JOINT_COUNT, &config.hidden, 1);
        let critic1 = Mlp::he_init(&critic_sizes, crate::neuralnet::OutputHead::Linear, init_rng)?;
        let critic2 = Mlp::he_init(&critic_sizes, crate::neuralnet::OutputHead::Linear, init_rng)?;
        let lr_actor = AdamHyper::with_lr(config.lr_actor_for(Algorithm::Td3));
        let lr_critic = AdamHyper::with_lr(config.lr_critic_for(Algorithm::Td3));
        Ok(Self {
            actor_opt: AdamState::new(&actor, lr_actor),
            critic1_opt: AdamState::new(&critic1, lr_critic),
            critic2_opt: AdamState::new(&critic2, lr_critic),
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            memory: Memory::new(config.buffer_capacity, config.her, reward_kind)?,
            config: config.clone(),
            space: *space,
            reward_kind,
            sample_rng,
            updates: 0,
        })
    }

    pub(crate) fn from_checkpoint(mut data: CheckpointData, sample_rng: ChaCha20Rng) -> Result<Self> {
        data.expect_algorithm(Algorithm::Td3)?;
        let (actor, actor_opt) = data.take_net_with_opt("actor")?;
        let (critic1, critic1_opt) = data.take_net_with_opt("critic1")?;
        let (critic2, critic2_opt) = data.take_net_with_opt("critic2")?;
        let (actor_target, _) = data.take_net("actor_target")?;
        let (critic1_target, _) = data.take_net("critic1_target")?;
        let (critic2_target, _) = data.take_net("critic2_target")?;
        Ok(Self {
            memory: Memory::new(data.config.buffer_capacity, data.config.her, data.reward_kind)?,
            config: data.config,
            space: data.space,
            reward_kind: data.reward_kind,
            actor,
            actor_target,
            critic1,
            critic1_target,
            critic2,
            critic2_target,
            actor_opt,
            critic1_opt,
            critic2_opt,
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

    /// Bootstrap targets for a batch: the shared clipped-double-Q target
    /// `y = r + γ·(1−done)·min(Q'₁, Q'₂)` and, for inspection, the two
    /// single-critic targets it is the minimum of. Smoothing noise is drawn
    /// from the sampling rng (per row, per actuated joint, in order).
    fn target_values(&mut self, batch: &Batch) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>)> {
        if batch.all_done {
            return Ok((batch.rewards.clone(), batch.rewards.clone(), batch.rewards.clone()));
        }
        let (mut a_next, _) = self.actor_target.forward(&batch.next_obs)?;
        let half = self.space.half_range();
        let sigma = self.config.target_noise_sigma;
        let clip = self.config.target_noise_clip;
        for mut row in a_next.rows_mut() {
            for j in 0..JOINT_COUNT {
                if half[j] > 0.0 {
                    let n: f64 = StandardNormal.sample(&mut self.sample_rng);
                    let noise = (n * sigma * half[j]).clamp(-clip * half[j], clip * half[j]);
                    row[j] = (row[j] + noise).clamp(self.space.low[j], self.space.high[j]);
                } else {
                    row[j] = 0.0;
                }
            }
        }
        let sa_next = concat_state_action(&batch.next_obs, &a_next);
        let (q1, _) = self.critic1_target.forward(&sa_next)?;
        let (q2, _) = self.critic2_target.forward(&sa_next)?;
        let discount = &batch.not_done * self.config.gamma;
        let y1 = &batch.rewards + &(&discount * &q1.column(0).to_owned());
        let y2 = &batch.rewards + &(&discount * &q2.column(0).to_owned());
        let y = Array1::from_shape_fn(y1.len(), |i| y1[i].min(y2[i]));
        Ok((y, y1, y2))
    }

    fn update_from_batch(&mut self, batch: &Batch) -> Result<UpdateDiagnostics> {
        let n = batch.obs.nrows();
        let (y, _, _) = self.target_values(batch)?;

        let sa = concat_state_action(&batch.obs, &batch.actions);
        let (q1, c1_cache) = self.critic1.forward(&sa)?;
        let (critic_loss, dq1) = mse_and_grad(&q1.column(0).to_owned(), &y);
        let (g1, _) = self.critic1.backward(&c1_cache, &dq1)?;
        adam_step(&mut self.critic1, &g1, &mut self.critic1_opt)?;

        let (q2, c2_cache) = self.critic2.forward(&sa)?;
        let (critic2_loss, dq2) = mse_and_grad(&q2.column(0).to_owned(), &y);
        let (g2, _) = self.critic2.backward(&c2_cache, &dq2)?;
        adam_step(&mut self.critic2, &g2, &mut self.critic2_opt)?;

        self.updates += 1;
        let mut actor_objective = None;
        if self.updates % self.config.policy_delay == 0 {
            // Delayed policy step through critic 1, then let all targets
            // catch up a little.
            let (a_pi, actor_cache) = self.actor.forward(&batch.obs)?;
            let sa_pi = concat_state_action(&batch.obs, &a_pi);
            let (q_pi, q_pi_cache) = self.critic1.forward(&sa_pi)?;
            let objective = -q_pi.column(0).mean().unwrap_or(0.0);
            let dq_pi = Array2::from_elem((n, 1), -1.0 / n as f64);
            let (_, d_sa) = self.critic1.backward(&q_pi_cache, &dq_pi)?;
            let d_action = d_sa.slice(s![.., Observation::DIM..]).to_owned();
            let (actor_grads, _) = self.actor.backward(&actor_cache, &d_action)?;
            adam_step(&mut self.actor, &actor_grads, &mut self.actor_opt)?;
            soft_update(&mut self.actor_target, &self.actor, self.config.rho)?;
            soft_update(&mut self.critic1_target, &self.critic1, self.config.rho)?;
            soft_update(&mut self.critic2_target, &self.critic2, self.config.rho)?;
            actor_objective = Some(objective);
        }

        let finite = critic_loss.is_finite()
            && critic2_loss.is_finite()
            && actor_objective.is_none_or(f64::is_finite);
        if !finite {
            return Err(ReachError::NanDetected(format!(
                "update {}: critic_loss={critic_loss}, critic2_loss={critic2_loss}, actor_objective={actor_objective:?}",
                self.updates
            )));
        }
        Ok(UpdateDiagnostics {
            update: self.updates,
            critic_loss,
            critic2_loss: Some(critic2_loss),
            value_loss: None,
            actor_objective,
        })
    }
}

impl Agent for Td3Agent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Td3
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
            Algorithm::Td3,
            &self.config,
            &self.space,
            self.reward_kind,
            self.updates,
            &[
                NetEntry { name: "actor", net: &self.actor, opt: Some(&self.actor_opt) },
                NetEntry { name: "critic1", net: &self.critic1, opt: Some(&self.critic1_opt) },
                NetEntry { name: "critic2", net: &self.critic2, opt: Some(&self.critic2_opt) },
                NetEntry { name: "actor_target", net: &self.actor_target, opt: None },
                NetEntry { name: "critic1_target", net: &self.critic1_target, opt: None },
                NetEntry { name: "critic2_target", net: &self.critic2_target, opt: None },
            ],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::assemble_batch;
    use crate::environment::{builtin_action_space, Stage};
    use crate::rng::SeedSplitter;

    fn small_config() -> AgentConfig {
        AgentConfig {
            hidden: vec![32, 32],
            batch_size: 8,
            buffer_capacity: 256,
            learn_start: Some(8),
            ..AgentConfig::default()
        }
    }

    fn make_agent(seed: u64, cfg: &AgentConfig) -> Td3Agent {
        let split = SeedSplitter::new(seed);
        Td3Agent::new(
            cfg,
            &builtin_action_space(Stage::A1),
            RewardKind::Dense,
            &mut split.stream("init"),
            split.stream("sample"),
        )
        .unwrap()
    }

    /// A small pool of distinct transitions, some bootstrapping and some
    /// terminal.
    fn fill(agent: &mut Td3Agent, n: usize, seed: u64) {
        let mut rng = SeedSplitter::new(seed).stream("fill");
        let space = *agent.action_space();
        for i in 0..n {
            let action = space.sample_uniform(&mut rng);
            let obs = Observation {
                ee_position: [0.0, 0.0, 1.23],
                target_position: [0.3, 0.4 + 0.001 * i as f64, 0.1],
                joint_angles: [0.0; 6],
            };
            let next_obs = Observation {
                ee_position: [0.2, 0.3, 0.15],
                target_position: obs.target_position,
                joint_angles: action.0,
            };
            agent.remember(Transition {
                obs,
                action,
                reward: if i % 4 == 0 { 1.0 } else { -0.3 },
                next_obs,
                done: i % 2 == 0,
                desired_goal: obs.target_position,
                achieved_goal: next_obs.ee_position,
            });
        }
    }

    #[test]
    fn shared_target_is_the_minimum_of_both_critics() {
        let mut agent = make_agent(1, &small_config());
        fill(&mut agent, 32, 1);
        // Push the twin critics apart so the min actually selects.
        for layer in &mut agent.critic2_target.layers {
            layer.biases += 0.5;
        }
        let picks = agent.memory.buffer.sample(16, &mut SeedSplitter::new(9).stream("pick")).unwrap();
        let batch = assemble_batch(&picks);
        drop(picks);
        let (y, y1, y2) = agent.target_values(&batch).unwrap();
        let mut selected_from_each = (false, false);
        for i in 0..y.len() {
            assert!(y[i] <= y1[i] && y[i] <= y2[i], "row {i}: min rule violated");
            assert!(y[i] == y1[i] || y[i] == y2[i]);
            if batch.not_done[i] == 0.0 {
                assert_eq!(y[i], batch.rewards[i], "terminal rows must not bootstrap");
            } else if y[i] == y1[i] && y[i] != y2[i] {
                selected_from_each.0 = true;
            } else if y[i] == y2[i] && y[i] != y1[i] {
                selected_from_each.1 = true;
            }
        }
        assert!(
            selected_from_each.0 || selected_from_each.1,
            "critics were pushed apart; the min must have chosen somewhere"
        );
    }

    #[test]
    fn smoothed_target_actions_stay_inside_bounds() {
        let mut cfg = small_config();
        cfg.target_noise_sigma = 0.9; // exaggerate so clamping must happen
        let mut agent = make_agent(2, &cfg);
        fill(&mut agent, 32, 2);
        // Recompute what target_values feeds the critics by replaying its
        // noise path: easiest check is indirect — targets stay finite and
        // bounded by reward + γ·max|Q| since actions were legal.
        let picks = agent.memory.buffer.sample(16, &mut SeedSplitter::new(3).stream("pick")).unwrap();
        let batch = assemble_batch(&picks);
        drop(picks);
        let (y, y1, y2) = agent.target_values(&batch).unwrap();
        for v in y.iter().chain(y1.iter()).chain(y2.iter()) {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn actor_updates_once_every_policy_delay_calls() {
        let mut cfg = small_config();
        cfg.policy_delay = 3;
        let mut agent = make_agent(3, &cfg);
        fill(&mut agent, 16, 3);
        let calls = 10;
        let mut actor_updates = 0;
        let mut target_updates = 0;
        for i in 1..=calls {
            let before_actor = agent.actor.clone();
            let before_target = agent.critic1_target.clone();
            let diag = agent.learn().unwrap().unwrap();
            assert_eq!(diag.update, i as u64);
            if agent.actor != before_actor {
                actor_updates += 1;
                assert!(diag.actor_objective.is_some());
            } else {
                assert!(diag.actor_objective.is_none());
            }
            if agent.critic1_target != before_target {
                target_updates += 1;
            }
        }
        assert_eq!(actor_updates, calls / 3, "⌊{calls}/3⌋ delayed actor updates");
        assert_eq!(target_updates, calls / 3, "targets move only with the actor");
    }

    #[test]
    fn both_critics_move_every_update() {
        let mut agent = make_agent(4, &small_config());
        fill(&mut agent, 16, 4);
        let (c1, c2) = (agent.critic1.clone(), agent.critic2.clone());
        let diag = agent.learn().unwrap().unwrap();
        assert_ne!(agent.critic1, c1);
        assert_ne!(agent.critic2, c2);
        assert!(diag.critic2_loss.is_some());
        assert!(diag.critic_loss.is_finite());
    }

    #[test]
    fn learn_waits_for_learn_start() {
        let mut agent = make_agent(5, &small_config());
        fill(&mut agent, 7, 5);
        assert!(agent.learn().unwrap().is_none());
        fill(&mut agent, 1, 6);
        assert!(agent.learn().unwrap().is_some());
    }

    #[test]
    fn updates_stay_finite_and_deterministic() {
        let run = |seed: u64| -> Vec<u64> {
            let mut agent = make_agent(seed, &small_config());
            fill(&mut agent, 64, seed);
            let mut bits = Vec::new();
            for _ in 0..20 {
                let d = agent.learn().unwrap().unwrap();
                bits.push(d.critic_loss.to_bits());
            }
            assert!(agent.actor.all_finite());
            assert!(agent.critic1.all_finite() && agent.critic2.all_finite());
            bits
        };
        assert_eq!(run(7), run(7), "same seeds, same losses, bit for bit");
    }
}
