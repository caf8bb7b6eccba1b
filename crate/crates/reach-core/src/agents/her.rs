//! Hindsight goal relabeling.
//!
//! After an episode ends, each stored transition can be duplicated with the
//! desired goal replaced by a goal the arm actually achieved, and the reward
//! recomputed against that substitute goal. With the `Final` strategy the
//! substitute is the episode's last achieved end-effector position, so the
//! closing transition of every relabeled episode scores as a success.

use serde::{Deserialize, Serialize};

use super::Transition;
use crate::environment::{compute_reward, RewardKind};
use crate::error::{ReachError, Result};
use crate::kinematics::{distance_to_target, TargetPosition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HerStrategy {
    /// Relabel against the last achieved goal of the episode.
    #[default]
    Final,
}

/// Relabeling settings carried inside the agent configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HerConfig {
    pub enabled: bool,
    /// Relabeled copies appended per original transition.
    pub relabels_per_transition: usize,
    pub strategy: HerStrategy,
}

impl Default for HerConfig {
    fn default() -> Self {
        Self { enabled: true, relabels_per_transition: 1, strategy: HerStrategy::Final }
    }
}

/// Returns the episode's transitions followed by their relabeled copies.
///
/// With `relabels_per_transition == 0` the output equals the input. The
/// reward of each copy is recomputed from the distance between the
/// transition's achieved goal and the substitute goal, under the same
/// threshold `tau` the episode was played with; goal fields inside both
/// observations are rewritten to the substitute so the relabeled experience
/// is self-consistent.
pub fn her_relabel(
    episode: &[Transition],
    strategy: HerStrategy,
    relabels_per_transition: usize,
    tau: f64,
    kind: RewardKind,
) -> Result<Vec<Transition>> {
    if episode.is_empty() {
        return Err(ReachError::Usage("cannot relabel an empty episode".into()));
    }
    let substitute = match strategy {
        HerStrategy::Final => episode[episode.len() - 1].achieved_goal,
    };
    let mut out = Vec::with_capacity(episode.len() * (1 + relabels_per_transition));
    out.extend_from_slice(episode);
    for t in episode {
        for _ in 0..relabels_per_transition {
            let mut r = t.clone();
            r.desired_goal = substitute;
            r.obs.target_position = substitute;
            r.next_obs.target_position = substitute;
            let d = distance_to_target(&r.achieved_goal, &TargetPosition { p: substitute });
            r.reward = compute_reward(d, tau, kind)?;
            let success = d < tau;
            // Reaching the substitute goal ends the relabeled episode; an
            // already-terminal transition stays terminal.
            r.done = success || t.done;
            out.push(r);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::Observation;
    use crate::kinematics::JointVector;

    fn one_step_miss(ee: [f64; 3], goal: [f64; 3], tau: f64, kind: RewardKind) -> Transition {
        let obs = Observation {
            ee_position: [0.0, 0.0, 1.23],
            target_position: goal,
            joint_angles: [0.0; 6],
        };
        let next_obs = Observation { ee_position: ee, target_position: goal, joint_angles: [0.1; 6] };
        let d = distance_to_target(&ee, &TargetPosition { p: goal });
        Transition {
            obs,
            action: JointVector([0.1; 6]),
            reward: compute_reward(d, tau, kind).unwrap(),
            next_obs,
            done: true,
            desired_goal: goal,
            achieved_goal: ee,
        }
    }

    #[test]
    fn final_strategy_turns_one_step_miss_into_success() {
        let tau = 0.05;
        for kind in [RewardKind::Sparse, RewardKind::Dense] {
            let t = one_step_miss([0.4, 0.5, 0.1], [-0.3, 0.4, 0.1], tau, kind);
            assert!(t.reward < 1.0, "sanity: the original transition is a miss");
            let out = her_relabel(std::slice::from_ref(&t), HerStrategy::Final, 1, tau, kind).unwrap();
            assert_eq!(out.len(), 2);
            assert_eq!(out[0], t, "original must come through untouched");
            let r = &out[1];
            assert_eq!(r.reward, 1.0, "zero distance to the substitute goal scores 1");
            assert_eq!(r.desired_goal, t.achieved_goal);
            assert_eq!(r.obs.target_position, t.achieved_goal);
            assert_eq!(r.next_obs.target_position, t.achieved_goal);
            assert!(r.done);
            // Everything not goal-related is untouched.
            assert_eq!(r.action, t.action);
            assert_eq!(r.obs.joint_angles, t.obs.joint_angles);
            assert_eq!(r.achieved_goal, t.achieved_goal);
        }
    }

    #[test]
    fn zero_relabels_is_identity() {
        let tau = 0.05;
        let t = one_step_miss([0.4, 0.5, 0.1], [-0.3, 0.4, 0.1], tau, RewardKind::Sparse);
        let out = her_relabel(std::slice::from_ref(&t), HerStrategy::Final, 0, tau, RewardKind::Sparse).unwrap();
        assert_eq!(out, vec![t]);
    }

    #[test]
    fn multi_step_episode_relabels_against_last_achieved() {
        let tau = 0.05;
        let goal = [0.6, 0.6, 0.1];
        let mut ep = vec![
            one_step_miss([0.1, 0.3, 0.1], goal, tau, RewardKind::Dense),
            one_step_miss([0.2, 0.4, 0.1], goal, tau, RewardKind::Dense),
            one_step_miss([0.3, 0.5, 0.1], goal, tau, RewardKind::Dense),
        ];
        ep[0].done = false;
        ep[1].done = false;
        let out = her_relabel(&ep, HerStrategy::Final, 2, tau, RewardKind::Dense).unwrap();
        assert_eq!(out.len(), 9);
        let last_achieved = ep[2].achieved_goal;
        for r in &out[3..] {
            assert_eq!(r.desired_goal, last_achieved);
            let d = distance_to_target(&r.achieved_goal, &TargetPosition { p: last_achieved });
            let expected = compute_reward(d, tau, RewardKind::Dense).unwrap();
            assert_eq!(r.reward.to_bits(), expected.to_bits());
            assert_eq!(r.done, d < tau || ep.iter().any(|t| t.achieved_goal == r.achieved_goal && t.done));
        }
        // The relabeled copies of the final transition are successes; the
        // earlier ones here are ≥ 0.14 m away from the substitute and stay
        // misses with the dense penalty.
        assert_eq!(out[8].reward, 1.0);
        assert!(out[4].reward < 0.0 && out[6].reward < 0.0);
        assert!(!out[4].done && !out[6].done);
    }

    #[test]
    fn empty_episode_is_rejected() {
        assert!(matches!(
            her_relabel(&[], HerStrategy::Final, 1, 0.05, RewardKind::Sparse),
            Err(ReachError::Usage(_))
        ));
    }
}
