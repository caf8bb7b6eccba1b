//! The end-to-end training driver: seed fan-out, environment construction
//! (in-process or remote), the episode loop with threshold/stage curriculum,
//! intermittent noise-free evaluation, CSV logging, and checkpointing.
//!
//! Everything a run produces is a pure function of its [`RunConfig`]: logs
//! and checkpoints are byte-identical across repeats, and a run through a
//! remote environment service matches the in-process run bit for bit.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agents::{
    build_agent, load_agent, save_agent_to_path, Agent, AgentConfig, Algorithm,
};
use crate::curriculum::{
    evaluate_policy, EvalReport, ScheduleConfig, TableRowMeta, ThresholdSchedule,
    DEFAULT_EVAL_THRESHOLDS,
};
use crate::envservice::{ConfigBody, RemoteEnv};
use crate::environment::{
    builtin_action_space, run_episode_loop, stage_for_space, EnvHandle, EpisodeConfig, ReachEnv,
    RewardKind, Stage,
};
use crate::error::{ReachError, Result};
use crate::kinematics::{KinematicChain, TableGeometry};
use crate::rng::SeedSplitter;
use crate::vision::CameraConfig;

/// Evaluation cadence and scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Run an intermittent evaluation each time this many environment steps
    /// have accumulated; 0 disables them.
    pub every_steps: u64,
    /// Episodes per intermittent evaluation.
    pub episodes: usize,
    /// Episodes in the final evaluation (larger for tighter intervals).
    pub final_episodes: usize,
    /// Success radii every report covers, meters.
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every_steps: 1000,
            episodes: 100,
            final_episodes: 500,
            thresholds: DEFAULT_EVAL_THRESHOLDS.to_vec(),
        }
    }
}

/// One training run, fully specified. Every field has a default, so a JSON
/// config file only needs the fields it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub reward_kind: RewardKind,
    /// Actuated-joint stage; fixes the action space for the whole run.
    pub stage: Stage,
    /// Master seed; all randomness fans out from it through named streams.
    pub master_seed: u64,
    /// Training length, episodes.
    pub episodes: u64,
    /// Attempts the environment allows per episode.
    pub max_tries: u32,
    pub schedule: ScheduleConfig,
    pub agent: AgentConfig,
    pub eval: EvalConfig,
    pub chain: KinematicChain,
    pub table: TableGeometry,
    pub camera: CameraConfig,
    /// `host:port` of an environment service; `None` trains in process.
    /// Evaluation environments are always local either way.
    pub remote: Option<String>,
    /// Where logs, reports, and checkpoints go.
    pub out_dir: PathBuf,
    /// Additionally checkpoint every N episodes (the final checkpoint is
    /// always written).
    pub checkpoint_every_episodes: Option<u64>,
    /// Start from this checkpoint instead of fresh networks — used to
    /// continue training and for stage transitions.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let table = TableGeometry::default();
        Self {
            algorithm: Algorithm::Td3,
            reward_kind: RewardKind::Dense,
            stage: Stage::A1,
            master_seed: 0,
            episodes: 10_000,
            max_tries: 1,
            schedule: ScheduleConfig::default(),
            agent: AgentConfig::default(),
            eval: EvalConfig::default(),
            chain: KinematicChain::default_chain(),
            camera: CameraConfig::for_table(&table),
            table,
            remote: None,
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every_episodes: None,
            init_checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(ReachError::InvalidConfig("episodes must be ≥ 1".into()));
        }
        if self.max_tries == 0 {
            return Err(ReachError::InvalidConfig("max_tries must be ≥ 1".into()));
        }
        if self.eval.episodes == 0 || self.eval.final_episodes == 0 {
            return Err(ReachError::InvalidConfig(
                "evaluation episode counts must be ≥ 1".into(),
            ));
        }
        if self.eval.thresholds.is_empty() {
            return Err(ReachError::InvalidConfig(
                "evaluation needs at least one threshold".into(),
            ));
        }
        for &tau in &self.eval.thresholds {
            if !tau.is_finite() || tau <= 0.0 {
                return Err(ReachError::InvalidConfig(format!(
                    "evaluation threshold {tau} must be finite and > 0"
                )));
            }
        }
        if self.checkpoint_every_episodes == Some(0) {
            return Err(ReachError::InvalidConfig(
                "checkpoint_every_episodes must be ≥ 1 when set".into(),
            ));
        }
        self.schedule.validate()?;
        self.agent.validate()?;
        self.chain.validate()?;
        self.table.validate()?;
        self.camera.validate()?;
        Ok(())
    }

    /// Reads a config file: JSON with defaults for absent fields.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            ReachError::InvalidConfig(format!("reading config {}: {e}", path.display()))
        })?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| ReachError::InvalidConfig(format!("parsing config: {e}")))?;
        config.validate()?;
        Ok(config)
    }
}

/// What a finished run reports back to the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub episodes: u64,
    pub env_steps: u64,
    pub updates: u64,
    /// Threshold the curriculum ended on, meters.
    pub final_threshold: f64,
    pub final_report: EvalReport,
}

fn success_rate_at(report: &EvalReport, tau: f64) -> f64 {
    report.scatter.iter().filter(|p| p.distance < tau).count() as f64
        / report.episode_count as f64
}

/// Formats an optional diagnostic for a CSV cell (empty when absent).
fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Runs one training run to completion per `config`, writing into
/// `config.out_dir`:
///
/// * `run_config.json` — the effective configuration;
/// * `episodes.csv` — one row per episode: `episode,threshold,distance,reward,success,tries`;
/// * `updates.csv` — one row per gradient update: `update,critic_loss,critic2_loss,value_loss,actor_objective`;
/// * `evals.csv` — one row per intermittent evaluation;
/// * `checkpoint_final.bin` (and periodic `checkpoint_ep<N>.bin` if enabled);
/// * the final evaluation's `summary.json`, `scatter.csv`, `table_row.csv`.
pub fn run_training(config: &RunConfig) -> Result<TrainingSummary> {
    config.validate()?;
    let split = SeedSplitter::new(config.master_seed);
    let space = builtin_action_space(config.stage);
    let mut schedule = ThresholdSchedule::new(&config.schedule)?;

    // Agent: fresh networks, or a checkpoint continued (possibly into a
    // wider stage). The checkpoint's own reward kind and hyperparameters
    // win over the config's — they describe the networks being continued.
    let mut agent: Box<dyn Agent> = match &config.init_checkpoint {
        Some(path) => {
            let mut agent = load_agent(path, split.stream("sample"))?;
            if agent.reward_kind() != config.reward_kind {
                log::info!(
                    "checkpoint was trained with {} rewards; continuing with them (config says {})",
                    agent.reward_kind(),
                    config.reward_kind
                );
            }
            if *agent.action_space() != space {
                if let Some(from) = stage_for_space(agent.action_space()) {
                    if config.stage.rank() <= from.rank() {
                        return Err(ReachError::InvalidConfig(format!(
                            "checkpoint is at stage {from}; stage transitions only widen \
                             the action space (requested {})",
                            config.stage
                        )));
                    }
                    log::info!("widening action space: {from} → {}", config.stage);
                }
                agent.set_action_space(&space)?;
            }
            agent
        }
        None => build_agent(
            config.algorithm,
            &config.agent,
            &space,
            config.reward_kind,
            &mut split.stream("init"),
            split.stream("sample"),
        )?,
    };
    let reward_kind = agent.reward_kind();

    // Training environment: local simulator or remote service; identical
    // behavior either way (the service seeds the same named stream).
    let episode_config = EpisodeConfig {
        reward_kind,
        threshold: schedule.threshold(),
        max_tries: config.max_tries,
        action_space: space,
    };
    let mut env: Box<dyn EnvHandle> = match &config.remote {
        Some(addr) => Box::new(RemoteEnv::connect_with(
            addr,
            ConfigBody {
                seed: Some(config.master_seed),
                threshold: Some(episode_config.threshold),
                reward_kind: Some(reward_kind),
                max_tries: Some(config.max_tries),
                action_space: Some(space),
                chain: Some(config.chain.clone()),
                table: Some(config.table),
                camera: Some(config.camera),
            },
            Duration::from_secs(10),
        )?),
        None => Box::new(ReachEnv::new(
            config.chain.clone(),
            config.table,
            config.camera,
            episode_config,
            split.stream("env"),
        )?),
    };

    // Evaluation always runs against a local simulator on its own streams,
    // so its cost and randomness never touch the training trajectory.
    let mut eval_env = ReachEnv::new(
        config.chain.clone(),
        config.table,
        config.camera,
        episode_config,
        split.stream("eval-env"),
    )?;
    let mut explore_rng = split.stream("explore");
    let mut eval_act_rng = split.stream("eval-act");

    fs::create_dir_all(&config.out_dir)?;
    fs::write(
        config.out_dir.join("run_config.json"),
        serde_json::to_string_pretty(config)? + "\n",
    )?;
    let mut episodes_csv =
        BufWriter::new(fs::File::create(config.out_dir.join("episodes.csv"))?);
    writeln!(episodes_csv, "episode,threshold,distance,reward,success,tries")?;
    let mut updates_csv = BufWriter::new(fs::File::create(config.out_dir.join("updates.csv"))?);
    writeln!(updates_csv, "update,critic_loss,critic2_loss,value_loss,actor_objective")?;
    let mut evals_csv = BufWriter::new(fs::File::create(config.out_dir.join("evals.csv"))?);
    let mut evals_header = String::from("env_steps,episode,threshold,rate_at_threshold,average_distance");
    for &tau in &config.eval.thresholds {
        evals_header.push_str(&format!(",rate_{}mm", (tau * 1000.0).round() as i64));
    }
    writeln!(evals_csv, "{evals_header}")?;

    let mut env_steps: u64 = 0;
    let mut next_eval_at = if config.eval.every_steps == 0 {
        u64::MAX
    } else {
        config.eval.every_steps
    };

    for episode in 0..config.episodes {
        let mut update_rows = Vec::new();
        let record = run_episode_loop(
            env.as_mut(),
            agent.as_mut(),
            &mut explore_rng,
            episode,
            |d| {
                update_rows.push(format!(
                    "{},{},{},{},{}",
                    d.update,
                    d.critic_loss,
                    opt_cell(d.critic2_loss),
                    opt_cell(d.value_loss),
                    opt_cell(d.actor_objective),
                ));
            },
            &mut |_| Ok(()),
        )?;
        for row in update_rows {
            writeln!(updates_csv, "{row}")?;
        }
        writeln!(
            episodes_csv,
            "{},{},{},{},{},{}",
            record.episode,
            record.threshold,
            record.distance,
            record.reward,
            record.success,
            record.tries
        )?;
        env_steps += u64::from(record.tries);

        // Consecutive-success curriculum.
        if let Some(tau) = schedule.record_episode(record.success) {
            env.set_threshold(tau)?;
            log::info!("episode {episode}: threshold lowered to {tau} m");
        }

        // Intermittent evaluation (and the success-rate curriculum).
        while env_steps >= next_eval_at {
            next_eval_at += config.eval.every_steps;
            eval_env.set_threshold(schedule.threshold())?;
            let report = evaluate_policy(
                agent.as_ref(),
                &mut eval_env,
                config.eval.episodes,
                &config.eval.thresholds,
                &mut eval_act_rng,
            )?;
            let at_tau = success_rate_at(&report, schedule.threshold());
            let mut row = format!(
                "{env_steps},{episode},{},{at_tau},{}",
                schedule.threshold(),
                report.average_distance
            );
            for r in &report.rates {
                row.push_str(&format!(",{}", r.rate));
            }
            writeln!(evals_csv, "{row}")?;
            log::info!(
                "eval at step {env_steps}: rate {at_tau:.3} at τ={} m, mean distance {:.4} m",
                schedule.threshold(),
                report.average_distance
            );
            if let Some(tau) = schedule.record_evaluation(at_tau) {
                env.set_threshold(tau)?;
                log::info!("episode {episode}: threshold lowered to {tau} m");
            }
        }

        if let Some(every) = config.checkpoint_every_episodes {
            let done = episode + 1;
            if done % every == 0 && done < config.episodes {
                save_agent_to_path(
                    agent.as_ref(),
                    &config.out_dir.join(format!("checkpoint_ep{done}.bin")),
                )?;
            }
        }
    }
    episodes_csv.flush()?;
    updates_csv.flush()?;

    save_agent_to_path(agent.as_ref(), &config.out_dir.join("checkpoint_final.bin"))?;

    // Final, larger evaluation; exported in full.
    eval_env.set_threshold(schedule.threshold())?;
    let final_report = evaluate_policy(
        agent.as_ref(),
        &mut eval_env,
        config.eval.final_episodes,
        &config.eval.thresholds,
        &mut eval_act_rng,
    )?;
    let rate_at_tau = success_rate_at(&final_report, schedule.threshold());
    let mut row = format!(
        "{env_steps},{},{},{rate_at_tau},{}",
        config.episodes,
        schedule.threshold(),
        final_report.average_distance
    );
    for r in &final_report.rates {
        row.push_str(&format!(",{}", r.rate));
    }
    writeln!(evals_csv, "{row}")?;
    evals_csv.flush()?;

    let meta = TableRowMeta {
        algorithm: agent.algorithm(),
        joints: config.stage.joints_label().to_string(),
        reward_kind,
        her: agent.config().her.enabled,
        training_episodes: config.episodes,
    };
    crate::curriculum::export_report(&final_report, &meta, &config.out_dir)?;

    Ok(TrainingSummary {
        episodes: config.episodes,
        env_steps,
        updates: agent.updates(),
        final_threshold: schedule.threshold(),
        final_report,
    })
}
