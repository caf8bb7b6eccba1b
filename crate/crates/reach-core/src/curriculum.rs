//! Success-threshold scheduling, staged action-space growth, the evaluation
//! harness, and metric export (scatter CSV, summary JSON, results-table row).
//!
//! The threshold schedule works on integer millimetres internally so the
//! emitted sequence 0.20, 0.18, …, 0.10, 0.09, …, 0.03 is exact in floating
//! point rather than drifting through repeated subtraction.

use std::fmt;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{ActMode, Agent, Algorithm};
use crate::environment::{builtin_action_space, EnvHandle, Observation, RewardKind, Stage};
use crate::error::{ReachError, Result};

/// Thresholds every evaluation report covers by default, meters, widest
/// first.
pub const DEFAULT_EVAL_THRESHOLDS: [f64; 6] = [0.20, 0.15, 0.10, 0.07, 0.05, 0.03];

/// What drives threshold reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Shrink after a fixed run of consecutive training successes.
    Consecutive,
    /// Shrink whenever an intermittent evaluation clears a success-rate bar.
    SuccessRate,
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleMode::Consecutive => write!(f, "consecutive"),
            ScheduleMode::SuccessRate => write!(f, "success_rate"),
        }
    }
}

/// Tunable parameters of the threshold schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub mode: ScheduleMode,
    /// Starting success radius, meters.
    pub initial_threshold: f64,
    /// The schedule never goes below this radius, meters.
    pub floor: f64,
    /// Run length that triggers a reduction in `Consecutive` mode.
    pub consecutive_required: u32,
    /// Evaluation success rate that triggers a reduction in `SuccessRate`
    /// mode.
    pub success_rate_trigger: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Consecutive,
            initial_threshold: 0.20,
            floor: 0.03,
            consecutive_required: 15,
            success_rate_trigger: 0.95,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.initial_threshold.is_finite() || !self.floor.is_finite() {
            return Err(ReachError::NonFinite("schedule thresholds".into()));
        }
        if self.floor <= 0.0 {
            return Err(ReachError::InvalidConfig(
                "threshold floor must be > 0".into(),
            ));
        }
        if self.initial_threshold < self.floor {
            return Err(ReachError::InvalidConfig(format!(
                "initial threshold {} is below the floor {}",
                self.initial_threshold, self.floor
            )));
        }
        if self.consecutive_required == 0 {
            return Err(ReachError::InvalidConfig(
                "consecutive_required must be ≥ 1".into(),
            ));
        }
        if !(self.success_rate_trigger > 0.0 && self.success_rate_trigger <= 1.0) {
            return Err(ReachError::InvalidConfig(
                "success_rate_trigger must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Live scheduling state: the current success radius plus the trigger
/// bookkeeping. Thresholds quantize to whole millimetres on construction.
///
/// Reductions follow one rule in both modes: 2 cm per step while the radius
/// is above 10 cm, 1 cm at or below it, clamped at the floor. From 0.20 m
/// that emits exactly 0.20, 0.18, 0.16, 0.14, 0.12, 0.10, 0.09, 0.08, 0.07,
/// 0.06, 0.05, 0.04, 0.03.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    mode: ScheduleMode,
    threshold_mm: u32,
    floor_mm: u32,
    consecutive_required: u32,
    success_rate_trigger_permille: u32,
    consecutive_successes: u32,
}

impl ThresholdSchedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        config.validate()?;
        let threshold_mm = (config.initial_threshold * 1000.0).round() as u32;
        let floor_mm = (config.floor * 1000.0).round() as u32;
        if floor_mm == 0 || threshold_mm < floor_mm {
            return Err(ReachError::InvalidConfig(
                "thresholds below one millimetre are not representable".into(),
            ));
        }
        Ok(Self {
            mode: config.mode,
            threshold_mm,
            floor_mm,
            consecutive_required: config.consecutive_required,
            success_rate_trigger_permille: (config.success_rate_trigger * 1000.0).round() as u32,
            consecutive_successes: 0,
        })
    }

    /// Current success radius, meters.
    pub fn threshold(&self) -> f64 {
        self.threshold_mm as f64 / 1000.0
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn at_floor(&self) -> bool {
        self.threshold_mm == self.floor_mm
    }

    /// Length of the current success run (`Consecutive` mode bookkeeping).
    pub fn consecutive_successes(&self) -> u32 {
        self.consecutive_successes
    }

    /// Feeds one training episode's outcome. In `Consecutive` mode a success
    /// extends the run and a failure resets it; completing the required run
    /// resets the counter and shrinks the threshold. Returns the new
    /// threshold when it changed. `SuccessRate` mode ignores single episodes.
    pub fn record_episode(&mut self, success: bool) -> Option<f64> {
        if self.mode != ScheduleMode::Consecutive {
            return None;
        }
        if !success {
            self.consecutive_successes = 0;
            return None;
        }
        self.consecutive_successes += 1;
        if self.consecutive_successes < self.consecutive_required {
            return None;
        }
        self.consecutive_successes = 0;
        self.step_down()
    }

    /// Feeds one intermittent evaluation's success rate (at the current
    /// threshold). In `SuccessRate` mode, clearing the trigger shrinks the
    /// threshold; returns the new value when it changed. `Consecutive` mode
    /// ignores evaluations.
    pub fn record_evaluation(&mut self, success_rate: f64) -> Option<f64> {
        if self.mode != ScheduleMode::SuccessRate {
            return None;
        }
        if !success_rate.is_finite()
            || ((success_rate * 1000.0).round() as i64)
                < self.success_rate_trigger_permille as i64
        {
            return None;
        }
        self.step_down()
    }

    fn step_down(&mut self) -> Option<f64> {
        if self.at_floor() {
            return None;
        }
        let step = if self.threshold_mm > 100 { 20 } else { 10 };
        self.threshold_mm = self.threshold_mm.saturating_sub(step).max(self.floor_mm);
        Some(self.threshold())
    }
}

/// Widens the action space from one stage to the next (A1 → A2' → A3),
/// updating both the agent (policy output bounds, clipping, smoothing-noise
/// scale) and the environment. Learned parameters and the replay buffer are
/// untouched. Backward or same-stage moves are rejected.
pub fn advance_stage(
    agent: &mut dyn Agent,
    env: &mut dyn EnvHandle,
    from: Stage,
    to: Stage,
) -> Result<()> {
    if to.rank() <= from.rank() {
        return Err(ReachError::Usage(format!(
            "stage transitions only widen the action space (requested {from} → {to})"
        )));
    }
    let space = builtin_action_space(to);
    agent.set_action_space(&space)?;
    env.set_action_space(&space)?;
    Ok(())
}

/// Serializes NaN distance sentinels as JSON null and back, since JSON has
/// no NaN literal.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Success rate at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRate {
    /// Success radius, meters.
    pub threshold: f64,
    /// Fraction of evaluation episodes with distance < threshold.
    pub rate: f64,
}

/// One evaluation episode: where the target spawned and how close the arm
/// got. `distance` is NaN when target extraction failed and the episode was
/// never acted on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub target_x: f64,
    pub target_y: f64,
    #[serde(with = "nan_as_null")]
    pub distance: f64,
}

/// Result of a noise-free policy evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episode_count: usize,
    /// Mean achieved distance over episodes with a measurement, meters; NaN
    /// if every episode failed extraction.
    #[serde(with = "nan_as_null")]
    pub average_distance: f64,
    /// Success rates, widest threshold first. Rates are non-increasing as
    /// the threshold shrinks because the underlying events are nested.
    pub rates: Vec<ThresholdRate>,
    /// One row per episode, in play order.
    pub scatter: Vec<ScatterPoint>,
    /// Episodes skipped because no target could be extracted from the
    /// camera image. Always 0 when evaluating on ground-truth observations.
    pub extraction_failures: usize,
}

impl EvalReport {
    /// Success rate at the given threshold, if the report covers it.
    pub fn rate_at(&self, threshold: f64) -> Option<f64> {
        self.rates
            .iter()
            .find(|r| (r.threshold - threshold).abs() < 1e-12)
            .map(|r| r.rate)
    }
}

/// Where an evaluation episode's target estimate comes from.
pub(crate) enum EpisodeTarget {
    /// Act on the observation exactly as the environment produced it.
    Observed,
    /// Overwrite the observation's target coordinates before acting (vision
    /// pipeline output, or ground-truth injection for parity checks).
    Substituted([f64; 3]),
    /// No estimate available; record the episode as a failure without
    /// acting.
    Unavailable,
}

/// Evaluation core shared by direct evaluation and the image pipeline: runs
/// `n_episodes` deterministic (noise-free) episodes and aggregates distances
/// into per-threshold success rates. `target_source` is consulted once per
/// episode, right after reset, and may replace the target the policy sees;
/// the environment still scores against the true target.
pub(crate) fn evaluate_with_target_source(
    agent: &dyn Agent,
    env: &mut dyn EnvHandle,
    n_episodes: usize,
    thresholds: &[f64],
    rng: &mut ChaCha20Rng,
    target_source: &mut dyn FnMut(&mut dyn EnvHandle, &Observation) -> Result<EpisodeTarget>,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(ReachError::Usage("evaluation needs at least one episode".into()));
    }
    if thresholds.is_empty() {
        return Err(ReachError::Usage("evaluation needs at least one threshold".into()));
    }
    for &tau in thresholds {
        if !tau.is_finite() || tau <= 0.0 {
            return Err(ReachError::InvalidConfig(format!(
                "evaluation threshold {tau} must be finite and > 0"
            )));
        }
    }
    let mut sorted: Vec<f64> = thresholds.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite thresholds"));

    let mut successes = vec![0usize; sorted.len()];
    let mut scatter = Vec::with_capacity(n_episodes);
    let mut distance_sum = 0.0;
    let mut measured = 0usize;
    let mut extraction_failures = 0usize;

    for _ in 0..n_episodes {
        let first = env.reset()?;
        let spawn = first.target_position;
        let source = target_source(env, &first)?;
        let distance = match source {
            EpisodeTarget::Unavailable => {
                extraction_failures += 1;
                f64::NAN
            }
            _ => {
                let mut obs = first;
                if let EpisodeTarget::Substituted(p) = source {
                    obs.target_position = p;
                }
                let last = loop {
                    let action = agent.act(&obs, ActMode::Eval, rng);
                    let out = env.step(&action)?;
                    if out.done {
                        break out;
                    }
                    obs = out.observation;
                    if let EpisodeTarget::Substituted(p) = source {
                        obs.target_position = p;
                    }
                };
                distance_sum += last.info.distance;
                measured += 1;
                last.info.distance
            }
        };
        // NaN compares false against every threshold, so failed episodes
        // count toward no rate.
        for (i, &tau) in sorted.iter().enumerate() {
            if distance < tau {
                successes[i] += 1;
            }
        }
        scatter.push(ScatterPoint { target_x: spawn[0], target_y: spawn[1], distance });
    }

    let n = n_episodes as f64;
    let rates = sorted
        .iter()
        .zip(&successes)
        .map(|(&threshold, &s)| ThresholdRate { threshold, rate: s as f64 / n })
        .collect();
    let average_distance =
        if measured > 0 { distance_sum / measured as f64 } else { f64::NAN };
    Ok(EvalReport {
        episode_count: n_episodes,
        average_distance,
        rates,
        scatter,
        extraction_failures,
    })
}

/// Runs a noise-free evaluation on freshly sampled targets: `n_episodes`
/// episodes, one report. Deterministic given the environment's rng state
/// (the policy draws nothing in eval mode; `rng` is passed through for the
/// interface only).
pub fn evaluate_policy(
    agent: &dyn Agent,
    env: &mut dyn EnvHandle,
    n_episodes: usize,
    thresholds: &[f64],
    rng: &mut ChaCha20Rng,
) -> Result<EvalReport> {
    evaluate_with_target_source(agent, env, n_episodes, thresholds, rng, &mut |_, _| {
        Ok(EpisodeTarget::Observed)
    })
}

/// Run metadata for the results-table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRowMeta {
    pub algorithm: Algorithm,
    /// Actuated-joint label, e.g. "1-3" or "1-3,5".
    pub joints: String,
    pub reward_kind: RewardKind,
    pub her: bool,
    /// Training length in episodes.
    pub training_episodes: u64,
}

/// The scatter CSV: one `target_x,target_y,distance` row per episode.
/// Floats print in shortest round-trip form; failed extractions print NaN.
pub fn scatter_csv(report: &EvalReport) -> String {
    let mut out = String::from("target_x,target_y,distance\n");
    for p in &report.scatter {
        out.push_str(&format!("{},{},{}\n", p.target_x, p.target_y, p.distance));
    }
    out
}

/// The summary JSON: the full report, pretty-printed, newline-terminated.
pub fn summary_json(report: &EvalReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

/// One results-table row (header + row): run metadata, average distance,
/// and a `rate_<N>mm` column per evaluated threshold, widest first.
pub fn table_row_csv(report: &EvalReport, meta: &TableRowMeta) -> String {
    let mut header =
        String::from("algorithm,joints,reward,her,training_episodes,eval_episodes,average_distance");
    let mut row = format!(
        "{},{},{},{},{},{},{}",
        meta.algorithm,
        meta.joints,
        meta.reward_kind,
        if meta.her { "yes" } else { "no" },
        meta.training_episodes,
        report.episode_count,
        report.average_distance,
    );
    for r in &report.rates {
        header.push_str(&format!(",rate_{}mm", (r.threshold * 1000.0).round() as i64));
        row.push_str(&format!(",{}", r.rate));
    }
    header.push('\n');
    header.push_str(&row);
    header.push('\n');
    header
}

/// Writes `scatter.csv`, `summary.json`, and `table_row.csv` into `dir`
/// (created if missing).
pub fn export_report(report: &EvalReport, meta: &TableRowMeta, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("scatter.csv"), scatter_csv(report))?;
    fs::write(dir.join("summary.json"), summary_json(report)?)?;
    fs::write(dir.join("table_row.csv"), table_row_csv(report, meta))?;
    Ok(())
}
