//! Run configuration: a TOML file mirroring the simulator's sections, plus
//! dotted-path overrides (`scheduler.queue.beta=4.0`) for sweep ergonomics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::BalancerConfig;
use crate::engine::EngineConfig;
use crate::gen::{self, Preset};
use crate::sched::{Policy, QueueConfig};
use crate::sim::{generate_workload, Mode, SimError};
use crate::workload::ProgramSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("override {0:?} is not key=value")]
    BadOverride(String),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub mode: Mode,
    pub audit: bool,
    pub horizon: Horizon,
    pub engine: EngineSection,
    pub scheduler: SchedulerSection,
    pub balancer: BalancerConfig,
    pub workload: WorkloadSection,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Horizon {
    pub max_ticks: u64,
    pub max_programs: Option<u64>,
}

impl Default for Horizon {
    fn default() -> Self {
        Self {
            max_ticks: 100_000_000,
            max_programs: None,
        }
    }
}

/// One engine template replicated `count` times (engines tick in lockstep,
/// so replicas share a step time).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineSection {
    pub count: usize,
    #[serde(flatten)]
    pub config: EngineConfig,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            count: 1,
            config: EngineConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerSection {
    pub policy: Policy,
    pub queue: QueueSection,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            policy: Policy::Plas,
            queue: QueueSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantaMode {
    /// Quantum = band width (program-priority policies).
    Width,
    /// Quantum = base * growth^level (MLFQ-style ladder).
    Ladder,
}

/// Queue shape knobs; unset fields fall back to the policy's defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct QueueSection {
    pub levels: Option<usize>,
    pub base: Option<f64>,
    pub growth: Option<f64>,
    pub quanta_mode: Option<QuantaMode>,
    pub beta: Option<f64>,
    pub mlfq_wait_threshold: Option<f64>,
    pub boundaries: Option<Vec<f64>>,
    pub quanta: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    #[default]
    Preset,
    Trace,
    Inline,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSection {
    pub source: WorkloadKind,
    pub preset: String,
    pub count: usize,
    pub arrival_rate: Option<f64>,
    pub path: Option<String>,
    /// Reject unknown JSONL keys when loading traces.
    pub strict: bool,
    pub programs: Option<Vec<ProgramSpec>>,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self {
            source: WorkloadKind::Preset,
            preset: "sharegpt".into(),
            count: 100,
            arrival_rate: None,
            path: None,
            strict: false,
            programs: None,
        }
    }
}

/// Queue defaults per policy: a single queue for FCFS and the clairvoyant
/// oracle, an all-enter-top ladder for MLFQ, priority bands for the
/// program-aware policies.
pub fn policy_suite(policy: Policy) -> QueueConfig {
    match policy {
        Policy::Fcfs | Policy::Srpt => QueueConfig::single(),
        Policy::Mlfq => QueueConfig::ladder(8, 2.0, 4.0),
        Policy::Plas | Policy::Atlas | Policy::AtlasExact => QueueConfig::default(),
    }
}

impl SimConfig {
    pub fn engine_config(&self) -> EngineConfig {
        self.engine.config.clone()
    }

    pub fn queue_config(&self) -> QueueConfig {
        let s = &self.scheduler.queue;
        let policy = self.scheduler.policy;
        let mut q = if s.levels.is_some() || s.base.is_some() || s.growth.is_some() || s.quanta_mode.is_some()
        {
            let levels = s.levels.unwrap_or(8);
            let base = s.base.unwrap_or(2.0);
            let growth = s.growth.unwrap_or(4.0);
            let mode = s.quanta_mode.unwrap_or(if policy == Policy::Mlfq {
                QuantaMode::Ladder
            } else {
                QuantaMode::Width
            });
            match mode {
                QuantaMode::Width => QueueConfig::banded(levels, base, growth, 2.0),
                QuantaMode::Ladder => QueueConfig::ladder(levels, base, growth),
            }
        } else {
            policy_suite(policy)
        };
        if let Some(b) = &s.boundaries {
            q.boundaries = b.clone();
        }
        if let Some(qq) = &s.quanta {
            q.quanta = qq.clone();
        }
        if let Some(beta) = s.beta {
            q.beta = beta;
        }
        if let Some(w) = s.mlfq_wait_threshold {
            q.mlfq_wait_threshold = w;
        }
        q
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.horizon.max_ticks == 0 {
            return Err("horizon.max_ticks must be > 0".into());
        }
        if self.engine.count == 0 {
            return Err("engine.count must be >= 1".into());
        }
        Ok(())
    }

    /// Materializes the configured workload into validated program specs.
    pub fn resolve_workload(&self) -> Result<Vec<ProgramSpec>, SimError> {
        let w = &self.workload;
        match w.source {
            WorkloadKind::Inline => Ok(w.programs.clone().unwrap_or_default()),
            WorkloadKind::Trace => {
                let path = w
                    .path
                    .as_ref()
                    .ok_or_else(|| SimError::Config("workload.path missing".into()))?;
                let file = std::fs::File::open(path)?;
                Ok(crate::workload::load_trace(
                    std::io::BufReader::new(file),
                    w.strict,
                )?)
            }
            WorkloadKind::Preset => match gen::preset(&w.preset)? {
                Preset::Fixed(programs) => Ok(programs),
                Preset::Gen(mixture) => {
                    let rate = w.arrival_rate.unwrap_or(mixture[0].arrival_rate);
                    if !(rate > 0.0) {
                        return Err(SimError::Config(format!(
                            "arrival rate must be > 0, got {rate}"
                        )));
                    }
                    generate_workload(
                        &mixture,
                        w.count,
                        rate,
                        self.seed,
                        self.mode == Mode::Online,
                    )
                }
            },
        }
    }
}

pub fn load_file(path: &str) -> Result<SimConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_string(),
        source,
    })?;
    parse_with_overrides(&text, &[])
}

/// Parses TOML and applies `key.path=value` overrides on top; override
/// values parse as TOML literals, falling back to bare strings.
pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<SimConfig, ConfigError> {
    let mut value: toml::Value = text.parse()?;
    for ov in overrides {
        let (path, raw) = ov
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(ov.clone()))?;
        let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").unwrap(),
            Err(_) => toml::Value::String(raw.trim().to_string()),
        };
        set_path(&mut value, path.trim(), parsed)
            .map_err(|_| ConfigError::BadOverride(ov.clone()))?;
    }
    Ok(value.try_into()?)
}

fn set_path(root: &mut toml::Value, path: &str, new: toml::Value) -> Result<(), ()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or(())?;
        if i == parts.len() - 1 {
            table.insert(part.to_string(), new);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(toml::Table::new()));
    }
    Err(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_toml() {
        let cfg = parse_with_overrides("", &[]).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.engine.count, 1);
        assert_eq!(cfg.scheduler.policy, Policy::Plas);
        assert_eq!(cfg.workload.count, 100);
    }

    #[test]
    fn overrides_take_precedence_over_file() {
        let text = "seed = 1\n[scheduler]\npolicy = \"fcfs\"\n";
        let cfg = parse_with_overrides(
            text,
            &[
                "seed=42".into(),
                "scheduler.policy=plas".into(),
                "scheduler.queue.beta=4.0".into(),
                "engine.max_batch_size=2".into(),
                "workload.preset=fig2".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.scheduler.policy, Policy::Plas);
        assert_eq!(cfg.scheduler.queue.beta, Some(4.0));
        assert_eq!(cfg.engine.config.max_batch_size, 2);
        assert_eq!(cfg.workload.preset, "fig2");
    }

    #[test]
    fn bad_override_is_rejected() {
        assert!(matches!(
            parse_with_overrides("", &["oops".into()]),
            Err(ConfigError::BadOverride(_))
        ));
    }

    #[test]
    fn policy_suite_shapes() {
        assert_eq!(policy_suite(Policy::Fcfs).levels(), 1);
        assert!(policy_suite(Policy::Fcfs).quanta[0].is_infinite());
        assert_eq!(policy_suite(Policy::Srpt).levels(), 1);
        let mlfq = policy_suite(Policy::Mlfq);
        assert_eq!(mlfq.quanta[0], 2.0);
        assert_eq!(mlfq.quanta[1], 8.0);
        let plas = policy_suite(Policy::Plas);
        assert_eq!(plas.boundaries[0], 2.0);
        assert_eq!(plas.boundaries[1], 8.0);
        assert_eq!(plas.quanta[1], 6.0);
        assert_eq!(plas.beta, 2.0);
    }

    #[test]
    fn queue_config_respects_policy_and_overrides() {
        let mut cfg = SimConfig::default();
        cfg.scheduler.policy = Policy::Fcfs;
        assert_eq!(cfg.queue_config().levels(), 1);
        cfg.scheduler.policy = Policy::Plas;
        cfg.scheduler.queue.beta = Some(3.0);
        let q = cfg.queue_config();
        assert_eq!(q.beta, 3.0);
        assert_eq!(q.boundaries[0], 2.0);
    }

    #[test]
    fn engine_section_flattens() {
        let text = "[engine]\ncount = 4\nmax_batch_size = 8\ncache_mode = \"program_prefix\"\n";
        let cfg = parse_with_overrides(text, &[]).unwrap();
        assert_eq!(cfg.engine.count, 4);
        assert_eq!(cfg.engine.config.max_batch_size, 8);
    }
}
