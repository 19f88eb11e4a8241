//! Golden replays of the two worked scheduling examples with pinned
//! configurations and expected values.
//!
//! Fig. 2 regime: four chain programs submitted at t=0 to one idealized
//! engine (batch size 2, unit decode steps, free prefill, no memory model,
//! scheduler every step). Total queued waiting must be exactly 18 under
//! FCFS and MLFQ and 12 under PLAS (ATLAS coincides with PLAS on chains).
//!
//! Fig. 9 regime: one multi-threaded program on 2 slots; critical-path-first
//! list scheduling finishes in 11 time units, the anti-critical-path order
//! in 14.

use crate::config::{SimConfig, WorkloadKind};
use crate::critpath::{
    decode_durations, makespan_anti_critical_path, makespan_critical_path_first,
};
use crate::engine::EngineConfig;
use crate::gen::{fig2_trace, fig9_trace};
use crate::metrics::RunReport;
use crate::sched::{Policy, QueueConfig};
use crate::sim::{run_programs, EventLog, SimError};
use crate::workload::CompiledProgram;

#[derive(Clone, Debug)]
pub struct GoldenRow {
    pub name: String,
    pub expected: f64,
    pub actual: f64,
    pub pass: bool,
}

impl GoldenRow {
    fn new(name: &str, expected: f64, actual: f64) -> Self {
        Self {
            name: name.to_string(),
            expected,
            actual,
            pass: actual == expected,
        }
    }
}

/// The pinned Fig. 2 run configuration for one policy.
pub fn fig2_config(policy: Policy) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.engine.count = 1;
    cfg.engine.config = EngineConfig::idealized(2);
    cfg.scheduler.policy = policy;
    cfg.workload.source = WorkloadKind::Inline;
    cfg.workload.programs = Some(fig2_trace());
    let q = match policy {
        Policy::Fcfs | Policy::Srpt => QueueConfig::single(),
        Policy::Mlfq => QueueConfig::fig2_mlfq(),
        Policy::Plas | Policy::Atlas | Policy::AtlasExact => QueueConfig::fig2_program_policy(),
    };
    cfg.scheduler.queue.boundaries = Some(q.boundaries.clone());
    cfg.scheduler.queue.quanta = Some(q.quanta.clone());
    cfg.scheduler.queue.beta = Some(q.beta);
    cfg.scheduler.queue.mlfq_wait_threshold = Some(q.mlfq_wait_threshold);
    cfg
}

pub fn run_fig2(policy: Policy) -> Result<(EventLog, RunReport), SimError> {
    let cfg = fig2_config(policy);
    run_programs(&cfg, fig2_trace())
}

/// Total queued waiting per policy against the published 18/18/12.
pub fn golden_fig2() -> Result<Vec<GoldenRow>, SimError> {
    let mut rows = Vec::new();
    for (policy, expected) in [
        (Policy::Fcfs, 18.0),
        (Policy::Mlfq, 18.0),
        (Policy::Plas, 12.0),
        (Policy::Atlas, 12.0),
    ] {
        let (_, report) = run_fig2(policy)?;
        rows.push(GoldenRow::new(
            &format!("fig2 {} total waiting", policy.name()),
            expected,
            report.total_wait,
        ));
    }
    Ok(rows)
}

/// Makespans of the reconstructed DAG under the two list-scheduling orders.
pub fn golden_fig9() -> Result<Vec<GoldenRow>, SimError> {
    let prog = CompiledProgram::new(fig9_trace().remove(0))?;
    let durs = decode_durations(&prog, 1.0);
    Ok(vec![
        GoldenRow::new(
            "fig9 critical-path-first makespan",
            11.0,
            makespan_critical_path_first(&prog, &durs, 2),
        ),
        GoldenRow::new(
            "fig9 adversarial-order makespan",
            14.0,
            makespan_anti_critical_path(&prog, &durs, 2),
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fig2_waiting_units() {
        for row in golden_fig2().unwrap() {
            assert!(row.pass, "{}: expected {} got {}", row.name, row.expected, row.actual);
        }
    }

    #[test]
    fn fig9_makespans() {
        for row in golden_fig9().unwrap() {
            assert!(row.pass, "{}: expected {} got {}", row.name, row.expected, row.actual);
        }
    }
}
