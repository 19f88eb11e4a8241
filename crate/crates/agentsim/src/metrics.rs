//! Run reports: program-level latency, tail percentiles, makespan,
//! wait/execution ratios, cache-hit series, swap accounting, and exports.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::RouteBranch;
use crate::engine::SwapLedger;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("percentile must be in (0, 1], got {0}")]
    BadPercentile(f64),
    #[error("{unfinished} of {total} programs unfinished; makespan undefined")]
    Unfinished { unfinished: usize, total: usize },
    #[error("unknown export format {0:?} (expected csv|json|gantt_csv)")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Final accounting for one finished program.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramOutcome {
    pub program_id: String,
    pub arrival_time: f64,
    /// Last call completion.
    pub finish_time: f64,
    pub n_calls: usize,
    pub total_decode_tokens: u64,
    /// Summed queue wait across calls (excludes interrupt gaps).
    pub total_wait: f64,
    /// Summed engine service across calls (prefill + restore + decode ticks).
    pub total_exec: f64,
    /// Summed interrupt exposure across calls.
    pub total_interrupt: f64,
    /// finish - arrival.
    pub response_time: f64,
    /// finish - arrival minus interrupt gaps along the completion-critical
    /// chain (the path of latest-finishing parents).
    pub critical_path_response: f64,
    pub is_chain: bool,
}

/// Program-level token latency: response time per generated token.
/// Single-threaded programs subtract all interrupt time; multi-threaded
/// programs use the critical-path response over all threads' tokens.
pub fn program_token_latency(o: &ProgramOutcome, single_threaded: bool) -> f64 {
    let resp = if single_threaded {
        o.response_time - o.total_interrupt
    } else {
        o.critical_path_response
    };
    resp / o.total_decode_tokens as f64
}

/// Nearest-rank percentile: the ceil(p*n)-th smallest value.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(MetricsError::BadPercentile(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Time from first arrival to last completion.
pub fn makespan(outcomes: &[ProgramOutcome]) -> Result<f64, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let first = outcomes
        .iter()
        .map(|o| o.arrival_time)
        .fold(f64::INFINITY, f64::min);
    let last = outcomes
        .iter()
        .map(|o| o.finish_time)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(last - first)
}

/// Final accounting for one finished call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallOutcome {
    pub program_id: String,
    pub call_id: String,
    pub engine: usize,
    pub ready_time: f64,
    pub first_admit: f64,
    pub finish_time: f64,
    pub decode_tokens: u64,
    pub input_tokens: u64,
    /// Input tokens served from the prefix cache at first admission.
    pub cached_tokens: u64,
    pub prefill_cost: f64,
    pub wait: f64,
    pub exec: f64,
    pub interrupt_gap: f64,
    pub preemptions: u64,
    /// Engine that completed this program's previous call, if any.
    pub prior_engine: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub mean: f64,
}

/// Groups (x, y) points into [lo, hi) bins and averages y per bin.
pub fn binned_mean(points: impl Iterator<Item = (f64, f64)>, edges: &[f64]) -> Vec<Bin> {
    let mut bins: Vec<Bin> = edges
        .windows(2)
        .map(|w| Bin {
            lo: w[0],
            hi: w[1],
            n: 0,
            mean: 0.0,
        })
        .collect();
    for (x, y) in points {
        if let Some(b) = bins.iter_mut().find(|b| x >= b.lo && x < b.hi) {
            b.n += 1;
            b.mean += y;
        }
    }
    for b in &mut bins {
        if b.n > 0 {
            b.mean /= b.n as f64;
        }
    }
    bins
}

pub fn default_bin_edges() -> Vec<f64> {
    let mut e: Vec<f64> = (0..15).map(|i| (1u64 << i) as f64).collect();
    e.push(f64::INFINITY);
    e
}

/// Per-call wait/exec ratios binned by decode length.
pub fn wait_exec_ratio_by_call(calls: &[CallOutcome], edges: &[f64]) -> Vec<Bin> {
    binned_mean(
        calls
            .iter()
            .map(|c| (c.decode_tokens as f64, c.wait / c.exec)),
        edges,
    )
}

/// Per-program wait/exec ratios binned by number of calls.
pub fn wait_exec_ratio_by_program(progs: &[ProgramOutcome], edges: &[f64]) -> Vec<Bin> {
    binned_mean(
        progs
            .iter()
            .map(|p| (p.n_calls as f64, p.total_wait / p.total_exec)),
        edges,
    )
}

/// Cache-hit rate per admitted call binned by input length, split by whether
/// the call landed on the engine holding its program's previous call.
/// First calls of a program (no prior engine) are excluded from both series.
pub fn cache_hit_series(calls: &[CallOutcome], edges: &[f64]) -> (Vec<Bin>, Vec<Bin>) {
    let rate = |c: &CallOutcome| {
        (
            c.input_tokens as f64,
            c.cached_tokens as f64 / c.input_tokens.max(1) as f64,
        )
    };
    let within = binned_mean(
        calls
            .iter()
            .filter(|c| c.prior_engine == Some(c.engine))
            .map(rate),
        edges,
    );
    let cross = binned_mean(
        calls
            .iter()
            .filter(|c| c.prior_engine.is_some_and(|p| p != c.engine))
            .map(rate),
        edges,
    );
    (within, cross)
}

/// Mean cache-hit rate over calls whose input exceeds `min_input_tokens`.
pub fn mean_hit_rate(calls: &[CallOutcome], min_input_tokens: u64) -> Option<f64> {
    let eligible: Vec<f64> = calls
        .iter()
        .filter(|c| c.input_tokens > min_input_tokens)
        .map(|c| c.cached_tokens as f64 / c.input_tokens.max(1) as f64)
        .collect();
    if eligible.is_empty() {
        None
    } else {
        Some(eligible.iter().sum::<f64>() / eligible.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Prefill,
    Decode,
    Preempted,
}

impl Segment {
    pub fn name(self) -> &'static str {
        match self {
            Segment::Prefill => "prefill",
            Segment::Decode => "decode",
            Segment::Preempted => "preempted",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanttRow {
    pub call_id: String,
    pub program_id: String,
    pub engine: usize,
    pub start_tick: u64,
    pub end_tick: u64,
    pub segment: Segment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteRow {
    pub time: f64,
    pub call_id: String,
    pub program_id: String,
    pub input_tokens: u64,
    pub branch: RouteBranch,
    pub engine: usize,
}

/// Everything a run produces besides the raw event log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub policy: String,
    pub seed: u64,
    pub ticks: u64,
    pub total_programs: usize,
    pub completed_programs: usize,
    pub programs: Vec<ProgramOutcome>,
    pub calls: Vec<CallOutcome>,
    /// Summed queue waiting over all calls (the worked examples' metric).
    pub total_wait: f64,
    pub mean_token_latency: f64,
    pub p95_token_latency: f64,
    pub p99_token_latency: f64,
    pub p95_response_time: f64,
    pub p99_response_time: f64,
    /// Defined only when every program finished.
    pub makespan: Option<f64>,
    pub call_ratio_bins: Vec<Bin>,
    pub program_ratio_bins: Vec<Bin>,
    pub cache_hits_within_engine: Vec<Bin>,
    pub cache_hits_cross_engine: Vec<Bin>,
    /// Prefill tokens actually computed (input minus cached, summed).
    pub prefill_uncached_tokens: u64,
    pub prefill_time: f64,
    pub swap_ledgers: Vec<SwapLedger>,
    pub gantt: Vec<GanttRow>,
    pub routes: Vec<RouteRow>,
}

impl RunReport {
    /// Derives the aggregate fields from programs/calls already collected.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        policy: String,
        seed: u64,
        ticks: u64,
        total_programs: usize,
        programs: Vec<ProgramOutcome>,
        calls: Vec<CallOutcome>,
        swap_ledgers: Vec<SwapLedger>,
        gantt: Vec<GanttRow>,
        routes: Vec<RouteRow>,
    ) -> Self {
        let completed = programs.len();
        let latencies: Vec<f64> = programs
            .iter()
            .map(|p| program_token_latency(p, p.is_chain))
            .collect();
        let responses: Vec<f64> = programs.iter().map(|p| p.response_time).collect();
        let mean_token_latency = if latencies.is_empty() {
            0.0
        } else {
            latencies.iter().sum::<f64>() / latencies.len() as f64
        };
        let pct = |v: &[f64], p: f64| percentile(v, p).unwrap_or(0.0);
        let makespan_val = if completed == total_programs && completed > 0 {
            makespan(&programs).ok()
        } else {
            None
        };
        let edges = default_bin_edges();
        let (within, cross) = cache_hit_series(&calls, &edges);
        let total_wait = calls.iter().map(|c| c.wait).sum();
        let prefill_uncached_tokens = calls
            .iter()
            .map(|c| c.input_tokens - c.cached_tokens)
            .sum();
        let prefill_time = calls.iter().map(|c| c.prefill_cost).sum();
        RunReport {
            schema_version: SCHEMA_VERSION,
            policy,
            seed,
            ticks,
            total_programs,
            completed_programs: completed,
            total_wait,
            mean_token_latency,
            p95_token_latency: pct(&latencies, 0.95),
            p99_token_latency: pct(&latencies, 0.99),
            p95_response_time: pct(&responses, 0.95),
            p99_response_time: pct(&responses, 0.99),
            makespan: makespan_val,
            call_ratio_bins: wait_exec_ratio_by_call(&calls, &edges),
            program_ratio_bins: wait_exec_ratio_by_program(&programs, &edges),
            cache_hits_within_engine: within,
            cache_hits_cross_engine: cross,
            prefill_uncached_tokens,
            prefill_time,
            swap_ledgers,
            gantt,
            routes,
            programs,
            calls,
        }
    }

    pub fn program(&self, id: &str) -> Option<&ProgramOutcome> {
        self.programs.iter().find(|p| p.program_id == id)
    }

    /// Per-program CSV with stable column order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "schema_version,program_id,arrival_time,finish_time,n_calls,total_decode_tokens,\
             total_wait,total_exec,total_interrupt,response_time,critical_path_response,\
             token_latency"
        )?;
        for p in &self.programs {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                self.schema_version,
                p.program_id,
                p.arrival_time,
                p.finish_time,
                p.n_calls,
                p.total_decode_tokens,
                p.total_wait,
                p.total_exec,
                p.total_interrupt,
                p.response_time,
                p.critical_path_response,
                program_token_latency(p, p.is_chain),
            )?;
        }
        Ok(())
    }

    /// Gantt rows: (call, program, engine, start_tick, end_tick, segment).
    pub fn write_gantt_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "call_id,program_id,engine_id,start_tick,end_tick,segment")?;
        for g in &self.gantt {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                g.call_id,
                g.program_id,
                g.engine,
                g.start_tick,
                g.end_tick,
                g.segment.name()
            )?;
        }
        Ok(())
    }

    /// Routing log: (time, call, program, input_tokens, branch, engine).
    pub fn write_routing_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "time,call_id,program_id,input_tokens,policy_branch,engine_id")?;
        for r in &self.routes {
            let branch = match r.branch {
                RouteBranch::Short => "short",
                RouteBranch::Pinned => "pinned",
                RouteBranch::NewPin => "new_pin",
                RouteBranch::RoundRobin => "round_robin",
                RouteBranch::LeastUsed => "least_used",
            };
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.time, r.call_id, r.program_id, r.input_tokens, branch, r.engine
            )?;
        }
        Ok(())
    }

    pub fn export<W: Write>(&self, format: &str, w: W) -> Result<(), MetricsError> {
        match format {
            "csv" => self.write_csv(w)?,
            "json" => serde_json::to_writer_pretty(w, self).map_err(std::io::Error::from)?,
            "gantt_csv" => self.write_gantt_csv(w)?,
            other => return Err(MetricsError::UnknownFormat(other.to_string())),
        }
        Ok(())
    }
}
