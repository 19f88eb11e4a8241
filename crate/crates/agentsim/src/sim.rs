//! The deterministic event loop binding workload, engines, schedulers and
//! the load balancer.
//!
//! All engines share one global clock and tick in lockstep. Within a tick
//! boundary the order is fixed: completions update the process table, then
//! program arrivals and interrupt expiries fire, ready calls are routed and
//! enqueued, each engine's scheduler runs (demotion, anti-starvation, batch
//! formation, preemption, admission), and finally every engine advances one
//! decode step. Identical (config, seed) produce byte-identical event logs.

use std::collections::BTreeSet;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::{BalanceError, Balancer, RouteBranch};
use crate::config::SimConfig;
use crate::engine::{EngineError, EngineState, Phase, ResidentCall};
use crate::gen::GenError;
use crate::metrics::{CallOutcome, GanttRow, ProgramOutcome, RouteRow, RunReport, Segment};
use crate::sched::{EngineSched, Policy, ProcessTable, SchedError};
use crate::workload::{
    CallHandle, CallState, CompiledProgram, ProgramRuntime, ProgramSpec, TraceError,
    ValidateError,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Online,
    /// All programs submitted at the start.
    OfflineBatch,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Validate(#[from] ValidateError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error("simulated out-of-memory: {0}")]
    SimulatedOom(EngineError),
    #[error(transparent)]
    Engine(EngineError),
    #[error("invariant violated: {0}")]
    Audit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SimError {
    /// Process exit code: 2 config errors, 3 simulated OOM, 66 file errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::SimulatedOom(_) => 3,
            SimError::Io(_) | SimError::Trace(TraceError::Io(_)) => 66,
            _ => 2,
        }
    }
}

fn engine_err(e: EngineError) -> SimError {
    match e {
        EngineError::SwapSpaceExhausted { .. } | EngineError::KvInfeasible { .. } => {
            SimError::SimulatedOom(e)
        }
        other => SimError::Engine(other),
    }
}

/// First tick boundary at or after `time`.
fn boundary(step: f64, time: f64) -> u64 {
    ((time / step) - 1e-9).ceil().max(0.0) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    Arrival,
    Ready,
    Route {
        engine: usize,
        input_tokens: u64,
        branch: RouteBranch,
    },
    Enqueue {
        engine: usize,
        q_idx: usize,
        priority: f64,
    },
    Admit {
        engine: usize,
        cached_tokens: u64,
        prefill_ticks: u64,
        resumed: bool,
    },
    Demote {
        engine: usize,
        from_q: usize,
        to_q: usize,
    },
    Promote {
        engine: usize,
        from_q: usize,
    },
    Preempt {
        engine: usize,
        blocks: u64,
        swap_time: f64,
        forced: bool,
    },
    CompleteCall {
        engine: usize,
        exec: f64,
        wait: f64,
    },
    CompleteProgram,
}

impl EventKind {
    fn name(&self) -> &'static str {
        match self {
            EventKind::Arrival => "arrival",
            EventKind::Ready => "ready",
            EventKind::Route { .. } => "route",
            EventKind::Enqueue { .. } => "enqueue",
            EventKind::Admit { .. } => "admit",
            EventKind::Demote { .. } => "demote",
            EventKind::Promote { .. } => "promote",
            EventKind::Preempt { .. } => "preempt",
            EventKind::CompleteCall { .. } => "complete_call",
            EventKind::CompleteProgram => "complete_program",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u64,
    pub time: f64,
    pub prog: usize,
    /// usize::MAX for program-level events.
    pub call: usize,
    pub kind: EventKind,
}

/// Append-only, timestamp-ordered record of everything that happened.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub program_ids: Vec<String>,
    pub call_ids: Vec<Vec<String>>,
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn program_id(&self, prog: usize) -> &str {
        &self.program_ids[prog]
    }

    pub fn call_id(&self, prog: usize, call: usize) -> &str {
        &self.call_ids[prog][call]
    }

    /// (tick, time, event, program_id, call_id, engine_id, detail) rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "tick,time,event,program_id,call_id,engine_id,detail")?;
        for e in &self.events {
            let call_id = if e.call == usize::MAX {
                ""
            } else {
                self.call_id(e.prog, e.call)
            };
            let (engine, detail) = match &e.kind {
                EventKind::Arrival | EventKind::Ready | EventKind::CompleteProgram => {
                    (String::new(), String::new())
                }
                EventKind::Route {
                    engine,
                    input_tokens,
                    branch,
                } => (
                    engine.to_string(),
                    format!("input_tokens={input_tokens};branch={branch:?}"),
                ),
                EventKind::Enqueue {
                    engine,
                    q_idx,
                    priority,
                } => (
                    engine.to_string(),
                    format!("q_idx={q_idx};priority={priority}"),
                ),
                EventKind::Admit {
                    engine,
                    cached_tokens,
                    prefill_ticks,
                    resumed,
                } => (
                    engine.to_string(),
                    format!(
                        "cached_tokens={cached_tokens};prefill_ticks={prefill_ticks};resumed={resumed}"
                    ),
                ),
                EventKind::Demote {
                    engine,
                    from_q,
                    to_q,
                } => (engine.to_string(), format!("from_q={from_q};to_q={to_q}")),
                EventKind::Promote { engine, from_q } => {
                    (engine.to_string(), format!("from_q={from_q}"))
                }
                EventKind::Preempt {
                    engine,
                    blocks,
                    swap_time,
                    forced,
                } => (
                    engine.to_string(),
                    format!("blocks={blocks};swap_time={swap_time};forced={forced}"),
                ),
                EventKind::CompleteCall { engine, exec, wait } => {
                    (engine.to_string(), format!("exec={exec};wait={wait}"))
                }
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                e.tick,
                e.time,
                e.kind.name(),
                self.program_id(e.prog),
                call_id,
                engine,
                detail
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }
}

#[derive(Clone, Debug)]
struct CallSim {
    engine: Option<usize>,
    /// Boundary time when the call entered the serving layer.
    ready_time: f64,
    /// Arrival (roots) or latest parent completion; readiness minus this is
    /// the call's interrupt exposure.
    trigger_time: f64,
    first_admit: Option<f64>,
    cached_tokens: u64,
    prefill_cost: f64,
    preemptions: u64,
    attained_decode: u64,
    prior_engine: Option<usize>,
}

impl CallSim {
    fn new() -> Self {
        Self {
            engine: None,
            ready_time: 0.0,
            trigger_time: 0.0,
            first_admit: None,
            cached_tokens: 0,
            prefill_cost: 0.0,
            preemptions: 0,
            attained_decode: 0,
            prior_engine: None,
        }
    }
}

struct ProgSim {
    compiled: CompiledProgram,
    runtime: ProgramRuntime,
    calls: Vec<CallSim>,
    arrived: bool,
    last_completed_engine: Option<usize>,
    wait_sum: f64,
    exec_sum: f64,
    interrupt_sum: f64,
}

/// Merges consecutive identical (call, engine, segment) ticks into rows.
#[derive(Default)]
struct GanttRecorder {
    open: std::collections::BTreeMap<CallHandle, (u64, usize, Segment)>,
    rows: Vec<(CallHandle, usize, u64, u64, Segment)>,
}

impl GanttRecorder {
    fn note(&mut self, h: CallHandle, engine: usize, seg: Segment, tick: u64) {
        match self.open.get(&h) {
            Some(&(_, e, s)) if e == engine && s == seg => {}
            Some(&(start, e, s)) => {
                if tick > start {
                    self.rows.push((h, e, start, tick, s));
                }
                self.open.insert(h, (tick, engine, seg));
            }
            None => {
                self.open.insert(h, (tick, engine, seg));
            }
        }
    }

    fn close(&mut self, h: CallHandle, tick: u64) {
        if let Some((start, e, s)) = self.open.remove(&h) {
            if tick > start {
                self.rows.push((h, e, start, tick, s));
            }
        }
    }
}

struct Sim {
    step: f64,
    policy: Policy,
    audit: bool,
    progs: Vec<ProgSim>,
    table: ProcessTable,
    scheds: Vec<EngineSched>,
    engines: Vec<EngineState>,
    balancer: Balancer,
    events: Vec<Event>,
    gantt: GanttRecorder,
    routes: Vec<RouteRow>,
    outcomes: Vec<ProgramOutcome>,
    call_outcomes: Vec<CallOutcome>,
    /// (tick, prog, call_id_rank, call) — readiness boundary queue.
    pending_ready: BTreeSet<(u64, usize, usize, usize)>,
    next_arrival: usize,
    completed_programs: usize,
    tick: u64,
    clock: f64,
    completion_buf: Vec<(usize, CallHandle)>,
    audit_prev_service: Vec<f64>,
}

impl Sim {
    fn event(&mut self, prog: usize, call: usize, kind: EventKind) {
        self.events.push(Event {
            tick: self.tick,
            time: self.clock,
            prog,
            call,
            kind,
        });
    }

    fn arrival_priority(&self, h: CallHandle) -> Result<f64, SimError> {
        let entry = self.table.get(h.prog)?;
        Ok(match self.policy {
            Policy::Fcfs | Policy::Mlfq => 0.0,
            Policy::Plas | Policy::Atlas => entry.service,
            Policy::AtlasExact => self.progs[h.prog].compiled.parents[h.call]
                .iter()
                .map(|p| *entry.completed_prio.get(p).expect("parent completed"))
                .fold(0.0, f64::max),
            Policy::Srpt => entry.remaining_decode_tokens as f64 * self.step,
        })
    }

    /// (A) completions recorded during the previous tick land at this
    /// boundary: update the table, unlock children, close sessions.
    fn process_completions(&mut self) -> Result<(), SimError> {
        let buf = std::mem::take(&mut self.completion_buf);
        let step = self.step;
        let now = self.clock;
        let tick = self.tick;
        for (engine_id, h) in buf {
            let qc = self.scheds[engine_id].remove(h)?;
            let decode = self.progs[h.prog].compiled.spec.calls[h.call].decode_tokens;
            self.table.update_on_completion(
                self.policy,
                h,
                qc.priority,
                qc.total_exec,
                decode,
                now,
            )?;
            let outcome = {
                let p = &mut self.progs[h.prog];
                p.runtime.complete_call(&p.compiled, h.call, now);
                p.runtime.attained_decode[h.call] = decode;
                p.last_completed_engine = Some(engine_id);
                p.wait_sum += qc.total_wait;
                p.exec_sum += qc.total_exec;
                let gap = p.calls[h.call].ready_time - p.calls[h.call].trigger_time;
                p.interrupt_sum += gap;
                p.calls[h.call].attained_decode = decode;
                // newly unlocked children enter the readiness queue
                let mut pending = Vec::new();
                for ch in 0..p.compiled.n_calls() {
                    if p.runtime.states[ch] == CallState::Interrupted
                        && p.compiled.parents[ch].contains(&h.call)
                        && p.compiled.parents[ch]
                            .iter()
                            .all(|&par| p.runtime.states[par] == CallState::Done)
                    {
                        p.calls[ch].trigger_time = now;
                        let t = boundary(step, p.runtime.ready_at[ch]).max(tick);
                        pending.push((t, h.prog, p.compiled.call_id_rank[ch], ch));
                    }
                }
                let cs = &p.calls[h.call];
                let co = CallOutcome {
                    program_id: p.compiled.spec.program_id.clone(),
                    call_id: p.compiled.spec.calls[h.call].call_id.clone(),
                    engine: engine_id,
                    ready_time: cs.ready_time,
                    first_admit: cs.first_admit.unwrap_or(now),
                    finish_time: now,
                    decode_tokens: decode,
                    input_tokens: p.compiled.input_tokens[h.call],
                    cached_tokens: cs.cached_tokens,
                    prefill_cost: cs.prefill_cost,
                    wait: qc.total_wait,
                    exec: qc.total_exec,
                    interrupt_gap: gap,
                    preemptions: cs.preemptions,
                    prior_engine: cs.prior_engine,
                };
                (co, pending)
            };
            let (co, pending) = outcome;
            self.call_outcomes.push(co);
            for entry in pending {
                self.pending_ready.insert(entry);
            }
            self.gantt.close(h, tick);
            self.event(
                h.prog,
                h.call,
                EventKind::CompleteCall {
                    engine: engine_id,
                    exec: qc.total_exec,
                    wait: qc.total_wait,
                },
            );
            if self.progs[h.prog].runtime.is_done() {
                self.finish_program(h.prog);
            }
        }
        Ok(())
    }

    fn finish_program(&mut self, prog: usize) {
        let outcome = {
            let p = &self.progs[prog];
            let arrival = p.compiled.spec.arrival_time;
            let finish = self.clock;
            // completion-critical chain: walk latest-finishing parents back
            let mut cp_interrupt = 0.0;
            let last = (0..p.compiled.n_calls())
                .max_by(|&a, &b| {
                    let fa = p.runtime.completed_at[a].unwrap_or(f64::NEG_INFINITY);
                    let fb = p.runtime.completed_at[b].unwrap_or(f64::NEG_INFINITY);
                    fa.total_cmp(&fb).then(b.cmp(&a))
                })
                .unwrap();
            let mut cur = last;
            loop {
                cp_interrupt += p.calls[cur].ready_time - p.calls[cur].trigger_time;
                if p.compiled.parents[cur].is_empty() {
                    break;
                }
                cur = *p.compiled.parents[cur]
                    .iter()
                    .max_by(|&&a, &&b| {
                        let fa = p.runtime.completed_at[a].unwrap();
                        let fb = p.runtime.completed_at[b].unwrap();
                        fa.total_cmp(&fb).then(b.cmp(&a))
                    })
                    .unwrap();
            }
            ProgramOutcome {
                program_id: p.compiled.spec.program_id.clone(),
                arrival_time: arrival,
                finish_time: finish,
                n_calls: p.compiled.n_calls(),
                total_decode_tokens: p.compiled.total_decode_tokens,
                total_wait: p.wait_sum,
                total_exec: p.exec_sum,
                total_interrupt: p.interrupt_sum,
                response_time: finish - arrival,
                critical_path_response: finish - arrival - cp_interrupt,
                is_chain: p.compiled.is_chain,
            }
        };
        self.outcomes.push(outcome);
        self.table.end_session(prog);
        self.completed_programs += 1;
        self.event(prog, usize::MAX, EventKind::CompleteProgram);
    }

    /// (B) program arrivals at or before this boundary open sessions and
    /// queue their root calls' readiness.
    fn process_arrivals(&mut self) {
        let step = self.step;
        let tick = self.tick;
        while self.next_arrival < self.progs.len() {
            let idx = self.next_arrival;
            let arrival = self.progs[idx].compiled.spec.arrival_time;
            if boundary(step, arrival) > tick {
                break;
            }
            self.next_arrival += 1;
            let total_decode = self.progs[idx].compiled.total_decode_tokens;
            self.table.start_session(idx, self.clock, total_decode);
            let roots = {
                let p = &mut self.progs[idx];
                p.arrived = true;
                let mut roots = Vec::new();
                for c in 0..p.compiled.n_calls() {
                    if p.compiled.parents[c].is_empty() {
                        p.calls[c].trigger_time = arrival;
                        let t = boundary(step, p.runtime.ready_at[c]).max(tick);
                        roots.push((t, idx, p.compiled.call_id_rank[c], c));
                    }
                }
                roots
            };
            for r in roots {
                self.pending_ready.insert(r);
            }
            self.event(idx, usize::MAX, EventKind::Arrival);
        }
    }

    /// (C) due interrupt expiries: route each ready call and enqueue it.
    fn process_ready(&mut self) -> Result<(), SimError> {
        while let Some(&(t, prog, rank, call)) = self.pending_ready.iter().next() {
            if t > self.tick {
                break;
            }
            self.pending_ready.remove(&(t, prog, rank, call));
            let h = CallHandle { prog, call };
            let input = self.progs[prog].compiled.input_tokens[call];
            self.event(prog, call, EventKind::Ready);
            let loads: Vec<usize> = self.scheds.iter().map(EngineSched::active_calls).collect();
            let (engine, branch) = self.balancer.route(prog, input, &mut self.table, &loads)?;
            self.event(
                prog,
                call,
                EventKind::Route {
                    engine,
                    input_tokens: input,
                    branch,
                },
            );
            self.routes.push(RouteRow {
                time: self.clock,
                call_id: self.progs[prog].compiled.spec.calls[call].call_id.clone(),
                program_id: self.progs[prog].compiled.spec.program_id.clone(),
                input_tokens: input,
                branch,
                engine,
            });
            let priority = self.arrival_priority(h)?;
            let q_idx = self.scheds[engine].on_arrival(
                h,
                priority,
                self.clock,
                self.clock,
                &mut self.table,
            )?;
            {
                let p = &mut self.progs[prog];
                p.runtime.states[call] = CallState::Queued;
                p.calls[call].engine = Some(engine);
                p.calls[call].ready_time = self.clock;
            }
            self.event(
                prog,
                call,
                EventKind::Enqueue {
                    engine,
                    q_idx,
                    priority,
                },
            );
        }
        Ok(())
    }

    /// (D) per-engine scheduling point: demote, promote, form the batch,
    /// preempt residents that fell out, admit newcomers, fix residency order.
    fn schedule_engine(&mut self, e: usize) -> Result<(), SimError> {
        for (h, from_q, to_q) in self.scheds[e].demote_pass() {
            self.event(
                h.prog,
                h.call,
                EventKind::Demote {
                    engine: e,
                    from_q,
                    to_q,
                },
            );
        }
        for (h, from_q) in self.scheds[e].starvation_pass(&self.table)? {
            self.event(h.prog, h.call, EventKind::Promote { engine: e, from_q });
        }
        self.scheds[e].refresh_srpt(&self.table)?;
        let directive = {
            let engine = &self.engines[e];
            let cfg = &engine.cfg;
            let progs = &self.progs;
            let blocks_of = |h: CallHandle| {
                if let Some(r) = engine.resident().iter().find(|r| r.handle == h) {
                    r.blocks
                } else {
                    let p = &progs[h.prog];
                    let tokens = p.compiled.input_tokens[h.call] + p.calls[h.call].attained_decode;
                    engine.blocks_for_tokens(tokens)
                }
            };
            let is_resident = |h: CallHandle| engine.is_resident(h);
            self.scheds[e].form_batch(
                cfg.max_batch_size,
                cfg.overprovision,
                cfg.kv_capacity_blocks,
                blocks_of,
                is_resident,
            )
        };
        // preempt residents not selected
        for h in self.engines[e].resident_handles() {
            if !directive.contains(&h) {
                let (rc, swap_time) = self.engines[e].preempt(h).map_err(engine_err)?;
                self.note_preempt(e, rc, swap_time, false);
            }
        }
        // admit selected calls not yet resident, in directive order
        for &h in &directive {
            if self.engines[e].is_resident(h) {
                continue;
            }
            let (input, decode_total, sys_prompt) = {
                let p = &self.progs[h.prog];
                (
                    p.compiled.input_tokens[h.call],
                    p.compiled.spec.calls[h.call].decode_tokens,
                    p.compiled.spec.system_prompt_tokens,
                )
            };
            let (attained, swapped, first) = {
                let cs = &self.progs[h.prog].calls[h.call];
                let qc = self.scheds[e].get(h).expect("directive call queued");
                (cs.attained_decode, qc.swapped, cs.first_admit.is_none())
            };
            let info = self.engines[e]
                .admit(h, input, decode_total, attained, swapped, sys_prompt, self.tick)
                .map_err(engine_err)?;
            if let Some(qc) = self.scheds[e].get_mut(h) {
                qc.swapped = false;
            }
            {
                let p = &mut self.progs[h.prog];
                p.runtime.states[h.call] = CallState::Running;
                if first {
                    let prior = p.last_completed_engine;
                    let cs = &mut p.calls[h.call];
                    cs.first_admit = Some(self.clock);
                    cs.cached_tokens = info.cached_tokens;
                    cs.prefill_cost = info.prefill_cost;
                    cs.prior_engine = prior;
                }
            }
            self.gantt.close(h, self.tick); // end a preempted-gap row if open
            self.event(
                h.prog,
                h.call,
                EventKind::Admit {
                    engine: e,
                    cached_tokens: info.cached_tokens,
                    prefill_ticks: info.prefill_ticks,
                    resumed: !first,
                },
            );
        }
        self.engines[e].reorder(&directive);
        Ok(())
    }

    /// `ran_this_tick` distinguishes scheduling-point preemptions (the call
    /// last ran in the previous tick) from forced mid-tick evictions.
    fn note_preempt(&mut self, e: usize, rc: ResidentCall, swap_time: f64, forced: bool) {
        let h = rc.handle;
        let seg_tick = self.tick + u64::from(forced);
        {
            let p = &mut self.progs[h.prog];
            p.calls[h.call].attained_decode = rc.decode_done;
            p.calls[h.call].preemptions += 1;
            p.runtime.states[h.call] = CallState::Preempted;
            p.runtime.attained_decode[h.call] = rc.decode_done;
        }
        if let Some(qc) = self.scheds[e].get_mut(h) {
            qc.swapped = true;
        }
        self.gantt.close(h, seg_tick);
        self.gantt.note(h, e, Segment::Preempted, seg_tick);
        self.event(
            h.prog,
            h.call,
            EventKind::Preempt {
                engine: e,
                blocks: rc.blocks,
                swap_time,
                forced,
            },
        );
    }

    /// (E) lockstep decode step on every engine. Returns the tick duration.
    fn decode_step(&mut self) -> Result<f64, SimError> {
        let mut dt = self.step;
        for e in 0..self.engines.len() {
            let out = self.engines[e].tick(self.tick).map_err(engine_err)?;
            dt = out.dt;
            let mut running: BTreeSet<CallHandle> = BTreeSet::new();
            for &(h, phase) in &out.active {
                running.insert(h);
                let seg = match phase {
                    Phase::Decode => Segment::Decode,
                    Phase::Prefill | Phase::Restore => Segment::Prefill,
                };
                self.gantt.note(h, e, seg, self.tick);
                if phase == Phase::Decode {
                    self.progs[h.prog].calls[h.call].attained_decode += 1;
                    self.progs[h.prog].runtime.attained_decode[h.call] += 1;
                }
            }
            for (rc, swap_time) in out.forced_preempts {
                self.note_preempt(e, rc, swap_time, true);
            }
            for h in out.completed {
                self.completion_buf.push((e, h));
            }
            self.scheds[e].tick_accounting(&running, out.dt, &mut self.table)?;
        }
        Ok(dt)
    }

    fn audit_tick(&mut self) -> Result<(), SimError> {
        for (i, eng) in self.engines.iter().enumerate() {
            if eng.batch_len() > eng.cfg.max_batch_size {
                return Err(SimError::Audit(format!(
                    "engine {i} batch exceeds max_batch_size"
                )));
            }
            if let Some(cap) = eng.cfg.kv_capacity_blocks {
                if eng.kv_in_use() > cap {
                    return Err(SimError::Audit(format!(
                        "engine {i} KV usage {} over capacity {cap}",
                        eng.kv_in_use()
                    )));
                }
            }
        }
        for (prog, p) in self.progs.iter().enumerate() {
            if let Ok(e) = self.table.get(prog) {
                if e.service + 1e-12 < self.audit_prev_service[prog] {
                    return Err(SimError::Audit(format!("program {prog} service decreased")));
                }
                self.audit_prev_service[prog] = e.service;
                let active = p
                    .runtime
                    .states
                    .iter()
                    .filter(|s| {
                        matches!(
                            s,
                            CallState::Queued | CallState::Running | CallState::Preempted
                        )
                    })
                    .count();
                if e.threads.len() != active {
                    return Err(SimError::Audit(format!(
                        "program {prog} thread metadata out of sync"
                    )));
                }
            }
        }
        let in_flight = self
            .progs
            .iter()
            .filter(|p| p.arrived && !p.runtime.is_done())
            .count();
        if self.table.len() != in_flight {
            return Err(SimError::Audit(format!(
                "table holds {} sessions, {} programs in flight",
                self.table.len(),
                in_flight
            )));
        }
        Ok(())
    }

    fn audit_final(&self) -> Result<(), SimError> {
        // accounting identity per chain program; conservation per call
        for o in &self.outcomes {
            if o.is_chain {
                let lhs = o.response_time;
                let rhs = o.total_wait + o.total_exec + o.total_interrupt;
                if (lhs - rhs).abs() > 1e-6 * lhs.abs().max(1.0) {
                    return Err(SimError::Audit(format!(
                        "program {} response {lhs} != wait+exec+interrupt {rhs}",
                        o.program_id
                    )));
                }
            }
        }
        for c in &self.call_outcomes {
            let floor = c.decode_tokens as f64 * self.step;
            if c.exec + 1e-9 < floor {
                return Err(SimError::Audit(format!(
                    "call {}/{} exec {} below decode floor {floor}",
                    c.program_id, c.call_id, c.exec
                )));
            }
        }
        // causality: ready -> route -> enqueue -> admit -> completion
        let mut stage: std::collections::BTreeMap<(usize, usize), u8> =
            std::collections::BTreeMap::new();
        for ev in &self.events {
            let key = (ev.prog, ev.call);
            let prev = stage.get(&key).copied().unwrap_or(0);
            let cur = match ev.kind {
                EventKind::Ready => 1,
                EventKind::Route { .. } => 2,
                EventKind::Enqueue { .. } => 3,
                EventKind::Admit { .. } => 4,
                EventKind::CompleteCall { .. } => 5,
                _ => continue,
            };
            let ok = match cur {
                1 => prev == 0,
                5 => prev == 4,
                4 => prev == 3 || prev == 4,
                _ => cur == prev + 1,
            };
            if !ok {
                return Err(SimError::Audit(format!(
                    "event order violation for {key:?}: {prev} -> {cur}"
                )));
            }
            stage.insert(key, cur);
        }
        Ok(())
    }
}

/// Simulates the given programs under the configuration. The workload
/// section of `cfg` is ignored; the caller provides the trace.
pub fn run_programs(
    cfg: &SimConfig,
    mut specs: Vec<ProgramSpec>,
) -> Result<(EventLog, RunReport), SimError> {
    cfg.validate().map_err(SimError::Config)?;
    if cfg.mode == Mode::OfflineBatch {
        for s in &mut specs {
            s.arrival_time = 0.0;
        }
    }
    // deterministic program order: (arrival_time, program_id)
    specs.sort_by(|a, b| {
        a.arrival_time
            .total_cmp(&b.arrival_time)
            .then_with(|| a.program_id.cmp(&b.program_id))
    });
    let mut progs = Vec::with_capacity(specs.len());
    for spec in specs {
        let arrival = spec.arrival_time;
        let compiled = CompiledProgram::new(spec)?;
        let runtime = ProgramRuntime::new(&compiled, arrival);
        let n = compiled.n_calls();
        progs.push(ProgSim {
            compiled,
            runtime,
            calls: vec![CallSim::new(); n],
            arrived: false,
            last_completed_engine: None,
            wait_sum: 0.0,
            exec_sum: 0.0,
            interrupt_sum: 0.0,
        });
    }
    let engine_cfg = cfg.engine_config();
    engine_cfg.validate().map_err(SimError::Engine)?;
    if engine_cfg.step_time_per_batch_entry > 0.0 && cfg.engine.count > 1 {
        return Err(SimError::Config(
            "affine step time requires a single engine (engines tick in lockstep)".into(),
        ));
    }
    let policy = cfg.scheduler.policy;
    let queue_cfg = cfg.queue_config();
    let n_engines = cfg.engine.count;
    let affine = engine_cfg.step_time_per_batch_entry > 0.0;
    let n_progs = progs.len();
    let mut sim = Sim {
        step: engine_cfg.decode_step_time,
        policy,
        audit: cfg.audit,
        progs,
        table: ProcessTable::default(),
        scheds: (0..n_engines)
            .map(|_| EngineSched::new(policy, queue_cfg.clone()))
            .collect::<Result<_, _>>()?,
        engines: (0..n_engines)
            .map(|i| EngineState::new(i, engine_cfg.clone()))
            .collect(),
        balancer: Balancer::new(cfg.balancer.clone())?,
        events: Vec::new(),
        gantt: GanttRecorder::default(),
        routes: Vec::new(),
        outcomes: Vec::new(),
        call_outcomes: Vec::new(),
        pending_ready: BTreeSet::new(),
        next_arrival: 0,
        completed_programs: 0,
        tick: 0,
        clock: 0.0,
        completion_buf: Vec::new(),
        audit_prev_service: vec![0.0; n_progs],
    };
    let total = sim.progs.len();
    let horizon_ticks = cfg.horizon.max_ticks;
    let horizon_programs = cfg.horizon.max_programs;

    let mut affine_clock = 0.0f64;
    loop {
        sim.clock = if affine {
            affine_clock
        } else {
            sim.tick as f64 * sim.step
        };
        sim.process_completions()?;
        if sim.completed_programs == total {
            break;
        }
        if let Some(hp) = horizon_programs {
            if sim.completed_programs as u64 >= hp {
                break;
            }
        }
        if sim.tick >= horizon_ticks {
            break;
        }
        sim.process_arrivals();
        sim.process_ready()?;
        if sim.tick % engine_cfg.multistep_n == 0 {
            for e in 0..n_engines {
                sim.schedule_engine(e)?;
            }
        }
        let dt = sim.decode_step()?;
        if sim.audit {
            sim.audit_tick()?;
        }
        affine_clock += dt;
        sim.tick += 1;
        // skip idle stretches: nothing resident, nothing queued
        if !affine && sim.scheds.iter().all(|s| s.active_calls() == 0) {
            let next_ready = sim.pending_ready.iter().next().map(|&(t, ..)| t);
            let next_arrival = sim
                .progs
                .get(sim.next_arrival)
                .map(|p| boundary(sim.step, p.compiled.spec.arrival_time));
            if let Some(next) = [next_ready, next_arrival].into_iter().flatten().min() {
                sim.tick = sim.tick.max(next);
            }
        }
    }
    if sim.audit {
        sim.audit_final()?;
    }

    // assemble outputs
    let program_ids: Vec<String> = sim
        .progs
        .iter()
        .map(|p| p.compiled.spec.program_id.clone())
        .collect();
    let call_ids: Vec<Vec<String>> = sim
        .progs
        .iter()
        .map(|p| {
            p.compiled
                .spec
                .calls
                .iter()
                .map(|c| c.call_id.clone())
                .collect()
        })
        .collect();
    let mut recorder = sim.gantt;
    let final_tick = sim.tick;
    let open_handles: Vec<CallHandle> = recorder.open.keys().copied().collect();
    for h in open_handles {
        recorder.close(h, final_tick);
    }
    let mut gantt_rows: Vec<GanttRow> = recorder
        .rows
        .into_iter()
        .map(|(h, engine, start, end, seg)| GanttRow {
            call_id: call_ids[h.prog][h.call].clone(),
            program_id: program_ids[h.prog].clone(),
            engine,
            start_tick: start,
            end_tick: end,
            segment: seg,
        })
        .collect();
    gantt_rows.sort_by(|a, b| {
        (a.start_tick, &a.program_id, &a.call_id, a.end_tick).cmp(&(
            b.start_tick,
            &b.program_id,
            &b.call_id,
            b.end_tick,
        ))
    });
    let report = RunReport::assemble(
        policy.name().to_string(),
        cfg.seed,
        sim.tick,
        total,
        sim.outcomes,
        sim.call_outcomes,
        sim.engines.iter().map(|e| e.ledger.clone()).collect(),
        gantt_rows,
        sim.routes,
    );
    let log = EventLog {
        program_ids,
        call_ids,
        events: sim.events,
    };
    Ok((log, report))
}

/// Resolves the configured workload (trace file, preset, or inline
/// programs) and simulates it.
pub fn run(cfg: &SimConfig) -> Result<(EventLog, RunReport), SimError> {
    let programs = cfg.resolve_workload()?;
    run_programs(cfg, programs)
}

/// One sweep row: latency statistics for a (lambda, policy) cell aggregated
/// over repetitions on paired traces.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub policy: String,
    pub reps: usize,
    pub mean_token_latency: f64,
    pub p95_token_latency: f64,
    pub p99_token_latency: f64,
    pub completed: usize,
}

/// Derived seed for (base, lambda index, repetition): splitmix64 over the
/// packed inputs, so sweep cells are reproducible independently.
pub fn derived_seed(base: u64, lambda_idx: usize, rep: usize) -> u64 {
    let mut z = base
        .wrapping_add((lambda_idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((rep as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs every (lambda, policy) cell `reps` times on paired traces and
/// aggregates mean/P95/P99 program token latency.
pub fn sweep(
    base: &SimConfig,
    lambdas: &[f64],
    reps: usize,
    policies: &[Policy],
) -> Result<Vec<SweepRow>, SimError> {
    let mut rows = Vec::new();
    for (li, &lambda) in lambdas.iter().enumerate() {
        let mut per_policy: Vec<(f64, f64, f64, usize)> = vec![(0.0, 0.0, 0.0, 0); policies.len()];
        for rep in 0..reps {
            let seed = derived_seed(base.seed, li, rep);
            let mut cell = base.clone();
            cell.seed = seed;
            cell.workload.arrival_rate = Some(lambda);
            let programs = cell.resolve_workload()?;
            for (pi, &policy) in policies.iter().enumerate() {
                let mut run_cfg = cell.clone();
                run_cfg.scheduler.policy = policy;
                let (_, report) = run_programs(&run_cfg, programs.clone())?;
                per_policy[pi].0 += report.mean_token_latency;
                per_policy[pi].1 += report.p95_token_latency;
                per_policy[pi].2 += report.p99_token_latency;
                per_policy[pi].3 += report.completed_programs;
            }
        }
        if reps == 0 {
            continue;
        }
        for (pi, &policy) in policies.iter().enumerate() {
            let (m, p95, p99, comp) = per_policy[pi];
            rows.push(SweepRow {
                lambda,
                policy: policy.name().to_string(),
                reps,
                mean_token_latency: m / reps as f64,
                p95_token_latency: p95 / reps as f64,
                p99_token_latency: p99 / reps as f64,
                completed: comp / reps,
            });
        }
    }
    Ok(rows)
}

/// Generates `count` programs from a preset mixture with Poisson arrivals,
/// the way `SimConfig::resolve_workload` does it.
pub fn generate_workload(
    mixture: &[crate::gen::WorkloadParams],
    count: usize,
    arrival_rate: f64,
    seed: u64,
    online: bool,
) -> Result<Vec<ProgramSpec>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arrivals = if online {
        crate::gen::gen_arrivals(arrival_rate, count, &mut rng)?
    } else {
        vec![0.0; count]
    };
    let width = count.to_string().len().max(5);
    let mut out = Vec::with_capacity(count);
    for (i, &at) in arrivals.iter().enumerate() {
        let id = format!("p{i:0width$}");
        out.push(crate::gen::gen_from_mixture(mixture, &mut rng, id, at)?);
    }
    Ok(out)
}
