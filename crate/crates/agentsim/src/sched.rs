//! The process table and scheduling policies.
//!
//! Every active call lives in one of K priority-banded FIFO queues on its
//! engine (running calls included; the batch is a prefix view, recomputed at
//! each scheduling point). Policies differ in the priority a call fetches on
//! arrival and in how a completed call updates its program's table entry:
//!
//! - `fcfs`: single queue, infinite quantum, arrival order.
//! - `mlfq`: every call enters the top queue; quantum demotion; per-call
//!   wait-threshold promotion.
//! - `plas`: priority = program's summed completed service (larger = lower
//!   priority); banded queues; program-level anti-starvation.
//! - `atlas`: like `plas` but the table keeps a single scalar, the longest
//!   observed critical path: max(scalar, inherited + exec) on completion.
//! - `atlas_exact`: reference mode; priority is recomputed from the call's
//!   true parents instead of the scalar, for differential testing.
//! - `srpt`: clairvoyant oracle; priority = the program's true remaining
//!   decode work, re-sorted at every scheduling point.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::CallHandle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Fcfs,
    Mlfq,
    Plas,
    Atlas,
    AtlasExact,
    Srpt,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Fcfs => "fcfs",
            Policy::Mlfq => "mlfq",
            Policy::Plas => "plas",
            Policy::Atlas => "atlas",
            Policy::AtlasExact => "atlas_exact",
            Policy::Srpt => "srpt",
        }
    }

    /// Whether arriving calls are banded by program priority (rather than
    /// always entering the top queue).
    pub fn banded(self) -> bool {
        matches!(self, Policy::Plas | Policy::Atlas | Policy::AtlasExact)
    }

    /// Whether the table keeps max-critical-path semantics (vs. summed).
    pub fn critical_path_table(self) -> bool {
        matches!(self, Policy::Atlas | Policy::AtlasExact)
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("unknown policy {0:?} (expected fcfs|mlfq|plas|atlas|atlas_exact|srpt)")]
pub struct UnknownPolicy(pub String);

impl FromStr for Policy {
    type Err = UnknownPolicy;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fcfs" => Ok(Policy::Fcfs),
            "mlfq" => Ok(Policy::Mlfq),
            "plas" => Ok(Policy::Plas),
            "atlas" => Ok(Policy::Atlas),
            "atlas_exact" => Ok(Policy::AtlasExact),
            "srpt" | "srpt_oracle" => Ok(Policy::Srpt),
            other => Err(UnknownPolicy(other.to_string())),
        }
    }
}

/// Discretized queue levels: K bands over [0, inf) plus per-level quanta.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueConfig {
    /// Ascending upper bounds of the first K-1 levels; the last level is
    /// unbounded. Empty = a single queue.
    pub boundaries: Vec<f64>,
    /// Per-level execution quanta, length K. `f64::INFINITY` disables
    /// demotion at that level.
    pub quanta: Vec<f64>,
    /// Program-level anti-starvation threshold on wait/service.
    pub beta: f64,
    /// Per-call promotion threshold for the MLFQ baseline.
    pub mlfq_wait_threshold: f64,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self::banded(8, 2.0, 4.0, 2.0)
    }
}

impl QueueConfig {
    /// K exponentially growing bands: level i covers [base*g^(i-1), base*g^i)
    /// with quantum = band width; the last band is unbounded with a large
    /// quantum.
    pub fn banded(k: usize, base: f64, growth: f64, beta: f64) -> Self {
        assert!(k >= 1);
        let mut boundaries = Vec::new();
        let mut quanta = Vec::new();
        let mut lo = 0.0;
        for i in 0..k - 1 {
            let hi = base * growth.powi(i as i32);
            boundaries.push(hi);
            quanta.push(hi - lo);
            lo = hi;
        }
        quanta.push(1e12);
        Self {
            boundaries,
            quanta,
            beta,
            mlfq_wait_threshold: f64::INFINITY,
        }
    }

    /// K levels with geometric quanta base*growth^i (not band widths);
    /// boundaries follow the same ladder. The MLFQ baseline uses this.
    pub fn ladder(k: usize, base: f64, growth: f64) -> Self {
        assert!(k >= 1);
        let boundaries: Vec<f64> = (0..k - 1).map(|i| base * growth.powi(i as i32)).collect();
        let quanta: Vec<f64> = (0..k).map(|i| base * growth.powi(i as i32)).collect();
        Self {
            boundaries,
            quanta,
            beta: f64::INFINITY,
            mlfq_wait_threshold: f64::INFINITY,
        }
    }

    /// One queue, no demotion, no promotion.
    pub fn single() -> Self {
        Self {
            boundaries: Vec::new(),
            quanta: vec![f64::INFINITY],
            beta: f64::INFINITY,
            mlfq_wait_threshold: f64::INFINITY,
        }
    }

    /// The pinned Fig. 2 golden configuration for PLAS/ATLAS: default bands
    /// (base 2, growth 4, width quanta) with beta = 3.0.
    pub fn fig2_program_policy() -> Self {
        QueueConfig {
            beta: 3.0,
            ..Self::banded(8, 2.0, 4.0, 3.0)
        }
    }

    /// The pinned Fig. 2 golden configuration for the MLFQ baseline:
    /// quanta 1, 4, 16, ... with per-call promotion after 4 waited units.
    pub fn fig2_mlfq() -> Self {
        let mut cfg = Self::ladder(8, 1.0, 4.0);
        cfg.mlfq_wait_threshold = 4.0;
        cfg
    }

    pub fn levels(&self) -> usize {
        self.quanta.len()
    }

    pub fn level_for(&self, priority: f64) -> usize {
        self.boundaries
            .iter()
            .position(|&hi| priority < hi)
            .unwrap_or(self.boundaries.len())
    }

    pub fn validate(&self) -> Result<(), SchedError> {
        if self.quanta.len() != self.boundaries.len() + 1 {
            return Err(SchedError::BadConfig(
                "quanta length must be boundaries length + 1".into(),
            ));
        }
        if self
            .boundaries
            .windows(2)
            .any(|w| w[0] >= w[1] || w[0] <= 0.0)
            || self.boundaries.first().is_some_and(|&b| b <= 0.0)
        {
            return Err(SchedError::BadConfig(
                "boundaries must be positive and ascending".into(),
            ));
        }
        if self.quanta.iter().any(|&q| q <= 0.0) {
            return Err(SchedError::BadConfig("quanta must be positive".into()));
        }
        if self.beta <= 0.0 {
            return Err(SchedError::BadConfig("beta must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SchedError {
    #[error("invalid queue config: {0}")]
    BadConfig(String),
    #[error("program {prog} has no process table entry")]
    MissingEntry { prog: usize },
    #[error("call {handle:?} not queued")]
    NotQueued { handle: CallHandle },
}

/// Per-thread (active call) metadata in a program's table entry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThreadMeta {
    pub arrival: f64,
    pub wait: f64,
    pub service: f64,
}

/// One program's entry in the global process table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProcessEntry {
    /// Summed completed service (PLAS) or longest observed critical path
    /// (ATLAS). Monotone non-decreasing.
    pub service: f64,
    /// Accumulated program-level waiting across this program's calls.
    pub wait: f64,
    pub pinned_engine: Option<usize>,
    pub engines: BTreeSet<usize>,
    pub threads: BTreeMap<usize, ThreadMeta>,
    pub last_call_arrival: f64,
    pub last_call_completion: f64,
    /// Remaining true decode steps over unfinished calls (clairvoyant).
    pub remaining_decode_tokens: u64,
    /// Completed calls' (inherited priority + execution time), by call index;
    /// feeds the exact parent-max priority mode.
    pub completed_prio: BTreeMap<usize, f64>,
}

/// Session-keyed program state shared by all engine schedulers and the
/// load balancer. Entries exist exactly while a program is in flight.
#[derive(Clone, Debug, Default)]
pub struct ProcessTable {
    entries: BTreeMap<usize, ProcessEntry>,
}

impl ProcessTable {
    pub fn start_session(&mut self, prog: usize, now: f64, total_decode_tokens: u64) {
        let prev = self.entries.insert(
            prog,
            ProcessEntry {
                service: 0.0,
                wait: 0.0,
                pinned_engine: None,
                engines: BTreeSet::new(),
                threads: BTreeMap::new(),
                last_call_arrival: now,
                last_call_completion: now,
                remaining_decode_tokens: total_decode_tokens,
                completed_prio: BTreeMap::new(),
            },
        );
        debug_assert!(prev.is_none(), "duplicate session for program {prog}");
    }

    pub fn end_session(&mut self, prog: usize) {
        let e = self.entries.remove(&prog);
        debug_assert!(e.is_some(), "ending unknown session {prog}");
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, prog: usize) -> Result<&ProcessEntry, SchedError> {
        self.entries
            .get(&prog)
            .ok_or(SchedError::MissingEntry { prog })
    }

    pub fn get_mut(&mut self, prog: usize) -> Result<&mut ProcessEntry, SchedError> {
        self.entries
            .get_mut(&prog)
            .ok_or(SchedError::MissingEntry { prog })
    }

    /// Table update on call completion. `inherited` is the priority the call
    /// fetched at arrival; `exec_time` its full execution time (prefill,
    /// restore and decode ticks).
    pub fn update_on_completion(
        &mut self,
        policy: Policy,
        handle: CallHandle,
        inherited: f64,
        exec_time: f64,
        decode_tokens: u64,
        now: f64,
    ) -> Result<(), SchedError> {
        let e = self.get_mut(handle.prog)?;
        if policy.critical_path_table() {
            e.service = e.service.max(inherited + exec_time);
        } else {
            e.service += exec_time;
        }
        e.completed_prio.insert(handle.call, inherited + exec_time);
        e.remaining_decode_tokens = e.remaining_decode_tokens.saturating_sub(decode_tokens);
        e.last_call_completion = now;
        e.threads.remove(&handle.call);
        Ok(())
    }
}

/// One call queued (or running) on an engine.
#[derive(Clone, Debug)]
pub struct QueuedCall {
    pub handle: CallHandle,
    /// Priority fetched at arrival; inherited into the table update.
    pub priority: f64,
    pub q_idx: usize,
    pub quanta_left: f64,
    /// Call-level waiting, reset on promotion.
    pub wait: f64,
    /// Call-level attained execution, reset on promotion.
    pub model_time: f64,
    /// Full attained execution; never reset.
    pub total_exec: f64,
    /// Full queued-not-running time; never reset. The worked examples'
    /// waiting-time metric sums this over calls.
    pub total_wait: f64,
    pub enqueue_seq: u64,
    pub enqueue_time: f64,
    pub ready_time: f64,
    pub running: bool,
    /// KV currently swapped out to the host (re-admission must swap in).
    pub swapped: bool,
    /// Sort key for the clairvoyant policy, refreshed at scheduling points.
    srpt_key: f64,
}

/// Per-engine scheduler state: K FIFO queues holding every active call
/// assigned to this engine.
#[derive(Clone, Debug)]
pub struct EngineSched {
    pub policy: Policy,
    pub cfg: QueueConfig,
    queues: Vec<VecDeque<QueuedCall>>,
    seq: u64,
}

impl EngineSched {
    pub fn new(policy: Policy, cfg: QueueConfig) -> Result<Self, SchedError> {
        cfg.validate()?;
        let queues = (0..cfg.levels()).map(|_| VecDeque::new()).collect();
        Ok(Self {
            policy,
            cfg,
            queues,
            seq: 0,
        })
    }

    pub fn active_calls(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueuedCall> {
        self.queues.iter().flatten()
    }

    fn find(&mut self, handle: CallHandle) -> Option<(usize, usize)> {
        for (qi, q) in self.queues.iter().enumerate() {
            if let Some(pos) = q.iter().position(|c| c.handle == handle) {
                return Some((qi, pos));
            }
        }
        None
    }

    /// Enqueues a ready call with the given fetched priority; returns the
    /// chosen level. Also registers the thread in the process table.
    pub fn on_arrival(
        &mut self,
        handle: CallHandle,
        priority: f64,
        ready_time: f64,
        now: f64,
        table: &mut ProcessTable,
    ) -> Result<usize, SchedError> {
        let q_idx = if self.policy.banded() {
            self.cfg.level_for(priority)
        } else {
            0
        };
        let quanta = self.cfg.quanta[q_idx];
        self.queues[q_idx].push_back(QueuedCall {
            handle,
            priority,
            q_idx,
            quanta_left: quanta,
            wait: 0.0,
            model_time: 0.0,
            total_exec: 0.0,
            total_wait: 0.0,
            enqueue_seq: self.seq,
            enqueue_time: now,
            ready_time,
            running: false,
            swapped: false,
            srpt_key: priority,
        });
        self.seq += 1;
        let e = table.get_mut(handle.prog)?;
        e.threads.insert(
            handle.call,
            ThreadMeta {
                arrival: now,
                wait: 0.0,
                service: 0.0,
            },
        );
        e.last_call_arrival = now;
        Ok(q_idx)
    }

    /// Moves quantum-exhausted calls one level down (clamped at the bottom,
    /// where the quantum refreshes). Returns (handle, from, to) per demotion.
    pub fn demote_pass(&mut self) -> Vec<(CallHandle, usize, usize)> {
        let k = self.cfg.levels();
        let mut moves = Vec::new();
        for qi in 0..k {
            let mut kept = VecDeque::with_capacity(self.queues[qi].len());
            while let Some(mut c) = self.queues[qi].pop_front() {
                if c.quanta_left <= 0.0 {
                    let to = (qi + 1).min(k - 1);
                    c.q_idx = to;
                    c.quanta_left = self.cfg.quanta[to];
                    moves.push((c.handle, qi, to));
                    if to == qi {
                        kept.push_back(c);
                    } else {
                        self.queues[to].push_back(c);
                    }
                } else {
                    kept.push_back(c);
                }
            }
            self.queues[qi] = kept;
        }
        moves
    }

    /// Promotes starved calls to the top queue and resets their call-local
    /// counters. Program policies use the table ratio (W_p + W_c)/(T_p + T_c)
    /// against beta (0/0 counts as 0); the MLFQ baseline promotes on the
    /// call's own wait crossing its threshold.
    pub fn starvation_pass(
        &mut self,
        table: &ProcessTable,
    ) -> Result<Vec<(CallHandle, usize)>, SchedError> {
        let mut promoted = Vec::new();
        match self.policy {
            Policy::Plas | Policy::Atlas | Policy::AtlasExact => {
                if self.cfg.beta.is_finite() {
                    let mut picks = Vec::new();
                    for (qi, q) in self.queues.iter().enumerate().skip(1) {
                        for c in q {
                            let e = table.get(c.handle.prog)?;
                            let w = e.wait + c.wait;
                            let t = e.service + c.model_time;
                            let starved = if t > 0.0 { w / t >= self.cfg.beta } else { w > 0.0 };
                            if starved {
                                picks.push((c.handle, qi));
                            }
                        }
                    }
                    promoted = picks;
                }
            }
            Policy::Mlfq => {
                if self.cfg.mlfq_wait_threshold.is_finite() {
                    for (qi, q) in self.queues.iter().enumerate().skip(1) {
                        for c in q {
                            if c.wait >= self.cfg.mlfq_wait_threshold {
                                promoted.push((c.handle, qi));
                            }
                        }
                    }
                }
            }
            Policy::Fcfs | Policy::Srpt => {}
        }
        for &(handle, qi) in &promoted {
            let pos = self.queues[qi]
                .iter()
                .position(|c| c.handle == handle)
                .unwrap();
            let mut c = self.queues[qi].remove(pos).unwrap();
            c.q_idx = 0;
            c.quanta_left = self.cfg.quanta[0];
            c.wait = 0.0;
            c.model_time = 0.0;
            self.queues[0].push_back(c);
        }
        Ok(promoted)
    }

    /// Re-sorts the clairvoyant queue by true remaining program work.
    pub fn refresh_srpt(&mut self, table: &ProcessTable) -> Result<(), SchedError> {
        if self.policy != Policy::Srpt {
            return Ok(());
        }
        for q in &mut self.queues {
            for c in q.iter_mut() {
                c.srpt_key = table.get(c.handle.prog)?.remaining_decode_tokens as f64;
            }
            q.make_contiguous()
                .sort_by(|a, b| a.srpt_key.total_cmp(&b.srpt_key).then(a.enqueue_seq.cmp(&b.enqueue_seq)));
        }
        Ok(())
    }

    /// Forms the next batch: queues in level order, FIFO within a level,
    /// greedily while the engine can fit each call, stopping at the first
    /// call that does not fit. Up to `overprovision` additional
    /// already-resident calls are retained behind the batch.
    pub fn form_batch(
        &self,
        max_batch: usize,
        overprovision: usize,
        kv_capacity: Option<u64>,
        blocks_of: impl Fn(CallHandle) -> u64,
        is_resident: impl Fn(CallHandle) -> bool,
    ) -> Vec<CallHandle> {
        let mut out = Vec::new();
        let mut blocks_total: u64 = 0;
        let fits = |total: u64, need: u64| match kv_capacity {
            None => true,
            Some(cap) => total + need <= cap,
        };
        'outer: for q in &self.queues {
            for c in q {
                if out.len() >= max_batch {
                    break 'outer;
                }
                let need = blocks_of(c.handle);
                if !fits(blocks_total, need) {
                    break 'outer;
                }
                blocks_total += need;
                out.push(c.handle);
            }
        }
        if overprovision > 0 {
            let mut extras = 0;
            for q in &self.queues {
                for c in q {
                    if extras >= overprovision {
                        break;
                    }
                    if out.contains(&c.handle) || !is_resident(c.handle) {
                        continue;
                    }
                    let need = blocks_of(c.handle);
                    if fits(blocks_total, need) {
                        blocks_total += need;
                        out.push(c.handle);
                        extras += 1;
                    }
                }
            }
        }
        out
    }

    /// Marks which calls are running and accumulates wait/service for one
    /// tick of length `dt`. Waiting time also accrues to the program entry.
    pub fn tick_accounting(
        &mut self,
        running: &BTreeSet<CallHandle>,
        dt: f64,
        table: &mut ProcessTable,
    ) -> Result<(), SchedError> {
        for q in &mut self.queues {
            for c in q.iter_mut() {
                c.running = running.contains(&c.handle);
                let e = table.get_mut(c.handle.prog)?;
                let meta = e.threads.entry(c.handle.call).or_default();
                if c.running {
                    c.model_time += dt;
                    c.total_exec += dt;
                    c.quanta_left -= dt;
                    meta.service += dt;
                } else {
                    c.wait += dt;
                    c.total_wait += dt;
                    e.wait += dt;
                    meta.wait += dt;
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, handle: CallHandle) -> Option<&QueuedCall> {
        self.queues
            .iter()
            .flatten()
            .find(|c| c.handle == handle)
    }

    pub fn get_mut(&mut self, handle: CallHandle) -> Option<&mut QueuedCall> {
        self.queues
            .iter_mut()
            .flatten()
            .find(|c| c.handle == handle)
    }

    /// Removes a completed call from its queue.
    pub fn remove(&mut self, handle: CallHandle) -> Result<QueuedCall, SchedError> {
        let (qi, pos) = self
            .find(handle)
            .ok_or(SchedError::NotQueued { handle })?;
        Ok(self.queues[qi].remove(pos).unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(prog: usize, call: usize) -> CallHandle {
        CallHandle { prog, call }
    }

    fn table_with(progs: &[usize]) -> ProcessTable {
        let mut t = ProcessTable::default();
        for &p in progs {
            t.start_session(p, 0.0, 100);
        }
        t
    }

    #[test]
    fn level_selection_matches_bands() {
        let cfg = QueueConfig::banded(3, 2.0, 4.0, 2.0);
        assert_eq!(cfg.boundaries, vec![2.0, 8.0]);
        assert_eq!(cfg.level_for(0.0), 0);
        assert_eq!(cfg.level_for(1.99), 0);
        assert_eq!(cfg.level_for(2.0), 1);
        assert_eq!(cfg.level_for(5.0), 1);
        assert_eq!(cfg.level_for(8.0), 2);
        assert_eq!(cfg.level_for(1e9), 2);
    }

    #[test]
    fn plas_priority_is_summed_service() {
        // first call of a new program has priority 0 (empty sum)
        let mut t = table_with(&[0]);
        assert_eq!(t.get(0).unwrap().service, 0.0);
        // Fig. 2 program A: after call 1 ran 4 idealized steps, priority 4
        t.update_on_completion(Policy::Plas, h(0, 0), 0.0, 4.0, 4, 4.0)
            .unwrap();
        assert_eq!(t.get(0).unwrap().service, 4.0);
        // completed calls of durations {3,3} sum to 6 more
        t.update_on_completion(Policy::Plas, h(0, 1), 4.0, 3.0, 3, 7.0)
            .unwrap();
        t.update_on_completion(Policy::Plas, h(0, 2), 7.0, 3.0, 3, 10.0)
            .unwrap();
        assert_eq!(t.get(0).unwrap().service, 10.0);
    }

    #[test]
    fn atlas_scalar_is_max_of_inherited_plus_exec() {
        let mut t = table_with(&[0]);
        // root completes: scalar = 0 + 3
        t.update_on_completion(Policy::Atlas, h(0, 0), 0.0, 3.0, 3, 3.0)
            .unwrap();
        // two parallel children inherit 3; execs 5 and 2
        t.update_on_completion(Policy::Atlas, h(0, 1), 3.0, 5.0, 5, 8.0)
            .unwrap();
        t.update_on_completion(Policy::Atlas, h(0, 2), 3.0, 2.0, 2, 10.0)
            .unwrap();
        // max(3+5, 3+2) = 8, not 3+5+2 = 10
        assert_eq!(t.get(0).unwrap().service, 8.0);
        // shorter completion cannot lower the scalar
        t.update_on_completion(Policy::Atlas, h(0, 3), 3.0, 2.0, 2, 11.0)
            .unwrap();
        assert_eq!(t.get(0).unwrap().service, 8.0);
        // a longer chain raises it
        t.update_on_completion(Policy::Atlas, h(0, 4), 8.0, 4.0, 4, 15.0)
            .unwrap();
        assert_eq!(t.get(0).unwrap().service, 12.0);
    }

    #[test]
    fn arrival_banding_and_fifo_order() {
        let mut t = table_with(&[0, 1, 2]);
        let mut s = EngineSched::new(Policy::Plas, QueueConfig::banded(3, 2.0, 4.0, 2.0)).unwrap();
        s.on_arrival(h(0, 0), 0.0, 0.0, 0.0, &mut t).unwrap();
        s.on_arrival(h(1, 0), 5.0, 0.0, 0.0, &mut t).unwrap();
        s.on_arrival(h(2, 0), 0.5, 0.0, 0.0, &mut t).unwrap();
        assert_eq!(s.get(h(0, 0)).unwrap().q_idx, 0);
        assert_eq!(s.get(h(1, 0)).unwrap().q_idx, 1);
        assert_eq!(s.get(h(2, 0)).unwrap().q_idx, 0);
        // batch: level order, FIFO within level
        let batch = s.form_batch(2, 0, None, |_| 0, |_| false);
        assert_eq!(batch, vec![h(0, 0), h(2, 0)]);
    }

    #[test]
    fn quantum_exhaustion_demotes_and_clamps() {
        let mut t = table_with(&[0]);
        let mut s = EngineSched::new(Policy::Mlfq, QueueConfig::fig2_mlfq()).unwrap();
        s.on_arrival(h(0, 0), 0.0, 0.0, 0.0, &mut t).unwrap();
        // quantum 1 at the top level; one running tick exhausts it
        let running: BTreeSet<_> = [h(0, 0)].into();
        s.tick_accounting(&running, 1.0, &mut t).unwrap();
        let moves = s.demote_pass();
        assert_eq!(moves, vec![(h(0, 0), 0, 1)]);
        assert_eq!(s.get(h(0, 0)).unwrap().quanta_left, 4.0);
        // quantum 4 minus 3 ticks: stays
        s.tick_accounting(&running, 3.0, &mut t).unwrap();
        assert!(s.demote_pass().is_empty());
        // bottom level refreshes in place
        let mut s2 = EngineSched::new(
            Policy::Mlfq,
            QueueConfig {
                boundaries: vec![1.0],
                quanta: vec![1.0, 2.0],
                beta: f64::INFINITY,
                mlfq_wait_threshold: f64::INFINITY,
            },
        )
        .unwrap();
        s2.on_arrival(h(0, 0), 0.0, 0.0, 0.0, &mut t).unwrap();
        s2.tick_accounting(&running, 1.0, &mut t).unwrap();
        assert_eq!(s2.demote_pass(), vec![(h(0, 0), 0, 1)]);
        s2.tick_accounting(&running, 2.0, &mut t).unwrap();
        assert_eq!(s2.demote_pass(), vec![(h(0, 0), 1, 1)]);
        assert_eq!(s2.get(h(0, 0)).unwrap().quanta_left, 2.0);
    }

    #[test]
    fn starvation_ratio_promotes_and_resets() {
        let mut t = table_with(&[0]);
        let cfg = QueueConfig {
            boundaries: vec![2.0],
            quanta: vec![2.0, 100.0],
            beta: 2.0,
            mlfq_wait_threshold: f64::INFINITY,
        };
        let mut s = EngineSched::new(Policy::Plas, cfg).unwrap();
        s.on_arrival(h(0, 0), 4.0, 0.0, 0.0, &mut t).unwrap();
        assert_eq!(s.get(h(0, 0)).unwrap().q_idx, 1);
        // p.wait=9, c.wait=1, p.service=4, c.model_time=1 -> 10/5 = 2 >= beta
        t.get_mut(0).unwrap().wait = 9.0;
        t.get_mut(0).unwrap().service = 4.0;
        s.get_mut(h(0, 0)).unwrap().wait = 1.0;
        s.get_mut(h(0, 0)).unwrap().model_time = 1.0;
        let promos = s.starvation_pass(&t).unwrap();
        assert_eq!(promos, vec![(h(0, 0), 1)]);
        let c = s.get(h(0, 0)).unwrap();
        assert_eq!((c.q_idx, c.wait, c.model_time), (0, 0.0, 0.0));
    }

    #[test]
    fn starvation_zero_over_zero_is_not_starved() {
        let mut t = table_with(&[0]);
        let cfg = QueueConfig {
            boundaries: vec![0.5],
            quanta: vec![1.0, 100.0],
            beta: 2.0,
            mlfq_wait_threshold: f64::INFINITY,
        };
        let mut s = EngineSched::new(Policy::Plas, cfg).unwrap();
        s.on_arrival(h(0, 0), 1.0, 0.0, 0.0, &mut t).unwrap();
        assert_eq!(s.get(h(0, 0)).unwrap().q_idx, 1);
        assert!(s.starvation_pass(&t).unwrap().is_empty());
        // any positive wait over zero service counts as infinitely starved
        s.get_mut(h(0, 0)).unwrap().wait = 0.25;
        assert_eq!(s.starvation_pass(&t).unwrap().len(), 1);
    }

    #[test]
    fn beta_infinity_never_promotes() {
        let mut t = table_with(&[0]);
        let mut cfg = QueueConfig::default();
        cfg.beta = f64::INFINITY;
        let mut s = EngineSched::new(Policy::Plas, cfg).unwrap();
        s.on_arrival(h(0, 0), 100.0, 0.0, 0.0, &mut t).unwrap();
        t.get_mut(0).unwrap().wait = 1e12;
        assert!(s.starvation_pass(&t).unwrap().is_empty());
    }

    #[test]
    fn batch_breaks_at_first_non_fitting() {
        let mut t = table_with(&[0, 1, 2]);
        let mut s = EngineSched::new(Policy::Fcfs, QueueConfig::single()).unwrap();
        s.on_arrival(h(0, 0), 0.0, 0.0, 0.0, &mut t).unwrap();
        s.on_arrival(h(1, 0), 0.0, 0.0, 0.0, &mut t).unwrap();
        s.on_arrival(h(2, 0), 0.0, 0.0, 0.0, &mut t).unwrap();
        // call 1 needs 8 blocks and stops the scan even though call 2 fits
        let blocks = |hh: CallHandle| match hh.prog {
            0 => 2,
            1 => 8,
            _ => 1,
        };
        let batch = s.form_batch(3, 0, Some(4), blocks, |_| false);
        assert_eq!(batch, vec![h(0, 0)]);
    }

    #[test]
    fn cross_level_fill() {
        let mut t = table_with(&[0, 1, 2]);
        let mut s = EngineSched::new(Policy::Plas, QueueConfig::banded(2, 2.0, 4.0, 2.0)).unwrap();
        s.on_arrival(h(0, 0), 0.0, 0.0, 0.0, &mut t).unwrap();
        s.on_arrival(h(1, 0), 5.0, 0.0, 0.0, &mut t).unwrap();
        s.on_arrival(h(2, 0), 5.0, 0.0, 0.0, &mut t).unwrap();
        let batch = s.form_batch(2, 0, None, |_| 0, |_| false);
        assert_eq!(batch, vec![h(0, 0), h(1, 0)]);
        assert!(s.form_batch(5, 0, None, |_| 0, |_| false).len() == 3);
        assert!(s.form_batch(0, 0, None, |_| 0, |_| false).is_empty());
    }

    #[test]
    fn srpt_orders_by_remaining_work() {
        let mut t = ProcessTable::default();
        t.start_session(0, 0.0, 50);
        t.start_session(1, 0.0, 10);
        let mut s = EngineSched::new(Policy::Srpt, QueueConfig::single()).unwrap();
        s.on_arrival(h(0, 0), 0.0, 0.0, 0.0, &mut t).unwrap();
        s.on_arrival(h(1, 0), 0.0, 0.0, 0.0, &mut t).unwrap();
        s.refresh_srpt(&t).unwrap();
        let batch = s.form_batch(1, 0, None, |_| 0, |_| false);
        assert_eq!(batch, vec![h(1, 0)]);
        // completions shrink remaining work and can flip the order
        t.get_mut(0).unwrap().remaining_decode_tokens = 5;
        s.refresh_srpt(&t).unwrap();
        let batch = s.form_batch(1, 0, None, |_| 0, |_| false);
        assert_eq!(batch, vec![h(0, 0)]);
    }

    #[test]
    fn session_lifecycle_and_thread_hygiene() {
        let mut t = ProcessTable::default();
        t.start_session(3, 1.0, 12);
        let mut s = EngineSched::new(Policy::Plas, QueueConfig::default()).unwrap();
        s.on_arrival(h(3, 0), 0.0, 1.0, 1.0, &mut t).unwrap();
        assert_eq!(t.get(3).unwrap().threads.len(), 1);
        s.remove(h(3, 0)).unwrap();
        t.update_on_completion(Policy::Plas, h(3, 0), 0.0, 5.0, 12, 6.0)
            .unwrap();
        assert!(t.get(3).unwrap().threads.is_empty());
        t.end_session(3);
        assert!(t.is_empty());
        assert!(matches!(
            t.get(3),
            Err(SchedError::MissingEntry { prog: 3 })
        ));
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("plas".parse::<Policy>().unwrap(), Policy::Plas);
        assert_eq!("srpt_oracle".parse::<Policy>().unwrap(), Policy::Srpt);
        assert!("spongebob".parse::<Policy>().is_err());
    }
}
