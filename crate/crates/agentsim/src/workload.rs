//! Program and call specifications, validation, and runtime readiness.
//!
//! A program is a DAG of LLM calls. Each call carries a prefill length, a
//! decode length (= number of decode steps), its parent calls, and an
//! interrupt delay that elapses between all parents completing and the call
//! arriving at the serving layer. Call lengths are specified in tokens, not
//! time; the engine model turns tokens into time.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifies one call of one program by simulation indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CallHandle {
    pub prog: usize,
    pub call: usize,
}

/// One LLM call inside a program.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallSpec {
    pub call_id: String,
    pub prefill_tokens: u64,
    /// Number of decode steps; must be >= 1.
    pub decode_tokens: u64,
    #[serde(default)]
    pub parents: Vec<String>,
    /// Simulated time between all parents completing and this call arriving.
    #[serde(default)]
    pub interrupt_delay: f64,
}

/// A program: a DAG of calls plus its arrival time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramSpec {
    pub program_id: String,
    #[serde(default)]
    pub arrival_time: f64,
    /// Tokens shared by all calls of this program (and, depending on the
    /// engine cache mode, across programs).
    #[serde(default)]
    pub system_prompt_tokens: u64,
    pub calls: Vec<CallSpec>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ValidateError {
    #[error("program {program_id}: cycle involving call {call_id}")]
    Cycle { program_id: String, call_id: String },
    #[error("program {program_id}: call {call_id} references unknown parent {parent}")]
    DanglingParent {
        program_id: String,
        call_id: String,
        parent: String,
    },
    #[error("program {program_id}: call {call_id} has decode_tokens = 0")]
    ZeroDecode { program_id: String, call_id: String },
    #[error("program {program_id}: duplicate call_id {call_id}")]
    DuplicateCallId { program_id: String, call_id: String },
    #[error("program {program_id}: call {call_id} lists parent {parent} twice")]
    DuplicateParent {
        program_id: String,
        call_id: String,
        parent: String,
    },
    #[error("program {program_id}: negative {field} on call {call_id}")]
    NegativeTime {
        program_id: String,
        call_id: String,
        field: &'static str,
    },
    #[error("program {program_id}: negative arrival_time")]
    NegativeArrival { program_id: String },
    #[error("program {program_id}: empty call list")]
    Empty { program_id: String },
}

/// Checks all spec invariants; reports the first violation found.
pub fn validate(spec: &ProgramSpec) -> Result<(), ValidateError> {
    let pid = || spec.program_id.clone();
    if spec.calls.is_empty() {
        return Err(ValidateError::Empty { program_id: pid() });
    }
    if spec.arrival_time < 0.0 || !spec.arrival_time.is_finite() {
        return Err(ValidateError::NegativeArrival { program_id: pid() });
    }
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, c) in spec.calls.iter().enumerate() {
        if index.insert(c.call_id.as_str(), i).is_some() {
            return Err(ValidateError::DuplicateCallId {
                program_id: pid(),
                call_id: c.call_id.clone(),
            });
        }
    }
    for c in &spec.calls {
        if c.decode_tokens == 0 {
            return Err(ValidateError::ZeroDecode {
                program_id: pid(),
                call_id: c.call_id.clone(),
            });
        }
        if c.interrupt_delay < 0.0 || !c.interrupt_delay.is_finite() {
            return Err(ValidateError::NegativeTime {
                program_id: pid(),
                call_id: c.call_id.clone(),
                field: "interrupt_delay",
            });
        }
        let mut seen = BTreeSet::new();
        for p in &c.parents {
            if !index.contains_key(p.as_str()) {
                return Err(ValidateError::DanglingParent {
                    program_id: pid(),
                    call_id: c.call_id.clone(),
                    parent: p.clone(),
                });
            }
            if !seen.insert(p.as_str()) {
                return Err(ValidateError::DuplicateParent {
                    program_id: pid(),
                    call_id: c.call_id.clone(),
                    parent: p.clone(),
                });
            }
        }
    }
    // Kahn's algorithm; leftover in-degree means a cycle. A rootless graph
    // (every call has parents) is necessarily cyclic and lands here too.
    let n = spec.calls.len();
    let mut indeg = vec![0usize; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, c) in spec.calls.iter().enumerate() {
        for p in &c.parents {
            let pi = index[p.as_str()];
            indeg[i] += 1;
            children[pi].push(i);
        }
    }
    let mut stack: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0usize;
    while let Some(v) = stack.pop() {
        seen += 1;
        for &ch in &children[v] {
            indeg[ch] -= 1;
            if indeg[ch] == 0 {
                stack.push(ch);
            }
        }
    }
    if seen != n {
        let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap();
        return Err(ValidateError::Cycle {
            program_id: pid(),
            call_id: spec.calls[stuck].call_id.clone(),
        });
    }
    Ok(())
}

/// A validated program with precomputed graph data the simulator needs.
///
/// Call indices refer to positions in `spec.calls`. `context_tokens[i]` is the
/// cumulative-context model: tokens of the longest-token ancestor chain
/// (prefill + decode of each ancestor), excluding the system prompt and the
/// call's own prefill. `input_tokens[i]` adds both.
#[derive(Clone, Debug)]
pub struct CompiledProgram {
    pub spec: ProgramSpec,
    pub parents: Vec<Vec<usize>>,
    pub children: Vec<Vec<usize>>,
    pub topo: Vec<usize>,
    pub context_tokens: Vec<u64>,
    pub input_tokens: Vec<u64>,
    pub total_decode_tokens: u64,
    /// Rank of each call_id in lexicographic order; deterministic tie-break.
    pub call_id_rank: Vec<usize>,
    /// True iff every call has at most one parent and at most one child.
    pub is_chain: bool,
}

impl CompiledProgram {
    pub fn new(spec: ProgramSpec) -> Result<Self, ValidateError> {
        validate(&spec)?;
        let n = spec.calls.len();
        let index: BTreeMap<&str, usize> = spec
            .calls
            .iter()
            .enumerate()
            .map(|(i, c)| (c.call_id.as_str(), i))
            .collect();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for (i, c) in spec.calls.iter().enumerate() {
            for p in &c.parents {
                let pi = index[p.as_str()];
                parents[i].push(pi);
                children[pi].push(i);
            }
        }
        // Topological order (stable: lowest index first).
        let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(&v) = ready.iter().next() {
            ready.remove(&v);
            topo.push(v);
            for &ch in &children[v] {
                indeg[ch] -= 1;
                if indeg[ch] == 0 {
                    ready.insert(ch);
                }
            }
        }
        let mut context_tokens = vec![0u64; n];
        for &v in &topo {
            context_tokens[v] = parents[v]
                .iter()
                .map(|&p| {
                    context_tokens[p] + spec.calls[p].prefill_tokens + spec.calls[p].decode_tokens
                })
                .max()
                .unwrap_or(0);
        }
        let input_tokens: Vec<u64> = (0..n)
            .map(|i| spec.system_prompt_tokens + context_tokens[i] + spec.calls[i].prefill_tokens)
            .collect();
        let total_decode_tokens = spec.calls.iter().map(|c| c.decode_tokens).sum();
        let mut ids: Vec<usize> = (0..n).collect();
        ids.sort_by(|&a, &b| spec.calls[a].call_id.cmp(&spec.calls[b].call_id));
        let mut call_id_rank = vec![0usize; n];
        for (rank, &i) in ids.iter().enumerate() {
            call_id_rank[i] = rank;
        }
        let is_chain =
            parents.iter().all(|p| p.len() <= 1) && children.iter().all(|c| c.len() <= 1);
        Ok(Self {
            spec,
            parents,
            children,
            topo,
            context_tokens,
            input_tokens,
            total_decode_tokens,
            call_id_rank,
            is_chain,
        })
    }

    pub fn n_calls(&self) -> usize {
        self.spec.calls.len()
    }
}

/// Per-call lifecycle inside the simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CallState {
    /// Waiting on parents.
    Pending,
    /// Parents done; interrupt delay running until the stored instant.
    Interrupted,
    /// Arrived at the serving layer, not yet enqueued on an engine.
    Ready,
    Queued,
    Running,
    Preempted,
    Done,
}

/// Mutable per-program state tracked by the simulation loop (single writer).
#[derive(Clone, Debug)]
pub struct ProgramRuntime {
    pub states: Vec<CallState>,
    /// For `Interrupted` calls, when the interrupt delay elapses.
    pub ready_at: Vec<f64>,
    pub completed_at: Vec<Option<f64>>,
    pub attained_decode: Vec<u64>,
    pub remaining_calls: usize,
}

impl ProgramRuntime {
    pub fn new(prog: &CompiledProgram, arrival: f64) -> Self {
        let n = prog.n_calls();
        let mut rt = Self {
            states: vec![CallState::Pending; n],
            ready_at: vec![f64::INFINITY; n],
            completed_at: vec![None; n],
            attained_decode: vec![0; n],
            remaining_calls: n,
        };
        for i in 0..n {
            if prog.parents[i].is_empty() {
                rt.states[i] = CallState::Interrupted;
                rt.ready_at[i] = arrival + prog.spec.calls[i].interrupt_delay;
            }
        }
        rt
    }

    /// Marks a call done at `now`; unlocks children whose parents are all done.
    pub fn complete_call(&mut self, prog: &CompiledProgram, call: usize, now: f64) {
        debug_assert_ne!(self.states[call], CallState::Done);
        self.states[call] = CallState::Done;
        self.completed_at[call] = Some(now);
        self.remaining_calls -= 1;
        for &ch in &prog.children[call] {
            if self.states[ch] == CallState::Pending
                && prog.parents[ch]
                    .iter()
                    .all(|&p| self.states[p] == CallState::Done)
            {
                self.states[ch] = CallState::Interrupted;
                self.ready_at[ch] = now + prog.spec.calls[ch].interrupt_delay;
            }
        }
    }

    pub fn is_done(&self) -> bool {
        self.remaining_calls == 0
    }

    /// Calls whose parents are all done, whose interrupt delay has elapsed by
    /// `now`, and which are not yet queued/running/done.
    pub fn ready_calls(&self, now: f64) -> Vec<usize> {
        (0..self.states.len())
            .filter(|&i| match self.states[i] {
                CallState::Interrupted => self.ready_at[i] <= now,
                CallState::Ready => true,
                _ => false,
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: unknown key \"{key}\" (strict mode)")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        source: ValidateError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const PROGRAM_KEYS: [&str; 4] = [
    "program_id",
    "arrival_time",
    "system_prompt_tokens",
    "calls",
];
const CALL_KEYS: [&str; 5] = [
    "call_id",
    "prefill_tokens",
    "decode_tokens",
    "parents",
    "interrupt_delay",
];

fn check_keys(value: &serde_json::Value, line: usize) -> Result<(), TraceError> {
    let obj = match value.as_object() {
        Some(o) => o,
        None => return Ok(()), // shape errors surface in deserialization
    };
    for key in obj.keys() {
        if !PROGRAM_KEYS.contains(&key.as_str()) {
            return Err(TraceError::UnknownKey {
                line,
                key: key.clone(),
            });
        }
    }
    if let Some(calls) = obj.get("calls").and_then(|c| c.as_array()) {
        for call in calls {
            if let Some(co) = call.as_object() {
                for key in co.keys() {
                    if !CALL_KEYS.contains(&key.as_str()) {
                        return Err(TraceError::UnknownKey {
                            line,
                            key: key.clone(),
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

/// Parses the JSONL trace format, one program per line, validating each.
/// Input order is preserved. In strict mode unknown keys are rejected.
pub fn load_trace<R: BufRead>(reader: R, strict: bool) -> Result<Vec<ProgramSpec>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| TraceError::Parse {
                line: line_no,
                source: e,
            })?;
        if strict {
            check_keys(&value, line_no)?;
        }
        let spec: ProgramSpec =
            serde_json::from_value(value).map_err(|e| TraceError::Parse {
                line: line_no,
                source: e,
            })?;
        validate(&spec).map_err(|e| TraceError::Invalid {
            line: line_no,
            source: e,
        })?;
        out.push(spec);
    }
    Ok(out)
}

/// Writes programs in the JSONL trace format, one per line.
pub fn write_trace<W: Write>(mut w: W, specs: &[ProgramSpec]) -> std::io::Result<()> {
    for spec in specs {
        serde_json::to_writer(&mut w, spec)?;
        writeln!(w)?;
    }
    Ok(())
}
