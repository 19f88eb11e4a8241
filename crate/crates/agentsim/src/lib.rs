//! agentsim — discrete-event simulator for scheduling agentic LLM programs.
//!
//! An agentic program is a DAG of LLM calls (prefill + decode) separated by
//! external interrupts. This crate simulates one or more serving engines at
//! continuous-batching granularity and compares scheduling policies that are
//! aware of program-level state (attained service, critical paths) against
//! call-level baselines, plus a data-locality-aware multi-engine router.
//!
//! Layout:
//! - [`workload`]: program/call specs, validation, runtime readiness, JSONL traces
//! - [`gen`]: synthetic workload generation (distributions, DAG shapes, presets)
//! - [`engine`]: one simulated engine (batch, KV blocks, prefix cache, swaps)
//! - [`sched`]: process table and policies (FCFS, MLFQ, PLAS, ATLAS, SRPT)
//! - [`balance`]: multi-engine routing (round robin, least used, locality)
//! - [`critpath`]: DAG list-scheduling makespans (offline mode analysis)
//! - [`sim`]: the deterministic event loop binding everything
//! - [`metrics`]: run reports, latency/percentile/makespan/cache statistics
//! - [`config`]: TOML run configuration with dotted-path overrides

pub mod balance;
pub mod config;
pub mod critpath;
pub mod engine;
pub mod gen;
pub mod golden;
pub mod metrics;
pub mod sched;
pub mod sim;
pub mod workload;

pub use workload::{CallSpec, ProgramSpec};
