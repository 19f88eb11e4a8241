//! Multi-engine routing of ready calls.
//!
//! The locality policy sends short calls (input below a token threshold) to
//! the least-used engine, while a program's long calls are pinned to one
//! engine so its cached prefix is reused instead of recomputed. Round robin
//! and least-used are the conventional baselines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sched::ProcessTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalancerPolicy {
    RoundRobin,
    LeastUsed,
    Locality,
}

impl std::str::FromStr for BalancerPolicy {
    type Err = BalanceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "round_robin" => Ok(BalancerPolicy::RoundRobin),
            "least_used" => Ok(BalancerPolicy::LeastUsed),
            "locality" => Ok(BalancerPolicy::Locality),
            other => Err(BalanceError::UnknownPolicy(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalancerConfig {
    pub policy: BalancerPolicy,
    /// Calls with input at or below this many tokens count as small requests.
    pub token_threshold: u64,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        Self {
            policy: BalancerPolicy::LeastUsed,
            token_threshold: 2048,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BalanceError {
    #[error("no engines to route to")]
    NoEngines,
    #[error("token_threshold must be >= 1")]
    BadThreshold,
    #[error("unknown balancer policy {0:?} (expected round_robin|least_used|locality)")]
    UnknownPolicy(String),
    #[error(transparent)]
    Table(#[from] crate::sched::SchedError),
}

/// Which branch of the routing decision fired; exported in the routing log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteBranch {
    Short,
    Pinned,
    NewPin,
    RoundRobin,
    LeastUsed,
}

#[derive(Clone, Debug)]
pub struct Balancer {
    pub cfg: BalancerConfig,
    rr_next: usize,
}

fn least_used(loads: &[usize]) -> usize {
    let mut best = 0;
    for (i, &l) in loads.iter().enumerate() {
        if l < loads[best] {
            best = i;
        }
    }
    best
}

impl Balancer {
    pub fn new(cfg: BalancerConfig) -> Result<Self, BalanceError> {
        if cfg.token_threshold == 0 {
            return Err(BalanceError::BadThreshold);
        }
        Ok(Self { cfg, rr_next: 0 })
    }

    /// Picks an engine for a ready call. `loads[i]` is the number of calls
    /// in the system on engine i (queued + running). The program must have a
    /// live table entry; the locality policy records first-long-call pins.
    pub fn route(
        &mut self,
        prog: usize,
        input_tokens: u64,
        table: &mut ProcessTable,
        loads: &[usize],
    ) -> Result<(usize, RouteBranch), BalanceError> {
        if loads.is_empty() {
            return Err(BalanceError::NoEngines);
        }
        let (engine, branch) = match self.cfg.policy {
            BalancerPolicy::RoundRobin => {
                let e = self.rr_next % loads.len();
                self.rr_next = (self.rr_next + 1) % loads.len();
                (e, RouteBranch::RoundRobin)
            }
            BalancerPolicy::LeastUsed => (least_used(loads), RouteBranch::LeastUsed),
            BalancerPolicy::Locality => {
                if input_tokens <= self.cfg.token_threshold {
                    (least_used(loads), RouteBranch::Short)
                } else if let Some(pinned) = table.get(prog)?.pinned_engine {
                    (pinned, RouteBranch::Pinned)
                } else {
                    let e = least_used(loads);
                    table.get_mut(prog)?.pinned_engine = Some(e);
                    (e, RouteBranch::NewPin)
                }
            }
        };
        table.get_mut(prog)?.engines.insert(engine);
        Ok((engine, branch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_with(progs: &[usize]) -> ProcessTable {
        let mut t = ProcessTable::default();
        for &p in progs {
            t.start_session(p, 0.0, 1);
        }
        t
    }

    fn balancer(policy: BalancerPolicy) -> Balancer {
        Balancer::new(BalancerConfig {
            policy,
            token_threshold: 2048,
        })
        .unwrap()
    }

    #[test]
    fn single_engine_any_policy() {
        let mut t = table_with(&[0]);
        for p in [
            BalancerPolicy::RoundRobin,
            BalancerPolicy::LeastUsed,
            BalancerPolicy::Locality,
        ] {
            let (e, _) = balancer(p).route(0, 5000, &mut t, &[3]).unwrap();
            assert_eq!(e, 0);
        }
    }

    #[test]
    fn empty_engine_list_is_an_error() {
        let mut t = table_with(&[0]);
        assert_eq!(
            balancer(BalancerPolicy::LeastUsed)
                .route(0, 10, &mut t, &[])
                .unwrap_err(),
            BalanceError::NoEngines
        );
    }

    #[test]
    fn round_robin_cycles_evenly() {
        let mut t = table_with(&[0]);
        let mut b = balancer(BalancerPolicy::RoundRobin);
        let mut counts = [0usize; 3];
        for _ in 0..12 {
            let (e, _) = b.route(0, 10, &mut t, &[0, 0, 0]).unwrap();
            counts[e] += 1;
        }
        assert_eq!(counts, [4, 4, 4]);
    }

    #[test]
    fn least_used_argmin_lowest_id_ties() {
        let mut t = table_with(&[0]);
        let mut b = balancer(BalancerPolicy::LeastUsed);
        assert_eq!(b.route(0, 10, &mut t, &[5, 2, 7]).unwrap().0, 1);
        assert_eq!(b.route(0, 10, &mut t, &[2, 2, 7]).unwrap().0, 0);
    }

    #[test]
    fn locality_short_calls_balance_long_calls_pin() {
        let mut t = table_with(&[0]);
        let mut b = balancer(BalancerPolicy::Locality);
        // short call: least used, no pin
        let (e, br) = b.route(0, 100, &mut t, &[5, 2, 7]).unwrap();
        assert_eq!((e, br), (1, RouteBranch::Short));
        assert_eq!(t.get(0).unwrap().pinned_engine, None);
        // first long call pins
        let (e, br) = b.route(0, 3000, &mut t, &[5, 2, 7]).unwrap();
        assert_eq!((e, br), (1, RouteBranch::NewPin));
        assert_eq!(t.get(0).unwrap().pinned_engine, Some(1));
        // later long calls stick to the pin regardless of load
        let (e, br) = b.route(0, 3000, &mut t, &[0, 9, 0]).unwrap();
        assert_eq!((e, br), (1, RouteBranch::Pinned));
        // threshold boundary: exactly 2048 is still small
        let (_, br) = b.route(0, 2048, &mut t, &[0, 9, 0]).unwrap();
        assert_eq!(br, RouteBranch::Short);
    }

    #[test]
    fn pinning_survives_until_session_end() {
        let mut t = table_with(&[0]);
        let mut b = balancer(BalancerPolicy::Locality);
        b.route(0, 3000, &mut t, &[1, 0]).unwrap();
        assert_eq!(t.get(0).unwrap().pinned_engine, Some(1));
        t.end_session(0);
        t.start_session(0, 5.0, 1);
        assert_eq!(t.get(0).unwrap().pinned_engine, None);
    }
}
