//! Synthetic workload generation.
//!
//! Presets target the published summary statistics of the agentic traces the
//! simulator models (means and maxima of calls per program and token
//! lengths). Only those moments are ground truth; the long-tailed shape is a
//! modeling choice, pinned here as a clamped log-normal so runs reproduce.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::workload::{validate, CallSpec, ProgramSpec};

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("invalid distribution parameters: {0}")]
    InvalidDist(String),
    #[error("arrival rate must be > 0, got {0}")]
    BadRate(f64),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

/// Distribution descriptor for one scalar workload quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DistSpec {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Exponential { mean: f64 },
    /// log X ~ Normal(mu, sigma), clamped into [min, max].
    LogNormal { mu: f64, sigma: f64, min: f64, max: f64 },
}

impl DistSpec {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::InvalidDist(m));
        match *self {
            DistSpec::Fixed { value } => {
                if !value.is_finite() || value < 0.0 {
                    return bad(format!("fixed value {value}"));
                }
            }
            DistSpec::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi < lo {
                    return bad(format!("uniform [{lo}, {hi}]"));
                }
            }
            DistSpec::Exponential { mean } => {
                if !mean.is_finite() || mean <= 0.0 {
                    return bad(format!("exponential mean {mean}"));
                }
            }
            DistSpec::LogNormal { sigma, min, max, .. } => {
                if sigma <= 0.0 || min < 0.0 || max < min {
                    return bad(format!("lognormal sigma {sigma} range [{min}, {max}]"));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            DistSpec::Fixed { value } => value,
            DistSpec::Uniform { lo, hi } => {
                if hi > lo {
                    rng.gen_range(lo..hi)
                } else {
                    lo
                }
            }
            DistSpec::Exponential { mean } => {
                let u: f64 = rng.gen::<f64>();
                -mean * (1.0 - u).ln()
            }
            DistSpec::LogNormal { mu, sigma, min, max } => {
                let z: f64 = StandardNormal.sample(rng);
                (mu + sigma * z).exp().clamp(min, max)
            }
        }
    }

    /// A clamped log-normal with the given sigma/range whose mean equals
    /// `mean`, found by bisection on mu (the clamped mean is monotone in mu).
    pub fn lognormal_with_mean(mean: f64, sigma: f64, min: f64, max: f64) -> Self {
        assert!(mean > min && mean < max, "target mean outside clamp range");
        let (mut lo, mut hi) = (mean.max(1e-9).ln() - 6.0, mean.ln() + 6.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if clamped_lognormal_mean(mid, sigma, min, max) < mean {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        DistSpec::LogNormal { mu: 0.5 * (lo + hi), sigma, min, max }
    }
}

/// E[clamp(X, lo, hi)] for X ~ LogNormal(mu, sigma).
fn clamped_lognormal_mean(mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    let std = Normal::new(0.0, 1.0).unwrap();
    let phi = |x: f64| std.cdf(x);
    let a = if lo > 0.0 { (lo.ln() - mu) / sigma } else { f64::NEG_INFINITY };
    let b = (hi.ln() - mu) / sigma;
    let interior = (mu + 0.5 * sigma * sigma).exp() * (phi(b - sigma) - phi(a - sigma));
    let low = if lo > 0.0 { lo * phi(a) } else { 0.0 };
    low + interior + hi * (1.0 - phi(b))
}

/// DAG shape of generated programs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DagShape {
    /// Single path; length drawn from calls_per_program.
    Chain,
    /// Rounds of `width` parallel calls joined by a merge call.
    ForkJoin { width: DistSpec, depth: DistSpec },
    /// Search-style growth: repeatedly expand a frontier node into
    /// `expansion` children and merge them into a new frontier node.
    Mcts { expansion: u32, iterations: DistSpec },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadParams {
    pub calls_per_program: DistSpec,
    pub prefill_tokens: DistSpec,
    pub decode_tokens: DistSpec,
    pub dag_shape: DagShape,
    pub interrupt_delay: DistSpec,
    #[serde(default)]
    pub system_prompt_tokens: u64,
    /// Programs per time unit for Poisson arrivals.
    pub arrival_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl WorkloadParams {
    pub fn validate(&self) -> Result<(), GenError> {
        self.calls_per_program.validate()?;
        self.prefill_tokens.validate()?;
        self.decode_tokens.validate()?;
        self.interrupt_delay.validate()?;
        if let DagShape::ForkJoin { width, depth } = &self.dag_shape {
            width.validate()?;
            depth.validate()?;
        }
        if let DagShape::Mcts { expansion, iterations } = &self.dag_shape {
            if *expansion == 0 {
                return Err(GenError::InvalidDist("mcts expansion = 0".into()));
            }
            iterations.validate()?;
        }
        Ok(())
    }
}

fn count_sample(dist: &DistSpec, rng: &mut ChaCha8Rng, min: u64) -> u64 {
    (dist.sample(rng).round() as i64).max(min as i64) as u64
}

/// Generates one program; the result always passes `validate`.
pub fn gen_program(
    params: &WorkloadParams,
    rng: &mut ChaCha8Rng,
    program_id: String,
    arrival_time: f64,
) -> Result<ProgramSpec, GenError> {
    params.validate()?;
    let mut calls: Vec<CallSpec> = Vec::new();
    let mut next_id = 0usize;
    let mut new_call = |parents: Vec<usize>, rng: &mut ChaCha8Rng, calls: &Vec<CallSpec>| {
        let id = next_id;
        next_id += 1;
        CallSpec {
            call_id: format!("c{id:05}"),
            prefill_tokens: count_sample(&params.prefill_tokens, rng, 0),
            decode_tokens: count_sample(&params.decode_tokens, rng, 1),
            parents: parents.iter().map(|&p| calls[p].call_id.clone()).collect(),
            interrupt_delay: params.interrupt_delay.sample(rng).max(0.0),
        }
    };
    match &params.dag_shape {
        DagShape::Chain => {
            let n = count_sample(&params.calls_per_program, rng, 1) as usize;
            for i in 0..n {
                let parents = if i == 0 { vec![] } else { vec![i - 1] };
                let c = new_call(parents, rng, &calls);
                calls.push(c);
            }
        }
        DagShape::ForkJoin { width, depth } => {
            let rounds = count_sample(depth, rng, 1) as usize;
            let root = new_call(vec![], rng, &calls);
            calls.push(root);
            let mut head = 0usize;
            for _ in 0..rounds {
                let w = count_sample(width, rng, 1) as usize;
                let branch_start = calls.len();
                for _ in 0..w {
                    let c = new_call(vec![head], rng, &calls);
                    calls.push(c);
                }
                let join_parents: Vec<usize> = (branch_start..branch_start + w).collect();
                let join = new_call(join_parents, rng, &calls);
                calls.push(join);
                head = calls.len() - 1;
            }
        }
        DagShape::Mcts { expansion, iterations } => {
            let iters = count_sample(iterations, rng, 1) as usize;
            let root = new_call(vec![], rng, &calls);
            calls.push(root);
            let mut frontier: Vec<usize> = vec![0];
            for _ in 0..iters {
                let pick = frontier[rng.gen_range(0..frontier.len())];
                let start = calls.len();
                for _ in 0..*expansion {
                    let c = new_call(vec![pick], rng, &calls);
                    calls.push(c);
                }
                let join_parents: Vec<usize> = (start..start + *expansion as usize).collect();
                let join = new_call(join_parents, rng, &calls);
                calls.push(join);
                frontier.push(calls.len() - 1);
            }
        }
    }
    let spec = ProgramSpec {
        program_id,
        arrival_time,
        system_prompt_tokens: params.system_prompt_tokens,
        calls,
    };
    debug_assert_eq!(validate(&spec), Ok(()));
    Ok(spec)
}

/// Poisson arrival timestamps: cumulative sums of exponential(lambda) gaps.
pub fn gen_arrivals(lambda: f64, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, GenError> {
    if !(lambda > 0.0) {
        return Err(GenError::BadRate(lambda));
    }
    let mut t = 0.0;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.gen::<f64>();
        t += -(1.0 - u).ln() / lambda;
        out.push(t);
    }
    Ok(out)
}

/// Either parameterized generators (one entry, or several sampled with equal
/// probability) or a fixed golden trace.
#[derive(Clone, Debug)]
pub enum Preset {
    Gen(Vec<WorkloadParams>),
    Fixed(Vec<ProgramSpec>),
}

pub const PRESET_NAMES: [&str; 6] = ["sharegpt", "bfcl", "lats", "mixed", "fig2", "fig9"];

/// Chatbot-style trace: decode-heavy chains, long-tailed call counts
/// (mean 6.66 calls, max 80; ~256 prefill / ~277 decode tokens per call).
pub fn sharegpt_params() -> WorkloadParams {
    WorkloadParams {
        calls_per_program: DistSpec::lognormal_with_mean(6.66, 1.3, 1.0, 80.0),
        prefill_tokens: DistSpec::lognormal_with_mean(256.0, 0.8, 1.0, 4096.0),
        decode_tokens: DistSpec::lognormal_with_mean(277.0, 1.3, 1.0, 4096.0),
        dag_shape: DagShape::Chain,
        interrupt_delay: DistSpec::Fixed { value: 0.0 },
        system_prompt_tokens: 64,
        arrival_rate: 0.5,
        seed: 0,
    }
}

/// Tool-calling trace: prefill-heavy chains (mean 735.06 prefill / 34.14
/// decode tokens per call; mean 10.75 calls, max 70).
pub fn bfcl_params() -> WorkloadParams {
    WorkloadParams {
        calls_per_program: DistSpec::lognormal_with_mean(10.75, 0.9, 1.0, 70.0),
        prefill_tokens: DistSpec::lognormal_with_mean(735.06, 0.7, 1.0, 8192.0),
        decode_tokens: DistSpec::lognormal_with_mean(34.14, 0.8, 1.0, 512.0),
        dag_shape: DagShape::Chain,
        interrupt_delay: DistSpec::Fixed { value: 0.0 },
        system_prompt_tokens: 256,
        arrival_rate: 0.5,
        seed: 0,
    }
}

/// Search-style trace: wide fork/merge DAGs averaging 159.7 calls per
/// program (~467.2 prefill / ~72.6 decode tokens per call).
pub fn lats_params() -> WorkloadParams {
    // calls = 1 + iterations * (expansion + 1); fit iterations to the mean
    let expansion = 4u32;
    let iter_mean = (159.7 - 1.0) / f64::from(expansion + 1);
    WorkloadParams {
        calls_per_program: DistSpec::Fixed { value: 0.0 }, // derived from iterations
        prefill_tokens: DistSpec::lognormal_with_mean(467.2, 0.7, 1.0, 8192.0),
        decode_tokens: DistSpec::lognormal_with_mean(72.6, 1.0, 1.0, 1024.0),
        dag_shape: DagShape::Mcts {
            expansion,
            iterations: DistSpec::lognormal_with_mean(iter_mean, 1.1, 1.0, 240.0),
        },
        interrupt_delay: DistSpec::Fixed { value: 0.0 },
        system_prompt_tokens: 128,
        arrival_rate: 0.1,
        seed: 0,
    }
}

/// Four programs submitted at t=0; chains with decode steps
/// A {4,3,1,1}, B {3,3,4}, C {1,2}, D {4}. Idealized (no prefill).
pub fn fig2_trace() -> Vec<ProgramSpec> {
    let chain = |pid: &str, decodes: &[u64]| -> ProgramSpec {
        let calls = decodes
            .iter()
            .enumerate()
            .map(|(i, &d)| CallSpec {
                call_id: format!("c{}", i + 1),
                prefill_tokens: 0,
                decode_tokens: d,
                parents: if i == 0 { vec![] } else { vec![format!("c{i}")] },
                interrupt_delay: 0.0,
            })
            .collect();
        ProgramSpec {
            program_id: pid.into(),
            arrival_time: 0.0,
            system_prompt_tokens: 0,
            calls,
        }
    };
    vec![
        chain("A", &[4, 3, 1, 1]),
        chain("B", &[3, 3, 4]),
        chain("C", &[1, 2]),
        chain("D", &[4]),
    ]
}

/// Single multi-threaded program whose DAG separates critical-path-aware
/// from oblivious scheduling on 2 slots: 11 vs 14 time units of makespan.
/// Critical path: c1 (3) -> c2 (3) -> c3 (5).
pub fn fig9_trace() -> Vec<ProgramSpec> {
    let mk = |id: &str, decode: u64, parents: &[&str]| CallSpec {
        call_id: id.into(),
        prefill_tokens: 0,
        decode_tokens: decode,
        parents: parents.iter().map(|s| s.to_string()).collect(),
        interrupt_delay: 0.0,
    };
    vec![ProgramSpec {
        program_id: "F9".into(),
        arrival_time: 0.0,
        system_prompt_tokens: 0,
        calls: vec![
            mk("c1", 3, &[]),
            mk("c2", 3, &["c1"]),
            mk("c3", 5, &["c1", "c2"]),
            mk("c4", 3, &["c1"]),
            mk("c5", 4, &["c1"]),
        ],
    }]
}

pub fn preset(name: &str) -> Result<Preset, GenError> {
    match name {
        "sharegpt" => Ok(Preset::Gen(vec![sharegpt_params()])),
        "bfcl" => Ok(Preset::Gen(vec![bfcl_params()])),
        "lats" => Ok(Preset::Gen(vec![lats_params()])),
        "mixed" => Ok(Preset::Gen(vec![
            sharegpt_params(),
            bfcl_params(),
            lats_params(),
        ])),
        "fig2" => Ok(Preset::Fixed(fig2_trace())),
        "fig9" => Ok(Preset::Fixed(fig9_trace())),
        other => Err(GenError::UnknownPreset(other.to_string())),
    }
}

/// Draws one program from a preset (uniform over mixture entries).
pub fn gen_from_mixture(
    mixture: &[WorkloadParams],
    rng: &mut ChaCha8Rng,
    program_id: String,
    arrival_time: f64,
) -> Result<ProgramSpec, GenError> {
    let params = if mixture.len() == 1 {
        &mixture[0]
    } else {
        &mixture[rng.gen_range(0..mixture.len())]
    };
    gen_program(params, rng, program_id, arrival_time)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn degenerate_chain_matches_fig2_program_d() {
        let params = WorkloadParams {
            calls_per_program: DistSpec::Fixed { value: 1.0 },
            prefill_tokens: DistSpec::Fixed { value: 0.0 },
            decode_tokens: DistSpec::Fixed { value: 4.0 },
            dag_shape: DagShape::Chain,
            interrupt_delay: DistSpec::Fixed { value: 0.0 },
            system_prompt_tokens: 0,
            arrival_rate: 1.0,
            seed: 0,
        };
        let p = gen_program(&params, &mut rng(1), "D".into(), 0.0).unwrap();
        assert_eq!(p.calls.len(), 1);
        assert_eq!(p.calls[0].decode_tokens, 4);
    }

    #[test]
    fn generated_programs_always_validate() {
        for preset in [sharegpt_params(), bfcl_params(), lats_params()] {
            let mut r = rng(7);
            for i in 0..200 {
                let p = gen_program(&preset, &mut r, format!("p{i}"), 0.0).unwrap();
                assert_eq!(validate(&p), Ok(()));
            }
        }
    }

    #[test]
    fn fork_join_has_expected_structure() {
        let params = WorkloadParams {
            calls_per_program: DistSpec::Fixed { value: 0.0 },
            prefill_tokens: DistSpec::Fixed { value: 10.0 },
            decode_tokens: DistSpec::Fixed { value: 5.0 },
            dag_shape: DagShape::ForkJoin {
                width: DistSpec::Fixed { value: 3.0 },
                depth: DistSpec::Fixed { value: 2.0 },
            },
            interrupt_delay: DistSpec::Fixed { value: 0.0 },
            system_prompt_tokens: 0,
            arrival_rate: 1.0,
            seed: 0,
        };
        let p = gen_program(&params, &mut rng(3), "fj".into(), 0.0).unwrap();
        // 1 root + 2 rounds of (3 branches + 1 join)
        assert_eq!(p.calls.len(), 1 + 2 * 4);
        let joins: Vec<_> = p.calls.iter().filter(|c| c.parents.len() == 3).collect();
        assert_eq!(joins.len(), 2);
    }

    #[test]
    fn sharegpt_call_count_moments() {
        let params = sharegpt_params();
        let mut r = rng(42);
        let mut total = 0.0;
        let mut max = 0u64;
        let n = 10_000;
        for _ in 0..n {
            let c = count_sample(&params.calls_per_program, &mut r, 1);
            total += c as f64;
            max = max.max(c);
        }
        let mean = total / n as f64;
        assert!((mean - 6.66).abs() / 6.66 < 0.10, "mean {mean}");
        assert!(max <= 80, "max {max}");
    }

    #[test]
    fn lats_preset_moments() {
        let params = lats_params();
        let mut r = rng(42);
        let (mut calls, mut prefill, mut decode, mut nc) = (0.0, 0.0, 0.0, 0u64);
        for i in 0..1000 {
            let p = gen_program(&params, &mut r, format!("p{i}"), 0.0).unwrap();
            calls += p.calls.len() as f64;
            for c in &p.calls {
                prefill += c.prefill_tokens as f64;
                decode += c.decode_tokens as f64;
                nc += 1;
            }
        }
        let call_mean = calls / 1000.0;
        let prefill_mean = prefill / nc as f64;
        let decode_mean = decode / nc as f64;
        assert!((call_mean - 159.7).abs() / 159.7 < 0.10, "calls {call_mean}");
        assert!((prefill_mean - 467.2).abs() / 467.2 < 0.10, "prefill {prefill_mean}");
        assert!((decode_mean - 72.6).abs() / 72.6 < 0.10, "decode {decode_mean}");
    }

    #[test]
    fn bfcl_decode_mean() {
        let params = bfcl_params();
        let mut r = rng(42);
        let mut total = 0.0;
        let n = 10_000;
        for _ in 0..n {
            total += count_sample(&params.decode_tokens, &mut r, 1) as f64;
        }
        let mean = total / n as f64;
        assert!((mean - 34.14).abs() / 34.14 < 0.10, "mean {mean}");
    }

    #[test]
    fn calls_per_program_right_skewed() {
        for params in [sharegpt_params(), lats_params()] {
            let mut r = rng(11);
            let samples: Vec<f64> = (0..5000)
                .map(|i| {
                    gen_program(&params, &mut r, format!("p{i}"), 0.0)
                        .unwrap()
                        .calls
                        .len() as f64
                })
                .take(2000)
                .collect();
            let n = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let m2 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let m3 = samples.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
            let skew = m3 / m2.powf(1.5);
            assert!(skew > 0.0, "skewness {skew}");
        }
    }

    #[test]
    fn arrivals_basic() {
        assert_eq!(gen_arrivals(1.0, 0, &mut rng(1)).unwrap(), Vec::<f64>::new());
        assert!(gen_arrivals(0.0, 1, &mut rng(1)).is_err());
        assert!(gen_arrivals(-2.0, 1, &mut rng(1)).is_err());

        let a = gen_arrivals(1.0, 10_000, &mut rng(5)).unwrap();
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
        let mean_gap = a.last().unwrap() / 10_000.0;
        // 3-sigma band of the exponential mean estimator
        assert!((0.97..=1.03).contains(&mean_gap), "mean gap {mean_gap}");

        let b = gen_arrivals(1.0, 10_000, &mut rng(5)).unwrap();
        assert_eq!(a, b, "same seed must reproduce");
    }

    #[test]
    fn fitted_lognormal_hits_target_mean() {
        let d = DistSpec::lognormal_with_mean(34.14, 0.8, 1.0, 512.0);
        if let DistSpec::LogNormal { mu, sigma, min, max } = d {
            let m = clamped_lognormal_mean(mu, sigma, min, max);
            assert!((m - 34.14).abs() < 1e-6, "analytic mean {m}");
        } else {
            unreachable!()
        }
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(matches!(preset("nope"), Err(GenError::UnknownPreset(_))));
        for name in PRESET_NAMES {
            assert!(preset(name).is_ok());
        }
    }

    #[test]
    fn fig2_trace_matches_table() {
        let t = fig2_trace();
        assert_eq!(t.len(), 4);
        let decodes: Vec<Vec<u64>> = t
            .iter()
            .map(|p| p.calls.iter().map(|c| c.decode_tokens).collect())
            .collect();
        assert_eq!(
            decodes,
            vec![vec![4, 3, 1, 1], vec![3, 3, 4], vec![1, 2], vec![4]]
        );
        for p in &t {
            assert_eq!(validate(p), Ok(()));
            assert_eq!(p.arrival_time, 0.0);
        }
    }
}
