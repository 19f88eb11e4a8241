//! Critical-path analysis and list scheduling over one program's DAG.
//!
//! Used for the offline makespan mode: given a fixed pool of slots, how much
//! does the order among simultaneously-ready calls matter? Priorities here
//! are list-scheduling ranks, not the serving policies of [`crate::sched`].

use crate::workload::CompiledProgram;

/// Upward rank per call: the call's own duration plus the longest downstream
/// chain of durations. The maximum over calls is the critical-path length.
pub fn upward_ranks(prog: &CompiledProgram, durations: &[f64]) -> Vec<f64> {
    let n = prog.n_calls();
    let mut rank = vec![0.0f64; n];
    for &v in prog.topo.iter().rev() {
        let down = prog.children[v]
            .iter()
            .map(|&c| rank[c])
            .fold(0.0f64, f64::max);
        rank[v] = durations[v] + down;
    }
    rank
}

pub fn critical_path_len(prog: &CompiledProgram, durations: &[f64]) -> f64 {
    upward_ranks(prog, durations)
        .into_iter()
        .fold(0.0, f64::max)
}

/// Non-preemptive greedy list scheduling on `machines` identical slots.
/// Whenever slots are free, ready calls start in descending `priority` order
/// (ties to the lower call index). Returns the makespan.
pub fn list_schedule_makespan(
    prog: &CompiledProgram,
    durations: &[f64],
    priority: &[f64],
    machines: usize,
) -> f64 {
    assert!(machines >= 1);
    let n = prog.n_calls();
    let mut done_at = vec![f64::INFINITY; n];
    let mut started = vec![false; n];
    let mut running: Vec<(f64, usize)> = Vec::new();
    let mut free = machines;
    let mut now = 0.0f64;
    let mut finished = 0usize;
    while finished < n {
        let mut ready: Vec<usize> = (0..n)
            .filter(|&v| {
                !started[v] && prog.parents[v].iter().all(|&p| done_at[p] <= now)
            })
            .collect();
        ready.sort_by(|&a, &b| priority[b].total_cmp(&priority[a]).then(a.cmp(&b)));
        for v in ready {
            if free == 0 {
                break;
            }
            started[v] = true;
            running.push((now + durations[v], v));
            free -= 1;
        }
        debug_assert!(!running.is_empty(), "valid DAG cannot stall");
        running.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let t_next = running[0].0;
        while !running.is_empty() && running[0].0 <= t_next {
            let (t, v) = running.remove(0);
            done_at[v] = t;
            free += 1;
            finished += 1;
            now = t;
        }
    }
    done_at.into_iter().fold(0.0, f64::max)
}

/// Makespan when the longest remaining chain runs first.
pub fn makespan_critical_path_first(
    prog: &CompiledProgram,
    durations: &[f64],
    machines: usize,
) -> f64 {
    let ranks = upward_ranks(prog, durations);
    list_schedule_makespan(prog, durations, &ranks, machines)
}

/// Makespan under the adversarial (anti-critical-path) order: shortest
/// remaining chain first.
pub fn makespan_anti_critical_path(
    prog: &CompiledProgram,
    durations: &[f64],
    machines: usize,
) -> f64 {
    let ranks: Vec<f64> = upward_ranks(prog, durations).iter().map(|r| -r).collect();
    list_schedule_makespan(prog, durations, &ranks, machines)
}

/// Decode durations of every call under a uniform step time.
pub fn decode_durations(prog: &CompiledProgram, step_time: f64) -> Vec<f64> {
    prog.spec
        .calls
        .iter()
        .map(|c| c.decode_tokens as f64 * step_time)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::fig9_trace;
    use crate::workload::CompiledProgram;

    fn fig9() -> (CompiledProgram, Vec<f64>) {
        let prog = CompiledProgram::new(fig9_trace().remove(0)).unwrap();
        let durs = decode_durations(&prog, 1.0);
        (prog, durs)
    }

    #[test]
    fn fig9_critical_path_is_11() {
        let (prog, durs) = fig9();
        assert_eq!(critical_path_len(&prog, &durs), 11.0);
    }

    #[test]
    fn fig9_makespans_11_and_14() {
        let (prog, durs) = fig9();
        assert_eq!(makespan_critical_path_first(&prog, &durs, 2), 11.0);
        assert_eq!(makespan_anti_critical_path(&prog, &durs, 2), 14.0);
    }

    #[test]
    fn fig9_best_and_worst_over_all_orders() {
        // the pinned DAG's 11/14 are the true extremes over all 5! orders
        let (prog, durs) = fig9();
        let n = prog.n_calls();
        let mut best = f64::INFINITY;
        let mut worst = f64::NEG_INFINITY;
        let mut perm: Vec<usize> = (0..n).collect();
        permute(&mut perm, 0, &mut |p| {
            let mut prio = vec![0.0; n];
            for (r, &v) in p.iter().enumerate() {
                prio[v] = (n - r) as f64;
            }
            let m = list_schedule_makespan(&prog, &durs, &prio, 2);
            best = best.min(m);
            worst = worst.max(m);
        });
        assert_eq!(best, 11.0);
        assert_eq!(worst, 14.0);
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }

    #[test]
    fn single_machine_makespan_is_total_work() {
        let (prog, durs) = fig9();
        let total: f64 = durs.iter().sum();
        assert_eq!(makespan_critical_path_first(&prog, &durs, 1), total);
    }

    #[test]
    fn makespan_never_below_critical_path() {
        let (prog, durs) = fig9();
        for m in 1..5 {
            let cp = critical_path_len(&prog, &durs);
            assert!(makespan_critical_path_first(&prog, &durs, m) >= cp);
            assert!(makespan_anti_critical_path(&prog, &durs, m) >= cp);
        }
    }
}
