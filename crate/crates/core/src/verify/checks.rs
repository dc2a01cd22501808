//! Post-hoc checkers over recorded traces and per-process counters.

use std::collections::HashMap;

use crate::context::{Metrics, ProcessContext};
use crate::gme::Gme;
use crate::memory::{ProcessId, SharedMemory};
use crate::node::{InstanceId, SessionId};
use crate::trace::{TraceEvent, TraceKind};

use super::{Counterexample, HarnessError, Verdict};

/// Critical sections on one instance never mix sessions.
///
/// A process is in its critical section from its `EnterReturn` to its next
/// `ExitCall` on the same instance. Non-alternating events are reported as
/// a harness error.
pub fn check_gme(trace: &[TraceEvent]) -> Result<Verdict, HarnessError> {
    let mut inside: HashMap<(ProcessId, InstanceId), TraceEvent> = HashMap::new();
    let mut sessions: HashMap<InstanceId, HashMap<SessionId, usize>> = HashMap::new();
    let mut max_together = 0usize;
    for e in trace {
        match e.kind {
            TraceKind::EnterReturn => {
                if let Some(prev) = inside.insert((e.pid, e.instance), *e) {
                    return Err(HarnessError::Malformed(format!("{:?} entered twice: {prev:?} then {e:?}", e.pid)));
                }
                let counts = sessions.entry(e.instance).or_default();
                if counts.keys().any(|&s| s != e.session) {
                    let other = inside
                        .values()
                        .filter(|o| o.instance == e.instance && o.session != e.session)
                        .min_by_key(|o| o.seq)
                        .copied()
                        .expect("session count without an occupant");
                    return Ok(Verdict::fail(
                        "group mutual exclusion",
                        format!("sessions {} and {} overlap on instance {}", other.session, e.session, e.instance),
                        Counterexample::Events(vec![other, *e]),
                    ));
                }
                let c = counts.entry(e.session).or_default();
                *c += 1;
                max_together = max_together.max(*c);
            }
            TraceKind::ExitCall => {
                let Some(enter) = inside.remove(&(e.pid, e.instance)) else {
                    return Err(HarnessError::Malformed(format!("exit without enter: {e:?}")));
                };
                let counts = sessions.get_mut(&e.instance).unwrap();
                let c = counts.get_mut(&enter.session).unwrap();
                *c -= 1;
                if *c == 0 {
                    counts.remove(&enter.session);
                }
            }
            _ => {}
        }
    }
    Ok(Verdict::pass(
        "group mutual exclusion",
        format!("{} events, at most {max_together} processes inside together", trace.len()),
    ))
}

/// One passage reconstructed from a trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Passage {
    pub pid: ProcessId,
    pub instance: InstanceId,
    pub announce: u64,
    pub enter: u64,
    /// `u64::MAX` if the trace ends before the exit section starts.
    pub exit: u64,
}

/// Pairs each process's `Announce`, `EnterReturn` and `ExitCall` events.
/// Passages whose entry section never finished are dropped.
pub fn passages(trace: &[TraceEvent]) -> Result<Vec<Passage>, HarnessError> {
    let mut open: HashMap<(ProcessId, InstanceId), Passage> = HashMap::new();
    let mut out = Vec::new();
    for e in trace {
        let key = (e.pid, e.instance);
        match e.kind {
            TraceKind::Announce => {
                let p = Passage { pid: e.pid, instance: e.instance, announce: e.seq, enter: u64::MAX, exit: u64::MAX };
                if open.insert(key, p).is_some() {
                    return Err(HarnessError::Malformed(format!("announce inside a passage: {e:?}")));
                }
            }
            TraceKind::EnterReturn => {
                let p = open.get_mut(&key).ok_or_else(|| HarnessError::Malformed(format!("enter without announce: {e:?}")))?;
                p.enter = e.seq;
            }
            TraceKind::ExitCall => {
                let mut p = open.remove(&key).ok_or_else(|| HarnessError::Malformed(format!("exit without passage: {e:?}")))?;
                if p.enter == u64::MAX {
                    return Err(HarnessError::Malformed(format!("exit before enter returned: {e:?}")));
                }
                p.exit = e.seq;
                out.push(p);
            }
            _ => {}
        }
    }
    out.extend(open.into_values().filter(|p| p.enter != u64::MAX));
    out.sort_by_key(|p| p.announce);
    Ok(out)
}

/// Range-maximum table over a fixed array.
struct SparseMax {
    levels: Vec<Vec<u32>>,
}

impl SparseMax {
    fn new(values: Vec<u32>) -> Self {
        let mut levels = vec![values];
        let mut width = 1;
        while 2 * width <= levels[0].len() {
            let prev = levels.last().unwrap();
            let next = (0..prev.len() - width).map(|i| prev[i].max(prev[i + width])).collect();
            levels.push(next);
            width *= 2;
        }
        SparseMax { levels }
    }

    /// Maximum over `lo..=hi`.
    fn max(&self, lo: usize, hi: usize) -> u32 {
        let len = hi - lo + 1;
        let k = (usize::BITS - 1 - len.leading_zeros()) as usize;
        self.levels[k][lo].max(self.levels[k][hi + 1 - (1 << k)])
    }
}

/// Per-passage contention figures on one instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PassageContention {
    pub passage: Passage,
    /// Sessions established between announce and enter-return.
    pub established: u64,
    /// Passages overlapping this one, itself included.
    pub interval: u64,
    /// Most passages active at one time during this one, itself included.
    pub point: u64,
}

/// Computes established-session counts and interval/point contention for
/// every passage in `trace`.
pub fn contention(trace: &[TraceEvent]) -> Result<Vec<PassageContention>, HarnessError> {
    let all = passages(trace)?;
    let mut by_instance: HashMap<InstanceId, Vec<Passage>> = HashMap::new();
    for p in all {
        by_instance.entry(p.instance).or_default().push(p);
    }
    let mut established: HashMap<InstanceId, Vec<u64>> = HashMap::new();
    for e in trace.iter().filter(|e| e.kind == TraceKind::SessionEstablished) {
        established.entry(e.instance).or_default().push(e.seq);
    }
    let mut out = Vec::new();
    let mut instances: Vec<_> = by_instance.into_iter().collect();
    instances.sort_by_key(|(i, _)| *i);
    for (instance, ps) in instances {
        let est = established.remove(&instance).unwrap_or_default();
        let mut starts: Vec<u64> = ps.iter().map(|p| p.announce).collect();
        let mut ends: Vec<u64> = ps.iter().map(|p| p.exit).collect();
        starts.sort_unstable();
        ends.sort_unstable();
        // Active count after each boundary point, for point contention.
        let mut points: Vec<(u64, i32)> = ps.iter().flat_map(|p| [(p.announce, 1), (p.exit, -1)]).collect();
        points.sort_unstable();
        let mut active = 0i32;
        let levels: Vec<u32> = points
            .iter()
            .map(|&(_, d)| {
                active += d;
                active as u32
            })
            .collect();
        let table = SparseMax::new(levels);
        for p in &ps {
            let ended_before = ends.partition_point(|&x| x < p.announce);
            let started_after = starts.len() - starts.partition_point(|&x| x <= p.exit);
            let interval = (ps.len() - ended_before - started_after) as u64;
            let lo = points.partition_point(|&(s, _)| s < p.announce);
            let hi = points.partition_point(|&(s, _)| s < p.exit) - 1;
            let point = table.max(lo, hi.max(lo)) as u64;
            let e_lo = est.partition_point(|&s| s <= p.announce);
            let e_hi = est.partition_point(|&s| s < p.enter);
            out.push(PassageContention {
                passage: *p,
                established: (e_hi - e_lo) as u64,
                interval,
                point,
            });
        }
    }
    Ok(out)
}

/// Sessions established while a request waits: at most
/// `min(interval contention, n) + 1` per passage, and in total at most the
/// sum of `point contention + 1`.
pub fn check_context_switch(trace: &[TraceEvent], n: usize) -> Result<Verdict, HarnessError> {
    let rows = contention(trace)?;
    let mut total = 0u64;
    let mut budget = 0u64;
    let mut worst = 0u64;
    for r in &rows {
        let bound = r.interval.min(n as u64) + 1;
        if r.established > bound {
            return Ok(Verdict::fail(
                "context switch",
                format!(
                    "passage of {} on instance {} saw {} establishments, bound {bound}",
                    r.passage.pid, r.passage.instance, r.established
                ),
                Counterexample::Events(window(trace, r.passage.announce, r.passage.enter)),
            ));
        }
        worst = worst.max(r.established);
        total += r.established;
        budget += r.point + 1;
    }
    if total > budget {
        return Ok(Verdict::fail(
            "context switch",
            format!("{total} establishments exceed amortized bound {budget}"),
            Counterexample::Events(Vec::new()),
        ));
    }
    Ok(Verdict::pass(
        "context switch",
        format!("{} passages, worst {worst}, total {total} within {budget}", rows.len()),
    ))
}

fn window(trace: &[TraceEvent], from: u64, to: u64) -> Vec<TraceEvent> {
    trace.iter().filter(|e| e.seq >= from && e.seq <= to).copied().collect()
}

/// Combined counters of several processes.
pub fn merged_metrics<'a, I: IntoIterator<Item = &'a Metrics>>(all: I) -> Metrics {
    let mut m = Metrics::default();
    for x in all {
        m.absorb(x);
    }
    m
}

/// Entry sections of a homogeneous workload: at most two outer iterations,
/// at most one failed adjourned-check per wait, and at most `bound` shared
/// operations.
pub fn check_concurrent_entering(metrics: &Metrics, bound: u64) -> Verdict {
    let name = "concurrent entering";
    let detail = format!(
        "{} entries: max outer iterations {}, max spin failures {}, max entry ops {} (bound {bound})",
        metrics.entries, metrics.max_outer_iterations, metrics.max_spin_failures, metrics.max_entry_ops
    );
    if metrics.max_outer_iterations > 2 || metrics.max_spin_failures > 1 || metrics.max_entry_ops > bound {
        Verdict::fail(name, detail, Counterexample::None)
    } else {
        Verdict::pass(name, detail)
    }
}

/// Every exit section used at most `bound` shared operations.
pub fn check_bounded_exit(metrics: &Metrics, bound: u64) -> Verdict {
    let name = "bounded exit";
    let detail = format!("{} exits: max exit ops {} (bound {bound})", metrics.exits, metrics.max_exit_ops);
    if metrics.max_exit_ops > bound {
        Verdict::fail(name, detail, Counterexample::None)
    } else {
        Verdict::pass(name, detail)
    }
}

/// Space audit for a reclaiming lock at quiescence: node count is
/// `m + 6n^2`, nothing was allocated after initialization, every node sits
/// in exactly one pool or at a head, and no acquisition reused a node held
/// in a hazard slot since before its retirement.
pub fn check_memory<'a, M, I>(gme: &Gme<M>, contexts: I) -> Verdict
where
    M: SharedMemory,
    I: IntoIterator<Item = &'a ProcessContext>,
{
    let name = "memory";
    let expected = gme.config().pooled_node_count();
    let nodes = gme.nodes_allocated();
    if nodes != expected {
        return Verdict::fail(name, format!("{nodes} nodes, expected {expected}"), Counterexample::None);
    }
    let cells = gme.memory().cell_count();
    let init_end = gme.layout().init_end.0;
    if cells != init_end {
        return Verdict::fail(
            name,
            format!("{} cells allocated after initialization", cells - init_end),
            Counterexample::None,
        );
    }
    if let Err(e) = gme.audit_pools(contexts) {
        return Verdict::fail(name, e, Counterexample::None);
    }
    let mut detail = format!("{nodes} nodes, pools consistent");
    if let Some(audit) = gme.audit() {
        let audit = audit.lock().unwrap();
        if let Some(v) = audit.violations().first() {
            return Verdict::fail(name, format!("hazard violation: {v:?}"), Counterexample::None);
        }
        detail.push_str(&format!(", {} acquisitions audited", audit.acquisitions()));
    }
    Verdict::pass(name, detail)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(seq: u64, pid: u32, instance: u32, session: u64, kind: TraceKind) -> TraceEvent {
        TraceEvent { seq, pid: ProcessId::new(pid), instance, session, kind }
    }

    use TraceKind::*;

    #[test]
    fn same_session_overlap_passes() {
        let t = [ev(0, 1, 1, 3, EnterReturn), ev(1, 2, 1, 3, EnterReturn), ev(2, 1, 1, 3, ExitCall), ev(3, 2, 1, 3, ExitCall)];
        assert!(check_gme(&t).unwrap().passed);
    }

    #[test]
    fn conflicting_overlap_fails_with_both_events() {
        let t = [ev(0, 1, 1, 3, EnterReturn), ev(1, 2, 1, 5, EnterReturn)];
        let v = check_gme(&t).unwrap();
        assert!(!v.passed);
        assert_eq!(v.counterexample, Counterexample::Events(vec![t[0], t[1]]));
    }

    #[test]
    fn different_instances_pass() {
        let t = [ev(0, 1, 1, 3, EnterReturn), ev(1, 2, 2, 5, EnterReturn)];
        assert!(check_gme(&t).unwrap().passed);
    }

    #[test]
    fn non_alternating_is_harness_error() {
        let t = [ev(0, 1, 1, 3, EnterReturn), ev(1, 1, 1, 3, EnterReturn)];
        assert!(check_gme(&t).is_err());
        assert!(check_gme(&[ev(0, 1, 1, 3, ExitCall)]).is_err());
    }

    #[test]
    fn sparse_max_matches_naive() {
        let v: Vec<u32> = (0..37).map(|i| (i * 7919 % 23) as u32).collect();
        let t = SparseMax::new(v.clone());
        for lo in 0..v.len() {
            for hi in lo..v.len() {
                assert_eq!(t.max(lo, hi), *v[lo..=hi].iter().max().unwrap());
            }
        }
    }

    #[test]
    fn solitary_passage_contention() {
        let t = [
            ev(0, 1, 1, 4, Announce),
            ev(1, 1, 1, 4, SessionEstablished),
            ev(2, 1, 1, 4, Retire),
            ev(3, 1, 1, 4, EnterReturn),
            ev(4, 1, 1, 4, ExitCall),
        ];
        let rows = contention(&t).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].established, rows[0].interval, rows[0].point), (1, 1, 1));
        assert!(check_context_switch(&t, 1).unwrap().passed);
    }

    #[test]
    fn excess_establishments_fail() {
        let mut t = vec![ev(0, 1, 1, 4, Announce)];
        for s in 1..=3 {
            t.push(ev(s, 2, 1, 9, SessionEstablished));
        }
        t.push(ev(4, 1, 1, 4, EnterReturn));
        t.push(ev(5, 1, 1, 4, ExitCall));
        assert!(!check_context_switch(&t, 4).unwrap().passed);
    }
}
