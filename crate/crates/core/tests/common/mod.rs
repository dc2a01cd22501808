//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use std::cell::RefCell;
use std::collections::{BTreeSet, HashSet};
use std::rc::Rc;

use fsgme::memory::{CellId, ProcessId, ScheduleSource, SharedMemory, SimMemory, SimOutcome, Simulation};

/// One cell operation in a straight-line test program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Read(usize),
    Write(usize, u64),
    Cas(usize, u64, u64),
    Faa(usize, i64),
}

pub type Program = Vec<Op>;

/// Final cell values and, per process, the result of each operation
/// (reads and FAA give the old value, CAS gives 0/1, writes give 0).
pub type Outcome = (Vec<u64>, Vec<Vec<u64>>);

/// Reference semantics on a plain vector, written without the library.
pub fn apply(cells: &mut [u64], op: Op) -> u64 {
    match op {
        Op::Read(c) => cells[c],
        Op::Write(c, v) => {
            cells[c] = v;
            0
        }
        Op::Cas(c, old, new) => {
            if cells[c] == old {
                cells[c] = new;
                1
            } else {
                0
            }
        }
        Op::Faa(c, d) => {
            let prior = cells[c];
            cells[c] = prior.wrapping_add(d as u64);
            prior
        }
    }
}

/// Runs `programs` under one interleaving with the reference semantics.
pub fn oracle_run(programs: &[Program], cells: usize, schedule: &[usize]) -> Outcome {
    let mut values = vec![0u64; cells];
    let mut pcs = vec![0usize; programs.len()];
    let mut results = vec![Vec::new(); programs.len()];
    for &p in schedule {
        let op = programs[p][pcs[p]];
        pcs[p] += 1;
        results[p].push(apply(&mut values, op));
    }
    (values, results)
}

/// Every interleaving of the programs, as process indices.
pub fn all_schedules(programs: &[Program]) -> Vec<Vec<usize>> {
    fn go(left: &mut [usize], cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left.iter().all(|&l| l == 0) {
            out.push(cur.clone());
            return;
        }
        for p in 0..left.len() {
            if left[p] > 0 {
                left[p] -= 1;
                cur.push(p);
                go(left, cur, out);
                cur.pop();
                left[p] += 1;
            }
        }
    }
    let mut left: Vec<usize> = programs.iter().map(|p| p.len()).collect();
    let mut out = Vec::new();
    go(&mut left, &mut Vec::new(), &mut out);
    out
}

/// Outcomes of all interleavings by brute-force recursion over the
/// reference semantics. Partial results fix the program counters, so
/// (values, results) identifies a reachable state and repeats are skipped.
pub fn oracle_outcomes(programs: &[Program], cells: usize) -> BTreeSet<Outcome> {
    fn go(
        programs: &[Program],
        values: &mut Vec<u64>,
        results: &mut Vec<Vec<u64>>,
        seen: &mut HashSet<Outcome>,
        out: &mut BTreeSet<Outcome>,
    ) {
        if !seen.insert((values.clone(), results.clone())) {
            return;
        }
        let mut done = true;
        for p in 0..programs.len() {
            let pc = results[p].len();
            if pc == programs[p].len() {
                continue;
            }
            done = false;
            let saved = values.clone();
            let r = apply(values, programs[p][pc]);
            results[p].push(r);
            go(programs, values, results, seen, out);
            results[p].pop();
            *values = saved;
        }
        if done {
            out.insert((values.clone(), results.clone()));
        }
    }
    let mut results = vec![Vec::new(); programs.len()];
    let mut out = BTreeSet::new();
    go(programs, &mut vec![0; cells], &mut results, &mut HashSet::new(), &mut out);
    out
}

/// A simulation of `programs` over fresh simulated cells.
pub struct SimRun {
    pub mem: Rc<SimMemory>,
    pub sim: Simulation<'static>,
    pub base: CellId,
    pub results: Vec<Rc<RefCell<Vec<u64>>>>,
}

impl SimRun {
    pub fn new(programs: &[Program], cells: usize) -> SimRun {
        let mem = Rc::new(SimMemory::new());
        let base = mem.alloc(cells);
        let mut sim = Simulation::new();
        let mut results = Vec::new();
        for (i, program) in programs.iter().enumerate() {
            let pid = ProcessId::from_index(i);
            let out = Rc::new(RefCell::new(Vec::new()));
            results.push(out.clone());
            let (m, program) = (mem.clone(), program.clone());
            sim.spawn(&mem, pid, async move {
                for op in program {
                    let r = match op {
                        Op::Read(c) => m.read(pid, base.offset(c)).await,
                        Op::Write(c, v) => {
                            m.write(pid, base.offset(c), v).await;
                            0
                        }
                        Op::Cas(c, old, new) => m.cas(pid, base.offset(c), old, new).await as u64,
                        Op::Faa(c, d) => m.faa(pid, base.offset(c), d).await,
                    };
                    out.borrow_mut().push(r);
                }
            });
        }
        SimRun { mem, sim, base, results }
    }

    pub fn outcome(&self, cells: usize) -> Outcome {
        let values = (0..cells).map(|c| self.mem.peek(self.base.offset(c))).collect();
        (values, self.results.iter().map(|r| r.borrow().clone()).collect())
    }
}

/// Runs one interleaving on the simulated backend.
pub fn sim_run(programs: &[Program], cells: usize, schedule: &[usize]) -> Outcome {
    let mut run = SimRun::new(programs, cells);
    let pids = schedule.iter().map(|&p| ProcessId::from_index(p)).collect();
    let outcome = run.sim.run(&run.mem, ScheduleSource::Explicit(pids), u64::MAX).unwrap();
    assert_eq!(outcome, SimOutcome::Quiescent { steps: schedule.len() as u64 });
    run.outcome(cells)
}

/// Outcomes of all interleavings on the simulated backend, found by
/// depth-first search that replays each pending prefix and merges equal
/// states.
pub fn sim_outcomes(programs: &[Program], cells: usize) -> BTreeSet<Outcome> {
    let mut out = BTreeSet::new();
    let mut seen = HashSet::new();
    let mut pending: Vec<Vec<usize>> = vec![Vec::new()];
    while let Some(mut prefix) = pending.pop() {
        let mut run = SimRun::new(programs, cells);
        for &p in &prefix {
            run.sim.step(&run.mem, ProcessId::from_index(p)).unwrap();
        }
        loop {
            let state = run.outcome(cells);
            if !seen.insert(state.clone()) {
                break;
            }
            let live: Vec<usize> = (0..programs.len())
                .filter(|&p| !run.sim.is_finished(ProcessId::from_index(p)))
                .collect();
            let Some((&first, rest)) = live.split_first() else {
                out.insert(state);
                break;
            };
            for &p in rest {
                let mut next = prefix.clone();
                next.push(p);
                pending.push(next);
            }
            run.sim.step(&run.mem, ProcessId::from_index(first)).unwrap();
            prefix.push(first);
        }
    }
    out
}

/// A seeded straight-line program mix over `cells` cells with small
/// constants, so CAS both succeeds and fails.
pub fn random_programs(seed: u64, procs: usize, len: usize, cells: usize) -> Vec<Program> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..procs)
        .map(|_| {
            (0..len)
                .map(|_| {
                    let c = rng.random_range(0..cells);
                    match rng.random_range(0..4) {
                        0 => Op::Read(c),
                        1 => Op::Write(c, rng.random_range(0..3)),
                        2 => Op::Cas(c, rng.random_range(0..3), rng.random_range(0..3)),
                        _ => Op::Faa(c, rng.random_range(-1..=2)),
                    }
                })
                .collect()
        })
        .collect()
}
