//! Drives the algorithm over simulated memory and checks invariants after
//! every shared operation.

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::context::{Metrics, ProcessContext};
use crate::error::GmeError;
use crate::gme::{Config, Gme};
use crate::memory::{Access, CellId, OpKind, OpRecord, ProcessId, SharedMemory, SimMemory, Simulation, StepError};
use crate::node::{InstanceId, SessionId, INSTANCE, NEXT, NODE_FIELDS, NUMBER, OWNER, PREV, SESSION, SIZE, STATE};
use crate::state::{is_adjourned, is_closed, is_well_formed, ALL_FLAGS, VACANT};
use crate::trace::{TraceEvent, TraceKind, TraceSink};

use super::Counterexample;

/// One passage a simulated process performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Request {
    pub instance: InstanceId,
    pub session: SessionId,
}

/// A lock configuration and the passages each process runs, in order.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: Config,
    pub programs: Vec<Vec<Request>>,
}

impl Scenario {
    /// Process `i` runs one passage on instance 1 with `sessions[i]`.
    pub fn single_passage(config: Config, sessions: &[SessionId]) -> Self {
        assert_eq!(config.processes, sessions.len());
        let programs = sessions.iter().map(|&session| vec![Request { instance: 1, session }]).collect();
        Scenario { config, programs }
    }

    /// Every process runs `passages` passages, picking instance and session
    /// with a seeded generator.
    pub fn random(config: Config, passages: usize, sessions: u64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = config.instances as u32;
        let programs = (0..config.processes)
            .map(|_| {
                (0..passages)
                    .map(|_| Request { instance: rng.random_range(1..=m), session: rng.random_range(1..=sessions) })
                    .collect()
            })
            .collect();
        Scenario { config, programs }
    }
}

/// A lock over simulated memory with one program per process. Each
/// program runs its passages with a single add on a harness cell as the
/// critical section.
pub struct World {
    pub gme: Rc<Gme<SimMemory>>,
    pub sim: Simulation<'static>,
    /// Cell touched by every critical section, allocated before the lock.
    pub cs_cell: CellId,
    finished: Vec<Rc<RefCell<Option<ProcessContext>>>>,
}

impl World {
    pub fn new(scenario: &Scenario) -> Result<World, GmeError> {
        let config = Config { trace: Some(TraceSink::Shared), ..scenario.config.clone() };
        if scenario.programs.len() != config.processes {
            return Err(GmeError::InvalidConfig(format!(
                "{} programs for {} processes",
                scenario.programs.len(),
                config.processes
            )));
        }
        let mem = SimMemory::new();
        mem.alloc(1);
        let cs_cell = mem.alloc(1);
        let gme = Rc::new(Gme::new(config, mem)?);
        let mut sim = Simulation::new();
        let mut finished = Vec::new();
        for (i, program) in scenario.programs.iter().enumerate() {
            let pid = ProcessId::from_index(i);
            let mut ctx = gme.context(pid.get())?;
            let slot = Rc::new(RefCell::new(None));
            finished.push(slot.clone());
            let lock = gme.clone();
            let program = program.clone();
            let body = async move {
                for r in program {
                    lock.enter(&mut ctx, r.instance, r.session).await.expect("enter rejected");
                    lock.memory().faa(pid, cs_cell, 1).await;
                    lock.exit(&mut ctx, r.instance).await.expect("exit rejected");
                }
                *slot.borrow_mut() = Some(ctx);
            };
            sim.spawn(gme.memory(), pid, body);
        }
        Ok(World { gme, sim, cs_cell, finished })
    }

    pub fn memory(&self) -> &SimMemory {
        self.gme.memory()
    }

    pub fn step(&mut self, pid: ProcessId) -> Result<(), StepError> {
        self.sim.step(self.gme.memory(), pid)
    }

    pub fn runnable(&self) -> Vec<ProcessId> {
        self.sim.runnable(self.gme.memory())
    }

    /// Contexts of the processes that finished their program.
    pub fn take_contexts(&self) -> Vec<ProcessContext> {
        self.finished.iter().filter_map(|s| s.borrow_mut().take()).collect()
    }

    /// Counters of the finished processes, combined.
    pub fn finished_metrics(&self) -> Metrics {
        let mut m = Metrics::default();
        for s in &self.finished {
            if let Some(ctx) = s.borrow().as_ref() {
                m.absorb(ctx.metrics());
            }
        }
        m
    }

    fn drain_trace(&self) -> Vec<TraceEvent> {
        self.gme.recorder().map(|r| r.take_shared()).unwrap_or_default()
    }
}

/// An invariant broken on some schedule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub property: &'static str,
    pub detail: String,
    pub counterexample: Counterexample,
}

#[derive(Clone, Debug, Default, Hash)]
struct Watch {
    entered: bool,
    established: u64,
    /// Passages that overlapped this one so far, itself included.
    interval: u64,
    /// Most passages active at once so far, itself included.
    point: u64,
}

/// Monitor state that influences future verdicts; part of the
/// exploration key.
#[derive(Clone, Debug, Default, Hash)]
struct Tracked {
    inside: BTreeMap<InstanceId, Vec<(ProcessId, SessionId)>>,
    watches: BTreeMap<(InstanceId, ProcessId), Watch>,
    established: u64,
    budget: u64,
}

type Broken = (&'static str, String);

/// Online checks fed with every executed operation and trace event.
#[derive(Clone, Debug)]
struct Monitor {
    n: u64,
    nodes: (usize, usize),
    tracked: Tracked,
    most_inside: usize,
    /// Set when nodes are allocated per passage: first cell of the first
    /// such node.
    fresh_from: Option<usize>,
    /// Fresh nodes whose address has been stored in some cell.
    published: BTreeSet<usize>,
}

impl Monitor {
    fn new(world: &World) -> Self {
        let gme = &world.gme;
        let start = gme.layout().nodes_start.0;
        let fresh_from = (!gme.config().reclaim).then(|| gme.layout().init_end.0);
        Monitor {
            n: gme.processes() as u64,
            nodes: (start, 0),
            tracked: Tracked::default(),
            most_inside: 0,
            fresh_from,
            published: BTreeSet::new(),
        }
    }

    /// True if `pid`'s next operation commutes with everything any other
    /// process can do from here on, so exploring it first loses no
    /// behavior. Only used when every passage allocates a fresh node:
    /// such a node is unknown to other processes until its address is
    /// stored, its session, instance and owner never change after that,
    /// and a set link, number or full retirement is never undone
    /// (`check_op` reports it if one is).
    fn invisible(&self, world: &World, pid: ProcessId) -> bool {
        let Some(fresh_from) = self.fresh_from else {
            return false;
        };
        let Some((cell, access)) = world.memory().pending(pid) else {
            return false;
        };
        let Some((node, field)) = self.node_field(cell) else {
            return false;
        };
        if node >= fresh_from && !self.published.contains(&node) {
            return true;
        }
        if access != Access::Read {
            return false;
        }
        let value = world.memory().peek(cell);
        match field {
            SESSION | INSTANCE | OWNER => true,
            NEXT | PREV | NUMBER => value != 0,
            STATE => value == ALL_FLAGS,
            _ => false,
        }
    }

    /// Runs all checks for the step that just executed.
    fn observe(&mut self, world: &World) -> Result<(), Broken> {
        self.nodes.1 = self.nodes.0 + world.gme.nodes_allocated() * NODE_FIELDS;
        if let Some(op) = world.memory().last_op() {
            if let Some(fresh_from) = self.fresh_from {
                let v = op.new as usize;
                if op.kind.is_mutation() && v >= fresh_from && (v - self.nodes.0).is_multiple_of(NODE_FIELDS) {
                    self.published.insert(v);
                }
            }
            self.check_op(world, op)?;
        }
        for e in world.drain_trace() {
            self.on_event(e)?;
        }
        if let Some(audit) = world.gme.audit() {
            if let Some(v) = audit.lock().unwrap().violations().first() {
                return Err(("hazard safety", format!("{v:?}")));
            }
        }
        Ok(())
    }

    fn node_field(&self, cell: CellId) -> Option<(usize, usize)> {
        let (start, end) = self.nodes;
        (cell.0 >= start && cell.0 < end).then(|| {
            let field = (cell.0 - start) % NODE_FIELDS;
            (cell.0 - field, field)
        })
    }

    fn check_op(&self, world: &World, op: OpRecord) -> Result<(), Broken> {
        if !op.kind.is_mutation() {
            return Ok(());
        }
        let Some((node, field)) = self.node_field(op.cell) else {
            return Ok(());
        };
        let (old, new) = (op.old, op.new);
        match field {
            STATE => {
                if !is_well_formed(new) {
                    return Err(("state lattice", format!("node {node} state {new:#b} not well formed")));
                }
                // Reinitialization clears a recycled node; retirement sets
                // every flag. Everything else only adds flags.
                let reinit = new == 0 && op.kind == OpKind::Write && self.fresh_from.is_none();
                if !reinit && new & old != old {
                    return Err(("state lattice", format!("node {node} state {old:#b} -> {new:#b} drops a flag")));
                }
                if new & VACANT != 0 && old & VACANT == 0 && new != ALL_FLAGS && !is_closed(old) {
                    return Err(("adjourn after close", format!("node {node} vacated from {old:#b}")));
                }
            }
            SIZE => {
                if (new as i64) < 0 {
                    return Err(("size", format!("node {node} size {}", new as i64)));
                }
            }
            NEXT => {
                if old != 0 && new != old && self.fresh_from.is_some() {
                    return Err(("link once", format!("node {node} next {old} changed to {new}")));
                }
                if matches!(op.kind, OpKind::Cas { success: true }) && old == 0 && new != 0 {
                    let state = world.memory().peek(CellId(node + STATE));
                    if !is_adjourned(state) {
                        return Err(("append after adjourn", format!("node {node} linked in state {state:#b}")));
                    }
                }
            }
            PREV | NUMBER if old != 0 && new != 0 && old != new => {
                let name = if field == PREV { "prev" } else { "number" };
                return Err(("idempotent writes", format!("node {node} {name} {old} overwritten with {new}")));
            }
            _ => {}
        }
        Ok(())
    }

    fn on_event(&mut self, e: TraceEvent) -> Result<(), Broken> {
        let t = &mut self.tracked;
        match e.kind {
            TraceKind::Announce => {
                let others: Vec<_> = t.watches.keys().filter(|(i, _)| *i == e.instance).copied().collect();
                let active = others.len() as u64 + 1;
                for k in &others {
                    let w = t.watches.get_mut(k).unwrap();
                    w.interval += 1;
                    w.point = w.point.max(active);
                }
                let w = Watch { entered: false, established: 0, interval: active, point: active };
                t.watches.insert((e.instance, e.pid), w);
            }
            TraceKind::SessionEstablished => {
                for ((i, _), w) in t.watches.iter_mut() {
                    if *i == e.instance && !w.entered {
                        w.established += 1;
                    }
                }
            }
            TraceKind::EnterReturn => {
                let inside = t.inside.entry(e.instance).or_default();
                if let Some(&(other, s)) = inside.iter().find(|(_, s)| *s != e.session) {
                    return Err((
                        "group mutual exclusion",
                        format!("{} entered session {} while {other} is in session {s}", e.pid, e.session),
                    ));
                }
                inside.push((e.pid, e.session));
                inside.sort_unstable();
                self.most_inside = self.most_inside.max(inside.len());
                if let Some(w) = t.watches.get_mut(&(e.instance, e.pid)) {
                    w.entered = true;
                }
            }
            TraceKind::ExitCall => {
                if let Some(inside) = t.inside.get_mut(&e.instance) {
                    inside.retain(|(p, _)| *p != e.pid);
                }
                if let Some(w) = t.watches.remove(&(e.instance, e.pid)) {
                    let bound = w.interval.min(self.n) + 1;
                    if w.established > bound {
                        return Err((
                            "context switch",
                            format!("{} saw {} establishments, bound {bound}", e.pid, w.established),
                        ));
                    }
                    t.established += w.established;
                    t.budget += w.point + 1;
                }
            }
            TraceKind::Retire => {}
        }
        Ok(())
    }

    fn at_quiescence(&self) -> Result<(), Broken> {
        let t = &self.tracked;
        if t.established > t.budget {
            return Err((
                "context switch",
                format!("{} establishments exceed amortized bound {}", t.established, t.budget),
            ));
        }
        Ok(())
    }
}

fn state_key(world: &World, monitor: &Monitor) -> u64 {
    let mut h = DefaultHasher::new();
    let mem = world.memory();
    mem.hash_values(&mut h);
    for pid in world.sim.pids() {
        mem.history(pid).hash(&mut h);
        world.sim.is_finished(pid).hash(&mut h);
    }
    monitor.tracked.hash(&mut h);
    h.finish()
}

/// Bounds on an exploration.
#[derive(Clone, Copy, Debug)]
pub struct ExploreLimits {
    /// Stop after visiting this many distinct states.
    pub max_states: u64,
    /// Do not extend schedules beyond this many steps.
    pub max_depth: usize,
    /// Only explore schedules that switch away from a still runnable
    /// process at most this many times. Runs still go to completion.
    pub preemptions: Option<usize>,
}

impl Default for ExploreLimits {
    fn default() -> Self {
        ExploreLimits { max_states: 5_000_000, max_depth: 10_000, preemptions: None }
    }
}

/// Result of an exploration.
#[derive(Clone, Debug, Default)]
pub struct ExploreReport {
    /// Distinct states visited (exhaustive) or steps taken (random).
    pub states: u64,
    /// Runs that reached quiescence.
    pub terminals: u64,
    pub longest: usize,
    /// Most processes seen inside one instance's critical section at once.
    pub most_inside: usize,
    /// A limit cut the search short.
    pub truncated: bool,
    pub violations: Vec<Violation>,
    /// Counters of the processes of every completed run, combined.
    pub metrics: Metrics,
}

impl ExploreReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && !self.truncated
    }
}

fn violation(broken: Broken, schedule: &[ProcessId], seed: Option<u64>) -> Violation {
    Violation {
        property: broken.0,
        detail: broken.1,
        counterexample: Counterexample::Schedule { schedule: schedule.to_vec(), seed },
    }
}

fn deadlock(world: &World) -> Broken {
    let waiting: Vec<String> = world
        .sim
        .pids()
        .into_iter()
        .filter(|p| !world.sim.is_finished(*p))
        .map(|p| p.to_string())
        .collect();
    ("deadlock freedom", format!("all of {} blocked", waiting.join(", ")))
}

/// Replays `schedule` from the initial state with all monitors on. Returns
/// the world and the first violation, if any.
pub fn replay(scenario: &Scenario, schedule: &[ProcessId]) -> Result<(World, Option<Violation>), GmeError> {
    let mut world = World::new(scenario)?;
    let mut monitor = Monitor::new(&world);
    for (i, &pid) in schedule.iter().enumerate() {
        world.step(pid).map_err(|e| GmeError::InvalidConfig(format!("schedule step {i}: {e}")))?;
        if let Err(b) = monitor.observe(&world) {
            return Ok((world, Some(violation(b, &schedule[..=i], None))));
        }
    }
    Ok((world, None))
}

/// Depth-first search over every interleaving, merging schedules that reach
/// the same memory, process histories and monitor state. With a preemption
/// bound, a state is revisited only when reached with budget to spare.
pub fn explore_exhaustive(scenario: &Scenario, limits: ExploreLimits) -> Result<ExploreReport, GmeError> {
    let mut report = ExploreReport::default();
    let mut seen: HashMap<u64, usize> = HashMap::new();
    let mut pending: Vec<(Vec<ProcessId>, Option<ProcessId>, usize)> = vec![(Vec::new(), None, 0)];
    while let Some((mut path, mut last, used)) = pending.pop() {
        let mut world = World::new(scenario)?;
        let mut monitor = Monitor::new(&world);
        let mut broken = None;
        for &pid in &path {
            world.step(pid).expect("replayed step refused");
            broken = monitor.observe(&world).err();
        }
        loop {
            report.most_inside = report.most_inside.max(monitor.most_inside);
            if let Some(b) = broken.take() {
                report.violations.push(violation(b, &path, None));
                break;
            }
            let mut key = state_key(&world, &monitor);
            if limits.preemptions.is_some() {
                key ^= (last.map_or(0, |p| p.get() as u64) + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            }
            match seen.get(&key) {
                Some(&before) if before <= used => break,
                _ => {
                    seen.insert(key, used);
                }
            }
            report.states += 1;
            report.longest = report.longest.max(path.len());
            if report.states >= limits.max_states {
                report.truncated = true;
                return Ok(report);
            }
            if world.sim.is_quiescent() {
                report.terminals += 1;
                report.metrics.absorb(&world.finished_metrics());
                if let Err(b) = monitor.at_quiescence() {
                    report.violations.push(violation(b, &path, None));
                }
                break;
            }
            let mut runnable = world.runnable();
            if runnable.is_empty() {
                report.violations.push(violation(deadlock(&world), &path, None));
                break;
            }
            if path.len() >= limits.max_depth {
                report.truncated = true;
                break;
            }
            if let Some(&pid) = runnable.iter().find(|&&p| monitor.invisible(&world, p)) {
                let issued = world.gme.recorder().map_or(0, |r| r.issued());
                world.step(pid).expect("runnable process refused a step");
                path.push(pid);
                broken = monitor.observe(&world).err();
                assert_eq!(
                    world.gme.recorder().map_or(0, |r| r.issued()),
                    issued,
                    "a step taken without branching emitted an event"
                );
                continue;
            }
            // Continuing the current process is free; leaving it while it
            // can still move costs one preemption.
            let mut switch_cost = 0;
            if let (Some(cap), Some(cur)) = (limits.preemptions, last) {
                if let Some(i) = runnable.iter().position(|&p| p == cur) {
                    runnable.swap(0, i);
                    if used >= cap {
                        runnable.truncate(1);
                    }
                    switch_cost = 1;
                }
            }
            for &pid in &runnable[1..] {
                let mut next = path.clone();
                next.push(pid);
                pending.push((next, Some(pid), used + switch_cost));
            }
            world.step(runnable[0]).expect("runnable process refused a step");
            path.push(runnable[0]);
            last = Some(runnable[0]);
            broken = monitor.observe(&world).err();
        }
        if report.violations.len() >= 16 {
            break;
        }
    }
    Ok(report)
}

/// Runs one random schedule per seed, choosing uniformly among runnable
/// processes. A run longer than `budget` steps is reported as a possible
/// livelock.
pub fn explore_random(
    scenario: &Scenario,
    seeds: std::ops::Range<u64>,
    budget: usize,
) -> Result<ExploreReport, GmeError> {
    let mut report = ExploreReport::default();
    for seed in seeds {
        let mut world = World::new(scenario)?;
        let mut monitor = Monitor::new(&world);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut steps = 0usize;
        let outcome = loop {
            if world.sim.is_quiescent() {
                break monitor.at_quiescence();
            }
            let runnable = world.runnable();
            if runnable.is_empty() {
                break Err(deadlock(&world));
            }
            if steps >= budget {
                break Err(("bounded run", format!("no quiescence within {budget} steps")));
            }
            let pid = runnable[rng.random_range(0..runnable.len())];
            world.step(pid).expect("runnable process refused a step");
            steps += 1;
            if let Err(b) = monitor.observe(&world) {
                break Err(b);
            }
        };
        report.states += steps as u64;
        report.longest = report.longest.max(steps);
        report.most_inside = report.most_inside.max(monitor.most_inside);
        match outcome {
            Ok(()) => {
                report.terminals += 1;
                report.metrics.absorb(&world.finished_metrics());
            }
            Err(b) => report.violations.push(violation(b, world.sim.executed(), Some(seed))),
        }
    }
    Ok(report)
}
