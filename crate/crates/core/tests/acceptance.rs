//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any failed. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 3 4`.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use fsgme::bench::{run_benchmark, Algorithm, BenchConfig, Distribution};
use fsgme::memory::{ProcessId, Region};
use fsgme::node::next_help_index;
use fsgme::verify::{
    check_bounded_exit, check_concurrent_entering, check_context_switch, check_gme, check_memory,
    explore_exhaustive, merged_metrics, replay, run_stress, ExploreLimits, Request, Scenario, SessionPattern,
    StressConfig, World, ENTRY_STEP_BOUND, EXIT_STEP_BOUND,
};
use fsgme::{Config, Gme, Metrics, TraceSink};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "GME safety under native stress", || safety_stress(false)),
        (2, "exhaustive n=2 soundness", || exhaustive_pair(false)),
        (3, "concurrent entering in O(1)", concurrent_entering),
        (4, "bounded exit", bounded_exit),
        (5, "context-switch bound", context_switch),
        (6, "constant space with clean audits", space),
        (7, "help index coverage", help_index),
        (8, "DSM local spinning", dsm_spinning),
        (9, "throughput direction vs ticket lock", throughput),
        (10, "backend oracle equivalence", oracle_equivalence),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (k, name, check) in criteria {
        if !only.is_empty() && !only.contains(&k) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {k:>2} {name}: {detail} [{took:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {k:>2} {name}: {detail} [{took:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn metrics_of(contexts: &[fsgme::ProcessContext]) -> Metrics {
    merged_metrics(contexts.iter().map(|c| c.metrics()))
}

fn safety_stress(dsm: bool) -> Check {
    let start = Instant::now();
    let mut passages = 0;
    for n in [2usize, 4, 8] {
        for sessions in [2u64, 4] {
            let lock = Config::new(n, 1).dsm(dsm).trace(TraceSink::PerContext);
            let cfg = StressConfig { seed: n as u64 * 10 + sessions, ..StressConfig::new(lock, 100_000, sessions) };
            let report = run_stress(&cfg).map_err(|e| e.to_string())?;
            let v = check_gme(&report.trace).map_err(|e| e.to_string())?;
            ensure(v.passed, || format!("n={n} sessions={sessions}: {v}"))?;
            ensure(report.witness_conflicts == 0, || {
                format!("n={n} sessions={sessions}: witness saw {} conflicts", report.witness_conflicts)
            })?;
            passages += n as u64 * cfg.passages;
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(60), || format!("took {took:.1?}, limit 60s"))?;
    Ok(format!("6 runs, {passages} passages, no violations"))
}

fn exhaustive_pair(dsm: bool) -> Check {
    let start = Instant::now();
    let config = Config::new(2, 1).reclaim(false).dsm(dsm);
    let same = explore_exhaustive(&Scenario::single_passage(config.clone(), &[1, 1]), ExploreLimits::default())
        .map_err(|e| e.to_string())?;
    let conflicting = explore_exhaustive(&Scenario::single_passage(config, &[1, 2]), ExploreLimits::default())
        .map_err(|e| e.to_string())?;
    for (name, r) in [("same", &same), ("conflicting", &conflicting)] {
        ensure(!r.truncated, || format!("{name}: state cap reached"))?;
        ensure(r.violations.is_empty(), || format!("{name}: {:?}", r.violations[0]))?;
    }
    ensure(same.most_inside >= 2, || "no schedule put both processes inside together".into())?;
    let took = start.elapsed();
    ensure(took < Duration::from_secs(30), || format!("took {took:.1?}, limit 30s"))?;
    Ok(format!(
        "{} + {} states, {} + {} complete runs, both inside together: yes",
        same.states, conflicting.states, same.terminals, conflicting.terminals
    ))
}

fn concurrent_entering() -> Check {
    let mut seen = Vec::new();
    for n in [2usize, 8] {
        let cfg = StressConfig { pattern: SessionPattern::Homogeneous, ..StressConfig::new(Config::new(n, 1), 10_000, 1) };
        let report = run_stress(&cfg).map_err(|e| e.to_string())?;
        let m = metrics_of(&report.contexts);
        ensure(m.entries == n as u64 * 10_000, || format!("n={n}: {} entries", m.entries))?;
        let v = check_concurrent_entering(&m, ENTRY_STEP_BOUND);
        ensure(v.passed, || format!("n={n}: {v}"))?;
        seen.push(format!(
            "n={n}: outer<={} spin-fail<={} ops<={}",
            m.max_outer_iterations, m.max_spin_failures, m.max_entry_ops
        ));
    }
    Ok(format!("{}; bound {ENTRY_STEP_BOUND} for both", seen.join(", ")))
}

fn bounded_exit() -> Check {
    let mut most = Vec::new();
    for n in [2usize, 8] {
        let mut max = 0;
        for (pattern, sessions) in
            [(SessionPattern::Uniform, 2), (SessionPattern::Fixed, n as u64), (SessionPattern::Homogeneous, 1)]
        {
            let cfg = StressConfig { pattern, seed: 3, ..StressConfig::new(Config::new(n, 2), 10_000, sessions) };
            let report = run_stress(&cfg).map_err(|e| e.to_string())?;
            let m = metrics_of(&report.contexts);
            let v = check_bounded_exit(&m, EXIT_STEP_BOUND);
            ensure(v.passed, || format!("n={n} {pattern:?}: {v}"))?;
            max = max.max(m.max_exit_ops);
        }
        most.push(format!("n={n}: max {max}"));
    }
    Ok(format!("{}; bound {EXIT_STEP_BOUND} for both", most.join(", ")))
}

fn context_switch() -> Check {
    // Every thread has its own session, so every pair conflicts.
    let lock = Config::new(4, 1).trace(TraceSink::PerContext);
    let cfg = StressConfig { pattern: SessionPattern::Fixed, cs_work: 64, ..StressConfig::new(lock, 25_000, 4) };
    let report = run_stress(&cfg).map_err(|e| e.to_string())?;
    let v = check_context_switch(&report.trace, 4).map_err(|e| e.to_string())?;
    ensure(v.passed, || format!("native n=4: {v}"))?;
    let gme = check_gme(&report.trace).map_err(|e| e.to_string())?;
    ensure(gme.passed, || format!("native n=4: {gme}"))?;

    // n=3 simulated, all schedules with up to three preemptions.
    let single = Scenario::single_passage(Config::new(3, 1).reclaim(false), &[1, 2, 3]);
    let a = explore_exhaustive(&single, ExploreLimits { max_states: 40_000_000, preemptions: Some(3), ..Default::default() })
        .map_err(|e| e.to_string())?;
    // Two passages each, alternating sessions so requests keep overtaking.
    let req = |session| Request { instance: 1, session };
    let programs = (0..3u64).map(|p| (0..2).map(|i| req((p + i) % 3 + 1)).collect()).collect();
    let repeated = Scenario { config: Config::new(3, 1).reclaim(false), programs };
    let b = explore_exhaustive(&repeated, ExploreLimits { max_states: 40_000_000, preemptions: Some(2), ..Default::default() })
        .map_err(|e| e.to_string())?;
    for (name, r) in [("single passage", &a), ("two passages", &b)] {
        ensure(!r.truncated, || format!("n=3 {name}: state cap reached"))?;
        ensure(r.violations.is_empty(), || format!("n=3 {name}: {:?}", r.violations[0]))?;
    }
    Ok(format!(
        "native n=4 {} passages ok; n=3 {} + {} states, {} + {} complete runs (3 and 2 preemptions)",
        4 * cfg.passages,
        a.states,
        b.states,
        a.terminals,
        b.terminals
    ))
}

fn space() -> Check {
    let (n, m) = (4usize, 8usize);
    let expected = m + 6 * n * n;
    let config = Config::new(n, m).audit(true);
    let fresh = Gme::native(config.clone()).map_err(|e| e.to_string())?;
    ensure(fresh.nodes_allocated() == expected, || format!("{} nodes after init", fresh.nodes_allocated()))?;
    let cfg = StressConfig { seed: 6, ..StressConfig::new(config, 100_000, 3) };
    let report = run_stress(&cfg).map_err(|e| e.to_string())?;
    let after = report.gme.nodes_allocated();
    ensure(after == expected, || format!("{after} nodes after the run, want {expected}"))?;
    let v = check_memory(&report.gme, &report.contexts);
    ensure(v.passed, || v.to_string())?;
    let audit = report.gme.audit().expect("audit on").lock().unwrap();
    ensure(audit.violations().is_empty(), || format!("{:?}", audit.violations()[0]))?;
    let total = n as u64 * cfg.passages;
    ensure(audit.acquisitions() == total, || format!("{} acquisitions for {total} passages", audit.acquisitions()))?;
    Ok(format!("{expected} nodes before and after {total} passages, audits clean"))
}

fn help_index() -> Check {
    for n in 1..=16usize {
        for start in 0..=3 * n as u64 {
            let mut k = start;
            let mut visited = BTreeSet::new();
            for _ in 0..n {
                k = next_help_index(k, n);
                visited.insert(k);
            }
            let want: BTreeSet<u64> = (1..=n as u64).collect();
            ensure(visited == want, || format!("n={n} start={start}: visited {visited:?}"))?;
        }
    }
    Ok("n=1..16, every start covers 1..=n in n steps".into())
}

/// Runs a random schedule to completion with the access log on and checks
/// that every access made while spinning hits the spinner's own slot.
fn dsm_simulated(scenario: &Scenario, seed: u64) -> Result<u64, String> {
    let mut world = World::new(scenario).map_err(|e| e.to_string())?;
    world.memory().enable_access_log();
    let ready = world.gme.layout().ready;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while !world.sim.is_quiescent() {
        let runnable = world.runnable();
        ensure(!runnable.is_empty(), || format!("seed {seed}: deadlock"))?;
        ensure(world.sim.executed().len() < 200_000, || format!("seed {seed}: no progress"))?;
        world.step(runnable[rng.random_range(0..runnable.len())]).map_err(|e| e.to_string())?;
    }
    let mut spins = 0;
    for r in world.memory().take_access_log() {
        if r.region != Region::Spin {
            continue;
        }
        spins += 1;
        let own = ready.offset(r.pid.index());
        ensure(r.cell == own && r.home == Some(r.pid), || {
            format!("seed {seed}: {} spun on {:?} (home {:?}), own slot {own:?}", r.pid, r.cell, r.home)
        })?;
    }
    let schedule: Vec<ProcessId> = world.sim.executed().to_vec();
    let (_, violation) = replay(scenario, &schedule).map_err(|e| e.to_string())?;
    ensure(violation.is_none(), || format!("seed {seed}: {violation:?}"))?;
    Ok(spins)
}

fn dsm_spinning() -> Check {
    let mut spins = 0;
    for reclaim in [true, false] {
        let config = Config::new(4, 1).dsm(true).reclaim(reclaim);
        for seed in 0..100 {
            let scenario = Scenario::random(config.clone(), 3, 4, seed);
            spins += dsm_simulated(&scenario, seed)?;
        }
    }
    ensure(spins > 0, || "no process ever waited".into())?;

    let lock = Config::new(4, 1).dsm(true);
    let cfg = StressConfig { pattern: SessionPattern::Fixed, ..StressConfig::new(lock, 20_000, 4) };
    let report = run_stress(&cfg).map_err(|e| e.to_string())?;
    let m = metrics_of(&report.contexts);
    ensure(m.spin_reads > 0, || "native run never waited".into())?;
    ensure(m.remote_spin_reads == 0, || format!("{} remote reads while spinning", m.remote_spin_reads))?;

    let stress = safety_stress(true).map_err(|e| format!("criterion 1 with DSM: {e}"))?;
    let pair = exhaustive_pair(true).map_err(|e| format!("criterion 2 with DSM: {e}"))?;
    Ok(format!(
        "{spins} simulated spin accesses all local; native {} spin reads, 0 remote; criterion 1: {stress}; criterion 2: {pair}",
        m.spin_reads
    ))
}

fn throughput() -> Check {
    let cfg = BenchConfig {
        threads: vec![8],
        sessions: vec![2],
        distribution: Distribution::Uniform,
        duration: Duration::from_secs(2),
        runs: 3,
        algorithms: vec![Algorithm::FsGme, Algorithm::MeBaseline],
        ..Default::default()
    };
    let report = run_benchmark(&cfg).map_err(|e| e.to_string())?;
    let mean = |a| report.rows.iter().find(|r| r.algorithm == a).map(|r| r.throughput).unwrap_or(0.0);
    let (gme, baseline) = (mean(Algorithm::FsGme), mean(Algorithm::MeBaseline));
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let detail = format!("fs-gme {gme:.0}/s, me-baseline {baseline:.0}/s on {cpus} CPUs");
    ensure(gme >= baseline, || detail.clone())?;
    Ok(detail)
}

fn oracle_equivalence() -> Check {
    let mut sets = 0;
    for (procs, len) in [(2, 6), (3, 4), (3, 6)] {
        for cells in [1, 2] {
            // One shared cell at full size has tens of thousands of outcomes.
            let seeds = if (procs, len, cells) == (3, 6, 1) { 3 } else { 10 };
            for seed in 0..seeds {
                let programs = common::random_programs(seed * 7 + procs as u64 + len as u64, procs, len, cells);
                let sim = common::sim_outcomes(&programs, cells);
                let oracle = common::oracle_outcomes(&programs, cells);
                ensure(sim == oracle, || format!("{procs}x{len} cells={cells} seed={seed}: outcome sets differ"))?;
                sets += 1;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for _ in 0..50 {
                    let mut left = vec![len; procs];
                    let mut schedule = Vec::new();
                    while left.iter().any(|&l| l > 0) {
                        let live: Vec<usize> = (0..procs).filter(|&p| left[p] > 0).collect();
                        let p = live[rng.random_range(0..live.len())];
                        left[p] -= 1;
                        schedule.push(p);
                    }
                    let got = common::sim_run(&programs, cells, &schedule);
                    ensure(got == common::oracle_run(&programs, cells, &schedule), || {
                        format!("{procs}x{len} seed={seed}: schedule {schedule:?} differs")
                    })?;
                }
            }
        }
    }
    Ok(format!("{sets} program sets, all interleavings and 50 sampled schedules each"))
}
