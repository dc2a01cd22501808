//! Throughput benchmark: worker threads repeatedly enter, run a short
//! critical section and exit, for the group lock and a plain ticket lock.

mod baseline;

use std::fmt;
use std::hint::black_box;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering::Relaxed, Ordering::SeqCst};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::context::ProcessContext;
use crate::gme::{Config, Gme};
use crate::memory::NativeMemory;
use crate::node::SessionId;
use crate::trace::{merge, TraceEvent, TraceKind, TraceRecorder, TraceSink};
use crate::verify::{check_gme, Verdict};

pub use baseline::{TicketContext, TicketLock};

pub const CSV_HEADER: &str = "ThreadCount,Sessions,Distribution,Algorithm,Throughput,StdDev";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    FsGme,
    FsGmeDsm,
    MeBaseline,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::FsGme, Algorithm::FsGmeDsm, Algorithm::MeBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FsGme => "fs-gme",
            Algorithm::FsGmeDsm => "fs-gme-dsm",
            Algorithm::MeBaseline => "me-baseline",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| BenchError::Config(format!("unknown algorithm `{s}`")))
    }
}

/// How sessions are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    Uniform,
    /// Sessions 1 and 2 get `p_hot` of the requests, `split` of that mass
    /// going to session 1. The rest is uniform over the other sessions.
    Skewed { p_hot: f64, split: f64 },
}

impl Distribution {
    pub const SKEWED: Distribution = Distribution::Skewed { p_hot: 0.9, split: 0.5 };

    pub fn name(&self) -> &'static str {
        match self {
            Distribution::Uniform => "uniform",
            Distribution::Skewed { .. } => "skewed",
        }
    }

    /// Draws a session in `1..=sessions`.
    pub fn sample<R: Rng>(&self, rng: &mut R, sessions: u64) -> SessionId {
        match *self {
            Distribution::Uniform => rng.random_range(1..=sessions),
            Distribution::Skewed { p_hot, split } => {
                if sessions <= 2 || rng.random_bool(p_hot) {
                    if sessions == 1 || rng.random_bool(split) {
                        1
                    } else {
                        2
                    }
                } else {
                    rng.random_range(3..=sessions)
                }
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not write {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("lock construction failed: {0}")]
    Lock(#[from] crate::error::GmeError),
}

/// One sweep over thread counts, session counts and algorithms.
#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub threads: Vec<usize>,
    pub sessions: Vec<u64>,
    pub distribution: Distribution,
    /// Length of one run, warmup included.
    pub duration: Duration,
    /// Initial part of each run whose passages are not counted.
    pub warmup: Duration,
    pub runs: usize,
    pub seed: u64,
    pub algorithms: Vec<Algorithm>,
    /// Record enter/exit events on every run and check them.
    pub verify: bool,
    /// Pin worker `i` to CPU `i mod parallelism`.
    pub pin: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            threads: default_threads(),
            sessions: vec![2],
            distribution: Distribution::Uniform,
            duration: Duration::from_secs(2),
            warmup: Duration::from_millis(500),
            runs: 3,
            seed: 42,
            algorithms: vec![Algorithm::FsGme, Algorithm::MeBaseline],
            verify: false,
            pin: false,
        }
    }
}

/// 1, 2, 4, 8, 16, 32, 48, keeping counts up to the machine's parallelism.
pub fn default_threads() -> Vec<usize> {
    let cap = std::thread::available_parallelism().map_or(1, |n| n.get());
    [1, 2, 4, 8, 16, 32, 48].into_iter().filter(|&t| t <= cap).collect()
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |msg: String| Err(BenchError::Config(msg));
        if self.threads.is_empty() || self.threads.contains(&0) {
            return bad("thread counts must be at least 1".into());
        }
        if self.sessions.is_empty() || self.sessions.contains(&0) {
            return bad("session counts must be at least 1".into());
        }
        if self.warmup >= self.duration {
            return bad(format!("warmup {:?} not shorter than duration {:?}", self.warmup, self.duration));
        }
        if self.runs == 0 {
            return bad("need at least one run".into());
        }
        if self.algorithms.is_empty() {
            return bad("no algorithm selected".into());
        }
        if let Distribution::Skewed { p_hot, split } = self.distribution {
            if !(0.0..=1.0).contains(&p_hot) || !(0.0..=1.0).contains(&split) {
                return bad("skew probabilities must lie in [0, 1]".into());
            }
        }
        Ok(())
    }
}

/// Mean and spread of one sweep cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputRow {
    pub threads: usize,
    pub sessions: u64,
    pub distribution: &'static str,
    pub algorithm: Algorithm,
    /// Critical sections per second, averaged over runs.
    pub throughput: f64,
    /// Sample standard deviation over runs.
    pub stddev: f64,
    pub samples: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ThroughputReport {
    pub rows: Vec<ThroughputRow>,
    /// Failed checks of runs made with `verify`.
    pub failures: Vec<Verdict>,
    pub verified_runs: usize,
}

/// Mean and sample standard deviation.
pub fn mean_stddev(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Runs every cell of the sweep, in thread, session, algorithm order.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<ThroughputReport, BenchError> {
    cfg.validate()?;
    let mut report = ThroughputReport::default();
    for &threads in &cfg.threads {
        for &sessions in &cfg.sessions {
            for &algorithm in &cfg.algorithms {
                let mut samples = Vec::with_capacity(cfg.runs);
                for run in 0..cfg.runs {
                    let seed = cfg.seed ^ (run as u64).wrapping_mul(0xa076_1d64_78bd_642f);
                    let outcome = run_once(cfg, algorithm, threads, sessions, seed)?;
                    samples.push(outcome.throughput);
                    if let Some(trace) = outcome.trace {
                        report.verified_runs += 1;
                        match check_gme(&trace) {
                            Ok(v) if v.passed => {}
                            Ok(v) => report.failures.push(v),
                            Err(e) => report.failures.push(Verdict::fail(
                                "group mutual exclusion",
                                e.to_string(),
                                crate::verify::Counterexample::None,
                            )),
                        }
                    }
                }
                let (throughput, stddev) = mean_stddev(&samples);
                report.rows.push(ThroughputRow {
                    threads,
                    sessions,
                    distribution: cfg.distribution.name(),
                    algorithm,
                    throughput,
                    stddev,
                    samples,
                });
            }
        }
    }
    Ok(report)
}

/// A lock the workers can drive.
trait BenchLock: Sync {
    type Ctx: Send;
    fn enter(&self, ctx: &mut Self::Ctx, session: SessionId);
    fn exit(&self, ctx: &mut Self::Ctx);
    fn events(ctx: &mut Self::Ctx) -> Vec<TraceEvent>;
}

impl BenchLock for Gme<NativeMemory> {
    type Ctx = ProcessContext;

    fn enter(&self, ctx: &mut ProcessContext, session: SessionId) {
        self.enter_blocking(ctx, 1, session).expect("enter rejected");
    }

    fn exit(&self, ctx: &mut ProcessContext) {
        self.exit_blocking(ctx, 1).expect("exit rejected");
    }

    fn events(ctx: &mut ProcessContext) -> Vec<TraceEvent> {
        ctx.take_trace()
    }
}

struct RunOutcome {
    throughput: f64,
    trace: Option<Vec<TraceEvent>>,
}

fn trace_kinds() -> [TraceKind; 2] {
    [TraceKind::EnterReturn, TraceKind::ExitCall]
}

fn run_once(
    cfg: &BenchConfig,
    algorithm: Algorithm,
    threads: usize,
    sessions: u64,
    seed: u64,
) -> Result<RunOutcome, BenchError> {
    match algorithm {
        Algorithm::FsGme | Algorithm::FsGmeDsm => {
            let mut config = Config::new(threads, 1).dsm(algorithm == Algorithm::FsGmeDsm);
            if cfg.verify {
                config = config.trace(TraceSink::PerContext);
            }
            let lock = Gme::native(config)?;
            let contexts = lock.contexts();
            Ok(drive(cfg, &lock, contexts, sessions, seed))
        }
        Algorithm::MeBaseline => {
            let recorder = cfg.verify.then(|| TraceRecorder::new(TraceSink::PerContext).with_kinds(&trace_kinds()));
            let lock = TicketLock::new(recorder);
            let contexts = (0..threads).map(|i| lock.context(i)).collect();
            Ok(drive(cfg, &lock, contexts, sessions, seed))
        }
    }
}

#[repr(align(128))]
#[derive(Default)]
struct Padded(AtomicU64);

fn drive<L: BenchLock>(cfg: &BenchConfig, lock: &L, contexts: Vec<L::Ctx>, sessions: u64, seed: u64) -> RunOutcome {
    let threads = contexts.len();
    let counters: Vec<Padded> = (0..threads).map(|_| Padded::default()).collect();
    let shared = AtomicU64::new(0);
    let stop = AtomicBool::new(false);
    let total = |c: &[Padded]| c.iter().map(|p| p.0.load(Relaxed)).sum::<u64>();
    let (counted, elapsed, mut contexts) = std::thread::scope(|s| {
        let handles: Vec<_> = contexts
            .into_iter()
            .enumerate()
            .map(|(i, mut ctx)| {
                let (counter, shared, stop) = (&counters[i].0, &shared, &stop);
                let distribution = cfg.distribution;
                let pin = cfg.pin;
                s.spawn(move || {
                    if pin {
                        pin_to_cpu(i);
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    let mut local = [0u64; 100];
                    while !stop.load(Relaxed) {
                        let session = distribution.sample(&mut rng, sessions);
                        let k = rng.random_range(1..=local.len());
                        lock.enter(&mut ctx, session);
                        shared.fetch_add(1, SeqCst);
                        for slot in local.iter_mut().take(k) {
                            *slot = black_box(*slot + 1);
                        }
                        lock.exit(&mut ctx);
                        counter.fetch_add(1, Relaxed);
                    }
                    ctx
                })
            })
            .collect();
        std::thread::sleep(cfg.warmup);
        let before = total(&counters);
        let start = Instant::now();
        std::thread::sleep(cfg.duration - cfg.warmup);
        let after = total(&counters);
        let elapsed = start.elapsed();
        stop.store(true, Relaxed);
        let contexts: Vec<L::Ctx> = handles.into_iter().map(|h| h.join().expect("worker panicked")).collect();
        (after - before, elapsed, contexts)
    });
    let trace = cfg.verify.then(|| merge(contexts.iter_mut().map(L::events)));
    RunOutcome { throughput: counted as f64 / elapsed.as_secs_f64(), trace }
}

fn pin_to_cpu(index: usize) {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    // SAFETY: the set is zero-initialized and only touched through libc's
    // CPU_* helpers; pid 0 targets the calling thread.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(index % cpus, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set);
    }
}

/// CSV text for `report`, header included.
pub fn to_csv(report: &ThroughputReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{:.2},{:.2}\n",
            r.threads, r.sessions, r.distribution, r.algorithm, r.throughput, r.stddev
        ));
    }
    out
}

/// Writes the CSV to `path` and run parameters to `<path>.meta`.
pub fn write_csv(report: &ThroughputReport, cfg: &BenchConfig, path: &Path) -> Result<(), BenchError> {
    if report.rows.is_empty() {
        return Err(BenchError::Config("empty report".into()));
    }
    let io = |source| BenchError::Io { path: path.display().to_string(), source };
    std::fs::write(path, to_csv(report)).map_err(io)?;
    let meta_path = format!("{}.meta", path.display());
    let mut meta = std::fs::File::create(&meta_path).map_err(io)?;
    let distribution = match cfg.distribution {
        Distribution::Uniform => "uniform".to_string(),
        Distribution::Skewed { p_hot, split } => format!("skewed p_hot={p_hot} split={split}"),
    };
    writeln!(
        meta,
        "seed={}\nrng=ChaCha8\ndistribution={distribution}\nduration_s={}\nwarmup_s={}\nruns={}\npin={}\nverify={}",
        cfg.seed,
        cfg.duration.as_secs_f64(),
        cfg.warmup.as_secs_f64(),
        cfg.runs,
        cfg.pin,
        cfg.verify
    )
    .map_err(io)?;
    Ok(())
}
