//! Seeded synthetic fixtures.
//!
//! The benign background is three processes with fixed call loops:
//!
//! * pid 433, a web server: `accept, read`, then either a file hit
//!   (`open, fstat, read, close`) or a miss (`stat`), then `write, close`.
//! * pid 612, a logger: `gettimeofday, write` or `open, write, close` on its log.
//! * pid 777, a scheduler waking every 10 ticks: `open, read, close, stat`.
//!
//! Cpu and memory jitter by at most 0.5 percent points and 16 kB per tick and
//! host load stays near 0.45 on 4 cores.
//!
//! The attack variant keeps the background and, for `burst_len` ticks starting
//! at `burst_start`, makes the server run the injected 3-gram
//! `mprotect, dup2, execve` three times per request. Those calls carry the
//! violation flag, the server's cpu jumps by 20 to 60 points and its memory
//! grows by 20 MB per tick, and host load rises to about 3.
//!
//! A held-out benign trace (separate random stream, timestamps after the run)
//! is produced alongside for false-positive measurement.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::records::Record;
use crate::signals::{HostSample, MetricSample};
use crate::tissue::AntigenEvent;

pub const SERVER_PID: u32 = 433;
pub const LOGGER_PID: u32 = 612;
pub const CRON_PID: u32 = 777;

/// The distinctive call sequence of the attack burst.
pub const INJECTED_NGRAM: [&str; 3] = ["mprotect", "dup2", "execve"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Benign,
    Attack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioParams {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub ticks: u64,
    pub burst_start: u64,
    pub burst_len: u64,
    /// Injected sequences per server request during the burst.
    pub burst_repeats: usize,
    pub holdout_ticks: u64,
}

impl ScenarioParams {
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        ScenarioParams {
            kind,
            seed,
            ticks: 500,
            burst_start: 300,
            burst_len: 20,
            burst_repeats: 3,
            holdout_ticks: 100,
        }
    }

    pub fn in_burst(&self, tick: u64) -> bool {
        self.kind == ScenarioKind::Attack && tick >= self.burst_start && tick < self.burst_start + self.burst_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub params: ScenarioParams,
    /// `S` records.
    pub trace: Vec<Record>,
    /// `M` and `H` records.
    pub metrics: Vec<Record>,
    /// Benign-only `S` records following the run.
    pub holdout: Vec<Record>,
}

impl Scenario {
    pub fn trace_text(&self) -> String {
        lines(&self.trace)
    }

    /// Metrics in the untagged `ts pid cpu mem` / `ts HOST load ncores` form.
    pub fn metrics_text(&self) -> String {
        self.metrics
            .iter()
            .map(|r| match r {
                Record::Metric(m) => format!("{}\t{}\t{}\t{}\n", m.timestamp, m.pid, m.cpu_pct, m.mem_kb),
                Record::Host(h) => format!("{}\tHOST\t{}\t{}\n", h.timestamp, h.load_avg, h.ncores),
                Record::Syscall(_) => unreachable!("metrics hold no syscalls"),
            })
            .collect()
    }

    pub fn holdout_text(&self) -> String {
        lines(&self.holdout)
    }
}

fn lines(records: &[Record]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

struct Emitter<'a> {
    ts: u64,
    out: &'a mut Vec<Record>,
}

impl Emitter<'_> {
    fn call(&mut self, pid: u32, name: &str, args: &[&str]) {
        self.flagged(pid, name, args, false);
    }

    fn flagged(&mut self, pid: u32, name: &str, args: &[&str], violation: bool) {
        self.out.push(Record::Syscall(AntigenEvent::new(
            self.ts,
            pid,
            name,
            args.iter().map(|s| s.to_string()).collect(),
            violation,
        )));
    }
}

fn benign_tick<R: Rng>(rng: &mut R, tick: u64, params: Option<&ScenarioParams>, out: &mut Vec<Record>) {
    let mut e = Emitter { ts: tick, out };
    let s = SERVER_PID;
    e.call(s, "accept", &["3"]);
    e.call(s, "read", &["4"]);
    if let Some(p) = params.filter(|p| p.in_burst(tick)) {
        for _ in 0..p.burst_repeats {
            e.flagged(s, INJECTED_NGRAM[0], &["0x7ffd5000"], true);
            e.flagged(s, INJECTED_NGRAM[1], &["4"], true);
            e.flagged(s, INJECTED_NGRAM[2], &["/bin/sh"], true);
        }
    }
    if rng.gen_bool(0.7) {
        e.call(s, "open", &["/var/www/html/index.html", "O_RDONLY"]);
        e.call(s, "fstat", &["5"]);
        e.call(s, "read", &["5"]);
        e.call(s, "close", &["5"]);
    } else {
        e.call(s, "stat", &["/var/www/html/favicon.ico"]);
    }
    e.call(s, "write", &["4"]);
    e.call(s, "close", &["4"]);

    let l = LOGGER_PID;
    if rng.gen_bool(0.6) {
        e.call(l, "gettimeofday", &[]);
        e.call(l, "write", &["3"]);
    } else {
        e.call(l, "open", &["/var/log/app.log", "O_APPEND"]);
        e.call(l, "write", &["5"]);
        e.call(l, "close", &["5"]);
    }

    if tick.is_multiple_of(10) {
        let c = CRON_PID;
        e.call(c, "open", &["/etc/crontab", "O_RDONLY"]);
        e.call(c, "read", &["3"]);
        e.call(c, "close", &["3"]);
        e.call(c, "stat", &["/etc/cron.d/backup"]);
    }
}

pub fn generate(params: &ScenarioParams) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut trace = Vec::new();
    let mut metrics = Vec::new();
    let mut server_mem = 52_000.0;
    for tick in 0..params.ticks {
        benign_tick(&mut rng, tick, Some(params), &mut trace);

        let burst = params.in_burst(tick);
        let mut server_cpu = 12.0 + rng.gen_range(-0.5..=0.5);
        server_mem += rng.gen_range(-16.0..=16.0);
        if burst {
            server_cpu += rng.gen_range(20.0..=60.0);
            server_mem += 20_000.0;
        }
        let mut procs = vec![
            (SERVER_PID, server_cpu, server_mem),
            (LOGGER_PID, 2.0 + rng.gen_range(-0.5..=0.5), 8_000.0 + rng.gen_range(-16.0..=16.0)),
        ];
        if tick.is_multiple_of(10) {
            procs.push((CRON_PID, 1.0 + rng.gen_range(-0.5..=0.5), 4_000.0 + rng.gen_range(-16.0..=16.0)));
        }
        for (pid, cpu, mem) in procs {
            metrics.push(Record::Metric(
                MetricSample::new(tick, pid, cpu, mem).expect("generated metrics are non-negative"),
            ));
        }
        let load = if burst { 3.0 } else { 0.4 } + rng.gen_range(0.0..=0.1);
        metrics.push(Record::Host(HostSample::new(tick, load, 4).expect("generated load is valid")));
    }

    let mut holdout_rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5_eed0_fb0b);
    let mut holdout = Vec::new();
    for tick in params.ticks..params.ticks + params.holdout_ticks {
        benign_tick(&mut holdout_rng, tick, None, &mut holdout);
    }

    Scenario {
        params: params.clone(),
        trace,
        metrics,
        holdout,
    }
}
