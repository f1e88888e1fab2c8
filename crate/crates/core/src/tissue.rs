//! The tissue: a bounded, time-indexed pool of observed system calls plus the
//! most recent signal vector of every process.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;

use crate::error::{Error, Result};
use crate::signals::SignalVector;

pub const DEFAULT_TISSUE_CAPACITY: usize = 512;

/// One observed system call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AntigenEvent {
    /// Assigned by [`TissueStore::ingest_syscall`].
    pub id: u64,
    pub timestamp: u64,
    pub pid: u32,
    pub syscall: String,
    pub args: Vec<String>,
    /// Set when the call matched no base-policy statement or hit a deny probe.
    pub violation: bool,
}

impl AntigenEvent {
    pub fn new(timestamp: u64, pid: u32, syscall: impl Into<String>, args: Vec<String>, violation: bool) -> Self {
        AntigenEvent {
            id: 0,
            timestamp,
            pid,
            syscall: syscall.into(),
            args,
            violation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TissueStore {
    clock: u64,
    capacity: usize,
    next_id: u64,
    last_timestamp: Option<u64>,
    buffer: VecDeque<AntigenEvent>,
    current_signals: BTreeMap<u32, SignalVector>,
}

impl Default for TissueStore {
    fn default() -> Self {
        TissueStore::with_capacity(DEFAULT_TISSUE_CAPACITY).expect("default capacity is positive")
    }
}

impl TissueStore {
    pub fn with_capacity(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("tissue_capacity must be >= 1"));
        }
        Ok(TissueStore {
            clock: 0,
            capacity,
            next_id: 0,
            last_timestamp: None,
            buffer: VecDeque::with_capacity(capacity),
            current_signals: BTreeMap::new(),
        })
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Buffered events, oldest first.
    pub fn events(&self) -> impl Iterator<Item = &AntigenEvent> {
        self.buffer.iter()
    }

    /// Appends a call, assigning it the next id. The oldest event is evicted when full.
    pub fn ingest_syscall(&mut self, mut record: AntigenEvent) -> Result<u64> {
        if record.syscall.is_empty() {
            return Err(Error::input("syscall name must not be empty"));
        }
        let floor = self.last_timestamp.unwrap_or(0).max(self.clock);
        if record.timestamp < floor {
            return Err(Error::input(format!(
                "timestamp regression: {} < {}",
                record.timestamp, floor
            )));
        }
        record.id = self.next_id;
        self.next_id += 1;
        self.last_timestamp = Some(record.timestamp);
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        let id = record.id;
        self.buffer.push_back(record);
        Ok(id)
    }

    pub fn ingest_signals(&mut self, pid: u32, sv: SignalVector) {
        self.current_signals.insert(pid, sv);
    }

    pub fn signals(&self, pid: u32) -> Option<&SignalVector> {
        self.current_signals.get(&pid)
    }

    pub fn all_signals(&self) -> &BTreeMap<u32, SignalVector> {
        &self.current_signals
    }

    /// Draws `n` events uniformly with replacement.
    pub fn sample_antigens<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<AntigenEvent> {
        if self.buffer.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| self.buffer[rng.gen_range(0..self.buffer.len())].clone())
            .collect()
    }

    /// The buffered call sequence of `anchor`'s process that ends at `anchor`,
    /// at most `len` events long, oldest first.
    pub fn fragment_ending_at(&self, anchor: &AntigenEvent, len: usize) -> Vec<AntigenEvent> {
        let Some(front) = self.buffer.front() else {
            return Vec::new();
        };
        if anchor.id < front.id {
            return Vec::new();
        }
        let idx = (anchor.id - front.id) as usize;
        if idx >= self.buffer.len() {
            return Vec::new();
        }
        let mut out: Vec<AntigenEvent> = self
            .buffer
            .range(..=idx)
            .rev()
            .filter(|e| e.pid == anchor.pid)
            .take(len)
            .cloned()
            .collect();
        out.reverse();
        out
    }

    pub fn advance(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ev(ts: u64, name: &str) -> AntigenEvent {
        AntigenEvent::new(ts, 1, name, vec![], false)
    }

    #[test]
    fn first_ingest_gets_id_zero() {
        let mut t = TissueStore::default();
        assert_eq!(t.ingest_syscall(ev(0, "open")).unwrap(), 0);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn fifo_eviction_is_oldest_first() {
        let mut t = TissueStore::with_capacity(3).unwrap();
        for (i, name) in ["a", "b", "c", "d"].iter().enumerate() {
            t.ingest_syscall(ev(i as u64, name)).unwrap();
        }
        assert_eq!(t.len(), 3);
        let names: Vec<_> = t.events().map(|e| e.syscall.as_str()).collect();
        assert_eq!(names, ["b", "c", "d"]);
    }

    #[test]
    fn ids_are_sequential() {
        let mut t = TissueStore::with_capacity(8).unwrap();
        let ids: Vec<u64> = (0..100).map(|i| t.ingest_syscall(ev(i, "read")).unwrap()).collect();
        assert_eq!(ids, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_regressions_and_empty_names() {
        let mut t = TissueStore::default();
        t.ingest_syscall(ev(5, "a")).unwrap();
        assert!(t.ingest_syscall(ev(4, "a")).is_err());
        assert!(t.ingest_syscall(ev(6, "")).is_err());
        let mut t = TissueStore::default();
        t.advance();
        t.advance();
        assert!(t.ingest_syscall(ev(1, "a")).is_err());
        assert!(TissueStore::with_capacity(0).is_err());
    }

    #[test]
    fn signals_last_writer_wins_per_pid() {
        let mut t = TissueStore::default();
        let a = SignalVector::new(1.0, 2.0, 3.0, 4.0).unwrap();
        let b = SignalVector::new(5.0, 6.0, 7.0, 8.0).unwrap();
        t.ingest_signals(1, a);
        assert_eq!(t.signals(1), Some(&a));
        t.ingest_signals(1, b);
        assert_eq!(t.signals(1), Some(&b));
        t.ingest_signals(2, a);
        assert_eq!(t.signals(1), Some(&b));
        assert_eq!(t.signals(2), Some(&a));
    }

    #[test]
    fn sampling_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = TissueStore::default();
        assert!(t.sample_antigens(&mut rng, 5).is_empty());
        t.ingest_syscall(ev(0, "only")).unwrap();
        let s = t.sample_antigens(&mut rng, 3);
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|e| e.syscall == "only"));
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let mut t = TissueStore::default();
        for i in 0..10 {
            t.ingest_syscall(ev(i, "x")).unwrap();
        }
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            t.sample_antigens(&mut rng, 4).iter().map(|e| e.id).collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
        // Frozen from a single recorded run under this seed.
        assert_eq!(draw(42), FROZEN_SEED_42);
    }

    const FROZEN_SEED_42: [u64; 4] = [9, 4, 6, 1];

    /// Pearson chi-square against a uniform distribution over 10 cells (9 dof).
    /// The 99% quantile of chi-square(9) is 21.666.
    #[test]
    fn sampling_is_uniform() {
        let mut t = TissueStore::default();
        for i in 0..10 {
            t.ingest_syscall(ev(i, "x")).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 20_000;
        let mut counts = [0usize; 10];
        for e in t.sample_antigens(&mut rng, draws) {
            counts[e.id as usize] += 1;
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 21.666, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn fragment_follows_one_pid() {
        let mut t = TissueStore::default();
        let calls = [(1, "a"), (2, "x"), (1, "b"), (2, "y"), (1, "c"), (1, "d")];
        let mut ids = vec![];
        for (i, (pid, name)) in calls.iter().enumerate() {
            ids.push(t.ingest_syscall(AntigenEvent::new(i as u64, *pid, *name, vec![], false)).unwrap());
        }
        let anchor = t.events().find(|e| e.syscall == "c").unwrap().clone();
        let names: Vec<_> = t.fragment_ending_at(&anchor, 7).into_iter().map(|e| e.syscall).collect();
        assert_eq!(names, ["a", "b", "c"]);
        let names: Vec<_> = t.fragment_ending_at(&anchor, 2).into_iter().map(|e| e.syscall).collect();
        assert_eq!(names, ["b", "c"]);
    }

    #[test]
    fn advance_counts_ticks() {
        let mut t = TissueStore::default();
        assert_eq!(t.advance(), 1);
        for _ in 0..9 {
            t.advance();
        }
        assert_eq!(t.clock(), 10);
    }
}
