//! Dendritic cells: signal fusion into output cytokines, antigen collection and
//! CSM-triggered migration.
//!
//! Each cell accumulates three outputs while immature:
//!
//! ```text
//! amp  = 1 + I/100
//! csm  += amp * (w_csm.P*P + w_csm.D*D + w_csm.S*S)
//! mat  += amp * (w_mat.P*P + w_mat.D*D - w_mat.Ssup*S)     (then mat = max(mat, 0))
//! semi += amp * (w_semi.S*S)
//! ```
//!
//! Once `csm >= migration_threshold` the cell stops collecting and is handed to
//! the lymph node with a context of `Mature` when `mat > semi` and
//! `SemiMature` otherwise.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::signals::SignalVector;
use crate::tissue::AntigenEvent;

pub const MIN_NGRAM: usize = 2;
pub const MAX_NGRAM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsmWeights {
    pub pamp: f64,
    pub danger: f64,
    pub safe: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatureWeights {
    pub pamp: f64,
    pub danger: f64,
    /// Subtracted: safe signal suppresses the mature output.
    pub safe_suppression: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemiWeights {
    pub safe: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightMatrix {
    pub csm: CsmWeights,
    pub mat: MatureWeights,
    pub semi: SemiWeights,
}

impl Default for WeightMatrix {
    fn default() -> Self {
        WeightMatrix {
            csm: CsmWeights {
                pamp: 2.0,
                danger: 1.0,
                safe: 1.0,
            },
            mat: MatureWeights {
                pamp: 2.0,
                danger: 1.0,
                safe_suppression: 1.5,
            },
            semi: SemiWeights { safe: 1.0 },
        }
    }
}

impl WeightMatrix {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("w_csm_pamp", self.csm.pamp),
            ("w_csm_danger", self.csm.danger),
            ("w_csm_safe", self.csm.safe),
            ("w_mat_safe_suppression", self.mat.safe_suppression),
            ("w_semi_safe", self.semi.safe),
        ];
        for (name, v) in checks {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("w_mat_pamp", self.mat.pamp), ("w_mat_danger", self.mat.danger)] {
            if !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcConfig {
    pub weights: WeightMatrix,
    pub threshold_min: f64,
    pub threshold_max: f64,
    pub peptide_capacity: usize,
    pub ngram_lengths: Vec<usize>,
    pub peptides_per_collection: usize,
    /// Antigens each immature cell samples from the tissue per tick.
    pub antigens_per_sample: usize,
}

impl Default for DcConfig {
    fn default() -> Self {
        DcConfig {
            weights: WeightMatrix::default(),
            threshold_min: 50.0,
            threshold_max: 150.0,
            peptide_capacity: 32,
            ngram_lengths: vec![3, 5, 7],
            peptides_per_collection: 8,
            antigens_per_sample: 2,
        }
    }
}

impl DcConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.threshold_min.is_finite() && self.threshold_min > 0.0) {
            return Err(Error::config("migration_threshold_min must be finite and > 0"));
        }
        if !self.threshold_max.is_finite() || self.threshold_min > self.threshold_max {
            return Err(Error::config(format!(
                "migration threshold range [{}, {}] is empty",
                self.threshold_min, self.threshold_max
            )));
        }
        if self.peptide_capacity == 0 {
            return Err(Error::config("peptide_capacity must be >= 1"));
        }
        if self.ngram_lengths.is_empty() {
            return Err(Error::config("ngram_lengths must not be empty"));
        }
        if let Some(bad) = self
            .ngram_lengths
            .iter()
            .find(|l| !(MIN_NGRAM..=MAX_NGRAM).contains(*l))
        {
            return Err(Error::config(format!(
                "n-gram length {bad} outside {MIN_NGRAM}..={MAX_NGRAM}"
            )));
        }
        Ok(())
    }

    /// Midpoint of the migration-threshold range.
    pub fn threshold_midpoint(&self) -> f64 {
        (self.threshold_min + self.threshold_max) / 2.0
    }

    pub fn max_ngram(&self) -> usize {
        self.ngram_lengths.iter().copied().max().unwrap_or(0)
    }
}

/// A fragment of antigen: a syscall-name n-gram with an optional argument prefix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Peptide {
    pub syscall_ngram: Vec<String>,
    pub arg_fragment: Option<String>,
    pub source_pids: BTreeSet<u32>,
}

impl Peptide {
    pub fn new(ngram: &[&str], arg_fragment: Option<&str>, pid: u32) -> Self {
        Peptide {
            syscall_ngram: ngram.iter().map(|s| s.to_string()).collect(),
            arg_fragment: arg_fragment.map(str::to_string),
            source_pids: BTreeSet::from([pid]),
        }
    }

    /// The peptide presented by a contiguous run of one process's calls.
    pub fn from_window(window: &[AntigenEvent]) -> Peptide {
        Peptide {
            syscall_ngram: window.iter().map(|e| e.syscall.clone()).collect(),
            arg_fragment: window_arg(window).and_then(arg_fragment),
            source_pids: window.iter().map(|e| e.pid).collect(),
        }
    }
}

/// First argument of the first call in the window that has any arguments.
pub(crate) fn window_arg(window: &[AntigenEvent]) -> Option<&str> {
    window
        .iter()
        .find(|e| !e.args.is_empty())
        .map(|e| e.args[0].as_str())
}

/// Path-like prefix of an argument: everything up to and including the last `/`,
/// or the whole argument when it has no `/`. Empty arguments give nothing.
pub fn arg_fragment(arg: &str) -> Option<String> {
    if arg.is_empty() {
        return None;
    }
    match arg.rfind('/') {
        Some(i) => Some(arg[..=i].to_string()),
        None => Some(arg.to_string()),
    }
}

/// Every sliding-window peptide of the configured lengths, per process, in
/// length-then-position order.
pub fn candidate_peptides(events: &[AntigenEvent], lengths: &[usize]) -> Vec<Peptide> {
    let mut by_pid: BTreeMap<u32, Vec<AntigenEvent>> = BTreeMap::new();
    for e in events {
        by_pid.entry(e.pid).or_default().push(e.clone());
    }
    let mut out = Vec::new();
    for &len in lengths {
        if len == 0 {
            continue;
        }
        for seq in by_pid.values() {
            out.extend(seq.windows(len).map(Peptide::from_window));
        }
    }
    out
}

/// Selects at most `limit` candidates uniformly without replacement, keeping their order.
pub fn select_peptides<R: Rng + ?Sized>(rng: &mut R, candidates: Vec<Peptide>, limit: usize) -> Vec<Peptide> {
    if candidates.len() <= limit {
        return candidates;
    }
    let mut picked = index::sample(rng, candidates.len(), limit).into_vec();
    picked.sort_unstable();
    let mut slots: Vec<Option<Peptide>> = candidates.into_iter().map(Some).collect();
    picked.into_iter().filter_map(|i| slots[i].take()).collect()
}

pub fn extract_peptides<R: Rng + ?Sized>(events: &[AntigenEvent], cfg: &DcConfig, rng: &mut R) -> Vec<Peptide> {
    select_peptides(rng, candidate_peptides(events, &cfg.ngram_lengths), cfg.peptides_per_collection)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcState {
    Immature,
    Migrated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DcContext {
    Mature,
    SemiMature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DendriticCell {
    pub id: u64,
    state: DcState,
    csm: f64,
    semi: f64,
    mat: f64,
    migration_threshold: f64,
    peptide_capacity: usize,
    peptides: Vec<Peptide>,
}

/// A cell that has left the tissue, with its outputs frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct MigratedDC {
    pub dc_id: u64,
    pub context: DcContext,
    pub csm: f64,
    pub semi: f64,
    pub mat: f64,
    pub peptides: Vec<Peptide>,
}

impl DendriticCell {
    pub fn new<R: Rng + ?Sized>(id: u64, rng: &mut R, cfg: &DcConfig) -> Result<Self> {
        if cfg.threshold_min > cfg.threshold_max {
            return Err(Error::config(format!(
                "migration threshold range [{}, {}] is empty",
                cfg.threshold_min, cfg.threshold_max
            )));
        }
        let threshold = if cfg.threshold_min == cfg.threshold_max {
            cfg.threshold_min
        } else {
            rng.gen_range(cfg.threshold_min..=cfg.threshold_max)
        };
        Ok(DendriticCell {
            id,
            state: DcState::Immature,
            csm: 0.0,
            semi: 0.0,
            mat: 0.0,
            migration_threshold: threshold,
            peptide_capacity: cfg.peptide_capacity,
            peptides: Vec::new(),
        })
    }

    pub fn state(&self) -> DcState {
        self.state
    }

    pub fn csm(&self) -> f64 {
        self.csm
    }

    pub fn semi(&self) -> f64 {
        self.semi
    }

    pub fn mat(&self) -> f64 {
        self.mat
    }

    pub fn migration_threshold(&self) -> f64 {
        self.migration_threshold
    }

    pub fn peptides(&self) -> &[Peptide] {
        &self.peptides
    }

    fn ensure_immature(&self, op: &str) -> Result<()> {
        match self.state {
            DcState::Immature => Ok(()),
            DcState::Migrated => Err(Error::State(format!("{op} on migrated dendritic cell {}", self.id))),
        }
    }

    pub fn process_signals(&mut self, sv: &SignalVector, w: &WeightMatrix) -> Result<()> {
        self.ensure_immature("process_signals")?;
        let amp = 1.0 + sv.inflammation / 100.0;
        let (p, d, s) = (sv.pamp, sv.danger, sv.safe);
        self.csm += amp * (w.csm.pamp * p + w.csm.danger * d + w.csm.safe * s);
        self.mat = (self.mat + amp * (w.mat.pamp * p + w.mat.danger * d - w.mat.safe_suppression * s)).max(0.0);
        self.semi += amp * (w.semi.safe * s);
        Ok(())
    }

    /// Stores peptides up to capacity; overflow is dropped.
    pub fn collect_antigen(&mut self, peptides: Vec<Peptide>) -> Result<()> {
        self.ensure_immature("collect_antigen")?;
        let room = self.peptide_capacity.saturating_sub(self.peptides.len());
        self.peptides.extend(peptides.into_iter().take(room));
        Ok(())
    }

    pub fn context(&self) -> DcContext {
        dc_context(self.mat, self.semi)
    }

    pub fn check_migration(&mut self) -> Option<MigratedDC> {
        if self.state != DcState::Immature || self.csm < self.migration_threshold {
            return None;
        }
        self.state = DcState::Migrated;
        Some(MigratedDC {
            dc_id: self.id,
            context: self.context(),
            csm: self.csm,
            semi: self.semi,
            mat: self.mat,
            peptides: self.peptides.clone(),
        })
    }
}

/// Mature iff `mat > semi`; a tie is semi-mature.
pub fn dc_context(mat: f64, semi: f64) -> DcContext {
    if mat > semi {
        DcContext::Mature
    } else {
        DcContext::SemiMature
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sv(p: f64, d: f64, s: f64, i: f64) -> SignalVector {
        SignalVector::new(p, d, s, i).unwrap()
    }

    fn fresh(threshold: f64) -> DendriticCell {
        let cfg = DcConfig {
            threshold_min: threshold,
            threshold_max: threshold,
            ..DcConfig::default()
        };
        DendriticCell::new(0, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap()
    }

    fn events(names: &[&str]) -> Vec<AntigenEvent> {
        names
            .iter()
            .enumerate()
            .map(|(i, n)| AntigenEvent {
                id: i as u64,
                ..AntigenEvent::new(i as u64, 1, *n, vec![], false)
            })
            .collect()
    }

    /// Straight-line reference for a sequence of updates under the given weights.
    fn oracle(seq: &[SignalVector], w: &WeightMatrix) -> (f64, f64, f64) {
        let (mut csm, mut semi, mut mat) = (0.0f64, 0.0f64, 0.0f64);
        for v in seq {
            let a = 1.0 + v.inflammation / 100.0;
            csm = csm + a * w.csm.pamp * v.pamp + a * w.csm.danger * v.danger + a * w.csm.safe * v.safe;
            let m = mat + a * w.mat.pamp * v.pamp + a * w.mat.danger * v.danger - a * w.mat.safe_suppression * v.safe;
            mat = if m < 0.0 { 0.0 } else { m };
            semi += a * w.semi.safe * v.safe;
        }
        (csm, semi, mat)
    }

    #[test]
    fn degenerate_threshold_range() {
        let dc = fresh(100.0);
        assert_eq!(dc.migration_threshold(), 100.0);
        assert_eq!((dc.csm(), dc.semi(), dc.mat()), (0.0, 0.0, 0.0));
        assert_eq!(dc.state(), DcState::Immature);
        assert!(dc.peptides().is_empty());
    }

    #[test]
    fn inverted_threshold_range_is_config_error() {
        let cfg = DcConfig {
            threshold_min: 10.0,
            threshold_max: 5.0,
            ..DcConfig::default()
        };
        let err = DendriticCell::new(0, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn threshold_draws_center_on_midpoint() {
        let cfg = DcConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mean: f64 = (0..1000)
            .map(|i| DendriticCell::new(i, &mut rng, &cfg).unwrap().migration_threshold())
            .sum::<f64>()
            / 1000.0;
        assert!((mean - 100.0).abs() < 5.0, "mean {mean}");
    }

    #[test]
    fn zero_input_leaves_accumulators() {
        let mut dc = fresh(100.0);
        dc.process_signals(&sv(0.0, 0.0, 0.0, 0.0), &WeightMatrix::default()).unwrap();
        assert_eq!((dc.csm(), dc.semi(), dc.mat()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn pamp_only_update() {
        let mut dc = fresh(100.0);
        dc.process_signals(&sv(10.0, 0.0, 0.0, 0.0), &WeightMatrix::default()).unwrap();
        assert_eq!((dc.csm(), dc.mat(), dc.semi()), (20.0, 20.0, 0.0));
    }

    #[test]
    fn amplified_safe_update_clamps_mature() {
        let mut dc = fresh(100.0);
        dc.process_signals(&sv(0.0, 0.0, 10.0, 100.0), &WeightMatrix::default()).unwrap();
        assert_eq!((dc.csm(), dc.mat(), dc.semi()), (20.0, 0.0, 20.0));
    }

    #[test]
    fn short_sequences_yield_no_ngram() {
        let cfg = DcConfig {
            ngram_lengths: vec![3],
            ..DcConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(extract_peptides(&events(&["open", "read"]), &cfg, &mut rng).is_empty());
        let p = extract_peptides(&events(&["open", "read", "write"]), &cfg, &mut rng);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].syscall_ngram, ["open", "read", "write"]);
    }

    #[test]
    fn argument_prefix_rule() {
        assert_eq!(arg_fragment("/etc/passwd").as_deref(), Some("/etc/"));
        assert_eq!(arg_fragment("/etc/").as_deref(), Some("/etc/"));
        assert_eq!(arg_fragment("O_RDONLY").as_deref(), Some("O_RDONLY"));
        assert_eq!(arg_fragment(""), None);
        let mut evs = events(&["open", "read", "close"]);
        evs[0].args = vec!["/etc/passwd".into(), "0".into()];
        let p = Peptide::from_window(&evs);
        assert_eq!(p.arg_fragment.as_deref(), Some("/etc/"));
    }

    #[test]
    fn ngrams_do_not_cross_processes() {
        let mut evs = events(&["a", "b", "c", "d"]);
        evs[1].pid = 2;
        let c = candidate_peptides(&evs, &[3]);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].syscall_ngram, ["a", "c", "d"]);
    }

    #[test]
    fn selection_caps_count() {
        let cfg = DcConfig {
            ngram_lengths: vec![2],
            peptides_per_collection: 3,
            ..DcConfig::default()
        };
        let names: Vec<String> = (0..20).map(|i| format!("s{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let p = extract_peptides(&events(&refs), &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn collection_respects_capacity() {
        let one = Peptide::new(&["a", "b", "c"], None, 1);
        let cfg = DcConfig {
            peptide_capacity: 10,
            ..DcConfig::default()
        };
        let mut dc = DendriticCell::new(0, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap();
        dc.collect_antigen(vec![one.clone(); 3]).unwrap();
        assert_eq!(dc.peptides().len(), 3);
        dc.collect_antigen(vec![]).unwrap();
        assert_eq!(dc.peptides().len(), 3);

        let cfg = DcConfig {
            peptide_capacity: 3,
            ..DcConfig::default()
        };
        let mut dc = DendriticCell::new(0, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap();
        let five: Vec<Peptide> = (0..5).map(|i| Peptide::new(&["x"], None, i)).collect();
        dc.collect_antigen(five.clone()).unwrap();
        assert_eq!(dc.peptides(), &five[..3]);
    }

    #[test]
    fn migration_boundaries() {
        let mut dc = fresh(100.0);
        assert!(dc.check_migration().is_none());

        let mut dc = fresh(40.0);
        dc.process_signals(&sv(10.0, 0.0, 0.0, 0.0), &WeightMatrix::default()).unwrap();
        dc.process_signals(&sv(10.0, 0.0, 0.0, 0.0), &WeightMatrix::default()).unwrap();
        assert_eq!(dc.csm(), 40.0);
        let m = dc.check_migration().expect("inclusive threshold");
        assert_eq!(m.context, DcContext::Mature);
        assert_eq!(dc.state(), DcState::Migrated);
        assert!(dc.check_migration().is_none());
    }

    #[test]
    fn mature_verdict_from_accumulators() {
        // One step of D=30, S=10 under these weights gives csm=120, mat=30, semi=10.
        let w = WeightMatrix {
            csm: CsmWeights { pamp: 0.0, danger: 3.0, safe: 3.0 },
            mat: MatureWeights { pamp: 0.0, danger: 1.0, safe_suppression: 0.0 },
            semi: SemiWeights { safe: 1.0 },
        };
        let mut dc = fresh(100.0);
        dc.process_signals(&sv(0.0, 30.0, 10.0, 0.0), &w).unwrap();
        assert_eq!((dc.csm(), dc.mat(), dc.semi()), (120.0, 30.0, 10.0));
        let m = dc.check_migration().unwrap();
        assert_eq!(m.context, DcContext::Mature);
        assert_eq!((m.csm, m.mat, m.semi), (120.0, 30.0, 10.0));
    }

    #[test]
    fn context_tie_breaks_to_semi_mature() {
        assert_eq!(dc_context(5.0, 3.0), DcContext::Mature);
        assert_eq!(dc_context(3.0, 5.0), DcContext::SemiMature);
        assert_eq!(dc_context(4.0, 4.0), DcContext::SemiMature);
    }

    #[test]
    fn migrated_cell_is_inert() {
        let mut dc = fresh(10.0);
        dc.process_signals(&sv(50.0, 0.0, 0.0, 0.0), &WeightMatrix::default()).unwrap();
        dc.check_migration().unwrap();
        let frozen = dc.clone();
        assert!(matches!(
            dc.process_signals(&sv(1.0, 1.0, 1.0, 1.0), &WeightMatrix::default()),
            Err(Error::State(_))
        ));
        assert!(matches!(
            dc.collect_antigen(vec![Peptide::new(&["a", "b"], None, 1)]),
            Err(Error::State(_))
        ));
        assert_eq!(dc, frozen);
    }

    fn signal_seq(max_len: usize) -> impl Strategy<Value = Vec<SignalVector>> {
        prop::collection::vec(
            (0.0f64..=100.0, 0.0f64..=100.0, 0.0f64..=100.0, 0.0f64..=100.0)
                .prop_map(|(p, d, s, i)| SignalVector::new(p, d, s, i).unwrap()),
            0..max_len,
        )
    }

    proptest! {
        #[test]
        fn accumulators_match_oracle(seq in signal_seq(200)) {
            let w = WeightMatrix::default();
            let mut dc = fresh(f64::MAX);
            for v in &seq {
                dc.process_signals(v, &w).unwrap();
                prop_assert!(dc.csm() >= 0.0 && dc.semi() >= 0.0 && dc.mat() >= 0.0);
            }
            let (csm, semi, mat) = oracle(&seq, &w);
            prop_assert!((dc.csm() - csm).abs() <= 1e-9 * csm.max(1.0));
            prop_assert!((dc.semi() - semi).abs() <= 1e-9 * semi.max(1.0));
            prop_assert!((dc.mat() - mat).abs() <= 1e-9 * mat.max(1.0));
        }

        #[test]
        fn all_safe_streams_migrate_semi_mature(
            seq in prop::collection::vec((0.0f64..=100.0, 0.0f64..=100.0), 1..100),
            threshold in 1.0f64..500.0,
        ) {
            let mut dc = fresh(threshold);
            for (s, i) in seq {
                if dc.state() == DcState::Migrated {
                    break;
                }
                dc.process_signals(&SignalVector::new(0.0, 0.0, s, i).unwrap(), &WeightMatrix::default()).unwrap();
                if let Some(m) = dc.check_migration() {
                    prop_assert_eq!(m.context, DcContext::SemiMature);
                }
            }
        }

        #[test]
        fn raising_pamp_never_demotes_mature(
            seq in prop::collection::vec((0.0f64..=50.0, 0.0f64..=100.0, 0.0f64..=100.0, 0.0f64..=100.0), 1..60),
            bump in 0.0f64..=50.0,
        ) {
            // Same D, S, I; P raised by `bump` at every step. Both cells see the full sequence.
            let w = WeightMatrix::default();
            let mut low = fresh(f64::MAX);
            let mut high = fresh(f64::MAX);
            for &(p, d, s, i) in &seq {
                low.process_signals(&SignalVector::new(p, d, s, i).unwrap(), &w).unwrap();
                high.process_signals(&SignalVector::new(p + bump, d, s, i).unwrap(), &w).unwrap();
            }
            if low.context() == DcContext::Mature {
                prop_assert_eq!(high.context(), DcContext::Mature);
            }
        }
    }
}
