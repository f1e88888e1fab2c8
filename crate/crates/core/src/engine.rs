//! The per-tick pipeline and trace replay.
//!
//! One tick runs, in order: ingest records, derive signals, let every
//! immature dendritic cell sample antigen and fuse the pooled signal vector,
//! migrate, generate and present to naive T cells, differentiate, merge the
//! new effectors' statements into the policy, monitor the tick's calls,
//! retire effectors, replace migrated cells, advance the clock.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::EngineConfig;
use crate::dendritic::{candidate_peptides, select_peptides, DcContext, DendriticCell, MigratedDC, MAX_NGRAM};
use crate::error::{Error, Result};
use crate::lymph::{age_and_differentiate, generate_naive_tcells, present, NaiveTCell, Tcr};
use crate::records::{parse_lines, parse_metrics_line, parse_trace_line, Record};
use crate::response::{
    effector_to_policy, monitor_since, retire_effectors, Action, ActionEvent, EffectorTCell, PolicySet,
};
use crate::signals::{derive_inflammation, derive_pamp, derive_process_signals, MetricSample, SignalVector};
use crate::tissue::{AntigenEvent, TissueStore};

/// Invariant counters collected when auditing is enabled. All zero on a healthy run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TickAudit {
    pub semi_mature_raised_activation: usize,
    pub mature_raised_tolerance: usize,
    pub negative_accumulators: usize,
    pub migrated_not_inert: usize,
    pub naive_past_lifespan: usize,
    pub effector_past_lifespan: usize,
    /// Ticks where the live-receptor set disagreed with the cell populations.
    pub receptor_mismatch: usize,
}

impl TickAudit {
    pub fn is_clean(&self) -> bool {
        *self == TickAudit::default()
    }

    pub fn absorb(&mut self, o: &TickAudit) {
        self.semi_mature_raised_activation += o.semi_mature_raised_activation;
        self.mature_raised_tolerance += o.mature_raised_tolerance;
        self.negative_accumulators += o.negative_accumulators;
        self.migrated_not_inert += o.migrated_not_inert;
        self.naive_past_lifespan += o.naive_past_lifespan;
        self.effector_past_lifespan += o.effector_past_lifespan;
        self.receptor_mismatch += o.receptor_mismatch;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickSummary {
    pub tick: u64,
    pub records: usize,
    pub migrated_mature: usize,
    pub migrated_semi_mature: usize,
    pub naive_created: usize,
    /// Naive population entering differentiation.
    pub naive_in: usize,
    pub naive_to_effector: usize,
    pub naive_survivors: usize,
    pub naive_deleted: usize,
    pub new_deny: usize,
    pub new_permit: usize,
    pub statements_added: usize,
    pub actions: Vec<ActionEvent>,
    pub memory_retained: usize,
    pub effectors_died: usize,
    pub audit: TickAudit,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub ticks: u64,
    pub dc_migrated_mature: usize,
    pub dc_migrated_semi_mature: usize,
    pub naive_created: usize,
    pub naive_deleted: usize,
    pub effectors_deny: usize,
    pub effectors_permit: usize,
    pub actions_deny: usize,
    pub actions_permit: usize,
    pub memory_retained: usize,
    pub effectors_died: usize,
    pub policy: PolicySet,
}

impl RunReport {
    fn absorb(&mut self, t: &TickSummary) {
        self.ticks += 1;
        self.dc_migrated_mature += t.migrated_mature;
        self.dc_migrated_semi_mature += t.migrated_semi_mature;
        self.naive_created += t.naive_created;
        self.naive_deleted += t.naive_deleted;
        self.effectors_deny += t.new_deny;
        self.effectors_permit += t.new_permit;
        self.memory_retained += t.memory_retained;
        self.effectors_died += t.effectors_died;
        for a in &t.actions {
            match a.action {
                Action::Deny => self.actions_deny += 1,
                Action::Permit => self.actions_permit += 1,
            }
        }
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let learned = self.policy.learned_statements();
        let deny = learned.iter().filter(|s| s.action == Action::Deny).count();
        writeln!(f, "ticks executed:            {}", self.ticks)?;
        writeln!(f, "dendritic cells migrated:  {} mature, {} semi-mature", self.dc_migrated_mature, self.dc_migrated_semi_mature)?;
        writeln!(f, "naive T cells:             {} created, {} deleted", self.naive_created, self.naive_deleted)?;
        writeln!(f, "effector T cells:          {} deny, {} permit", self.effectors_deny, self.effectors_permit)?;
        writeln!(f, "memory / died effectors:   {} / {}", self.memory_retained, self.effectors_died)?;
        writeln!(f, "action events:             {} deny, {} permit", self.actions_deny, self.actions_permit)?;
        writeln!(
            f,
            "policy statements:         {} base, {} learned ({} deny, {} permit), default {}",
            self.policy.base_statements().len(),
            learned.len(),
            deny,
            learned.len() - deny,
            self.policy.default_action()
        )
    }
}

/// One line of the JSON-lines action log.
#[derive(Debug, Serialize)]
struct ActionLogLine<'a> {
    ts: u64,
    pid: u32,
    action: &'a str,
    statement: String,
}

pub fn action_log_line(a: &ActionEvent) -> String {
    serde_json::to_string(&ActionLogLine {
        ts: a.timestamp,
        pid: a.pid,
        action: a.action.as_str(),
        statement: a.statement.to_string(),
    })
    .expect("action log line serialises")
}

pub struct Engine {
    cfg: EngineConfig,
    rng: ChaCha8Rng,
    tissue: TissueStore,
    dcs: Vec<DendriticCell>,
    next_dc_id: u64,
    naive: Vec<NaiveTCell>,
    next_naive_id: u64,
    effectors: Vec<EffectorTCell>,
    next_effector_id: u64,
    policy: PolicySet,
    /// Receptors of every living naive and effector cell. No two cells share one.
    live: HashSet<Tcr>,
    last_metric: BTreeMap<u32, MetricSample>,
    process_signals: BTreeMap<u32, (f64, f64)>,
    violations: BTreeMap<u32, VecDeque<(u64, u64)>>,
    inflammation: f64,
    /// Most recent calls per pid, kept as left context for monitoring.
    recent: BTreeMap<u32, VecDeque<AntigenEvent>>,
    audit: bool,
    report: RunReport,
}

impl Engine {
    pub fn new(cfg: EngineConfig, base_policy: PolicySet) -> Result<Engine> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let dcs = (0..cfg.dc_population_size as u64)
            .map(|id| DendriticCell::new(id, &mut rng, &cfg.dc))
            .collect::<Result<Vec<_>>>()?;
        Ok(Engine {
            tissue: TissueStore::with_capacity(cfg.tissue_capacity)?,
            next_dc_id: dcs.len() as u64,
            dcs,
            rng,
            naive: Vec::new(),
            next_naive_id: 0,
            effectors: Vec::new(),
            next_effector_id: 0,
            report: RunReport {
                policy: base_policy.clone(),
                ..RunReport::default()
            },
            policy: base_policy,
            live: HashSet::new(),
            last_metric: BTreeMap::new(),
            process_signals: BTreeMap::new(),
            violations: BTreeMap::new(),
            inflammation: 0.0,
            recent: BTreeMap::new(),
            audit: false,
            cfg,
        })
    }

    /// Enables per-tick invariant checks reported in [`TickSummary::audit`].
    pub fn set_audit(&mut self, on: bool) {
        self.audit = on;
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn clock(&self) -> u64 {
        self.tissue.clock()
    }

    pub fn tissue(&self) -> &TissueStore {
        &self.tissue
    }

    pub fn dendritic_cells(&self) -> &[DendriticCell] {
        &self.dcs
    }

    pub fn naive_cells(&self) -> &[NaiveTCell] {
        &self.naive
    }

    pub fn effectors(&self) -> &[EffectorTCell] {
        &self.effectors
    }

    pub fn policy(&self) -> &PolicySet {
        &self.policy
    }

    /// Counters so far, with the current policy.
    pub fn report(&self) -> RunReport {
        RunReport {
            policy: self.policy.clone(),
            ..self.report.clone()
        }
    }

    pub fn into_report(mut self) -> RunReport {
        self.report.policy = self.policy;
        self.report
    }

    /// Adds an effector as if it had just differentiated; its statement is merged.
    /// A receptor already held by a living cell is rejected.
    pub fn inject_effector(&mut self, tcr: Tcr, action: Action) -> Result<u64> {
        if !self.live.insert(tcr.clone()) {
            return Err(Error::State(format!("receptor {tcr:?} is already live")));
        }
        let id = self.next_effector_id;
        self.next_effector_id += 1;
        let eff = EffectorTCell::new(id, tcr, action, self.cfg.lymph.effector_lifespan, self.clock());
        self.policy.merge([effector_to_policy(&eff)]);
        self.effectors.push(eff);
        Ok(id)
    }

    /// Host-wide mean of the signal vectors of the given processes.
    pub fn pooled_signals(&self, pids: &BTreeSet<u32>) -> SignalVector {
        SignalVector::mean(pids.iter().filter_map(|p| self.tissue.signals(*p)))
    }

    fn ingest(&mut self, batch: Vec<Record>) -> Result<(Vec<AntigenEvent>, BTreeSet<u32>)> {
        let clock = self.tissue.clock();
        let mut fresh = Vec::new();
        let mut active = BTreeSet::new();
        for rec in batch {
            match rec {
                Record::Syscall(ev) => {
                    let pid = ev.pid;
                    let violation = ev.violation;
                    let id = self.tissue.ingest_syscall(ev.clone())?;
                    fresh.push(AntigenEvent { id, ..ev });
                    active.insert(pid);
                    if violation {
                        let q = self.violations.entry(pid).or_default();
                        match q.back_mut() {
                            Some((t, n)) if *t == clock => *n += 1,
                            _ => q.push_back((clock, 1)),
                        }
                    }
                }
                Record::Metric(m) => {
                    if let Some(prev) = self.last_metric.get(&m.pid) {
                        let ds = derive_process_signals(prev, &m, &self.cfg.signals)?;
                        self.process_signals.insert(m.pid, ds);
                    }
                    self.last_metric.insert(m.pid, m);
                    active.insert(m.pid);
                }
                Record::Host(h) => self.inflammation = derive_inflammation(&h),
            }
        }
        Ok((fresh, active))
    }

    fn derive_signals(&mut self, active: &BTreeSet<u32>) -> Result<SignalVector> {
        let clock = self.tissue.clock();
        let horizon = (clock + 1).saturating_sub(self.cfg.signals.window);
        for q in self.violations.values_mut() {
            while q.front().is_some_and(|(t, _)| *t < horizon) {
                q.pop_front();
            }
        }
        self.violations.retain(|_, q| !q.is_empty());
        for &pid in active {
            let count: u64 = self.violations.get(&pid).map_or(0, |q| q.iter().map(|(_, n)| n).sum());
            let pamp = derive_pamp(count, &self.cfg.signals);
            let (danger, safe) = self.process_signals.get(&pid).copied().unwrap_or((0.0, 0.0));
            let sv = SignalVector::new(pamp, danger, safe, self.inflammation)?;
            self.tissue.ingest_signals(pid, sv);
        }
        Ok(self.pooled_signals(active))
    }

    fn run_dendritic_cells(&mut self, pooled: &SignalVector) -> Result<Vec<(usize, MigratedDC)>> {
        let max_len = self.cfg.dc.max_ngram();
        let mut migrated = Vec::new();
        for (slot, dc) in self.dcs.iter_mut().enumerate() {
            let anchors = self.tissue.sample_antigens(&mut self.rng, self.cfg.dc.antigens_per_sample);
            let mut candidates = Vec::new();
            for anchor in &anchors {
                let fragment = self.tissue.fragment_ending_at(anchor, max_len);
                candidates.extend(candidate_peptides(&fragment, &self.cfg.dc.ngram_lengths));
            }
            let peptides = select_peptides(&mut self.rng, candidates, self.cfg.dc.peptides_per_collection);
            dc.collect_antigen(peptides)?;
            dc.process_signals(pooled, &self.cfg.dc.weights)?;
            if let Some(m) = dc.check_migration() {
                migrated.push((slot, m));
            }
        }
        Ok(migrated)
    }

    fn audit_presentation(before: &[(f64, f64)], after: &[NaiveTCell], context: DcContext, audit: &mut TickAudit) {
        for (&(activation, tolerance), a) in before.iter().zip(after) {
            match context {
                DcContext::SemiMature if a.activation > activation => audit.semi_mature_raised_activation += 1,
                DcContext::Mature if a.tolerance > tolerance => audit.mature_raised_tolerance += 1,
                _ => {}
            }
        }
    }

    /// Runs one tick over `batch`. An empty batch only ages cells and advances the clock.
    pub fn tick(&mut self, batch: Vec<Record>) -> Result<TickSummary> {
        let mut summary = TickSummary {
            tick: self.tissue.clock(),
            records: batch.len(),
            ..TickSummary::default()
        };
        let mut audit = TickAudit::default();

        let (fresh, active) = self.ingest(batch)?;
        let mut migrated = Vec::new();
        if summary.records > 0 {
            let pooled = self.derive_signals(&active)?;
            migrated = self.run_dendritic_cells(&pooled)?;
        }

        for (_, mdc) in &migrated {
            match mdc.context {
                DcContext::Mature => summary.migrated_mature += 1,
                DcContext::SemiMature => summary.migrated_semi_mature += 1,
            }
            let born = generate_naive_tcells(&mut self.rng, &mdc.peptides, &self.cfg.lymph, &mut self.live, &mut self.next_naive_id);
            summary.naive_created += born.len();
            self.naive.extend(born);
            let before: Option<Vec<(f64, f64)>> =
                self.audit.then(|| self.naive.iter().map(|c| (c.activation, c.tolerance)).collect());
            present(mdc, &mut self.naive, &self.cfg.lymph);
            if let Some(before) = before {
                Self::audit_presentation(&before, &self.naive, mdc.context, &mut audit);
            }
        }

        summary.naive_in = self.naive.len();
        let diff = age_and_differentiate(
            std::mem::take(&mut self.naive),
            &self.cfg.lymph,
            &mut self.next_effector_id,
            summary.tick,
        );
        summary.naive_to_effector = diff.effectors.len();
        summary.naive_survivors = diff.survivors.len();
        summary.naive_deleted = diff.deleted.len();
        for c in &diff.deleted {
            self.live.remove(&c.tcr);
        }
        self.naive = diff.survivors;

        let statements: Vec<_> = diff.effectors.iter().map(effector_to_policy).collect();
        for e in &diff.effectors {
            match e.action {
                Action::Deny => summary.new_deny += 1,
                Action::Permit => summary.new_permit += 1,
            }
        }
        summary.statements_added = self.policy.merge(statements);
        self.effectors.extend(diff.effectors);

        summary.actions = self.monitor_fresh(&fresh);

        let retired = retire_effectors(std::mem::take(&mut self.effectors), &self.cfg.retirement);
        summary.memory_retained = retired.memory.len();
        summary.effectors_died = retired.dead.len() + retired.expired_memory.len();
        for e in retired.dead.iter().chain(&retired.expired_memory) {
            self.live.remove(&e.tcr);
        }
        self.effectors = retired.survivors;
        self.effectors.extend(retired.memory);
        self.effectors.sort_by_key(|e| e.id);

        if self.audit {
            self.audit_state(&migrated, &mut audit);
        }
        for (slot, _) in &migrated {
            self.dcs[*slot] = DendriticCell::new(self.next_dc_id, &mut self.rng, &self.cfg.dc)?;
            self.next_dc_id += 1;
        }
        self.tissue.advance();

        summary.audit = audit;
        self.report.absorb(&summary);
        Ok(summary)
    }

    fn monitor_fresh(&mut self, fresh: &[AntigenEvent]) -> Vec<ActionEvent> {
        let Some(first) = fresh.first() else {
            return Vec::new();
        };
        let min_id = first.id;
        let mut window: Vec<AntigenEvent> = Vec::new();
        for q in self.recent.values() {
            window.extend(q.iter().cloned());
        }
        window.extend(fresh.iter().cloned());
        let actions = monitor_since(&mut self.effectors, &window, min_id);
        for ev in fresh {
            let q = self.recent.entry(ev.pid).or_default();
            q.push_back(ev.clone());
            while q.len() > MAX_NGRAM - 1 {
                q.pop_front();
            }
        }
        actions
    }

    fn audit_state(&mut self, migrated: &[(usize, MigratedDC)], audit: &mut TickAudit) {
        for dc in &self.dcs {
            if dc.csm() < 0.0 || dc.semi() < 0.0 || dc.mat() < 0.0 {
                audit.negative_accumulators += 1;
            }
        }
        for c in &self.naive {
            if c.activation < 0.0 || c.tolerance < 0.0 {
                audit.negative_accumulators += 1;
            }
            if c.age >= c.lifespan {
                audit.naive_past_lifespan += 1;
            }
        }
        for e in &self.effectors {
            if e.age >= e.lifespan {
                audit.effector_past_lifespan += 1;
            }
        }
        if self.live.len() != self.naive.len() + self.effectors.len()
            || !self.naive.iter().map(|c| &c.tcr).chain(self.effectors.iter().map(|e| &e.tcr)).all(|t| self.live.contains(t))
        {
            audit.receptor_mismatch += 1;
        }
        let probe = SignalVector {
            pamp: 50.0,
            danger: 50.0,
            safe: 50.0,
            inflammation: 50.0,
        };
        for (slot, _) in migrated {
            let dc = &mut self.dcs[*slot];
            let frozen = dc.clone();
            let rejected = matches!(dc.process_signals(&probe, &self.cfg.dc.weights), Err(Error::State(_)))
                && matches!(dc.collect_antigen(frozen.peptides().to_vec()), Err(Error::State(_)));
            if !rejected || *dc != frozen {
                audit.migrated_not_inert += 1;
            }
        }
    }
}

/// Merges trace and metric records into time order and cuts them into ticks.
pub fn batch_records(trace: Vec<Record>, metrics: Vec<Record>, records_per_tick: usize) -> Vec<Vec<Record>> {
    let mut all: Vec<(u64, u8, usize, Record)> = Vec::with_capacity(trace.len() + metrics.len());
    all.extend(trace.into_iter().enumerate().map(|(i, r)| (r.timestamp(), 0, i, r)));
    all.extend(metrics.into_iter().enumerate().map(|(i, r)| (r.timestamp(), 1, i, r)));
    all.sort_by_key(|(ts, src, i, _)| (*ts, *src, *i));
    let records: Vec<Record> = all.into_iter().map(|(.., r)| r).collect();
    if records_per_tick > 0 {
        return records.chunks(records_per_tick).map(<[Record]>::to_vec).collect();
    }
    let mut out: Vec<Vec<Record>> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some(b) if b[0].timestamp() == r.timestamp() => b.push(r),
            _ => out.push(vec![r]),
        }
    }
    out
}

fn check_time_order(records: &[Record], text: &str, what: &str) -> Result<()> {
    // Line numbers for error messages: re-walk the non-comment lines.
    let line_numbers: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !(l.trim().is_empty() || l.starts_with('#')))
        .map(|(i, _)| i + 1)
        .collect();
    for (i, pair) in records.windows(2).enumerate() {
        if pair[1].timestamp() < pair[0].timestamp() {
            return Err(Error::parse(
                line_numbers.get(i + 1).copied().unwrap_or(0),
                1,
                format!("{what} timestamps must not decrease"),
            ));
        }
    }
    Ok(())
}

pub fn parse_trace_text(text: &str) -> Result<Vec<Record>> {
    let records = parse_lines(text, parse_trace_line)?;
    check_time_order(&records, text, "trace")?;
    Ok(records)
}

pub fn parse_metrics_text(text: &str) -> Result<Vec<Record>> {
    let records = parse_lines(text, parse_metrics_line)?;
    check_time_order(&records, text, "metrics")?;
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub report: RunReport,
    pub actions: Vec<ActionEvent>,
}

impl ReplayOutcome {
    pub fn policy_text(&self) -> String {
        self.report.policy.to_string()
    }

    pub fn action_log(&self) -> String {
        self.actions.iter().map(|a| action_log_line(a) + "\n").collect()
    }
}

/// Replays parsed records through a fresh engine until they run out.
pub fn replay(trace: Vec<Record>, metrics: Vec<Record>, base: PolicySet, cfg: EngineConfig) -> Result<ReplayOutcome> {
    let batches = batch_records(trace, metrics, cfg.records_per_tick);
    let mut engine = Engine::new(cfg, base)?;
    let mut actions = Vec::new();
    for batch in batches {
        let t = engine.tick(batch)?;
        actions.extend(t.actions);
    }
    Ok(ReplayOutcome {
        report: engine.into_report(),
        actions,
    })
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))
}

/// Loads a base policy; a missing path or file yields an empty policy defaulting to `ask`.
pub fn load_base_policy(path: Option<&Path>) -> anyhow::Result<PolicySet> {
    match path {
        Some(p) if p.exists() => {
            let text = read(p)?;
            PolicySet::parse(&text).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))
        }
        _ => Ok(PolicySet::default()),
    }
}

/// File-level replay: writes `policy.txt`, `actions.jsonl` and `report.txt` into `out_dir`.
pub fn run_replay(
    trace_path: &Path,
    metrics_path: Option<&Path>,
    base_policy_path: Option<&Path>,
    cfg: EngineConfig,
    out_dir: &Path,
) -> anyhow::Result<RunReport> {
    let trace_text = read(trace_path)?;
    let trace = parse_trace_text(&trace_text).map_err(|e| anyhow::anyhow!("{}: {e}", trace_path.display()))?;
    let metrics = match metrics_path {
        Some(p) => {
            let text = read(p)?;
            parse_metrics_text(&text).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?
        }
        None => Vec::new(),
    };
    let base = load_base_policy(base_policy_path)?;
    let outcome = replay(trace, metrics, base, cfg)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("policy.txt"), outcome.policy_text())?;
    fs::write(out_dir.join("actions.jsonl"), outcome.action_log())?;
    fs::write(out_dir.join("report.txt"), outcome.report.to_string())?;
    Ok(outcome.report)
}
