//! The lymph node: naive T cells built from presented peptides, their
//! activation/tolerance bookkeeping, and differentiation into effectors.

use std::collections::HashSet;
use std::fmt;

use rand::Rng;

use crate::dendritic::{window_arg, DcContext, MigratedDC, Peptide};
use crate::error::{Error, Result};
use crate::response::{Action, EffectorTCell};
use crate::tissue::AntigenEvent;

/// One position of a receptor pattern.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatternItem {
    Call(String),
    Any,
}

impl PatternItem {
    pub fn matches(&self, name: &str) -> bool {
        match self {
            PatternItem::Any => true,
            PatternItem::Call(c) => c == name,
        }
    }

    pub fn is_wildcard(&self) -> bool {
        matches!(self, PatternItem::Any)
    }
}

impl fmt::Display for PatternItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatternItem::Any => f.write_str("*"),
            PatternItem::Call(c) => f.write_str(c),
        }
    }
}

/// `(argument index, substring)` condition on the first argument-bearing call.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArgPattern {
    pub index: usize,
    pub substring: String,
}

/// T-cell receptor: the condition half of a policy statement.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tcr {
    pub seq_pattern: Vec<PatternItem>,
    pub arg_pattern: Option<ArgPattern>,
}

impl Tcr {
    pub fn len(&self) -> usize {
        self.seq_pattern.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq_pattern.is_empty()
    }

    pub fn exact(names: &[&str]) -> Tcr {
        Tcr {
            seq_pattern: names
                .iter()
                .map(|n| if *n == "*" { PatternItem::Any } else { PatternItem::Call(n.to_string()) })
                .collect(),
            arg_pattern: None,
        }
    }

    pub fn with_arg(mut self, index: usize, substring: impl Into<String>) -> Tcr {
        self.arg_pattern = Some(ArgPattern {
            index,
            substring: substring.into(),
        });
        self
    }

    fn seq_matches<'a>(&self, names: impl ExactSizeIterator<Item = &'a str>) -> bool {
        names.len() == self.seq_pattern.len() && self.seq_pattern.iter().zip(names).all(|(p, n)| p.matches(n))
    }

    /// Peptide match: equal length, every concrete item equal, and the
    /// peptide's argument fragment containing the pattern substring.
    pub fn matches(&self, peptide: &Peptide) -> bool {
        if !self.seq_matches(peptide.syscall_ngram.iter().map(String::as_str)) {
            return false;
        }
        match &self.arg_pattern {
            None => true,
            Some(ap) => peptide
                .arg_fragment
                .as_deref()
                .is_some_and(|frag| frag.contains(ap.substring.as_str())),
        }
    }

    /// Match against a contiguous run of calls. The argument condition is
    /// tested on the first call in the run that carries arguments.
    pub fn matches_window(&self, window: &[AntigenEvent]) -> bool {
        if !self.seq_matches(window.iter().map(|e| e.syscall.as_str())) {
            return false;
        }
        match &self.arg_pattern {
            None => true,
            Some(ap) => {
                if ap.index == 0 {
                    return window_arg(window).is_some_and(|a| a.contains(ap.substring.as_str()));
                }
                window
                    .iter()
                    .find(|e| !e.args.is_empty())
                    .and_then(|e| e.args.get(ap.index))
                    .is_some_and(|a| a.contains(ap.substring.as_str()))
            }
        }
    }
}

/// Alias for [`Tcr::matches`].
pub fn match_tcr(tcr: &Tcr, peptide: &Peptide) -> bool {
    tcr.matches(peptide)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LymphConfig {
    pub activation_threshold: f64,
    pub tolerance_threshold: f64,
    pub naive_lifespan: u64,
    pub naive_per_presentation: usize,
    pub wildcard_prob: f64,
    pub effector_lifespan: u64,
    /// Divisor turning a migrated cell's CSM into an evidence multiplier.
    pub evidence_scale: f64,
}

impl Default for LymphConfig {
    fn default() -> Self {
        LymphConfig {
            activation_threshold: 100.0,
            tolerance_threshold: 100.0,
            naive_lifespan: 50,
            naive_per_presentation: 4,
            wildcard_prob: 0.2,
            effector_lifespan: 1000,
            evidence_scale: 100.0,
        }
    }
}

impl LymphConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("activation_threshold", self.activation_threshold),
            ("tolerance_threshold", self.tolerance_threshold),
        ] {
            // Infinity is allowed and disables that pathway.
            if v.is_nan() || v <= 0.0 {
                return Err(Error::config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.naive_lifespan == 0 {
            return Err(Error::config("naive_lifespan must be >= 1"));
        }
        if self.effector_lifespan == 0 {
            return Err(Error::config("effector_lifespan must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.wildcard_prob) {
            return Err(Error::config(format!(
                "wildcard_prob must be within [0, 1], got {}",
                self.wildcard_prob
            )));
        }
        if !(self.evidence_scale.is_finite() && self.evidence_scale > 0.0) {
            return Err(Error::config("evidence_scale must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveTCell {
    pub id: u64,
    pub tcr: Tcr,
    pub activation: f64,
    pub tolerance: f64,
    pub age: u64,
    pub lifespan: u64,
}

const MAX_WILDCARD_REROLLS: usize = 64;

fn generalise<R: Rng + ?Sized>(rng: &mut R, ngram: &[String], wildcard_prob: f64) -> Vec<PatternItem> {
    let roll = |rng: &mut R| -> Vec<PatternItem> {
        ngram
            .iter()
            .map(|n| {
                if rng.gen_bool(wildcard_prob) {
                    PatternItem::Any
                } else {
                    PatternItem::Call(n.clone())
                }
            })
            .collect()
    };
    for _ in 0..MAX_WILDCARD_REROLLS {
        let items = roll(rng);
        if items.iter().any(|i| !i.is_wildcard()) {
            return items;
        }
    }
    // Rejection sampling cannot terminate when wildcard_prob is 1: keep one position.
    let keep = rng.gen_range(0..ngram.len());
    (0..ngram.len())
        .map(|i| {
            if i == keep {
                PatternItem::Call(ngram[i].clone())
            } else {
                PatternItem::Any
            }
        })
        .collect()
}

/// Builds up to `naive_per_presentation` new cells from randomly picked
/// peptides. Receptors already in `live` are discarded; accepted ones are
/// added to it. Ids are taken from `next_id`.
pub fn generate_naive_tcells<R: Rng + ?Sized>(
    rng: &mut R,
    peptides: &[Peptide],
    cfg: &LymphConfig,
    live: &mut HashSet<Tcr>,
    next_id: &mut u64,
) -> Vec<NaiveTCell> {
    let usable: Vec<&Peptide> = peptides.iter().filter(|p| !p.syscall_ngram.is_empty()).collect();
    if usable.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for _ in 0..cfg.naive_per_presentation {
        let p = usable[rng.gen_range(0..usable.len())];
        let tcr = Tcr {
            seq_pattern: generalise(rng, &p.syscall_ngram, cfg.wildcard_prob),
            arg_pattern: p.arg_fragment.as_ref().map(|frag| ArgPattern {
                index: 0,
                substring: frag.clone(),
            }),
        };
        if !live.insert(tcr.clone()) {
            continue;
        }
        out.push(NaiveTCell {
            id: *next_id,
            tcr,
            activation: 0.0,
            tolerance: 0.0,
            age: 0,
            lifespan: cfg.naive_lifespan,
        });
        *next_id += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PresentationOutcome {
    pub matched: usize,
    pub activation_added: f64,
    pub tolerance_added: f64,
}

/// Presents a migrated cell's peptides. Each naive cell matching at least one
/// peptide gains `e * mat` activation (mature) or `e * semi` tolerance
/// (semi-mature), with `e = csm / evidence_scale`.
pub fn present(mdc: &MigratedDC, population: &mut [NaiveTCell], cfg: &LymphConfig) -> PresentationOutcome {
    let evidence = mdc.csm / cfg.evidence_scale;
    let mut out = PresentationOutcome::default();
    if mdc.peptides.is_empty() {
        return out;
    }
    for cell in population.iter_mut() {
        if !mdc.peptides.iter().any(|p| cell.tcr.matches(p)) {
            continue;
        }
        out.matched += 1;
        match mdc.context {
            DcContext::Mature => {
                let delta = evidence * mdc.mat;
                cell.activation += delta;
                out.activation_added += delta;
            }
            DcContext::SemiMature => {
                let delta = evidence * mdc.semi;
                cell.tolerance += delta;
                out.tolerance_added += delta;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Differentiation {
    pub effectors: Vec<EffectorTCell>,
    pub survivors: Vec<NaiveTCell>,
    pub deleted: Vec<NaiveTCell>,
}

fn differentiated_action(cell: &NaiveTCell, cfg: &LymphConfig) -> Option<Action> {
    let act = cell.activation >= cfg.activation_threshold;
    let tol = cell.tolerance >= cfg.tolerance_threshold;
    match (act, tol) {
        (true, true) => {
            let act_ratio = cell.activation / cfg.activation_threshold;
            let tol_ratio = cell.tolerance / cfg.tolerance_threshold;
            Some(if act_ratio > tol_ratio { Action::Deny } else { Action::Permit })
        }
        (true, false) => Some(Action::Deny),
        (false, true) => Some(Action::Permit),
        (false, false) => None,
    }
}

/// Ages every cell by one tick and sorts it into effector, survivor or deleted.
/// Effector ids are taken from `next_effector_id` in naive-cell order.
pub fn age_and_differentiate(
    population: Vec<NaiveTCell>,
    cfg: &LymphConfig,
    next_effector_id: &mut u64,
    tick: u64,
) -> Differentiation {
    let mut out = Differentiation::default();
    for mut cell in population {
        cell.age += 1;
        if let Some(action) = differentiated_action(&cell, cfg) {
            out.effectors.push(EffectorTCell::new(
                *next_effector_id,
                cell.tcr,
                action,
                cfg.effector_lifespan,
                tick,
            ));
            *next_effector_id += 1;
        } else if cell.age >= cell.lifespan {
            out.deleted.push(cell);
        } else {
            out.survivors.push(cell);
        }
    }
    out
}
