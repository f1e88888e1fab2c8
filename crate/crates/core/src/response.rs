//! Effector T cells and the policy they enforce.
//!
//! Policy files are line oriented:
//!
//! ```text
//! # comment
//! match seq(open, *, execve) -> deny
//! match seq(open, read) arg 0 substr "/tmp/" -> permit
//! default -> ask
//! ```
//!
//! Statements are evaluated in file order and the first match wins.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lymph::{ArgPattern, PatternItem, Tcr};
use crate::tissue::AntigenEvent;

/// Fraction of each retirement batch kept as memory, as `numerator / 10`.
const MEMORY_TENTHS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Permit,
    Deny,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Permit => "permit",
            Action::Deny => "deny",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Action for calls no statement matches. `Ask` stands in for interactive prompting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DefaultAction {
    Permit,
    Deny,
    Ask,
}

impl fmt::Display for DefaultAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DefaultAction::Permit => "permit",
            DefaultAction::Deny => "deny",
            DefaultAction::Ask => "ask",
        })
    }
}

/// Outcome of evaluating a policy against one n-gram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Statement { index: usize, action: Action },
    Default(DefaultAction),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectorTCell {
    /// Creation order; lower ids were created earlier.
    pub id: u64,
    pub tcr: Tcr,
    pub action: Action,
    pub age: u64,
    pub lifespan: u64,
    pub match_count: u64,
    pub memory: bool,
    /// Tick at which the cell differentiated.
    pub born: u64,
}

impl EffectorTCell {
    pub fn new(id: u64, tcr: Tcr, action: Action, lifespan: u64, born: u64) -> Self {
        EffectorTCell {
            id,
            tcr,
            action,
            age: 0,
            lifespan,
            match_count: 0,
            memory: false,
            born,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PolicyStatement {
    pub seq_pattern: Vec<PatternItem>,
    pub arg_condition: Option<ArgPattern>,
    pub action: Action,
}

impl PolicyStatement {
    pub fn tcr(&self) -> Tcr {
        Tcr {
            seq_pattern: self.seq_pattern.clone(),
            arg_pattern: self.arg_condition.clone(),
        }
    }
}

pub fn effector_to_policy(eff: &EffectorTCell) -> PolicyStatement {
    PolicyStatement {
        seq_pattern: eff.tcr.seq_pattern.clone(),
        arg_condition: eff.tcr.arg_pattern.clone(),
        action: eff.action,
    }
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        if c == '"' || c == '\\' {
            f.write_str("\\")?;
        }
        write!(f, "{c}")?;
    }
    f.write_str("\"")
}

impl fmt::Display for PolicyStatement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("match seq(")?;
        for (i, item) in self.seq_pattern.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{item}")?;
        }
        f.write_str(")")?;
        if let Some(ap) = &self.arg_condition {
            write!(f, " arg {} substr ", ap.index)?;
            write_quoted(f, &ap.substring)?;
        }
        write!(f, " -> {}", self.action)
    }
}

/// Syscall names are non-empty runs of ASCII letters, digits and `_`.
pub fn is_valid_syscall_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

/// Cursor over one policy line; columns are reported 1-based.
struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str) -> Self {
        Cursor { src, pos: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(1, self.src[..self.pos].chars().count() + 1, msg)
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start_matches([' ', '\t']);
        self.pos = self.src.len() - trimmed.len();
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<()> {
        if self.eat(lit) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{lit}`")))
        }
    }

    fn expect_ws(&mut self) -> Result<()> {
        let before = self.pos;
        self.skip_ws();
        if self.pos == before {
            Err(self.err("expected whitespace"))
        } else {
            Ok(())
        }
    }

    fn word(&mut self) -> &'a str {
        let rest = self.rest();
        let end = rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(rest.len());
        self.pos += end;
        &rest[..end]
    }

    fn quoted(&mut self) -> Result<String> {
        self.expect("\"")?;
        let mut out = String::new();
        let mut chars = self.rest().char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '"' => {
                    self.pos += i + 1;
                    return Ok(out);
                }
                '\\' => match chars.next() {
                    Some((_, e @ ('"' | '\\'))) => out.push(e),
                    _ => {
                        self.pos += i;
                        return Err(self.err("invalid escape in quoted string"));
                    }
                },
                c => out.push(c),
            }
        }
        self.pos = self.src.len();
        Err(self.err("unterminated quoted string"))
    }

    fn action(&mut self) -> Result<&'a str> {
        let w = self.word();
        if w.is_empty() {
            Err(self.err("expected action"))
        } else {
            Ok(w)
        }
    }

    fn end(&mut self) -> Result<()> {
        self.skip_ws();
        if self.rest().is_empty() {
            Ok(())
        } else {
            Err(self.err("unexpected trailing text"))
        }
    }
}

impl FromStr for PolicyStatement {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut c = Cursor::new(line);
        c.skip_ws();
        c.expect("match")?;
        c.expect_ws()?;
        c.expect("seq(")?;
        let mut seq_pattern = Vec::new();
        loop {
            c.skip_ws();
            if c.eat("*") {
                seq_pattern.push(PatternItem::Any);
            } else {
                let name = c.word();
                if name.is_empty() {
                    return Err(c.err("expected syscall name or `*`"));
                }
                seq_pattern.push(PatternItem::Call(name.to_string()));
            }
            c.skip_ws();
            if c.eat(",") {
                continue;
            }
            c.expect(")")?;
            break;
        }
        if seq_pattern.iter().all(PatternItem::is_wildcard) {
            return Err(c.err("pattern needs at least one concrete syscall"));
        }
        c.expect_ws()?;
        let mut arg_condition = None;
        if c.eat("arg") {
            c.expect_ws()?;
            let idx = c.word();
            let index: usize = idx
                .parse()
                .map_err(|_| c.err(format!("invalid argument index `{idx}`")))?;
            c.expect_ws()?;
            c.expect("substr")?;
            c.expect_ws()?;
            let substring = c.quoted()?;
            arg_condition = Some(ArgPattern { index, substring });
            c.expect_ws()?;
        }
        c.expect("->")?;
        c.expect_ws()?;
        let action = match c.action()? {
            "permit" => Action::Permit,
            "deny" => Action::Deny,
            other => return Err(c.err(format!("unknown action `{other}`"))),
        };
        c.end()?;
        Ok(PolicyStatement {
            seq_pattern,
            arg_condition,
            action,
        })
    }
}

fn parse_default(line: &str) -> Result<DefaultAction> {
    let mut c = Cursor::new(line);
    c.skip_ws();
    c.expect("default")?;
    c.expect_ws()?;
    c.expect("->")?;
    c.expect_ws()?;
    let action = match c.action()? {
        "permit" => DefaultAction::Permit,
        "deny" => DefaultAction::Deny,
        "ask" => DefaultAction::Ask,
        other => return Err(c.err(format!("unknown default action `{other}`"))),
    };
    c.end()?;
    Ok(action)
}

/// An ordered policy: base statements, then learned statements, then the default.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    statements: Vec<PolicyStatement>,
    base_len: usize,
    default_action: DefaultAction,
    index: HashSet<PolicyStatement>,
}

impl Default for PolicySet {
    fn default() -> Self {
        PolicySet::new(Vec::new(), DefaultAction::Ask)
    }
}

impl PolicySet {
    /// A base policy; all given statements count as user-written.
    pub fn new(statements: Vec<PolicyStatement>, default_action: DefaultAction) -> Self {
        PolicySet {
            base_len: statements.len(),
            index: statements.iter().cloned().collect(),
            statements,
            default_action,
        }
    }

    pub fn statements(&self) -> &[PolicyStatement] {
        &self.statements
    }

    pub fn base_statements(&self) -> &[PolicyStatement] {
        &self.statements[..self.base_len]
    }

    pub fn learned_statements(&self) -> &[PolicyStatement] {
        &self.statements[self.base_len..]
    }

    pub fn default_action(&self) -> DefaultAction {
        self.default_action
    }

    pub fn len(&self) -> usize {
        self.statements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }

    /// Appends statements not already present, keeping arrival order. Returns how many were added.
    pub fn merge(&mut self, new: impl IntoIterator<Item = PolicyStatement>) -> usize {
        let before = self.statements.len();
        for s in new {
            if self.index.insert(s.clone()) {
                self.statements.push(s);
            }
        }
        self.statements.len() - before
    }

    /// First-match-wins evaluation of one contiguous call window.
    pub fn evaluate(&self, window: &[AntigenEvent]) -> Verdict {
        self.statements
            .iter()
            .enumerate()
            .find(|(_, s)| s.tcr().matches_window(window))
            .map(|(index, s)| Verdict::Statement {
                index,
                action: s.action,
            })
            .unwrap_or(Verdict::Default(self.default_action))
    }

    /// Parses a policy file. Blank lines and lines starting with `#` are skipped.
    /// A missing `default` line means `default -> ask`; statements after it are rejected.
    pub fn parse(text: &str) -> Result<PolicySet> {
        let mut statements = Vec::new();
        let mut default_action = None;
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if default_action.is_some() {
                return Err(Error::parse(lineno, 1, "statement after the default rule"));
            }
            if line.starts_with("default") {
                default_action = Some(parse_default(raw).map_err(|e| e.at_line(lineno))?);
            } else {
                statements.push(raw.parse::<PolicyStatement>().map_err(|e| e.at_line(lineno))?);
            }
        }
        Ok(PolicySet::new(statements, default_action.unwrap_or(DefaultAction::Ask)))
    }
}

impl fmt::Display for PolicySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.statements {
            writeln!(f, "{s}")?;
        }
        writeln!(f, "default -> {}", self.default_action)
    }
}

impl FromStr for PolicySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicySet::parse(s)
    }
}

/// Inserts `new` after every existing statement and before the default rule,
/// skipping statements already present.
pub fn merge_policies(base: &PolicySet, new: &[PolicyStatement]) -> PolicySet {
    let mut out = base.clone();
    out.merge(new.iter().cloned());
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionEvent {
    pub timestamp: u64,
    pub pid: u32,
    pub effector_id: u64,
    pub statement: PolicyStatement,
    pub action: Action,
}

/// Candidate lookup keyed by `(length, position, name)` of each effector's first concrete item.
struct EffectorIndex<'a> {
    by_key: HashMap<(usize, usize, &'a str), Vec<usize>>,
    lengths: Vec<usize>,
}

impl<'a> EffectorIndex<'a> {
    fn build(effectors: &'a [EffectorTCell]) -> Self {
        let mut by_key: HashMap<(usize, usize, &str), Vec<usize>> = HashMap::new();
        let mut lengths = Vec::new();
        for (i, eff) in effectors.iter().enumerate() {
            let len = eff.tcr.len();
            let Some((pos, name)) = eff.tcr.seq_pattern.iter().enumerate().find_map(|(p, item)| match item {
                PatternItem::Call(n) => Some((p, n.as_str())),
                PatternItem::Any => None,
            }) else {
                continue;
            };
            by_key.entry((len, pos, name)).or_default().push(i);
            lengths.push(len);
        }
        lengths.sort_unstable();
        lengths.dedup();
        EffectorIndex { by_key, lengths }
    }

    /// Index of the effector that answers for this window, if any.
    fn responder(&self, effectors: &[EffectorTCell], window: &[AntigenEvent]) -> Option<usize> {
        let len = window.len();
        let mut best: Option<usize> = None;
        for (pos, ev) in window.iter().enumerate() {
            let Some(bucket) = self.by_key.get(&(len, pos, ev.syscall.as_str())) else {
                continue;
            };
            for &i in bucket {
                let eff = &effectors[i];
                if !eff.tcr.matches_window(window) {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(b) => {
                        let cur = &effectors[b];
                        let better = match (eff.action, cur.action) {
                            (Action::Deny, Action::Permit) => true,
                            (Action::Permit, Action::Deny) => false,
                            _ => eff.id < cur.id,
                        };
                        Some(if better { i } else { b })
                    }
                };
            }
        }
        best
    }
}

/// Tests every contiguous per-process n-gram in `window` against the effectors.
pub fn monitor(effectors: &mut [EffectorTCell], window: &[AntigenEvent]) -> Vec<ActionEvent> {
    monitor_since(effectors, window, 0)
}

/// Like [`monitor`], but only n-grams whose last call has `id >= min_end_id`
/// are tested. Earlier calls still serve as left context.
pub fn monitor_since(effectors: &mut [EffectorTCell], window: &[AntigenEvent], min_end_id: u64) -> Vec<ActionEvent> {
    if effectors.is_empty() || window.is_empty() {
        return Vec::new();
    }
    let mut by_pid: BTreeMap<u32, Vec<&AntigenEvent>> = BTreeMap::new();
    for e in window {
        by_pid.entry(e.pid).or_default().push(e);
    }
    let mut hits: Vec<(u64, usize, usize, u32, u64)> = Vec::new();
    {
        let index = EffectorIndex::build(effectors);
        let mut scratch: Vec<AntigenEvent> = Vec::new();
        for (&pid, seq) in &by_pid {
            for &len in &index.lengths {
                if seq.len() < len {
                    continue;
                }
                for start in 0..=seq.len() - len {
                    let last = seq[start + len - 1];
                    if last.id < min_end_id {
                        continue;
                    }
                    scratch.clear();
                    scratch.extend(seq[start..start + len].iter().map(|e| (*e).clone()));
                    if let Some(i) = index.responder(effectors, &scratch) {
                        hits.push((last.id, len, i, pid, last.timestamp));
                    }
                }
            }
        }
    }
    hits.sort_unstable_by_key(|&(end, len, _, pid, _)| (end, len, pid));
    hits.into_iter()
        .map(|(_, _, i, pid, ts)| {
            let eff = &mut effectors[i];
            eff.match_count += 1;
            ActionEvent {
                timestamp: ts,
                pid,
                effector_id: eff.id,
                statement: effector_to_policy(eff),
                action: eff.action,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetirementConfig {
    /// Extra ticks granted to a cell retained as memory.
    pub memory_extension: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Retirement {
    /// Newly retained memory cells, lifespan already extended.
    pub memory: Vec<EffectorTCell>,
    /// Candidates that were not retained.
    pub dead: Vec<EffectorTCell>,
    /// Memory cells that reached their extended lifespan.
    pub expired_memory: Vec<EffectorTCell>,
    pub survivors: Vec<EffectorTCell>,
}

/// `ceil(0.10 * n)`, computed exactly.
pub fn memory_quota(n: usize) -> usize {
    (n * MEMORY_TENTHS).div_ceil(10)
}

/// Ages every effector. Cells reaching their lifespan form this tick's
/// retirement batch; the top `ceil(0.10 * n)` by match count (earlier creation
/// on ties) become memory, the rest die. Memory cells expire without a second
/// selection.
pub fn retire_effectors(population: Vec<EffectorTCell>, cfg: &RetirementConfig) -> Retirement {
    let mut out = Retirement::default();
    let mut candidates = Vec::new();
    for mut eff in population {
        eff.age += 1;
        if eff.age < eff.lifespan {
            out.survivors.push(eff);
        } else if eff.memory {
            out.expired_memory.push(eff);
        } else {
            candidates.push(eff);
        }
    }
    candidates.sort_by(|a, b| b.match_count.cmp(&a.match_count).then(a.id.cmp(&b.id)));
    let keep = memory_quota(candidates.len());
    for (rank, mut eff) in candidates.into_iter().enumerate() {
        if rank < keep {
            eff.memory = true;
            eff.lifespan += cfg.memory_extension;
            out.memory.push(eff);
        } else {
            out.dead.push(eff);
        }
    }
    out
}
