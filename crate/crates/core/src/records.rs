//! Line formats for traces and metrics, and the strace adapter.
//!
//! Canonical trace lines are tab separated:
//!
//! ```text
//! S  ts  pid  name  arg0|arg1|...  [V]     system call, `V` marks a base-policy violation
//! M  ts  pid  cpu_pct  mem_kb              process metrics
//! H  ts  load_avg  ncores                  host load
//! ```
//!
//! Metrics files may also use the untagged forms `ts pid cpu_pct mem_kb` and
//! `ts HOST load_avg ncores`.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};
use crate::response::is_valid_syscall_name;
use crate::signals::{HostSample, MetricSample};
use crate::tissue::AntigenEvent;

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Syscall(AntigenEvent),
    Metric(MetricSample),
    Host(HostSample),
}

impl Record {
    pub fn timestamp(&self) -> u64 {
        match self {
            Record::Syscall(e) => e.timestamp,
            Record::Metric(m) => m.timestamp,
            Record::Host(h) => h.timestamp,
        }
    }
}

/// Splits on tabs, remembering the 1-based column where each field starts.
fn fields(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut col = 1;
    for f in line.split('\t') {
        out.push((col, f));
        col += f.chars().count() + 1;
    }
    out
}

fn field<T: std::str::FromStr>(f: (usize, &str), what: &str) -> Result<T> {
    f.1.parse()
        .map_err(|_| Error::parse(1, f.0, format!("invalid {what} `{}`", f.1)))
}

fn arity(f: &[(usize, &str)], tag: &str, expected: &str) -> Error {
    let col = f.last().map(|l| l.0).unwrap_or(1);
    Error::parse(1, col, format!("`{tag}` record expects {expected} fields, found {}", f.len()))
}

fn input_at(col: usize, e: Error) -> Error {
    match e {
        Error::Input(msg) => Error::parse(1, col, msg),
        other => other,
    }
}

/// Parses one tagged trace line. Errors report line 1; callers re-tag with [`Error::at_line`].
pub fn parse_trace_line(line: &str) -> Result<Record> {
    let f = fields(line.trim_end_matches(['\r', '\n']));
    match f[0].1 {
        "S" => {
            if !(f.len() == 5 || f.len() == 6) {
                return Err(arity(&f, "S", "5 or 6"));
            }
            let timestamp = field(f[1], "timestamp")?;
            let pid = field(f[2], "pid")?;
            let name = f[3].1;
            if !is_valid_syscall_name(name) {
                return Err(Error::parse(1, f[3].0, format!("invalid syscall name `{name}`")));
            }
            let args = if f[4].1.is_empty() {
                Vec::new()
            } else {
                f[4].1.split('|').map(str::to_string).collect()
            };
            let violation = match f.get(5).map(|x| x.1) {
                None | Some("") => false,
                Some("V") => true,
                Some(other) => {
                    return Err(Error::parse(1, f[5].0, format!("expected `V` flag, found `{other}`")));
                }
            };
            Ok(Record::Syscall(AntigenEvent::new(timestamp, pid, name, args, violation)))
        }
        "M" => {
            if f.len() != 5 {
                return Err(arity(&f, "M", "5"));
            }
            let m = MetricSample::new(
                field(f[1], "timestamp")?,
                field(f[2], "pid")?,
                field(f[3], "cpu_pct")?,
                field(f[4], "mem_kb")?,
            )
            .map_err(|e| input_at(f[3].0, e))?;
            Ok(Record::Metric(m))
        }
        "H" => {
            if f.len() != 4 {
                return Err(arity(&f, "H", "4"));
            }
            let h = HostSample::new(field(f[1], "timestamp")?, field(f[2], "load_avg")?, field(f[3], "ncores")?)
                .map_err(|e| input_at(f[2].0, e))?;
            Ok(Record::Host(h))
        }
        other => Err(Error::parse(1, 1, format!("unknown record tag `{other}`"))),
    }
}

/// Parses one metrics-file line: either tagged (`M`/`H`) or untagged.
pub fn parse_metrics_line(line: &str) -> Result<Record> {
    let trimmed = line.trim_end_matches(['\r', '\n']);
    if trimmed.starts_with("M\t") || trimmed.starts_with("H\t") {
        return parse_trace_line(trimmed);
    }
    let f = fields(trimmed);
    if f.len() != 4 {
        return Err(Error::parse(1, 1, format!("metrics line expects 4 fields, found {}", f.len())));
    }
    let ts = field(f[0], "timestamp")?;
    if f[1].1 == "HOST" {
        let h = HostSample::new(ts, field(f[2], "load_avg")?, field(f[3], "ncores")?).map_err(|e| input_at(f[2].0, e))?;
        return Ok(Record::Host(h));
    }
    let m = MetricSample::new(ts, field(f[1], "pid")?, field(f[2], "cpu_pct")?, field(f[3], "mem_kb")?)
        .map_err(|e| input_at(f[2].0, e))?;
    Ok(Record::Metric(m))
}

/// Canonical tagged form.
impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Record::Syscall(e) => {
                write!(f, "S\t{}\t{}\t{}\t{}", e.timestamp, e.pid, e.syscall, e.args.join("|"))?;
                if e.violation {
                    f.write_str("\tV")?;
                }
                Ok(())
            }
            Record::Metric(m) => write!(f, "M\t{}\t{}\t{}\t{}", m.timestamp, m.pid, m.cpu_pct, m.mem_kb),
            Record::Host(h) => write!(f, "H\t{}\t{}\t{}", h.timestamp, h.load_avg, h.ncores),
        }
    }
}

/// Parses every non-blank, non-comment line, tagging errors with their line number.
pub fn parse_lines(text: &str, parse: fn(&str) -> Result<Record>) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(parse(line).map_err(|e| e.at_line(i + 1))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StraceAdaptation {
    pub lines: Vec<String>,
    /// Non-blank lines that were skipped.
    pub warnings: usize,
}

fn strace_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(\d+(?:\.\d+)?)\s+(\d+)\s+([A-Za-z_][A-Za-z0-9_]*)\((.*)\)\s*=\s*\S.*$")
            .expect("static regex")
    })
}

/// First argument of an strace argument list, with string quotes removed.
fn first_strace_arg(args: &str) -> String {
    let args = args.trim_start();
    let mut out = String::new();
    if let Some(rest) = args.strip_prefix('"') {
        let mut chars = rest.chars();
        while let Some(c) = chars.next() {
            match c {
                '"' => break,
                '\\' => match chars.next() {
                    Some(e @ ('"' | '\\')) => out.push(e),
                    Some(e) => {
                        out.push('\\');
                        out.push(e);
                    }
                    None => break,
                },
                c => out.push(c),
            }
        }
    } else {
        let mut depth = 0i32;
        for c in args.chars() {
            match c {
                '(' | '[' | '{' => depth += 1,
                ')' | ']' | '}' => depth -= 1,
                ',' if depth == 0 => break,
                _ => {}
            }
            out.push(c);
        }
        out = out.trim_end().to_string();
    }
    // `|` and tab are field separators in the canonical format.
    out.replace(['|', '\t'], "_")
}

/// Converts `epoch pid name(args) = ret` lines to canonical `S` lines.
///
/// Ticks count whole `tick_secs` intervals since the first accepted line.
/// Split `<unfinished ...>` / `resumed>` lines, signal and exit notices, and
/// anything else that does not fit are skipped and counted.
pub fn adapt_strace(input: &str, tick_secs: f64) -> StraceAdaptation {
    let mut out = StraceAdaptation::default();
    let mut origin: Option<f64> = None;
    for line in input.lines() {
        if line.trim().is_empty() {
            continue;
        }
        if line.contains("<unfinished ...>") || line.contains("resumed>") {
            out.warnings += 1;
            continue;
        }
        let Some(caps) = strace_line_re().captures(line) else {
            out.warnings += 1;
            continue;
        };
        let Ok(ts) = caps[1].parse::<f64>() else {
            out.warnings += 1;
            continue;
        };
        let origin = *origin.get_or_insert(ts);
        let tick = ((ts - origin) / tick_secs).floor().max(0.0) as u64;
        let arg = first_strace_arg(&caps[4]);
        out.lines.push(format!("S\t{tick}\t{}\t{}\t{arg}", &caps[2], &caps[3]));
    }
    out
}
