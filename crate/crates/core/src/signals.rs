//! Signal derivation.
//!
//! Raw observations are turned into four concentrations on a `[0, 100]` scale:
//!
//! | signal       | source                                        |
//! |--------------|-----------------------------------------------|
//! | pamp         | base-policy violations within a sliding window |
//! | danger       | one-step cpu / memory fluctuation of a process |
//! | safe         | complement of danger (`100 - danger`)          |
//! | inflammation | host load average per core                     |

use crate::error::{Error, Result};

/// Upper end of every concentration.
pub const MAX_CONCENTRATION: f64 = 100.0;

/// One per-process resource observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSample {
    pub timestamp: u64,
    pub pid: u32,
    /// Percent of one core; may exceed 100 on multi-threaded processes.
    pub cpu_pct: f64,
    pub mem_kb: f64,
}

impl MetricSample {
    pub fn new(timestamp: u64, pid: u32, cpu_pct: f64, mem_kb: f64) -> Result<Self> {
        if !(cpu_pct.is_finite() && cpu_pct >= 0.0) {
            return Err(Error::input(format!("cpu_pct must be finite and >= 0, got {cpu_pct}")));
        }
        if !(mem_kb.is_finite() && mem_kb >= 0.0) {
            return Err(Error::input(format!("mem_kb must be finite and >= 0, got {mem_kb}")));
        }
        Ok(MetricSample {
            timestamp,
            pid,
            cpu_pct,
            mem_kb,
        })
    }
}

/// One host-wide load observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HostSample {
    pub timestamp: u64,
    pub load_avg: f64,
    pub ncores: u32,
}

impl HostSample {
    pub fn new(timestamp: u64, load_avg: f64, ncores: u32) -> Result<Self> {
        if !(load_avg.is_finite() && load_avg >= 0.0) {
            return Err(Error::input(format!("load_avg must be finite and >= 0, got {load_avg}")));
        }
        if ncores == 0 {
            return Err(Error::input("ncores must be >= 1"));
        }
        Ok(HostSample {
            timestamp,
            load_avg,
            ncores,
        })
    }
}

/// Concentrations of the four input signals, each in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SignalVector {
    pub pamp: f64,
    pub danger: f64,
    pub safe: f64,
    pub inflammation: f64,
}

impl SignalVector {
    pub const ZERO: SignalVector = SignalVector {
        pamp: 0.0,
        danger: 0.0,
        safe: 0.0,
        inflammation: 0.0,
    };

    /// Builds a vector, clamping every component into `[0, 100]`.
    ///
    /// NaN is rejected. Infinities clamp to the nearest bound.
    pub fn new(pamp: f64, danger: f64, safe: f64, inflammation: f64) -> Result<Self> {
        let clamp = |name: &str, v: f64| -> Result<f64> {
            if v.is_nan() {
                return Err(Error::input(format!("{name} concentration is NaN")));
            }
            Ok(v.clamp(0.0, MAX_CONCENTRATION))
        };
        Ok(SignalVector {
            pamp: clamp("pamp", pamp)?,
            danger: clamp("danger", danger)?,
            safe: clamp("safe", safe)?,
            inflammation: clamp("inflammation", inflammation)?,
        })
    }

    pub fn is_valid(&self) -> bool {
        [self.pamp, self.danger, self.safe, self.inflammation]
            .iter()
            .all(|v| (0.0..=MAX_CONCENTRATION).contains(v))
    }

    /// Component-wise arithmetic mean. An empty input yields the zero vector.
    pub fn mean<'a>(vectors: impl IntoIterator<Item = &'a SignalVector>) -> SignalVector {
        let mut acc = SignalVector::ZERO;
        let mut n = 0usize;
        for v in vectors {
            acc.pamp += v.pamp;
            acc.danger += v.danger;
            acc.safe += v.safe;
            acc.inflammation += v.inflammation;
            n += 1;
        }
        if n == 0 {
            return acc;
        }
        let n = n as f64;
        SignalVector {
            pamp: acc.pamp / n,
            danger: acc.danger / n,
            safe: acc.safe / n,
            inflammation: acc.inflammation / n,
        }
    }
}

/// Alias for [`SignalVector::new`].
pub fn build_signal_vector(pamp: f64, danger: f64, safe: f64, inflammation: f64) -> Result<SignalVector> {
    SignalVector::new(pamp, danger, safe, inflammation)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalConfig {
    /// Cpu change (percent points) that maps to full danger.
    pub cpu_scale: f64,
    /// Memory change (kB) that maps to full danger.
    pub mem_scale: f64,
    /// Violation count at which PAMP saturates.
    pub pamp_saturation: f64,
    /// Ticks over which violations are counted.
    pub window: u64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            cpu_scale: 25.0,
            mem_scale: 4096.0,
            pamp_saturation: 5.0,
            window: 5,
        }
    }
}

impl SignalConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be finite and > 0, got {v}")))
            }
        };
        positive("cpu_scale", self.cpu_scale)?;
        positive("mem_scale", self.mem_scale)?;
        positive("pamp_saturation", self.pamp_saturation)?;
        if self.window == 0 {
            return Err(Error::config("signal_window must be >= 1"));
        }
        Ok(())
    }
}

/// Danger and safe concentrations from two consecutive samples of one process.
///
/// `danger = min(100, 100 * max(|dcpu| / cpu_scale, |dmem| / mem_scale))`, `safe = 100 - danger`.
pub fn derive_process_signals(
    prev: &MetricSample,
    cur: &MetricSample,
    cfg: &SignalConfig,
) -> Result<(f64, f64)> {
    if prev.pid != cur.pid {
        return Err(Error::input(format!(
            "metric samples belong to different pids ({} vs {})",
            prev.pid, cur.pid
        )));
    }
    if cur.timestamp <= prev.timestamp {
        return Err(Error::input(format!(
            "metric timestamps must strictly increase for pid {} ({} then {})",
            cur.pid, prev.timestamp, cur.timestamp
        )));
    }
    let cpu = (cur.cpu_pct - prev.cpu_pct).abs() / cfg.cpu_scale;
    let mem = (cur.mem_kb - prev.mem_kb).abs() / cfg.mem_scale;
    let danger = (MAX_CONCENTRATION * cpu.max(mem)).min(MAX_CONCENTRATION);
    Ok((danger, MAX_CONCENTRATION - danger))
}

pub fn derive_pamp(violations: u64, cfg: &SignalConfig) -> f64 {
    (MAX_CONCENTRATION * violations as f64 / cfg.pamp_saturation).min(MAX_CONCENTRATION)
}

pub fn derive_inflammation(host: &HostSample) -> f64 {
    (MAX_CONCENTRATION * host.load_avg / f64::from(host.ncores)).min(MAX_CONCENTRATION)
}
