//! Trace-driven uplink simulation.
//!
//! A trace is a list of `(t_ms, bps)` samples; each sample's rate holds until
//! the next sample. The last sample holds for the mean sample spacing, after
//! which the trace repeats.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

pub const DEFAULT_PROPAGATION_MS: f64 = 20.0;
pub const FLOOR_BPS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthTrace {
    samples: Vec<(f64, f64)>,
    period: f64,
}

impl BandwidthTrace {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("trace must have at least one sample"));
        }
        if samples.iter().any(|&(t, b)| !t.is_finite() || !b.is_finite() || b <= 0.0) {
            return Err(Error::invalid("trace samples must be finite with positive rates"));
        }
        if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("trace timestamps must be strictly ascending"));
        }
        let n = samples.len();
        let period = if n == 1 {
            f64::INFINITY
        } else {
            let span = samples[n - 1].0 - samples[0].0;
            span + span / (n - 1) as f64
        };
        Ok(Self { samples, period })
    }

    pub fn constant(bps: f64) -> Result<Self> {
        Self::new(vec![(0.0, bps)])
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    /// Rate at `t_ms` and the time until it next changes.
    fn segment(&self, t_ms: f64) -> (f64, f64) {
        let t0 = self.samples[0].0;
        if self.period.is_infinite() {
            return (self.samples[0].1, f64::INFINITY);
        }
        let local = (t_ms - t0).rem_euclid(self.period) + t0;
        let idx = self.samples.partition_point(|&(t, _)| t <= local).saturating_sub(1);
        let end = self.samples.get(idx + 1).map(|s| s.0).unwrap_or(t0 + self.period);
        (self.samples[idx].1, (end - local).max(1e-9))
    }

    pub fn rate_at(&self, t_ms: f64) -> f64 {
        self.segment(t_ms).0
    }

    /// Milliseconds to drain `bits` starting at `start_ms`.
    pub fn drain_ms(&self, bits: f64, start_ms: f64) -> f64 {
        let mut left = bits;
        let mut t = start_ms;
        while left > 0.0 {
            let (rate, span) = self.segment(t);
            let cap = rate * span / 1000.0;
            if cap >= left {
                t += left / rate * 1000.0;
                break;
            }
            left -= cap;
            t += span;
        }
        t - start_ms
    }

    /// Mean rate over `[from_ms, to_ms)`.
    pub fn mean_bps(&self, from_ms: f64, to_ms: f64) -> f64 {
        if to_ms <= from_ms {
            return self.rate_at(from_ms);
        }
        let mut t = from_ms;
        let mut bits = 0.0;
        while t < to_ms {
            let (rate, span) = self.segment(t);
            let step = span.min(to_ms - t);
            bits += rate * step;
            t += step;
        }
        bits / (to_ms - from_ms)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_ms,bps\n");
        for (t, b) in &self.samples {
            s.push_str(&format!("{t},{b}\n"));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("t_ms")) {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let (t, b) = line.split_once(',').ok_or_else(|| perr("expected t_ms,bps".into()))?;
            let t = t.trim().parse::<f64>().map_err(|e| perr(e.to_string()))?;
            let b = b.trim().parse::<f64>().map_err(|e| perr(e.to_string()))?;
            samples.push((t, b));
        }
        Self::new(samples)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Low,
    Medium,
    High,
}

impl Tier {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Tier::Low),
            "medium" => Ok(Tier::Medium),
            "high" => Ok(Tier::High),
            _ => Err(Error::Usage(format!("unknown tier `{s}` (low, medium, high)"))),
        }
    }

    /// Mean and standard deviation in Mbps.
    pub fn stats_mbps(self) -> (f64, f64) {
        match self {
            Tier::Low => (40.4, 36.6),
            Tier::Medium => (382.8, 419.1),
            Tier::High => (596.9, 467.9),
        }
    }
}

/// Gamma-distributed samples matching the tier's mean and spread, floored
/// at 1 Mbps.
pub fn generate_tier_trace(tier: Tier, samples: usize, step_ms: f64, seed: u64) -> Result<BandwidthTrace> {
    if samples == 0 || step_ms <= 0.0 {
        return Err(Error::invalid("trace needs samples and a positive step"));
    }
    let (mean, std) = tier.stats_mbps();
    let shape = (mean / std).powi(2);
    let scale = std * std / mean;
    let gamma = Gamma::new(shape, scale).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..samples)
        .map(|i| (i as f64 * step_ms, (gamma.sample(&mut rng) * 1e6).max(FLOOR_BPS)))
        .collect();
    BandwidthTrace::new(pts)
}

#[derive(Debug, Clone)]
pub struct LinkSim {
    pub trace: BandwidthTrace,
    pub propagation_ms: f64,
}

impl LinkSim {
    pub fn new(trace: BandwidthTrace, propagation_ms: f64) -> Self {
        Self { trace, propagation_ms }
    }

    /// Drain time of `bytes` from `start_ms` plus one-way propagation.
    pub fn transfer_time(&self, bytes: usize, start_ms: f64) -> f64 {
        self.trace.drain_ms(bytes as f64 * 8.0, start_ms) + self.propagation_ms
    }
}
