//! Benchmark plumbing: per-frame metric rows, CSV output, aggregation, and
//! latency profiling.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cache::EndpointCache;
use crate::calibration::fidelity;
use crate::dispatch::{FrameDriver, LatencyModel};
use crate::error::{Error, Result};
use crate::motion::DEFAULT_BLOCK_SIZE;
use crate::pipeline::{sparse_forward, PipelineOptions};
use crate::refnet::NetworkSpec;
use crate::reuse::ThresholdVector;
use crate::rfap::RfapStrategy;
use crate::tensor::{FeatureMap, RecomputeMask};

pub const CSV_HEADER: &str =
    "frame,mode,endpoint,rho_e,rho_c,reuse,compute_ratio,tx_bytes,T_est_ms,T_realized_ms,fidelity";

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub frame: u64,
    pub mode: String,
    pub endpoint: String,
    pub rho_e: f64,
    pub rho_c: f64,
    pub reuse: f64,
    pub compute_ratio: f64,
    pub tx_bytes: usize,
    pub t_est_ms: f64,
    pub t_realized_ms: f64,
    pub fidelity: f64,
}

/// Drives every frame through `driver`, scoring each output against the
/// dense network.
pub fn run_sequence(driver: &mut FrameDriver, frames: &[FeatureMap]) -> Result<Vec<Row>> {
    let mut rows = Vec::with_capacity(frames.len());
    for f in frames {
        let r = driver.run_frame(f)?;
        let dense = driver.net().dense_forward(f)?.pop().unwrap_or_else(|| f.clone());
        let d = &r.decision;
        let t_est = match d.endpoint {
            crate::modes::Endpoint::Edge => d.t_edge,
            crate::modes::Endpoint::Cloud => d.t_cloud,
        };
        rows.push(Row {
            frame: r.frame_id,
            mode: driver.mode_name().to_string(),
            endpoint: d.endpoint.as_str().to_string(),
            rho_e: d.rho_e,
            rho_c: d.rho_c,
            reuse: r.stats.reuse_ratio,
            compute_ratio: r.stats.compute_ratio,
            tx_bytes: r.tx_bytes,
            t_est_ms: t_est,
            t_realized_ms: r.realized_ms,
            fidelity: fidelity(&r.output, &dense)?,
        });
    }
    Ok(rows)
}

/// Rows plus a `mean` row over every frame but the first.
pub fn to_csv(rows: &[Row]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{:.3},{:.3},{:.6}",
            r.frame,
            r.mode,
            r.endpoint,
            r.rho_e,
            r.rho_c,
            r.reuse,
            r.compute_ratio,
            r.tx_bytes,
            r.t_est_ms,
            r.t_realized_ms,
            r.fidelity
        );
    }
    let tail: Vec<&Row> = rows.iter().skip(1).collect();
    if !tail.is_empty() {
        let n = tail.len() as f64;
        let mean = |f: fn(&Row) -> f64| tail.iter().map(|r| f(r)).sum::<f64>() / n;
        let cloud = tail.iter().filter(|r| r.endpoint == "cloud").count() as f64 / n;
        let _ = writeln!(
            s,
            "mean,{},cloud={cloud:.3},{:.6},{:.6},{:.6},{:.6},{:.1},{:.3},{:.3},{:.6}",
            rows[0].mode,
            mean(|r| r.rho_e),
            mean(|r| r.rho_c),
            mean(|r| r.reuse),
            mean(|r| r.compute_ratio),
            mean(|r| r.tx_bytes as f64),
            mean(|r| r.t_est_ms),
            mean(|r| r.t_realized_ms),
            mean(|r| r.fidelity)
        );
    }
    s
}

/// Parses the per-frame rows of a run CSV (the summary row is skipped).
pub fn parse_csv(text: &str) -> Result<Vec<Row>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Parse { line: 1, msg: "missing run CSV header".into() }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() || line.starts_with("mean,") {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(perr(format!("expected 11 fields, got {}", f.len())));
        }
        let num = |j: usize| f[j].parse::<f64>().map_err(|e| perr(format!("field {j}: {e}")));
        rows.push(Row {
            frame: f[0].parse().map_err(|e| perr(format!("frame: {e}")))?,
            mode: f[1].to_string(),
            endpoint: f[2].to_string(),
            rho_e: num(3)?,
            rho_c: num(4)?,
            reuse: num(5)?,
            compute_ratio: num(6)?,
            tx_bytes: f[7].parse().map_err(|e| perr(format!("tx_bytes: {e}")))?,
            t_est_ms: num(8)?,
            t_realized_ms: num(9)?,
            fidelity: num(10)?,
        });
    }
    Ok(rows)
}

pub const REPORT_HEADER: &str = "run,mode,frames,cloud_pct,reuse,compute_ratio,tx_bytes,T_realized_ms,fidelity";

/// One summary line per named run; the first frame of each run is left out.
pub fn report(runs: &[(String, Vec<Row>)]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::Usage("report needs at least one run CSV".into()));
    }
    let mut s = format!("{REPORT_HEADER}\n");
    for (name, rows) in runs {
        let tail: Vec<&Row> = rows.iter().filter(|r| r.frame != 0).collect();
        if tail.is_empty() {
            return Err(Error::Usage(format!("run `{name}` has no frames after the first")));
        }
        let n = tail.len() as f64;
        let mean = |f: fn(&Row) -> f64| tail.iter().map(|r| f(r)).sum::<f64>() / n;
        let cloud = tail.iter().filter(|r| r.endpoint == "cloud").count() as f64 / n * 100.0;
        let _ = writeln!(
            s,
            "{name},{},{},{cloud:.1},{:.6},{:.6},{:.1},{:.3},{:.6}",
            tail[0].mode,
            tail.len(),
            mean(|r| r.reuse),
            mean(|r| r.compute_ratio),
            mean(|r| r.tx_bytes as f64),
            mean(|r| r.t_realized_ms),
            mean(|r| r.fidelity)
        );
    }
    Ok(s)
}

/// Synthetic latency: a fixed intercept plus the dense cost scaled by the
/// fraction of dense work executed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticTiming {
    pub intercept_ms: f64,
    pub dense_ms: f64,
}

/// Sweeps the dispatch-layer recompute fraction over `rhos` by changing
/// randomly chosen 16x16 blocks of a warmed frame, and maps each measured
/// compute ratio to a latency.
pub fn profile(
    net: &NetworkSpec,
    frame: &FeatureMap,
    rfap: &dyn RfapStrategy,
    timing: SyntheticTiming,
    rhos: &[f64],
    seed: u64,
    isotonic: bool,
) -> Result<LatencyModel> {
    let (h, w, _) = net.input_dims();
    let b = DEFAULT_BLOCK_SIZE;
    let blocks: Vec<(usize, usize)> = (0..h / b).flat_map(|by| (0..w / b).map(move |bx| (by, bx))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::invalid(format!("rho {rho} outside [0, 1]")));
        }
        let mut cache = EndpointCache::new(net)?;
        sparse_forward(net, &mut cache, frame, &RecomputeMask::full(h, w), rfap, &ThresholdVector::zero(), PipelineOptions::default())?;
        let k = (rho * blocks.len() as f64).round() as usize;
        let mut chosen = blocks.clone();
        chosen.shuffle(&mut rng);
        let mut mask = RecomputeMask::empty(h, w);
        let mut next = frame.clone();
        for &(by, bx) in chosen.iter().take(k) {
            for r in by * b..(by + 1) * b {
                for c in bx * b..(bx + 1) * b {
                    mask.set(r, c, true);
                    next.pixel_mut(r, c).iter_mut().for_each(|v| *v = (*v + 0.5).rem_euclid(1.0));
                }
            }
        }
        let (_, stats) = sparse_forward(net, &mut cache, &next, &mask, rfap, &ThresholdVector::zero(), PipelineOptions::default())?;
        let cr = stats.compute_ratio;
        points.push((rho, timing.intercept_ms + (timing.dense_ms - timing.intercept_ms) * cr));
    }
    let model = LatencyModel::new(points)?;
    Ok(if isotonic { model.isotonic() } else { model })
}
