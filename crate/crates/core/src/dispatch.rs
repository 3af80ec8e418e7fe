//! Per-frame endpoint selection and the end-to-end frame driver.

use std::sync::Arc;

use log::{debug, warn};

use crate::cache::{audit, DispatchState, EndpointCache};
use crate::error::{Error, Result};
use crate::link::LinkSim;
use crate::modes::{Endpoint, ExecutionMode};
use crate::motion::{estimate_mv, AccumMv, MvField, DEFAULT_BLOCK_SIZE};
use crate::pipeline::{sparse_forward, FrameStats, PipelineOptions};
use crate::refnet::NetworkSpec;
use crate::reuse::{dispatch_recompute_set, ThresholdVector};
use crate::rfap::RfapRegistry;
use crate::server::{CloudEndpoint, SessionConfig};
use crate::tensor::{FeatureMap, RecomputeMask};
use crate::wire::{self, OffloadPayload};

pub const DEFAULT_EPSILON_MS: f64 = 5.0;
pub const DEFAULT_EWMA_WEIGHT: f64 = 0.3;
pub const DEFAULT_FRAME_INTERVAL_MS: f64 = 1000.0 / 30.0;

/// Piecewise-linear latency curve over the recompute fraction, clamped at
/// both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyModel {
    points: Vec<(f64, f64)>,
}

impl LatencyModel {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("latency model needs at least two points"));
        }
        if points.iter().any(|&(r, l)| !(0.0..=1.0).contains(&r) || !(l > 0.0 && l.is_finite())) {
            return Err(Error::invalid("latency points need rho in [0,1] and positive latency"));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("latency model rho values must be strictly ascending"));
        }
        Ok(Self { points })
    }

    /// Fixed overhead at zero work, measured dense latency at full work.
    pub fn default_edge() -> Self {
        Self::new(vec![(0.0, 50.0), (1.0, 446.8)]).expect("valid")
    }

    pub fn default_cloud() -> Self {
        Self::new(vec![(0.0, 5.0), (1.0, 27.6)]).expect("valid")
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn eval(&self, rho: f64) -> f64 {
        let p = &self.points;
        if rho <= p[0].0 {
            return p[0].1;
        }
        if rho >= p[p.len() - 1].0 {
            return p[p.len() - 1].1;
        }
        let i = p.partition_point(|&(r, _)| r <= rho);
        let (r0, l0) = p[i - 1];
        let (r1, l1) = p[i];
        l0 + (l1 - l0) * (rho - r0) / (r1 - r0)
    }

    /// Least-squares non-decreasing fit (pool adjacent violators).
    pub fn isotonic(&self) -> Self {
        let mut blocks: Vec<(f64, usize)> = Vec::new();
        for &(_, l) in &self.points {
            blocks.push((l, 1));
            while blocks.len() > 1 {
                let (b, nb) = blocks[blocks.len() - 1];
                let (a, na) = blocks[blocks.len() - 2];
                if a <= b {
                    break;
                }
                blocks.pop();
                let n = na + nb;
                *blocks.last_mut().unwrap() = ((a * na as f64 + b * nb as f64) / n as f64, n);
            }
        }
        let fitted = blocks.iter().flat_map(|&(v, n)| std::iter::repeat_n(v, n));
        let points = self.points.iter().zip(fitted).map(|(&(r, _), l)| (r, l)).collect();
        Self { points }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rho,latency_ms\n");
        for (r, l) in &self.points {
            s.push_str(&format!("{r},{l}\n"));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut pts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("rho")) {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let (r, l) = line.split_once(',').ok_or_else(|| perr("expected rho,latency_ms".into()))?;
            let r = r.trim().parse::<f64>().map_err(|e| perr(e.to_string()))?;
            let l = l.trim().parse::<f64>().map_err(|e| perr(e.to_string()))?;
            pts.push((r, l));
        }
        Self::new(pts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthEstimator {
    weight: f64,
    estimate: Option<f64>,
}

impl BandwidthEstimator {
    pub fn new(weight: f64) -> Result<Self> {
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::invalid("ewma weight must be in (0, 1]"));
        }
        Ok(Self { weight, estimate: None })
    }

    pub fn estimate(&self) -> Option<f64> {
        self.estimate
    }

    pub fn update(&mut self, sample_bps: f64) {
        if !(sample_bps > 0.0 && sample_bps.is_finite()) {
            warn!("ignoring bandwidth sample {sample_bps}");
            return;
        }
        self.estimate = Some(match self.estimate {
            None => sample_bps,
            Some(b) => self.weight * sample_bps + (1.0 - self.weight) * b,
        });
    }
}

pub fn estimate_edge(model: &LatencyModel, rho_e: f64) -> f64 {
    model.eval(rho_e)
}

pub fn estimate_cloud(
    model: &LatencyModel,
    rho_c: f64,
    payload_bytes: usize,
    bandwidth_bps: f64,
    propagation_ms: f64,
) -> Result<f64> {
    if bandwidth_bps.is_nan() || bandwidth_bps <= 0.0 {
        return Err(Error::invalid(format!("bandwidth estimate {bandwidth_bps} must be positive")));
    }
    Ok(model.eval(rho_c) + payload_bytes as f64 * 8.0 / bandwidth_bps * 1000.0 + propagation_ms)
}

/// Edge only when it is faster by more than the margin.
pub fn decide(t_edge: f64, t_cloud: f64, epsilon: f64) -> Endpoint {
    if t_edge < t_cloud - epsilon {
        Endpoint::Edge
    } else {
        Endpoint::Cloud
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchDecision {
    pub endpoint: Endpoint,
    pub t_edge: f64,
    pub t_cloud: f64,
    pub payload_bytes: usize,
    pub rho_e: f64,
    pub rho_c: f64,
}

#[derive(Debug, Clone)]
pub struct DriverConfig {
    pub thresholds: ThresholdVector,
    pub rfap: String,
    pub opts: PipelineOptions,
    pub edge_model: LatencyModel,
    pub cloud_model: LatencyModel,
    pub epsilon_ms: f64,
    pub ewma_weight: f64,
    pub frame_interval_ms: f64,
    pub search_radius: usize,
    pub edge_only: bool,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self {
            thresholds: ThresholdVector::zero(),
            rfap: "compacted".into(),
            opts: PipelineOptions::default(),
            edge_model: LatencyModel::default_edge(),
            cloud_model: LatencyModel::default_cloud(),
            epsilon_ms: DEFAULT_EPSILON_MS,
            ewma_weight: DEFAULT_EWMA_WEIGHT,
            frame_interval_ms: DEFAULT_FRAME_INTERVAL_MS,
            search_radius: 16,
            edge_only: false,
        }
    }
}

impl DriverConfig {
    pub fn session(&self, net: Arc<NetworkSpec>) -> SessionConfig {
        SessionConfig {
            net,
            thresholds: self.thresholds.clone(),
            rfap: self.rfap.clone(),
            opts: self.opts,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FrameReport {
    pub frame_id: u64,
    pub output: FeatureMap,
    pub decision: DispatchDecision,
    pub stats: FrameStats,
    /// Bytes actually sent (0 on edge frames, including fallbacks).
    pub tx_bytes: usize,
    pub realized_ms: f64,
    pub fallback: bool,
}

/// Owns the edge cache, the client-side replica of the cloud's dispatch
/// state, and the link to the cloud.
pub struct FrameDriver {
    net: Arc<NetworkSpec>,
    config: DriverConfig,
    mode: Box<dyn ExecutionMode>,
    rfap: RfapRegistry,
    edge: EndpointCache,
    replica: DispatchState,
    cloud: Option<Box<dyn CloudEndpoint>>,
    link: LinkSim,
    bandwidth: BandwidthEstimator,
    prev: Option<FeatureMap>,
    next_id: u64,
    clock_ms: f64,
}

impl FrameDriver {
    pub fn new(
        net: Arc<NetworkSpec>,
        config: DriverConfig,
        mode: Box<dyn ExecutionMode>,
        cloud: Option<Box<dyn CloudEndpoint>>,
        link: LinkSim,
    ) -> Result<Self> {
        let rfap = RfapRegistry::default();
        rfap.get(&config.rfap)?;
        config.thresholds.validate()?;
        let (h, w, c) = net.input_dims();
        if h % DEFAULT_BLOCK_SIZE != 0 || w % DEFAULT_BLOCK_SIZE != 0 {
            return Err(Error::invalid("input dims must be multiples of the block size"));
        }
        let mut bandwidth = BandwidthEstimator::new(config.ewma_weight)?;
        bandwidth.update(link.trace.mean_bps(0.0, config.frame_interval_ms));
        Ok(Self {
            edge: EndpointCache::new(&net)?,
            replica: DispatchState::cold(h, w, c)?,
            net,
            config,
            mode,
            rfap,
            cloud,
            link,
            bandwidth,
            prev: None,
            next_id: 0,
            clock_ms: 0.0,
        })
    }

    pub fn net(&self) -> &NetworkSpec {
        &self.net
    }

    pub fn mode_name(&self) -> &'static str {
        self.mode.name()
    }

    pub fn replica(&self) -> &DispatchState {
        &self.replica
    }

    pub fn edge_cache(&self) -> &EndpointCache {
        &self.edge
    }

    pub fn bandwidth(&self) -> Option<f64> {
        self.bandwidth.estimate()
    }

    /// Compares the replica with the server's dispatch state.
    pub fn audit(&mut self, tol: f32) -> Result<()> {
        let cloud = self.cloud.as_mut().ok_or_else(|| Error::invalid("no cloud endpoint to audit"))?;
        let server = cloud.snapshot()?;
        audit(&self.replica, &server, tol)
    }

    fn recompute_set(&self, state: &DispatchState, frame: &FeatureMap) -> Result<RecomputeMask> {
        let (h, w, _) = self.net.input_dims();
        if state.cold || self.mode.dense() {
            return Ok(RecomputeMask::full(h, w));
        }
        dispatch_recompute_set(frame, &state.input, &state.accum, self.config.thresholds.tau0)
    }

    fn motion(&self, frame: &FeatureMap) -> Result<MvField> {
        let (h, w, _) = self.net.input_dims();
        let b = DEFAULT_BLOCK_SIZE;
        let est = match (&self.prev, self.mode.needs_motion()) {
            (Some(prev), true) => estimate_mv(frame, prev, b, self.config.search_radius)?,
            _ => MvField::zero(b, h / b, w / b)?,
        };
        Ok(self.mode.motion_field(&est))
    }

    pub fn run_frame(&mut self, frame: &FeatureMap) -> Result<FrameReport> {
        if frame.dims() != self.net.input_dims() {
            return Err(Error::invalid("frame does not match network input"));
        }
        let frame_id = self.next_id;
        let field = self.motion(frame)?;

        self.edge.dispatch.accumulate(&field)?;
        self.replica.accumulate(&field)?;
        let blocks = self.replica.accum.quantize_blocks(DEFAULT_BLOCK_SIZE)?;
        self.replica.accum = AccumMv::from_block_field(&blocks);

        let s0_e = self.recompute_set(&self.edge.dispatch, frame)?;
        let s0_c = wire::upsampled_mask(&self.recompute_set(&self.replica, frame)?)?;
        let n = s0_e.len() as f64;
        let work = |m: &RecomputeMask| if self.config.opts.sparse { m.count() as f64 / n } else { 1.0 };
        let (rho_e, rho_c) = (work(&s0_e), work(&s0_c));

        let payload = wire::encode_offload(&OffloadPayload::build(frame_id, frame, blocks, &s0_c)?);
        let t_edge = estimate_edge(&self.config.edge_model, rho_e);
        let bw = self.bandwidth.estimate().unwrap_or(0.0);
        let t_cloud = estimate_cloud(
            &self.config.cloud_model,
            rho_c,
            payload.len(),
            bw,
            self.link.propagation_ms,
        )?;
        let mut endpoint = match self.mode.pinned_endpoint() {
            Some(e) => e,
            None => decide(t_edge, t_cloud, self.config.epsilon_ms),
        };
        if self.config.edge_only || self.cloud.is_none() {
            endpoint = Endpoint::Edge;
        }

        let mut fallback = false;
        let mut result = None;
        if endpoint == Endpoint::Cloud {
            let cloud = self.cloud.as_mut().expect("checked above");
            match cloud.offload(&payload) {
                Ok(r) => {
                    self.replica.mirror_update(frame, &s0_c, self.config.opts)?;
                    result = Some(r);
                }
                Err(e) => {
                    warn!("frame {frame_id}: offload failed ({e}); running on edge");
                    self.replica.mark_cold();
                    fallback = true;
                }
            }
        }

        let report = match result {
            Some(r) => {
                let transfer = self.link.transfer_time(payload.len(), self.clock_ms);
                let drain = transfer - self.link.propagation_ms;
                if drain > 0.0 {
                    self.bandwidth.update(payload.len() as f64 * 8.0 / (drain / 1000.0));
                }
                let net = &self.net;
                let stats = FrameStats {
                    s0_count: s0_c.count(),
                    input_positions: s0_c.len(),
                    layer_counts: r.layer_counts.iter().map(|&c| c as usize).collect(),
                    layer_sizes: net.layers().iter().map(|l| l.out_positions()).collect(),
                    compute_ratio: r.compute_ratio,
                    reuse_ratio: 1.0 - s0_c.count() as f64 / n,
                    ..FrameStats::default()
                };
                FrameReport {
                    frame_id,
                    output: r.output,
                    decision: DispatchDecision {
                        endpoint: Endpoint::Cloud,
                        t_edge,
                        t_cloud,
                        payload_bytes: payload.len(),
                        rho_e,
                        rho_c,
                    },
                    stats,
                    tx_bytes: payload.len(),
                    realized_ms: self.config.cloud_model.eval(rho_c) + transfer,
                    fallback,
                }
            }
            None => {
                let rfap = self.rfap.get(&self.config.rfap)?;
                let (output, stats) = sparse_forward(
                    &self.net,
                    &mut self.edge,
                    frame,
                    &s0_e,
                    rfap,
                    &self.config.thresholds,
                    self.config.opts,
                )?;
                let from = (self.clock_ms - self.config.frame_interval_ms).max(0.0);
                self.bandwidth.update(self.link.trace.mean_bps(from, self.clock_ms.max(from + 1e-9)));
                FrameReport {
                    frame_id,
                    output,
                    decision: DispatchDecision {
                        endpoint: Endpoint::Edge,
                        t_edge,
                        t_cloud,
                        payload_bytes: 0,
                        rho_e,
                        rho_c,
                    },
                    stats,
                    tx_bytes: 0,
                    realized_ms: t_edge,
                    fallback,
                }
            }
        };
        debug!(
            "frame {frame_id}: {} T_e={t_edge:.2} T_c={t_cloud:.2} rho_e={rho_e:.4} rho_c={rho_c:.4}",
            report.decision.endpoint.as_str()
        );
        self.prev = Some(frame.clone());
        self.next_id += 1;
        self.clock_ms += self.config.frame_interval_ms;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::BandwidthTrace;
    use crate::modes::mode_by_name;
    use crate::refnet::{build_network, NetworkConfig};
    use crate::server::LocalCloud;
    use proptest::prelude::*;

    #[test]
    fn latency_examples() {
        let m = LatencyModel::default_edge();
        assert_eq!(estimate_edge(&m, 1.0), 446.8);
        assert_eq!(estimate_edge(&m, 0.0), 50.0);
        assert!((estimate_edge(&m, 0.5) - 248.4).abs() < 1e-9);
        let c = LatencyModel::default_cloud();
        assert!((estimate_cloud(&c, 1.0, 0, 1e9, 20.0).unwrap() - 47.6).abs() < 1e-9);
        let extra = estimate_cloud(&c, 1.0, 1_000_000, 80e6, 20.0).unwrap() - 47.6;
        assert!((extra - 100.0).abs() < 1e-9);
        assert!((estimate_cloud(&c, 1.0, 10, f64::MAX, 20.0).unwrap() - 47.6).abs() < 1e-9);
        assert!(estimate_cloud(&c, 1.0, 10, 0.0, 20.0).is_err());
    }

    #[test]
    fn model_validation_and_csv() {
        assert!(LatencyModel::new(vec![(0.0, 1.0)]).is_err());
        assert!(LatencyModel::new(vec![(0.5, 1.0), (0.5, 2.0)]).is_err());
        assert!(LatencyModel::new(vec![(0.0, 1.0), (1.0, -2.0)]).is_err());
        let m = LatencyModel::default_cloud();
        assert_eq!(LatencyModel::from_csv(&m.to_csv()).unwrap(), m);
    }

    #[test]
    fn isotonic_fit_matches_bruteforce() {
        let m = LatencyModel::new(vec![(0.0, 10.0), (0.25, 30.0), (0.5, 20.0), (0.75, 40.0), (1.0, 35.0)]).unwrap();
        let fit: Vec<f64> = m.isotonic().points().iter().map(|p| p.1).collect();
        assert_eq!(fit, vec![10.0, 25.0, 25.0, 37.5, 37.5]);
        let mono = LatencyModel::default_edge();
        assert_eq!(mono.isotonic(), mono);
    }

    #[test]
    fn ewma_examples() {
        let mut e = BandwidthEstimator::new(0.5).unwrap();
        e.update(100.0);
        assert_eq!(e.estimate(), Some(100.0));
        e.update(200.0);
        assert_eq!(e.estimate(), Some(150.0));
        e.update(-1.0);
        assert_eq!(e.estimate(), Some(150.0));
        let mut e = BandwidthEstimator::new(0.3).unwrap();
        e.update(1.0);
        for _ in 0..50 {
            e.update(42.0);
        }
        assert!((e.estimate().unwrap() - 42.0).abs() < 1e-6);
    }

    #[test]
    fn decide_examples() {
        assert_eq!(decide(100.0, 300.0, 10.0), Endpoint::Edge);
        assert_eq!(decide(295.0, 300.0, 10.0), Endpoint::Cloud);
        assert_eq!(decide(300.0, 300.0, 0.0), Endpoint::Cloud);
    }

    proptest! {
        #[test]
        fn decide_is_margin_argmin(te in 0.0f64..500.0, tc in 0.0f64..500.0, eps in 0.0f64..50.0) {
            let want = if te + eps < tc { Endpoint::Edge } else { Endpoint::Cloud };
            // te + eps < tc and te < tc - eps can differ by rounding; accept either at the boundary.
            if (te + eps - tc).abs() > 1e-9 {
                prop_assert_eq!(decide(te, tc, eps), want);
            }
        }
    }

    fn small_net() -> Arc<NetworkSpec> {
        Arc::new(build_network(&NetworkConfig::default_config().with_input(64, 64, 3)).unwrap())
    }

    fn pan_frames(n: usize) -> Vec<FeatureMap> {
        let tex = |r: i64, c: i64, ch: usize| {
            let v = (r * 73 + c * 151 + ch as i64 * 37).wrapping_mul(2654435761) as u64;
            ((v >> 11) % 1000) as f32 / 1000.0
        };
        (0..n)
            .map(|t| {
                let mut f = FeatureMap::zeros(64, 64, 3).unwrap();
                for r in 0..64 {
                    for c in 0..64 {
                        for ch in 0..3 {
                            f.pixel_mut(r, c)[ch] = tex(r as i64, c as i64 - 2 * t as i64, ch);
                        }
                    }
                }
                f
            })
            .collect()
    }

    fn driver(net: &Arc<NetworkSpec>, cfg: DriverConfig, bps: f64) -> FrameDriver {
        driver_on(net, cfg, BandwidthTrace::constant(bps).unwrap())
    }

    fn driver_on(net: &Arc<NetworkSpec>, cfg: DriverConfig, trace: BandwidthTrace) -> FrameDriver {
        let cloud = LocalCloud::new(cfg.session(Arc::clone(net))).unwrap();
        let link = LinkSim::new(trace, 20.0);
        FrameDriver::new(Arc::clone(net), cfg, mode_by_name("fluxshard").unwrap(), Some(Box::new(cloud)), link)
            .unwrap()
    }

    #[test]
    fn endpoint_choice_never_changes_values() {
        let net = small_net();
        let frames = pan_frames(8);
        let trace = BandwidthTrace::new(vec![(0.0, 0.3e6), (100.0, 500e6)]).unwrap();
        let mut free = driver_on(&net, DriverConfig::default(), trace);
        let mut edge = driver(&net, DriverConfig { edge_only: true, ..DriverConfig::default() }, 2e6);
        let mut seen = std::collections::BTreeSet::new();
        for f in &frames {
            let a = free.run_frame(f).unwrap();
            let b = edge.run_frame(f).unwrap();
            let dense = net.dense_forward(f).unwrap().pop().unwrap();
            seen.insert(a.decision.endpoint.as_str());
            assert!(a.output.max_abs_diff_all(&dense).unwrap() <= 1e-4);
            assert!(b.output.max_abs_diff_all(&dense).unwrap() <= 1e-4);
            assert_eq!(a.tx_bytes, a.decision.payload_bytes);
        }
        assert_eq!(seen.len(), 2, "expected both endpoints over the run: {seen:?}");
        free.audit(1e-6).unwrap();
    }

    #[test]
    fn low_bandwidth_prefers_edge() {
        let net = small_net();
        let mut d = driver(&net, DriverConfig::default(), 0.1e6);
        let r = d.run_frame(&pan_frames(1)[0]).unwrap();
        assert_eq!(r.decision.endpoint, Endpoint::Edge);
        assert_eq!(r.decision.payload_bytes, 0);
        assert!(r.decision.t_edge < r.decision.t_cloud - DEFAULT_EPSILON_MS);
    }

    #[test]
    fn static_sequence_goes_to_cloud_with_tiny_payload() {
        let net = small_net();
        let cfg = DriverConfig {
            thresholds: ThresholdVector::with_tau0(0.01),
            ..DriverConfig::default()
        };
        let mut d = driver(&net, cfg, 100e6);
        let f = &pan_frames(1)[0];
        let mut last = None;
        for _ in 0..4 {
            last = Some(d.run_frame(f).unwrap());
        }
        let r = last.unwrap();
        assert_eq!(r.decision.endpoint, Endpoint::Cloud);
        assert_eq!(r.decision.rho_c, 0.0);
        assert!(r.tx_bytes < 64 * 64 * 3 * 4 / 10);
    }
}
