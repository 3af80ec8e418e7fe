//! Offline greedy threshold calibration against a dense-output fidelity
//! proxy.

use log::info;
use rayon::prelude::*;

use crate::cache::EndpointCache;
use crate::error::{Error, Result};
use crate::motion::{estimate_mv, MvField, DEFAULT_BLOCK_SIZE};
use crate::pipeline::{sparse_forward, PipelineOptions};
use crate::refnet::NetworkSpec;
use crate::reuse::{dispatch_recompute_set, ThresholdVector};
use crate::rfap::RfapStrategy;
use crate::tensor::{FeatureMap, RecomputeMask};

pub const DEFAULT_CANDIDATES: [f32; 6] = [0.0, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1];
pub const DEFAULT_SPLIT: f64 = 2.0 / 3.0;

/// `1 - min(1, |s - d|_1 / (|d|_1 + 1e-9))`.
pub fn fidelity(sparse: &FeatureMap, dense: &FeatureMap) -> Result<f64> {
    if !sparse.same_shape(dense) {
        return Err(Error::invalid("fidelity needs outputs of equal shape"));
    }
    let diff: f64 = sparse.data().iter().zip(dense.data()).map(|(a, b)| (a - b).abs() as f64).sum();
    let norm: f64 = dense.data().iter().map(|v| v.abs() as f64).sum();
    Ok(1.0 - (diff / (norm + 1e-9)).min(1.0))
}

/// Budget for the dispatch stage and for each of `k` profiled layers.
pub fn budget_split(alpha: f64, k: usize, r: f64) -> (f64, Vec<f64>) {
    let total = 1.0 - alpha;
    let b0 = r * total;
    let bl = if k == 0 { 0.0 } else { (1.0 - r) * total / k as f64 };
    (b0, vec![bl; k])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Dispatch,
    /// 0-based layer index.
    Layer(usize),
}

impl Stage {
    fn apply(self, t: &mut ThresholdVector, value: f32) {
        match self {
            Stage::Dispatch => t.tau0 = value,
            Stage::Layer(i) => t.set_layer_tau(i, value),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    pub alpha: f64,
    pub split_ratio: f64,
    pub stages: Vec<Stage>,
    /// One ascending list per stage, each starting at 0.
    pub candidates: Vec<Vec<f32>>,
}

impl CalibrationConfig {
    /// Dispatch stage then every profiled layer, all on the default grid.
    pub fn for_network(net: &NetworkSpec, alpha: f64) -> Self {
        let stages: Vec<Stage> = std::iter::once(Stage::Dispatch)
            .chain(net.profiled_layers().into_iter().map(Stage::Layer))
            .collect();
        Self {
            alpha,
            split_ratio: DEFAULT_SPLIT,
            candidates: vec![DEFAULT_CANDIDATES.to_vec(); stages.len()],
            stages,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("alpha must be in (0, 1]"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::invalid("split ratio must be in (0, 1)"));
        }
        if self.stages.first() != Some(&Stage::Dispatch)
            || self.stages[1..].contains(&Stage::Dispatch)
        {
            return Err(Error::invalid("the dispatch stage must come first, exactly once"));
        }
        if self.candidates.len() != self.stages.len() {
            return Err(Error::invalid("one candidate list per stage"));
        }
        for c in &self.candidates {
            if c.first() != Some(&0.0) || c.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::invalid("candidate lists must start at 0 and ascend"));
            }
        }
        Ok(())
    }
}

/// Mean fidelity of a threshold setting over the calibration data.
pub trait FidelityEvaluator: Sync {
    fn mean_fidelity(&self, thresholds: &ThresholdVector) -> Result<f64>;
}

/// Greedy stage-by-stage search: each stage takes its largest candidate
/// whose fidelity drop fits the budget summed over the stages so far.
pub fn calibrate(config: &CalibrationConfig, eval: &dyn FidelityEvaluator) -> Result<ThresholdVector> {
    config.validate()?;
    let (b0, bl) = budget_split(config.alpha, config.stages.len() - 1, config.split_ratio);
    let mut chosen = ThresholdVector::zero();
    let mut budget = 0.0;
    for (u, (&stage, cands)) in config.stages.iter().zip(&config.candidates).enumerate() {
        budget += if u == 0 { b0 } else { bl[u - 1] };
        let drops: Vec<f64> = cands
            .par_iter()
            .map(|&c| {
                let mut t = chosen.clone();
                stage.apply(&mut t, c);
                eval.mean_fidelity(&t).map(|f| 1.0 - f)
            })
            .collect::<Result<_>>()?;
        let pick = cands
            .iter()
            .zip(&drops)
            .filter(|(_, &d)| d <= budget + 1e-12)
            .map(|(&c, _)| c)
            .next_back()
            .ok_or_else(|| {
                Error::CalibrationInfeasible(format!(
                    "stage {stage:?}: smallest drop {:.6} exceeds budget {budget:.6}",
                    drops[0]
                ))
            })?;
        info!("stage {stage:?}: picked {pick} (budget {budget:.6})");
        stage.apply(&mut chosen, pick);
    }
    chosen.provenance.insert("alpha".into(), config.alpha.to_string());
    chosen.provenance.insert("r".into(), config.split_ratio.to_string());
    Ok(chosen)
}

/// Replay summary over all calibration sequences (frame 0 excluded).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Replay {
    pub fidelity: f64,
    pub compute_ratio: f64,
}

struct Sequence {
    frames: Vec<FeatureMap>,
    fields: Vec<MvField>,
    dense: Vec<FeatureMap>,
}

/// Runs the edge-only sparse pipeline; motion and dense outputs are
/// computed once up front.
pub struct PipelineEvaluator<'a> {
    net: &'a NetworkSpec,
    rfap: &'a dyn RfapStrategy,
    opts: PipelineOptions,
    sequences: Vec<Sequence>,
}

impl<'a> PipelineEvaluator<'a> {
    pub fn new(
        net: &'a NetworkSpec,
        rfap: &'a dyn RfapStrategy,
        opts: PipelineOptions,
        sequences: Vec<Vec<FeatureMap>>,
        search_radius: usize,
    ) -> Result<Self> {
        if sequences.is_empty() || sequences.iter().any(|s| s.len() < 2) {
            return Err(Error::invalid("calibration needs sequences of at least two frames"));
        }
        let (h, w, _) = net.input_dims();
        let b = DEFAULT_BLOCK_SIZE;
        let sequences = sequences
            .into_iter()
            .map(|frames| {
                let mut fields = vec![MvField::zero(b, h / b, w / b)?];
                for t in 1..frames.len() {
                    fields.push(estimate_mv(&frames[t], &frames[t - 1], b, search_radius)?);
                }
                let dense = frames
                    .iter()
                    .map(|f| Ok(net.dense_forward(f)?.pop().unwrap_or_else(|| f.clone())))
                    .collect::<Result<_>>()?;
                Ok(Sequence { frames, fields, dense })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            net,
            rfap,
            opts,
            sequences,
        })
    }

    fn replay_one(&self, seq: &Sequence, t: &ThresholdVector) -> Result<(f64, f64)> {
        let mut cache = EndpointCache::new(self.net)?;
        let (mut fid, mut cr) = (0.0, 0.0);
        for (i, frame) in seq.frames.iter().enumerate() {
            cache.dispatch.accumulate(&seq.fields[i])?;
            let s0 = if cache.is_cold() {
                RecomputeMask::full(frame.height(), frame.width())
            } else {
                dispatch_recompute_set(frame, &cache.dispatch.input, &cache.dispatch.accum, t.tau0)?
            };
            let (out, stats) = sparse_forward(self.net, &mut cache, frame, &s0, self.rfap, t, self.opts)?;
            if i > 0 {
                fid += fidelity(&out, &seq.dense[i])?;
                cr += stats.compute_ratio;
            }
        }
        let n = (seq.frames.len() - 1) as f64;
        Ok((fid / n, cr / n))
    }

    pub fn replay(&self, t: &ThresholdVector) -> Result<Replay> {
        let mut per: Vec<(f64, f64)> = self
            .sequences
            .par_iter()
            .map(|s| self.replay_one(s, t))
            .collect::<Result<_>>()?;
        per.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let n = per.len() as f64;
        Ok(Replay {
            fidelity: per.iter().map(|p| p.0).sum::<f64>() / n,
            compute_ratio: per.iter().map(|p| p.1).sum::<f64>() / n,
        })
    }
}

impl FidelityEvaluator for PipelineEvaluator<'_> {
    fn mean_fidelity(&self, thresholds: &ThresholdVector) -> Result<f64> {
        Ok(self.replay(thresholds)?.fidelity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fidelity_examples() {
        let d = FeatureMap::from_vec(1, 2, 1, vec![1.0, -2.0]).unwrap();
        assert_eq!(fidelity(&d, &d).unwrap(), 1.0);
        assert!(fidelity(&FeatureMap::zeros(1, 2, 1).unwrap(), &d).unwrap() < 1e-9);
        let s = FeatureMap::from_vec(1, 2, 1, vec![1.001, -2.002]).unwrap();
        assert!((fidelity(&s, &d).unwrap() - 0.999).abs() < 1e-5);
        assert!(fidelity(&d, &FeatureMap::zeros(2, 1, 1).unwrap()).is_err());
    }

    #[test]
    fn budget_examples() {
        let (b0, bl) = budget_split(0.97, 2, 2.0 / 3.0);
        assert!((b0 - 0.02).abs() < 1e-12);
        assert!(bl.iter().all(|b| (b - 0.005).abs() < 1e-12));
        let (b0, bl) = budget_split(1.0, 3, 0.5);
        assert_eq!(b0, 0.0);
        assert!(bl.iter().all(|&b| b == 0.0));
        let (b0, bl) = budget_split(0.95, 3, 0.9);
        assert!((b0 - 0.045).abs() < 1e-12);
        assert!(bl.iter().all(|b| (b - 0.1 * 0.05 / 3.0).abs() < 1e-12));
        let (_, bl) = budget_split(0.9, 0, 0.5);
        assert!(bl.is_empty());
    }

    /// Drop is a fixed table over (tau0, tau[layer 0]).
    struct Table(Vec<Vec<f64>>);

    impl FidelityEvaluator for Table {
        fn mean_fidelity(&self, t: &ThresholdVector) -> Result<f64> {
            let grid = &DEFAULT_CANDIDATES;
            let i = grid.iter().position(|&g| g == t.tau0).unwrap();
            let j = grid.iter().position(|&g| g == t.layer_tau(0)).unwrap();
            Ok(1.0 - self.0[i][j])
        }
    }

    fn two_stage(alpha: f64) -> CalibrationConfig {
        CalibrationConfig {
            alpha,
            split_ratio: 2.0 / 3.0,
            stages: vec![Stage::Dispatch, Stage::Layer(0)],
            candidates: vec![DEFAULT_CANDIDATES.to_vec(); 2],
        }
    }

    #[test]
    fn greedy_matches_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = DEFAULT_CANDIDATES.len();
            // drops grow with both thresholds, with noise
            let table: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| (i + j) as f64 * rng.gen_range(0.0..0.01)).collect())
                .collect();
            let alpha = rng.gen_range(0.9..1.0);
            let cfg = two_stage(alpha);
            let (b0, bl) = budget_split(alpha, 1, cfg.split_ratio);
            // stage 0: largest i with drop(i, 0) <= b0; stage 1: largest j with drop(i*, j) <= b0 + b1
            let i = (0..n).filter(|&i| table[i][0] <= b0 + 1e-12).max();
            let want = i.and_then(|i| (0..n).filter(|&j| table[i][j] <= b0 + bl[0] + 1e-12).max().map(|j| (i, j)));
            let got = calibrate(&cfg, &Table(table.clone()));
            match want {
                None => assert!(matches!(got, Err(Error::CalibrationInfeasible(_)))),
                Some((i, j)) => {
                    let t = got.unwrap();
                    assert_eq!((t.tau0, t.layer_tau(0)), (DEFAULT_CANDIDATES[i], DEFAULT_CANDIDATES[j]));
                }
            }
        }
    }

    #[test]
    fn zero_budget_and_no_drop() {
        let flat = Table(vec![vec![0.0; 6]; 6]);
        let t = calibrate(&two_stage(0.97), &flat).unwrap();
        assert_eq!((t.tau0, t.layer_tau(0)), (0.1, 0.1));
        let rising = Table((0..6).map(|i| (0..6).map(|j| (i + j) as f64 * 1e-3).collect()).collect());
        let t = calibrate(&two_stage(1.0), &rising).unwrap();
        assert!(t.is_zero());
        let broken = Table(vec![vec![0.5; 6]; 6]);
        assert!(matches!(calibrate(&two_stage(0.99), &broken), Err(Error::CalibrationInfeasible(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = two_stage(0.97);
        c.candidates[1] = vec![0.1, 0.0];
        assert!(c.validate().is_err());
        let mut c = two_stage(0.97);
        c.stages = vec![Stage::Layer(0), Stage::Dispatch];
        assert!(c.validate().is_err());
        assert!(CalibrationConfig { alpha: 0.0, ..two_stage(0.9) }.validate().is_err());
    }
}
