//! One frame of sparse inference on an endpoint cache.
//!
//! Layer by layer, positions whose receptive field touches the previous
//! recomputation set (or an alignment flag) become candidates; candidates
//! whose input patch matches the motion-compensated cached patch within the
//! layer tolerance are dropped; the rest are evaluated fresh and merged over
//! the remapped cache.

use std::time::Instant;

use rayon::prelude::*;

use crate::cache::{merge_into, EndpointCache, SparseValues};
use crate::error::{Error, Result};
use crate::motion::{downsample_field, reset, warp_backward, AccumMv};
use crate::refnet::NetworkSpec;
use crate::reuse::{propagate_candidates, truncate_candidates, ThresholdVector};
use crate::rfap::{merge_rfap, RfapStrategy};
use crate::tensor::{FeatureMap, RecomputeMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineOptions {
    /// Warp caches to the current frame before merging; when off, fresh
    /// values are merged into the un-warped cache and the accumulated field
    /// keeps growing.
    pub remap: bool,
    /// When off, every frame runs the dense network on the assembled input.
    pub sparse: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { remap: true, sparse: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimings {
    pub remap_ms: f64,
    pub rfap_ms: f64,
    pub truncate_ms: f64,
    pub compute_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameStats {
    /// Dispatch-layer recomputation count and grid size.
    pub s0_count: usize,
    pub input_positions: usize,
    /// Per layer `|S_l|`, grid size, and positions actually evaluated.
    pub layer_counts: Vec<usize>,
    pub layer_sizes: Vec<usize>,
    pub evaluated: Vec<usize>,
    pub compute_ratio: f64,
    pub reuse_ratio: f64,
    pub rfap_flagged: usize,
    pub dense: bool,
    pub timings: StageTimings,
}

impl FrameStats {
    fn finish(&mut self, net: &NetworkSpec) {
        let mut done = 0u128;
        let mut total = 0u128;
        for (i, l) in net.layers().iter().enumerate() {
            let macs = l.macs_per_position() as u128;
            done += self.layer_counts[i] as u128 * macs;
            total += self.layer_sizes[i] as u128 * macs;
        }
        self.compute_ratio = if total == 0 { 1.0 } else { done as f64 / total as f64 };
        self.reuse_ratio = 1.0 - self.s0_count as f64 / self.input_positions.max(1) as f64;
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs one frame. `s0` is the dispatch-layer recomputation set on the
/// input grid; `cache.dispatch.accum` must already include this frame's
/// motion. Returns the final layer output.
pub fn sparse_forward(
    net: &NetworkSpec,
    cache: &mut EndpointCache,
    frame: &FeatureMap,
    s0: &RecomputeMask,
    rfap: &dyn RfapStrategy,
    thresholds: &ThresholdVector,
    opts: PipelineOptions,
) -> Result<(FeatureMap, FrameStats)> {
    let (h, w, c) = net.input_dims();
    if frame.dims() != (h, w, c) || s0.dims() != (h, w) {
        return Err(Error::invalid("frame or mask does not match network input"));
    }
    if cache.layers.len() != net.num_layers() || cache.dispatch.input.dims() != (h, w, c) {
        return Err(Error::internal("cache does not match network"));
    }
    let mut stats = FrameStats {
        s0_count: s0.count(),
        input_positions: h * w,
        layer_sizes: net.layers().iter().map(|l| l.out_positions()).collect(),
        ..FrameStats::default()
    };

    if cache.dispatch.cold || s0.is_full() || !opts.sparse {
        let t = Instant::now();
        let input = if cache.dispatch.cold || s0.is_full() {
            frame.clone()
        } else {
            let mut base = if opts.remap {
                warp_backward(&cache.dispatch.input, &cache.dispatch.accum)?.0
            } else {
                cache.dispatch.input.clone()
            };
            merge_into(&mut base, &SparseValues::gather(frame, s0), s0)?;
            base
        };
        let outs = net.dense_forward(&input)?;
        let out = outs.last().cloned().unwrap_or_else(|| input.clone());
        if cache.dispatch.cold || opts.remap {
            cache.dispatch.accum = reset(&cache.dispatch.accum);
        }
        cache.dispatch.input = input;
        cache.dispatch.cold = false;
        cache.layers = outs;
        stats.layer_counts = stats.layer_sizes.clone();
        stats.evaluated = stats.layer_sizes.clone();
        stats.dense = true;
        stats.timings.compute_ms = ms_since(t);
        stats.finish(net);
        return Ok((out, stats));
    }

    let field0 = cache.dispatch.accum.clone();
    let t = Instant::now();
    let (mut assembled, oob0) = if opts.remap {
        warp_backward(&cache.dispatch.input, &field0)?
    } else {
        (cache.dispatch.input.clone(), RecomputeMask::empty(h, w))
    };
    stats.timings.remap_ms += ms_since(t);
    let mut mask = s0.union(&oob0)?;
    merge_into(&mut assembled, &SparseValues::gather(frame, &mask), &mask)?;

    let t = Instant::now();
    let plan = match rfap.input_flags(&field0, net) {
        Some(flags) => {
            stats.rfap_flagged += flags.count();
            merge_rfap(&flags, net)?
        }
        None => None,
    };
    stats.timings.rfap_ms += ms_since(t);

    let mut old_in = std::mem::replace(&mut cache.dispatch.input, assembled.clone());
    let mut field_in = field0.clone();
    let mut reach: Option<RecomputeMask> = None;

    for (idx, layer) in net.layers().iter().enumerate() {
        let field_out = if layer.stride_out() == 1 {
            field0.clone()
        } else {
            downsample_field(&field0, layer.stride_out())?
        };
        if let Some(p) = plan.as_ref().filter(|p| p.layer == idx) {
            reach = Some(p.mask.clone());
        }

        let t = Instant::now();
        let mut candidates = propagate_candidates(&mask, layer)?;
        if let Some(r) = reach.as_mut() {
            *r = propagate_candidates(r, layer)?;
            candidates.union_in_place(r)?;
        }
        let mut forced = match rfap.layer_flags(idx, &field_in, &field_out, net)? {
            Some(f) => {
                stats.rfap_flagged += f.count();
                f
            }
            None => RecomputeMask::empty(layer.out_dims.0, layer.out_dims.1),
        };
        stats.timings.rfap_ms += ms_since(t);

        let t = Instant::now();
        let old_out = std::mem::replace(&mut cache.layers[idx], FeatureMap::zeros(1, 1, 1)?);
        let (mut out, oob) = if opts.remap {
            warp_backward(&old_out, &field_out)?
        } else {
            (old_out.clone(), RecomputeMask::empty(layer.out_dims.0, layer.out_dims.1))
        };
        forced.union_in_place(&oob)?;
        stats.timings.remap_ms += ms_since(t);

        let t = Instant::now();
        let open = candidates.difference(&forced)?;
        let tau = thresholds.layer_tau(idx);
        let kept = truncate_candidates(&open, &assembled, &old_in, &field_in, &field_out, layer, tau)?;
        let s_l = forced.union(&kept)?;
        stats.timings.truncate_ms += ms_since(t);

        let t = Instant::now();
        let positions = s_l.set_positions();
        let oc = layer.out_channels;
        let ow = layer.out_dims.1;
        let mut data = vec![0.0f32; positions.len() * oc];
        data.par_chunks_mut(oc.max(1))
            .zip(positions.par_iter())
            .for_each(|(dst, &p)| layer.eval_position(&assembled, p / ow, p % ow, dst));
        let fresh = SparseValues { positions, data };
        merge_into(&mut out, &fresh, &s_l)?;
        stats.timings.compute_ms += ms_since(t);

        stats.evaluated.push(fresh.positions.len());
        stats.layer_counts.push(s_l.count());
        cache.layers[idx] = out.clone();
        old_in = old_out;
        assembled = out;
        mask = s_l;
        field_in = field_out;
    }

    if opts.remap {
        cache.dispatch.accum = reset(&cache.dispatch.accum);
    }
    stats.finish(net);
    Ok((assembled, stats))
}

/// Recomputation mask that makes a frame dense.
pub fn full_mask(net: &NetworkSpec) -> RecomputeMask {
    let (h, w, _) = net.input_dims();
    RecomputeMask::full(h, w)
}

/// Zero-motion field on the network's input grid.
pub fn zero_field(net: &NetworkSpec) -> AccumMv {
    let (h, w, _) = net.input_dims();
    AccumMv::zero(h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::MvField;
    use crate::refnet::{build_network, NetworkConfig};
    use crate::reuse::dispatch_recompute_set;
    use crate::rfap::{Compacted, Off};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_vec(h, w, c, (0..h * w * c).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap()
    }

    fn small_net() -> NetworkSpec {
        build_network(&NetworkConfig::default_config().with_input(32, 32, 3)).unwrap()
    }

    fn step(
        net: &NetworkSpec,
        cache: &mut EndpointCache,
        frame: &FeatureMap,
        mv: &MvField,
        thr: &ThresholdVector,
        rfap: &dyn RfapStrategy,
    ) -> (FeatureMap, FrameStats) {
        cache.dispatch.accumulate(mv).unwrap();
        let s0 = if cache.is_cold() {
            full_mask(net)
        } else {
            dispatch_recompute_set(frame, &cache.dispatch.input, &cache.dispatch.accum, thr.tau0).unwrap()
        };
        sparse_forward(net, cache, frame, &s0, rfap, thr, PipelineOptions::default()).unwrap()
    }

    #[test]
    fn cold_start_is_dense() {
        let net = small_net();
        let mut cache = EndpointCache::new(&net).unwrap();
        let f = random_map(32, 32, 3, 1);
        let (out, stats) = step(&net, &mut cache, &f, &MvField::zero(16, 2, 2).unwrap(), &ThresholdVector::zero(), &Compacted);
        assert_eq!(&out, net.dense_forward(&f).unwrap().last().unwrap());
        assert_eq!(stats.compute_ratio, 1.0);
        assert!(!cache.is_cold());
    }

    #[test]
    fn identical_frame_reuses_everything() {
        let net = small_net();
        let mut cache = EndpointCache::new(&net).unwrap();
        let f = random_map(32, 32, 3, 1);
        let zero = MvField::zero(16, 2, 2).unwrap();
        step(&net, &mut cache, &f, &zero, &ThresholdVector::zero(), &Compacted);
        let (out, stats) = step(&net, &mut cache, &f, &zero, &ThresholdVector::zero(), &Compacted);
        assert!(stats.layer_counts.iter().all(|&n| n == 0));
        assert_eq!(stats.compute_ratio, 0.0);
        assert_eq!(stats.reuse_ratio, 1.0);
        assert_eq!(&out, net.dense_forward(&f).unwrap().last().unwrap());
    }

    /// `frame_t(p) = base(p - t*delta)`, fresh noise where the source leaves `base`.
    fn pan_frame(base: &FeatureMap, t: i32, dy: i32, dx: i32, h: usize, w: usize, seed: u64) -> FeatureMap {
        let noise = random_map(h, w, 3, seed);
        let mut out = noise;
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = (r as i32 + 16 - t * dy, c as i32 + 16 - t * dx);
                if sr >= 0 && sc >= 0 && (sr as usize) < base.height() && (sc as usize) < base.width() {
                    out.pixel_mut(r, c).copy_from_slice(base.pixel(sr as usize, sc as usize));
                }
            }
        }
        out
    }

    #[test]
    fn pan_matches_dense_and_counts_evaluations() {
        let net = small_net();
        let base = random_map(64, 64, 3, 42);
        let mut cache = EndpointCache::new(&net).unwrap();
        let thr = ThresholdVector::zero();
        let mv = MvField::uniform(16, 2, 2, 0, 4).unwrap();
        for t in 0..6 {
            let f = pan_frame(&base, t, 0, 4, 32, 32, 100 + t as u64);
            let field = if t == 0 { MvField::zero(16, 2, 2).unwrap() } else { mv.clone() };
            let (out, stats) = step(&net, &mut cache, &f, &field, &thr, &Compacted);
            let dense = net.dense_forward(&f).unwrap();
            let err = out.max_abs_diff_all(dense.last().unwrap()).unwrap();
            assert!(err <= 1e-4, "frame {t}: err {err}");
            for (l, d) in cache.layers.iter().zip(&dense) {
                assert!(l.max_abs_diff_all(d).unwrap() <= 1e-4);
            }
            assert_eq!(stats.evaluated, stats.layer_counts);
            if t > 0 {
                assert!(stats.compute_ratio < 1.0);
                assert_eq!(stats.s0_count, 32 * 4);
            }
        }
    }

    #[test]
    fn without_alignment_checks_heterogeneous_motion_breaks() {
        let net = small_net();
        let base = random_map(64, 64, 3, 4);
        let run = |rfap: &dyn RfapStrategy| {
            let mut cache = EndpointCache::new(&net).unwrap();
            let mut worst = 0.0f32;
            for t in 0..4 {
                // Left half pans by 4, right half by 8.
                let cur = if t == 0 {
                    pan_frame(&base, 0, 0, 0, 32, 32, 1)
                } else {
                    let a = pan_frame(&base, t, 0, 4, 32, 32, 10 + t as u64);
                    let b = pan_frame(&base, t, 0, 8, 32, 32, 20 + t as u64);
                    let mut f = a.clone();
                    for r in 0..32 {
                        for c in 16..32 {
                            f.pixel_mut(r, c).copy_from_slice(b.pixel(r, c));
                        }
                    }
                    f
                };
                let mv = if t == 0 {
                    MvField::zero(16, 2, 2).unwrap()
                } else {
                    MvField::from_vectors(16, 2, 2, vec![(0, 4), (0, 8), (0, 4), (0, 8)]).unwrap()
                };
                let (out, _) = step(&net, &mut cache, &cur, &mv, &ThresholdVector::zero(), rfap);
                let dense = net.dense_forward(&cur).unwrap();
                worst = worst.max(out.max_abs_diff_all(dense.last().unwrap()).unwrap());
            }
            worst
        };
        let with = run(&Compacted);
        let without = run(&Off);
        assert!(with <= 1e-4, "{with}");
        assert!(without > with, "{without} vs {with}");
    }
}
