//! Reuse criterion: dispatch-layer recomputation sets, reuse propagation
//! through a layer, and threshold truncation of candidate positions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::motion::AccumMv;
use crate::refnet::{window_taps, LayerSpec};
use crate::tensor::{FeatureMap, RecomputeMask};

/// Per-layer reuse tolerances. `tau0` applies to the input (dispatch) layer;
/// `tau` is keyed by 1-based layer number, absent entries are 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThresholdVector {
    pub tau0: f32,
    pub tau: BTreeMap<usize, f32>,
    pub provenance: BTreeMap<String, String>,
}

impl ThresholdVector {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn with_tau0(tau0: f32) -> Self {
        Self {
            tau0,
            ..Self::default()
        }
    }

    /// Tolerance of the 0-based layer `idx`.
    #[inline]
    pub fn layer_tau(&self, idx: usize) -> f32 {
        self.tau.get(&(idx + 1)).copied().unwrap_or(0.0)
    }

    pub fn set_layer_tau(&mut self, idx: usize, value: f32) {
        if value == 0.0 {
            self.tau.remove(&(idx + 1));
        } else {
            self.tau.insert(idx + 1, value);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tau0 == 0.0 && self.tau.values().all(|&v| v == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f32| v.is_finite() && v >= 0.0;
        if !ok(self.tau0) || !self.tau.values().all(|&v| ok(v)) {
            return Err(Error::invalid("thresholds must be finite and non-negative"));
        }
        Ok(())
    }

    /// Canonical threshold text, without provenance (used for config hashing).
    pub fn canonical(&self) -> String {
        let mut s = format!("tau0={}\n", self.tau0);
        for (l, v) in &self.tau {
            let _ = writeln!(s, "tau[{l}]={v}");
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = self.canonical();
        for (k, v) in &self.provenance {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: idx + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| perr(format!("expected key=value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || v.parse::<f32>().map_err(|e| perr(format!("bad threshold `{v}`: {e}")));
            if k == "tau0" {
                out.tau0 = num()?;
            } else if let Some(rest) = k.strip_prefix("tau[").and_then(|r| r.strip_suffix(']')) {
                let layer = rest
                    .parse::<usize>()
                    .ok()
                    .filter(|&l| l >= 1)
                    .ok_or_else(|| perr(format!("bad layer index `{rest}`")))?;
                out.tau.insert(layer, num()?);
            } else {
                out.provenance.insert(k.to_string(), v.to_string());
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// Input positions whose MV-aligned cached value differs from the frame by
/// more than `tau0` (max over channels), plus every invalid field position.
pub fn dispatch_recompute_set(
    frame: &FeatureMap,
    cache: &FeatureMap,
    field: &AccumMv,
    tau0: f32,
) -> Result<RecomputeMask> {
    let (h, w, _) = frame.dims();
    if !frame.same_shape(cache) || field.dims() != (h, w) {
        return Err(Error::invalid("frame, cache and field dimensions differ"));
    }
    let bits: Vec<bool> = (0..h * w)
        .into_par_iter()
        .map(|pos| {
            let (r, c) = (pos / w, pos % w);
            match field.target(r, c) {
                None => true,
                Some((tr, tc)) => frame
                    .pixel(r, c)
                    .iter()
                    .zip(cache.pixel(tr, tc))
                    .any(|(a, b)| (a - b).abs() > tau0),
            }
        })
        .collect();
    RecomputeMask::from_bits(h, w, bits)
}

/// Output positions whose receptive-field window intersects `prev`.
pub fn propagate_candidates(prev: &RecomputeMask, layer: &LayerSpec) -> Result<RecomputeMask> {
    if prev.dims() != layer.in_dims {
        return Err(Error::invalid(format!(
            "mask {:?} does not match layer input grid {:?}",
            prev.dims(),
            layer.in_dims
        )));
    }
    let (oh, ow) = layer.out_dims;
    if prev.is_empty() {
        return Ok(RecomputeMask::empty(oh, ow));
    }
    if layer.kernel == 1 && layer.stride == 1 {
        return Ok(prev.clone());
    }
    let integral = prev.integral();
    Ok(RecomputeMask::from_fn(oh, ow, |r, c| integral.any_in(layer.window(r, c))))
}

/// Largest absolute difference between the current input patch of output
/// `(row, col)` and the cached input patch at the motion-compensated output
/// `(row, col) - mv`. Out-of-grid taps read as zero on both sides.
pub fn patch_delta(
    layer: &LayerSpec,
    current: &FeatureMap,
    cached: &FeatureMap,
    row: usize,
    col: usize,
    mv: (i32, i32),
) -> f32 {
    let win = layer.window(row, col);
    let s = layer.stride as isize;
    let (sy, sx) = (mv.0 as isize * s, mv.1 as isize * s);
    let mut best = 0.0f32;
    for (r, c) in window_taps(win) {
        let a = current.pixel_padded(r, c);
        let b = cached.pixel_padded(r - sy, c - sx);
        match (a, b) {
            (Some(a), Some(b)) => {
                for (x, y) in a.iter().zip(b) {
                    best = best.max((x - y).abs());
                }
            }
            (Some(v), None) | (None, Some(v)) => {
                for x in v {
                    best = best.max(x.abs());
                }
            }
            (None, None) => {}
        }
    }
    best
}

/// Filters `candidates` down to positions whose reuse is not covered by the
/// tolerance: kept iff the output field is invalid there, any in-grid input
/// field position in the window is invalid, or `delta * ||w||_1 > tau`.
///
/// `current` is the assembled input of this layer, `cached` the input cache
/// as it stood before this frame (same coordinates as the cached output).
pub fn truncate_candidates(
    candidates: &RecomputeMask,
    current: &FeatureMap,
    cached: &FeatureMap,
    field_in: &AccumMv,
    field_out: &AccumMv,
    layer: &LayerSpec,
    tau: f32,
) -> Result<RecomputeMask> {
    let (ih, iw) = layer.in_dims;
    if candidates.dims() != layer.out_dims
        || field_out.dims() != layer.out_dims
        || field_in.dims() != layer.in_dims
        || (current.height(), current.width()) != (ih, iw)
        || !current.same_shape(cached)
    {
        return Err(Error::invalid("truncation inputs do not match layer geometry"));
    }
    let (oh, ow) = layer.out_dims;
    let l1 = layer.l1 as f64;
    let keep: Vec<(usize, bool)> = candidates
        .set_positions()
        .into_par_iter()
        .map(|pos| {
            let (r, c) = (pos / ow, pos % ow);
            if !field_out.is_valid_at(pos) {
                return (pos, true);
            }
            let win = layer.window(r, c).clip(ih, iw);
            let invalid_in = window_taps(win).any(|(y, x)| !field_in.is_valid(y as usize, x as usize));
            if invalid_in {
                return (pos, true);
            }
            let delta = patch_delta(layer, current, cached, r, c, field_out.get_at(pos));
            (pos, delta as f64 * l1 > tau as f64)
        })
        .collect();
    let mut out = RecomputeMask::empty(oh, ow);
    for (pos, k) in keep {
        if k {
            out.set_at(pos, true);
        }
    }
    Ok(out)
}
