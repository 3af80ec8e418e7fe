//! Receptive-field alignment checks on accumulated motion fields.
//!
//! A cached output can be reused under a motion field only if every input
//! position of its receptive field moved by the same displacement and that
//! displacement survives the network's stride division. The compacted check
//! tests this once at input resolution against `R_max`/`S_max`; the per-layer
//! check tests each layer's own window.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::motion::{downsample_field, AccumMv};
use crate::refnet::{window_taps, LayerSpec, NetworkSpec};
use crate::tensor::RecomputeMask;

/// Pixels failing window uniformity (centered square of side
/// `2*floor(R_max/2)+1`, clipped), `S_max` divisibility, or validity.
pub fn rfap_input_check(field: &AccumMv, r_max: usize, s_max: usize) -> RecomputeMask {
    let (h, w) = field.dims();
    let half = (r_max / 2) as isize;
    let s = s_max.max(1) as i32;
    let bits: Vec<bool> = (0..h * w)
        .into_par_iter()
        .map(|pos| {
            if !field.is_valid_at(pos) {
                return true;
            }
            let (dy, dx) = field.get_at(pos);
            if dy % s != 0 || dx % s != 0 {
                return true;
            }
            let (r, c) = ((pos / w) as isize, (pos % w) as isize);
            let r0 = (r - half).max(0) as usize;
            let r1 = ((r + half) as usize).min(h - 1);
            let c0 = (c - half).max(0) as usize;
            let c1 = ((c + half) as usize).min(w - 1);
            (r0..=r1).any(|y| (c0..=c1).any(|x| !field.is_valid(y, x) || field.get(y, x) != (dy, dx)))
        })
        .collect();
    RecomputeMask::from_bits(h, w, bits).expect("dims consistent")
}

/// Pixels within `floor(R_max/2)` of a frame edge that move across that edge's
/// axis. Their receptive fields mix zero padding with shifted content.
pub fn border_coherence_check(field: &AccumMv, r_max: usize) -> RecomputeMask {
    let (h, w) = field.dims();
    let half = r_max / 2;
    RecomputeMask::from_fn(h, w, |r, c| {
        let (dy, dx) = field.get(r, c);
        let near_row = r < half || r + half >= h;
        let near_col = c < half || c + half >= w;
        (near_row && dy != 0) || (near_col && dx != 0)
    })
}

/// Layer-level check: output positions whose in-grid window carries mixed
/// `(dy, dx, valid)`, whose own field is invalid, or whose field does not
/// equal the input field at its anchor divided by the stride.
pub fn rfap_per_layer_check(
    field_in: &AccumMv,
    field_out: &AccumMv,
    layer: &LayerSpec,
) -> Result<RecomputeMask> {
    if field_in.dims() != layer.in_dims || field_out.dims() != layer.out_dims {
        return Err(Error::invalid("field grids do not match layer geometry"));
    }
    let (ih, iw) = layer.in_dims;
    let (oh, ow) = layer.out_dims;
    let s = layer.stride as i32;
    let bits: Vec<bool> = (0..oh * ow)
        .into_par_iter()
        .map(|pos| {
            let (r, c) = (pos / ow, pos % ow);
            if !field_out.is_valid_at(pos) {
                return true;
            }
            let (ady, adx) = field_in.get(r * layer.stride, c * layer.stride);
            let (ody, odx) = field_out.get_at(pos);
            if (ody * s, odx * s) != (ady, adx) {
                return true;
            }
            let win = layer.window(r, c).clip(ih, iw);
            let mut taps = window_taps(win).map(|(y, x)| (y as usize, x as usize));
            let Some((y0, x0)) = taps.next() else {
                return false;
            };
            let first = (field_in.get(y0, x0), field_in.is_valid(y0, x0));
            taps.any(|(y, x)| (field_in.get(y, x), field_in.is_valid(y, x)) != first)
        })
        .collect();
    RecomputeMask::from_bits(oh, ow, bits)
}

/// Layer-level border rule: windows that reach into padding while the
/// output moves along that axis.
pub fn border_per_layer_check(field_out: &AccumMv, layer: &LayerSpec) -> RecomputeMask {
    let (ih, iw) = layer.in_dims;
    let (oh, ow) = layer.out_dims;
    RecomputeMask::from_fn(oh, ow, |r, c| {
        let win = layer.window(r, c);
        let (dy, dx) = field_out.get(r, c);
        let pad_rows = win.top < 0 || win.bottom > ih as isize;
        let pad_cols = win.left < 0 || win.right > iw as isize;
        (pad_rows && dy != 0) || (pad_cols && dx != 0)
    })
}

/// Where input-level flags enter the layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct RfapPlan {
    /// 0-based index of the first spatial layer.
    pub layer: usize,
    /// Flags on that layer's input grid.
    pub mask: RecomputeMask,
}

/// Maps pixel-level flags onto the input grid of the first spatial layer,
/// OR-reducing each stride cell. `None` if the network has no spatial layer.
pub fn merge_rfap(flags: &RecomputeMask, net: &NetworkSpec) -> Result<Option<RfapPlan>> {
    let (h, w, _) = net.input_dims();
    if flags.dims() != (h, w) {
        return Err(Error::invalid("rfap flags must be at input resolution"));
    }
    let Some(layer) = net.first_spatial_layer() else {
        return Ok(None);
    };
    let spec = net.layer(layer);
    let cell = spec.stride_in;
    let (gh, gw) = spec.in_dims;
    let mask = if cell == 1 {
        flags.clone()
    } else {
        let mut m = RecomputeMask::empty(gh, gw);
        for pos in flags.set_positions() {
            let (r, c) = (pos / w, pos % w);
            m.set(r / cell, c / cell, true);
        }
        m
    };
    Ok(Some(RfapPlan { layer, mask }))
}

/// Flags produced by a strategy for one frame.
pub trait RfapStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Pixel-level flags to be injected as candidates, if this strategy
    /// works at input resolution.
    fn input_flags(&self, field: &AccumMv, net: &NetworkSpec) -> Option<RecomputeMask>;

    /// Output positions of layer `idx` that must be recomputed.
    fn layer_flags(
        &self,
        idx: usize,
        field_in: &AccumMv,
        field_out: &AccumMv,
        net: &NetworkSpec,
    ) -> Result<Option<RecomputeMask>>;
}

pub struct Compacted;

impl RfapStrategy for Compacted {
    fn name(&self) -> &'static str {
        "compacted"
    }

    fn input_flags(&self, field: &AccumMv, net: &NetworkSpec) -> Option<RecomputeMask> {
        let (r_max, s_max) = net.effective_geometry();
        let mut flags = rfap_input_check(field, r_max, s_max);
        flags
            .union_in_place(&border_coherence_check(field, r_max))
            .expect("same grid");
        Some(flags)
    }

    fn layer_flags(&self, _: usize, _: &AccumMv, _: &AccumMv, _: &NetworkSpec) -> Result<Option<RecomputeMask>> {
        Ok(None)
    }
}

pub struct PerLayer;

impl RfapStrategy for PerLayer {
    fn name(&self) -> &'static str {
        "per-layer"
    }

    fn input_flags(&self, _: &AccumMv, _: &NetworkSpec) -> Option<RecomputeMask> {
        None
    }

    fn layer_flags(
        &self,
        idx: usize,
        field_in: &AccumMv,
        field_out: &AccumMv,
        net: &NetworkSpec,
    ) -> Result<Option<RecomputeMask>> {
        let layer = net.layer(idx);
        if !layer.is_spatial() {
            return Ok(None);
        }
        let mut flags = rfap_per_layer_check(field_in, field_out, layer)?;
        flags.union_in_place(&border_per_layer_check(field_out, layer))?;
        Ok(Some(flags))
    }
}

/// Disables alignment checks (ablation).
pub struct Off;

impl RfapStrategy for Off {
    fn name(&self) -> &'static str {
        "off"
    }

    fn input_flags(&self, _: &AccumMv, _: &NetworkSpec) -> Option<RecomputeMask> {
        None
    }

    fn layer_flags(&self, _: usize, _: &AccumMv, _: &AccumMv, _: &NetworkSpec) -> Result<Option<RecomputeMask>> {
        Ok(None)
    }
}

pub struct RfapRegistry {
    strategies: BTreeMap<&'static str, Box<dyn RfapStrategy>>,
}

impl Default for RfapRegistry {
    fn default() -> Self {
        let mut r = Self {
            strategies: BTreeMap::new(),
        };
        r.register(Box::new(Compacted));
        r.register(Box::new(PerLayer));
        r.register(Box::new(Off));
        r
    }
}

impl RfapRegistry {
    pub fn register(&mut self, strategy: Box<dyn RfapStrategy>) {
        self.strategies.insert(strategy.name(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<&dyn RfapStrategy> {
        self.strategies
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Usage(format!("unknown rfap strategy `{name}` (known: {})", self.names().join(", "))))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.keys().copied().collect()
    }
}

/// Per-layer flags of every spatial layer mapped to their anchor pixels
/// (`o * S_l`), including the border rule.
pub fn per_layer_flags_at_input(field: &AccumMv, net: &NetworkSpec) -> Result<RecomputeMask> {
    let (h, w) = field.dims();
    let mut out = RecomputeMask::empty(h, w);
    let mut prev = field.clone();
    for (idx, layer) in net.layers().iter().enumerate() {
        let next = downsample_field(field, layer.stride_out())?;
        if let Some(flags) = PerLayer.layer_flags(idx, &prev, &next, net)? {
            let s = layer.stride_out();
            for pos in flags.set_positions() {
                let (r, c) = (pos / layer.out_dims.1, pos % layer.out_dims.1);
                out.set(r * s, c * s, true);
            }
        }
        prev = next;
    }
    Ok(out)
}
