//! Per-endpoint cached features, the accumulated motion field, and the
//! remap-then-merge cache update.

use crate::error::{Error, Result};
use crate::motion::{reset, warp_backward, AccumMv, MvField};
use crate::pipeline::PipelineOptions;
use crate::refnet::NetworkSpec;
use crate::tensor::{FeatureMap, RecomputeMask};

/// Freshly computed values at a set of positions (raster order).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseValues {
    pub positions: Vec<usize>,
    /// `positions.len() * channels` values.
    pub data: Vec<f32>,
}

impl SparseValues {
    pub fn gather(map: &FeatureMap, mask: &RecomputeMask) -> Self {
        let positions = mask.set_positions();
        let mut data = Vec::with_capacity(positions.len() * map.channels());
        for &p in &positions {
            data.extend_from_slice(map.pixel_at(p));
        }
        Self { positions, data }
    }
}

pub fn remap_cache(cache: &FeatureMap, field: &AccumMv) -> Result<(FeatureMap, RecomputeMask)> {
    warp_backward(cache, field)
}

/// `out(p) = fresh(p)` for `p` in `mask`, else `remapped(p)`.
pub fn merge_cache(remapped: &FeatureMap, fresh: &SparseValues, mask: &RecomputeMask) -> Result<FeatureMap> {
    let mut out = remapped.clone();
    merge_into(&mut out, fresh, mask)?;
    Ok(out)
}

pub(crate) fn merge_into(out: &mut FeatureMap, fresh: &SparseValues, mask: &RecomputeMask) -> Result<()> {
    let ch = out.channels();
    if mask.dims() != (out.height(), out.width()) {
        return Err(Error::invalid("mask grid does not match cache"));
    }
    if fresh.data.len() != fresh.positions.len() * ch {
        return Err(Error::internal("fresh value block has wrong length"));
    }
    let mut covered = 0usize;
    for (i, &p) in fresh.positions.iter().enumerate() {
        if p >= mask.len() {
            return Err(Error::internal(format!("fresh position {p} out of range")));
        }
        if mask.get_at(p) {
            covered += 1;
        }
        out.pixel_at_mut(p).copy_from_slice(&fresh.data[i * ch..(i + 1) * ch]);
    }
    if covered != mask.count() {
        return Err(Error::internal(format!(
            "fresh values cover {covered} of {} recompute positions",
            mask.count()
        )));
    }
    Ok(())
}

/// Dispatch-layer state: the input cache and the field accumulated since
/// it was last refreshed.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchState {
    pub input: FeatureMap,
    pub accum: AccumMv,
    /// No usable cache; the next frame on this endpoint must be dense.
    pub cold: bool,
}

impl DispatchState {
    pub fn cold(height: usize, width: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            input: FeatureMap::zeros(height, width, channels)?,
            accum: AccumMv::zero(height, width),
            cold: true,
        })
    }

    pub fn accumulate(&mut self, field: &MvField) -> Result<()> {
        self.accum = crate::motion::accumulate(&self.accum, field)?;
        Ok(())
    }

    /// Applies the same input-cache update the executing endpoint performs
    /// for an offloaded frame.
    pub fn mirror_update(&mut self, frame: &FeatureMap, mask: &RecomputeMask, opts: PipelineOptions) -> Result<()> {
        if self.cold || mask.is_full() {
            self.input = frame.clone();
        } else {
            if opts.remap {
                self.input = warp_backward(&self.input, &self.accum)?.0;
            }
            merge_into(&mut self.input, &SparseValues::gather(frame, mask), mask)?;
        }
        if opts.remap || self.cold {
            self.accum = reset(&self.accum);
        }
        self.cold = false;
        Ok(())
    }

    pub fn mark_cold(&mut self) {
        self.cold = true;
        self.accum = reset(&self.accum);
    }
}

/// Full endpoint cache: dispatch-layer state plus every layer's output.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointCache {
    pub dispatch: DispatchState,
    pub layers: Vec<FeatureMap>,
    pub last_update_frame: Option<u64>,
}

impl EndpointCache {
    pub fn new(net: &NetworkSpec) -> Result<Self> {
        let (h, w, c) = net.input_dims();
        let layers = (0..net.num_layers())
            .map(|i| {
                let (oh, ow, oc) = net.output_dims(i);
                FeatureMap::zeros(oh, ow, oc)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dispatch: DispatchState::cold(h, w, c)?,
            layers,
            last_update_frame: None,
        })
    }

    pub fn is_cold(&self) -> bool {
        self.dispatch.cold
    }

    pub fn mark_cold(&mut self) {
        self.dispatch.mark_cold();
    }

    pub fn snapshot(&self) -> Vec<u8> {
        let mut maps = vec![&self.dispatch.input];
        maps.extend(self.layers.iter());
        encode_snapshot(&maps, &self.dispatch.accum)
    }
}

/// `FSCS` debug dump: `u16` version, `u32` map count, per map `h, w, c` as
/// `u32` plus `f32` data, then the accumulator (`h, w` + `i32` pairs +
/// validity bytes). Little-endian.
pub fn encode_snapshot(maps: &[&FeatureMap], accum: &AccumMv) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"FSCS");
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&(maps.len() as u32).to_le_bytes());
    for m in maps {
        let (h, w, c) = m.dims();
        for d in [h, w, c] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let (h, w) = accum.dims();
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    let (dy, dx, valid) = accum.components();
    for i in 0..h * w {
        out.extend_from_slice(&dy[i].to_le_bytes());
        out.extend_from_slice(&dx[i].to_le_bytes());
    }
    out.extend(valid.iter().map(|&v| v as u8));
    out
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<(Vec<FeatureMap>, AccumMv)> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    if rd.take(4)? != b"FSCS" {
        return Err(Error::protocol("not a cache snapshot"));
    }
    let version = rd.u16()?;
    if version != 1 {
        return Err(Error::UnsupportedVersion { found: version, expected: 1 });
    }
    let n = rd.u32()? as usize;
    let mut maps = Vec::with_capacity(n);
    for _ in 0..n {
        let (h, w, c) = (rd.u32()? as usize, rd.u32()? as usize, rd.u32()? as usize);
        let raw = rd.take(h * w * c * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        maps.push(FeatureMap::from_vec(h, w, c, data)?);
    }
    let (h, w) = (rd.u32()? as usize, rd.u32()? as usize);
    let mut dy = Vec::with_capacity(h * w);
    let mut dx = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        dy.push(rd.i32()?);
        dx.push(rd.i32()?);
    }
    let valid = rd.take(h * w)?.iter().map(|&b| b != 0).collect();
    if rd.pos != bytes.len() {
        return Err(Error::protocol("trailing bytes in snapshot"));
    }
    Ok((maps, AccumMv::from_parts(h, w, dy, dx, valid)?))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::protocol("truncated snapshot"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Largest value divergence between two dispatch states; accumulator or
/// shape mismatches count as infinite.
pub fn divergence(a: &DispatchState, b: &DispatchState) -> f32 {
    if a.accum != b.accum || a.cold != b.cold || !a.input.same_shape(&b.input) {
        return f32::INFINITY;
    }
    a.input.max_abs_diff_all(&b.input).unwrap_or(f32::INFINITY)
}

pub fn audit(replica: &DispatchState, server: &DispatchState, tol: f32) -> Result<()> {
    let d = divergence(replica, server);
    if d > tol {
        return Err(Error::ProtocolDesync(format!(
            "cloud replica diverged from server state by {d}"
        )));
    }
    Ok(())
}
