//! Block motion fields: estimation, accumulation, per-layer downsampling and
//! backward warping.
//!
//! Displacements follow the backward convention: a displacement `m` at a
//! current-frame position `p` points at the reference position `p - m`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, RecomputeMask};

pub const DEFAULT_BLOCK_SIZE: usize = 16;

/// Block-granular motion field as produced by a codec (one `(dy, dx)` per block).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MvField {
    block_size: usize,
    grid_h: usize,
    grid_w: usize,
    dy: Vec<i16>,
    dx: Vec<i16>,
}

impl MvField {
    pub fn zero(block_size: usize, grid_h: usize, grid_w: usize) -> Result<Self> {
        Self::uniform(block_size, grid_h, grid_w, 0, 0)
    }

    pub fn uniform(block_size: usize, grid_h: usize, grid_w: usize, dy: i16, dx: i16) -> Result<Self> {
        if block_size == 0 || grid_h == 0 || grid_w == 0 {
            return Err(Error::invalid("motion field dimensions must be positive"));
        }
        let n = grid_h * grid_w;
        Ok(Self {
            block_size,
            grid_h,
            grid_w,
            dy: vec![dy; n],
            dx: vec![dx; n],
        })
    }

    pub fn from_vectors(
        block_size: usize,
        grid_h: usize,
        grid_w: usize,
        vectors: Vec<(i16, i16)>,
    ) -> Result<Self> {
        if block_size == 0 || grid_h == 0 || grid_w == 0 {
            return Err(Error::invalid("motion field dimensions must be positive"));
        }
        if vectors.len() != grid_h * grid_w {
            return Err(Error::invalid("motion vector count does not match grid"));
        }
        let (dy, dx) = vectors.into_iter().unzip();
        Ok(Self {
            block_size,
            grid_h,
            grid_w,
            dy,
            dx,
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn frame_dims(&self) -> (usize, usize) {
        (self.grid_h * self.block_size, self.grid_w * self.block_size)
    }

    #[inline]
    pub fn block(&self, by: usize, bx: usize) -> (i16, i16) {
        let i = by * self.grid_w + bx;
        (self.dy[i], self.dx[i])
    }

    pub fn set_block(&mut self, by: usize, bx: usize, mv: (i16, i16)) {
        let i = by * self.grid_w + bx;
        self.dy[i] = mv.0;
        self.dx[i] = mv.1;
    }

    /// Displacement of the block containing pixel `(row, col)`.
    #[inline]
    pub fn at_pixel(&self, row: usize, col: usize) -> (i16, i16) {
        self.block(row / self.block_size, col / self.block_size)
    }

    pub fn vectors(&self) -> impl Iterator<Item = (i16, i16)> + '_ {
        self.dy.iter().copied().zip(self.dx.iter().copied())
    }

    pub fn is_zero(&self) -> bool {
        self.dy.iter().all(|&v| v == 0) && self.dx.iter().all(|&v| v == 0)
    }

    /// Most frequent block vector; ties go to the smallest `|dy|+|dx|`, then
    /// smallest `dy`, then smallest `dx`.
    pub fn modal_vector(&self) -> (i16, i16) {
        let mut counts = std::collections::BTreeMap::<(i16, i16), usize>::new();
        for v in self.vectors() {
            *counts.entry(v).or_default() += 1;
        }
        counts
            .into_iter()
            .min_by_key(|&((dy, dx), n)| {
                (std::cmp::Reverse(n), (dy as i32).abs() + (dx as i32).abs(), dy, dx)
            })
            .map(|(v, _)| v)
            .unwrap_or((0, 0))
    }

    /// Little-endian `FSMV` fixture encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.dy.len() * 4);
        out.extend_from_slice(b"FSMV");
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&(self.block_size as u16).to_le_bytes());
        out.extend_from_slice(&(self.grid_h as u32).to_le_bytes());
        out.extend_from_slice(&(self.grid_w as u32).to_le_bytes());
        for (dy, dx) in self.vectors() {
            out.extend_from_slice(&dy.to_le_bytes());
            out.extend_from_slice(&dx.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[0..4] != b"FSMV" {
            return Err(Error::protocol("not an FSMV motion field"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != 1 {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: 1,
            });
        }
        let block_size = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let grid_h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let grid_w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != grid_h * grid_w * 4 {
            return Err(Error::protocol("FSMV body length mismatch"));
        }
        let vectors = body
            .chunks_exact(4)
            .map(|c| {
                (
                    i16::from_le_bytes([c[0], c[1]]),
                    i16::from_le_bytes([c[2], c[3]]),
                )
            })
            .collect();
        Self::from_vectors(block_size, grid_h, grid_w, vectors)
    }
}

/// Pixel-granular displacement field with a per-pixel validity flag.
///
/// At input resolution a pixel is valid iff its backward target lies inside
/// the frame. Downsampled fields additionally require the displacement to be
/// divisible by the cumulative stride.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccumMv {
    height: usize,
    width: usize,
    dy: Vec<i32>,
    dx: Vec<i32>,
    valid: Vec<bool>,
}

impl AccumMv {
    pub fn zero(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            dy: vec![0; n],
            dx: vec![0; n],
            valid: vec![true; n],
        }
    }

    /// Builds a field from raw per-pixel displacements; validity is derived
    /// from target bounds.
    pub fn from_displacements(height: usize, width: usize, dy: Vec<i32>, dx: Vec<i32>) -> Result<Self> {
        if dy.len() != height * width || dx.len() != height * width {
            return Err(Error::invalid("displacement count does not match dimensions"));
        }
        let mut field = Self {
            height,
            width,
            dy,
            dx,
            valid: vec![true; height * width],
        };
        field.revalidate_bounds();
        Ok(field)
    }

    pub fn from_parts(
        height: usize,
        width: usize,
        dy: Vec<i32>,
        dx: Vec<i32>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let n = height * width;
        if dy.len() != n || dx.len() != n || valid.len() != n {
            return Err(Error::invalid("field component length mismatch"));
        }
        Ok(Self {
            height,
            width,
            dy,
            dx,
            valid,
        })
    }

    /// Expands a block field to pixels.
    pub fn from_block_field(field: &MvField) -> Self {
        let (h, w) = field.frame_dims();
        let mut dy = Vec::with_capacity(h * w);
        let mut dx = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let (a, b) = field.at_pixel(r, c);
                dy.push(a as i32);
                dx.push(b as i32);
            }
        }
        Self::from_displacements(h, w, dy, dx).expect("dims consistent by construction")
    }

    fn revalidate_bounds(&mut self) {
        for r in 0..self.height {
            for c in 0..self.width {
                let i = r * self.width + c;
                let tr = r as i64 - self.dy[i] as i64;
                let tc = c as i64 - self.dx[i] as i64;
                self.valid[i] =
                    tr >= 0 && tc >= 0 && (tr as usize) < self.height && (tc as usize) < self.width;
            }
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> (i32, i32) {
        let i = row * self.width + col;
        (self.dy[i], self.dx[i])
    }

    #[inline]
    pub fn get_at(&self, pos: usize) -> (i32, i32) {
        (self.dy[pos], self.dx[pos])
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    #[inline]
    pub fn is_valid_at(&self, pos: usize) -> bool {
        self.valid[pos]
    }

    pub fn components(&self) -> (&[i32], &[i32], &[bool]) {
        (&self.dy, &self.dx, &self.valid)
    }

    /// Backward source of a valid pixel.
    #[inline]
    pub fn target(&self, row: usize, col: usize) -> Option<(usize, usize)> {
        let i = row * self.width + col;
        if !self.valid[i] {
            return None;
        }
        let tr = row as i64 - self.dy[i] as i64;
        let tc = col as i64 - self.dx[i] as i64;
        if tr < 0 || tc < 0 || tr as usize >= self.height || tc as usize >= self.width {
            return None;
        }
        Some((tr as usize, tc as usize))
    }

    pub fn is_zero(&self) -> bool {
        self.dy.iter().all(|&v| v == 0) && self.dx.iter().all(|&v| v == 0)
    }

    pub fn invalid_mask(&self) -> RecomputeMask {
        RecomputeMask::from_bits(self.height, self.width, self.valid.iter().map(|v| !v).collect())
            .expect("dims consistent")
    }

    /// Largest block size (from `candidates`, descending) on whose blocks the
    /// displacement is constant, together with the block field.
    pub fn to_block_field(&self, candidates: &[usize]) -> Option<MvField> {
        'outer: for &b in candidates {
            if b == 0 || !self.height.is_multiple_of(b) || !self.width.is_multiple_of(b) {
                continue;
            }
            let (gh, gw) = (self.height / b, self.width / b);
            let mut vectors = Vec::with_capacity(gh * gw);
            for by in 0..gh {
                for bx in 0..gw {
                    let (dy, dx) = self.get(by * b, bx * b);
                    for r in by * b..(by + 1) * b {
                        for c in bx * b..(bx + 1) * b {
                            if self.get(r, c) != (dy, dx) {
                                continue 'outer;
                            }
                        }
                    }
                    let (Ok(dy), Ok(dx)) = (i16::try_from(dy), i16::try_from(dx)) else {
                        return None;
                    };
                    vectors.push((dy, dx));
                }
            }
            return MvField::from_vectors(b, gh, gw, vectors).ok();
        }
        None
    }

    /// Per-block modal displacement (same tie-break as
    /// [`MvField::modal_vector`]), saturated to `i16`.
    pub fn quantize_blocks(&self, block_size: usize) -> Result<MvField> {
        if block_size == 0 || !self.height.is_multiple_of(block_size) || !self.width.is_multiple_of(block_size) {
            return Err(Error::invalid(format!(
                "field {}x{} does not tile into {block_size} blocks",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / block_size, self.width / block_size);
        let sat = |v: i32| v.clamp(i16::MIN as i32, i16::MAX as i32) as i16;
        let vectors = (0..gh * gw)
            .map(|b| {
                let (by, bx) = (b / gw, b % gw);
                let mut counts = std::collections::BTreeMap::<(i32, i32), usize>::new();
                for r in by * block_size..(by + 1) * block_size {
                    for c in bx * block_size..(bx + 1) * block_size {
                        *counts.entry(self.get(r, c)).or_default() += 1;
                    }
                }
                let (dy, dx) = counts
                    .into_iter()
                    .min_by_key(|&((dy, dx), n)| (std::cmp::Reverse(n), dy.abs() + dx.abs(), dy, dx))
                    .map(|(v, _)| v)
                    .unwrap_or((0, 0));
                (sat(dy), sat(dx))
            })
            .collect();
        MvField::from_vectors(block_size, gh, gw, vectors)
    }
}

/// Exhaustive SAD block matching of `cur` against `reference`.
///
/// For every `block_size` block, searches displacements in
/// `[-search_radius, search_radius]^2` and picks the lowest sum of absolute
/// differences. Reference pixels outside the frame repeat the nearest edge
/// pixel. Ties break toward the smallest `|dy|+|dx|`, then smallest `dy`,
/// then `dx`.
pub fn estimate_mv(
    cur: &FeatureMap,
    reference: &FeatureMap,
    block_size: usize,
    search_radius: usize,
) -> Result<MvField> {
    if !cur.same_shape(reference) {
        return Err(Error::invalid("current and reference frames differ in shape"));
    }
    if block_size == 0 {
        return Err(Error::invalid("block size must be positive"));
    }
    let (h, w, ch) = cur.dims();
    if h % block_size != 0 || w % block_size != 0 {
        return Err(Error::invalid(format!(
            "frame {h}x{w} is not a multiple of block size {block_size}"
        )));
    }
    let (gh, gw) = (h / block_size, w / block_size);
    let radius = search_radius as i32;

    let mut order: Vec<(i32, i32)> = Vec::with_capacity(((2 * radius + 1) * (2 * radius + 1)) as usize);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            order.push((dy, dx));
        }
    }
    order.sort_by_key(|&(dy, dx)| (dy.abs() + dx.abs(), dy, dx));

    let row_len = block_size * ch;
    let vectors: Vec<(i16, i16)> = (0..gh * gw)
        .into_par_iter()
        .map(|b| {
            let (by, bx) = (b / gw, b % gw);
            let top = (by * block_size) as i32;
            let left = (bx * block_size) as i32;
            let mut best_cost = f32::INFINITY;
            let mut best = (0i32, 0i32);
            for &(dy, dx) in &order {
                let rt = top - dy;
                let rl = left - dx;
                let interior = rt >= 0 && rl >= 0 && rt as usize + block_size <= h && rl as usize + block_size <= w;
                let mut cost = 0.0f32;
                for r in 0..block_size {
                    let cs = ((top as usize + r) * w + left as usize) * ch;
                    let a = &cur.data()[cs..cs + row_len];
                    if interior {
                        let rs = ((rt as usize + r) * w + rl as usize) * ch;
                        let bref = &reference.data()[rs..rs + row_len];
                        cost += a.iter().zip(bref).map(|(x, y)| (x - y).abs()).sum::<f32>();
                    } else {
                        let rr = (rt + r as i32).clamp(0, h as i32 - 1) as usize;
                        for c in 0..block_size {
                            let rc = (rl + c as i32).clamp(0, w as i32 - 1) as usize;
                            let q = reference.pixel(rr, rc);
                            cost += a[c * ch..(c + 1) * ch].iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f32>();
                        }
                    }
                    if cost >= best_cost {
                        break;
                    }
                }
                if cost < best_cost {
                    best_cost = cost;
                    best = (dy, dx);
                }
            }
            (best.0 as i16, best.1 as i16)
        })
        .collect();
    MvField::from_vectors(block_size, gh, gw, vectors)
}

/// Composes the accumulated field with a new per-frame field:
/// `out(p) = acc(p - new(p)) + new(p)`.
///
/// When `p - new(p)` falls outside the frame the old accumulator is read at
/// the nearest in-frame position; validity of the result is re-derived from
/// the bounds of its composed target.
pub fn accumulate(acc: &AccumMv, new: &MvField) -> Result<AccumMv> {
    let (h, w) = acc.dims();
    if new.frame_dims() != (h, w) {
        return Err(Error::invalid(format!(
            "accumulator {h}x{w} does not match motion field {:?}",
            new.frame_dims()
        )));
    }
    let mut dy = Vec::with_capacity(h * w);
    let mut dx = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (ny, nx) = new.at_pixel(r, c);
            let sr = (r as i64 - ny as i64).clamp(0, h as i64 - 1) as usize;
            let sc = (c as i64 - nx as i64).clamp(0, w as i64 - 1) as usize;
            let (ay, ax) = acc.get(sr, sc);
            dy.push(ay + ny as i32);
            dx.push(ax + nx as i32);
        }
    }
    AccumMv::from_displacements(h, w, dy, dx)
}

/// Samples the field at every `stride`-th pixel and divides by `stride`
/// (rounding toward zero). Displacements not divisible by `stride` are
/// marked invalid.
pub fn downsample_field(acc: &AccumMv, stride: usize) -> Result<AccumMv> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    if stride == 1 {
        return Ok(acc.clone());
    }
    let (h, w) = acc.dims();
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::invalid(format!(
            "field {h}x{w} not divisible by stride {stride}"
        )));
    }
    let (oh, ow) = (h / stride, w / stride);
    let s = stride as i32;
    let n = oh * ow;
    let mut dy = Vec::with_capacity(n);
    let mut dx = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for r in 0..oh {
        for c in 0..ow {
            let (y, x) = acc.get(r * stride, c * stride);
            dy.push(y / s);
            dx.push(x / s);
            valid.push(acc.is_valid(r * stride, c * stride) && y % s == 0 && x % s == 0);
        }
    }
    AccumMv::from_parts(oh, ow, dy, dx, valid)
}

/// Backward warp: `out(p) = src(p - field(p))`. Positions without a valid
/// in-bounds source keep `src(p)` and are reported in the returned mask.
pub fn warp_backward(src: &FeatureMap, field: &AccumMv) -> Result<(FeatureMap, RecomputeMask)> {
    let (h, w, _) = src.dims();
    if field.dims() != (h, w) {
        return Err(Error::invalid(format!(
            "warp field {:?} does not match map {h}x{w}",
            field.dims()
        )));
    }
    let mut out = src.clone();
    let mut oob = RecomputeMask::empty(h, w);
    for r in 0..h {
        for c in 0..w {
            match field.target(r, c) {
                Some((tr, tc)) => out.pixel_mut(r, c).copy_from_slice(src.pixel(tr, tc)),
                None => oob.set(r, c, true),
            }
        }
    }
    Ok((out, oob))
}

/// Zero displacement, all valid.
pub fn reset(acc: &AccumMv) -> AccumMv {
    AccumMv::zero(acc.height(), acc.width())
}
