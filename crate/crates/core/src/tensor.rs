//! Dense feature maps and spatial recomputation masks.
//!
//! All tensors are stored position-major with channels innermost (HWC).
//! Masks are spatial only: one bit per `(row, col)` of a layer grid.

use crate::error::{Error, Result};

/// A dense `height x width x channels` tensor of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, fill: f32) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if !fill.is_finite() {
            return Err(Error::invalid("fill value must be finite"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data: vec![fill; height * width * channels],
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, 0.0)
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("feature map dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map values must be finite"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
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
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    /// All channels at one position.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Pixel lookup by flat position index (`row * width + col`).
    #[inline]
    pub fn pixel_at(&self, pos: usize) -> &[f32] {
        &self.data[pos * self.channels..(pos + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_at_mut(&mut self, pos: usize) -> &mut [f32] {
        &mut self.data[pos * self.channels..(pos + 1) * self.channels]
    }

    /// Channel values at a possibly out-of-bounds position; `None` outside the map
    /// (callers treat that as zero padding).
    #[inline]
    pub fn pixel_padded(&self, row: isize, col: isize) -> Option<&[f32]> {
        if row < 0 || col < 0 || row as usize >= self.height || col as usize >= self.width {
            None
        } else {
            Some(self.pixel(row as usize, col as usize))
        }
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.dims() == other.dims()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest element-wise absolute difference over the whole map.
    pub fn max_abs_diff_all(&self, other: &FeatureMap) -> Result<f32> {
        if !self.same_shape(other) {
            return Err(Error::invalid("feature map shape mismatch"));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max))
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs() as f64).sum()
    }
}

/// Maximum over the listed position pairs and all channels of
/// `|a(p) - b(p_hat)|`. An empty list yields 0.
pub fn max_abs_diff(
    a: &FeatureMap,
    b: &FeatureMap,
    at: &[((usize, usize), (usize, usize))],
) -> Result<f32> {
    if a.channels() != b.channels() {
        return Err(Error::invalid("channel count mismatch"));
    }
    let mut best = 0.0f32;
    for &((p, q), (ph, qh)) in at {
        if p >= a.height() || q >= a.width() || ph >= b.height() || qh >= b.width() {
            return Err(Error::invalid(format!(
                "position pair ({p},{q})/({ph},{qh}) out of bounds"
            )));
        }
        for (x, y) in a.pixel(p, q).iter().zip(b.pixel(ph, qh)) {
            best = best.max((x - y).abs());
        }
    }
    Ok(best)
}

/// Half-open integer rectangle, used for receptive-field windows. Bounds may
/// extend past a grid (padding region).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: isize,
    pub left: isize,
    pub bottom: isize,
    pub right: isize,
}

impl Rect {
    pub fn new(top: isize, left: isize, bottom: isize, right: isize) -> Result<Self> {
        if top > bottom || left > right {
            return Err(Error::invalid("rect bounds inverted"));
        }
        Ok(Self {
            top,
            left,
            bottom,
            right,
        })
    }

    pub fn height(&self) -> usize {
        (self.bottom - self.top) as usize
    }

    pub fn width(&self) -> usize {
        (self.right - self.left) as usize
    }

    pub fn contains(&self, row: isize, col: isize) -> bool {
        row >= self.top && row < self.bottom && col >= self.left && col < self.right
    }

    /// Intersection with a `height x width` grid.
    pub fn clip(&self, height: usize, width: usize) -> Rect {
        let top = self.top.clamp(0, height as isize);
        let bottom = self.bottom.clamp(top, height as isize);
        let left = self.left.clamp(0, width as isize);
        let right = self.right.clamp(left, width as isize);
        Rect {
            top,
            left,
            bottom,
            right,
        }
    }

    pub fn is_inside(&self, height: usize, width: usize) -> bool {
        self.top >= 0
            && self.left >= 0
            && self.bottom <= height as isize
            && self.right <= width as isize
    }
}

/// Per-position recomputation set on one layer grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecomputeMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl RecomputeMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid("mask bit count does not match dimensions"));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            bits,
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
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn get_at(&self, pos: usize) -> bool {
        self.bits[pos]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    #[inline]
    pub fn set_at(&mut self, pos: usize, value: bool) {
        self.bits[pos] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Flat indices of set positions in raster order.
    pub fn set_positions(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    fn check_same_grid(&self, other: &RecomputeMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::invalid(format!(
                "mask grid mismatch: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn union(&self, other: &RecomputeMask) -> Result<RecomputeMask> {
        let mut out = self.clone();
        out.union_in_place(other)?;
        Ok(out)
    }

    pub fn union_in_place(&mut self, other: &RecomputeMask) -> Result<()> {
        self.check_same_grid(other)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    /// Positions set here but not in `other`.
    pub fn difference(&self, other: &RecomputeMask) -> Result<RecomputeMask> {
        self.check_same_grid(other)?;
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a && !b)
            .collect();
        Ok(RecomputeMask {
            height: self.height,
            width: self.width,
            bits,
        })
    }

    pub fn is_subset_of(&self, other: &RecomputeMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Chebyshev dilation by `radius`, clipped at the borders. Separable: a
    /// row pass followed by a column pass.
    pub fn dilate(&self, radius: usize) -> RecomputeMask {
        if radius == 0 || self.bits.is_empty() {
            return self.clone();
        }
        let (h, w) = self.dims();
        let mut rows = vec![false; h * w];
        for r in 0..h {
            let line = &self.bits[r * w..(r + 1) * w];
            let prefix = prefix_counts(line);
            for c in 0..w {
                let lo = c.saturating_sub(radius);
                let hi = (c + radius + 1).min(w);
                rows[r * w + c] = prefix[hi] > prefix[lo];
            }
        }
        let mut out = vec![false; h * w];
        for c in 0..w {
            let column: Vec<bool> = (0..h).map(|r| rows[r * w + c]).collect();
            let prefix = prefix_counts(&column);
            for r in 0..h {
                let lo = r.saturating_sub(radius);
                let hi = (r + radius + 1).min(h);
                out[r * w + c] = prefix[hi] > prefix[lo];
            }
        }
        RecomputeMask {
            height: h,
            width: w,
            bits: out,
        }
    }

    /// Summed-area table of set bits, `(h+1) x (w+1)`, for O(1) window queries.
    pub fn integral(&self) -> MaskIntegral {
        let (h, w) = self.dims();
        let stride = w + 1;
        let mut table = vec![0u32; (h + 1) * stride];
        for r in 0..h {
            let mut row_sum = 0u32;
            for c in 0..w {
                row_sum += self.bits[r * w + c] as u32;
                table[(r + 1) * stride + c + 1] = table[r * stride + c + 1] + row_sum;
            }
        }
        MaskIntegral {
            height: h,
            width: w,
            table,
        }
    }
}

fn prefix_counts(line: &[bool]) -> Vec<u32> {
    let mut prefix = Vec::with_capacity(line.len() + 1);
    prefix.push(0u32);
    let mut acc = 0u32;
    for &b in line {
        acc += b as u32;
        prefix.push(acc);
    }
    prefix
}

/// Summed-area table over a mask.
#[derive(Debug, Clone)]
pub struct MaskIntegral {
    height: usize,
    width: usize,
    table: Vec<u32>,
}

impl MaskIntegral {
    /// Number of set positions inside `rect` (clipped to the grid).
    pub fn count_in(&self, rect: Rect) -> u32 {
        let r = rect.clip(self.height, self.width);
        let stride = self.width + 1;
        let (t, l, b, rt) = (r.top as usize, r.left as usize, r.bottom as usize, r.right as usize);
        self.table[b * stride + rt] + self.table[t * stride + l]
            - self.table[t * stride + rt]
            - self.table[b * stride + l]
    }

    pub fn any_in(&self, rect: Rect) -> bool {
        self.count_in(rect) > 0
    }
}
