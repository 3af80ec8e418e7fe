//! The reference convolutional network: text config, deterministic weights,
//! per-position layer evaluation and the dense forward pass.
//!
//! Every spatial layer uses a `k x k` window anchored so that output `o`
//! reads input rows `o*s + lo .. o*s + lo + k` with `lo = -((k-1)/2)`, and
//! out-of-grid positions read as zero.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    0.1 * x
                }
            }
            Activation::Identity => x,
        }
    }

    fn keyword(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Pointwise,
    Activation(Activation),
    Pool,
    BatchNorm,
}

/// One parsed config line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDef {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: Option<usize>,
    pub profiled: bool,
}

impl LayerDef {
    pub fn conv(kernel: usize, stride: usize, out: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            kernel,
            stride,
            out_channels: Some(out),
            profiled: false,
        }
    }

    pub fn pointwise(out: usize) -> Self {
        Self {
            kind: LayerKind::Pointwise,
            kernel: 1,
            stride: 1,
            out_channels: Some(out),
            profiled: false,
        }
    }

    pub fn activation(act: Activation) -> Self {
        Self {
            kind: LayerKind::Activation(act),
            kernel: 1,
            stride: 1,
            out_channels: None,
            profiled: false,
        }
    }

    pub fn pool(kernel: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::Pool,
            kernel,
            stride,
            out_channels: None,
            profiled: false,
        }
    }

    pub fn batch_norm() -> Self {
        Self {
            kind: LayerKind::BatchNorm,
            kernel: 1,
            stride: 1,
            out_channels: None,
            profiled: false,
        }
    }

    pub fn profiled(mut self) -> Self {
        self.profiled = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub seed: u64,
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerDef>,
}

impl NetworkConfig {
    /// Conv3x3 s1 -> ReLU -> Conv3x3 s2 -> ReLU -> Pointwise -> ReLU -> Conv3x3 s2 -> ReLU
    /// on 128x128x3.
    pub fn default_config() -> Self {
        Self {
            seed: 7,
            input: (128, 128, 3),
            layers: vec![
                LayerDef::conv(3, 1, 8),
                LayerDef::activation(Activation::Relu).profiled(),
                LayerDef::conv(3, 2, 16),
                LayerDef::activation(Activation::Relu).profiled(),
                LayerDef::pointwise(16),
                LayerDef::activation(Activation::Relu),
                LayerDef::conv(3, 2, 32),
                LayerDef::activation(Activation::Relu),
            ],
        }
    }

    pub fn with_input(mut self, height: usize, width: usize, channels: usize) -> Self {
        self.input = (height, width, channels);
        self
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut input = None;
        let mut layers = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: line_no, msg };
            if let Some(v) = line.strip_prefix("seed=") {
                seed = Some(v.trim().parse::<u64>().map_err(|e| perr(format!("bad seed: {e}")))?);
                continue;
            }
            if let Some(v) = line.strip_prefix("input=") {
                let dims: Vec<usize> = v
                    .trim()
                    .split('x')
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| perr(format!("bad input dims: {e}")))?;
                if dims.len() != 3 || dims.contains(&0) {
                    return Err(perr("input must be HxWxC with positive dims".into()));
                }
                input = Some((dims[0], dims[1], dims[2]));
                continue;
            }
            let mut parts = line.split_whitespace();
            let keyword = parts.next().unwrap_or_default();
            let mut kernel = None;
            let mut stride = None;
            let mut out = None;
            let mut profiled = false;
            for kv in parts {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| perr(format!("expected key=value, got `{kv}`")))?;
                let num = || v.parse::<usize>().map_err(|e| perr(format!("bad value for {k}: {e}")));
                match k {
                    "k" => kernel = Some(num()?),
                    "s" => stride = Some(num()?),
                    "out" => out = Some(num()?),
                    "profiled" => {
                        profiled = v
                            .parse::<bool>()
                            .map_err(|e| perr(format!("bad value for profiled: {e}")))?
                    }
                    _ => return Err(perr(format!("unknown key `{k}`"))),
                }
            }
            let need = |o: Option<usize>, what: &str| {
                o.filter(|&v| v > 0)
                    .ok_or_else(|| perr(format!("`{keyword}` requires positive {what}")))
            };
            let reject = |o: Option<usize>, what: &str| {
                if o.is_some() {
                    Err(perr(format!("`{keyword}` does not take {what}")))
                } else {
                    Ok(())
                }
            };
            let mut def = match keyword {
                "conv" => LayerDef::conv(need(kernel, "k")?, stride.unwrap_or(1), need(out, "out")?),
                "pointwise" => {
                    reject(kernel, "k")?;
                    reject(stride, "s")?;
                    LayerDef::pointwise(need(out, "out")?)
                }
                "pool" => {
                    reject(out, "out")?;
                    let k = need(kernel, "k")?;
                    LayerDef::pool(k, stride.unwrap_or(k))
                }
                "relu" | "leaky_relu" | "identity" | "bn" => {
                    reject(kernel, "k")?;
                    reject(stride, "s")?;
                    reject(out, "out")?;
                    match keyword {
                        "relu" => LayerDef::activation(Activation::Relu),
                        "leaky_relu" => LayerDef::activation(Activation::LeakyRelu),
                        "identity" => LayerDef::activation(Activation::Identity),
                        _ => LayerDef::batch_norm(),
                    }
                }
                other => return Err(perr(format!("unknown layer kind `{other}`"))),
            };
            if def.stride == 0 {
                return Err(perr("stride must be positive".into()));
            }
            def.profiled = profiled;
            layers.push(def);
        }
        let seed = seed.ok_or(Error::Parse {
            line: 0,
            msg: "missing seed=".into(),
        })?;
        let input = input.ok_or(Error::Parse {
            line: 0,
            msg: "missing input=".into(),
        })?;
        Ok(Self { seed, input, layers })
    }

    /// Canonical text form; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "input={}x{}x{}", self.input.0, self.input.1, self.input.2);
        for l in &self.layers {
            match l.kind {
                LayerKind::Conv => {
                    let _ = write!(s, "conv k={} s={} out={}", l.kernel, l.stride, l.out_channels.unwrap_or(0));
                }
                LayerKind::Pointwise => {
                    let _ = write!(s, "pointwise out={}", l.out_channels.unwrap_or(0));
                }
                LayerKind::Pool => {
                    let _ = write!(s, "pool k={} s={}", l.kernel, l.stride);
                }
                LayerKind::BatchNorm => s.push_str("bn"),
                LayerKind::Activation(a) => s.push_str(a.keyword()),
            }
            if l.profiled {
                s.push_str(" profiled=true");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub profiled: bool,
    /// Conv/Pointwise: `[out][tap][in]`; BatchNorm: per-channel scale.
    pub weights: Vec<f32>,
    /// BatchNorm shift; empty otherwise.
    pub shift: Vec<f32>,
    pub l1: f32,
    pub in_dims: (usize, usize),
    pub out_dims: (usize, usize),
    /// Cumulative stride of this layer's input grid.
    pub stride_in: usize,
}

impl LayerSpec {
    #[inline]
    pub fn window_offset(&self) -> isize {
        -(((self.kernel - 1) / 2) as isize)
    }

    /// Receptive-field window of output `(row, col)` on the input grid
    /// (may extend past the grid).
    #[inline]
    pub fn window(&self, row: usize, col: usize) -> Rect {
        let lo = self.window_offset();
        let top = (row * self.stride) as isize + lo;
        let left = (col * self.stride) as isize + lo;
        Rect {
            top,
            left,
            bottom: top + self.kernel as isize,
            right: left + self.kernel as isize,
        }
    }

    pub fn is_spatial(&self) -> bool {
        self.kernel > 1 || self.stride > 1
    }

    pub fn stride_out(&self) -> usize {
        self.stride_in * self.stride
    }

    pub fn out_positions(&self) -> usize {
        self.out_dims.0 * self.out_dims.1
    }

    /// Multiply-accumulates per output position.
    pub fn macs_per_position(&self) -> u64 {
        let k2 = (self.kernel * self.kernel) as u64;
        match self.kind {
            LayerKind::Conv => k2 * self.in_channels as u64 * self.out_channels as u64,
            LayerKind::Pointwise => self.in_channels as u64 * self.out_channels as u64,
            LayerKind::Activation(_) | LayerKind::BatchNorm => self.out_channels as u64,
            LayerKind::Pool => k2 * self.out_channels as u64,
        }
    }

    /// Evaluates one output position from `input` into `out`
    /// (`out.len() == out_channels`). Shared by the dense and sparse paths.
    pub fn eval_position(&self, input: &FeatureMap, row: usize, col: usize, out: &mut [f32]) {
        let cin = self.in_channels;
        match self.kind {
            LayerKind::Conv | LayerKind::Pointwise => {
                out.iter_mut().for_each(|v| *v = 0.0);
                let win = self.window(row, col);
                let taps = self.kernel * self.kernel;
                for (tap, (r, c)) in window_taps(win).enumerate() {
                    let Some(px) = input.pixel_padded(r, c) else {
                        continue;
                    };
                    for (oc, acc) in out.iter_mut().enumerate() {
                        let w = &self.weights[(oc * taps + tap) * cin..(oc * taps + tap + 1) * cin];
                        *acc += w.iter().zip(px).map(|(a, b)| a * b).sum::<f32>();
                    }
                }
            }
            LayerKind::Activation(act) => {
                for (o, &x) in out.iter_mut().zip(input.pixel(row, col)) {
                    *o = act.apply(x);
                }
            }
            LayerKind::BatchNorm => {
                for (ch, (o, &x)) in out.iter_mut().zip(input.pixel(row, col)).enumerate() {
                    *o = self.weights[ch] * x + self.shift[ch];
                }
            }
            LayerKind::Pool => {
                out.iter_mut().for_each(|v| *v = f32::NEG_INFINITY);
                for (r, c) in window_taps(self.window(row, col)) {
                    match input.pixel_padded(r, c) {
                        Some(px) => out.iter_mut().zip(px).for_each(|(o, &x)| *o = o.max(x)),
                        None => out.iter_mut().for_each(|o| *o = o.max(0.0)),
                    }
                }
            }
        }
    }

    /// Dense evaluation over the whole output grid.
    pub fn forward(&self, input: &FeatureMap) -> FeatureMap {
        let (oh, ow) = self.out_dims;
        let oc = self.out_channels;
        let mut data = vec![0.0f32; oh * ow * oc];
        data.par_chunks_mut(ow * oc).enumerate().for_each(|(r, row)| {
            for c in 0..ow {
                self.eval_position(input, r, c, &mut row[c * oc..(c + 1) * oc]);
            }
        });
        FeatureMap::from_vec(oh, ow, oc, data).expect("layer output dims consistent")
    }

    fn compute_l1(&self) -> f32 {
        match self.kind {
            LayerKind::Conv | LayerKind::Pointwise => {
                let per_out = self.weights.len() / self.out_channels;
                self.weights
                    .chunks(per_out)
                    .map(|w| w.iter().map(|v| v.abs()).sum::<f32>())
                    .fold(0.0, f32::max)
            }
            LayerKind::BatchNorm => self.weights.iter().map(|v| v.abs()).fold(0.0, f32::max),
            LayerKind::Activation(_) | LayerKind::Pool => 1.0,
        }
    }
}

/// Row-major iteration over a window's positions.
pub fn window_taps(win: Rect) -> impl Iterator<Item = (isize, isize)> {
    (win.top..win.bottom).flat_map(move |r| (win.left..win.right).map(move |c| (r, c)))
}

#[derive(Debug, Clone)]
pub struct NetworkSpec {
    config: NetworkConfig,
    layers: Vec<LayerSpec>,
    r_max: usize,
    s_max: usize,
}

pub fn build_network(config: &NetworkConfig) -> Result<NetworkSpec> {
    let (mut h, mut w, mut ch) = config.input;
    if h == 0 || w == 0 || ch == 0 {
        return Err(Error::invalid("input dims must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut layers = Vec::with_capacity(config.layers.len());
    let mut cum = 1usize;
    for (idx, def) in config.layers.iter().enumerate() {
        let n = idx + 1;
        if def.kernel == 0 || def.stride == 0 {
            return Err(Error::invalid(format!("layer {n}: kernel and stride must be positive")));
        }
        if def.kernel < def.stride {
            return Err(Error::invalid(format!("layer {n}: kernel {} smaller than stride {}", def.kernel, def.stride)));
        }
        if h % def.stride != 0 || w % def.stride != 0 {
            return Err(Error::invalid(format!("layer {n}: stride {} does not divide {h}x{w}", def.stride)));
        }
        let out_ch = match def.kind {
            LayerKind::Conv | LayerKind::Pointwise => def.out_channels.ok_or_else(|| {
                Error::invalid(format!("layer {n}: missing out channels"))
            })?,
            _ => ch,
        };
        let taps = def.kernel * def.kernel;
        let (weights, shift) = match def.kind {
            LayerKind::Conv | LayerKind::Pointwise => {
                let a = 1.0 / ((taps * ch) as f32).sqrt();
                ((0..out_ch * taps * ch).map(|_| rng.gen_range(-a..=a)).collect(), Vec::new())
            }
            LayerKind::BatchNorm => (
                (0..ch).map(|_| rng.gen_range(0.5f32..=1.5)).collect(),
                (0..ch).map(|_| rng.gen_range(-0.1f32..=0.1)).collect(),
            ),
            _ => (Vec::new(), Vec::new()),
        };
        let mut spec = LayerSpec {
            kind: def.kind,
            kernel: def.kernel,
            stride: def.stride,
            in_channels: ch,
            out_channels: out_ch,
            profiled: def.profiled,
            weights,
            shift,
            l1: 0.0,
            in_dims: (h, w),
            out_dims: (h / def.stride, w / def.stride),
            stride_in: cum,
        };
        spec.l1 = spec.compute_l1();
        cum *= def.stride;
        h /= def.stride;
        w /= def.stride;
        ch = out_ch;
        layers.push(spec);
    }
    let mut extent = 1usize;
    let mut r_max = 1usize;
    let mut s_max = 1usize;
    for l in &layers {
        extent += (l.kernel - 1) * l.stride_in;
        r_max = r_max.max(extent);
        s_max = s_max.max(l.stride_out());
    }
    Ok(NetworkSpec {
        config: config.clone(),
        layers,
        r_max,
        s_max,
    })
}

impl NetworkSpec {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> &LayerSpec {
        &self.layers[idx]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.config.input
    }

    /// Output dims of layer `idx` (0-based) as `(h, w, c)`.
    pub fn output_dims(&self, idx: usize) -> (usize, usize, usize) {
        let l = &self.layers[idx];
        (l.out_dims.0, l.out_dims.1, l.out_channels)
    }

    pub fn final_dims(&self) -> (usize, usize, usize) {
        match self.layers.last() {
            Some(_) => self.output_dims(self.layers.len() - 1),
            None => self.config.input,
        }
    }

    pub fn weight_l1(&self, idx: usize) -> Result<f32> {
        self.layers
            .get(idx)
            .map(|l| l.l1)
            .ok_or_else(|| Error::invalid(format!("layer index {idx} out of range")))
    }

    /// `(R_max, S_max)`: largest receptive-field extent and largest
    /// cumulative stride, both at input resolution.
    pub fn effective_geometry(&self) -> (usize, usize) {
        (self.r_max, self.s_max)
    }

    /// Indices of profiled layers in network order.
    pub fn profiled_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].profiled).collect()
    }

    pub fn first_spatial_layer(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.is_spatial())
    }

    /// Dense MACs for one full forward pass.
    pub fn dense_macs(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| l.macs_per_position() * l.out_positions() as u64)
            .sum()
    }

    /// Replaces a layer's weights (and BatchNorm shift) and refreshes its L1 bound.
    pub fn set_weights(&mut self, idx: usize, weights: Vec<f32>, shift: Option<Vec<f32>>) -> Result<()> {
        let l = self
            .layers
            .get_mut(idx)
            .ok_or_else(|| Error::invalid(format!("layer index {idx} out of range")))?;
        if weights.len() != l.weights.len() {
            return Err(Error::invalid(format!(
                "layer {idx} expects {} weights, got {}",
                l.weights.len(),
                weights.len()
            )));
        }
        if let Some(s) = shift {
            if s.len() != l.shift.len() {
                return Err(Error::invalid("shift length mismatch"));
            }
            l.shift = s;
        }
        l.weights = weights;
        l.l1 = l.compute_l1();
        Ok(())
    }

    /// Input-resolution receptive field of position `(row, col)` of layer `idx`.
    pub fn input_receptive_field(&self, idx: usize, row: usize, col: usize) -> Rect {
        let mut lo = 0isize;
        let mut hi = 0isize;
        for l in &self.layers[..=idx] {
            let off = l.window_offset() * l.stride_in as isize;
            lo += off;
            hi += off + ((l.kernel - 1) * l.stride_in) as isize;
        }
        let s = self.layers[idx].stride_out() as isize;
        let (r, c) = (row as isize * s, col as isize * s);
        Rect {
            top: r + lo,
            left: c + lo,
            bottom: r + hi + 1,
            right: c + hi + 1,
        }
    }

    pub fn dense_forward(&self, input: &FeatureMap) -> Result<Vec<FeatureMap>> {
        if input.dims() != self.config.input {
            return Err(Error::invalid(format!(
                "input {:?} does not match network input {:?}",
                input.dims(),
                self.config.input
            )));
        }
        let mut outs: Vec<FeatureMap> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let prev = outs.last().unwrap_or(input);
            let next = l.forward(prev);
            outs.push(next);
        }
        Ok(outs)
    }

    /// 64-bit digest of the canonical config text plus `extra`.
    pub fn config_hash(&self, extra: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.config.to_text().as_bytes());
        h.update(extra.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}
