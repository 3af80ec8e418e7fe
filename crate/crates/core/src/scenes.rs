//! Procedural test sequences with known block motion, and their on-disk
//! form (raw `FSFM` frames, `FSMV` ground truth, `manifest.json`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{MvField, DEFAULT_BLOCK_SIZE};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    Static,
    /// Content moves by `(dy, dx)` pixels per frame.
    Pan { dy: i32, dx: i32 },
    /// Background and a textured foreground rectangle moving independently.
    TwoRegion { bg: (i32, i32), fg: (i32, i32) },
    /// A flat occluder on the left whose width oscillates.
    Reveal,
    /// Every block samples the texture with a fresh random offset.
    Scramble { jitter: i32 },
}

impl Scenario {
    /// `static`, `pan[:dy,dx]`, `two_region[:bdy,bdx,fdy,fdx]`, `reveal`,
    /// `scramble[:j]`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let nums: Vec<i32> = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|a| a.trim().parse::<i32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Usage(format!("bad scenario arguments `{args}`: {e}")))?
        };
        let bad = || Error::Usage(format!("wrong number of arguments for scenario `{name}`"));
        match name {
            "static" if nums.is_empty() => Ok(Scenario::Static),
            "pan" => match nums[..] {
                [] => Ok(Scenario::Pan { dy: 0, dx: 4 }),
                [dy, dx] => Ok(Scenario::Pan { dy, dx }),
                _ => Err(bad()),
            },
            "two_region" => match nums[..] {
                [] => Ok(Scenario::TwoRegion { bg: (0, 2), fg: (3, -5) }),
                [a, b, c, d] => Ok(Scenario::TwoRegion { bg: (a, b), fg: (c, d) }),
                _ => Err(bad()),
            },
            "reveal" if nums.is_empty() => Ok(Scenario::Reveal),
            "scramble" => match nums[..] {
                [] => Ok(Scenario::Scramble { jitter: 6 }),
                [j] if j >= 0 => Ok(Scenario::Scramble { jitter: j }),
                _ => Err(bad()),
            },
            "static" | "reveal" => Err(bad()),
            _ => Err(Error::Usage(format!(
                "unknown scenario `{name}` (static, pan, two_region, reveal, scramble)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scenario: Scenario,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Peak amplitude of per-frame uniform noise.
    #[serde(default)]
    pub noise: f32,
}

impl SceneSpec {
    pub fn new(scenario: Scenario, frames: usize, height: usize, width: usize, seed: u64) -> Self {
        Self {
            scenario,
            frames,
            height,
            width,
            seed,
            noise: 0.0,
        }
    }

    pub fn with_noise(mut self, noise: f32) -> Self {
        self.noise = noise;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub spec: SceneSpec,
    pub frames: Vec<FeatureMap>,
    /// Per frame; frame 0 carries zero motion.
    pub truth: Vec<MvField>,
}

fn mix(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn hash(seed: u64, a: i64, b: i64, c: u64) -> u64 {
    mix(seed ^ mix((a as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ mix((b as u64) ^ mix(c))))
}

fn unit(h: u64) -> f32 {
    (h >> 40) as f32 / (1u64 << 24) as f32
}

/// Multi-octave value noise at integer world coordinates, in `[0, 1]`.
pub fn texture(seed: u64, y: i64, x: i64, ch: usize) -> f32 {
    let mut acc = 0.0f32;
    let mut total = 0.0f32;
    for (o, (cell, amp)) in [(16i64, 0.35f32), (8, 0.25), (4, 0.2), (2, 0.12)].into_iter().enumerate() {
        let (gy, gx) = (y.div_euclid(cell), x.div_euclid(cell));
        let fy = y.rem_euclid(cell) as f32 / cell as f32;
        let fx = x.rem_euclid(cell) as f32 / cell as f32;
        let key = (o * 3 + ch) as u64;
        let v = |dy: i64, dx: i64| unit(hash(seed, gy + dy, gx + dx, key));
        let top = v(0, 0) * (1.0 - fx) + v(0, 1) * fx;
        let bot = v(1, 0) * (1.0 - fx) + v(1, 1) * fx;
        acc += amp * (top * (1.0 - fy) + bot * fy);
        total += amp;
    }
    let grain = 0.08;
    acc += grain * unit(hash(seed, y, x, 100 + ch as u64));
    total += grain;
    acc / total
}

const CHANNELS: usize = 3;

/// Top-left corner of the foreground object at frame `t`: it moves by `v`
/// per frame and bounces inside `[0, span]`.
fn bounce(start: i32, v: i32, t: usize, span: i32) -> i32 {
    if span <= 0 {
        return 0;
    }
    let p = (start + v * t as i32).rem_euclid(2 * span);
    if p <= span {
        p
    } else {
        2 * span - p
    }
}

fn occluder_width(t: usize, w: usize) -> usize {
    let period = 24usize;
    let phase = t % period;
    let tri = if phase <= period / 2 { phase } else { period - phase };
    (w / 2) * tri / (period / 2)
}

pub fn generate(spec: &SceneSpec) -> Result<Sequence> {
    let (h, w) = (spec.height, spec.width);
    let b = DEFAULT_BLOCK_SIZE;
    if h == 0 || w == 0 || h % b != 0 || w % b != 0 {
        return Err(Error::invalid(format!("scene dims {h}x{w} must be positive multiples of {b}")));
    }
    if spec.frames == 0 {
        return Err(Error::invalid("scene needs at least one frame"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::invalid("noise amplitude must be non-negative"));
    }
    let (gh, gw) = (h / b, w / b);
    let fg_seed = spec.seed ^ 0x5eed_f00d;
    let (oh, ow) = ((h / 2) as i32, (w / 2) as i32);
    let jit = |t: usize, by: usize, bx: usize, j: i32| -> (i32, i32) {
        if t == 0 || j == 0 {
            return (0, 0);
        }
        let r = hash(spec.seed, (t * gh + by) as i64, bx as i64, 7);
        let n = (2 * j + 1) as u64;
        ((r % n) as i32 - j, ((r / n) % n) as i32 - j)
    };
    let fg_pos = |t: usize, fg: (i32, i32)| {
        (
            bounce(h as i32 / 4, fg.0, t, h as i32 - oh),
            bounce(w as i32 / 4, fg.1, t, w as i32 - ow),
        )
    };

    let mut frames = Vec::with_capacity(spec.frames);
    let mut truth = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let ti = t as i64;
        let mut f = FeatureMap::zeros(h, w, CHANNELS)?;
        let mut mv = MvField::zero(b, gh, gw)?;
        for r in 0..h {
            for c in 0..w {
                let (ri, ci) = (r as i64, c as i64);
                let px = f.pixel_mut(r, c);
                for (ch, v) in px.iter_mut().enumerate() {
                    *v = match spec.scenario {
                        Scenario::Static | Scenario::Reveal => texture(spec.seed, ri, ci, ch),
                        Scenario::Pan { dy, dx } => {
                            texture(spec.seed, ri - dy as i64 * ti, ci - dx as i64 * ti, ch)
                        }
                        Scenario::TwoRegion { bg, fg } => {
                            let (py, px0) = fg_pos(t, fg);
                            let inside = (r as i32) >= py
                                && (r as i32) < py + oh
                                && (c as i32) >= px0
                                && (c as i32) < px0 + ow;
                            if inside {
                                texture(fg_seed, (r as i32 - py) as i64, (c as i32 - px0) as i64, ch)
                            } else {
                                texture(spec.seed, ri - bg.0 as i64 * ti, ci - bg.1 as i64 * ti, ch)
                            }
                        }
                        Scenario::Scramble { jitter } => {
                            let (jy, jx) = jit(t, r / b, c / b, jitter);
                            texture(spec.seed, ri + jy as i64, ci + jx as i64, ch)
                        }
                    };
                }
                if let Scenario::Reveal = spec.scenario {
                    if c < occluder_width(t, w) {
                        px.copy_from_slice(&[0.2, 0.5, 0.8]);
                    }
                }
            }
        }
        if spec.noise > 0.0 {
            for (i, v) in f.data_mut().iter_mut().enumerate() {
                let n = unit(hash(spec.seed ^ 0x0015e, ti, i as i64, 3)) * 2.0 - 1.0;
                *v += spec.noise * n;
            }
        }
        if t > 0 {
            for by in 0..gh {
                for bx in 0..gw {
                    let v = match spec.scenario {
                        Scenario::Static | Scenario::Reveal => (0, 0),
                        Scenario::Pan { dy, dx } => (dy, dx),
                        Scenario::TwoRegion { bg, fg } => {
                            let (py, px0) = fg_pos(t, fg);
                            let (py1, px1) = fg_pos(t - 1, fg);
                            let (cy, cx) = ((by * b + b / 2) as i32, (bx * b + b / 2) as i32);
                            if cy >= py && cy < py + oh && cx >= px0 && cx < px0 + ow {
                                (py - py1, px0 - px1)
                            } else {
                                bg
                            }
                        }
                        Scenario::Scramble { jitter } => {
                            let (a, c) = jit(t, by, bx, jitter);
                            let (p, q) = jit(t - 1, by, bx, jitter);
                            (p - a, q - c)
                        }
                    };
                    mv.set_block(by, bx, (v.0 as i16, v.1 as i16));
                }
            }
        }
        frames.push(f);
        truth.push(mv);
    }
    Ok(Sequence {
        spec: spec.clone(),
        frames,
        truth,
    })
}

pub fn frame_to_bytes(f: &FeatureMap) -> Vec<u8> {
    let (h, w, c) = f.dims();
    let mut out = Vec::with_capacity(18 + f.data().len() * 4);
    out.extend_from_slice(b"FSFM");
    out.extend_from_slice(&1u16.to_le_bytes());
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in f.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn frame_from_bytes(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < 18 || &bytes[..4] != b"FSFM" {
        return Err(Error::protocol("not an FSFM frame"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != 1 {
        return Err(Error::UnsupportedVersion { found: version, expected: 1 });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let body = &bytes[18..];
    if body.len() != h * w * c * 4 {
        return Err(Error::protocol("FSFM body length mismatch"));
    }
    let data = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    FeatureMap::from_vec(h, w, c, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub spec: SceneSpec,
    pub channels: usize,
    pub frame_files: Vec<String>,
    pub mv_files: Vec<String>,
    /// Population std of all ground-truth block vector components.
    pub mv_std: f64,
}

pub fn mv_std(truth: &[MvField]) -> f64 {
    let comps: Vec<f64> = truth
        .iter()
        .skip(1)
        .flat_map(|f| f.vectors().flat_map(|(a, b)| [a as f64, b as f64]))
        .collect();
    if comps.is_empty() {
        return 0.0;
    }
    let n = comps.len() as f64;
    let mean = comps.iter().sum::<f64>() / n;
    (comps.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

impl Sequence {
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir)?;
        let mut frame_files = Vec::new();
        let mut mv_files = Vec::new();
        for (t, (f, mv)) in self.frames.iter().zip(&self.truth).enumerate() {
            let name = format!("frame_{t:05}.fsfm");
            fs::write(dir.join(&name), frame_to_bytes(f))?;
            frame_files.push(name);
            let name = format!("mv_{t:05}.fsmv");
            fs::write(dir.join(&name), mv.to_bytes())?;
            mv_files.push(name);
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            channels: CHANNELS,
            frame_files,
            mv_files,
            mv_std: mv_std(&self.truth),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.frame_files.len() != manifest.mv_files.len() {
            return Err(Error::invalid("manifest lists different numbers of frames and fields"));
        }
        let frames = manifest
            .frame_files
            .iter()
            .map(|n| frame_from_bytes(&fs::read(dir.join(n))?))
            .collect::<Result<Vec<_>>>()?;
        let truth = manifest
            .mv_files
            .iter()
            .map(|n| MvField::from_bytes(&fs::read(dir.join(n))?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: manifest.spec,
            frames,
            truth,
        })
    }
}
