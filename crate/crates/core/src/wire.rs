//! Binary wire format between a client and the cloud server.
//!
//! All integers are little-endian. Every message starts with a four-byte
//! magic and a `u16` version; offload and result messages end with a CRC32
//! over all preceding bytes. On a stream, each message is preceded by its
//! `u32` length.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::motion::MvField;
use crate::tensor::{FeatureMap, RecomputeMask};

pub const WIRE_VERSION: u16 = 1;
const MAX_MESSAGE: usize = 256 << 20;

/// Packs the 2x2 OR-downsampled mask, MSB-first, row-major.
pub fn pack_mask(mask: &RecomputeMask) -> Result<Vec<u8>> {
    let (h, w) = mask.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("mask {h}x{w} must have even dims")));
    }
    let (ch, cw) = (h / 2, w / 2);
    let mut out = vec![0u8; (ch * cw).div_ceil(8)];
    for r in 0..ch {
        for c in 0..cw {
            let set = mask.get(2 * r, 2 * c)
                || mask.get(2 * r, 2 * c + 1)
                || mask.get(2 * r + 1, 2 * c)
                || mask.get(2 * r + 1, 2 * c + 1);
            if set {
                let i = r * cw + c;
                out[i / 8] |= 0x80 >> (i % 8);
            }
        }
    }
    Ok(out)
}

/// Expands packed cells back to full resolution (each set cell covers its
/// 2x2 block).
pub fn unpack_mask(bytes: &[u8], height: usize, width: usize) -> Result<RecomputeMask> {
    if !height.is_multiple_of(2) || !width.is_multiple_of(2) {
        return Err(Error::invalid("mask dims must be even"));
    }
    let cw = width / 2;
    let cells = (height / 2) * cw;
    if bytes.len() != cells.div_ceil(8) {
        return Err(Error::protocol(format!(
            "packed mask has {} bytes, expected {}",
            bytes.len(),
            cells.div_ceil(8)
        )));
    }
    Ok(RecomputeMask::from_fn(height, width, |r, c| {
        let i = (r / 2) * cw + c / 2;
        bytes[i / 8] & (0x80 >> (i % 8)) != 0
    }))
}

/// The mask actually transmitted: `unpack(pack(mask))`.
pub fn upsampled_mask(mask: &RecomputeMask) -> Result<RecomputeMask> {
    let (h, w) = mask.dims();
    unpack_mask(&pack_mask(mask)?, h, w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffloadPayload {
    pub frame_id: u64,
    pub height: u32,
    pub width: u32,
    pub mv: MvField,
    pub packed_mask: Vec<u8>,
    /// Values at the set positions of the upsampled mask, raster order,
    /// channels innermost.
    pub pixels: Vec<f32>,
}

impl OffloadPayload {
    /// Builds the payload for `frame` under the client-side mask.
    pub fn build(frame_id: u64, frame: &FeatureMap, mv: MvField, mask: &RecomputeMask) -> Result<Self> {
        let (h, w, _) = frame.dims();
        if mv.frame_dims() != (h, w) {
            return Err(Error::invalid("motion field does not cover the frame"));
        }
        let packed_mask = pack_mask(mask)?;
        let up = unpack_mask(&packed_mask, h, w)?;
        let mut pixels = Vec::with_capacity(up.count() * frame.channels());
        for p in up.set_positions() {
            pixels.extend_from_slice(frame.pixel_at(p));
        }
        Ok(Self {
            frame_id,
            height: h as u32,
            width: w as u32,
            mv,
            packed_mask,
            pixels,
        })
    }

    pub fn mask(&self) -> Result<RecomputeMask> {
        unpack_mask(&self.packed_mask, self.height as usize, self.width as usize)
    }

    /// Scatters transmitted pixels into a zero frame.
    pub fn frame(&self, channels: usize) -> Result<(FeatureMap, RecomputeMask)> {
        let mask = self.mask()?;
        let positions = mask.set_positions();
        if self.pixels.len() != positions.len() * channels {
            return Err(Error::protocol(format!(
                "payload carries {} values for {} positions x {channels} channels",
                self.pixels.len(),
                positions.len()
            )));
        }
        let mut f = FeatureMap::zeros(self.height as usize, self.width as usize, channels)?;
        for (i, p) in positions.into_iter().enumerate() {
            f.pixel_at_mut(p).copy_from_slice(&self.pixels[i * channels..(i + 1) * channels]);
        }
        Ok((f, mask))
    }

    pub fn mv_bytes(&self) -> usize {
        let (gh, gw) = self.mv.grid();
        gh * gw * 4
    }
}

/// Per-layer counts returned with a result.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultMessage {
    pub frame_id: u64,
    pub output: FeatureMap,
    pub compute_ratio: f64,
    pub layer_counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { client_id: u64, config_hash: u64 },
    HelloAck { accepted: bool, reason: String },
    Offload(OffloadPayload),
    Result(ResultMessage),
    Error { code: u16, message: String },
    SnapshotRequest,
    Snapshot { cold: bool, blob: Vec<u8> },
}

pub const ERR_DESYNC: u16 = 1;
pub const ERR_PROTOCOL: u16 = 2;
pub const ERR_INTERNAL: u16 = 3;

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut v = Vec::new();
        v.extend_from_slice(magic);
        v.extend_from_slice(&WIRE_VERSION.to_le_bytes());
        Self(v)
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn crc(mut self) -> Vec<u8> {
        let c = crc32fast::hash(&self.0);
        self.u32(c);
        self.0
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::protocol("truncated message"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::protocol("length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::protocol("trailing bytes"));
        }
        Ok(())
    }
}

fn check_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 10 {
        return Err(Error::protocol("truncated message"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let want = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != want {
        return Err(Error::protocol("CRC mismatch"));
    }
    Ok(body)
}

pub fn encode_offload(p: &OffloadPayload) -> Vec<u8> {
    let mut w = Writer::new(b"FSOF");
    w.u64(p.frame_id);
    w.u32(p.height);
    w.u32(p.width);
    w.u16(p.mv.block_size() as u16);
    w.u32(p.mv_bytes() as u32);
    w.u32(p.packed_mask.len() as u32);
    w.u32((p.pixels.len() * 4) as u32);
    for (dy, dx) in p.mv.vectors() {
        w.0.extend_from_slice(&dy.to_le_bytes());
        w.0.extend_from_slice(&dx.to_le_bytes());
    }
    w.0.extend_from_slice(&p.packed_mask);
    w.f32s(&p.pixels);
    w.crc()
}

fn header<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Cursor<'a>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != magic {
        return Err(Error::protocol(format!("expected {} message", String::from_utf8_lossy(magic))));
    }
    let v = c.u16()?;
    if v != WIRE_VERSION {
        return Err(Error::UnsupportedVersion { found: v, expected: WIRE_VERSION });
    }
    Ok(c)
}

pub fn decode_offload(bytes: &[u8]) -> Result<OffloadPayload> {
    let body = check_crc(bytes)?;
    let mut c = header(body, b"FSOF")?;
    let frame_id = c.u64()?;
    let height = c.u32()?;
    let width = c.u32()?;
    let block = c.u16()? as usize;
    let len_mv = c.u32()? as usize;
    let len_mask = c.u32()? as usize;
    let len_px = c.u32()? as usize;
    if block == 0 || !(height as usize).is_multiple_of(block) || !(width as usize).is_multiple_of(block) {
        return Err(Error::protocol("frame dims are not a multiple of the block size"));
    }
    let (gh, gw) = (height as usize / block, width as usize / block);
    if len_mv != gh * gw * 4 || !len_px.is_multiple_of(4) {
        return Err(Error::protocol("section length mismatch"));
    }
    let mv_raw = c.take(len_mv)?;
    let vectors = mv_raw
        .chunks_exact(4)
        .map(|b| (i16::from_le_bytes([b[0], b[1]]), i16::from_le_bytes([b[2], b[3]])))
        .collect();
    let mv = MvField::from_vectors(block, gh, gw, vectors).map_err(|e| Error::protocol(e.to_string()))?;
    let packed_mask = c.take(len_mask)?.to_vec();
    let pixels = c.f32s(len_px / 4)?;
    c.finish()?;
    if height % 2 != 0 || width % 2 != 0 || packed_mask.len() != (height as usize / 2 * width as usize / 2).div_ceil(8) {
        return Err(Error::protocol("packed mask length mismatch"));
    }
    Ok(OffloadPayload {
        frame_id,
        height,
        width,
        mv,
        packed_mask,
        pixels,
    })
}

pub fn encode(msg: &Message) -> Vec<u8> {
    match msg {
        Message::Offload(p) => encode_offload(p),
        Message::Hello { client_id, config_hash } => {
            let mut w = Writer::new(b"FSHI");
            w.u64(*client_id);
            w.u64(*config_hash);
            w.0
        }
        Message::HelloAck { accepted, reason } => {
            let mut w = Writer::new(b"FSHA");
            w.u8(*accepted as u8);
            w.bytes(reason.as_bytes());
            w.0
        }
        Message::Result(r) => {
            let mut w = Writer::new(b"FSRS");
            w.u64(r.frame_id);
            let (h, wd, ch) = r.output.dims();
            w.u32(h as u32);
            w.u32(wd as u32);
            w.u32(ch as u32);
            w.u64(r.compute_ratio.to_bits());
            w.u32(r.layer_counts.len() as u32);
            for &n in &r.layer_counts {
                w.u32(n);
            }
            w.f32s(r.output.data());
            w.crc()
        }
        Message::Error { code, message } => {
            let mut w = Writer::new(b"FSER");
            w.u16(*code);
            w.bytes(message.as_bytes());
            w.0
        }
        Message::SnapshotRequest => Writer::new(b"FSSQ").0,
        Message::Snapshot { cold, blob } => {
            let mut w = Writer::new(b"FSSN");
            w.u8(*cold as u8);
            w.bytes(blob);
            w.0
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Message> {
    if bytes.len() < 4 {
        return Err(Error::protocol("truncated message"));
    }
    let text = |b: &[u8]| String::from_utf8(b.to_vec()).map_err(|_| Error::protocol("invalid utf-8"));
    match &bytes[..4] {
        b"FSOF" => decode_offload(bytes).map(Message::Offload),
        b"FSHI" => {
            let mut c = header(bytes, b"FSHI")?;
            let m = Message::Hello {
                client_id: c.u64()?,
                config_hash: c.u64()?,
            };
            c.finish()?;
            Ok(m)
        }
        b"FSHA" => {
            let mut c = header(bytes, b"FSHA")?;
            let accepted = c.u8()? != 0;
            let reason = text(c.bytes()?)?;
            c.finish()?;
            Ok(Message::HelloAck { accepted, reason })
        }
        b"FSRS" => {
            let body = check_crc(bytes)?;
            let mut c = header(body, b"FSRS")?;
            let frame_id = c.u64()?;
            let (h, w, ch) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
            let compute_ratio = f64::from_bits(c.u64()?);
            let n = c.u32()? as usize;
            let layer_counts = (0..n).map(|_| c.u32()).collect::<Result<_>>()?;
            let data = c.f32s(h.saturating_mul(w).saturating_mul(ch))?;
            c.finish()?;
            let output = FeatureMap::from_vec(h, w, ch, data).map_err(|e| Error::protocol(e.to_string()))?;
            Ok(Message::Result(ResultMessage {
                frame_id,
                output,
                compute_ratio,
                layer_counts,
            }))
        }
        b"FSER" => {
            let mut c = header(bytes, b"FSER")?;
            let code = c.u16()?;
            let message = text(c.bytes()?)?;
            c.finish()?;
            Ok(Message::Error { code, message })
        }
        b"FSSQ" => {
            let c = header(bytes, b"FSSQ")?;
            c.finish()?;
            Ok(Message::SnapshotRequest)
        }
        b"FSSN" => {
            let mut c = header(bytes, b"FSSN")?;
            let cold = c.u8()? != 0;
            let blob = c.bytes()?.to_vec();
            c.finish()?;
            Ok(Message::Snapshot { cold, blob })
        }
        other => Err(Error::protocol(format!("unknown magic {:?}", String::from_utf8_lossy(other)))),
    }
}

pub fn write_message(stream: &mut impl Write, bytes: &[u8]) -> Result<()> {
    stream.write_all(&(bytes.len() as u32).to_le_bytes())?;
    stream.write_all(bytes)?;
    stream.flush()?;
    Ok(())
}

/// Reads one length-prefixed message; `None` on clean end of stream.
pub fn read_message(stream: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match stream.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_le_bytes(len) as usize;
    if n > MAX_MESSAGE {
        return Err(Error::protocol(format!("message of {n} bytes exceeds limit")));
    }
    let mut buf = vec![0u8; n];
    stream.read_exact(&mut buf)?;
    Ok(Some(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pack_examples() {
        assert_eq!(pack_mask(&RecomputeMask::empty(4, 4)).unwrap(), vec![0x00]);
        assert_eq!(pack_mask(&RecomputeMask::full(4, 4)).unwrap(), vec![0xF0]);
        assert!(pack_mask(&RecomputeMask::empty(3, 4)).is_err());
        assert!(unpack_mask(&[], 4, 4).is_err());
        assert!(unpack_mask(&[0], 4, 4).unwrap().is_empty());
    }

    #[test]
    fn offload_roundtrip_and_corruption() {
        let frame = FeatureMap::new(32, 32, 3, 0.25).unwrap();
        let mv = MvField::uniform(16, 2, 2, -3, 7).unwrap();
        let mask = RecomputeMask::from_fn(32, 32, |r, c| r == 5 && c < 3);
        let p = OffloadPayload::build(9, &frame, mv, &mask).unwrap();
        assert_eq!(p.pixels.len(), 2 * 4 * 3);
        let bytes = encode_offload(&p);
        assert_eq!(decode_offload(&bytes).unwrap(), p);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(decode_offload(&bad), Err(Error::Protocol(_))));
        assert!(decode_offload(&bytes[..bytes.len() - 3]).is_err());
        let (f, m) = p.frame(3).unwrap();
        assert!(mask.is_subset_of(&m));
        assert_eq!(f.pixel(5, 0), &[0.25; 3]);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let hello = encode(&Message::Hello { client_id: 1, config_hash: 2 });
        let mut bad = hello.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::UnsupportedVersion { found: 9, .. })));
    }

    #[test]
    fn control_messages_roundtrip() {
        let out = FeatureMap::new(2, 2, 3, 1.5).unwrap();
        for m in [
            Message::Hello { client_id: 7, config_hash: 0xdead_beef },
            Message::HelloAck { accepted: false, reason: "hash".into() },
            Message::Error { code: ERR_DESYNC, message: "gap".into() },
            Message::SnapshotRequest,
            Message::Snapshot { cold: true, blob: vec![1, 2, 3] },
            Message::Result(ResultMessage { frame_id: 3, output: out, compute_ratio: 0.25, layer_counts: vec![1, 2] }),
        ] {
            assert_eq!(decode(&encode(&m)).unwrap(), m);
        }
    }

    #[test]
    fn metadata_fraction_at_1024() {
        let frame = FeatureMap::zeros(1024, 1024, 3).unwrap();
        let mv = MvField::zero(16, 64, 64).unwrap();
        let p = OffloadPayload::build(0, &frame, mv, &RecomputeMask::empty(1024, 1024)).unwrap();
        let meta = p.mv_bytes() + p.packed_mask.len();
        assert_eq!(meta * 64, 1024 * 1024 * 3);
    }

    proptest! {
        #[test]
        fn unpack_covers_original(bits in proptest::collection::vec(prop::bool::weighted(0.2), 256)) {
            let m = RecomputeMask::from_bits(16, 16, bits).unwrap();
            let packed = pack_mask(&m).unwrap();
            let up = unpack_mask(&packed, 16, 16).unwrap();
            prop_assert!(m.is_subset_of(&up));
            for r in 0..8 {
                for c in 0..8 {
                    let any = (0..2).any(|a| (0..2).any(|b| m.get(2 * r + a, 2 * c + b)));
                    prop_assert_eq!(up.get(2 * r, 2 * c), any);
                }
            }
            prop_assert_eq!(pack_mask(&up).unwrap(), packed);
        }
    }
}
