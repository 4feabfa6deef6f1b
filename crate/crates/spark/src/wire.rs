//! Wire encoding of compressed Jacobians and logits with exact byte
//! accounting.
//!
//! Jacobian message layout (little-endian throughout):
//!
//! ```text
//! magic "SPKJ" | version u16 | owner u32 | codec u8 | n_layers u16
//! per layer: name_len u16 | name | n u32 | c u32 | k u32 | scale f32 (i8 only)
//! n_samples u32 | sample_indices u32 * n_samples
//! payload per layer, row-major (n, c, k), entries in the codec precision
//! ```
//!
//! Logits ship in a separate block: `rows u32 | classes u32 | labels u8*rows
//! | logits f32 * rows*classes`. Logits are always f32; quantization applies
//! to the Jacobian payload only.
//!
//! f16 uses IEEE 754 binary16 with round-to-nearest-even; values beyond the
//! binary16 range are clamped to the max finite value and counted. i8 uses
//! per-layer affine quantization with `scale = max|entry| / 127` stored in
//! the header.

use ndarray::{Array2, Array3};

use crate::error::{Result, SparkError};
use crate::projection::{Codec, CompressedJacobian};

pub const JACOBIAN_MAGIC: &[u8; 4] = b"SPKJ";
pub const WIRE_VERSION: u16 = 1;

/// Side effects of encoding worth reporting in metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncodeStats {
    /// Entries clamped to the f16 finite range.
    pub clamped: usize,
}

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_f32(buf: &mut Vec<u8>, v: f32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SparkError::parse(
                self.pos,
                format!("truncated buffer: wanted {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Header size in bytes for the given layer table, codec, and sample count.
pub fn header_bytes(layer_names: &[&str], codec: Codec, n_samples: usize) -> usize {
    let per_layer_extra = if codec == Codec::I8 { 4 } else { 0 };
    4 + 2 + 4 + 1 + 2
        + layer_names
            .iter()
            .map(|n| 2 + n.len() + 12 + per_layer_extra)
            .sum::<usize>()
        + 4
        + 4 * n_samples
}

/// Exact size of the encoded Jacobian message.
pub fn jacobian_message_bytes(cj: &CompressedJacobian, codec: Codec) -> usize {
    let names: Vec<&str> = cj.layers.iter().map(|(n, _)| n.as_str()).collect();
    let payload: usize = cj
        .layers
        .iter()
        .map(|(_, t)| t.len() * codec.bytes_per_entry())
        .sum();
    header_bytes(&names, codec, cj.sample_indices.len()) + payload
}

/// Exact size of the logits block for `rows` samples and `c` classes.
pub fn logits_message_bytes(rows: usize, c: usize) -> usize {
    4 + 4 + rows + rows * c * 4
}

/// Total bytes for one directed message: Jacobian payload + logits payload
/// + headers (sample indices and labels are counted with the headers).
pub fn comm_bytes(cj: &CompressedJacobian, logits_rows: usize, c: usize, codec: Codec) -> usize {
    jacobian_message_bytes(cj, codec) + logits_message_bytes(logits_rows, c)
}

fn f16_max() -> f64 {
    f64::from(half::f16::MAX)
}

/// Encodes the Jacobian message in the requested precision.
pub fn encode_wire(cj: &CompressedJacobian, codec: Codec) -> Result<(Vec<u8>, EncodeStats)> {
    let mut stats = EncodeStats::default();
    let mut buf = Vec::with_capacity(jacobian_message_bytes(cj, codec));
    buf.extend_from_slice(JACOBIAN_MAGIC);
    put_u16(&mut buf, WIRE_VERSION);
    put_u32(&mut buf, cj.owner_client as u32);
    buf.push(codec.tag());
    put_u16(&mut buf, cj.layers.len() as u16);
    let mut scales = Vec::with_capacity(cj.layers.len());
    for (name, t) in &cj.layers {
        put_u16(&mut buf, name.len() as u16);
        buf.extend_from_slice(name.as_bytes());
        let sh = t.shape();
        put_u32(&mut buf, sh[0] as u32);
        put_u32(&mut buf, sh[1] as u32);
        put_u32(&mut buf, sh[2] as u32);
        if codec == Codec::I8 {
            let max_abs = t.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            let scale = (max_abs / 127.0) as f32;
            put_f32(&mut buf, scale);
            scales.push(scale as f64);
        }
    }
    put_u32(&mut buf, cj.sample_indices.len() as u32);
    for &idx in &cj.sample_indices {
        put_u32(&mut buf, idx);
    }
    for (li, (_, t)) in cj.layers.iter().enumerate() {
        match codec {
            Codec::F64 => {
                for &v in t.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Codec::F32 => {
                for &v in t.iter() {
                    put_f32(&mut buf, v as f32);
                }
            }
            Codec::F16 => {
                let max = f16_max();
                for &v in t.iter() {
                    let clamped = if v.is_finite() && v.abs() > max {
                        stats.clamped += 1;
                        max.copysign(v)
                    } else {
                        v
                    };
                    let h = half::f16::from_f64(clamped);
                    buf.extend_from_slice(&h.to_le_bytes());
                }
            }
            Codec::I8 => {
                let scale = scales[li];
                for &v in t.iter() {
                    let q = if scale == 0.0 {
                        0i8
                    } else {
                        (v / scale).round().clamp(-127.0, 127.0) as i8
                    };
                    buf.push(q as u8);
                }
            }
        }
    }
    debug_assert_eq!(buf.len(), jacobian_message_bytes(cj, codec));
    Ok((buf, stats))
}

/// Decodes a Jacobian message back to f64 tensors.
pub fn decode_wire(bytes: &[u8]) -> Result<CompressedJacobian> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != JACOBIAN_MAGIC {
        return Err(SparkError::parse(0, "bad magic, expected SPKJ"));
    }
    let version = r.u16()?;
    if version != WIRE_VERSION {
        return Err(SparkError::parse(4, format!("unsupported wire version {version}")));
    }
    let owner = r.u32()? as usize;
    let codec = Codec::from_tag(r.u8()?)
        .ok_or_else(|| SparkError::parse(10, "unknown codec tag"))?;
    let n_layers = r.u16()? as usize;
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| SparkError::parse(r.pos, "layer name is not utf-8"))?;
        let n = r.u32()? as usize;
        let c = r.u32()? as usize;
        let k = r.u32()? as usize;
        let scale = if codec == Codec::I8 { r.f32()? as f64 } else { 0.0 };
        shapes.push((name, n, c, k, scale));
    }
    let n_samples = r.u32()? as usize;
    let mut sample_indices = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        sample_indices.push(r.u32()?);
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (name, n, c, k, scale) in shapes {
        let count = n * c * k;
        let mut vals = Vec::with_capacity(count);
        match codec {
            Codec::F64 => {
                let raw = r.take(count * 8)?;
                for ch in raw.chunks_exact(8) {
                    vals.push(f64::from_le_bytes(ch.try_into().unwrap()));
                }
            }
            Codec::F32 => {
                let raw = r.take(count * 4)?;
                for ch in raw.chunks_exact(4) {
                    vals.push(f64::from(f32::from_le_bytes(ch.try_into().unwrap())));
                }
            }
            Codec::F16 => {
                let raw = r.take(count * 2)?;
                for ch in raw.chunks_exact(2) {
                    vals.push(f64::from(half::f16::from_le_bytes(ch.try_into().unwrap())));
                }
            }
            Codec::I8 => {
                let raw = r.take(count)?;
                for &b in raw {
                    vals.push(f64::from(b as i8) * scale);
                }
            }
        }
        let tensor = Array3::from_shape_vec((n, c, k), vals)
            .map_err(|e| SparkError::parse(r.pos, format!("bad tensor shape: {e}")))?;
        layers.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(SparkError::parse(r.pos, "trailing bytes after payload"));
    }
    Ok(CompressedJacobian { layers, owner_client: owner, sample_indices, codec })
}

/// Encodes the logits block (labels ride along, one byte per row).
pub fn encode_logits(logits: &Array2<f64>, labels: &[u8]) -> Result<Vec<u8>> {
    if logits.nrows() != labels.len() {
        return Err(SparkError::contract(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let mut buf = Vec::with_capacity(logits_message_bytes(logits.nrows(), logits.ncols()));
    put_u32(&mut buf, logits.nrows() as u32);
    put_u32(&mut buf, logits.ncols() as u32);
    buf.extend_from_slice(labels);
    for &v in logits.iter() {
        put_f32(&mut buf, v as f32);
    }
    debug_assert_eq!(buf.len(), logits_message_bytes(logits.nrows(), logits.ncols()));
    Ok(buf)
}

pub fn decode_logits(bytes: &[u8]) -> Result<(Array2<f64>, Vec<u8>)> {
    let mut r = Reader::new(bytes);
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let labels = r.take(rows)?.to_vec();
    let raw = r.take(rows * cols * 4)?;
    let vals: Vec<f64> = raw
        .chunks_exact(4)
        .map(|ch| f64::from(f32::from_le_bytes(ch.try_into().unwrap())))
        .collect();
    let logits = Array2::from_shape_vec((rows, cols), vals)
        .map_err(|e| SparkError::parse(r.pos, format!("bad logits shape: {e}")))?;
    Ok((logits, labels))
}

/// Fraction of Jacobian traffic saved relative to shipping the full
/// (identity-projection) Jacobian in the same codec, headers included.
pub fn jacobian_reduction(n: usize, c: usize, total_width: usize, total_dim: usize,
                          layer_names: &[&str], codec: Codec, n_samples: usize) -> f64 {
    let header = header_bytes(layer_names, codec, n_samples) as f64;
    let compressed = header + (n * c * total_width * codec.bytes_per_entry()) as f64;
    let full = header + (n * c * total_dim * codec.bytes_per_entry()) as f64;
    1.0 - compressed / full
}
