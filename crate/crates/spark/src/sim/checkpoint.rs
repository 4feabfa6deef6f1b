//! Round-boundary checkpoints in a small versioned binary container.
//!
//! Layout (little-endian): magic "SPKC", version u16, completed round u32,
//! run seed u64, client count u32, weight dimension u64, then per client the
//! weight vector and the velocity vector as f64 arrays. All round-level
//! randomness is derived statelessly from the run seed and round index, so
//! no generator state needs to be persisted for bit-compatible resumption.

use std::path::Path;

use ndarray::Array1;

use crate::error::{Result, SparkError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPKC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Rounds completed so far; resumption starts at `round + 1`.
    pub round: usize,
    pub seed: u64,
    pub weights: Vec<Array1<f64>>,
    pub velocities: Vec<Array1<f64>>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.weights.len() != self.velocities.len() {
            return Err(SparkError::Checkpoint(format!(
                "{} weight vectors but {} velocities",
                self.weights.len(),
                self.velocities.len()
            )));
        }
        let dim = self.weights.first().map_or(0, Array1::len);
        for (i, v) in self.weights.iter().chain(&self.velocities).enumerate() {
            if v.len() != dim {
                return Err(SparkError::Checkpoint(format!(
                    "vector {i} has length {}, expected {dim}",
                    v.len()
                )));
            }
        }
        let mut out = Vec::with_capacity(32 + self.weights.len() * dim * 16);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.round as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u64).to_le_bytes());
        for v in self.weights.iter().chain(&self.velocities) {
            for &x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |offset, msg: String| SparkError::Checkpoint(format!("byte {offset}: {msg}"));
        let take = |offset: usize, len: usize| {
            bytes
                .get(offset..offset + len)
                .ok_or_else(|| err(offset, format!("truncated ({len} bytes needed)")))
        };
        if take(0, 4)? != CHECKPOINT_MAGIC {
            return Err(err(0, format!("bad magic {:?}", &bytes.get(..4))));
        }
        let version = u16::from_le_bytes(take(4, 2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(err(4, format!(
                "version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let round = u32::from_le_bytes(take(6, 4)?.try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(take(10, 8)?.try_into().unwrap());
        let m = u32::from_le_bytes(take(18, 4)?.try_into().unwrap()) as usize;
        let dim = u64::from_le_bytes(take(22, 8)?.try_into().unwrap()) as usize;
        let mut offset = 30;
        let read_vec = |offset: &mut usize| -> Result<Array1<f64>> {
            let raw = take(*offset, dim * 8)?;
            *offset += dim * 8;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let weights: Vec<Array1<f64>> =
            (0..m).map(|_| read_vec(&mut offset)).collect::<Result<_>>()?;
        let velocities: Vec<Array1<f64>> =
            (0..m).map(|_| read_vec(&mut offset)).collect::<Result<_>>()?;
        if offset != bytes.len() {
            return Err(err(offset, format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self { round, seed, weights, velocities })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
