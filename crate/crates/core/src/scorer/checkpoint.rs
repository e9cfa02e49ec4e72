//! Binary checkpoint format.
//!
//! ```text
//! "MPAK"                      magic
//! u32                         format version
//! repeated tensor records:    u32 name length, UTF-8 name, u32 rank,
//!                             rank x u32 dims, f32 data
//! u32 0                       end of records
//! trailer:                    u64 epoch, 32-byte rng seed, u64 rng stream,
//!                             u128 rng word position, u32 config length,
//!                             config JSON, u64 config fingerprint
//! ```
//!
//! All integers and floats are little-endian. Parameter records come first in
//! storage order, followed by one `velocity/<name>` record per parameter.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{OptimizerState, Scorer, ScorerConfig, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MPAK";
pub const CHECKPOINT_VERSION: u32 = 1;

const VELOCITY_PREFIX: &str = "velocity/";

/// Resumable position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub scorer: Scorer<f32>,
    pub optimizer: OptimizerState<f32>,
    pub epoch: u64,
    pub rng: RngState,
}

/// First eight bytes of the SHA-256 of the config JSON.
fn fingerprint(config_json: &[u8]) -> u64 {
    let digest = Sha256::digest(config_json);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

fn write_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    /// A fresh checkpoint: zero velocities, epoch 0.
    pub fn new(scorer: Scorer<f32>, rng: &ChaCha8Rng) -> Self {
        let optimizer = OptimizerState::new(&scorer);
        Checkpoint {
            scorer,
            optimizer,
            epoch: 0,
            rng: RngState::capture(rng),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for t in self.scorer.parameters() {
            write_record(&mut out, &t.name, &t.dims, &t.data);
        }
        if self.optimizer.velocities.len() != self.scorer.parameters().len() {
            return Err(Error::mismatch(
                self.scorer.parameters().len(),
                self.optimizer.velocities.len(),
            ));
        }
        for (t, v) in self
            .scorer
            .parameters()
            .iter()
            .zip(&self.optimizer.velocities)
        {
            if v.len() != t.data.len() {
                return Err(Error::mismatch(t.data.len(), v.len()));
            }
            write_record(
                &mut out,
                &format!("{VELOCITY_PREFIX}{}", t.name),
                &t.dims,
                v,
            );
        }
        out.extend_from_slice(&0u32.to_le_bytes());

        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let config = serde_json::to_vec(self.scorer.config())?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&fingerprint(&config).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing MPAK magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let mut params = Vec::new();
        let mut velocities = Vec::new();
        loop {
            let name_len = r.u32()? as usize;
            if name_len == 0 {
                break;
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
                .to_owned();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let data = (0..len).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            if let Some(param) = name.strip_prefix(VELOCITY_PREFIX) {
                velocities.push((param.to_owned(), data));
            } else {
                params.push(Tensor { name, dims, data });
            }
        }
        let epoch = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let config_len = r.u32()? as usize;
        let config_bytes = r.take(config_len)?;
        let stored = r.u64()?;
        if fingerprint(config_bytes) != stored {
            return Err(Error::Format("config fingerprint does not match".into()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after trailer",
                bytes.len() - r.pos
            )));
        }
        let config: ScorerConfig = serde_json::from_slice(config_bytes)?;
        let scorer =
            Scorer::from_parameters(config, params).map_err(|e| Error::Format(e.to_string()))?;
        if velocities.len() != scorer.parameters().len() {
            return Err(Error::Format(format!(
                "expected {} velocity records, found {}",
                scorer.parameters().len(),
                velocities.len()
            )));
        }
        let mut ordered = Vec::with_capacity(velocities.len());
        for (t, (name, v)) in scorer.parameters().iter().zip(velocities) {
            if t.name != name || t.data.len() != v.len() {
                return Err(Error::Format(format!(
                    "velocity record {name} does not match {}",
                    t.name
                )));
            }
            ordered.push(v);
        }
        Ok(Checkpoint {
            scorer,
            optimizer: OptimizerState {
                velocities: ordered,
            },
            epoch,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}
