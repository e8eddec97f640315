//! Index-keyed forward cache for frozen-network activations.
//!
//! Entry layout is `[x1 | x2 | x3 | x4 | base logits]` (1790 floats for the
//! LeNet variants). Entries are write-once; a reader sees either a miss or
//! the complete entry.
//!
//! Spill file layout (little-endian):
//!
//! ```text
//! magic "IFTC" | version u32 | mode u8 (0 = fp32, 1 = nf4) | payload_len u32
//! | stride u32 (bytes per entry) | count u64
//! | count x (present u8, stride bytes)
//! ```

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::nf4::{self, Nf4Block, BLOCK_BYTES};

const SPILL_MAGIC: &[u8; 4] = b"IFTC";
const SPILL_VERSION: u32 = 1;

/// Forward-cache setting of a fine-tuning run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CacheMode {
    Off,
    Fp32,
    Nf4,
}

impl CacheMode {
    pub fn name(self) -> &'static str {
        match self {
            CacheMode::Off => "off",
            CacheMode::Fp32 => "fp32",
            CacheMode::Nf4 => "nf4",
        }
    }
}

impl fmt::Display for CacheMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CacheMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "off" | "none" => Ok(CacheMode::Off),
            "fp32" => Ok(CacheMode::Fp32),
            "nf4" => Ok(CacheMode::Nf4),
            other => Err(Error::Config(format!("unknown cache mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Stored {
    Fp32(Vec<f32>),
    Nf4(Vec<Nf4Block>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CacheReport {
    pub entries: usize,
    pub bytes: usize,
    pub hits: u64,
    pub misses: u64,
    /// FP32-equivalent bytes over stored bytes, per entry.
    pub compression_ratio: f64,
}

#[derive(Debug)]
pub struct ForwardCache {
    mode: CacheMode,
    payload_len: usize,
    entries: Vec<OnceLock<Stored>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ForwardCache {
    /// `mode` must be `Fp32` or `Nf4`.
    pub fn new(mode: CacheMode, capacity: usize, payload_len: usize) -> Result<Self> {
        if mode == CacheMode::Off {
            return Err(Error::InvalidArgument(
                "a forward cache needs fp32 or nf4 storage".into(),
            ));
        }
        Ok(Self {
            mode,
            payload_len,
            entries: (0..capacity).map(|_| OnceLock::new()).collect(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn capacity(&self) -> usize {
        self.entries.len()
    }

    pub fn payload_len(&self) -> usize {
        self.payload_len
    }

    fn slot(&self, index: usize) -> Result<&OnceLock<Stored>> {
        self.entries.get(index).ok_or(Error::CacheIndex {
            index,
            capacity: self.entries.len(),
        })
    }

    fn decode(&self, stored: &Stored) -> Vec<f32> {
        match stored {
            Stored::Fp32(v) => v.clone(),
            Stored::Nf4(blocks) => nf4::dequantize(blocks, self.payload_len),
        }
    }

    /// Returns the (dequantized) payload, or `None` on a miss.
    pub fn get(&self, index: usize) -> Result<Option<Vec<f32>>> {
        match self.slot(index)?.get() {
            Some(stored) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Ok(Some(self.decode(stored)))
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                Ok(None)
            }
        }
    }

    pub fn contains(&self, index: usize) -> bool {
        self.entries.get(index).is_some_and(|s| s.get().is_some())
    }

    /// Stores a payload. Each index may be written once.
    pub fn put(&self, index: usize, payload: &[f32]) -> Result<()> {
        self.put_and_read(index, payload).map(|_| ())
    }

    /// Stores a payload and returns exactly what a later `get` will return,
    /// without touching the hit/miss counters.
    pub fn put_and_read(&self, index: usize, payload: &[f32]) -> Result<Vec<f32>> {
        if payload.len() != self.payload_len {
            return Err(Error::shape(
                "cache_put",
                &[self.payload_len],
                &[payload.len()],
            ));
        }
        let stored = match self.mode {
            CacheMode::Fp32 => {
                if payload.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("cache_put"));
                }
                Stored::Fp32(payload.to_vec())
            }
            _ => Stored::Nf4(nf4::quantize(payload)?),
        };
        let decoded = self.decode(&stored);
        self.slot(index)?
            .set(stored)
            .map_err(|_| Error::InvalidArgument(format!("cache entry {index} written twice")))?;
        Ok(decoded)
    }

    pub fn entry_bytes(&self) -> usize {
        entry_bytes(self.mode, self.payload_len)
    }

    pub fn entries(&self) -> usize {
        self.entries.iter().filter(|s| s.get().is_some()).count()
    }

    pub fn report(&self) -> CacheReport {
        let entries = self.entries();
        CacheReport {
            entries,
            bytes: entries * self.entry_bytes(),
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            compression_ratio: (self.payload_len * 4) as f64 / self.entry_bytes() as f64,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let stride = self.entry_bytes();
        w.write_all(SPILL_MAGIC).map_err(io)?;
        w.write_all(&SPILL_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&[u8::from(self.mode == CacheMode::Nf4)])
            .map_err(io)?;
        w.write_all(&(self.payload_len as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&(stride as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())
            .map_err(io)?;
        let mut buf = Vec::with_capacity(stride);
        for slot in &self.entries {
            buf.clear();
            match slot.get() {
                None => {
                    w.write_all(&[0]).map_err(io)?;
                    buf.resize(stride, 0);
                }
                Some(Stored::Fp32(v)) => {
                    w.write_all(&[1]).map_err(io)?;
                    v.iter()
                        .for_each(|f| buf.extend_from_slice(&f.to_le_bytes()));
                }
                Some(Stored::Nf4(blocks)) => {
                    w.write_all(&[1]).map_err(io)?;
                    blocks
                        .iter()
                        .for_each(|b| buf.extend_from_slice(&b.to_bytes()));
                }
            }
            w.write_all(&buf).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut read = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(|_| Error::Truncated {
                path: path.to_path_buf(),
                detail: "cache spill file".into(),
            })?;
            Ok(buf)
        };
        let bad = |detail: String| Error::Format {
            what: "cache spill file",
            detail,
        };
        if read(4)? != SPILL_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(read(4)?.try_into().expect("4"));
        if version != SPILL_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mode = match read(1)?[0] {
            0 => CacheMode::Fp32,
            1 => CacheMode::Nf4,
            m => return Err(bad(format!("unknown mode {m}"))),
        };
        let payload_len = u32::from_le_bytes(read(4)?.try_into().expect("4")) as usize;
        let stride = u32::from_le_bytes(read(4)?.try_into().expect("4")) as usize;
        let count = u64::from_le_bytes(read(8)?.try_into().expect("8")) as usize;
        if stride != entry_bytes(mode, payload_len) {
            return Err(bad(format!(
                "stride {stride} does not match payload {payload_len}"
            )));
        }
        let cache = ForwardCache::new(mode, count, payload_len)?;
        for slot in &cache.entries {
            let present = read(1)?[0];
            let body = read(stride)?;
            if present == 0 {
                continue;
            }
            let stored = match mode {
                CacheMode::Fp32 => Stored::Fp32(
                    body.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                        .collect(),
                ),
                _ => Stored::Nf4(
                    body.chunks_exact(BLOCK_BYTES)
                        .map(Nf4Block::from_bytes)
                        .collect::<Result<_>>()?,
                ),
            };
            slot.set(stored).expect("fresh slot");
        }
        Ok(cache)
    }
}

/// Stored bytes per entry: raw floats, or 36 bytes per 64-value NF4 block.
pub fn entry_bytes(mode: CacheMode, payload_len: usize) -> usize {
    match mode {
        CacheMode::Off => 0,
        CacheMode::Fp32 => payload_len * 4,
        CacheMode::Nf4 => nf4::blocks_for(payload_len) * BLOCK_BYTES,
    }
}
