//! Blockwise 4-bit NormalFloat quantization.
//!
//! Each block of 64 values stores one FP32 absmax scale and 64 4-bit codes
//! indexing [`NF4_LEVELS`], packed two per byte (low nibble first).

use crate::error::{Error, Result};

pub const BLOCK_LEN: usize = 64;
pub const BLOCK_BYTES: usize = BLOCK_LEN / 2 + 4;

/// Normal-quantile codebook, normalized to `[-1, 1]`, with an exact zero.
/// Seven negative levels from quantiles of `linspace(0.9677, 0.5, 8)`, eight
/// positive from `linspace(0.9677, 0.5, 9)`.
#[allow(clippy::excessive_precision)]
pub const NF4_LEVELS: [f32; 16] = [
    -1.0,
    -0.696_192_800_998_687_7,
    -0.525_073_051_452_636_7,
    -0.394_917_488_098_144_53,
    -0.284_441_381_692_886_35,
    -0.184_773_430_228_233_34,
    -0.091_050_036_251_544_95,
    0.0,
    0.079_580_299_556_255_34,
    0.160_930_201_411_247_25,
    0.246_112_301_945_686_34,
    0.337_915_241_718_292_24,
    0.440_709_829_330_444_34,
    0.562_617_003_917_694_1,
    0.722_956_836_223_602_3,
    1.0,
];

pub const ZERO_CODE: u8 = 7;

/// Largest distance between neighbouring levels.
pub fn max_level_gap() -> f32 {
    NF4_LEVELS
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f32::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nf4Block {
    pub codes: [u8; BLOCK_LEN / 2],
    pub scale: f32,
}

impl Nf4Block {
    pub fn code(&self, i: usize) -> u8 {
        let byte = self.codes[i / 2];
        if i.is_multiple_of(2) {
            byte & 0x0f
        } else {
            byte >> 4
        }
    }

    pub fn to_bytes(&self) -> [u8; BLOCK_BYTES] {
        let mut out = [0u8; BLOCK_BYTES];
        out[..BLOCK_LEN / 2].copy_from_slice(&self.codes);
        out[BLOCK_LEN / 2..].copy_from_slice(&self.scale.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != BLOCK_BYTES {
            return Err(Error::Format {
                what: "NF4 block",
                detail: format!("expected {BLOCK_BYTES} bytes, got {}", bytes.len()),
            });
        }
        let mut codes = [0u8; BLOCK_LEN / 2];
        codes.copy_from_slice(&bytes[..BLOCK_LEN / 2]);
        let scale = f32::from_le_bytes(bytes[BLOCK_LEN / 2..].try_into().expect("4 bytes"));
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::Format {
                what: "NF4 block",
                detail: format!("invalid scale {scale}"),
            });
        }
        Ok(Self { codes, scale })
    }
}

/// Index of the level nearest to `v`; an exact midpoint goes to the lower index.
pub fn nearest_level(v: f32) -> u8 {
    // Levels are sorted, so the answer is the number of midpoints strictly below v.
    let mut code = 0u8;
    for w in NF4_LEVELS.windows(2) {
        let mid = (w[0] + w[1]) * 0.5;
        if v > mid {
            code += 1;
        } else {
            break;
        }
    }
    code
}

/// Quantizes up to 64 values; missing tail entries are treated as zeros.
pub fn quantize_block(vals: &[f32]) -> Result<Nf4Block> {
    if vals.len() > BLOCK_LEN {
        return Err(Error::InvalidArgument(format!(
            "NF4 block holds {BLOCK_LEN} values, got {}",
            vals.len()
        )));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("nf4_quantize_block"));
    }
    let scale = vals.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let mut codes = [ZERO_CODE | (ZERO_CODE << 4); BLOCK_LEN / 2];
    if scale > 0.0 {
        for (i, v) in vals.iter().enumerate() {
            let c = nearest_level(v / scale);
            let byte = &mut codes[i / 2];
            if i % 2 == 0 {
                *byte = (*byte & 0xf0) | c;
            } else {
                *byte = (*byte & 0x0f) | (c << 4);
            }
        }
    }
    Ok(Nf4Block { codes, scale })
}

pub fn dequantize_block(block: &Nf4Block) -> [f32; BLOCK_LEN] {
    let mut out = [0.0f32; BLOCK_LEN];
    for (i, o) in out.iter_mut().enumerate() {
        *o = NF4_LEVELS[block.code(i) as usize] * block.scale;
    }
    out
}

pub fn blocks_for(len: usize) -> usize {
    len.div_ceil(BLOCK_LEN)
}

/// Quantizes a payload block by block; the last block is zero-padded.
pub fn quantize(vals: &[f32]) -> Result<Vec<Nf4Block>> {
    vals.chunks(BLOCK_LEN).map(quantize_block).collect()
}

/// Inverse of [`quantize`]; padding beyond `len` is dropped.
pub fn dequantize(blocks: &[Nf4Block], len: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(blocks.len() * BLOCK_LEN);
    for b in blocks {
        out.extend_from_slice(&dequantize_block(b));
    }
    out.truncate(len);
    out
}
