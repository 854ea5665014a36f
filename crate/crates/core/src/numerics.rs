//! Number formats of the simulated accelerator.
//!
//! Every datapath value is carried as an `f64` that lies exactly on the grid
//! of its storage format. Arithmetic units compute in `f64` and round once to
//! the destination format. Registers are re-encoded to raw bit patterns only
//! when a fault is injected.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest finite bfloat16, `(2 - 2^-7) * 2^127`.
pub const BF16_MAX: f64 = 3.389_531_389_251_535_5e38;
const BF16_MIN_NORMAL_EXP: i32 = -126;
const BF16_MANTISSA_BITS: i32 = 7;

/// Exact power of two for exponents in the normal `f64` range.
fn pow2(exp: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&exp));
    f64::from_bits(((exp + 1023) as u64) << 52)
}

/// Rounds to the bfloat16 grid with round-to-nearest-even, returning the
/// value as an `f64`. Overflow saturates to infinity; NaN becomes the
/// canonical quiet NaN.
fn round_bf16_value(x: f64, flush_subnormals: bool) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x.is_infinite() || x == 0.0 {
        return x;
    }
    let a = x.abs();
    let biased = ((a.to_bits() >> 52) & 0x7ff) as i32;
    let exp = (biased - 1023).max(BF16_MIN_NORMAL_EXP);
    let quantum = exp - BF16_MANTISSA_BITS;
    // a * 2^-quantum lies below 2^8, so the scaling and the rounding are exact
    let units = (a * pow2(-quantum)).round_ties_even();
    let r = units * pow2(quantum);
    let r = if r > BF16_MAX {
        f64::INFINITY
    } else if flush_subnormals && r < pow2(BF16_MIN_NORMAL_EXP) {
        0.0
    } else {
        r
    };
    r.copysign(x)
}

/// A bfloat16 value stored as its raw 16-bit pattern
/// (1 sign bit, 8 exponent bits, 7 mantissa bits).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Bf16(u16);

impl Bf16 {
    pub const ZERO: Bf16 = Bf16(0x0000);
    pub const ONE: Bf16 = Bf16(0x3F80);
    pub const INFINITY: Bf16 = Bf16(0x7F80);
    pub const NEG_INFINITY: Bf16 = Bf16(0xFF80);
    /// Canonical quiet NaN produced by every operation.
    pub const NAN: Bf16 = Bf16(0x7FC0);

    pub const fn from_bits(bits: u16) -> Self {
        Bf16(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Exact widening; NaN patterns decode to the canonical `f64` NaN.
    pub fn to_f64(self) -> f64 {
        if self.is_nan() {
            return f64::NAN;
        }
        f32::from_bits((self.0 as u32) << 16) as f64
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7F80 == 0x7F80 && self.0 & 0x007F != 0
    }

    pub fn is_finite(self) -> bool {
        self.0 & 0x7F80 != 0x7F80
    }

    fn from_grid_value(r: f64) -> Self {
        if r.is_nan() {
            return Bf16::NAN;
        }
        // grid values are exact in f32 and bf16 is the upper half of the f32 pattern
        Bf16(((r as f32).to_bits() >> 16) as u16)
    }
}

impl fmt::Debug for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bf16({:#06x} = {})", self.0, self.to_f64())
    }
}

impl From<Bf16> for f64 {
    fn from(v: Bf16) -> f64 {
        v.to_f64()
    }
}

/// Round-to-nearest-even conversion from `f64`. Total: `±inf` maps to
/// `±inf`, overflow saturates to infinity, NaN maps to [`Bf16::NAN`].
pub fn round_to_bf16(x: f64) -> Bf16 {
    Bf16::from_grid_value(round_bf16_value(x, false))
}

/// Operations of the bfloat16 datapath. `Exp` is the only unary unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bf16Op {
    Add(Bf16, Bf16),
    Mul(Bf16, Bf16),
    Div(Bf16, Bf16),
    Max(Bf16, Bf16),
    Exp(Bf16),
}

/// Evaluates the operation exactly in `f64` and rounds once to bfloat16.
pub fn bf16_op(op: Bf16Op) -> Bf16 {
    let exact = match op {
        Bf16Op::Add(a, b) => a.to_f64() + b.to_f64(),
        Bf16Op::Mul(a, b) => a.to_f64() * b.to_f64(),
        Bf16Op::Div(a, b) => a.to_f64() / b.to_f64(),
        Bf16Op::Max(a, b) => nan_max(a.to_f64(), b.to_f64()),
        Bf16Op::Exp(a) => a.to_f64().exp(),
    };
    round_to_bf16(exact)
}

/// `max` with IEEE NaN propagation (unlike `f64::max`, which drops NaN).
pub fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else if a >= b {
        a
    } else {
        b
    }
}

/// Storage formats available to the datapath and accumulators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Bf16,
    Fp32,
    Fp64,
}

impl Format {
    pub const fn bits(self) -> u32 {
        match self {
            Format::Bf16 => 16,
            Format::Fp32 => 32,
            Format::Fp64 => 64,
        }
    }

    pub const fn bytes(self) -> usize {
        self.bits() as usize / 8
    }

    /// Rounds to the nearest value of this format (ties to even). NaN is
    /// canonicalized, overflow goes to infinity.
    pub fn round(self, x: f64, flush_subnormals: bool) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        match self {
            Format::Bf16 => round_bf16_value(x, flush_subnormals),
            Format::Fp32 => {
                let r = x as f32;
                if flush_subnormals && r.is_subnormal() {
                    0.0f64.copysign(x)
                } else {
                    r as f64
                }
            }
            Format::Fp64 => {
                if flush_subnormals && x.is_subnormal() {
                    0.0f64.copysign(x)
                } else {
                    x
                }
            }
        }
    }

    /// Raw bit pattern of a value (rounded first if it is off-grid).
    pub fn encode(self, x: f64) -> BitPattern {
        let bits = match self {
            Format::Bf16 => round_to_bf16(x).to_bits() as u64,
            Format::Fp32 => {
                if x.is_nan() {
                    0x7FC0_0000
                } else {
                    (x as f32).to_bits() as u64
                }
            }
            Format::Fp64 => {
                if x.is_nan() {
                    f64::NAN.to_bits()
                } else {
                    x.to_bits()
                }
            }
        };
        BitPattern {
            bits,
            width: self.bits(),
        }
    }

    /// Decodes a raw pattern of this format's width. Any NaN pattern
    /// decodes to the canonical NaN.
    pub fn decode(self, pattern: BitPattern) -> f64 {
        debug_assert_eq!(pattern.width, self.bits());
        let v = match self {
            Format::Bf16 => Bf16::from_bits(pattern.bits as u16).to_f64(),
            Format::Fp32 => f32::from_bits(pattern.bits as u32) as f64,
            Format::Fp64 => f64::from_bits(pattern.bits),
        };
        if v.is_nan() {
            f64::NAN
        } else {
            v
        }
    }

    /// Element format code used by matrix files.
    pub const fn code(self) -> u16 {
        match self {
            Format::Bf16 => 1,
            Format::Fp32 => 2,
            Format::Fp64 => 3,
        }
    }

    pub fn from_code(code: u16) -> Option<Format> {
        match code {
            1 => Some(Format::Bf16),
            2 => Some(Format::Fp32),
            3 => Some(Format::Fp64),
            _ => None,
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Bf16 => "bf16",
            Format::Fp32 => "fp32",
            Format::Fp64 => "fp64",
        })
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bf16" => Ok(Format::Bf16),
            "fp32" | "f32" => Ok(Format::Fp32),
            "fp64" | "f64" => Ok(Format::Fp64),
            other => Err(Error::Config(format!("unknown number format `{other}`"))),
        }
    }
}

/// A fixed-width bit string of at most 64 bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BitPattern {
    bits: u64,
    width: u32,
}

impl BitPattern {
    pub fn new(bits: u64, width: u32) -> Result<Self> {
        if width == 0 || width > 64 || (width < 64 && bits >> width != 0) {
            return Err(Error::Config(format!(
                "pattern {bits:#x} does not fit in {width} bits"
            )));
        }
        Ok(BitPattern { bits, width })
    }

    pub const fn bits(self) -> u64 {
        self.bits
    }

    pub const fn width(self) -> u32 {
        self.width
    }

    /// Inverts exactly bit `index` (0 = least significant).
    pub fn flip_bit(self, index: u32) -> Result<Self> {
        if index >= self.width {
            return Err(Error::BitIndex {
                index,
                width: self.width,
            });
        }
        Ok(BitPattern {
            bits: self.bits ^ (1u64 << index),
            width: self.width,
        })
    }
}

/// Free-function form of [`BitPattern::flip_bit`].
pub fn flip_bit(pattern: BitPattern, index: u32) -> Result<BitPattern> {
    pattern.flip_bit(index)
}

/// Formats used by one kernel run. Checksum accumulators are always `f64`
/// and are not configurable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrecisionPolicy {
    /// Query/key/value storage, scores, exponentials.
    pub datapath: Format,
    /// Output accumulators `o` and the normalized output.
    pub output_accum: Format,
    /// Running max `m` and sum of exponentials `ell`.
    pub stats: Format,
    #[serde(default)]
    pub flush_subnormals: bool,
}

impl PrecisionPolicy {
    pub const CHECKSUM_FORMAT: Format = Format::Fp64;

    pub const fn uniform(format: Format) -> Self {
        PrecisionPolicy {
            datapath: format,
            output_accum: format,
            stats: format,
            flush_subnormals: false,
        }
    }

    pub const fn fp64() -> Self {
        Self::uniform(Format::Fp64)
    }

    /// bfloat16 arithmetic with `f32` output accumulators.
    pub const fn bf16() -> Self {
        PrecisionPolicy {
            datapath: Format::Bf16,
            output_accum: Format::Fp32,
            stats: Format::Bf16,
            flush_subnormals: false,
        }
    }

    pub const fn checksum_format(&self) -> Format {
        Self::CHECKSUM_FORMAT
    }

    pub fn round_datapath(&self, x: f64) -> f64 {
        self.datapath.round(x, self.flush_subnormals)
    }

    pub fn round_accum(&self, x: f64) -> f64 {
        self.output_accum.round(x, self.flush_subnormals)
    }

    pub fn round_stats(&self, x: f64) -> f64 {
        self.stats.round(x, self.flush_subnormals)
    }
}

impl Default for PrecisionPolicy {
    fn default() -> Self {
        Self::bf16()
    }
}

impl fmt::Display for PrecisionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.datapath, self.output_accum)?;
        if self.stats != self.datapath {
            write!(f, ":{}", self.stats)?;
        }
        Ok(())
    }
}

impl FromStr for PrecisionPolicy {
    type Err = Error;

    /// Accepts `fp64`, `fp32`, `bf16` (bf16 datapath, fp32 accumulators), or
    /// an explicit `datapath:accum[:stats]` triple such as `bf16:bf16`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["bf16"] => Ok(Self::bf16()),
            [one] => Ok(Self::uniform(one.parse()?)),
            [dp, acc] => {
                let datapath: Format = dp.parse()?;
                Ok(PrecisionPolicy {
                    datapath,
                    output_accum: acc.parse()?,
                    stats: datapath,
                    flush_subnormals: false,
                })
            }
            [dp, acc, st] => Ok(PrecisionPolicy {
                datapath: dp.parse()?,
                output_accum: acc.parse()?,
                stats: st.parse()?,
                flush_subnormals: false,
            }),
            _ => Err(Error::Config(format!("unrecognized precision policy `{s}`"))),
        }
    }
}
