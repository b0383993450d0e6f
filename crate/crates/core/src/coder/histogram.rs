//! Laplace-smoothed per-channel symbol tables.
//!
//! Each channel covers the observed integer range widened by [`MARGIN`]
//! symbols on both sides, plus one escape symbol. Every entry gets
//! `smoothing` extra counts. Counts are then quantized to frequencies summing
//! to [`FREQ_TOTAL`], each at least 1.

use super::range::{RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;
pub const MARGIN: i32 = 2;
/// Largest support kept per channel; rarer tail symbols are escaped.
pub const MAX_SUPPORT: usize = 4096;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelTable {
    lo: i32,
    /// Smoothed counts for `lo..lo + counts.len()`.
    counts: Vec<u64>,
    escape_count: u64,
    /// Quantized frequencies; the last entry is the escape symbol.
    freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl ChannelTable {
    pub fn from_counts(lo: i32, counts: Vec<u64>, escape_count: u64) -> Result<Self> {
        if counts.is_empty() || counts.len() > MAX_SUPPORT {
            return Err(Error::InvalidArgument(format!(
                "channel support size {} outside 1..={MAX_SUPPORT}",
                counts.len()
            )));
        }
        if lo.checked_add(counts.len() as i32).is_none() {
            return Err(Error::InvalidArgument("channel support overflows i32".into()));
        }
        if counts.iter().any(|&c| c == 0) || escape_count == 0 {
            return Err(Error::InvalidArgument("all smoothed counts must be positive".into()));
        }
        let mut all = counts.clone();
        all.push(escape_count);
        let freqs = quantize_counts(&all, FREQ_TOTAL);
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in &freqs {
            acc += f;
            cum.push(acc);
        }
        Ok(Self {
            lo,
            counts,
            escape_count,
            freqs,
            cum,
        })
    }

    pub fn support(&self) -> (i32, i32) {
        (self.lo, self.lo + self.counts.len() as i32 - 1)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn escape_count(&self) -> u64 {
        self.escape_count
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    fn index(&self, z: i32) -> Option<usize> {
        let i = i64::from(z) - i64::from(self.lo);
        (i >= 0 && (i as usize) < self.counts.len()).then_some(i as usize)
    }

    fn escape_index(&self) -> usize {
        self.counts.len()
    }

    /// Probability the coder assigns to the table entry for `z` (escape
    /// entry when out of support).
    pub fn probability(&self, z: i32) -> f64 {
        let i = self.index(z).unwrap_or(self.escape_index());
        f64::from(self.freqs[i]) / f64::from(FREQ_TOTAL)
    }

    /// Ideal code length of `z` in bits, including the raw escape payload.
    pub fn bits(&self, z: i32) -> f64 {
        let raw = if self.index(z).is_some() { 0.0 } else { 32.0 };
        -self.probability(z).log2() + raw
    }

    pub fn encode(&self, enc: &mut RangeEncoder, z: i32) {
        match self.index(z) {
            Some(i) => enc.encode(self.cum[i], self.freqs[i], FREQ_TOTAL),
            None => {
                let e = self.escape_index();
                enc.encode(self.cum[e], self.freqs[e], FREQ_TOTAL);
                let u = zigzag(z);
                enc.encode_bits(u >> 16, 16);
                enc.encode_bits(u & 0xFFFF, 16);
            }
        }
    }

    pub fn decode(&self, dec: &mut RangeDecoder<'_>) -> Result<i32> {
        let target = dec.peek(FREQ_TOTAL)?;
        // last i with cum[i] <= target
        let i = self.cum.partition_point(|&c| c <= target) - 1;
        dec.consume(self.cum[i], self.freqs[i], FREQ_TOTAL)?;
        if i < self.escape_index() {
            return Ok(self.lo + i as i32);
        }
        let hi = dec.decode_bits(16)?;
        let lo = dec.decode_bits(16)?;
        let z = unzigzag((hi << 16) | lo);
        if self.index(z).is_some() {
            return Err(dec.corrupt("escaped symbol lies inside the table support"));
        }
        Ok(z)
    }
}

fn zigzag(z: i32) -> u32 {
    ((z << 1) ^ (z >> 31)) as u32
}

fn unzigzag(u: u32) -> i32 {
    ((u >> 1) as i32) ^ -((u & 1) as i32)
}

/// Scale positive counts to integers `≥ 1` summing exactly to `total`.
fn quantize_counts(counts: &[u64], total: u32) -> Vec<u32> {
    let sum: u128 = counts.iter().map(|&c| u128::from(c)).sum();
    let mut f: Vec<u32> = counts
        .iter()
        .map(|&c| ((u128::from(c) * u128::from(total) / sum) as u32).max(1))
        .collect();
    let assigned: i64 = f.iter().map(|&x| i64::from(x)).sum();
    let mut diff = i64::from(total) - assigned;
    // order by count, largest first, ties by index
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    if diff > 0 {
        f[order[0]] += diff as u32;
    }
    while diff < 0 {
        let mut moved = false;
        for &i in &order {
            if diff == 0 {
                break;
            }
            if f[i] > 1 {
                f[i] -= 1;
                diff += 1;
                moved = true;
            }
        }
        assert!(moved, "support larger than frequency total");
    }
    f
}

/// Per-channel tables for one (model, scale set) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolHistogram {
    channels: Vec<ChannelTable>,
}

impl SymbolHistogram {
    pub fn from_tables(channels: Vec<ChannelTable>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::InvalidArgument("histogram needs at least one channel".into()));
        }
        Ok(Self { channels })
    }

    /// Fit tables to integer codes of shape `(C, h, w)`.
    pub fn build(codes: &[Tensor], smoothing: u64) -> Result<Self> {
        let first = codes
            .first()
            .ok_or_else(|| Error::InvalidArgument("no codes to build histograms from".into()))?;
        if smoothing == 0 {
            return Err(Error::InvalidArgument("smoothing must be at least 1".into()));
        }
        let channels = first.chw()?.0;
        let mut observed: Vec<std::collections::BTreeMap<i32, u64>> = vec![Default::default(); channels];
        for t in codes {
            let (c, h, w) = t.chw()?;
            if c != channels {
                return Err(Error::ShapeMismatch {
                    op: "build_histograms",
                    left: first.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            for (ch, plane) in t.data().chunks(h * w).enumerate() {
                for &v in plane {
                    let z = to_symbol(v)?;
                    *observed[ch].entry(z).or_default() += 1;
                }
            }
        }
        let tables = observed
            .into_iter()
            .map(|hist| {
                let (mut lo, mut hi) = match (hist.keys().next(), hist.keys().next_back()) {
                    (Some(&a), Some(&b)) => (a, b),
                    _ => (0, 0),
                };
                lo = lo.saturating_sub(MARGIN);
                hi = hi.saturating_add(MARGIN);
                // drop the thinner tail until the support fits
                while (i64::from(hi) - i64::from(lo) + 1) as usize > MAX_SUPPORT {
                    let cl = hist.get(&lo).copied().unwrap_or(0);
                    let ch = hist.get(&hi).copied().unwrap_or(0);
                    if cl <= ch {
                        lo += 1;
                    } else {
                        hi -= 1;
                    }
                }
                let counts: Vec<u64> = (lo..=hi)
                    .map(|z| hist.get(&z).copied().unwrap_or(0) + smoothing)
                    .collect();
                ChannelTable::from_counts(lo, counts, smoothing)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { channels: tables })
    }

    pub fn channels(&self) -> usize {
        self.channels.len()
    }

    pub fn table(&self, c: usize) -> &ChannelTable {
        &self.channels[c]
    }

    pub fn tables(&self) -> &[ChannelTable] {
        &self.channels
    }

    /// Ideal code length in bits of `codes` under these tables, skipping
    /// channels where `active` is false.
    pub fn cross_entropy_bits(&self, codes: &Tensor, active: &[bool]) -> Result<f64> {
        let (c, h, w) = codes.chw()?;
        if c != self.channels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_bits",
                left: codes.shape().to_vec(),
                right: vec![self.channels.len()],
            });
        }
        let mut bits = 0.0;
        for (ch, plane) in codes.data().chunks(h * w).enumerate() {
            if !active[ch] {
                continue;
            }
            for &v in plane {
                bits += self.channels[ch].bits(to_symbol(v)?);
            }
        }
        Ok(bits)
    }
}

/// Integer symbol for a code value; rejects non-integers and overflow.
pub fn to_symbol(v: f64) -> Result<i32> {
    if v.fract() != 0.0 || !(f64::from(i32::MIN)..=f64::from(i32::MAX)).contains(&v) {
        return Err(Error::InvalidArgument(format!("code value {v} is not a 32-bit integer")));
    }
    Ok(v as i32)
}
