//! Histogram-shifting reversible coding over integer host symbols.
//!
//! Symbols live in `[V - 99, V + 99]`. One bit is carried by every symbol
//! equal to the peak; symbols strictly between peak and valley shift up by
//! one to make room, and the valley bin (empty in the host) absorbs the
//! shift.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HsError {
    #[error("payload of {needed} bits exceeds capacity {capacity}")]
    CapacityExceeded { needed: usize, capacity: usize },
    #[error("no empty histogram bin right of any occupied bin")]
    NoValley,
    #[error("host histogram is empty")]
    EmptyHost,
    #[error("symbol {0} outside the host range")]
    SymbolOutOfRange(i32),
    #[error("valley {0} is occupied in the host")]
    ValleyOccupied(i32),
}

/// Symbol counts over `[offset - 99, offset + 99]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram {
    pub offset: i32,
    pub counts: [u64; 199],
}

impl Histogram {
    pub fn empty(offset: i32) -> Self {
        Histogram {
            offset,
            counts: [0; 199],
        }
    }

    pub fn min_symbol(&self) -> i32 {
        self.offset - 99
    }

    pub fn max_symbol(&self) -> i32 {
        self.offset + 99
    }

    fn bin(&self, symbol: i32) -> Option<usize> {
        let i = symbol - self.min_symbol();
        (0..199).contains(&i).then_some(i as usize)
    }

    pub fn count(&self, symbol: i32) -> u64 {
        self.bin(symbol).map_or(0, |i| self.counts[i])
    }

    pub fn add(&mut self, symbol: i32) -> Result<(), HsError> {
        let i = self.bin(symbol).ok_or(HsError::SymbolOutOfRange(symbol))?;
        self.counts[i] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(symbol, count)` for nonzero bins, ascending.
    pub fn occupied(&self) -> impl Iterator<Item = (i32, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(i, &n)| (self.min_symbol() + i as i32, n))
    }
}

pub fn build_histogram(symbols: &[i32], offset: i32) -> Result<Histogram, HsError> {
    let mut h = Histogram::empty(offset);
    for &s in symbols {
        h.add(s)?;
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HsParams {
    pub peak: i32,
    pub valley: i32,
    /// Number of peak-valued symbols, one bit each.
    pub capacity: usize,
}

/// Picks the peak with the largest count among bins that have an empty bin
/// somewhere to their right (ties: smallest symbol); the valley is the
/// nearest such empty bin.
pub fn choose_peak_valley(hist: &Histogram) -> Result<HsParams, HsError> {
    choose_peak_valley_weighted(hist, hist, 0)
}

/// Generalized peak choice for hosts where some symbols cannot move.
///
/// `movable` counts the symbols that can be raised by one. A symbol that is
/// not movable but lies in `[peak, valley)` must be dropped from the host,
/// costing `exclusion_cost` bits of side information. The peak maximizing
/// `movable[peak] - exclusion_cost * dropped` wins (ties: smallest symbol).
/// The returned capacity counts movable peak symbols only. With
/// `movable == hist` this is [`choose_peak_valley`].
pub fn choose_peak_valley_weighted(
    hist: &Histogram,
    movable: &Histogram,
    exclusion_cost: u64,
) -> Result<HsParams, HsError> {
    if hist.total() == 0 {
        return Err(HsError::EmptyHost);
    }
    let lo = hist.min_symbol();
    // nearest_zero[i] = first empty bin at index > i
    let mut nearest_zero = [None; 199];
    let mut next = None;
    for i in (0..199).rev() {
        nearest_zero[i] = next;
        if hist.counts[i] == 0 {
            next = Some(i);
        }
    }
    let mut best: Option<(i64, HsParams)> = None;
    for (i, &next_zero) in nearest_zero.iter().enumerate() {
        if hist.counts[i] == 0 {
            continue;
        }
        let Some(v) = next_zero else { continue };
        let dropped: u64 = (i..v)
            .map(|j| hist.counts[j].saturating_sub(movable.counts[j]))
            .sum();
        let capacity = movable.counts[i] as i64;
        let score = capacity - (exclusion_cost * dropped) as i64;
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((
                score,
                HsParams {
                    peak: lo + i as i32,
                    valley: lo + v as i32,
                    capacity: capacity as usize,
                },
            ));
        }
    }
    best.map(|(_, p)| p).ok_or(HsError::NoValley)
}

/// Embeds `bits` (zero-padded to `params.capacity`) into `host`, scanning in
/// host order.
pub fn hs_embed(host: &[i32], bits: &[bool], params: &HsParams) -> Result<Vec<i32>, HsError> {
    if bits.len() > params.capacity {
        return Err(HsError::CapacityExceeded {
            needed: bits.len(),
            capacity: params.capacity,
        });
    }
    let mut next_bit = 0usize;
    let mut out = Vec::with_capacity(host.len());
    for &s in host {
        if s == params.valley {
            return Err(HsError::ValleyOccupied(s));
        }
        let marked = if s == params.peak {
            let b = bits.get(next_bit).copied().unwrap_or(false);
            next_bit += 1;
            s + i32::from(b)
        } else if s > params.peak && s < params.valley {
            s + 1
        } else {
            s
        };
        out.push(marked);
    }
    if next_bit != params.capacity {
        return Err(HsError::CapacityExceeded {
            needed: params.capacity,
            capacity: next_bit,
        });
    }
    Ok(out)
}

/// Reads one bit from every symbol equal to `peak` or `peak + 1` and
/// undoes the shift over `(peak, valley]`.
pub fn hs_extract(marked: &[i32], params: &HsParams) -> (Vec<bool>, Vec<i32>) {
    let mut bits = Vec::with_capacity(params.capacity);
    let restored = marked
        .iter()
        .map(|&s| {
            if s == params.peak {
                bits.push(false);
            } else if s == params.peak + 1 {
                bits.push(true);
            }
            if s > params.peak && s <= params.valley {
                s - 1
            } else {
                s
            }
        })
        .collect();
    (bits, restored)
}
