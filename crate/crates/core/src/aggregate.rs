//! Hierarchically aggregatable reduce operations.
//!
//! Values are read as little-endian 8-byte lanes. Every operation combines
//! two partial aggregates with straight-line arithmetic; nothing branches on
//! the lane contents.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::record::ct_select_u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggregatorKind {
    /// Lane 0 as an unsigned count.
    Count,
    /// Every full lane, as wrapping signed sums.
    Sum,
    /// Lane 0 as a signed maximum.
    Max,
    /// Lane 0 as a signed minimum.
    Min,
    /// Lanes `0..k` hold the k largest values seen, descending; unused lanes
    /// hold `i64::MIN`.
    TopK(usize),
}

pub const LANE: usize = 8;

#[inline]
fn lane(v: &[u8], i: usize) -> u64 {
    u64::from_le_bytes(v[i * LANE..(i + 1) * LANE].try_into().unwrap())
}

#[inline]
fn set_lane(v: &mut [u8], i: usize, x: u64) {
    v[i * LANE..(i + 1) * LANE].copy_from_slice(&x.to_le_bytes());
}

#[inline]
fn ct_max_i64(a: u64, b: u64) -> u64 {
    ct_select_u64((a as i64) >= (b as i64), a, b)
}

#[inline]
fn ct_min_i64(a: u64, b: u64) -> u64 {
    ct_select_u64((a as i64) <= (b as i64), a, b)
}

impl AggregatorKind {
    /// Minimum value width this aggregator needs.
    pub fn value_width(&self) -> usize {
        match self {
            AggregatorKind::TopK(k) => k * LANE,
            _ => LANE,
        }
    }

    pub fn check_width(&self, value_len: usize) -> Result<()> {
        if let AggregatorKind::TopK(0) = self {
            return Err(Error::Config("topk needs k >= 1".into()));
        }
        if value_len < self.value_width() {
            return Err(Error::Config(format!(
                "{self} needs a {}-byte value, records carry {value_len}",
                self.value_width()
            )));
        }
        Ok(())
    }

    /// `acc := acc ⊕ v`. Both slices have the same length.
    pub fn combine(&self, acc: &mut [u8], v: &[u8]) {
        debug_assert_eq!(acc.len(), v.len());
        match *self {
            AggregatorKind::Count => set_lane(acc, 0, lane(acc, 0).wrapping_add(lane(v, 0))),
            AggregatorKind::Sum => {
                for i in 0..acc.len() / LANE {
                    set_lane(acc, i, lane(acc, i).wrapping_add(lane(v, i)));
                }
            }
            AggregatorKind::Max => set_lane(acc, 0, ct_max_i64(lane(acc, 0), lane(v, 0))),
            AggregatorKind::Min => set_lane(acc, 0, ct_min_i64(lane(acc, 0), lane(v, 0))),
            AggregatorKind::TopK(k) => {
                // insert each incoming lane into the descending list with a
                // fixed chain of compare-exchanges
                for j in 0..k {
                    let mut x = lane(v, j);
                    for i in 0..k {
                        let a = lane(acc, i);
                        set_lane(acc, i, ct_max_i64(a, x));
                        x = ct_min_i64(a, x);
                    }
                }
            }
        }
    }

    /// Value of a single observation `x` in this aggregator's lane format.
    pub fn unit(&self, x: i64, value_len: usize) -> Vec<u8> {
        let mut v = vec![0u8; value_len];
        match *self {
            AggregatorKind::TopK(k) => {
                for i in 1..k {
                    set_lane(&mut v, i, i64::MIN as u64);
                }
                set_lane(&mut v, 0, x as u64);
            }
            _ => set_lane(&mut v, 0, x as u64),
        }
        v
    }

    /// Decode the lanes an aggregate carries.
    pub fn lanes(&self, value: &[u8]) -> Vec<i64> {
        let n = match *self {
            AggregatorKind::TopK(k) => k,
            AggregatorKind::Sum => value.len() / LANE,
            _ => 1,
        };
        (0..n).map(|i| lane(value, i) as i64).collect()
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregatorKind::Count => f.write_str("count"),
            AggregatorKind::Sum => f.write_str("sum"),
            AggregatorKind::Max => f.write_str("max"),
            AggregatorKind::Min => f.write_str("min"),
            AggregatorKind::TopK(k) => write!(f, "topk:{k}"),
        }
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "count" => AggregatorKind::Count,
            "sum" => AggregatorKind::Sum,
            "max" => AggregatorKind::Max,
            "min" => AggregatorKind::Min,
            _ => {
                let k = s
                    .strip_prefix("topk:")
                    .or_else(|| s.strip_prefix("topk"))
                    .ok_or_else(|| Error::Config(format!("unknown aggregator {s:?}")))?;
                let k: usize = k
                    .trim_matches(|c| c == '(' || c == ')')
                    .parse()
                    .map_err(|_| Error::Config(format!("bad topk size in {s:?}")))?;
                if k == 0 {
                    return Err(Error::Config("topk needs k >= 1".into()));
                }
                AggregatorKind::TopK(k)
            }
        })
    }
}
