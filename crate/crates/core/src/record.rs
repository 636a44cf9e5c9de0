//! Fixed-size key-value records and the branchless byte operations on them.
//!
//! A record is `KEY_LEN` key bytes followed by `record_size - KEY_LEN` value
//! bytes. Records order lexicographically over all their bytes, key first.
//! The all-`0xFF` key is reserved for dummies, so dummies sort after every
//! real record.

use std::cmp::Ordering;
use std::fmt;
use std::hint::black_box;

use crate::error::{Error, Result};

/// Width of the key field of every record.
pub const KEY_LEN: usize = 16;

/// Key of every dummy record.
pub const DUMMY_KEY: [u8; KEY_LEN] = [0xFF; KEY_LEN];

/// An owned record.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct KvRecord {
    bytes: Box<[u8]>,
}

impl KvRecord {
    /// Build a real record. The key is zero-padded to `KEY_LEN`, the value to
    /// the remaining width.
    pub fn new(key: &[u8], value: &[u8], record_size: usize) -> Result<Self> {
        if record_size <= KEY_LEN {
            return Err(Error::InvalidMeta(format!(
                "record size {record_size} leaves no room for a value"
            )));
        }
        if key.len() > KEY_LEN {
            return Err(Error::OversizeRecord(format!(
                "key of {} bytes exceeds {KEY_LEN}",
                key.len()
            )));
        }
        if value.len() > record_size - KEY_LEN {
            return Err(Error::OversizeRecord(format!(
                "value of {} bytes exceeds {}",
                value.len(),
                record_size - KEY_LEN
            )));
        }
        let mut bytes = vec![0u8; record_size];
        bytes[..key.len()].copy_from_slice(key);
        if bytes[..KEY_LEN] == DUMMY_KEY {
            return Err(Error::OversizeRecord(
                "key collides with the dummy sentinel".into(),
            ));
        }
        bytes[KEY_LEN..KEY_LEN + value.len()].copy_from_slice(value);
        Ok(KvRecord {
            bytes: bytes.into_boxed_slice(),
        })
    }

    pub fn dummy(record_size: usize) -> Self {
        let mut bytes = vec![0u8; record_size];
        write_dummy(&mut bytes);
        KvRecord {
            bytes: bytes.into_boxed_slice(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        assert!(bytes.len() > KEY_LEN, "record shorter than its key");
        KvRecord { bytes: bytes.into() }
    }

    pub fn key(&self) -> &[u8] {
        &self.bytes[..KEY_LEN]
    }

    pub fn value(&self) -> &[u8] {
        &self.bytes[KEY_LEN..]
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn is_dummy(&self) -> bool {
        is_dummy(&self.bytes)
    }
}

impl fmt::Debug for KvRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_dummy() {
            return write!(f, "KvRecord(dummy)");
        }
        let key = self.key();
        let end = key.iter().rposition(|&b| b != 0).map_or(0, |p| p + 1);
        write!(
            f,
            "KvRecord({:?} => {})",
            String::from_utf8_lossy(&key[..end]),
            hex::encode(self.value())
        )
    }
}

impl PartialOrd for KvRecord {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for KvRecord {
    fn cmp(&self, other: &Self) -> Ordering {
        self.bytes.cmp(&other.bytes)
    }
}

/// Overwrite `rec` with the canonical dummy (sentinel key, zero value).
pub fn write_dummy(rec: &mut [u8]) {
    rec[..KEY_LEN].fill(0xFF);
    rec[KEY_LEN..].fill(0);
}

pub fn is_dummy(rec: &[u8]) -> bool {
    rec[..KEY_LEN] == DUMMY_KEY
}

/// All-ones when `cond` holds, zero otherwise. `black_box` keeps the optimizer
/// from turning masked code back into a branch.
#[inline]
pub fn mask64(cond: bool) -> u64 {
    black_box((cond as u64).wrapping_neg())
}

#[inline]
fn load_be(chunk: &[u8]) -> u64 {
    let mut buf = [0u8; 8];
    buf[..chunk.len()].copy_from_slice(chunk);
    u64::from_be_bytes(buf)
}

/// Constant-time `a < b` over equal-length byte strings, lexicographic.
///
/// Every byte of both inputs is inspected regardless of where they first differ.
#[inline]
pub fn ct_less(a: &[u8], b: &[u8]) -> bool {
    debug_assert_eq!(a.len(), b.len());
    let mut lt = 0u64;
    let mut undecided = u64::MAX;
    for (ca, cb) in a.chunks(8).zip(b.chunks(8)) {
        let x = load_be(ca);
        let y = load_be(cb);
        let clt = ((x < y) as u64).wrapping_neg();
        let cne = ((x != y) as u64).wrapping_neg();
        lt |= undecided & clt;
        undecided &= !cne;
    }
    black_box(lt) != 0
}

/// Constant-time equality over equal-length byte strings.
#[inline]
pub fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    debug_assert_eq!(a.len(), b.len());
    let mut diff = 0u64;
    for (ca, cb) in a.chunks(8).zip(b.chunks(8)) {
        diff |= load_be(ca) ^ load_be(cb);
    }
    black_box(diff) == 0
}

/// `dst = cond ? src : dst`, without branching on `cond`.
#[inline]
pub fn ct_assign(cond: bool, dst: &mut [u8], src: &[u8]) {
    debug_assert_eq!(dst.len(), src.len());
    let m = mask64(cond);
    let mut d8 = dst.chunks_exact_mut(8);
    let mut s8 = src.chunks_exact(8);
    for (d, s) in (&mut d8).zip(&mut s8) {
        let x = u64::from_ne_bytes(d.try_into().unwrap());
        let y = u64::from_ne_bytes(s.try_into().unwrap());
        d.copy_from_slice(&(x ^ (m & (x ^ y))).to_ne_bytes());
    }
    let mb = m as u8;
    for (d, s) in d8.into_remainder().iter_mut().zip(s8.remainder()) {
        *d ^= mb & (*d ^ *s);
    }
}

/// Exchange `a` and `b` iff `cond`, touching every byte of both either way.
#[inline]
pub fn ct_swap(cond: bool, a: &mut [u8], b: &mut [u8]) {
    debug_assert_eq!(a.len(), b.len());
    let m = mask64(cond);
    let mut a8 = a.chunks_exact_mut(8);
    let mut b8 = b.chunks_exact_mut(8);
    for (x, y) in (&mut a8).zip(&mut b8) {
        let xv = u64::from_ne_bytes(x.try_into().unwrap());
        let yv = u64::from_ne_bytes(y.try_into().unwrap());
        let t = m & (xv ^ yv);
        x.copy_from_slice(&(xv ^ t).to_ne_bytes());
        y.copy_from_slice(&(yv ^ t).to_ne_bytes());
    }
    let mb = m as u8;
    for (x, y) in a8.into_remainder().iter_mut().zip(b8.into_remainder()) {
        let t = mb & (*x ^ *y);
        *x ^= t;
        *y ^= t;
    }
}

/// Branchless select on a word.
#[inline]
pub fn ct_select_u64(cond: bool, a: u64, b: u64) -> u64 {
    let m = mask64(cond);
    b ^ (m & (a ^ b))
}
