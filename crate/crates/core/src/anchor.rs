//! Fixed sparse ±1 anchor filters.
//!
//! A bank holds `m` filters of shape `p x h x w`. Each filter has exactly
//! `nnz = max(1, round_half_up(sparsity * p*h*w))` non-zero weights, all ±1.
//! Generated banks are fully determined by `(m, p, h, w, sparsity, seed)`:
//!
//! 1. `rng = ChaCha8Rng::seed_from_u64(seed)`, one stream for the whole bank.
//! 2. Per filter, a partial Fisher-Yates shuffle over the identity
//!    permutation of `0..p*h*w`: for `i in 0..nnz`, swap slot `i` with slot
//!    `i + bounded(N - i)`. The first `nnz` slots, sorted ascending, are the
//!    support.
//! 3. Then one word per support position, in ascending order: top bit set
//!    gives +1, clear gives -1.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const BANK_MAGIC: &[u8; 4] = b"LBCB";
pub const BANK_VERSION: u16 = 1;
/// Serialized size of one bank record.
pub const BANK_RECORD_LEN: usize = 4 + 2 + 4 * 4 + 8 + 8;

/// One non-zero anchor weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Entry {
    pub channel: u32,
    pub dy: u32,
    pub dx: u32,
    pub sign: i8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Origin {
    /// Reproducible from its seed.
    Generated { sparsity: f64, seed: u64 },
    /// Hand-built (for example the LBP difference filters); not serializable.
    Explicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseBinaryFilterBank {
    m: usize,
    p: usize,
    h: usize,
    w: usize,
    origin: Origin,
    filters: Vec<Vec<Entry>>,
}

/// Non-zeros per filter for a given sparsity and filter volume.
pub fn nnz_for(sparsity: f64, volume: usize) -> usize {
    ((sparsity * volume as f64 + 0.5).floor() as usize).clamp(1, volume)
}

fn check_dims(m: usize, p: usize, h: usize, w: usize) -> Result<()> {
    if m == 0 || p == 0 || h == 0 || w == 0 {
        return Err(Error::param(format!(
            "bank dims must be >= 1, got m={m} p={p} h={h} w={w}"
        )));
    }
    Ok(())
}

pub fn generate_bank(
    m: usize,
    p: usize,
    h: usize,
    w: usize,
    sparsity: f64,
    seed: u64,
) -> Result<SparseBinaryFilterBank> {
    check_dims(m, p, h, w)?;
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(Error::param(format!(
            "sparsity must be in (0, 1], got {sparsity}"
        )));
    }
    let volume = p * h * w;
    let nnz = nnz_for(sparsity, volume);
    let mut rng = rng::seeded(seed);
    let mut slots: Vec<usize> = Vec::with_capacity(volume);
    let mut filters = Vec::with_capacity(m);
    for _ in 0..m {
        slots.clear();
        slots.extend(0..volume);
        for i in 0..nnz {
            let j = i + rng::bounded(&mut rng, volume - i);
            slots.swap(i, j);
        }
        let mut support = slots[..nnz].to_vec();
        support.sort_unstable();
        let entries = support
            .into_iter()
            .map(|flat| {
                let sign = if rng::coin(&mut rng) { 1 } else { -1 };
                entry_at(flat, h, w, sign)
            })
            .collect();
        filters.push(entries);
    }
    Ok(SparseBinaryFilterBank {
        m,
        p,
        h,
        w,
        origin: Origin::Generated { sparsity, seed },
        filters,
    })
}

fn entry_at(flat: usize, h: usize, w: usize, sign: i8) -> Entry {
    Entry {
        channel: (flat / (h * w)) as u32,
        dy: ((flat / w) % h) as u32,
        dx: (flat % w) as u32,
        sign,
    }
}

impl SparseBinaryFilterBank {
    /// Build a bank from explicit entry lists, one list per filter.
    ///
    /// Entries are sorted into ascending flat order; duplicates, zero
    /// signs and out-of-range positions are rejected.
    pub fn from_entries(p: usize, h: usize, w: usize, filters: Vec<Vec<Entry>>) -> Result<Self> {
        check_dims(filters.len(), p, h, w)?;
        let mut sorted = Vec::with_capacity(filters.len());
        for (f, mut entries) in filters.into_iter().enumerate() {
            if entries.is_empty() {
                return Err(Error::param(format!("filter {f} has no entries")));
            }
            for e in &entries {
                if e.sign != 1 && e.sign != -1 {
                    return Err(Error::param(format!("filter {f}: sign {} is not ±1", e.sign)));
                }
                if e.channel as usize >= p || e.dy as usize >= h || e.dx as usize >= w {
                    return Err(Error::param(format!("filter {f}: entry {e:?} outside {p}x{h}x{w}")));
                }
            }
            entries.sort_by_key(|e| (e.channel, e.dy, e.dx));
            if entries.windows(2).any(|pair| {
                (pair[0].channel, pair[0].dy, pair[0].dx) == (pair[1].channel, pair[1].dy, pair[1].dx)
            }) {
                return Err(Error::param(format!("filter {f} repeats a position")));
            }
            sorted.push(entries);
        }
        Ok(SparseBinaryFilterBank {
            m: sorted.len(),
            p,
            h,
            w,
            origin: Origin::Explicit,
            filters: sorted,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn filters(&self) -> &[Vec<Entry>] {
        &self.filters
    }

    pub fn filter(&self, i: usize) -> &[Entry] {
        &self.filters[i]
    }

    /// Total number of stored ±1 weights.
    pub fn total_entries(&self) -> usize {
        self.filters.iter().map(Vec::len).sum()
    }

    pub fn densify(&self) -> Tensor {
        let (p, h, w) = (self.p, self.h, self.w);
        let mut t = Tensor::zeros(&[self.m, p, h, w]).expect("bank dims are validated");
        let data = t.data_mut();
        for (f, entries) in self.filters.iter().enumerate() {
            for e in entries {
                let off = ((f * p + e.channel as usize) * h + e.dy as usize) * w + e.dx as usize;
                data[off] = e.sign as f64;
            }
        }
        t
    }

    /// Rows of the densified bank as an `m x (p*h*w)` row-major matrix.
    pub fn matrix(&self) -> Vec<f64> {
        self.densify().into_data()
    }

    /// `(#(+1) - #(-1)) / total`.
    pub fn empirical_sign_balance(&self) -> f64 {
        let (mut plus, mut total) = (0i64, 0i64);
        for e in self.filters.iter().flatten() {
            total += 1;
            if e.sign > 0 {
                plus += 1;
            }
        }
        (2 * plus - total) as f64 / total as f64
    }

    /// Digest of dims and entries, used to assert banks are never mutated.
    pub fn content_hash(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        (self.m, self.p, self.h, self.w).hash(&mut hasher);
        self.filters.hash(&mut hasher);
        hasher.finish()
    }

    /// Serialize the bank header; entries are regenerated from the seed on load.
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let Origin::Generated { sparsity, seed } = self.origin else {
            return Err(Error::format(
                "only seed-generated banks can be serialized",
            ));
        };
        out.write_all(BANK_MAGIC)?;
        out.write_all(&BANK_VERSION.to_le_bytes())?;
        for d in [self.m, self.p, self.h, self.w] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        out.write_all(&sparsity.to_le_bytes())?;
        out.write_all(&seed.to_le_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(BANK_RECORD_LEN);
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut buf = [0u8; BANK_RECORD_LEN];
        input
            .read_exact(&mut buf)
            .map_err(|e| Error::format(format!("truncated bank record: {e}")))?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < BANK_RECORD_LEN {
            return Err(Error::format(format!(
                "bank record needs {BANK_RECORD_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        if &bytes[..4] != BANK_MAGIC {
            return Err(Error::format("bad bank magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != BANK_VERSION {
            return Err(Error::format(format!("unsupported bank version {version}")));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (m, p, h, w) = (u32_at(6), u32_at(10), u32_at(14), u32_at(18));
        let sparsity = f64::from_le_bytes(bytes[22..30].try_into().unwrap());
        let seed = u64::from_le_bytes(bytes[30..38].try_into().unwrap());
        generate_bank(m, p, h, w, sparsity, seed).map_err(|e| Error::format(format!("bad bank record: {e}")))
    }
}
