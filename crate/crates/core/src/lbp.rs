//! Local binary patterns, computed directly and as sparse difference-filter
//! convolutions followed by a Heaviside step and a weighted sum.
//!
//! Neighbour positions are the window positions other than the pivot, in
//! row-major order. Bit `n` compares neighbour `ordering[n]` against the
//! pivot and carries weight `weights[n]`; the default weights are
//! `2^(L-1), ..., 2^0`. A bit is set when `neighbour >= pivot`. Window
//! positions outside the image read as zero.

use crate::anchor::{Entry, SparseBinaryFilterBank};
use crate::conv::{conv2d_sparse_binary, ConvGeometry, OpCounter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LbpConfig {
    neighborhood: usize,
    pivot: (usize, usize),
    ordering: Vec<usize>,
    weights: Vec<f64>,
}

impl LbpConfig {
    /// Centre pivot, identity ordering and base-2 weights for a 3x3 or 5x5 window.
    pub fn new(neighborhood: usize) -> Result<Self> {
        if neighborhood != 3 && neighborhood != 5 {
            return Err(Error::param(format!(
                "LBP neighbourhood must be 3 or 5, got {neighborhood}"
            )));
        }
        let len = neighborhood * neighborhood - 1;
        Ok(LbpConfig {
            neighborhood,
            pivot: (neighborhood / 2, neighborhood / 2),
            ordering: (0..len).collect(),
            weights: (0..len).map(|n| 2f64.powi((len - 1 - n) as i32)).collect(),
        })
    }

    pub fn with_pivot(mut self, dy: usize, dx: usize) -> Result<Self> {
        if dy >= self.neighborhood || dx >= self.neighborhood {
            return Err(Error::param(format!(
                "pivot ({dy}, {dx}) outside {n}x{n} window",
                n = self.neighborhood
            )));
        }
        self.pivot = (dy, dx);
        Ok(self)
    }

    pub fn with_ordering(mut self, ordering: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if ordering.len() != self.len() {
            return Err(Error::param(format!(
                "ordering has {} entries, expected {}",
                ordering.len(),
                self.len()
            )));
        }
        for &o in &ordering {
            if o >= seen.len() || std::mem::replace(&mut seen[o], true) {
                return Err(Error::param("ordering is not a permutation"));
            }
        }
        self.ordering = ordering;
        Ok(self)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.len() {
            return Err(Error::param(format!(
                "{} weights given, expected {}",
                weights.len(),
                self.len()
            )));
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn neighborhood(&self) -> usize {
        self.neighborhood
    }

    /// Number of neighbours `L`.
    pub fn len(&self) -> usize {
        self.neighborhood * self.neighborhood - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pivot(&self) -> (usize, usize) {
        self.pivot
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Window position `(dy, dx)` of every neighbour, in row-major order.
    fn neighbour_positions(&self) -> Vec<(usize, usize)> {
        let nb = self.neighborhood;
        (0..nb * nb)
            .map(|k| (k / nb, k % nb))
            .filter(|&pos| pos != self.pivot)
            .collect()
    }

    /// Window position controlling bit `n`.
    fn bit_position(&self, n: usize) -> (usize, usize) {
        self.neighbour_positions()[self.ordering[n]]
    }
}

fn single_channel(img: &Tensor, cfg: &LbpConfig) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = img.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("LBP expects one channel, got {c}")));
    }
    if h < cfg.neighborhood || w < cfg.neighborhood {
        return Err(Error::shape(format!(
            "{h}x{w} image is smaller than the {nb}x{nb} window",
            nb = cfg.neighborhood
        )));
    }
    Ok((n, h, w))
}

/// Direct per-pixel evaluation of `sum_n s(i_n, i_c) * v[n]`.
pub fn lbp_encode_classic(img: &Tensor, cfg: &LbpConfig) -> Result<Tensor> {
    let (n, h, w) = single_channel(img, cfg)?;
    let r = (cfg.neighborhood / 2) as isize;
    let bits: Vec<(isize, isize)> = (0..cfg.len())
        .map(|b| {
            let (dy, dx) = cfg.bit_position(b);
            (dy as isize - r, dx as isize - r)
        })
        .collect();
    let pivot = (cfg.pivot.0 as isize - r, cfg.pivot.1 as isize - r);
    let mut out = Tensor::zeros(&[n, 1, h, w])?;
    for s in 0..n {
        let plane = img.sample(s);
        let read = |y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                plane[y as usize * w + x as usize]
            }
        };
        let dst = out.sample_mut(s);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let centre = read(y + pivot.0, x + pivot.1);
                let mut code = 0.0;
                for (b, &(oy, ox)) in bits.iter().enumerate() {
                    if read(y + oy, x + ox) >= centre {
                        code += cfg.weights[b];
                    }
                }
                dst[y as usize * w + x as usize] = code;
            }
        }
    }
    Ok(out)
}

/// The `L` two-sparse difference filters: +1 at the neighbour of bit `n`, -1 at the pivot.
pub fn lbp_difference_filters(cfg: &LbpConfig) -> Result<SparseBinaryFilterBank> {
    let nb = cfg.neighborhood;
    let at = |(dy, dx): (usize, usize), sign| Entry {
        channel: 0,
        dy: dy as u32,
        dx: dx as u32,
        sign,
    };
    let filters = (0..cfg.len())
        .map(|n| vec![at(cfg.bit_position(n), 1), at(cfg.pivot, -1)])
        .collect();
    SparseBinaryFilterBank::from_entries(1, nb, nb, filters)
}

/// LBP as `y = sum_i H(b_i * x) * v_i` with `H(z) = 1` iff `z >= 0`.
pub fn lbp_encode_conv(img: &Tensor, cfg: &LbpConfig) -> Result<Tensor> {
    let (n, h, w) = single_channel(img, cfg)?;
    let bank = lbp_difference_filters(cfg)?;
    let diffs = conv2d_sparse_binary(img, &bank, ConvGeometry::same(cfg.neighborhood), &mut OpCounter::default())?;
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, 1, h, w])?;
    for s in 0..n {
        let maps = diffs.sample(s);
        let dst = out.sample_mut(s);
        for (b, &weight) in cfg.weights.iter().enumerate() {
            for (o, &d) in dst.iter_mut().zip(&maps[b * plane..(b + 1) * plane]) {
                if d >= 0.0 {
                    *o += weight;
                }
            }
        }
    }
    Ok(out)
}
