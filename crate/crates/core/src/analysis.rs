//! Approximation and filter statistics: CNN vs LBC responses on a patch,
//! least-squares fitting of the linear weights, NMSE curves over sparsity
//! and filter count, the Bernoulli projection Monte Carlo, and the filter
//! de-correlation metric.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::anchor::{generate_bank, SparseBinaryFilterBank};
use crate::conv::{conv2d_dense, conv2d_sparse_binary, ConvGeometry, OpCounter};
use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::lstsq::{lstsq, LstsqSolution};
use crate::rng;
use crate::tensor::Tensor;

/// `d = relu(w . x)`.
pub fn cnn_response(x: &[f64], w: &[f64]) -> Result<f64> {
    if x.len() != w.len() {
        return Err(Error::shape(format!("patch has {} values, filter {}", x.len(), w.len())));
    }
    Ok(x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>().max(0.0))
}

/// `d' = act(B x) . v` for a row-major `m x N` matrix `b`.
pub fn lbc_response(x: &[f64], b: &[f64], v: &[f64], act: Activation) -> Result<f64> {
    let m = v.len();
    let n = x.len();
    if b.len() != m * n {
        return Err(Error::shape(format!("bank matrix has {} values, expected {m}x{n}", b.len())));
    }
    Ok(b.chunks_exact(n)
        .zip(v)
        .map(|(row, vi)| act.apply(row.iter().zip(x).map(|(a, c)| a * c).sum()) * vi)
        .sum())
}

/// Least-squares `v` for `C^T v ~ d` with `C` row-major `m x tau`.
pub fn solve_v_least_squares(c: &[f64], m: usize, d: &[f64]) -> Result<LstsqSolution> {
    let tau = d.len();
    if c.len() != m * tau {
        return Err(Error::shape(format!("C has {} values, expected {m}x{tau}", c.len())));
    }
    // row-major C is column-major C^T
    lstsq(c, tau, m, d)
}

/// `||a - b||^2 / ||b||^2`; 0 when both are zero.
pub fn nmse(approx: &[f64], target: &[f64]) -> f64 {
    let num: f64 = approx.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = target.iter().map(|b| b * b).sum();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproxExperimentConfig {
    pub sparsity_grid: Vec<f64>,
    pub m_grid: Vec<usize>,
    /// Filter side; patches are `p x k x k` with stride 1 and zero padding.
    pub kernel: usize,
    pub seed: u64,
}

impl Default for ApproxExperimentConfig {
    fn default() -> Self {
        ApproxExperimentConfig {
            sparsity_grid: (1..=10).map(|i| i as f64 / 10.0).collect(),
            m_grid: vec![64, 128, 512],
            kernel: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmseRow {
    pub sparsity: f64,
    pub m: usize,
    pub mean: f64,
    /// Sample standard deviation over images (0 for a single image).
    pub std: f64,
}

/// NMSE of one image for every `(sparsity, m)` pair, in grid order
/// (sparsity outer, m inner).
///
/// Image `i` draws its Gaussian filter from `derive(derive(seed, i), 0)` and
/// the bank for grid cell `g` from `derive(derive(seed, i), g + 1)`.
pub fn nmse_image(img: &Tensor, cfg: &ApproxExperimentConfig, index: usize) -> Result<Vec<f64>> {
    let (_, p, _, _) = img.dims4()?;
    let k = cfg.kernel;
    let geom = ConvGeometry::same(k);
    let image_seed = rng::derive(cfg.seed, index as u64);
    let mut wr = rng::seeded(rng::derive(image_seed, 0));
    let w: Vec<f64> = (0..p * k * k).map(|_| StandardNormal.sample(&mut wr)).collect();
    let w = Tensor::from_vec(&[1, p, k, k], w)?;
    let d = conv2d_dense(img, &w, geom, &mut OpCounter::default())?.map(|v| v.max(0.0));
    let mut out = Vec::with_capacity(cfg.sparsity_grid.len() * cfg.m_grid.len());
    let mut cell = 0u64;
    for &s in &cfg.sparsity_grid {
        for &m in &cfg.m_grid {
            cell += 1;
            let bank = generate_bank(m, p, k, k, s, rng::derive(image_seed, cell))?;
            let c = conv2d_sparse_binary(img, &bank, geom, &mut OpCounter::default())?.map(|v| v.max(0.0));
            let sol = solve_v_least_squares(c.data(), m, d.data())?;
            let tau = d.len();
            let approx: Vec<f64> = (0..tau)
                .map(|t| (0..m).map(|j| c.data()[j * tau + t] * sol.x[j]).sum())
                .collect();
            out.push(nmse(&approx, d.data()));
        }
    }
    Ok(out)
}

/// Mean and standard deviation of the per-image NMSE over `images`
/// (`n x p x H x W`). Images run in parallel; results are reduced in index order.
pub fn nmse_curve(cfg: &ApproxExperimentConfig, images: &Tensor) -> Result<Vec<NmseRow>> {
    if cfg.sparsity_grid.is_empty() || cfg.m_grid.is_empty() {
        return Err(Error::param("sparsity and m grids must be non-empty"));
    }
    if let Some(s) = cfg.sparsity_grid.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
        return Err(Error::param(format!("sparsity {s} outside (0, 1]")));
    }
    if cfg.m_grid.contains(&0) || cfg.kernel.is_multiple_of(2) {
        return Err(Error::param("m must be >= 1 and the kernel odd"));
    }
    let (n, p, h, w) = images.dims4()?;
    if n == 0 {
        return Err(Error::param("no images"));
    }
    let per_image: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let img = Tensor::from_vec(&[1, p, h, w], images.sample(i).to_vec())?;
            nmse_image(&img, cfg, i)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut cell = 0;
    for &sparsity in &cfg.sparsity_grid {
        for &m in &cfg.m_grid {
            let vals: Vec<f64> = per_image.iter().map(|r| r[cell]).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            rows.push(NmseRow { sparsity, m, mean, std });
            cell += 1;
        }
    }
    Ok(rows)
}

/// The fixed vector `x ~ N(0, I_n)` used by [`theorem1_montecarlo`] for `seed`.
pub fn theorem1_vector(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(rng::derive(seed, 0));
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

/// Fraction of `trials` dense Bernoulli `m x n` matrices `B` for which
/// `max_i (B x)_i >= sqrt(1 - t) ||x||`, with `x` from [`theorem1_vector`].
/// Signs are the bits of successive 64-bit words, set bit meaning +1.
pub fn theorem1_montecarlo(n: usize, m: usize, t: f64, trials: usize, seed: u64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::param(format!("t must lie in (0, 1), got {t}")));
    }
    if n == 0 || m == 0 || trials == 0 {
        return Err(Error::param("n, m and trials must be >= 1"));
    }
    let x = theorem1_vector(n, seed);
    let thr = (1.0 - t).sqrt() * x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut r = rng::seeded(rng::derive(seed, 1));
    let mut hits = 0usize;
    for _ in 0..trials {
        let mut word = 0u64;
        let mut left = 0;
        let mut hit = false;
        for _ in 0..m {
            let mut xi = 0.0;
            for &xv in &x {
                if left == 0 {
                    word = r.next_u64();
                    left = 64;
                }
                xi += if word & 1 == 1 { xv } else { -xv };
                word >>= 1;
                left -= 1;
            }
            // the remaining rows are still drawn so every trial consumes m*n bits
            hit |= xi >= thr;
        }
        hits += usize::from(hit);
    }
    Ok(hits as f64 / trials as f64)
}

/// `(||S||_F^2 - ||diag S||^2) / ||S||_F^2` for the `m x m` covariance `S` of
/// the vectorized filters, each centred on its own mean.
pub fn filter_decorrelation(filters: &Tensor) -> Result<f64> {
    let (m, p, h, w) = filters.dims4()?;
    if m < 2 {
        return Err(Error::param("de-correlation needs at least two filters"));
    }
    let n = p * h * w;
    let centred: Vec<Vec<f64>> = filters
        .data()
        .chunks_exact(n)
        .map(|f| {
            let mean = f.iter().sum::<f64>() / n as f64;
            f.iter().map(|v| v - mean).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut diag = 0.0;
    for i in 0..m {
        for j in 0..m {
            let s: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
            total += s * s;
            if i == j {
                diag += s * s;
            }
        }
    }
    if total == 0.0 {
        return Err(Error::param("all filters are constant"));
    }
    Ok((total - diag) / total)
}

pub fn bank_decorrelation(bank: &SparseBinaryFilterBank) -> Result<f64> {
    filter_decorrelation(&bank.densify())
}
