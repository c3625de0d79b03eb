//! Datasets: MNIST IDX files, a synthetic Gaussian generator and class-balanced subsampling.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
/// MNIST digits are zero-padded from 28x28 to this side, centred.
pub const MNIST_PADDED: usize = 32;
pub const SYNTHETIC_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if n != labels.len() {
            return Err(Error::Data(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Copy the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::param("cannot select an empty subset"));
        }
        let (c, h, w) = self.image_dims();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Bounds(format!("sample {i} of {}", self.len())));
            }
            data.extend_from_slice(self.images.sample(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(
            self.name.clone(),
            Tensor::from_vec(&[indices.len(), c, h, w], data)?,
            labels,
            self.classes,
        )
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// Images `range` as a batch tensor, with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let sub = self.select(indices)?;
        Ok((sub.images, sub.labels))
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let reader = BufReader::new(file);
    Ok(if path.extension().is_some_and(|ext| ext == "gz") {
        Box::new(GzDecoder::new(reader))
    } else {
        Box::new(reader)
    })
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format("IDX header truncated"))
}

/// Parse an IDX3 image file: `u8` pixels, returned as `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "image file magic {magic}, expected {IDX_IMAGES_MAGIC}"
        )));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::format(format!(
            "image file holds {} bytes, header promises {need}",
            bytes.len()
        )));
    }
    Ok((n, rows, cols, &bytes[16..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "label file magic {magic}, expected {IDX_LABELS_MAGIC}"
        )));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::format("label file truncated"));
    }
    Ok(&bytes[8..8 + n])
}

/// Build a dataset from raw IDX bytes: pixels scaled by 1/255 and, for
/// 28x28 images, zero-padded (centred) to 32x32.
pub fn mnist_from_idx_bytes(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::Data("IDX file holds no images".into()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::Data(format!("label {bad} outside 0..10")));
    }
    let (out_h, out_w) = if rows == 28 && cols == 28 {
        (MNIST_PADDED, MNIST_PADDED)
    } else {
        (rows, cols)
    };
    let (oy, ox) = ((out_h - rows) / 2, (out_w - cols) / 2);
    let mut data = vec![0.0; n * out_h * out_w];
    for k in 0..n {
        let src = &pixels[k * rows * cols..(k + 1) * rows * cols];
        let dst = &mut data[k * out_h * out_w..(k + 1) * out_h * out_w];
        for y in 0..rows {
            for x in 0..cols {
                dst[(y + oy) * out_w + x + ox] = src[y * cols + x] as f64 / 255.0;
            }
        }
    }
    Dataset::new(
        "mnist",
        Tensor::from_vec(&[n, 1, out_h, out_w], data)?,
        labels.iter().map(|&l| l as usize).collect(),
        10,
    )
}

/// Load an IDX image/label pair; files ending in `.gz` are decompressed.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut images = Vec::new();
    open_maybe_gz(images_path)?.read_to_end(&mut images)?;
    let mut labels = Vec::new();
    open_maybe_gz(labels_path)?.read_to_end(&mut labels)?;
    mnist_from_idx_bytes(&images, &labels)
}

/// Locate `<prefix>-images-idx3-ubyte[.gz]` and the matching labels in `dir`.
pub fn load_mnist_dir(dir: &Path, prefix: &str) -> Result<Dataset> {
    let find = |stem: String| -> Result<std::path::PathBuf> {
        for name in [stem.clone(), format!("{stem}.gz")] {
            let p = dir.join(name);
            if p.exists() {
                return Ok(p);
            }
        }
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{stem} not found in {}", dir.display()),
        )))
    };
    load_mnist_idx(
        &find(format!("{prefix}-images-idx3-ubyte"))?,
        &find(format!("{prefix}-labels-idx1-ubyte"))?,
    )
}

/// Teacher weights for [`synthetic_gaussian`]: class `k` has one standard
/// normal weight per (channel, 4x4 block of the image grid), drawn from the
/// fixed stream `seeded(0x7EAC_4E12)` in `(k, c, by, bx)` order.
fn teacher(p: usize) -> Vec<f64> {
    let mut r = rng::seeded(0x7EAC_4E12);
    (0..SYNTHETIC_CLASSES * p * 16)
        .map(|_| StandardNormal.sample(&mut r))
        .collect()
}

/// `n` images of i.i.d. standard normal pixels.
///
/// Labels come from a fixed linear teacher: the image is averaged over a
/// 4x4 grid of blocks per channel, and the label is the argmax over ten
/// class weight vectors of the dot product with those block means.
pub fn synthetic_gaussian(n: usize, p: usize, h: usize, w: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || p == 0 || h < 4 || w < 4 {
        return Err(Error::param(format!(
            "synthetic dataset needs n, p >= 1 and h, w >= 4, got n={n} p={p} h={h} w={w}"
        )));
    }
    let mut r = rng::seeded(seed);
    let data: Vec<f64> = (0..n * p * h * w).map(|_| StandardNormal.sample(&mut r)).collect();
    let images = Tensor::from_vec(&[n, p, h, w], data)?;
    let t = teacher(p);
    let labels = (0..n)
        .map(|s| {
            let img = images.sample(s);
            let mut feats = vec![0.0; p * 16];
            for c in 0..p {
                for y in 0..h {
                    for x in 0..w {
                        let b = (y * 4 / h) * 4 + x * 4 / w;
                        feats[c * 16 + b] += img[(c * h + y) * w + x];
                    }
                }
            }
            (0..SYNTHETIC_CLASSES)
                .map(|k| {
                    let wk = &t[k * p * 16..(k + 1) * p * 16];
                    wk.iter().zip(&feats).map(|(a, b)| a * b).sum::<f64>()
                })
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k)
                .unwrap()
        })
        .collect();
    Dataset::new("synthetic", images, labels, SYNTHETIC_CLASSES)
}

/// Random subset keeping `floor(fraction * count)` samples, either per class
/// (`per_class`) or overall. Indices are returned in shuffled order.
pub fn subsample(ds: &Dataset, fraction: f64, per_class: bool, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut r = rng::seeded(seed);
    let mut picked = Vec::new();
    if per_class {
        for class in 0..ds.classes {
            let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
            if members.is_empty() {
                continue;
            }
            let keep = (fraction * members.len() as f64).floor() as usize;
            if keep == 0 {
                return Err(Error::param(format!(
                    "fraction {fraction} keeps no sample of class {class} ({} present)",
                    members.len()
                )));
            }
            members.shuffle(&mut r);
            picked.extend_from_slice(&members[..keep]);
        }
    } else {
        let mut all: Vec<usize> = (0..ds.len()).collect();
        let keep = (fraction * all.len() as f64).floor() as usize;
        if keep == 0 {
            return Err(Error::param(format!("fraction {fraction} keeps no samples")));
        }
        all.shuffle(&mut r);
        picked.extend_from_slice(&all[..keep]);
    }
    picked.shuffle(&mut r);
    ds.select(&picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: usize, rows: usize, cols: usize, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..n * rows * cols).map(fill));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn zero_record_loads_as_zeros_padded() {
        let ds = mnist_from_idx_bytes(&idx_images(2, 28, 28, |_| 0), &idx_labels(&[3, 4])).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 32, 32]);
        assert!(ds.images.data().iter().all(|&v| v == 0.0));
        assert_eq!(ds.labels, vec![3, 4]);
    }

    #[test]
    fn pixels_are_position_exact() {
        let images = idx_images(3, 28, 28, |i| (i * 7 % 256) as u8);
        let ds = mnist_from_idx_bytes(&images, &idx_labels(&[0, 1, 2])).unwrap();
        for k in 0..3 {
            for y in 0..28 {
                for x in 0..28 {
                    let byte = images[16 + k * 784 + y * 28 + x];
                    assert_eq!(ds.images.get(&[k, 0, y + 2, x + 2]).unwrap(), byte as f64 / 255.0);
                }
            }
        }
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn label_ten_is_data_error() {
        let r = mnist_from_idx_bytes(&idx_images(1, 28, 28, |_| 1), &idx_labels(&[10]));
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn bad_magic_and_count_mismatch() {
        let mut images = idx_images(1, 28, 28, |_| 1);
        images[3] = 0;
        assert!(matches!(mnist_from_idx_bytes(&images, &idx_labels(&[1])), Err(Error::Format(_))));
        let images = idx_images(2, 28, 28, |_| 1);
        assert!(matches!(mnist_from_idx_bytes(&images, &idx_labels(&[1])), Err(Error::Data(_))));
        let mut labels = idx_labels(&[1, 2]);
        labels[3] = 0;
        assert!(matches!(mnist_from_idx_bytes(&images, &labels), Err(Error::Format(_))));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic_gaussian(5, 2, 8, 8, 77).unwrap();
        let b = synthetic_gaussian(5, 2, 8, 8, 77).unwrap();
        assert_eq!(a, b);
        assert!(matches!(synthetic_gaussian(0, 1, 8, 8, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn synthetic_pixel_mean_is_centred() {
        // 100 images of 32x32 = 102_400 pixels; sd of the mean ~ 0.0031
        let ds = synthetic_gaussian(100, 1, 32, 32, 5).unwrap();
        let mean = ds.images.data().iter().sum::<f64>() / ds.images.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        let used: std::collections::HashSet<_> = ds.labels.iter().collect();
        assert!(used.len() > 5);
    }

    #[test]
    fn subsample_per_class() {
        let images = Tensor::zeros(&[5000 * 2, 1, 1, 1]).unwrap();
        let labels = (0..10_000).map(|i| i % 2).collect();
        let ds = Dataset::new("toy", images, labels, 2).unwrap();
        let sub = subsample(&ds, 0.25, true, 3).unwrap();
        assert_eq!(sub.labels.iter().filter(|&&l| l == 0).count(), 1250);
        assert_eq!(sub.labels.iter().filter(|&&l| l == 1).count(), 1250);
        assert!(matches!(subsample(&ds, 1e-9, true, 3), Err(Error::Parameter(_))));
        assert!(subsample(&ds, 0.0, true, 3).is_err());
    }

    #[test]
    fn subsample_full_is_a_permutation() {
        let ds = synthetic_gaussian(40, 1, 4, 4, 9).unwrap();
        let sub = subsample(&ds, 1.0, true, 4).unwrap();
        assert_eq!(sub.len(), ds.len());
        let key = |d: &Dataset| {
            let mut v: Vec<(u64, usize)> = (0..d.len()).map(|i| (d.images.sample(i)[0].to_bits(), d.labels[i])).collect();
            v.sort();
            v
        };
        assert_eq!(key(&sub), key(&ds));
    }
}
