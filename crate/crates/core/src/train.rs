//! Mini-batch SGD training, evaluation, finite-difference gradient checks
//! and the model file format.
//!
//! Model file, little-endian: `"LBCM"`, `u16` version, `u32` length plus the
//! spec text, `u32` tensor count, then per tensor a `u16` name length, the
//! name, a `u8` order, `u32` extents and `f64` values; finally a `u32` bank
//! count followed by that many anchor bank records.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::anchor::{SparseBinaryFilterBank, BANK_RECORD_LEN};
use crate::conv::OpCounter;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{Network, NetworkSpec, Param};
use crate::rng;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"LBCM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Momentum(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// `(epoch, factor)`: from that epoch on the rate is multiplied by `factor`.
    pub schedule: Vec<(usize, f64)>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Evaluate the test set every this many epochs (0: only after the last).
    /// The last epoch is always evaluated.
    pub test_every: usize,
}

impl TrainConfig {
    /// Plain SGD at `lr = 1e-3`, decayed by 0.1 at 50% and 75% of the epochs.
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            lr: 1e-3,
            schedule: vec![(epochs / 2, 0.1), (epochs * 3 / 4, 0.1)],
            epochs,
            batch_size,
            seed,
            optimizer: Optimizer::Sgd,
            test_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be >= 1"));
        }
        if let Optimizer::Momentum(mu) = self.optimizer {
            if !(0.0..1.0).contains(&mu) {
                return Err(Error::param(format!("momentum must be in [0, 1), got {mu}")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.lr, |lr, (_, f)| lr * f)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub wall_seconds: f64,
}

/// Equality ignores wall-clock time.
impl PartialEq for EpochMetrics {
    fn eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.train_acc.to_bits() == other.train_acc.to_bits()
            && self.test_acc.map(f64::to_bits) == other.test_acc.map(f64::to_bits)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub ops: OpCounter,
}

impl RunMetrics {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_acc)
    }

    /// `epoch,train_loss,train_acc,test_acc,seconds`. Missing test accuracy
    /// is an empty field; the seconds field is left empty unless `with_time`.
    pub fn to_csv(&self, with_time: bool) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,test_acc,seconds\n");
        for e in &self.epochs {
            let test = e.test_acc.map(|a| a.to_string()).unwrap_or_default();
            let secs = if with_time { format!("{:.3}", e.wall_seconds) } else { String::new() };
            let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.train_loss, e.train_acc, test, secs);
        }
        s
    }
}

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / n`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        _ => return Err(Error::shape(format!("logits must be n x K, got {:?}", logits.shape()))),
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut grad = logits.zeros_like();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Data(format!("label {y} outside [0, {k})")));
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        for (j, g) in grad.data_mut()[i * k..(i + 1) * k].iter_mut().enumerate() {
            *g = ((row[j] - lse).exp() - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(i, y)| argmax(&logits.data()[i * k..(i + 1) * k]) == **y)
        .count()
}

/// Classification accuracy over `ds`, evaluated in batches of `batch_size`.
pub fn evaluate(net: &Network, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut hits = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = ds.batch(chunk)?;
        hits += correct(&net.forward(&x, &mut OpCounter::default())?, &y);
    }
    Ok(hits as f64 / ds.len() as f64)
}

fn shuffle(order: &mut [usize], r: &mut rng::Rng) {
    for i in (1..order.len()).rev() {
        let j = rng::bounded(r, i + 1);
        order.swap(i, j);
    }
}

fn bank_hashes(net: &Network) -> Vec<u64> {
    net.banks().iter().map(|b| b.content_hash()).collect()
}

/// Trains `net` in place. Each epoch reshuffles the training set from a
/// stream seeded by `cfg.seed`; anchor bank hashes are compared against
/// their initial values after every epoch.
pub fn train(net: &mut Network, train_set: &Dataset, test_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<RunMetrics> {
    train_with(net, train_set, test_set, cfg, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    net: &mut Network,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunMetrics> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let hashes = bank_hashes(net);
    let mut shuffle_rng = rng::seeded(rng::derive(cfg.seed, 0x5EED));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut velocity: Vec<Tensor> = net.params().iter().map(|p| p.value.zeros_like()).collect();
    let mut metrics = RunMetrics::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        shuffle(&mut order, &mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.batch(chunk)?;
            let pass = net.forward_train(&x, &mut metrics.ops)?;
            let (loss, grad) = cross_entropy(&pass.logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("loss became {loss}"),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            hits += correct(&pass.logits, &y);
            let grads = net.backward(&pass, &grad, &mut metrics.ops)?;
            for ((p, g), vel) in net.params_mut().iter_mut().zip(&grads.params).zip(&mut velocity) {
                match cfg.optimizer {
                    Optimizer::Sgd => {
                        for (w, g) in p.value.data_mut().iter_mut().zip(g.data()) {
                            *w -= lr * g;
                        }
                    }
                    Optimizer::Momentum(mu) => {
                        for ((w, g), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                            *v = mu * *v + g;
                            *w -= lr * *v;
                        }
                    }
                }
            }
        }
        if bank_hashes(net) != hashes {
            return Err(Error::State(format!("anchor bank changed during epoch {epoch}")));
        }
        let due = epoch + 1 == cfg.epochs || (cfg.test_every > 0 && (epoch + 1) % cfg.test_every == 0);
        let test_acc = match test_set {
            Some(t) if due => Some(evaluate(net, t, cfg.batch_size.max(50))?),
            _ => None,
        };
        let e = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: hits as f64 / train_set.len() as f64,
            test_acc,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&e);
        metrics.epochs.push(e);
    }
    Ok(metrics)
}

/// Builds a network from `spec` with `cfg.seed` and trains it.
pub fn train_spec(
    spec: &NetworkSpec,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Network, RunMetrics)> {
    let mut net = Network::build(spec, cfg.seed)?;
    let metrics = train(&mut net, train_set, test_set, cfg)?;
    Ok((net, metrics))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates to check; at least 50 unless the network has fewer.
    pub coords: usize,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            coords: 50,
            seed: 0,
            floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because their perturbation moved a ReLU across
    /// or near its kink.
    pub excluded: usize,
}

/// Central-difference check of the cross-entropy gradient with respect to
/// randomly chosen learnable coordinates.
///
/// A coordinate is excluded when the on/off pattern of any ReLU differs
/// between the base and the two perturbed passes, or when a ReLU whose
/// pre-activation is within `10 * eps` of zero moves under the perturbation.
pub fn grad_check(net: &Network, x: &Tensor, labels: &[usize], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if opts.eps.is_nan() || opts.eps <= 0.0 {
        return Err(Error::param("eps must be > 0"));
    }
    let mut ops = OpCounter::default();
    let pass = net.forward_train(x, &mut ops)?;
    let (_, g) = cross_entropy(&pass.logits, labels)?;
    let analytic = net.backward(&pass, &g, &mut ops)?.params;
    let base_pre = net.relu_preactivations(&pass);

    let sizes: Vec<usize> = net.params().iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let want = opts.coords.max(50).min(total);
    let mut r = rng::seeded(opts.seed);
    let mut picked = BTreeSet::new();
    while picked.len() < want {
        picked.insert(rng::bounded(&mut r, total));
    }

    let mut probe = net.clone();
    let mut eval = |pi: usize, off: usize, delta: f64| -> Result<(f64, Vec<f64>)> {
        let orig = probe.params()[pi].value.data()[off];
        probe.params_mut()[pi].value.data_mut()[off] = orig + delta;
        let pass = probe.forward_train(x, &mut OpCounter::default())?;
        probe.params_mut()[pi].value.data_mut()[off] = orig;
        let (loss, _) = cross_entropy(&pass.logits, labels)?;
        Ok((loss, probe.relu_preactivations(&pass)))
    };
    let near = 10.0 * opts.eps;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        excluded: 0,
    };
    for flat in picked {
        let (mut pi, mut off) = (0, flat);
        while off >= sizes[pi] {
            off -= sizes[pi];
            pi += 1;
        }
        let (lp, pre_p) = eval(pi, off, opts.eps)?;
        let (lm, pre_m) = eval(pi, off, -opts.eps)?;
        let kink = base_pre.iter().zip(&pre_p).zip(&pre_m).any(|((&b, &p), &m)| {
            let flips = (b > 0.0) != (p > 0.0) || (b > 0.0) != (m > 0.0);
            let close = b.abs().min(p.abs()).min(m.abs()) < near && (p != b || m != b);
            flips || close
        });
        if kink {
            report.excluded += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * opts.eps);
        let a = analytic[pi].data()[off];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        report.max_rel_err = report.max_rel_err.max(err);
        report.checked += 1;
    }
    Ok(report)
}

pub fn model_to_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let text = net.spec().blocks_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::format("parameter name too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            let d = u32::try_from(d).map_err(|_| Error::format("tensor extent exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(net.banks().len() as u32).to_le_bytes());
    for b in net.banks() {
        b.write_to(&mut out)?;
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(format!("model file truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses a complete model file; nothing is returned unless every part is valid.
pub fn model_from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MODEL_MAGIC {
        return Err(Error::format("not a model file (bad magic)"));
    }
    let version = c.u16()?;
    if version != MODEL_VERSION {
        return Err(Error::format(format!("unsupported model version {version}")));
    }
    let len = c.u32()?;
    let text = std::str::from_utf8(c.take(len)?).map_err(|_| Error::format("spec text is not UTF-8"))?;
    let spec = NetworkSpec::parse(text).map_err(|e| Error::format(format!("stored spec: {e}")))?;
    let count = c.u32()?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let order = c.take(1)?[0] as usize;
        let shape = (0..order).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format("tensor size overflows"))?
            / 8;
        let raw = c.take(numel * 8)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let value = Tensor::from_vec(&shape, data).map_err(|e| Error::format(format!("tensor {name}: {e}")))?;
        params.push(Param { name, value });
    }
    let nbanks = c.u32()?;
    let mut banks = Vec::with_capacity(nbanks.min(1 << 16));
    for _ in 0..nbanks {
        banks.push(SparseBinaryFilterBank::from_bytes(c.take(BANK_RECORD_LEN)?)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Network::from_parts(&spec, params, banks).map_err(|e| match e {
        Error::Format(_) => e,
        other => Error::format(other.to_string()),
    })
}

/// Writes the model to a temporary sibling first and renames it into place.
pub fn save_model(net: &Network, path: &Path) -> Result<()> {
    let bytes = model_to_bytes(net)?;
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Network> {
    model_from_bytes(&std::fs::read(path)?)
}
