//! Single layers: activations, the LBC layer, the dense baseline block,
//! adaptive average pooling and the bias-free fully connected layer.

use std::sync::Arc;

use crate::anchor::SparseBinaryFilterBank;
use crate::conv::{
    conv2d_1x1, conv2d_1x1_backward, conv2d_dense, conv2d_dense_backward, conv2d_sparse_binary,
    conv2d_sparse_binary_backward, ConvGeometry, OpCounter,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    /// Derivative given pre-activation `z` and output `a`. ReLU uses 0 at the kink.
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "none" | "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::param(format!("unknown activation {other:?}"))),
        }
    }

    pub fn forward(self, z: &Tensor) -> Tensor {
        if self == Activation::Identity {
            return z.clone();
        }
        z.map(|v| self.apply(v))
    }

    /// `grad_z = grad_a * act'(z)`.
    pub fn backward(self, z: &Tensor, a: &Tensor, grad_a: &Tensor) -> Tensor {
        if self == Activation::Identity {
            return grad_a.clone();
        }
        let mut g = grad_a.clone();
        for ((g, &z), &a) in g.data_mut().iter_mut().zip(z.data()).zip(a.data()) {
            *g *= self.derivative(z, a);
        }
        g
    }
}

/// Intermediates kept by the forward pass of a convolution-like block.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub input: Tensor,
    /// Pre-activation maps (difference maps for LBC).
    pub pre: Tensor,
    /// Activated maps (bit maps for LBC).
    pub act: Tensor,
}

pub(crate) fn lbc_forward_impl(
    bank: &SparseBinaryFilterBank,
    act: Activation,
    v: &Tensor,
    geom: ConvGeometry,
    x: &Tensor,
    counter: &mut OpCounter,
) -> Result<(Tensor, ConvCache)> {
    let pre = conv2d_sparse_binary(x, bank, geom, counter)?;
    let a = act.forward(&pre);
    let out = conv2d_1x1(&a, v, counter)?;
    Ok((
        out,
        ConvCache {
            input: x.clone(),
            pre,
            act: a,
        },
    ))
}

pub(crate) fn lbc_backward_impl(
    bank: &SparseBinaryFilterBank,
    act: Activation,
    v: &Tensor,
    geom: ConvGeometry,
    cache: &ConvCache,
    grad_out: &Tensor,
    counter: &mut OpCounter,
) -> Result<(Tensor, Tensor)> {
    let (grad_a, grad_v) = conv2d_1x1_backward(&cache.act, v, grad_out, counter)?;
    let grad_pre = act.backward(&cache.pre, &cache.act, &grad_a);
    let grad_x = conv2d_sparse_binary_backward(&cache.input, bank, &grad_pre, geom, counter)?;
    Ok((grad_x, grad_v))
}

/// Local binary convolution: fixed sparse ±1 filters, an activation, then a
/// learnable 1x1 combination `v` of shape `q x m x 1 x 1`.
///
/// `x_{l+1}^t = sum_i act(sum_s b_i^s * x_l^s) * v[t, i]`
#[derive(Debug, Clone)]
pub struct LbcLayer {
    pub bank: Arc<SparseBinaryFilterBank>,
    pub activation: Activation,
    pub v: Tensor,
    pub geom: ConvGeometry,
    cache: Option<ConvCache>,
}

impl LbcLayer {
    pub fn new(bank: Arc<SparseBinaryFilterBank>, activation: Activation, v: Tensor, geom: ConvGeometry) -> Result<Self> {
        let (_, m, kh, kw) = v.dims4()?;
        if m != bank.m() || kh != 1 || kw != 1 {
            return Err(Error::shape(format!(
                "v {:?} does not combine {} anchor maps",
                v.shape(),
                bank.m()
            )));
        }
        Ok(LbcLayer {
            bank,
            activation,
            v,
            geom,
            cache: None,
        })
    }

    pub fn learnable_params(&self) -> usize {
        self.v.len()
    }

    /// Forward pass; keeps the difference and bit maps for [`LbcLayer::backward`].
    pub fn forward(&mut self, x: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
        let (out, cache) = lbc_forward_impl(&self.bank, self.activation, &self.v, self.geom, x, counter)?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Returns `(grad_x, grad_v)`. The anchor bank has no gradient.
    pub fn backward(&self, grad_out: &Tensor, counter: &mut OpCounter) -> Result<(Tensor, Tensor)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("LBC backward called before forward".into()))?;
        lbc_backward_impl(&self.bank, self.activation, &self.v, self.geom, cache, grad_out, counter)
    }
}

pub(crate) fn conv_block_forward(
    w: &Tensor,
    post: Option<&Tensor>,
    act: Activation,
    geom: ConvGeometry,
    x: &Tensor,
    counter: &mut OpCounter,
) -> Result<(Tensor, ConvCache)> {
    let pre = conv2d_dense(x, w, geom, counter)?;
    let a = act.forward(&pre);
    let out = match post {
        Some(p) => conv2d_1x1(&a, p, counter)?,
        None => a.clone(),
    };
    Ok((
        out,
        ConvCache {
            input: x.clone(),
            pre,
            act: a,
        },
    ))
}

/// Returns `(grad_x, grad_w, grad_post)`.
pub(crate) fn conv_block_backward(
    w: &Tensor,
    post: Option<&Tensor>,
    act: Activation,
    geom: ConvGeometry,
    cache: &ConvCache,
    grad_out: &Tensor,
    counter: &mut OpCounter,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (grad_a, grad_post) = match post {
        Some(p) => {
            let (ga, gp) = conv2d_1x1_backward(&cache.act, p, grad_out, counter)?;
            (ga, Some(gp))
        }
        None => (grad_out.clone(), None),
    };
    let grad_pre = act.backward(&cache.pre, &cache.act, &grad_a);
    let (grad_x, grad_w) = conv2d_dense_backward(&cache.input, w, &grad_pre, geom, counter)?;
    Ok((grad_x, grad_w, grad_post))
}

/// Dense baseline block: learnable `q x p x h x w` convolution, activation,
/// and an optional learnable `q x q` 1x1 convolution.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub post: Option<Tensor>,
    pub activation: Activation,
    pub geom: ConvGeometry,
    cache: Option<ConvCache>,
}

impl ConvLayer {
    pub fn new(weight: Tensor, post: Option<Tensor>, activation: Activation, geom: ConvGeometry) -> Result<Self> {
        let (q, _, _, _) = weight.dims4()?;
        if let Some(p) = &post {
            if p.shape() != [q, q, 1, 1] {
                return Err(Error::shape(format!("post 1x1 must be {q}x{q}x1x1, got {:?}", p.shape())));
            }
        }
        Ok(ConvLayer {
            weight,
            post,
            activation,
            geom,
            cache: None,
        })
    }

    pub fn learnable_params(&self) -> usize {
        self.weight.len() + self.post.as_ref().map_or(0, Tensor::len)
    }

    pub fn forward(&mut self, x: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
        let (out, cache) = conv_block_forward(&self.weight, self.post.as_ref(), self.activation, self.geom, x, counter)?;
        self.cache = Some(cache);
        Ok(out)
    }

    pub fn backward(&self, grad_out: &Tensor, counter: &mut OpCounter) -> Result<(Tensor, Tensor, Option<Tensor>)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("conv backward called before forward".into()))?;
        conv_block_backward(&self.weight, self.post.as_ref(), self.activation, self.geom, cache, grad_out, counter)
    }
}

/// Bin `i` of `out` adaptive pooling bins over an extent `len`.
fn pool_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// Adaptive average pooling to `out x out`: bin `i` covers
/// `floor(i*H/out) .. ceil((i+1)*H/out)`.
pub fn avgpool_forward(x: &Tensor, out: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if out == 0 || out > h || out > w {
        return Err(Error::shape(format!("cannot pool {h}x{w} to {out}x{out}")));
    }
    let mut y = Tensor::zeros(&[n, c, out, out])?;
    let yd = y.data_mut();
    for s in 0..n {
        let xs = x.sample(s);
        for ch in 0..c {
            let plane = &xs[ch * h * w..(ch + 1) * h * w];
            for by in 0..out {
                let (y0, y1) = pool_bin(by, h, out);
                for bx in 0..out {
                    let (x0, x1) = pool_bin(bx, w, out);
                    let mut sum = 0.0;
                    for yy in y0..y1 {
                        sum += plane[yy * w + x0..yy * w + x1].iter().sum::<f64>();
                    }
                    yd[((s * c + ch) * out + by) * out + bx] = sum / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
    }
    Ok(y)
}

pub fn avgpool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let mut gx = Tensor::zeros(input_shape)?;
    let (n, c, h, w) = gx.dims4()?;
    let (gn, gc, out, out2) = grad_out.dims4()?;
    if gn != n || gc != c || out != out2 {
        return Err(Error::shape(format!(
            "pool gradient {:?} does not match input {input_shape:?}",
            grad_out.shape()
        )));
    }
    let gd = gx.data_mut();
    for s in 0..n {
        for ch in 0..c {
            for by in 0..out {
                let (y0, y1) = pool_bin(by, h, out);
                for bx in 0..out {
                    let (x0, x1) = pool_bin(bx, w, out);
                    let g = grad_out.data()[((s * c + ch) * out + by) * out + bx] / ((y1 - y0) * (x1 - x0)) as f64;
                    for yy in y0..y1 {
                        for v in &mut gd[((s * c + ch) * h + yy) * w + x0..((s * c + ch) * h + yy) * w + x1] {
                            *v += g;
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Bias-free fully connected layer on the flattened input: `z[n, o] = sum_i w[o, i] x[n, i]`.
/// Returns an `n x out x 1 x 1` tensor.
pub fn fc_forward(x: &Tensor, w: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
    let n = x.shape()[0];
    let fan_in = x.len() / n;
    let (out, w_in) = match *w.shape() {
        [o, i] => (o, i),
        _ => return Err(Error::shape(format!("fc weights must be 2-D, got {:?}", w.shape()))),
    };
    if w_in != fan_in {
        return Err(Error::shape(format!("fc expects {w_in} inputs, got {fan_in}")));
    }
    let mut y = Tensor::zeros(&[n, out, 1, 1])?;
    for s in 0..n {
        let xs = &x.data()[s * fan_in..(s + 1) * fan_in];
        for o in 0..out {
            let row = &w.data()[o * fan_in..(o + 1) * fan_in];
            y.data_mut()[s * out + o] = row.iter().zip(xs).map(|(a, b)| a * b).sum();
        }
    }
    let taps = (n * out * fan_in) as u64;
    counter.multiplications += taps;
    counter.additions += taps;
    Ok(y)
}

/// Returns `(grad_x, grad_w)`; `grad_x` has the shape of `x`.
pub fn fc_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor, counter: &mut OpCounter) -> Result<(Tensor, Tensor)> {
    let n = x.shape()[0];
    let fan_in = x.len() / n;
    let out = w.shape()[0];
    if grad_out.len() != n * out {
        return Err(Error::shape(format!("fc gradient {:?} for {n}x{out} output", grad_out.shape())));
    }
    let mut gx = x.zeros_like();
    let mut gw = w.zeros_like();
    for s in 0..n {
        let xs = &x.data()[s * fan_in..(s + 1) * fan_in];
        for o in 0..out {
            let g = grad_out.data()[s * out + o];
            let row = &w.data()[o * fan_in..(o + 1) * fan_in];
            for (a, &b) in gx.data_mut()[s * fan_in..(s + 1) * fan_in].iter_mut().zip(row) {
                *a += g * b;
            }
            for (a, &b) in gw.data_mut()[o * fan_in..(o + 1) * fan_in].iter_mut().zip(xs) {
                *a += g * b;
            }
        }
    }
    let taps = (n * out * fan_in) as u64;
    counter.multiplications += 2 * taps;
    counter.additions += 2 * taps;
    Ok((gx, gw))
}
