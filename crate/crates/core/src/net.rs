//! Network specifications, assembly, forward/backward passes and
//! parameter accounting.
//!
//! Text format, one block per line (`;` also separates blocks, `#` starts a comment):
//!
//! ```text
//! input c=1 h=32 w=32
//! shared-bank
//! conv q=32 k=1 act=none post=false
//! res{ lbc m=32 q=32 k=3 sparsity=0.5 act=relu }
//! avgpool out=6
//! fc out=10
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng as _;

use crate::anchor::{generate_bank, nnz_for, Origin, SparseBinaryFilterBank};
use crate::conv::{ConvGeometry, OpCounter};
use crate::error::{Error, Result};
use crate::layers::{
    avgpool_backward, avgpool_forward, conv_block_backward, conv_block_forward, fc_backward, fc_forward,
    lbc_backward_impl, lbc_forward_impl, Activation, ConvCache,
};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LbcSpec {
    pub m: usize,
    pub q: usize,
    pub k: usize,
    pub sparsity: f64,
    pub act: Activation,
    pub groups: usize,
    /// Bank seed; derived from the network seed when absent.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub q: usize,
    pub k: usize,
    pub act: Activation,
    /// Trailing learnable `q x q` 1x1 convolution.
    pub post: bool,
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockSpec {
    Lbc(LbcSpec),
    Conv(ConvSpec),
    AvgPool { out: usize },
    Fc { out: usize, act: Activation },
    /// Inner blocks plus an identity shortcut.
    Residual(Vec<BlockSpec>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// `(channels, height, width)` of one input sample.
    pub input: (usize, usize, usize),
    pub blocks: Vec<BlockSpec>,
    /// All LBC blocks use the bank of the first one.
    pub shared_bank: bool,
}

/// Parameter totals. `lbc_learnable` and `cnn_equivalent` cover LBC blocks only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCount {
    pub learnable: usize,
    pub fixed: usize,
    pub lbc_learnable: usize,
    pub cnn_equivalent: usize,
    pub ratio_vs_cnn: f64,
}

type Shape3 = (usize, usize, usize);

fn parse_kv(tokens: &[&str], line: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::param(format!("expected key=value, got {tok:?} in {line:?}")))?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::param(format!("duplicate key {k:?} in {line:?}")));
        }
    }
    Ok(map)
}

struct Fields<'a> {
    map: BTreeMap<String, String>,
    line: &'a str,
}

impl Fields<'_> {
    fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::param(format!("bad value {v:?} for {key} in {:?}", self.line))),
        }
    }

    fn need<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        self.take(key)?
            .ok_or_else(|| Error::param(format!("missing {key}= in {:?}", self.line)))
    }

    fn act(&mut self, default: Activation) -> Result<Activation> {
        match self.map.remove("act") {
            None => Ok(default),
            Some(v) => Activation::parse(&v),
        }
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::param(format!("unknown key {k:?} in {:?}", self.line))),
        }
    }
}

enum Token {
    Open,
    Close,
    Stmt(String),
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("");
        for piece in line.split(';') {
            let mut cur = String::new();
            for ch in piece.chars() {
                if ch == '{' || ch == '}' {
                    if !cur.trim().is_empty() {
                        out.push(Token::Stmt(cur.trim().to_string()));
                    }
                    cur.clear();
                    out.push(if ch == '{' { Token::Open } else { Token::Close });
                } else {
                    cur.push(ch);
                }
            }
            if !cur.trim().is_empty() {
                out.push(Token::Stmt(cur.trim().to_string()));
            }
        }
    }
    out
}

fn parse_block(stmt: &str) -> Result<BlockSpec> {
    let tokens: Vec<&str> = stmt.split_whitespace().collect();
    let mut f = Fields {
        map: parse_kv(&tokens[1..], stmt)?,
        line: stmt,
    };
    let block = match tokens[0] {
        "lbc" => BlockSpec::Lbc(LbcSpec {
            m: f.need("m")?,
            q: f.need("q")?,
            k: f.need("k")?,
            sparsity: f.take("sparsity")?.unwrap_or(0.5),
            act: f.act(Activation::Relu)?,
            groups: f.take("groups")?.unwrap_or(1),
            seed: f.take("seed")?,
        }),
        "conv" => BlockSpec::Conv(ConvSpec {
            q: f.need("q")?,
            k: f.need("k")?,
            act: f.act(Activation::Relu)?,
            post: f.take("post")?.unwrap_or(true),
            groups: f.take("groups")?.unwrap_or(1),
        }),
        "avgpool" => BlockSpec::AvgPool { out: f.need("out")? },
        "fc" => BlockSpec::Fc {
            out: f.need("out")?,
            act: f.act(Activation::Identity)?,
        },
        other => return Err(Error::param(format!("unknown block {other:?}"))),
    };
    f.finish()?;
    Ok(block)
}

impl NetworkSpec {
    /// Parses and validates the text format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut input = None;
        let mut shared_bank = false;
        let mut stack: Vec<Vec<BlockSpec>> = vec![Vec::new()];
        let mut tokens = tokenize(text).into_iter().peekable();
        while let Some(tok) = tokens.next() {
            match tok {
                Token::Stmt(s) if s == "res" => {
                    if !matches!(tokens.next(), Some(Token::Open)) {
                        return Err(Error::param("expected '{' after res"));
                    }
                    stack.push(Vec::new());
                }
                Token::Open => return Err(Error::param("'{' must follow res")),
                Token::Close => {
                    if stack.len() < 2 {
                        return Err(Error::param("unbalanced '}'"));
                    }
                    let inner = stack.pop().expect("checked depth");
                    stack.last_mut().expect("checked depth").push(BlockSpec::Residual(inner));
                }
                Token::Stmt(s) if s == "shared-bank" => shared_bank = true,
                Token::Stmt(s) if s.starts_with("input") && s.split_whitespace().next() == Some("input") => {
                    let tokens: Vec<&str> = s.split_whitespace().collect();
                    let mut f = Fields {
                        map: parse_kv(&tokens[1..], &s)?,
                        line: &s,
                    };
                    let shape = (f.need("c")?, f.need("h")?, f.need("w")?);
                    f.finish()?;
                    if input.replace(shape).is_some() {
                        return Err(Error::param("input declared twice"));
                    }
                }
                Token::Stmt(s) => stack.last_mut().expect("stack never empty").push(parse_block(&s)?),
            }
        }
        if stack.len() != 1 {
            return Err(Error::param("unclosed res{"));
        }
        let spec = NetworkSpec {
            input: input.ok_or_else(|| Error::param("missing `input c= h= w=` line"))?,
            blocks: stack.pop().expect("stack never empty"),
            shared_bank,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Structural checks: block parameters, shape flow, residual endpoints
    /// and bank compatibility under sharing. A classifier head is not required.
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::param("input extents must be >= 1"));
        }
        if self.blocks.is_empty() {
            return Err(Error::param("network has no blocks"));
        }
        let mut first: Option<(usize, LbcSpec)> = None;
        let mut err = None;
        walk(&self.blocks, self.input, "", &mut |_, b, input, _| {
            if let BlockSpec::Lbc(l) = b {
                let key = (input.0, LbcSpec { q: 0, act: Activation::Relu, seed: None, ..l.clone() });
                match &first {
                    None => first = Some(key),
                    Some(f) if self.shared_bank && *f != key && err.is_none() => {
                        err = Some(Error::param(
                            "shared-bank needs every LBC block to have the same input channels, m, k, sparsity and groups",
                        ));
                    }
                    _ => {}
                }
            }
        })?;
        err.map_or(Ok(()), Err)
    }

    /// Validation plus the requirements of a trainable classifier: the last
    /// block is `fc`.
    pub fn validate_classifier(&self) -> Result<usize> {
        self.validate()?;
        match self.blocks.last() {
            Some(BlockSpec::Fc { out, .. }) => Ok(*out),
            _ => Err(Error::param("the last block must be fc")),
        }
    }

    pub fn output_shape(&self) -> Result<Shape3> {
        walk(&self.blocks, self.input, "", &mut |_, _, _, _| {})
    }

    pub fn lbc_blocks(&self) -> usize {
        let mut d = 0;
        let _ = walk(&self.blocks, self.input, "", &mut |_, b, _, _| {
            if matches!(b, BlockSpec::Lbc(_)) {
                d += 1;
            }
        });
        d
    }

    /// Warnings for a ReLU output feeding directly into an LBC block.
    pub fn lint(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        let mut prev_relu: Option<String> = None;
        let _ = walk(&self.blocks, self.input, "", &mut |path, b, _, _| {
            if let BlockSpec::Lbc(_) = b {
                if let Some(p) = &prev_relu {
                    warnings.push(format!("block {p} applies relu just before LBC block {path}"));
                }
            }
            prev_relu = match b {
                BlockSpec::Conv(c) if !c.post && c.act == Activation::Relu => Some(path.to_string()),
                BlockSpec::Fc { act: Activation::Relu, .. } => Some(path.to_string()),
                BlockSpec::Lbc(_) | BlockSpec::Conv(_) | BlockSpec::Fc { .. } | BlockSpec::AvgPool { .. } => None,
                BlockSpec::Residual(_) => prev_relu.take(),
            };
        });
        warnings
    }

    /// Canonical text without the shared-bank directive.
    pub fn blocks_text(&self) -> String {
        let mut s = format!("input c={} h={} w={}\n", self.input.0, self.input.1, self.input.2);
        write_blocks(&mut s, &self.blocks, 0);
        s
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = self.blocks_text();
        match self.shared_bank {
            true => {
                let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
                write!(f, "{first}\nshared-bank\n{rest}")
            }
            false => f.write_str(&text),
        }
    }
}

fn write_blocks(s: &mut String, blocks: &[BlockSpec], depth: usize) {
    let indent = "  ".repeat(depth);
    for b in blocks {
        let line = match b {
            BlockSpec::Lbc(l) => {
                let mut t = format!(
                    "lbc m={} q={} k={} sparsity={} act={}",
                    l.m,
                    l.q,
                    l.k,
                    l.sparsity,
                    l.act.name()
                );
                if l.groups != 1 {
                    t += &format!(" groups={}", l.groups);
                }
                if let Some(seed) = l.seed {
                    t += &format!(" seed={seed}");
                }
                t
            }
            BlockSpec::Conv(c) => {
                let mut t = format!("conv q={} k={} act={} post={}", c.q, c.k, c.act.name(), c.post);
                if c.groups != 1 {
                    t += &format!(" groups={}", c.groups);
                }
                t
            }
            BlockSpec::AvgPool { out } => format!("avgpool out={out}"),
            BlockSpec::Fc { out, act } => format!("fc out={out} act={}", act.name()),
            BlockSpec::Residual(inner) => {
                s.push_str(&format!("{indent}res{{\n"));
                write_blocks(s, inner, depth + 1);
                s.push_str(&format!("{indent}}}\n"));
                continue;
            }
        };
        s.push_str(&format!("{indent}{line}\n"));
    }
}

fn check_groups(groups: usize, a: usize, b: usize, path: &str) -> Result<()> {
    if groups == 0 || !a.is_multiple_of(groups) || !b.is_multiple_of(groups) {
        return Err(Error::param(format!(
            "block {path}: groups={groups} must divide {a} and {b}"
        )));
    }
    Ok(())
}

/// Shape inference over the blocks in execution order. `visit` receives the
/// block path (`"2"`, `"2.0"`), the block, its input and output shapes;
/// residual containers are visited before their contents.
fn walk(
    blocks: &[BlockSpec],
    mut shape: Shape3,
    prefix: &str,
    visit: &mut dyn FnMut(&str, &BlockSpec, Shape3, Shape3),
) -> Result<Shape3> {
    for (i, b) in blocks.iter().enumerate() {
        let path = format!("{prefix}{i}");
        let (c, h, w) = shape;
        let out = match b {
            BlockSpec::Lbc(l) => {
                if l.m == 0 || l.q == 0 || l.k == 0 || l.k % 2 == 0 {
                    return Err(Error::param(format!("block {path}: m, q >= 1 and odd k required")));
                }
                if !(l.sparsity > 0.0 && l.sparsity <= 1.0) {
                    return Err(Error::param(format!("block {path}: sparsity must be in (0, 1]")));
                }
                check_groups(l.groups, c, l.m, &path)?;
                (l.q, h, w)
            }
            BlockSpec::Conv(cv) => {
                if cv.q == 0 || cv.k == 0 || cv.k % 2 == 0 {
                    return Err(Error::param(format!("block {path}: q >= 1 and odd k required")));
                }
                check_groups(cv.groups, c, cv.q, &path)?;
                (cv.q, h, w)
            }
            BlockSpec::AvgPool { out } => {
                if *out == 0 || *out > h || *out > w {
                    return Err(Error::param(format!("block {path}: cannot pool {h}x{w} to {out}x{out}")));
                }
                (c, *out, *out)
            }
            BlockSpec::Fc { out, .. } => {
                if *out == 0 {
                    return Err(Error::param(format!("block {path}: fc out must be >= 1")));
                }
                (*out, 1, 1)
            }
            BlockSpec::Residual(inner) => {
                if inner.is_empty() {
                    return Err(Error::param(format!("block {path}: empty res{{}}")));
                }
                visit(&path, b, shape, shape);
                let end = walk(inner, shape, &format!("{path}."), visit)?;
                if end != shape {
                    return Err(Error::param(format!(
                        "block {path}: residual maps {shape:?} to {end:?}"
                    )));
                }
                continue;
            }
        };
        visit(&path, b, shape, out);
        shape = out;
    }
    Ok(shape)
}

/// Learnable and fixed parameter totals. The CNN-equivalent count replaces
/// each LBC block by a dense convolution with the same input channels,
/// kernel, groups and `q` outputs; a shared bank is counted once.
pub fn count_params(spec: &NetworkSpec) -> Result<ParamCount> {
    spec.validate()?;
    let mut learnable = 0;
    let mut fixed = 0;
    let mut lbc_learnable = 0;
    let mut cnn_equivalent = 0;
    let mut banks_seen = 0;
    walk(&spec.blocks, spec.input, "", &mut |_, b, (c, h, w), _| match b {
        BlockSpec::Lbc(l) => {
            let pg = c / l.groups;
            learnable += l.m * l.q;
            lbc_learnable += l.m * l.q;
            cnn_equivalent += pg * l.k * l.k * l.q;
            if !spec.shared_bank || banks_seen == 0 {
                fixed += l.m * nnz_for(l.sparsity, pg * l.k * l.k);
            }
            banks_seen += 1;
        }
        BlockSpec::Conv(cv) => {
            learnable += c / cv.groups * cv.k * cv.k * cv.q + if cv.post { cv.q * cv.q } else { 0 };
        }
        BlockSpec::Fc { out, .. } => learnable += c * h * w * out,
        BlockSpec::AvgPool { .. } | BlockSpec::Residual(_) => {}
    })?;
    let ratio_vs_cnn = if lbc_learnable == 0 {
        1.0
    } else {
        cnn_equivalent as f64 / lbc_learnable as f64
    };
    Ok(ParamCount {
        learnable,
        fixed,
        lbc_learnable,
        cnn_equivalent,
        ratio_vs_cnn,
    })
}

/// A named learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
enum Node {
    Lbc {
        bank: usize,
        v: usize,
        act: Activation,
        geom: ConvGeometry,
    },
    Conv {
        w: usize,
        post: Option<usize>,
        act: Activation,
        geom: ConvGeometry,
    },
    AvgPool {
        out: usize,
    },
    Fc {
        w: usize,
        act: Activation,
    },
    Residual(Vec<Node>),
}

/// What a layer's weights look like to the filter statistics in `analysis`.
#[derive(Debug, Clone)]
pub enum LayerFilters<'a> {
    Bank(&'a SparseBinaryFilterBank),
    Dense(&'a Tensor),
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    nodes: Vec<Node>,
    params: Vec<Param>,
    banks: Vec<Arc<SparseBinaryFilterBank>>,
    classes: usize,
}

type BankFactory<'a> = dyn FnMut(usize, &LbcSpec, usize) -> Result<Arc<SparseBinaryFilterBank>> + 'a;
type ParamFactory<'a> = dyn FnMut(&str, &[usize], usize) -> Result<Tensor> + 'a;

struct Assembler<'a> {
    params: Vec<Param>,
    banks: Vec<Arc<SparseBinaryFilterBank>>,
    lbc_index: usize,
    shared: bool,
    make_bank: &'a mut BankFactory<'a>,
    make_param: &'a mut ParamFactory<'a>,
}

impl Assembler<'_> {
    fn param(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<usize> {
        let value = (self.make_param)(&name, shape, fan_in)?;
        if value.shape() != shape {
            return Err(Error::shape(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                value.shape()
            )));
        }
        self.params.push(Param { name, value });
        Ok(self.params.len() - 1)
    }

    fn nodes(&mut self, blocks: &[BlockSpec], mut shape: Shape3, prefix: &str) -> Result<(Vec<Node>, Shape3)> {
        let mut nodes = Vec::with_capacity(blocks.len());
        for (i, b) in blocks.iter().enumerate() {
            let path = format!("{prefix}{i}");
            let (c, h, w) = shape;
            let node = match b {
                BlockSpec::Lbc(l) => {
                    let pg = c / l.groups;
                    let bank = if self.shared && !self.banks.is_empty() {
                        0
                    } else {
                        let bank = (self.make_bank)(self.lbc_index, l, pg)?;
                        if (bank.m(), bank.p(), bank.h(), bank.w()) != (l.m, pg, l.k, l.k) {
                            return Err(Error::shape(format!(
                                "bank for block {path} is {}x{}x{}x{}, expected {}x{pg}x{}x{}",
                                bank.m(),
                                bank.p(),
                                bank.h(),
                                bank.w(),
                                l.m,
                                l.k,
                                l.k
                            )));
                        }
                        self.banks.push(bank);
                        self.banks.len() - 1
                    };
                    self.lbc_index += 1;
                    // each anchor map sums nnz signed inputs, so v sees m * nnz of them
                    let fan_in = l.m * nnz_for(l.sparsity, pg * l.k * l.k);
                    let v = self.param(format!("b{path}.v"), &[l.q, l.m, 1, 1], fan_in)?;
                    shape = (l.q, h, w);
                    Node::Lbc {
                        bank,
                        v,
                        act: l.act,
                        geom: ConvGeometry::same(l.k).with_groups(l.groups),
                    }
                }
                BlockSpec::Conv(cv) => {
                    let pg = c / cv.groups;
                    let wi = self.param(format!("b{path}.w"), &[cv.q, pg, cv.k, cv.k], pg * cv.k * cv.k)?;
                    let post = match cv.post {
                        true => Some(self.param(format!("b{path}.post"), &[cv.q, cv.q, 1, 1], cv.q)?),
                        false => None,
                    };
                    shape = (cv.q, h, w);
                    Node::Conv {
                        w: wi,
                        post,
                        act: cv.act,
                        geom: ConvGeometry::same(cv.k).with_groups(cv.groups),
                    }
                }
                BlockSpec::AvgPool { out } => {
                    shape = (c, *out, *out);
                    Node::AvgPool { out: *out }
                }
                BlockSpec::Fc { out, act } => {
                    let fan_in = c * h * w;
                    let wi = self.param(format!("b{path}.fc"), &[*out, fan_in], fan_in)?;
                    shape = (*out, 1, 1);
                    Node::Fc { w: wi, act: *act }
                }
                BlockSpec::Residual(inner) => {
                    let (inner, _) = self.nodes(inner, shape, &format!("{path}."))?;
                    Node::Residual(inner)
                }
            };
            nodes.push(node);
        }
        Ok((nodes, shape))
    }
}

/// Cached intermediates of one forward pass, used by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    caches: Vec<Cache>,
    input_shape: Vec<usize>,
    pub logits: Tensor,
}

#[derive(Debug, Clone)]
enum Cache {
    Conv(ConvCache),
    AvgPool { input_shape: Vec<usize> },
    Fc { input: Tensor, pre: Tensor, act: Tensor },
    Residual(Vec<Cache>),
}

/// Gradients aligned with [`Network::params`], plus the input gradient.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

fn at_block(path: &str, e: Error) -> Error {
    match e {
        Error::Shape(msg) => Error::Shape(format!("block {path}: {msg}")),
        other => other,
    }
}

impl Network {
    /// Builds a network: bank `j` (LBC blocks in execution order) uses the
    /// block's `seed=` or `rng::derive(seed, j)`; learnable tensors are drawn
    /// uniformly from `±1/sqrt(fan_in)`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut init = rng::seeded(rng::derive(seed, u64::MAX));
        let mut make_bank = |j: usize, l: &LbcSpec, pg: usize| {
            let s = l.seed.unwrap_or_else(|| rng::derive(seed, j as u64));
            generate_bank(l.m, pg, l.k, l.k, l.sparsity, s).map(Arc::new)
        };
        let mut make_param = |_: &str, shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let len = shape.iter().product();
            Tensor::from_vec(shape, (0..len).map(|_| init.random_range(-bound..=bound)).collect())
        };
        Self::assemble(spec, &mut make_bank, &mut make_param)
    }

    /// Rebuilds a network from stored parameters and banks. One bank for
    /// several LBC blocks means the bank is shared.
    pub fn from_parts(spec: &NetworkSpec, params: Vec<Param>, banks: Vec<SparseBinaryFilterBank>) -> Result<Self> {
        let mut spec = spec.clone();
        let d = spec.lbc_blocks();
        spec.shared_bank = d > 1 && banks.len() == 1;
        if banks.len() != d && !spec.shared_bank {
            return Err(Error::format(format!("{} banks stored for {d} LBC blocks", banks.len())));
        }
        let mut banks = banks.into_iter();
        let mut make_bank = |_: usize, l: &LbcSpec, _: usize| {
            let bank = banks.next().ok_or_else(|| Error::format("missing bank"))?;
            match bank.origin() {
                Origin::Generated { sparsity, .. } if sparsity == l.sparsity => Ok(Arc::new(bank)),
                _ => Err(Error::format("stored bank does not match its block's sparsity")),
            }
        };
        let mut params = params.into_iter();
        let mut make_param = |name: &str, _: &[usize], _: usize| {
            let p = params.next().ok_or_else(|| Error::format(format!("missing parameter {name}")))?;
            if p.name != name {
                return Err(Error::format(format!("expected parameter {name}, found {}", p.name)));
            }
            Ok(p.value)
        };
        let net = Self::assemble(&spec, &mut make_bank, &mut make_param)?;
        if params.next().is_some() {
            return Err(Error::format("more parameters stored than the spec uses"));
        }
        Ok(net)
    }

    fn assemble(
        spec: &NetworkSpec,
        make_bank: &mut BankFactory<'_>,
        make_param: &mut ParamFactory<'_>,
    ) -> Result<Self> {
        let classes = spec.validate_classifier()?;
        let mut asm = Assembler {
            params: Vec::new(),
            banks: Vec::new(),
            lbc_index: 0,
            shared: spec.shared_bank,
            make_bank,
            make_param,
        };
        let (nodes, _) = asm.nodes(&spec.blocks, spec.input, "")?;
        Ok(Network {
            spec: spec.clone(),
            nodes,
            params: asm.params,
            banks: asm.banks,
            classes,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Learnable tensors for in-place updates. Anchor banks are not reachable from here.
    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Distinct anchor banks: one per LBC block, or one in total when shared.
    pub fn banks(&self) -> &[Arc<SparseBinaryFilterBank>] {
        &self.banks
    }

    pub fn learnable_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Convolution-like layers in execution order, with their block path.
    pub fn layer_filters(&self) -> Vec<(String, LayerFilters<'_>)> {
        fn collect<'a>(net: &'a Network, nodes: &[Node], prefix: &str, out: &mut Vec<(String, LayerFilters<'a>)>) {
            for (i, n) in nodes.iter().enumerate() {
                let path = format!("{prefix}{i}");
                match n {
                    Node::Lbc { bank, .. } => out.push((path, LayerFilters::Bank(&net.banks[*bank]))),
                    Node::Conv { w, .. } => out.push((path, LayerFilters::Dense(&net.params[*w].value))),
                    Node::Residual(inner) => collect(net, inner, &format!("{path}."), out),
                    Node::AvgPool { .. } | Node::Fc { .. } => {}
                }
            }
        }
        let mut out = Vec::new();
        collect(self, &self.nodes, "", &mut out);
        out
    }

    /// Pre-activations of every ReLU in `pass`, in execution order.
    pub fn relu_preactivations(&self, pass: &ForwardPass) -> Vec<f64> {
        fn collect(nodes: &[Node], caches: &[Cache], out: &mut Vec<f64>) {
            for (n, c) in nodes.iter().zip(caches) {
                match (n, c) {
                    (Node::Lbc { act: Activation::Relu, .. }, Cache::Conv(cc))
                    | (Node::Conv { act: Activation::Relu, .. }, Cache::Conv(cc)) => {
                        out.extend_from_slice(cc.pre.data())
                    }
                    (Node::Fc { act: Activation::Relu, .. }, Cache::Fc { pre, .. }) => {
                        out.extend_from_slice(pre.data())
                    }
                    (Node::Residual(n), Cache::Residual(c)) => collect(n, c, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        collect(&self.nodes, &pass.caches, &mut out);
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != self.spec.input {
            return Err(Error::shape(format!(
                "input {:?} does not match the spec's {:?}",
                x.shape(),
                self.spec.input
            )));
        }
        Ok(())
    }

    /// Logits of shape `n x classes`.
    pub fn forward(&self, x: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
        Ok(self.forward_train(x, counter)?.logits)
    }

    pub fn forward_train(&self, x: &Tensor, counter: &mut OpCounter) -> Result<ForwardPass> {
        self.check_input(x)?;
        let (y, caches) = self.run(&self.nodes, x.clone(), "", counter)?;
        let n = x.shape()[0];
        Ok(ForwardPass {
            caches,
            input_shape: x.shape().to_vec(),
            logits: y.reshape(&[n, self.classes])?,
        })
    }

    fn run(&self, nodes: &[Node], mut x: Tensor, prefix: &str, counter: &mut OpCounter) -> Result<(Tensor, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            let path = format!("{prefix}{i}");
            let res = match node {
                Node::Lbc { bank, v, act, geom } => {
                    lbc_forward_impl(&self.banks[*bank], *act, &self.params[*v].value, *geom, &x, counter)
                        .map(|(y, c)| (y, Cache::Conv(c)))
                }
                Node::Conv { w, post, act, geom } => conv_block_forward(
                    &self.params[*w].value,
                    post.map(|p| &self.params[p].value),
                    *act,
                    *geom,
                    &x,
                    counter,
                )
                .map(|(y, c)| (y, Cache::Conv(c))),
                Node::AvgPool { out } => avgpool_forward(&x, *out).map(|y| {
                    (
                        y,
                        Cache::AvgPool {
                            input_shape: x.shape().to_vec(),
                        },
                    )
                }),
                Node::Fc { w, act } => fc_forward(&x, &self.params[*w].value, counter).map(|pre| {
                    let a = act.forward(&pre);
                    (
                        a.clone(),
                        Cache::Fc {
                            input: x.clone(),
                            pre,
                            act: a,
                        },
                    )
                }),
                Node::Residual(inner) => self.run(inner, x.clone(), &format!("{path}."), counter).and_then(|(mut y, c)| {
                    y.add_assign(&x)?;
                    Ok((y, Cache::Residual(c)))
                }),
            };
            let (y, cache) = res.map_err(|e| at_block(&path, e))?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    pub fn backward(&self, pass: &ForwardPass, grad_logits: &Tensor, counter: &mut OpCounter) -> Result<Gradients> {
        let n = pass.input_shape[0];
        if grad_logits.shape() != [n, self.classes] {
            return Err(Error::shape(format!(
                "logit gradient {:?}, expected [{n}, {}]",
                grad_logits.shape(),
                self.classes
            )));
        }
        let mut grads: Vec<Tensor> = self.params.iter().map(|p| p.value.zeros_like()).collect();
        let g = grad_logits.clone().reshape(&[n, self.classes, 1, 1])?;
        let input = self.back(&self.nodes, &pass.caches, g, "", &mut grads, counter)?;
        Ok(Gradients { params: grads, input })
    }

    fn back(
        &self,
        nodes: &[Node],
        caches: &[Cache],
        mut g: Tensor,
        prefix: &str,
        grads: &mut [Tensor],
        counter: &mut OpCounter,
    ) -> Result<Tensor> {
        for (i, (node, cache)) in nodes.iter().zip(caches).enumerate().rev() {
            let path = format!("{prefix}{i}");
            let res: Result<Tensor> = match (node, cache) {
                (Node::Lbc { bank, v, act, geom }, Cache::Conv(c)) => {
                    lbc_backward_impl(&self.banks[*bank], *act, &self.params[*v].value, *geom, c, &g, counter).and_then(
                        |(gx, gv)| {
                            grads[*v].add_assign(&gv)?;
                            Ok(gx)
                        },
                    )
                }
                (Node::Conv { w, post, act, geom }, Cache::Conv(c)) => conv_block_backward(
                    &self.params[*w].value,
                    post.map(|p| &self.params[p].value),
                    *act,
                    *geom,
                    c,
                    &g,
                    counter,
                )
                .and_then(|(gx, gw, gp)| {
                    grads[*w].add_assign(&gw)?;
                    if let (Some(p), Some(gp)) = (post, gp) {
                        grads[*p].add_assign(&gp)?;
                    }
                    Ok(gx)
                }),
                (Node::AvgPool { .. }, Cache::AvgPool { input_shape }) => avgpool_backward(input_shape, &g),
                (Node::Fc { w, act }, Cache::Fc { input, pre, act: a }) => {
                    let gz = act.backward(pre, a, &g.clone().reshape(pre.shape())?);
                    fc_backward(input, &self.params[*w].value, &gz, counter).and_then(|(gx, gw)| {
                        grads[*w].add_assign(&gw)?;
                        Ok(gx)
                    })
                }
                (Node::Residual(inner), Cache::Residual(c)) => self
                    .back(inner, c, g.clone(), &format!("{path}."), grads, counter)
                    .and_then(|mut gx| {
                        gx.add_assign(&g)?;
                        Ok(gx)
                    }),
                _ => Err(Error::State(format!("block {path}: cache does not match the network"))),
            };
            g = res.map_err(|e| at_block(&path, e))?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LbcLayer;

    const SMALL: &str = "input c=2 h=8 w=8\nlbc m=4 q=2 k=3 sparsity=0.5 act=relu\navgpool out=2\nfc out=3\n";

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn single(p: usize, m: usize, k: usize) -> NetworkSpec {
        NetworkSpec::parse(&format!("input c={p} h=16 w=16\nlbc m={m} q=8 k={k}")).unwrap()
    }

    #[test]
    fn parses_all_block_kinds() {
        let spec = NetworkSpec::parse(
            "# comment\ninput c=1 h=32 w=32\nshared-bank\nconv q=4 k=1 act=none post=false\n\
             res{ lbc m=4 q=4 k=3 sparsity=0.25 act=sigmoid seed=9 }\nres {\n  conv q=4 k=3 groups=2\n}\navgpool out=6; fc out=10",
        )
        .unwrap();
        assert!(spec.shared_bank);
        assert_eq!(spec.blocks.len(), 5);
        match &spec.blocks[1] {
            BlockSpec::Residual(inner) => match &inner[0] {
                BlockSpec::Lbc(l) => {
                    assert_eq!((l.m, l.q, l.k, l.sparsity, l.act, l.seed), (4, 4, 3, 0.25, Activation::Sigmoid, Some(9)))
                }
                other => panic!("{other:?}"),
            },
            other => panic!("{other:?}"),
        }
        assert_eq!(spec.output_shape().unwrap(), (10, 1, 1));
    }

    #[test]
    fn display_round_trips() {
        let text = "input c=1 h=32 w=32\nshared-bank\nconv q=4 k=1 act=none post=false\nres{ lbc m=4 q=4 k=3 seed=3 }\nres{ res{ conv q=4 k=3 groups=2 } }\navgpool out=6\nfc out=10 act=relu";
        let spec = NetworkSpec::parse(text).unwrap();
        assert_eq!(NetworkSpec::parse(&spec.to_string()).unwrap(), spec);
        let plain = NetworkSpec::parse(&spec.blocks_text()).unwrap();
        assert!(!plain.shared_bank);
        assert_eq!(plain.blocks, spec.blocks);
    }

    #[test]
    fn rejects_malformed_specs() {
        for bad in [
            "lbc m=4 q=4 k=3",
            "input c=1 h=8 w=8\nlbc m=4 q=4",
            "input c=1 h=8 w=8\nlbc m=4 q=4 k=3 colour=red",
            "input c=1 h=8 w=8\nlbc m=4 q=4 k=2",
            "input c=1 h=8 w=8\nlbc m=4 q=4 k=3 sparsity=0",
            "input c=1 h=8 w=8\nlbc m=4 q=4 k=3 act=tanh",
            "input c=1 h=8 w=8\nres{ lbc m=4 q=4 k=3 }",
            "input c=1 h=8 w=8\nres{ conv q=1 k=3",
            "input c=1 h=8 w=8\nconv q=1 k=3 }",
            "input c=1 h=8 w=8\navgpool out=9",
            "input c=3 h=8 w=8\nconv q=4 k=3 groups=2",
            "input c=1 h=8 w=8\nshared-bank\nlbc m=4 q=4 k=3\nlbc m=8 q=4 k=3",
            "input c=1 h=8 w=8\nmaxpool out=2",
        ] {
            assert!(NetworkSpec::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn ratio_is_kernel_area_for_p_equal_m() {
        for k in [3, 5, 7, 9, 11, 13] {
            let c = count_params(&single(16, 16, k)).unwrap();
            assert_eq!(c.ratio_vs_cnn, (k * k) as f64);
            assert_eq!(c.learnable, 16 * 8);
        }
    }

    #[test]
    fn lbc_learnable_is_matched_conv_over_area() {
        let lbc = count_params(&single(16, 16, 5)).unwrap();
        let conv = count_params(&NetworkSpec::parse("input c=16 h=16 w=16\nconv q=8 k=5 post=false").unwrap()).unwrap();
        assert_eq!(lbc.learnable * 25, conv.learnable);
    }

    #[test]
    fn fixed_counts_bank_entries_once_when_shared() {
        let text = "input c=4 h=8 w=8\nlbc m=4 q=4 k=3 sparsity=0.5\nlbc m=4 q=4 k=3 sparsity=0.5\nfc out=2";
        let unshared = count_params(&NetworkSpec::parse(text).unwrap()).unwrap();
        let shared = count_params(&NetworkSpec::parse(&format!("shared-bank\n{text}")).unwrap()).unwrap();
        assert_eq!(unshared.fixed, 2 * 4 * 18);
        assert_eq!(shared.fixed, 4 * 18);
        assert_eq!(shared.learnable, 2 * 16 + 256 * 2);
    }

    #[test]
    fn lint_flags_relu_before_lbc() {
        let warned = NetworkSpec::parse("input c=1 h=8 w=8\nconv q=4 k=3 post=false\nlbc m=4 q=4 k=3\nfc out=2").unwrap();
        assert_eq!(warned.lint().len(), 1);
        let fine = NetworkSpec::parse("input c=1 h=8 w=8\nconv q=4 k=3 act=none post=false\nlbc m=4 q=4 k=3\nlbc m=4 q=4 k=3\nfc out=2").unwrap();
        assert!(fine.lint().is_empty());
    }

    #[test]
    fn build_is_deterministic_and_names_params() {
        let spec = NetworkSpec::parse(SMALL).unwrap();
        let a = Network::build(&spec, 5).unwrap();
        let b = Network::build(&spec, 5).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.banks()[0], b.banks()[0]);
        let names: Vec<&str> = a.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["b0.v", "b2.fc"]);
        assert_ne!(Network::build(&spec, 6).unwrap().banks()[0], a.banks()[0]);
    }

    #[test]
    fn zero_input_gives_zero_logits() {
        let spec = NetworkSpec::parse("input c=2 h=8 w=8\nlbc m=4 q=2 k=3\nres{ lbc m=4 q=2 k=3 }\navgpool out=2\nfc out=3").unwrap();
        let net = Network::build(&spec, 1).unwrap();
        let y = net.forward(&Tensor::zeros(&[2, 2, 8, 8]).unwrap(), &mut OpCounter::default()).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_block_net_is_the_manual_composition() {
        let spec = NetworkSpec::parse(SMALL).unwrap();
        let net = Network::build(&spec, 2).unwrap();
        let x = random(&[2, 2, 8, 8], 3);
        let mut ops = OpCounter::default();
        let mut layer = LbcLayer::new(net.banks()[0].clone(), Activation::Relu, net.params()[0].value.clone(), ConvGeometry::same(3)).unwrap();
        let h = layer.forward(&x, &mut ops).unwrap();
        let pooled = avgpool_forward(&h, 2).unwrap();
        let want = fc_forward(&pooled, &net.params()[1].value, &mut ops).unwrap();
        assert_eq!(net.forward(&x, &mut ops).unwrap().data(), want.data());
    }

    #[test]
    fn residual_with_zero_v_is_identity() {
        let spec = NetworkSpec::parse("input c=2 h=4 w=4\nres{ lbc m=4 q=2 k=3 }\nfc out=2").unwrap();
        let mut net = Network::build(&spec, 4).unwrap();
        net.params_mut()[0].value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = random(&[1, 2, 4, 4], 5);
        let direct = fc_forward(&x, &net.params()[1].value, &mut OpCounter::default()).unwrap();
        assert_eq!(net.forward(&x, &mut OpCounter::default()).unwrap().data(), direct.data());
    }

    #[test]
    fn shape_errors_name_the_block() {
        let spec = NetworkSpec::parse(SMALL).unwrap();
        let net = Network::build(&spec, 1).unwrap();
        let err = net.forward(&Tensor::zeros(&[1, 3, 8, 8]).unwrap(), &mut OpCounter::default()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let pass = net.forward_train(&Tensor::zeros(&[1, 2, 8, 8]).unwrap(), &mut OpCounter::default()).unwrap();
        let err = net.backward(&pass, &Tensor::zeros(&[1, 4]).unwrap(), &mut OpCounter::default()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let msg = at_block("3.1", Error::shape("bad")).to_string();
        assert!(msg.contains("block 3.1"), "{msg}");
    }

    #[test]
    fn shared_bank_matches_equal_seeds() {
        let body = "input c=2 h=6 w=6\nlbc m=4 q=2 k=3 seed=11\nres{ lbc m=4 q=2 k=3 seed=11 }\nres{ lbc m=4 q=2 k=3 seed=11 }\navgpool out=2\nfc out=3";
        let unshared = Network::build(&NetworkSpec::parse(body).unwrap(), 7).unwrap();
        let shared = Network::build(&NetworkSpec::parse(&format!("shared-bank\n{body}")).unwrap(), 7).unwrap();
        assert_eq!(unshared.banks().len(), 3);
        assert_eq!(shared.banks().len(), 1);
        let x = random(&[2, 2, 6, 6], 8);
        let mut ops = OpCounter::default();
        assert_eq!(unshared.forward(&x, &mut ops).unwrap(), shared.forward(&x, &mut ops).unwrap());
    }

    #[test]
    fn layer_filters_lists_conv_like_layers() {
        let spec = NetworkSpec::parse("input c=1 h=8 w=8\nconv q=4 k=1 act=none post=false\nres{ lbc m=4 q=4 k=3 }\nres{ conv q=4 k=3 }\nfc out=2").unwrap();
        let net = Network::build(&spec, 1).unwrap();
        let layers = net.layer_filters();
        let paths: Vec<&str> = layers.iter().map(|(p, _)| p.as_str()).collect();
        assert_eq!(paths, ["0", "1.0", "2.0"]);
        assert!(matches!(layers[1].1, LayerFilters::Bank(_)));
    }
}
