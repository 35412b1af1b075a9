//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during a forward pass. Nodes are
//! appended in evaluation order, so a single reverse sweep over the tape
//! computes all gradients. Each graph borrows the parameter store read-only;
//! independent samples build independent graphs.

use crate::autograd::kernels::{self, ConvGeom, ScanInputs, ScanTape, CAUSAL_TAPS};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::wavelet;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A user-supplied differentiable op.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradient with respect to each input, given the output gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    /// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
    Silu,
    Softplus,
    Exp,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_K * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Gelu => gelu(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn grad(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Gelu => gelu_grad(x),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Gelu => "gelu",
            Unary::Silu => "silu",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    Param(ParamId),
    Binary(Binary, Var, Var),
    Affine(Var, f64),
    Unary(Unary, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
    },
    CausalConv {
        x: Var,
        w: Var,
        b: Var,
        row: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Scan {
        u: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d: Var,
        tape: ScanTape,
    },
    Dwt2d(Var),
    Idwt2d(Var),
    Dwt1d(Var),
    Idwt1d(Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    ToTokens(Var),
    FromTokens(Var),
    Reshape(Var),
    MulChannels(Var, Var),
    MulFeatures(Var, Var),
    BroadcastChannels(Var),
    ChannelMean(Var),
    AvgPool(Var, usize),
    Sum(Var),
    L1(Var, Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    record: bool,
}

impl<'s> Graph<'s> {
    /// A graph that records what is needed for [`Graph::backward`].
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            record: true,
        }
    }

    /// A forward-only graph: no op keeps backward state.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph {
            record: false,
            ..Self::new(store)
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn wants_grad(&self, inputs: &[Var]) -> bool {
        self.record && inputs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = self.wants_grad(inputs);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push("input", value, Op::Leaf, &[])
    }

    /// The node for a learnable parameter (one per parameter per graph).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: self.store.value(id).clone(),
            op: Op::Param(id),
            needs_grad: self.record,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    // -- element-wise ------------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = if ta.shape() == tb.shape() {
            ta.zip_map(tb, name, f)?
        } else if tb.len() == 1 {
            let s = tb.data()[0];
            ta.map(|x| f(x, s))
        } else if ta.len() == 1 {
            let s = ta.data()[0];
            tb.map(|y| f(s, y))
        } else {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        };
        self.push(name, value, Op::Binary(kind, a, b), &[a, b])
    }

    /// `a + b`; either side may be a one-element scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Hadamard product; either side may be a one-element scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push("affine", value, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.affine(x, k, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| kind.apply(v));
        self.push(kind.name(), value, Op::Unary(kind, x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Silu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    // -- dense layers ------------------------------------------------------

    /// `x·w + b` for tokens `x: N×in`, `w: in×out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.value(x).nd()?;
        let (win, dout) = self.value(w).nd()?;
        if win != din {
            return Err(Error::shape("linear", &[din, dout], &[win, dout]));
        }
        let mut y = vec![0.0; n * dout];
        let mut beta = 0.0;
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.len() != dout {
                return Err(Error::shape("linear.bias", &[dout], bt.shape()));
            }
            for row in y.chunks_mut(dout) {
                row.copy_from_slice(bt.data());
            }
            beta = 1.0;
        }
        kernels::gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), false, &mut y, beta);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("linear", Tensor::new(&[n, dout], y)?, Op::Linear { x, w, b }, &inputs)
    }

    /// 2D convolution of a `C×H×W` map with `C_out×C×k×k` kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.value(x).chw()?;
        let ws = self.value(w).shape().to_vec();
        let [c_out, c_in, k, k2] = ws[..] else {
            return Err(Error::invalid(format!("conv2d kernel must be 4-D, got {ws:?}")));
        };
        if c_in != c || k != k2 {
            return Err(Error::shape("conv2d", &[c_out, c, k, k], &ws));
        }
        let geom = ConvGeom::new(c, h, wd, k, stride, pad)
            .ok_or_else(|| Error::invalid(format!("conv2d: {h}×{wd} input too small for {k}×{k} kernel")))?;
        if let Some(b) = b {
            if self.value(b).len() != c_out {
                return Err(Error::shape("conv2d.bias", &[c_out], self.value(b).shape()));
            }
        }
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            c_out,
            &geom,
        );
        let value = Tensor::new(&[c_out, geom.h_out, geom.w_out], y)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Depthwise `k×k` convolution (stride 1, same padding); `w` is `C×k×k`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (c, h, wd) = self.value(x).chw()?;
        let ws = self.value(w).shape().to_vec();
        let [wc, k, k2] = ws[..] else {
            return Err(Error::invalid(format!("depthwise kernel must be C×k×k, got {ws:?}")));
        };
        if wc != c || k != k2 || k % 2 == 0 || self.value(b).len() != c {
            return Err(Error::shape("depthwise_conv2d", &[c, k, k], &ws));
        }
        let y = kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), c, h, wd, k);
        self.push("depthwise_conv2d", Tensor::new(&[c, h, wd], y)?, Op::Depthwise { x, w, b, k }, &[x, w, b])
    }

    /// Depthwise causal stencil over raster tokens `N×D` with row width `row`.
    /// `w` is `D×4` (taps: self, left, up, up-left), `b` is `D`.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var, row: usize) -> Result<Var> {
        let (n, d) = self.value(x).nd()?;
        if self.value(w).shape() != [d, CAUSAL_TAPS] || self.value(b).len() != d {
            return Err(Error::shape("causal_conv", &[d, CAUSAL_TAPS], self.value(w).shape()));
        }
        if row == 0 {
            return Err(Error::invalid("causal_conv: zero row width"));
        }
        let y = kernels::causal_conv_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), n, d, row);
        self.push("causal_conv", Tensor::new(&[n, d], y)?, Op::CausalConv { x, w, b, row }, &[x, w, b])
    }

    /// Per-token layer normalization (ε = 1e-5) with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.value(x).nd()?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layernorm", &[d], self.value(gamma).shape()));
        }
        let (y, xhat, rstd) =
            kernels::layernorm_forward(self.value(x).data(), self.value(gamma).data(), self.value(beta).data(), n, d);
        let keep = self.wants_grad(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: if keep { xhat } else { Vec::new() },
            rstd: if keep { rstd } else { Vec::new() },
        };
        self.push("layernorm", Tensor::new(&[n, d], y)?, op, &[x, gamma, beta])
    }

    /// Selective scan (see [`kernels::scan_forward`]). `u`, `delta`: `N×D`;
    /// `a_log`: `D×S`; `b`, `c`: `N×S`; `d`: `D`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a_log: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let (n, dd) = self.value(u).nd()?;
        let (ad, s) = self.value(a_log).nd()?;
        if self.value(delta).shape() != [n, dd] {
            return Err(Error::shape("selective_scan.delta", &[n, dd], self.value(delta).shape()));
        }
        if ad != dd || self.value(d).len() != dd {
            return Err(Error::shape("selective_scan.a", &[dd, s], self.value(a_log).shape()));
        }
        for v in [b, c] {
            if self.value(v).shape() != [n, s] {
                return Err(Error::shape("selective_scan.bc", &[n, s], self.value(v).shape()));
            }
        }
        assert!(
            self.value(delta).data().iter().all(|&v| v > 0.0),
            "selective_scan: step sizes must be positive"
        );
        let keep = self.wants_grad(&[u, delta, a_log, b, c, d]);
        let inp = ScanInputs {
            u: self.value(u).data(),
            delta: self.value(delta).data(),
            a_log: self.value(a_log).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            d_skip: self.value(d).data(),
            n,
            d: dd,
            s,
        };
        let (y, tape) = kernels::scan_forward(&inp, keep);
        let op = Op::Scan {
            u,
            delta,
            a_log,
            b,
            c,
            d,
            tape: tape.unwrap_or_default(),
        };
        self.push("selective_scan", Tensor::new(&[n, dd], y)?, op, &[u, delta, a_log, b, c, d])
    }

    // -- wavelets ----------------------------------------------------------

    /// 2D Haar analysis: `C×H×W` to stacked `[LL; LH; HL; HH]` (`4C×H/2×W/2`).
    pub fn dwt2d(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!("dwt2d needs even H and W, got {h}×{w}")));
        }
        let y = wavelet::haar2d_forward(self.value(x).data(), c, h, w);
        self.push("dwt2d", Tensor::new(&[4 * c, h / 2, w / 2], y)?, Op::Dwt2d(x), &[x])
    }

    /// 2D Haar synthesis from stacked `4C×h×w` bands to `C×2h×2w`.
    pub fn idwt2d(&mut self, x: Var) -> Result<Var> {
        let (c4, h, w) = self.value(x).chw()?;
        if c4 % 4 != 0 {
            return Err(Error::invalid(format!("idwt2d needs 4C stacked channels, got {c4}")));
        }
        let y = wavelet::haar2d_inverse(self.value(x).data(), c4 / 4, h, w);
        self.push("idwt2d", Tensor::new(&[c4 / 4, 2 * h, 2 * w], y)?, Op::Idwt2d(x), &[x])
    }

    /// Channel-axis Haar analysis to non-interleaved `[L; H]`.
    pub fn dwt1d(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if c % 2 != 0 {
            return Err(Error::invalid(format!("dwt1d needs an even channel count, got {c}")));
        }
        let y = wavelet::haar1d_forward(self.value(x).data(), c, h * w);
        self.push("dwt1d", Tensor::new(&[c, h, w], y)?, Op::Dwt1d(x), &[x])
    }

    /// Channel-axis Haar synthesis from stacked `[L; H]`.
    pub fn idwt1d(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if c % 2 != 0 {
            return Err(Error::invalid(format!("idwt1d needs an even channel count, got {c}")));
        }
        let y = wavelet::haar1d_inverse(self.value(x).data(), c, h * w);
        self.push("idwt1d", Tensor::new(&[c, h, w], y)?, Op::Idwt1d(x), &[x])
    }

    // -- layout ------------------------------------------------------------

    pub fn narrow_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let value = self.value(x).narrow_channels(start, count)?;
        self.push("narrow_channels", value, Op::Narrow { x, start }, &[x])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_channels(&tensors)?;
        self.push("concat_channels", value, Op::Concat(parts.to_vec()), parts)
    }

    /// Row-major rasterization: `C×h×w` to tokens `(h·w)×C`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let src = self.value(x).data();
        let n = h * w;
        let mut y = vec![0.0; n * c];
        for ch in 0..c {
            for p in 0..n {
                y[p * c + ch] = src[ch * n + p];
            }
        }
        self.push("to_tokens", Tensor::new(&[n, c], y)?, Op::ToTokens(x), &[x])
    }

    /// Inverse of [`Graph::to_tokens`].
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c) = self.value(x).nd()?;
        if n != h * w {
            return Err(Error::invalid(format!("from_tokens: {n} tokens cannot fill {h}×{w}")));
        }
        let src = self.value(x).data();
        let mut y = vec![0.0; n * c];
        for p in 0..n {
            for ch in 0..c {
                y[ch * n + p] = src[p * c + ch];
            }
        }
        self.push("from_tokens", Tensor::new(&[c, h, w], y)?, Op::FromTokens(x), &[x])
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Scale channel `k` of a `C×…` tensor by `v[k]`.
    pub fn mul_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let c = self.value(x).shape()[0];
        if self.value(v).len() != c {
            return Err(Error::shape("mul_channels", &[c], self.value(v).shape()));
        }
        let per = self.value(x).len() / c;
        let vd = self.value(v).data();
        let mut y = self.value(x).clone();
        for (ch, chunk) in y.data_mut().chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|e| *e *= vd[ch]);
        }
        self.push("mul_channels", y, Op::MulChannels(x, v), &[x, v])
    }

    /// Scale feature column `j` of tokens `N×d` by `v[j]`.
    pub fn mul_features(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, d) = self.value(x).nd()?;
        if self.value(v).len() != d {
            return Err(Error::shape("mul_features", &[d], self.value(v).shape()));
        }
        let vd = self.value(v).data().to_vec();
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_mut(d) {
            row.iter_mut().zip(&vd).for_each(|(e, s)| *e *= s);
        }
        self.push("mul_features", y, Op::MulFeatures(x, v), &[x, v])
    }

    /// Spread a per-channel vector over an `h×w` grid.
    pub fn broadcast_channels(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let vd = self.value(v).data();
        let c = vd.len();
        let mut y = Vec::with_capacity(c * h * w);
        for &s in vd {
            y.extend(std::iter::repeat_n(s, h * w));
        }
        self.push("broadcast_channels", Tensor::new(&[c, h, w], y)?, Op::BroadcastChannels(v), &[v])
    }

    /// Global average pool of a `C×H×W` map to a length-`C` vector.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let t = self.value(x);
        let y: Vec<f64> = (0..c).map(|ch| t.plane(ch).iter().sum::<f64>() / (h * w) as f64).collect();
        self.push("channel_mean", Tensor::new(&[c], y)?, Op::ChannelMean(x), &[x])
    }

    /// Non-overlapping `r×r` box average.
    pub fn avg_pool(&mut self, x: Var, r: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::invalid(format!("avg_pool: {h}×{w} not divisible by {r}")));
        }
        let t = self.value(x);
        let (ho, wo) = (h / r, w / r);
        let inv = 1.0 / (r * r) as f64;
        let mut y = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let p = t.plane(ch);
            for yy in 0..h {
                for xx in 0..w {
                    y[ch * ho * wo + (yy / r) * wo + xx / r] += p[yy * w + xx] * inv;
                }
            }
        }
        self.push("avg_pool", Tensor::new(&[c, ho, wo], y)?, Op::AvgPool(x, r), &[x])
    }

    // -- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean absolute error between equal-shape tensors.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.expect_shape("l1_loss", t.shape())?;
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum();
        let value = Tensor::scalar(s / p.len() as f64);
        self.push("l1_loss", value, Op::L1(pred, target), &[pred, target])
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp>) -> Result<Var> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = op.forward(&tensors)?;
        let name = op.name();
        self.push(name, value, Op::Custom(inputs.to_vec(), op), inputs)
    }

    // -- reverse sweep -----------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every parameter that
    /// influenced it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::invalid("backward on an inference graph"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward needs a scalar loss"));
        }
        let mut out = Gradients::new(self.store.len());
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop(i, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn acc_raw(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) -> Result<()> {
        let shape = self.value(v).shape().to_vec();
        self.acc(grads, v, Tensor::new(&shape, data)?)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.accumulate(*id, g.clone())?,
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    Binary::Add => (gd.to_vec(), gd.to_vec()),
                    Binary::Sub => (gd.to_vec(), gd.iter().map(|v| -v).collect()),
                    Binary::Mul => {
                        let bv = |k: usize| if tb.len() == 1 { tb.data()[0] } else { tb.data()[k] };
                        let av = |k: usize| if ta.len() == 1 { ta.data()[0] } else { ta.data()[k] };
                        (
                            gd.iter().enumerate().map(|(k, v)| v * bv(k)).collect(),
                            gd.iter().enumerate().map(|(k, v)| v * av(k)).collect(),
                        )
                    }
                };
                let reduce = |t: &Tensor, full: Vec<f64>| {
                    if t.len() == 1 && full.len() != 1 {
                        vec![full.iter().sum()]
                    } else {
                        full
                    }
                };
                if self.needs(*a) {
                    self.acc_raw(grads, *a, reduce(ta, ga))?;
                }
                if self.needs(*b) {
                    self.acc_raw(grads, *b, reduce(tb, gb))?;
                }
            }
            Op::Affine(x, k) => self.acc(grads, *x, g.scale(*k))?,
            Op::Unary(kind, x) => {
                let (xv, yv) = (self.value(*x).data(), node.value.data());
                let dx = gd.iter().zip(xv.iter().zip(yv)).map(|(gg, (&a, &b))| gg * kind.grad(a, b)).collect();
                self.acc_raw(grads, *x, dx)?;
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).nd()?;
                let dout = node.value.shape()[1];
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * din];
                    kernels::gemm(n, dout, din, gd, false, self.value(*w).data(), true, &mut dx, 0.0);
                    self.acc_raw(grads, *x, dx)?;
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; din * dout];
                    kernels::gemm(din, n, dout, self.value(*x).data(), true, gd, false, &mut dw, 0.0);
                    self.acc_raw(grads, *w, dw)?;
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; dout];
                        for row in gd.chunks(dout) {
                            db.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                        }
                        self.acc_raw(grads, *b, db)?;
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let c_out = node.value.shape()[0];
                let want_b = b.map(|b| self.needs(b)).unwrap_or(false);
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    c_out,
                    geom,
                    (self.needs(*x), self.needs(*w), want_b),
                );
                if let Some(dx) = dx {
                    self.acc_raw(grads, *x, dx)?;
                }
                if let Some(dw) = dw {
                    self.acc_raw(grads, *w, dw)?;
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc_raw(grads, *b, db)?;
                }
            }
            Op::Depthwise { x, w, b, k } => {
                let (c, h, wd) = self.value(*x).chw()?;
                let (dx, dw, db) =
                    kernels::depthwise_backward(self.value(*x).data(), self.value(*w).data(), gd, c, h, wd, *k);
                self.acc_raw(grads, *x, dx)?;
                self.acc_raw(grads, *w, dw)?;
                self.acc_raw(grads, *b, db)?;
            }
            Op::CausalConv { x, w, b, row } => {
                let (n, d) = self.value(*x).nd()?;
                let (dx, dw, db) =
                    kernels::causal_conv_backward(self.value(*x).data(), self.value(*w).data(), gd, n, d, *row);
                self.acc_raw(grads, *x, dx)?;
                self.acc_raw(grads, *w, dw)?;
                self.acc_raw(grads, *b, db)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = self.value(*x).nd()?;
                let (dx, dg, db) = kernels::layernorm_backward(xhat, rstd, self.value(*gamma).data(), gd, n, d);
                self.acc_raw(grads, *x, dx)?;
                self.acc_raw(grads, *gamma, dg)?;
                self.acc_raw(grads, *beta, db)?;
            }
            Op::Scan {
                u,
                delta,
                a_log,
                b,
                c,
                d,
                tape,
            } => {
                let (n, dd) = self.value(*u).nd()?;
                let s = self.value(*a_log).shape()[1];
                let inp = ScanInputs {
                    u: self.value(*u).data(),
                    delta: self.value(*delta).data(),
                    a_log: self.value(*a_log).data(),
                    b: self.value(*b).data(),
                    c: self.value(*c).data(),
                    d_skip: self.value(*d).data(),
                    n,
                    d: dd,
                    s,
                };
                let sg = kernels::scan_backward(&inp, tape, gd);
                self.acc_raw(grads, *u, sg.du)?;
                self.acc_raw(grads, *delta, sg.ddelta)?;
                self.acc_raw(grads, *a_log, sg.da_log)?;
                self.acc_raw(grads, *b, sg.db)?;
                self.acc_raw(grads, *c, sg.dc)?;
                self.acc_raw(grads, *d, sg.dd)?;
            }
            // Analysis is S/4 with a symmetric sign matrix S and synthesis is S,
            // so each adjoint is the other transform, rescaled.
            Op::Dwt2d(x) => {
                let (c4, h, w) = node.value.chw()?;
                let dx = wavelet::haar2d_inverse(gd, c4 / 4, h, w);
                self.acc_raw(grads, *x, dx.into_iter().map(|v| v * 0.25).collect())?;
            }
            Op::Idwt2d(x) => {
                let (c, h, w) = node.value.chw()?;
                let dx = wavelet::haar2d_forward(gd, c, h, w);
                self.acc_raw(grads, *x, dx.into_iter().map(|v| v * 4.0).collect())?;
            }
            Op::Dwt1d(x) => {
                let (c, h, w) = node.value.chw()?;
                let dx = wavelet::haar1d_inverse(gd, c, h * w);
                self.acc_raw(grads, *x, dx.into_iter().map(|v| v * 0.5).collect())?;
            }
            Op::Idwt1d(x) => {
                let (c, h, w) = node.value.chw()?;
                let dx = wavelet::haar1d_forward(gd, c, h * w);
                self.acc_raw(grads, *x, dx.into_iter().map(|v| v * 2.0).collect())?;
            }
            Op::Narrow { x, start } => {
                let src = self.value(*x);
                let (_, h, w) = src.chw()?;
                let mut dx = vec![0.0; src.len()];
                let off = start * h * w;
                dx[off..off + gd.len()].copy_from_slice(gd);
                self.acc_raw(grads, *x, dx)?;
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        self.acc_raw(grads, p, gd[off..off + len].to_vec())?;
                    }
                    off += len;
                }
            }
            Op::ToTokens(x) => {
                let (n, c) = node.value.nd()?;
                let mut dx = vec![0.0; n * c];
                for p in 0..n {
                    for ch in 0..c {
                        dx[ch * n + p] = gd[p * c + ch];
                    }
                }
                self.acc_raw(grads, *x, dx)?;
            }
            Op::FromTokens(x) => {
                let (n, c) = self.value(*x).nd()?;
                let mut dx = vec![0.0; n * c];
                for p in 0..n {
                    for ch in 0..c {
                        dx[p * c + ch] = gd[ch * n + p];
                    }
                }
                self.acc_raw(grads, *x, dx)?;
            }
            Op::Reshape(x) => self.acc_raw(grads, *x, gd.to_vec())?,
            Op::MulChannels(x, v) => {
                let xv = self.value(*x);
                let vv = self.value(*v).data();
                let per = xv.len() / vv.len();
                if self.needs(*x) {
                    let dx = gd.iter().enumerate().map(|(k, gg)| gg * vv[k / per]).collect();
                    self.acc_raw(grads, *x, dx)?;
                }
                if self.needs(*v) {
                    let mut dv = vec![0.0; vv.len()];
                    for (k, (gg, xx)) in gd.iter().zip(xv.data()).enumerate() {
                        dv[k / per] += gg * xx;
                    }
                    self.acc_raw(grads, *v, dv)?;
                }
            }
            Op::MulFeatures(x, v) => {
                let xv = self.value(*x);
                let vv = self.value(*v).data();
                let d = vv.len();
                if self.needs(*x) {
                    let dx = gd.iter().enumerate().map(|(k, gg)| gg * vv[k % d]).collect();
                    self.acc_raw(grads, *x, dx)?;
                }
                if self.needs(*v) {
                    let mut dv = vec![0.0; d];
                    for (k, (gg, xx)) in gd.iter().zip(xv.data()).enumerate() {
                        dv[k % d] += gg * xx;
                    }
                    self.acc_raw(grads, *v, dv)?;
                }
            }
            Op::BroadcastChannels(v) => {
                let c = self.value(*v).len();
                let per = gd.len() / c;
                let dv = gd.chunks(per).map(|ch| ch.iter().sum()).collect();
                self.acc_raw(grads, *v, dv)?;
            }
            Op::ChannelMean(x) => {
                let (c, h, w) = self.value(*x).chw()?;
                let inv = 1.0 / (h * w) as f64;
                let mut dx = Vec::with_capacity(c * h * w);
                for &gg in gd {
                    dx.extend(std::iter::repeat_n(gg * inv, h * w));
                }
                self.acc_raw(grads, *x, dx)?;
            }
            Op::AvgPool(x, r) => {
                let (c, h, w) = self.value(*x).chw()?;
                let (ho, wo) = (h / r, w / r);
                let inv = 1.0 / (r * r) as f64;
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            dx[ch * h * w + yy * w + xx] = gd[ch * ho * wo + (yy / r) * wo + xx / r] * inv;
                        }
                    }
                }
                self.acc_raw(grads, *x, dx)?;
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc_raw(grads, *x, vec![gd[0]; n])?;
            }
            Op::L1(p, t) => {
                let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                let k = gd[0] / pv.len() as f64;
                // Subgradient 0 at the kink.
                let sign: Vec<f64> = pv
                    .iter()
                    .zip(tv)
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            k
                        } else if d < 0.0 {
                            -k
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.needs(*t) {
                    self.acc_raw(grads, *t, sign.iter().map(|v| -v).collect())?;
                }
                if self.needs(*p) {
                    self.acc_raw(grads, *p, sign)?;
                }
            }
            Op::Custom(inputs, op) => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&tensors, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::invalid(format!("{}: backward returned wrong arity", op.name())));
                }
                for (&v, gv) in inputs.iter().zip(gs) {
                    self.acc(grads, v, gv)?;
                }
            }
        }
        Ok(())
    }
}
