//! Multi-scale dynamic gate.
//!
//! Both inputs are first refined against each other, then concatenated and
//! normalized per pixel. Local (1×1, 3×3) and global context features are
//! summed and projected into three gate maps that combine the inputs as
//! `X_main ⊙ (1 + G_dec + G_mul ⊙ X_extra) + G_add`.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Kernel sizes of the regional feature extractors.
pub const RFEB_KERNELS: [usize; 2] = [1, 3];
const GFEB_REDUCTION: usize = 4;

/// Which gates take part; a disabled gate is a constant zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateMask {
    pub mul: bool,
    pub dec: bool,
    pub add: bool,
}

impl Default for GateMask {
    fn default() -> Self {
        GateMask {
            mul: true,
            dec: true,
            add: true,
        }
    }
}

/// Depthwise `k×k`, pointwise projection, GELU.
#[derive(Clone, Debug)]
pub struct Rfeb {
    dw_weight: ParamId,
    dw_bias: ParamId,
    pointwise: Conv2d,
}

/// Global pool, bottleneck, broadcast.
#[derive(Clone, Debug)]
pub struct Gfeb {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct MsdgParams {
    bands: usize,
    ieb_x: Conv2d,
    ieb_y: Conv2d,
    norm: LayerNorm,
    pub rfeb: Vec<Rfeb>,
    pub gfeb: Gfeb,
    pub head: Conv2d,
    pub mask: GateMask,
}

impl MsdgParams {
    pub fn new(b: &mut Builder<'_>, name: &str, bands: usize) -> Result<Self> {
        let mut b = b.sub(name);
        let cat = 2 * bands;
        let hidden = cat;
        let ieb_x = Conv2d::new(&mut b, "ieb_x", bands, bands, 1)?;
        let ieb_y = Conv2d::new(&mut b, "ieb_y", bands, bands, 1)?;
        let norm = LayerNorm::new(&mut b, "norm", cat)?;
        let mut rfeb = Vec::with_capacity(RFEB_KERNELS.len());
        for k in RFEB_KERNELS {
            let mut rb = b.sub(&format!("rfeb{k}"));
            let bound = 1.0 / k as f64;
            rfeb.push(Rfeb {
                dw_weight: rb.uniform("dw_weight", &[cat, k, k], bound)?,
                dw_bias: rb.uniform("dw_bias", &[cat], bound)?,
                pointwise: Conv2d::new(&mut rb, "pointwise", cat, hidden, 1)?,
            });
        }
        let mid = (cat / GFEB_REDUCTION).max(1);
        let gfeb = {
            let mut gb = b.sub("gfeb");
            Gfeb {
                fc1: Linear::new(&mut gb, "fc1", cat, mid, true)?,
                fc2: Linear::new(&mut gb, "fc2", mid, hidden, true)?,
            }
        };
        let head = Conv2d::new(&mut b, "head", hidden, 3 * bands, 1)?;
        Ok(MsdgParams {
            bands,
            ieb_x,
            ieb_y,
            norm,
            rfeb,
            gfeb,
            head,
            mask: GateMask::default(),
        })
    }

    /// Zero the gate head so every gate starts at exactly zero.
    pub fn zero_head(&self, store: &mut ParamStore) {
        self.head.zero(store);
    }
}

/// The three gate maps, each `c×H×W`.
#[derive(Clone, Copy, Debug)]
pub struct GateBundle<T> {
    pub g_mul: T,
    pub g_dec: T,
    pub g_add: T,
}

/// `x + x ⊙ σ(conv1×1(other))`.
fn interact(g: &mut Graph<'_>, conv: &Conv2d, x: Var, other: Var) -> Result<Var> {
    let a = conv.forward(g, other)?;
    let s = g.sigmoid(a)?;
    let m = g.mul(x, s)?;
    g.add(x, m)
}

/// Layer normalization across channels at each pixel.
fn channel_norm(g: &mut Graph<'_>, norm: &LayerNorm, x: Var) -> Result<Var> {
    let (_, h, w) = g.value(x).chw()?;
    let t = g.to_tokens(x)?;
    let n = norm.forward(g, t)?;
    g.from_tokens(n, h, w)
}

pub fn rfeb(g: &mut Graph<'_>, p: &Rfeb, z: Var) -> Result<Var> {
    let (w, b) = (g.param(p.dw_weight), g.param(p.dw_bias));
    let d = g.depthwise_conv2d(z, w, b)?;
    let pw = p.pointwise.forward(g, d)?;
    g.gelu(pw)
}

pub fn gfeb(g: &mut Graph<'_>, p: &Gfeb, z: Var) -> Result<Var> {
    let (_, h, w) = g.value(z).chw()?;
    let pooled = g.channel_mean(z)?;
    let c = g.value(pooled).len();
    let row = g.reshape(pooled, &[1, c])?;
    let a = p.fc1.forward(g, row)?;
    let a = g.gelu(a)?;
    let a = p.fc2.forward(g, a)?;
    let hidden = g.value(a).len();
    let v = g.reshape(a, &[hidden])?;
    g.broadcast_channels(v, h, w)
}

/// Gate maps for a `(x_main, x_extra)` pair.
pub fn gates(g: &mut Graph<'_>, p: &MsdgParams, x_main: Var, x_extra: Var) -> Result<GateBundle<Var>> {
    if g.shape(x_main) != g.shape(x_extra) {
        return Err(Error::shape("msdg_gate", g.shape(x_main), g.shape(x_extra)));
    }
    let (c, _, _) = g.value(x_main).chw()?;
    if c != p.bands {
        return Err(Error::shape("msdg_gate", &[p.bands], &[c]));
    }
    let xr = interact(g, &p.ieb_x, x_main, x_extra)?;
    let yr = interact(g, &p.ieb_y, x_extra, x_main)?;
    let cat = g.concat_channels(&[xr, yr])?;
    let z = channel_norm(g, &p.norm, cat)?;
    let mut agg = gfeb(g, &p.gfeb, z)?;
    for r in &p.rfeb {
        let f = rfeb(g, r, z)?;
        agg = g.add(agg, f)?;
    }
    let raw = p.head.forward(g, agg)?;
    let m = g.narrow_channels(raw, 0, c)?;
    let d = g.narrow_channels(raw, c, c)?;
    Ok(GateBundle {
        g_mul: g.tanh(m)?,
        g_dec: g.tanh(d)?,
        g_add: g.narrow_channels(raw, 2 * c, c)?,
    })
}

/// `X_main ⊙ (1 + G_dec + G_mul ⊙ X_extra) + G_add`, with gates disabled by
/// the mask dropped from the sum.
pub fn msdg_gate(g: &mut Graph<'_>, p: &MsdgParams, x_main: Var, x_extra: Var) -> Result<Var> {
    let gb = gates(g, p, x_main, x_extra)?;
    let mask = p.mask;
    let mut inner: Option<Var> = None;
    if mask.dec {
        inner = Some(gb.g_dec);
    }
    if mask.mul {
        let t = g.mul(gb.g_mul, x_extra)?;
        inner = Some(match inner {
            Some(i) => g.add(i, t)?,
            None => t,
        });
    }
    let mut out = match inner {
        Some(i) => {
            let factor = g.affine(i, 1.0, 1.0)?;
            g.mul(x_main, factor)?
        }
        None => x_main,
    };
    if mask.add {
        out = g.add(out, gb.g_add)?;
    }
    Ok(out)
}

/// Two gates with swapped roles, blended by a learned rate `σ(ρ)`.
#[derive(Clone, Debug)]
pub struct DualMsdg {
    pub first: MsdgParams,
    pub second: MsdgParams,
    pub rho: ParamId,
}

impl DualMsdg {
    pub fn new(b: &mut Builder<'_>, name: &str, bands: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(DualMsdg {
            first: MsdgParams::new(&mut b, "gate1", bands)?,
            second: MsdgParams::new(&mut b, "gate2", bands)?,
            rho: b.add("rho", Tensor::scalar(0.0))?,
        })
    }

    pub fn zero_heads(&self, store: &mut ParamStore) {
        self.first.zero_head(store);
        self.second.zero_head(store);
    }

    pub fn set_mask(&mut self, mask: GateMask) {
        self.first.mask = mask;
        self.second.mask = mask;
    }
}

/// `σ(ρ)·gate(o1, o2) + (1 − σ(ρ))·gate(o2, o1)`.
pub fn dual_msdg(g: &mut Graph<'_>, p: &DualMsdg, o1: Var, o2: Var) -> Result<Var> {
    let a = msdg_gate(g, &p.first, o1, o2)?;
    let b = msdg_gate(g, &p.second, o2, o1)?;
    let rho = g.param(p.rho);
    let w = g.sigmoid(rho)?;
    let wc = g.one_minus(w)?;
    let a = g.mul(w, a)?;
    let b = g.mul(wc, b)?;
    g.add(a, b)
}
