//! Haar analysis/synthesis in 2D (spatial, over 2×2 blocks) and 1D (along the
//! channel axis, over adjacent channel pairs), plus the wavelet pyramids that
//! feed the two branches.
//!
//! Normalization is the averaging variant: analysis divides by 4 (2D) or 2
//! (1D) and synthesis uses unit coefficients, so `idwt(dwt(x)) = x` exactly in
//! exact arithmetic. For a 2×2 block `[[a11, a12], [a21, a22]]`:
//!
//! ```text
//! LL = (a11 + a12 + a21 + a22) / 4      a11 = LL + LH + HL + HH
//! LH = (a11 + a12 - a21 - a22) / 4      a12 = LL + LH - HL - HH
//! HL = (a11 - a12 + a21 - a22) / 4      a21 = LL - LH + HL - HH
//! HH = (a11 - a12 - a21 + a22) / 4      a22 = LL - LH - HL + HH
//! ```
//!
//! Stacked layouts are used throughout: a 2D decomposition of a `C×H×W` map is
//! `[LL; LH; HL; HH]` with `4C` channels, and a 1D decomposition is the
//! non-interleaved `[L; H]`, so synthesis pairs channel `k` with `k + C/2`.

use num_traits::Float;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One level of a 2D decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct Subbands2D<T> {
    pub ll: T,
    pub lh: T,
    pub hl: T,
    pub hh: T,
}

impl<T> Subbands2D<T> {
    pub fn as_array(&self) -> [&T; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }
}

/// Spatial pyramid: `levels[i - 1]` holds the level-`i` subbands, computed
/// from the level-`(i - 1)` approximation (`root` for `i = 1`).
#[derive(Clone, Debug)]
pub struct Pyramid2D<T> {
    pub root: T,
    pub levels: Vec<Subbands2D<T>>,
}

impl<T> Pyramid2D<T> {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Subbands at decomposition level `j` (1-based).
    pub fn level(&self, j: usize) -> &Subbands2D<T> {
        &self.levels[j - 1]
    }
}

/// Low/high pair of one channel-axis decomposition level.
#[derive(Clone, Debug, PartialEq)]
pub struct Bands1D<T> {
    pub low: T,
    pub high: T,
}

/// Channel pyramid: `levels[i - 1]` holds `(L_i, H_i)` computed from `L_{i-1}`.
#[derive(Clone, Debug)]
pub struct Pyramid1D<T> {
    pub root: T,
    pub levels: Vec<Bands1D<T>>,
}

impl<T> Pyramid1D<T> {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, j: usize) -> &Bands1D<T> {
        &self.levels[j - 1]
    }
}

/// `log2(n)` for a power of two `n ≥ 2`.
pub fn exact_log2(n: usize, what: &str) -> Result<usize> {
    if n < 2 || !n.is_power_of_two() {
        return Err(Error::invalid(format!("{what} must be a power of two ≥ 2, got {n}")));
    }
    Ok(n.trailing_zeros() as usize)
}

// ---------------------------------------------------------------------------
// Slice kernels

/// Forward 2D Haar of a `c×h×w` buffer into stacked `[LL; LH; HL; HH]`.
pub fn haar2d_forward<T: Float>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    assert_eq!(x.len(), c * h * w);
    assert!(h % 2 == 0 && w % 2 == 0);
    let (h2, w2) = (h / 2, w / 2);
    let band = c * h2 * w2;
    let quarter = T::from(0.25).unwrap();
    let mut out = vec![T::zero(); 4 * band];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                let a11 = src[2 * y * w + 2 * xx];
                let a12 = src[2 * y * w + 2 * xx + 1];
                let a21 = src[(2 * y + 1) * w + 2 * xx];
                let a22 = src[(2 * y + 1) * w + 2 * xx + 1];
                let o = ch * h2 * w2 + y * w2 + xx;
                out[o] = (a11 + a12 + a21 + a22) * quarter;
                out[band + o] = (a11 + a12 - a21 - a22) * quarter;
                out[2 * band + o] = (a11 - a12 + a21 - a22) * quarter;
                out[3 * band + o] = (a11 - a12 - a21 + a22) * quarter;
            }
        }
    }
    out
}

/// Inverse of [`haar2d_forward`]: stacked `4c×h×w` bands to `c×2h×2w`.
pub fn haar2d_inverse<T: Float>(s: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let band = c * h * w;
    assert_eq!(s.len(), 4 * band);
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        let dst = &mut out[ch * h2 * w2..(ch + 1) * h2 * w2];
        for y in 0..h {
            for xx in 0..w {
                let o = ch * h * w + y * w + xx;
                let (ll, lh, hl, hh) = (s[o], s[band + o], s[2 * band + o], s[3 * band + o]);
                dst[2 * y * w2 + 2 * xx] = ll + lh + hl + hh;
                dst[2 * y * w2 + 2 * xx + 1] = ll + lh - hl - hh;
                dst[(2 * y + 1) * w2 + 2 * xx] = ll - lh + hl - hh;
                dst[(2 * y + 1) * w2 + 2 * xx + 1] = ll - lh - hl + hh;
            }
        }
    }
    out
}

/// Forward channel-axis Haar: `c×hw` buffer into non-interleaved `[L; H]`.
pub fn haar1d_forward<T: Float>(x: &[T], c: usize, hw: usize) -> Vec<T> {
    assert_eq!(x.len(), c * hw);
    assert!(c % 2 == 0);
    let half = T::from(0.5).unwrap();
    let pairs = c / 2;
    let mut out = vec![T::zero(); c * hw];
    for k in 0..pairs {
        let c1 = &x[2 * k * hw..(2 * k + 1) * hw];
        let c2 = &x[(2 * k + 1) * hw..(2 * k + 2) * hw];
        for p in 0..hw {
            out[k * hw + p] = (c1[p] + c2[p]) * half;
            out[(pairs + k) * hw + p] = (c1[p] - c2[p]) * half;
        }
    }
    out
}

/// Inverse of [`haar1d_forward`].
pub fn haar1d_inverse<T: Float>(s: &[T], c: usize, hw: usize) -> Vec<T> {
    assert_eq!(s.len(), c * hw);
    assert!(c % 2 == 0);
    let pairs = c / 2;
    let mut out = vec![T::zero(); c * hw];
    for k in 0..pairs {
        for p in 0..hw {
            let l = s[k * hw + p];
            let hi = s[(pairs + k) * hw + p];
            out[2 * k * hw + p] = l + hi;
            out[(2 * k + 1) * hw + p] = l - hi;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Tensor API

pub fn dwt2d(x: &Tensor) -> Result<Subbands2D<Tensor>> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("dwt2d needs even H and W, got {h}×{w}")));
    }
    let stacked = Tensor::new(&[4 * c, h / 2, w / 2], haar2d_forward(x.data(), c, h, w))?;
    Ok(Subbands2D {
        ll: stacked.narrow_channels(0, c)?,
        lh: stacked.narrow_channels(c, c)?,
        hl: stacked.narrow_channels(2 * c, c)?,
        hh: stacked.narrow_channels(3 * c, c)?,
    })
}

pub fn idwt2d(s: &Subbands2D<Tensor>) -> Result<Tensor> {
    let shape = s.ll.shape().to_vec();
    for b in [&s.lh, &s.hl, &s.hh] {
        if b.shape() != shape.as_slice() {
            return Err(Error::shape("idwt2d", &shape, b.shape()));
        }
    }
    let (c, h, w) = s.ll.chw()?;
    let stacked = Tensor::concat_channels(&s.as_array())?;
    Tensor::new(&[c, 2 * h, 2 * w], haar2d_inverse(stacked.data(), c, h, w))
}

pub fn dwt1d(x: &Tensor) -> Result<Bands1D<Tensor>> {
    let (c, h, w) = x.chw()?;
    if c % 2 != 0 {
        return Err(Error::invalid(format!("dwt1d needs an even channel count, got {c}")));
    }
    let stacked = Tensor::new(&[c, h, w], haar1d_forward(x.data(), c, h * w))?;
    Ok(Bands1D {
        low: stacked.narrow_channels(0, c / 2)?,
        high: stacked.narrow_channels(c / 2, c / 2)?,
    })
}

pub fn idwt1d(low: &Tensor, high: &Tensor) -> Result<Tensor> {
    if low.shape() != high.shape() {
        return Err(Error::shape("idwt1d", low.shape(), high.shape()));
    }
    let (half, h, w) = low.chw()?;
    let stacked = Tensor::concat_channels(&[low, high])?;
    Tensor::new(&[2 * half, h, w], haar1d_inverse(stacked.data(), 2 * half, h * w))
}

/// Decompose `x` for `log2(ratio)` levels, each from the previous approximation.
pub fn build_pyramid2d(x: &Tensor, ratio: usize) -> Result<Pyramid2D<Tensor>> {
    let levels = exact_log2(ratio, "resolution ratio")?;
    let (_, h, w) = x.chw()?;
    if h % ratio != 0 || w % ratio != 0 {
        return Err(Error::invalid(format!("{h}×{w} is not divisible by ratio {ratio}")));
    }
    let mut out = Vec::with_capacity(levels);
    let mut current = x.clone();
    for _ in 0..levels {
        let sb = dwt2d(&current)?;
        current = sb.ll.clone();
        out.push(sb);
    }
    Ok(Pyramid2D {
        root: x.clone(),
        levels: out,
    })
}

/// Rebuild the root of a spatial pyramid bottom-up.
pub fn reconstruct_pyramid2d(p: &Pyramid2D<Tensor>) -> Result<Tensor> {
    let mut approx = match p.levels.last() {
        Some(deepest) => deepest.ll.clone(),
        None => return Ok(p.root.clone()),
    };
    for level in p.levels.iter().rev() {
        approx = idwt2d(&Subbands2D {
            ll: approx,
            lh: level.lh.clone(),
            hl: level.hl.clone(),
            hh: level.hh.clone(),
        })?;
    }
    Ok(approx)
}

/// Decompose the channel axis for `log2(C)` levels.
pub fn build_pyramid1d(x: &Tensor) -> Result<Pyramid1D<Tensor>> {
    let (c, _, _) = x.chw()?;
    let levels = exact_log2(c, "band count")?;
    let mut out = Vec::with_capacity(levels);
    let mut current = x.clone();
    for _ in 0..levels {
        let b = dwt1d(&current)?;
        current = b.low.clone();
        out.push(b);
    }
    Ok(Pyramid1D {
        root: x.clone(),
        levels: out,
    })
}

pub fn reconstruct_pyramid1d(p: &Pyramid1D<Tensor>) -> Result<Tensor> {
    let mut approx = match p.levels.last() {
        Some(deepest) => deepest.low.clone(),
        None => return Ok(p.root.clone()),
    };
    for level in p.levels.iter().rev() {
        approx = idwt1d(&approx, &level.high)?;
    }
    Ok(approx)
}

// ---------------------------------------------------------------------------
// Differentiable pyramids

/// Spatial pyramid inside a graph. Also returns the stacked `[LL; LH; HL; HH]`
/// node of every level.
pub fn graph_pyramid2d(g: &mut Graph<'_>, x: Var, ratio: usize) -> Result<(Pyramid2D<Var>, Vec<Var>)> {
    let levels = exact_log2(ratio, "resolution ratio")?;
    let (c, h, w) = g.value(x).chw()?;
    if h % ratio != 0 || w % ratio != 0 {
        return Err(Error::invalid(format!("{h}×{w} is not divisible by ratio {ratio}")));
    }
    let mut out = Vec::with_capacity(levels);
    let mut stacks = Vec::with_capacity(levels);
    let mut current = x;
    for _ in 0..levels {
        let stacked = g.dwt2d(current)?;
        let sb = Subbands2D {
            ll: g.narrow_channels(stacked, 0, c)?,
            lh: g.narrow_channels(stacked, c, c)?,
            hl: g.narrow_channels(stacked, 2 * c, c)?,
            hh: g.narrow_channels(stacked, 3 * c, c)?,
        };
        current = sb.ll;
        out.push(sb);
        stacks.push(stacked);
    }
    Ok((Pyramid2D { root: x, levels: out }, stacks))
}

/// Channel pyramid inside a graph.
pub fn graph_pyramid1d(g: &mut Graph<'_>, x: Var) -> Result<Pyramid1D<Var>> {
    let (c, _, _) = g.value(x).chw()?;
    let levels = exact_log2(c, "band count")?;
    let mut out = Vec::with_capacity(levels);
    let mut current = x;
    let mut width = c;
    for _ in 0..levels {
        let stacked = g.dwt1d(current)?;
        let b = Bands1D {
            low: g.narrow_channels(stacked, 0, width / 2)?,
            high: g.narrow_channels(stacked, width / 2, width / 2)?,
        };
        current = b.low;
        width /= 2;
        out.push(b);
    }
    Ok(Pyramid1D { root: x, levels: out })
}
