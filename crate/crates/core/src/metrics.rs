//! Image quality metrics for fused products.
//!
//! Reduced resolution: PSNR, SAM, ERGAS and Q2ⁿ against a reference.
//! Full resolution: the QNR family (D_λ, D_s, HQNR) without a reference.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Block edge of the Q2ⁿ and QNR quality maps.
pub const Q_BLOCK: usize = 32;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub psnr: Option<f64>,
    /// Degrees.
    pub sam: Option<f64>,
    pub ergas: Option<f64>,
    pub q2n: Option<f64>,
    pub d_lambda: Option<f64>,
    pub d_s: Option<f64>,
    pub hqnr: Option<f64>,
}

impl MetricsReport {
    /// All metrics that need a reference image.
    pub fn reduced(pred: &Tensor, gt: &Tensor, ratio: usize, peak: f64) -> Result<Self> {
        Ok(MetricsReport {
            psnr: Some(psnr(pred, gt, peak)?),
            sam: Some(sam(pred, gt)?),
            ergas: Some(ergas(pred, gt, ratio)?),
            q2n: Some(q2n(pred, gt, Q_BLOCK)?),
            ..Default::default()
        })
    }

    /// The QNR family for a fused product at full resolution.
    pub fn full(fused: &Tensor, lrms: &Tensor, pan: &Tensor, pan_lp: &Tensor) -> Result<Self> {
        let dl = d_lambda(fused, lrms)?;
        let ds = d_s(fused, lrms, pan, pan_lp)?;
        Ok(MetricsReport {
            d_lambda: Some(dl),
            d_s: Some(ds),
            hqnr: Some(hqnr(dl, ds)),
            ..Default::default()
        })
    }

    /// `(key, value)` pairs for the fields that are set, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        [
            ("psnr", self.psnr),
            ("sam", self.sam),
            ("ergas", self.ergas),
            ("q2n", self.q2n),
            ("d_lambda", self.d_lambda),
            ("d_s", self.d_s),
            ("hqnr", self.hqnr),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k}={v:.6}")?;
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, b.shape(), a.shape()));
    }
    a.chw()
}

/// `10·log10(peak²/MSE)` over all bands; `+∞` when the images are equal.
pub fn psnr(pred: &Tensor, gt: &Tensor, peak: f64) -> Result<f64> {
    same_shape("psnr", pred, gt)?;
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::invalid("psnr peak must be positive"));
    }
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean spectral angle in degrees. Pixels where either spectrum has zero
/// norm are skipped. The angle is `2·atan2(|â − ĝ|, |â + ĝ|)` on the unit
/// spectra, which stays accurate near zero where `acos` does not.
pub fn sam(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (c, h, w) = same_shape("sam", pred, gt)?;
    let n = h * w;
    let (p, g) = (pred.data(), gt.data());
    let mut total = 0.0;
    let mut used = 0usize;
    for i in 0..n {
        let (mut pp, mut gg) = (0.0, 0.0);
        for b in 0..c {
            let (x, y) = (p[b * n + i], g[b * n + i]);
            pp += x * x;
            gg += y * y;
        }
        if pp == 0.0 || gg == 0.0 {
            continue;
        }
        let (np, ng) = (pp.sqrt(), gg.sqrt());
        let (mut diff, mut sum) = (0.0, 0.0);
        for b in 0..c {
            let (x, y) = (p[b * n + i] / np, g[b * n + i] / ng);
            diff += (x - y) * (x - y);
            sum += (x + y) * (x + y);
        }
        total += 2.0 * diff.sqrt().atan2(sum.sqrt());
        used += 1;
    }
    if used == 0 {
        return Err(Error::invalid("sam: every pixel has a zero spectrum"));
    }
    if used < n {
        log::info!("sam: skipped {} zero-norm pixels", n - used);
    }
    Ok((total / used as f64).to_degrees())
}

/// `100/r · sqrt(mean_b (RMSE_b / μ_b)²)` with `μ_b` the reference band mean.
pub fn ergas(pred: &Tensor, gt: &Tensor, ratio: usize) -> Result<f64> {
    let (c, h, w) = same_shape("ergas", pred, gt)?;
    if ratio == 0 {
        return Err(Error::invalid("ergas ratio must be positive"));
    }
    let n = (h * w) as f64;
    let mut acc = 0.0;
    for b in 0..c {
        let (p, g) = (pred.plane(b), gt.plane(b));
        let mu = g.iter().sum::<f64>() / n;
        if mu == 0.0 {
            return Err(Error::invalid(format!("ergas: band {b} has zero mean")));
        }
        let mse = p.iter().zip(g).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        acc += mse / (mu * mu);
    }
    Ok(100.0 / ratio as f64 * (acc / c as f64).sqrt())
}

/// Universal image quality index of two equally long signals, or `None`
/// when a denominator vanishes (constant or zero-mean inputs).
pub fn uiqi(x: &[f64], y: &[f64]) -> Option<f64> {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        vx += da * da;
        vy += db * db;
        cxy += da * db;
    }
    let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
    let den = (vx + vy) * (mx * mx + my * my);
    (den > 0.0).then(|| 4.0 * cxy * mx * my / den)
}

// ---------------------------------------------------------------------------
// Hypercomplex arithmetic

/// Cayley–Dickson product of two 2ⁿ-dimensional numbers:
/// `(a, b)(c, d) = (ac − d̄b, da + bc̄)`.
fn cd_mul(x: &[f64], y: &[f64], out: &mut [f64]) {
    let n = x.len();
    if n == 1 {
        out[0] = x[0] * y[0];
        return;
    }
    let h = n / 2;
    let (a, b) = x.split_at(h);
    let (c, d) = y.split_at(h);
    let mut t1 = vec![0.0; h];
    let mut t2 = vec![0.0; h];
    let (lo, hi) = out.split_at_mut(h);
    cd_mul(a, c, &mut t1);
    cd_mul(&conj(d), b, &mut t2);
    for i in 0..h {
        lo[i] = t1[i] - t2[i];
    }
    cd_mul(d, a, &mut t1);
    cd_mul(b, &conj(c), &mut t2);
    for i in 0..h {
        hi[i] = t1[i] + t2[i];
    }
}

fn conj(x: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = x.iter().map(|v| -v).collect();
    v[0] = x[0];
    v
}

fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Q2ⁿ of one block: pixel spectra are hypercomplex numbers of dimension `d`.
fn q2n_block(x: &[Vec<f64>], y: &[Vec<f64>], d: usize) -> f64 {
    let n = x.len() as f64;
    let mean = |s: &[Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; d];
        for v in s {
            for (a, b) in m.iter_mut().zip(v) {
                *a += b;
            }
        }
        m.iter().map(|v| v / n).collect()
    };
    let (mx, my) = (mean(x), mean(y));
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = vec![0.0; d];
    let mut prod = vec![0.0; d];
    let mut dx = vec![0.0; d];
    for (px, py) in x.iter().zip(y) {
        for k in 0..d {
            dx[k] = px[k] - mx[k];
        }
        let dy: Vec<f64> = py.iter().zip(&my).map(|(a, b)| a - b).collect();
        vx += norm_sq(&dx);
        vy += norm_sq(&dy);
        cd_mul(&dx, &conj(&dy), &mut prod);
        for (c, p) in cov.iter_mut().zip(&prod) {
            *c += p;
        }
    }
    let (vx, vy) = (vx / n, vy / n);
    // A real covariance keeps its sign so one band reduces to the scalar index.
    let cxy = if d == 1 { cov[0] / n } else { norm_sq(&cov).sqrt() / n };
    let (mx2, my2) = (norm_sq(&mx), norm_sq(&my));
    let lum_num = 2.0 * mx2.sqrt() * my2.sqrt();
    let lum = if mx2 + my2 > 0.0 { lum_num / (mx2 + my2) } else { 1.0 };
    if vx + vy > 0.0 {
        2.0 * cxy / (vx + vy) * lum
    } else {
        lum
    }
}

/// Block-averaged Q2ⁿ; bands are zero-padded to the next power of two.
/// Images smaller than `block` use one global block.
pub fn q2n(pred: &Tensor, gt: &Tensor, block: usize) -> Result<f64> {
    let (c, h, w) = same_shape("q2n", pred, gt)?;
    if block == 0 {
        return Err(Error::invalid("q2n block must be positive"));
    }
    let d = c.next_power_of_two();
    let (bh, bw) = if h < block || w < block { (h, w) } else { (block, block) };
    let mut total = 0.0;
    let mut count = 0usize;
    let spectra = |t: &Tensor, y0: usize, x0: usize| -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(bh * bw);
        for yy in y0..y0 + bh {
            for xx in x0..x0 + bw {
                let mut v = vec![0.0; d];
                for (b, slot) in v.iter_mut().take(c).enumerate() {
                    *slot = t.plane(b)[yy * w + xx];
                }
                out.push(v);
            }
        }
        out
    };
    for y0 in (0..=h - bh).step_by(bh) {
        for x0 in (0..=w - bw).step_by(bw) {
            total += q2n_block(&spectra(pred, y0, x0), &spectra(gt, y0, x0), d);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// No-reference metrics

/// Block-averaged scalar quality index of two planes; degenerate blocks are
/// skipped. `None` if every block is degenerate.
fn q_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> Option<f64> {
    let (bh, bw) = if h < Q_BLOCK || w < Q_BLOCK { (h, w) } else { (Q_BLOCK, Q_BLOCK) };
    let mut total = 0.0;
    let mut count = 0usize;
    let mut bx = Vec::with_capacity(bh * bw);
    let mut by = Vec::with_capacity(bh * bw);
    for y0 in (0..=h - bh).step_by(bh) {
        for x0 in (0..=w - bw).step_by(bw) {
            bx.clear();
            by.clear();
            for yy in y0..y0 + bh {
                bx.extend_from_slice(&x[yy * w + x0..yy * w + x0 + bw]);
                by.extend_from_slice(&y[yy * w + x0..yy * w + x0 + bw]);
            }
            if let Some(q) = uiqi(&bx, &by) {
                total += q;
                count += 1;
            }
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// Spectral distortion: mean over band pairs of `|Q(F_i,F_j) − Q(L_i,L_j)|`,
/// clamped to `[0, 1]`.
pub fn d_lambda(fused: &Tensor, lrms: &Tensor) -> Result<f64> {
    let (c, h, w) = fused.chw()?;
    let (lc, lh, lw) = lrms.chw()?;
    if lc != c {
        return Err(Error::shape("d_lambda", &[c, lh, lw], lrms.shape()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    let mut skipped = 0usize;
    for i in 0..c {
        for j in i + 1..c {
            match (
                q_plane(fused.plane(i), fused.plane(j), h, w),
                q_plane(lrms.plane(i), lrms.plane(j), lh, lw),
            ) {
                (Some(a), Some(b)) => {
                    total += (a - b).abs();
                    pairs += 1;
                }
                _ => skipped += 1,
            }
        }
    }
    if skipped > 0 {
        log::info!("d_lambda: skipped {skipped} degenerate band pairs");
    }
    if pairs == 0 {
        return Ok(0.0);
    }
    Ok((total / pairs as f64).clamp(0.0, 1.0))
}

/// Spatial distortion: mean over bands of `|Q(F_i, PAN) − Q(L_i, PAN_lp)|`,
/// clamped to `[0, 1]`.
pub fn d_s(fused: &Tensor, lrms: &Tensor, pan: &Tensor, pan_lp: &Tensor) -> Result<f64> {
    let (c, h, w) = fused.chw()?;
    let (lc, lh, lw) = lrms.chw()?;
    if pan.shape() != [1, h, w] {
        return Err(Error::shape("d_s", &[1, h, w], pan.shape()));
    }
    if lc != c || pan_lp.shape() != [1, lh, lw] {
        return Err(Error::shape("d_s", &[1, lh, lw], pan_lp.shape()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for b in 0..c {
        match (
            q_plane(fused.plane(b), pan.plane(0), h, w),
            q_plane(lrms.plane(b), pan_lp.plane(0), lh, lw),
        ) {
            (Some(a), Some(q)) => {
                total += (a - q).abs();
                used += 1;
            }
            _ => log::info!("d_s: skipped degenerate band {b}"),
        }
    }
    if used == 0 {
        return Ok(0.0);
    }
    Ok((total / used as f64).clamp(0.0, 1.0))
}

pub fn hqnr(d_lambda: f64, d_s: f64) -> f64 {
    (1.0 - d_lambda) * (1.0 - d_s)
}
