//! Synthetic scenes, reduced-resolution triplets and the S2WT raster format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{ImagePlanar, Tensor};

pub const IMAGE_MAGIC: &[u8; 4] = b"S2WT";
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: u64,
}

/// Ground truth with its degraded inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub gt: ImagePlanar,
    pub lrms: ImagePlanar,
    pub pan: ImagePlanar,
    /// PAN degraded to the LRMS grid.
    pub pan_lp: ImagePlanar,
}

// ---------------------------------------------------------------------------
// Scene synthesis

/// Smooth random reflectance curve over `bands`, values in `[lo, hi]`.
fn signature(rng: &mut ChaCha8Rng, bands: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut v = rng.gen_range(lo..hi);
    (0..bands)
        .map(|_| {
            v = (v + rng.gen_range(-0.12..0.12)).clamp(lo, hi);
            v
        })
        .collect()
}

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, cos: f64, sin: f64 },
    Rect { cy: f64, cx: f64, hy: f64, hx: f64, cos: f64, sin: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let cy = rng.gen_range(0.15..0.85) * hf;
        let cx = rng.gen_range(0.15..0.85) * wf;
        let sy = rng.gen_range(0.1..0.35) * hf;
        let sx = rng.gen_range(0.1..0.35) * wf;
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (sin, cos) = theta.sin_cos();
        if rng.gen_bool(0.5) {
            Shape::Ellipse { cy, cx, ry: sy, rx: sx, cos, sin }
        } else {
            Shape::Rect { cy, cx, hy: sy, hx: sx, cos, sin }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, cos, sin } => {
                let (u, v) = rotate(y - cy, x - cx, cos, sin);
                (u / ry).powi(2) + (v / rx).powi(2) <= 1.0
            }
            Shape::Rect { cy, cx, hy, hx, cos, sin } => {
                let (u, v) = rotate(y - cy, x - cx, cos, sin);
                u.abs() <= hy && v.abs() <= hx
            }
        }
    }
}

fn rotate(y: f64, x: f64, cos: f64, sin: f64) -> (f64, f64) {
    (cos * y - sin * x, sin * y + cos * x)
}

/// Largest PAN step between horizontal or vertical neighbours.
fn max_step(img: &Tensor) -> f64 {
    let (c, h, w) = img.chw().expect("scene is c×h×w");
    let pan: Vec<f64> = (0..h * w)
        .map(|i| (0..c).map(|b| img.plane(b)[i]).sum::<f64>() / c as f64)
        .collect();
    let mut m: f64 = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = pan[y * w + x];
            if x + 1 < w {
                m = m.max((pan[y * w + x + 1] - v).abs());
            }
            if y + 1 < h {
                m = m.max((pan[(y + 1) * w + x] - v).abs());
            }
        }
    }
    m
}

/// Minimum PAN jump across the edge every scene must contain.
pub const MIN_EDGE: f64 = 0.1;

fn one_scene(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    loop {
        let bg_sig = signature(rng, c, 0.3, 0.9);
        let gdir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (gy, gx) = (gdir.sin() / h as f64, gdir.cos() / w as f64);
        let (g0, g1) = (rng.gen_range(0.35..0.55), rng.gen_range(-0.25..0.25));

        let n_shapes = rng.gen_range(1..=4);
        let shapes: Vec<(Shape, Vec<f64>)> = (0..n_shapes)
            .map(|_| {
                let s = Shape::random(rng, h, w);
                let bright = rng.gen_bool(0.5);
                let sig = if bright { signature(rng, c, 0.6, 1.0) } else { signature(rng, c, 0.0, 0.3) };
                (s, sig)
            })
            .collect();

        let n_waves = rng.gen_range(1..=3);
        let waves: Vec<(f64, f64, f64, f64)> = (0..n_waves)
            .map(|_| {
                let f: f64 = rng.gen_range(0.15..1.2);
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                (f * a.sin(), f * a.cos(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.01..0.04))
            })
            .collect();
        let tex_gain: Vec<f64> = bg_sig.iter().map(|s| 0.5 + s).collect();

        let mut data = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
                let shade = g0 + g1 * (gy * yf + gx * xf);
                let tex: f64 = waves.iter().map(|(fy, fx, ph, a)| a * (fy * yf + fx * xf + ph).sin()).sum();
                let hit = shapes.iter().rev().find(|(s, _)| s.contains(yf, xf));
                for b in 0..c {
                    let base = match hit {
                        Some((_, sig)) => sig[b],
                        None => bg_sig[b] * (shade + 0.45),
                    };
                    data[b * h * w + y * w + x] = (base + tex * tex_gain[b]).clamp(0.0, 1.0);
                }
            }
        }
        let img = Tensor::new(&[c, h, w], data).expect("scene buffer");
        if max_step(&img) >= MIN_EDGE {
            return img;
        }
    }
}

/// Ground-truth scenes; scene `i` depends only on the seed and `i`.
pub fn generate_scenes(spec: &SceneSpec) -> Result<Vec<ImagePlanar>> {
    if spec.bands == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::invalid("scene dimensions must be positive"));
    }
    Ok((0..spec.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            one_scene(&mut rng, spec.bands, spec.height, spec.width)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Degradation

/// Decimating Gaussian taps for ratio `r`: `(first offset, weights)`.
///
/// Low-resolution pixel `i` covers `[i·r, (i+1)·r)`; the kernel is centred
/// on that cell, σ = r/2, truncated at 4σ and normalized.
pub fn decimation_kernel(r: usize) -> (isize, Vec<f64>) {
    let sigma = r as f64 / 2.0;
    let centre = (r as f64 - 1.0) / 2.0;
    let lo = (centre - 4.0 * sigma).ceil() as isize;
    let hi = (centre + 4.0 * sigma).floor() as isize;
    let raw: Vec<f64> = (lo..=hi)
        .map(|t| (-(t as f64 - centre).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    (lo, raw.into_iter().map(|v| v / s).collect())
}

/// Separable Gaussian blur and decimation by `r` with replicated borders.
pub fn blur_decimate(img: &Tensor, r: usize) -> Result<Tensor> {
    let (c, h, w) = img.chw()?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::invalid(format!("{h}×{w} is not divisible by ratio {r}")));
    }
    let (lo, k) = decimation_kernel(r);
    let (ho, wo) = (h / r, w / r);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut rows = vec![0.0; h * wo];
    for b in 0..c {
        let p = img.plane(b);
        for y in 0..h {
            for j in 0..wo {
                let base = (j * r) as isize + lo;
                rows[y * wo + j] = k
                    .iter()
                    .enumerate()
                    .map(|(t, wt)| wt * p[y * w + clamp(base + t as isize, w)])
                    .sum();
            }
        }
        for i in 0..ho {
            let base = (i * r) as isize + lo;
            for j in 0..wo {
                out.push(
                    k.iter()
                        .enumerate()
                        .map(|(t, wt)| wt * rows[clamp(base + t as isize, h) * wo + j])
                        .sum(),
                );
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

/// Weighted band sum; weights must be positive and sum to 1.
pub fn synthesize_pan(gt: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let (c, h, w) = gt.chw()?;
    if weights.len() != c || weights.iter().any(|&v| v.is_nan() || v <= 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("PAN weights must be positive, one per band, summing to 1"));
    }
    let n = h * w;
    Tensor::new(
        &[1, h, w],
        (0..n).map(|i| (0..c).map(|b| weights[b] * gt.plane(b)[i]).sum()).collect(),
    )
}

/// Reduced-resolution triplet with a uniform PAN response.
pub fn wald_degrade(gt: &Tensor, r: usize) -> Result<Triplet> {
    let c = gt.chw()?.0;
    wald_degrade_weighted(gt, r, &vec![1.0 / c as f64; c])
}

pub fn wald_degrade_weighted(gt: &Tensor, r: usize, weights: &[f64]) -> Result<Triplet> {
    let lrms = blur_decimate(gt, r)?;
    let pan = synthesize_pan(gt, weights)?;
    let pan_lp = blur_decimate(&pan, r)?;
    Ok(Triplet {
        gt: gt.clone(),
        lrms,
        pan,
        pan_lp,
    })
}

/// Scenes and their triplets, generated in parallel.
pub fn generate_triplets(spec: &SceneSpec, r: usize) -> Result<Vec<Triplet>> {
    generate_scenes(spec)?.par_iter().map(|g| wald_degrade(g, r)).collect()
}

// ---------------------------------------------------------------------------
// S2WT files

pub fn image_bytes(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = img.chw()?;
    let mut out = Vec::with_capacity(HEADER_LEN + img.len() * 4);
    out.extend_from_slice(IMAGE_MAGIC);
    for d in [c, h, w] {
        let d = u32::try_from(d).map_err(|_| Error::invalid("image dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in img.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn image_from_bytes(buf: &[u8]) -> Result<Tensor> {
    if buf.len() < HEADER_LEN {
        return Err(Error::Format("truncated image header".into()));
    }
    if &buf[..4] != IMAGE_MAGIC {
        return Err(Error::Format("not an S2WT image (bad magic)".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let payload = c
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("dimensions {c}×{h}×{w} overflow")))?;
    let body = &buf[HEADER_LEN..];
    if body.len() != payload {
        return Err(Error::Format(format!(
            "payload is {} bytes, header {c}×{h}×{w} needs {payload}",
            body.len()
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("image contains non-finite values".into()));
    }
    Tensor::new(&[c, h, w], data)
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, image_bytes(img)?)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    image_from_bytes(&fs::read(path)?)
}

/// `<dir>/<split>/<index>.<kind>.s2wt`.
pub fn triplet_path(dir: &Path, split: &str, index: usize, kind: &str) -> PathBuf {
    dir.join(split).join(format!("{index}.{kind}.s2wt"))
}

/// Write GT, LRMS and PAN for every triplet; returns the written paths.
pub fn save_split(dir: &Path, split: &str, triplets: &[Triplet]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir.join(split))?;
    let written: Result<Vec<Vec<PathBuf>>> = triplets
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            [("gt", &t.gt), ("lrms", &t.lrms), ("pan", &t.pan)]
                .into_iter()
                .map(|(kind, img)| {
                    let p = triplet_path(dir, split, i, kind);
                    write_image(&p, img)?;
                    Ok(p)
                })
                .collect()
        })
        .collect();
    Ok(written?.into_iter().flatten().collect())
}

/// Load one triplet; `pan_lp` is recomputed from the PAN.
pub fn load_triplet(dir: &Path, split: &str, index: usize, r: usize) -> Result<Triplet> {
    let gt = read_image(&triplet_path(dir, split, index, "gt"))?;
    let lrms = read_image(&triplet_path(dir, split, index, "lrms"))?;
    let pan = read_image(&triplet_path(dir, split, index, "pan"))?;
    let (c, h, w) = gt.chw()?;
    if lrms.shape() != [c, h / r, w / r] || pan.shape() != [1, h, w] || h % r != 0 || w % r != 0 {
        return Err(Error::Format(format!("triplet {split}/{index} has inconsistent shapes")));
    }
    let pan_lp = blur_decimate(&pan, r)?;
    Ok(Triplet { gt, lrms, pan, pan_lp })
}

/// All consecutive triplets `0, 1, …` found in a split.
pub fn load_split(dir: &Path, split: &str, r: usize) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    while triplet_path(dir, split, out.len(), "gt").exists() {
        out.push(load_triplet(dir, split, out.len(), r)?);
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("no triplets under {}", dir.join(split).display())));
    }
    Ok(out)
}
