//! The two feature branches.
//!
//! The spectral branch starts from the LRMS features at low resolution. Each
//! stage fuses them with one level of the PAN wavelet pyramid, one fusion
//! block per subband, and synthesizes the next resolution with the inverse
//! transform. The spatial branch starts from the raw PAN. Each stage fuses it
//! with one level of the channel pyramid of the upsampled spectrum and
//! doubles the channel count.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::fmamba::{fmamba_block, FMambaConfig, FMambaParams, SkipSource};
use crate::nn::{Builder, Conv2d};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::wavelet::{exact_log2, graph_pyramid1d, graph_pyramid2d};

/// Feature width `C` of both branches.
pub const FEATURE_WIDTH: usize = 32;
const KERNEL: usize = 3;

/// What fuses two feature maps inside a stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionKind {
    #[default]
    Mamba,
    /// Convolutional residual block (the CRM ablation).
    Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchConfig {
    /// LRMS band count `c`.
    pub bands: usize,
    /// PAN/LRMS resolution ratio `r`.
    pub ratio: usize,
    /// Feature width `C`.
    pub width: usize,
    pub fusion: FusionKind,
    pub skip: SkipSource,
}

impl BranchConfig {
    pub fn new(bands: usize, ratio: usize) -> Self {
        BranchConfig {
            bands,
            ratio,
            width: FEATURE_WIDTH,
            fusion: FusionKind::Mamba,
            skip: SkipSource::default(),
        }
    }

    fn fmamba(&self) -> FMambaConfig {
        FMambaConfig {
            skip: self.skip,
            ..FMambaConfig::new(self.width)
        }
    }
}

/// Two 3×3 convs with GELU over the concatenated streams, added to their mean.
#[derive(Clone, Debug)]
pub struct ConvFuser {
    first: Conv2d,
    second: Conv2d,
}

impl ConvFuser {
    fn new(b: &mut Builder<'_>, name: &str, width: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(ConvFuser {
            first: Conv2d::new(&mut b, "conv1", 2 * width, width, KERNEL)?,
            second: Conv2d::new(&mut b, "conv2", width, width, KERNEL)?,
        })
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, y: Var) -> Result<Var> {
        let cat = g.concat_channels(&[x, y])?;
        let h = self.first.forward(g, cat)?;
        let h = g.gelu(h)?;
        let h = self.second.forward(g, h)?;
        let sum = g.add(x, y)?;
        let mean = g.scale(sum, 0.5)?;
        g.add(mean, h)
    }
}

#[derive(Clone, Debug)]
pub enum Fuser {
    Mamba(FMambaParams),
    Conv(ConvFuser),
}

impl Fuser {
    fn new(b: &mut Builder<'_>, name: &str, cfg: &BranchConfig) -> Result<Self> {
        Ok(match cfg.fusion {
            FusionKind::Mamba => Fuser::Mamba(FMambaParams::new(b, name, &cfg.fmamba())?),
            FusionKind::Conv => Fuser::Conv(ConvFuser::new(b, name, cfg.width)?),
        })
    }

    /// Fused map of `x` (primary) and `y` (auxiliary).
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, y: Var) -> Result<Var> {
        match self {
            Fuser::Mamba(p) => Ok(fmamba_block(g, p, x, y)?.fused),
            Fuser::Conv(c) => c.forward(g, x, y),
        }
    }
}

/// Labeled tensor shapes recorded during a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShapeTrace {
    pub rows: Vec<(String, Vec<usize>)>,
}

impl ShapeTrace {
    fn record(trace: &mut Option<&mut ShapeTrace>, label: impl Into<String>, shape: &[usize]) {
        if let Some(t) = trace.as_deref_mut() {
            t.rows.push((label.into(), shape.to_vec()));
        }
    }

    pub fn get(&self, label: &str) -> Option<&[usize]> {
        self.rows.iter().find(|(l, _)| l == label).map(|(_, s)| s.as_slice())
    }
}

// ---------------------------------------------------------------------------
// Spectral branch

#[derive(Clone, Debug)]
pub struct SpectralBranchParams {
    pub cfg: BranchConfig,
    pan_in: Conv2d,
    lrms_in: Conv2d,
    /// `stages[i - 1]` fuses LL, LH, HL, HH in that order.
    stages: Vec<[Fuser; 4]>,
    pub out: Conv2d,
}

impl SpectralBranchParams {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &BranchConfig) -> Result<Self> {
        let n_r = exact_log2(cfg.ratio, "resolution ratio")?;
        let mut b = b.sub(name);
        let pan_in = Conv2d::new(&mut b, "pan_in", 1, cfg.width, KERNEL)?;
        let lrms_in = Conv2d::new(&mut b, "lrms_in", cfg.bands, cfg.width, KERNEL)?;
        let mut stages = Vec::with_capacity(n_r);
        for i in 1..=n_r {
            let mut sb = b.sub(&format!("stage{i}"));
            stages.push([
                Fuser::new(&mut sb, "ll", cfg)?,
                Fuser::new(&mut sb, "lh", cfg)?,
                Fuser::new(&mut sb, "hl", cfg)?,
                Fuser::new(&mut sb, "hh", cfg)?,
            ]);
        }
        let out = Conv2d::new(&mut b, "out", cfg.width, cfg.bands, KERNEL)?;
        Ok(SpectralBranchParams {
            cfg: cfg.clone(),
            pan_in,
            lrms_in,
            stages,
            out,
        })
    }

    pub fn zero_output(&self, store: &mut ParamStore) {
        self.out.zero(store);
    }
}

/// `Output1`: `c×H×W` from PAN `1×H×W` and a `c×(H/r)×(W/r)` spectral input.
pub fn spectral_branch(
    g: &mut Graph<'_>,
    p: &SpectralBranchParams,
    pan: Var,
    lrms: Var,
    mut trace: Option<&mut ShapeTrace>,
) -> Result<Var> {
    let cfg = &p.cfg;
    let (pc, h, w) = g.value(pan).chw()?;
    let (lc, lh, lw) = g.value(lrms).chw()?;
    if pc != 1 || lc != cfg.bands || lh * cfg.ratio != h || lw * cfg.ratio != w {
        return Err(Error::shape(
            "spectral_branch",
            &[cfg.bands, h / cfg.ratio, w / cfg.ratio],
            &[lc, lh, lw],
        ));
    }
    let n_r = p.stages.len();
    let ll0 = p.pan_in.forward(g, pan)?;
    ShapeTrace::record(&mut trace, "Input PAN conv", g.shape(ll0));
    let (pyramid, stacks) = graph_pyramid2d(g, ll0, cfg.ratio)?;
    for (j, s) in stacks.iter().enumerate() {
        ShapeTrace::record(&mut trace, format!("Level-{} DWT2D", j + 1), g.shape(*s));
    }

    let mut m = p.lrms_in.forward(g, lrms)?;
    for (idx, fusers) in p.stages.iter().enumerate() {
        let i = idx + 1;
        let j = n_r - i + 1;
        let level = pyramid.level(j);
        let mut fused = Vec::with_capacity(4);
        for (f, s) in fusers.iter().zip(level.as_array()) {
            fused.push(f.forward(g, m, *s)?);
        }
        let stacked = g.concat_channels(&fused)?;
        ShapeTrace::record(&mut trace, format!("FMamba (SpeBS-{i})"), g.shape(stacked));
        m = g.idwt2d(stacked)?;
        ShapeTrace::record(&mut trace, format!("IDWT2D (SpeBS-{i})"), g.shape(m));
    }
    let out = p.out.forward(g, m)?;
    ShapeTrace::record(&mut trace, "Reduce to c", g.shape(out));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Spatial branch

#[derive(Clone, Debug)]
struct SpatialStage {
    conv_p: Conv2d,
    conv_l: Conv2d,
    conv_h: Conv2d,
    fuse_l: Fuser,
    fuse_h: Fuser,
    orig_l: Conv2d,
    orig_h: Conv2d,
}

#[derive(Clone, Debug)]
pub struct SpatialBranchParams {
    pub cfg: BranchConfig,
    stages: Vec<SpatialStage>,
}

impl SpatialBranchParams {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &BranchConfig) -> Result<Self> {
        let n_c = exact_log2(cfg.bands, "band count")?;
        let mut b = b.sub(name);
        let cw = cfg.width;
        let mut stages = Vec::with_capacity(n_c);
        for i in 1..=n_c {
            let ch = 1 << (i - 1);
            let mut sb = b.sub(&format!("stage{i}"));
            stages.push(SpatialStage {
                conv_p: Conv2d::new(&mut sb, "conv_p", ch, cw, KERNEL)?,
                conv_l: Conv2d::new(&mut sb, "conv_l", ch, cw, KERNEL)?,
                conv_h: Conv2d::new(&mut sb, "conv_h", ch, cw, KERNEL)?,
                fuse_l: Fuser::new(&mut sb, "fuse_l", cfg)?,
                fuse_h: Fuser::new(&mut sb, "fuse_h", cfg)?,
                orig_l: Conv2d::new(&mut sb, "orig_l", cw, ch, KERNEL)?,
                orig_h: Conv2d::new(&mut sb, "orig_h", cw, ch, KERNEL)?,
            });
        }
        Ok(SpatialBranchParams { cfg: cfg.clone(), stages })
    }

    /// Zero the last stage's back-projections so the branch outputs zero.
    pub fn zero_output(&self, store: &mut ParamStore) {
        if let Some(last) = self.stages.last() {
            last.orig_l.zero(store);
            last.orig_h.zero(store);
        }
    }
}

/// `Output2`: `c×H×W` from PAN `1×H×W` and the full-resolution spectrum `l0`.
pub fn spatial_branch(
    g: &mut Graph<'_>,
    p: &SpatialBranchParams,
    pan: Var,
    l0: Var,
    mut trace: Option<&mut ShapeTrace>,
) -> Result<Var> {
    let (pc, h, w) = g.value(pan).chw()?;
    let (lc, lh, lw) = g.value(l0).chw()?;
    if pc != 1 || lc != p.cfg.bands || (lh, lw) != (h, w) {
        return Err(Error::shape("spatial_branch", &[p.cfg.bands, h, w], &[lc, lh, lw]));
    }
    let n_c = p.stages.len();
    let pyramid = graph_pyramid1d(g, l0)?;
    let mut prev = pan;
    for (idx, st) in p.stages.iter().enumerate() {
        let i = idx + 1;
        let j = n_c - i + 1;
        let bands = pyramid.level(j);
        ShapeTrace::record(&mut trace, format!("Level-{j} DWT1D"), g.shape(bands.low));
        let pf = st.conv_p.forward(g, prev)?;
        let lf = st.conv_l.forward(g, bands.low)?;
        let hf = st.conv_h.forward(g, bands.high)?;
        let fl = st.fuse_l.forward(g, pf, lf)?;
        let fh = st.fuse_h.forward(g, pf, hf)?;
        let ol = st.orig_l.forward(g, fl)?;
        let oh = st.orig_h.forward(g, fh)?;
        let stacked = g.concat_channels(&[ol, oh])?;
        prev = g.idwt1d(stacked)?;
        ShapeTrace::record(&mut trace, format!("IDWT1D (SpaBS-{i})"), g.shape(prev));
    }
    Ok(prev)
}

// ---------------------------------------------------------------------------
// Upsampling

const BICUBIC_A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    let a = BICUBIC_A;
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Per output index: four clamped source indices and their weights.
fn bicubic_taps(n_in: usize, r: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..n_in * r)
        .map(|i| {
            let src = (i as f64 + 0.5) / r as f64 - 0.5;
            let x0 = src.floor();
            let t = src - x0;
            let mut idx = [0usize; 4];
            let mut wts = [0.0; 4];
            for k in 0..4 {
                let pos = x0 as isize + k as isize - 1;
                idx[k] = pos.clamp(0, n_in as isize - 1) as usize;
                wts[k] = cubic(t - (k as f64 - 1.0));
            }
            (idx, wts)
        })
        .collect()
}

/// Separable bicubic interpolation (`a = -0.5`, half-pixel centers, clamped
/// borders) by an integer factor.
pub fn bicubic_upsample(x: &Tensor, r: usize) -> Result<Tensor> {
    exact_log2(r, "upsampling ratio")?;
    let (c, h, w) = x.chw()?;
    let (ho, wo) = (h * r, w * r);
    let (tx, ty) = (bicubic_taps(w, r), bicubic_taps(h, r));
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut rows = vec![0.0; h * wo];
    for ch in 0..c {
        let p = x.plane(ch);
        for y in 0..h {
            for (xo, (idx, wts)) in tx.iter().enumerate() {
                rows[y * wo + xo] = (0..4).map(|k| wts[k] * p[y * w + idx[k]]).sum();
            }
        }
        for (idx, wts) in &ty {
            for xo in 0..wo {
                out.push((0..4).map(|k| wts[k] * rows[idx[k] * wo + xo]).sum());
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}
