//! Full model: upsampled LRMS plus a learned residual.
//!
//! `up = bicubic(lrms)`; the spectral branch yields `o1`; the spatial branch
//! refines the PAN against the channel pyramid of `up + o1` and yields `o2`;
//! the dual gate fuses both into the residual.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::branches::{
    bicubic_upsample, spatial_branch, spectral_branch, BranchConfig, FusionKind, ShapeTrace, SpatialBranchParams,
    SpectralBranchParams,
};
use crate::error::{Error, Result};
use crate::fmamba::SkipSource;
use crate::msdg::{dual_msdg, DualMsdg, GateMask};
use crate::nn::{Builder, Conv2d, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::wavelet::exact_log2;

/// Structural ablations; at most one is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Structural {
    /// Spectral branch only.
    SpeO,
    /// Spatial branch only.
    SpaO,
    /// Spectral then spatial, residual from the spatial branch.
    SeqB1,
    /// Spatial then spectral, residual from the spectral branch.
    SeqB2,
    /// Convolutional blocks in place of every fusion block.
    Crm,
    /// Hadamard product instead of the gate.
    Hp,
    /// Channel-attention weighted sum instead of the gate.
    Aws,
}

impl Structural {
    pub const ALL: [Structural; 7] = [
        Structural::SpeO,
        Structural::SpaO,
        Structural::SeqB1,
        Structural::SeqB2,
        Structural::Crm,
        Structural::Hp,
        Structural::Aws,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Structural::SpeO => "SpeO",
            Structural::SpaO => "SpaO",
            Structural::SeqB1 => "SeqB1",
            Structural::SeqB2 => "SeqB2",
            Structural::Crm => "CRM",
            Structural::Hp => "HP",
            Structural::Aws => "AWS",
        }
    }

    fn code(self) -> u32 {
        Structural::ALL.iter().position(|&s| s == self).unwrap() as u32 + 1
    }

    fn from_code(code: u32) -> Result<Option<Self>> {
        match code {
            0 => Ok(None),
            c if (c as usize) <= Structural::ALL.len() => Ok(Some(Structural::ALL[c as usize - 1])),
            c => Err(Error::Format(format!("unknown ablation code {c}"))),
        }
    }

    /// Whether the dual gate is part of this variant.
    fn keeps_gate(self) -> bool {
        matches!(self, Structural::Crm)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct AblationConfig {
    pub structural: Option<Structural>,
    pub no_gm: bool,
    /// Disables the decorative gate.
    pub no_gc: bool,
    pub no_ga: bool,
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        let gate_toggle = self.no_gm || self.no_gc || self.no_ga;
        if let Some(s) = self.structural {
            if gate_toggle && !s.keeps_gate() {
                return Err(Error::invalid(format!("{} has no gate to disable", s.name())));
            }
        }
        Ok(())
    }

    fn mask(&self) -> GateMask {
        GateMask {
            mul: !self.no_gm,
            dec: !self.no_gc,
            add: !self.no_ga,
        }
    }

    /// The ten single-toggle variants of the ablation table.
    pub fn table() -> Vec<AblationConfig> {
        let mut v: Vec<AblationConfig> = Structural::ALL
            .iter()
            .map(|&s| AblationConfig {
                structural: Some(s),
                ..Default::default()
            })
            .collect();
        v.push(AblationConfig {
            no_gm: true,
            ..Default::default()
        });
        v.push(AblationConfig {
            no_gc: true,
            ..Default::default()
        });
        v.push(AblationConfig {
            no_ga: true,
            ..Default::default()
        });
        v
    }
}

impl fmt::Display for AblationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<&str> = Vec::new();
        if let Some(s) = self.structural {
            parts.push(s.name());
        }
        if self.no_gm {
            parts.push("no_Gm");
        }
        if self.no_gc {
            parts.push("no_Gc");
        }
        if self.no_ga {
            parts.push("no_Ga");
        }
        if parts.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", parts.join("+"))
        }
    }
}

impl FromStr for AblationConfig {
    type Err = Error;

    /// `none`, or `+`/`,`-separated flags such as `CRM+no_Gm`; case-insensitive.
    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = AblationConfig::default();
        for tok in s.split(['+', ',']).map(str::trim).filter(|t| !t.is_empty()) {
            let lower = tok.to_ascii_lowercase();
            match lower.as_str() {
                "none" => {}
                "no_gm" => cfg.no_gm = true,
                "no_gc" => cfg.no_gc = true,
                "no_ga" => cfg.no_ga = true,
                _ => {
                    let s = Structural::ALL
                        .iter()
                        .find(|s| s.name().eq_ignore_ascii_case(&lower))
                        .ok_or_else(|| Error::invalid(format!("unknown ablation flag {tok}")))?;
                    if cfg.structural.replace(*s).is_some() {
                        return Err(Error::invalid("at most one structural ablation may be active"));
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub bands: usize,
    pub ratio: usize,
    pub width: usize,
    pub skip: SkipSource,
    pub ablation: AblationConfig,
}

impl ModelConfig {
    pub fn new(bands: usize, ratio: usize) -> Self {
        ModelConfig {
            bands,
            ratio,
            width: crate::branches::FEATURE_WIDTH,
            skip: SkipSource::default(),
            ablation: AblationConfig::default(),
        }
    }

    /// 4× ratio, 8 bands.
    pub fn wv3() -> Self {
        Self::new(8, 4)
    }

    fn branch(&self) -> BranchConfig {
        BranchConfig {
            bands: self.bands,
            ratio: self.ratio,
            width: self.width,
            fusion: if self.ablation.structural == Some(Structural::Crm) {
                FusionKind::Conv
            } else {
                FusionKind::Mamba
            },
            skip: self.skip,
        }
    }

    fn validate(&self) -> Result<()> {
        exact_log2(self.bands, "band count")?;
        exact_log2(self.ratio, "resolution ratio")?;
        if self.width == 0 {
            return Err(Error::invalid("feature width must be positive"));
        }
        self.ablation.validate()
    }

    fn encode(&self) -> Vec<f64> {
        let a = &self.ablation;
        vec![
            self.bands as f64,
            self.ratio as f64,
            self.width as f64,
            (self.skip == SkipSource::Raw) as u8 as f64,
            a.structural.map_or(0, Structural::code) as f64,
            a.no_gm as u8 as f64,
            a.no_gc as u8 as f64,
            a.no_ga as u8 as f64,
        ]
    }

    fn decode(v: &[f64]) -> Result<Self> {
        let int = |x: f64| -> Result<usize> {
            if x.fract() == 0.0 && (0.0..1e6).contains(&x) {
                Ok(x as usize)
            } else {
                Err(Error::Format(format!("bad config field {x}")))
            }
        };
        if v.len() != 8 {
            return Err(Error::Format(format!("config entry has {} fields, expected 8", v.len())));
        }
        let cfg = ModelConfig {
            bands: int(v[0])?,
            ratio: int(v[1])?,
            width: int(v[2])?,
            skip: if int(v[3])? == 1 { SkipSource::Raw } else { SkipSource::PostResidual },
            ablation: AblationConfig {
                structural: Structural::from_code(int(v[4])? as u32)?,
                no_gm: int(v[5])? == 1,
                no_gc: int(v[6])? == 1,
                no_ga: int(v[7])? == 1,
            },
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }
}

/// Channel attention over the concatenated branch outputs.
#[derive(Clone, Debug)]
pub struct AwsParams {
    fc: Linear,
}

#[derive(Clone, Debug)]
pub enum Head {
    Dual(DualMsdg),
    Hadamard,
    Weighted(AwsParams),
    /// A single branch through a 3×3 conv (SpeO, SpaO).
    Conv(Conv2d),
    /// A single branch used as is (SeqB1, SeqB2).
    Direct,
}

#[derive(Clone, Debug)]
pub struct S2WMambaModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub spectral: Option<SpectralBranchParams>,
    pub spatial: Option<SpatialBranchParams>,
    pub head: Head,
}

impl S2WMambaModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bc = cfg.branch();
        let st = cfg.ablation.structural;
        let (spectral, spatial, head) = {
            let mut b = Builder::new(&mut store, &mut rng);
            let spectral = match st {
                Some(Structural::SpaO) => None,
                _ => Some(SpectralBranchParams::new(&mut b, "spectral", &bc)?),
            };
            let spatial = match st {
                Some(Structural::SpeO) => None,
                _ => Some(SpatialBranchParams::new(&mut b, "spatial", &bc)?),
            };
            let head = match st {
                None | Some(Structural::Crm) => {
                    let mut d = DualMsdg::new(&mut b, "gate", cfg.bands)?;
                    d.set_mask(cfg.ablation.mask());
                    Head::Dual(d)
                }
                Some(Structural::Hp) => Head::Hadamard,
                Some(Structural::Aws) => Head::Weighted(AwsParams {
                    fc: Linear::new(&mut b.sub("aws"), "fc", 2 * cfg.bands, 2 * cfg.bands, true)?,
                }),
                Some(Structural::SpeO | Structural::SpaO) => {
                    Head::Conv(Conv2d::new(&mut b, "residual_conv", cfg.bands, cfg.bands, 3)?)
                }
                Some(Structural::SeqB1 | Structural::SeqB2) => Head::Direct,
            };
            (spectral, spatial, head)
        };
        log::info!("model {}: {} parameters", cfg.ablation, store.num_scalars());
        let mut model = S2WMambaModel {
            cfg,
            store,
            spectral,
            spatial,
            head,
        };
        if let Head::Dual(d) = &model.head {
            d.zero_heads(&mut model.store);
        }
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Zero every path into the residual, turning the model into the
    /// bicubic upsampler.
    pub fn zero_residual(&mut self) {
        if let Some(s) = &self.spectral {
            s.zero_output(&mut self.store);
        }
        if let Some(s) = &self.spatial {
            s.zero_output(&mut self.store);
        }
        match &self.head {
            Head::Dual(d) => d.zero_heads(&mut self.store),
            Head::Conv(c) => c.zero(&mut self.store),
            Head::Hadamard | Head::Weighted(_) | Head::Direct => {}
        }
    }

    fn check_inputs(&self, pan: &Tensor, lrms: &Tensor) -> Result<()> {
        let (pc, h, w) = pan.chw()?;
        let (lc, lh, lw) = lrms.chw()?;
        let r = self.cfg.ratio;
        if pc != 1 || lc != self.cfg.bands || lh * r != h || lw * r != w {
            return Err(Error::shape("forward", &[self.cfg.bands, h / r, w / r], &[lc, lh, lw]));
        }
        Ok(())
    }
}

/// Fused HRMS `c×H×W` from PAN `1×H×W` and LRMS `c×(H/r)×(W/r)`.
pub fn forward(
    g: &mut Graph<'_>,
    model: &S2WMambaModel,
    pan: &Tensor,
    lrms: &Tensor,
    mut trace: Option<&mut ShapeTrace>,
) -> Result<Var> {
    model.check_inputs(pan, lrms)?;
    let r = model.cfg.ratio;
    let up_t = bicubic_upsample(lrms, r)?;
    let up = g.input(up_t)?;
    let pan_v = g.input(pan.clone())?;
    let lrms_v = g.input(lrms.clone())?;
    let spectral = model.spectral.as_ref();
    let spatial = model.spatial.as_ref();

    let residual = match model.cfg.ablation.structural {
        Some(Structural::SpeO) => {
            let o1 = spectral_branch(g, need(spectral)?, pan_v, lrms_v, trace.as_deref_mut())?;
            head_single(g, &model.head, o1)?
        }
        Some(Structural::SpaO) => {
            let o2 = spatial_branch(g, need(spatial)?, pan_v, up, trace.as_deref_mut())?;
            head_single(g, &model.head, o2)?
        }
        Some(Structural::SeqB1) => {
            let o1 = spectral_branch(g, need(spectral)?, pan_v, lrms_v, trace.as_deref_mut())?;
            let l0 = g.add(up, o1)?;
            spatial_branch(g, need(spatial)?, pan_v, l0, trace.as_deref_mut())?
        }
        Some(Structural::SeqB2) => {
            let o2 = spatial_branch(g, need(spatial)?, pan_v, up, trace.as_deref_mut())?;
            let pooled = g.avg_pool(o2, r)?;
            spectral_branch(g, need(spectral)?, pan_v, pooled, trace.as_deref_mut())?
        }
        _ => {
            let o1 = spectral_branch(g, need(spectral)?, pan_v, lrms_v, trace.as_deref_mut())?;
            let l0 = g.add(up, o1)?;
            let o2 = spatial_branch(g, need(spatial)?, pan_v, l0, trace)?;
            match &model.head {
                Head::Dual(d) => dual_msdg(g, d, o1, o2)?,
                Head::Hadamard => g.mul(o1, o2)?,
                Head::Weighted(a) => weighted_sum(g, a, o1, o2)?,
                Head::Conv(_) | Head::Direct => return Err(Error::invalid("head does not match variant")),
            }
        }
    };
    g.add(up, residual)
}

fn need<T>(o: Option<&T>) -> Result<&T> {
    o.ok_or_else(|| Error::invalid("branch missing for this variant"))
}

fn head_single(g: &mut Graph<'_>, head: &Head, x: Var) -> Result<Var> {
    match head {
        Head::Conv(c) => c.forward(g, x),
        _ => Err(Error::invalid("single-branch variant needs a conv head")),
    }
}

/// `σ(a₁) ⊙ o1 + σ(a₂) ⊙ o2`, with per-channel weights from pooled features.
fn weighted_sum(g: &mut Graph<'_>, p: &AwsParams, o1: Var, o2: Var) -> Result<Var> {
    let c = g.value(o1).shape()[0];
    let cat = g.concat_channels(&[o1, o2])?;
    let pooled = g.channel_mean(cat)?;
    let row = g.reshape(pooled, &[1, 2 * c])?;
    let a = p.fc.forward(g, row)?;
    let a = g.reshape(a, &[2 * c, 1, 1])?;
    let w = g.sigmoid(a)?;
    let w1 = g.narrow_channels(w, 0, c)?;
    let w2 = g.narrow_channels(w, c, c)?;
    let w1 = g.reshape(w1, &[c])?;
    let w2 = g.reshape(w2, &[c])?;
    let a = g.mul_channels(o1, w1)?;
    let b = g.mul_channels(o2, w2)?;
    g.add(a, b)
}

/// Inference without a tape.
pub fn fuse(model: &S2WMambaModel, pan: &Tensor, lrms: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference(&model.store);
    let out = forward(&mut g, model, pan, lrms, None)?;
    Ok(g.value(out).clone())
}

/// Rebuild under another ablation, keeping every parameter whose name and
/// shape still exist.
pub fn apply_ablation(model: &S2WMambaModel, ablation: AblationConfig, seed: u64) -> Result<S2WMambaModel> {
    let cfg = ModelConfig {
        ablation,
        ..model.cfg.clone()
    };
    let mut out = S2WMambaModel::new(cfg, seed)?;
    out.store.copy_matching(&model.store);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"S2WC";
pub const CHECKPOINT_VERSION: u16 = 1;
const CONFIG_ENTRY: &str = "__config__";
const MAX_NAME: usize = 4096;

fn write_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serialize config and parameters.
pub fn checkpoint_bytes(model: &S2WMambaModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = model.cfg.encode();
    let n = cfg.len();
    write_entry(&mut out, CONFIG_ENTRY, &Tensor::new(&[n], cfg).expect("config length"));
    for (_, p) in model.store.iter() {
        write_entry(&mut out, &p.name, &p.value);
    }
    out
}

pub fn save_checkpoint(model: &S2WMambaModel, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(model))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn entry(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        if len == 0 || len > MAX_NAME {
            return Err(Error::Format(format!("bad name length {len}")));
        }
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        if rank > 4 {
            return Err(Error::Format(format!("{name}: rank {rank} exceeds 4")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = self.u32()? as usize;
            count = count
                .checked_mul(d)
                .filter(|&c| c.saturating_mul(4) <= self.buf.len())
                .ok_or_else(|| Error::Format(format!("{name}: dimensions overflow")))?;
            shape.push(d);
        }
        let raw = self.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok((name, Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?))
    }
}

pub fn model_from_bytes(buf: &[u8]) -> Result<S2WMambaModel> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let (name, cfg) = c.entry()?;
    if name != CONFIG_ENTRY {
        return Err(Error::Format("checkpoint lacks its config entry".into()));
    }
    let cfg = ModelConfig::decode(cfg.data())?;
    let mut model = S2WMambaModel::new(cfg, 0)?;
    let mut seen = vec![false; model.store.len()];
    while !c.done() {
        let (name, t) = c.entry()?;
        if !t.is_finite() {
            return Err(Error::Format(format!("{name}: non-finite values")));
        }
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        if model.store.value(id).shape() != t.shape() {
            return Err(Error::Format(format!("{name}: shape {:?} does not match the model", t.shape())));
        }
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Format(format!("{name} appears twice")));
        }
        *model.store.value_mut(id) = t;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = &model.store.iter().nth(i).unwrap().1.name;
        return Err(Error::Format(format!("checkpoint is missing {name}")));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<S2WMambaModel> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    model_from_bytes(&buf)
}
