//! Selective state-space fusion block.
//!
//! Two `C×h×w` maps are rasterized row-major into token sequences. Each
//! stream passes a self mixer with a learned per-channel skip. Two cross
//! mixers then scan one stream while the other supplies the step sizes and
//! input matrices. The cross outputs are summed with a sigmoid-weighted blend
//! of the two streams.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const D_STATE: usize = 16;
pub const EXPAND: usize = 2;
const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 0.1;

/// Which streams feed the sigmoid-weighted skip term of the fused output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SkipSource {
    /// The post-residual streams `x̃`, `ỹ`.
    #[default]
    PostResidual,
    /// The raw input streams `x`, `y`.
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FMambaConfig {
    /// Token width; equals the channel count of the fused maps.
    pub d_model: usize,
    pub expand: usize,
    pub d_state: usize,
    pub skip: SkipSource,
}

impl FMambaConfig {
    pub fn new(d_model: usize) -> Self {
        FMambaConfig {
            d_model,
            expand: EXPAND,
            d_state: D_STATE,
            skip: SkipSource::default(),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }
}

/// A raster-scan token sequence `(h·w)×d` with its grid size.
#[derive(Clone, Copy, Debug)]
pub struct TokenSeq {
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
}

pub fn rasterize(g: &mut Graph<'_>, x: Var) -> Result<TokenSeq> {
    let (_, h, w) = g.value(x).chw()?;
    Ok(TokenSeq {
        tokens: g.to_tokens(x)?,
        h,
        w,
    })
}

pub fn derasterize(g: &mut Graph<'_>, t: &TokenSeq) -> Result<Var> {
    g.from_tokens(t.tokens, t.h, t.w)
}

/// Projection into the inner width followed by the causal stencil and SiLU.
#[derive(Clone, Debug)]
struct ConvBranch {
    proj: Linear,
    conv_w: ParamId,
    conv_b: ParamId,
}

impl ConvBranch {
    fn new(b: &mut Builder<'_>, proj: &str, conv: &str, d: usize, inner: usize) -> Result<Self> {
        let proj = Linear::new(b, proj, d, inner, false)?;
        let mut c = b.sub(conv);
        let bound = 0.5; // fan-in of the four taps
        Ok(ConvBranch {
            proj,
            conv_w: c.uniform("weight", &[inner, 4], bound)?,
            conv_b: c.uniform("bias", &[inner], bound)?,
        })
    }

    fn forward(&self, g: &mut Graph<'_>, normed: Var, row: usize) -> Result<Var> {
        let p = self.proj.forward(g, normed)?;
        let (w, b) = (g.param(self.conv_w), g.param(self.conv_b));
        let c = g.causal_conv(p, w, b, row)?;
        g.silu(c)
    }
}

/// Parameters of the auxiliary path of a cross mixer.
#[derive(Clone, Debug)]
pub struct ModulatorParams {
    norm: LayerNorm,
    branch: ConvBranch,
}

/// One selective-scan mixer. Self mixers derive everything from their input;
/// cross mixers carry [`ModulatorParams`].
#[derive(Clone, Debug)]
pub struct SsmParams {
    norm: LayerNorm,
    main: ConvBranch,
    in_z: Linear,
    modulator: Option<ModulatorParams>,
    x_dt: Linear,
    dt_proj: Linear,
    x_b: Linear,
    x_c: Linear,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: Linear,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &FMambaConfig, cross: bool) -> Result<Self> {
        let mut b = b.sub(name);
        let (d, inner, s, rank) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.dt_rank());
        let norm = LayerNorm::new(&mut b, "norm", d)?;
        let main = ConvBranch::new(&mut b, "in_u", "conv", d, inner)?;
        let in_z = Linear::new(&mut b, "in_z", d, inner, false)?;
        let modulator = if cross {
            Some(ModulatorParams {
                norm: LayerNorm::new(&mut b, "mod_norm", d)?,
                branch: ConvBranch::new(&mut b, "in_m", "mod_conv", d, inner)?,
            })
        } else {
            None
        };
        let x_dt = Linear::new(&mut b, "x_dt", inner, rank, false)?;
        let dt_proj = {
            let mut sb = b.sub("dt_proj");
            let weight = sb.uniform("weight", &[rank, inner], 1.0 / (rank as f64).sqrt())?;
            let bias: Vec<f64> = (0..inner)
                .map(|_| {
                    let dt = sb.sample(DT_MIN.ln(), DT_MAX.ln()).exp();
                    inverse_softplus(dt)
                })
                .collect();
            let bias = sb.add("bias", Tensor::new(&[inner], bias)?)?;
            Linear {
                weight,
                bias: Some(bias),
            }
        };
        let x_b = Linear::new(&mut b, "x_b", inner, s, false)?;
        let x_c = Linear::new(&mut b, "x_c", inner, s, false)?;
        let a_log = b.add("a_log", Tensor::from_fn(&[inner, s], |i| ((i % s) as f64 + 1.0).ln()))?;
        let d_skip = b.add("d", Tensor::ones(&[inner]))?;
        let out_proj = Linear::new(&mut b, "out_proj", inner, d, false)?;
        Ok(SsmParams {
            norm,
            main,
            in_z,
            modulator,
            x_dt,
            dt_proj,
            x_b,
            x_c,
            a_log,
            d_skip,
            out_proj,
        })
    }

    pub fn is_cross(&self) -> bool {
        self.modulator.is_some()
    }
}

/// Run one mixer. In cross mode the modulator supplies `Δ` and `B` while `x`
/// supplies `u`, `C` and the output gate; self mode uses `x` for everything.
pub fn selective_scan(g: &mut Graph<'_>, p: &SsmParams, x: &TokenSeq, modulator: Option<&TokenSeq>) -> Result<Var> {
    let row = x.w;
    let normed = p.norm.forward(g, x.tokens)?;
    let u = p.main.forward(g, normed, row)?;
    let z = p.in_z.forward(g, normed)?;
    let m = match (&p.modulator, modulator) {
        (None, None) => u,
        (Some(mp), Some(aux)) => {
            if (aux.h, aux.w) != (x.h, x.w) || g.shape(aux.tokens) != g.shape(x.tokens) {
                return Err(Error::shape("cross_scan", g.shape(x.tokens), g.shape(aux.tokens)));
            }
            let mn = mp.norm.forward(g, aux.tokens)?;
            mp.branch.forward(g, mn, row)?
        }
        (None, Some(_)) => return Err(Error::invalid("self mixer given a modulator")),
        (Some(_), None) => return Err(Error::invalid("cross mixer needs a modulator")),
    };
    let dt_low = p.x_dt.forward(g, m)?;
    let dt = p.dt_proj.forward(g, dt_low)?;
    let delta = g.softplus(dt)?;
    let bm = p.x_b.forward(g, m)?;
    let cm = p.x_c.forward(g, u)?;
    let (a, d) = (g.param(p.a_log), g.param(p.d_skip));
    let y = g.selective_scan(u, delta, a, bm, cm, d)?;
    let gate = g.silu(z)?;
    let y = g.mul(y, gate)?;
    p.out_proj.forward(g, y)
}

#[derive(Clone, Debug)]
pub struct FMambaParams {
    pub cfg: FMambaConfig,
    pub self_x: SsmParams,
    pub self_y: SsmParams,
    pub cross_x: SsmParams,
    pub cross_y: SsmParams,
    pub skip_x: ParamId,
    pub skip_y: ParamId,
    pub alpha: ParamId,
}

impl FMambaParams {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &FMambaConfig) -> Result<Self> {
        let mut b = b.sub(name);
        let d = cfg.d_model;
        Ok(FMambaParams {
            cfg: cfg.clone(),
            self_x: SsmParams::new(&mut b, "self_x", cfg, false)?,
            self_y: SsmParams::new(&mut b, "self_y", cfg, false)?,
            cross_x: SsmParams::new(&mut b, "cross_x", cfg, true)?,
            cross_y: SsmParams::new(&mut b, "cross_y", cfg, true)?,
            skip_x: b.add("skip_x", Tensor::ones(&[d]))?,
            skip_y: b.add("skip_y", Tensor::ones(&[d]))?,
            alpha: b.add("alpha", Tensor::scalar(0.0))?,
        })
    }

    fn mixers(&self) -> [&SsmParams; 4] {
        [&self.self_x, &self.self_y, &self.cross_x, &self.cross_y]
    }

    /// Zero every mixer's output projection, so each mixer outputs zero.
    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        for m in self.mixers() {
            store.value_mut(m.out_proj.weight).data_mut().fill(0.0);
        }
    }
}

/// Outputs of [`fmamba_block`], all `C×h×w`.
#[derive(Clone, Copy, Debug)]
pub struct FMambaOutput {
    pub fused: Var,
    pub x_out: Var,
    pub y_out: Var,
}

pub fn fmamba_block(g: &mut Graph<'_>, p: &FMambaParams, x: Var, y: Var) -> Result<FMambaOutput> {
    if g.shape(x) != g.shape(y) {
        return Err(Error::shape("fmamba_block", g.shape(x), g.shape(y)));
    }
    let (c, _, _) = g.value(x).chw()?;
    if c != p.cfg.d_model {
        return Err(Error::shape("fmamba_block", &[p.cfg.d_model], &[c]));
    }
    let xs = rasterize(g, x)?;
    let ys = rasterize(g, y)?;

    let residual = |g: &mut Graph<'_>, mixer: &SsmParams, skip: ParamId, s: &TokenSeq| -> Result<TokenSeq> {
        let mixed = selective_scan(g, mixer, s, None)?;
        let sk = g.param(skip);
        let kept = g.mul_features(s.tokens, sk)?;
        Ok(TokenSeq {
            tokens: g.add(mixed, kept)?,
            ..*s
        })
    };
    let xt = residual(g, &p.self_x, p.skip_x, &xs)?;
    let yt = residual(g, &p.self_y, p.skip_y, &ys)?;

    let xh = selective_scan(g, &p.cross_x, &xt, Some(&yt))?;
    let yh = selective_scan(g, &p.cross_y, &yt, Some(&xt))?;

    let (sx, sy) = match p.cfg.skip {
        SkipSource::PostResidual => (xt.tokens, yt.tokens),
        SkipSource::Raw => (xs.tokens, ys.tokens),
    };
    let alpha = g.param(p.alpha);
    let wa = g.sigmoid(alpha)?;
    let wb = g.one_minus(wa)?;
    let skip_a = g.mul(wa, sx)?;
    let skip_b = g.mul(wb, sy)?;
    let skip = g.add(skip_a, skip_b)?;
    let cross = g.add(xh, yh)?;
    let fused = g.add(cross, skip)?;

    let fused = derasterize(g, &TokenSeq { tokens: fused, ..xs })?;
    Ok(FMambaOutput {
        fused,
        x_out: derasterize(g, &xt)?,
        y_out: derasterize(g, &yt)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{check_gradients, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(d: usize, seed: u64) -> (ParamStore, FMambaParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = FMambaParams::new(&mut Builder::new(&mut store, &mut rng), "fm", &FMambaConfig::new(d)).unwrap();
        (store, p)
    }

    fn inputs(c: usize, h: usize, w: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut rng),
            Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut rng),
        )
    }

    #[test]
    fn raster_order_is_row_major() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let t = rasterize(&mut g, x).unwrap();
        assert_eq!(g.value(t.tokens).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.shape(t.tokens), &[4, 1]);

        let img = inputs(8, 8, 8, 1).0;
        let x = g.input(img.clone()).unwrap();
        let t = rasterize(&mut g, x).unwrap();
        assert_eq!(g.shape(t.tokens)[1], 8);
        let back = derasterize(&mut g, &t).unwrap();
        assert_eq!(g.value(back), &img);
    }

    #[test]
    fn config_defaults() {
        let cfg = FMambaConfig::new(32);
        assert_eq!((cfg.d_inner(), cfg.d_state, cfg.dt_rank()), (64, 16, 2));
        assert!((inverse_softplus(0.01).exp().ln_1p() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn zeroed_ssm_gives_the_stream_blend() {
        let (mut store, p) = build(4, 2);
        p.zero_output_projections(&mut store);
        let (xi, yi) = inputs(4, 3, 5, 3);
        let mut g = Graph::inference(&store);
        let (x, y) = (g.input(xi.clone()).unwrap(), g.input(yi.clone()).unwrap());
        let out = fmamba_block(&mut g, &p, x, y).unwrap();
        // Skip params start at one, so x̃ = x and ỹ = y; α = 0 gives weight ½.
        let expect = xi.add(&yi).unwrap().scale(0.5);
        assert_eq!(g.value(out.fused), &expect);
        assert_eq!(g.value(out.x_out), &xi);
        assert_eq!(g.value(out.y_out), &yi);

        // Non-zero α: literal σ(α)x̃ + (1−σ(α))ỹ.
        store.value_mut(p.alpha).data_mut()[0] = 1.3;
        let s = 1.0 / (1.0 + (-1.3f64).exp());
        let mut g = Graph::inference(&store);
        let (x, y) = (g.input(xi.clone()).unwrap(), g.input(yi.clone()).unwrap());
        let out = fmamba_block(&mut g, &p, x, y).unwrap();
        let expect = xi.zip_map(&yi, "blend", |a, b| 0.0 + (s * a + (1.0 - s) * b)).unwrap();
        assert!(g.value(out.fused).max_abs_diff(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn raw_skip_variant_uses_inputs() {
        let (mut store, mut p) = build(4, 4);
        p.cfg.skip = SkipSource::Raw;
        p.zero_output_projections(&mut store);
        store.value_mut(p.skip_x).data_mut().fill(2.0);
        let (xi, yi) = inputs(4, 2, 2, 5);
        let mut g = Graph::inference(&store);
        let (x, y) = (g.input(xi.clone()).unwrap(), g.input(yi.clone()).unwrap());
        let out = fmamba_block(&mut g, &p, x, y).unwrap();
        assert_eq!(g.value(out.fused), &xi.add(&yi).unwrap().scale(0.5));
        assert_eq!(g.value(out.x_out), &xi.scale(2.0));
    }

    #[test]
    fn rejects_mismatched_streams() {
        let (store, p) = build(4, 6);
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros(&[4, 2, 2])).unwrap();
        let y = g.input(Tensor::zeros(&[4, 2, 4])).unwrap();
        assert!(fmamba_block(&mut g, &p, x, y).is_err());
        let z = g.input(Tensor::zeros(&[3, 2, 2])).unwrap();
        assert!(fmamba_block(&mut g, &p, z, z).is_err());
    }

    #[test]
    fn scan_is_causal_in_raster_order() {
        let (store, p) = build(4, 7);
        let (xi, yi) = inputs(4, 4, 4, 8);
        let mut g = Graph::inference(&store);
        let (x, y) = (g.input(xi.clone()).unwrap(), g.input(yi.clone()).unwrap());
        let full = fmamba_block(&mut g, &p, x, y).unwrap();
        let full = g.value(full.fused).clone();
        // Keeping the first two rows leaves those outputs unchanged.
        let (xc, yc) = (xi.crop(0, 0, 2, 4).unwrap(), yi.crop(0, 0, 2, 4).unwrap());
        let (x, y) = (g.input(xc).unwrap(), g.input(yc).unwrap());
        let part = fmamba_block(&mut g, &p, x, y).unwrap();
        assert_eq!(g.value(part.fused), &full.crop(0, 0, 2, 4).unwrap());
    }

    #[test]
    fn tiny_step_size_reduces_to_skip() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = FMambaConfig::new(4);
        let p = SsmParams::new(&mut Builder::new(&mut store, &mut rng), "m", &cfg, false).unwrap();
        store.value_mut(p.dt_proj.bias.unwrap()).data_mut().fill(-60.0);
        store.value_mut(p.dt_proj.weight).data_mut().fill(0.0);
        let xi = inputs(4, 3, 3, 10).0;
        let mut g = Graph::inference(&store);
        let x = g.input(xi).unwrap();
        let t = rasterize(&mut g, x).unwrap();
        let full = selective_scan(&mut g, &p, &t, None).unwrap();
        // Reconstruct D·u ⊙ silu(z) → out_proj directly from the same pieces.
        let normed = p.norm.forward(&mut g, t.tokens).unwrap();
        let u = p.main.forward(&mut g, normed, 3).unwrap();
        let z = p.in_z.forward(&mut g, normed).unwrap();
        let gate = g.silu(z).unwrap();
        let d = g.param(p.d_skip);
        let du = g.mul_features(u, d).unwrap();
        let y = g.mul(du, gate).unwrap();
        let expect = p.out_proj.forward(&mut g, y).unwrap();
        assert!(g.value(full).max_abs_diff(g.value(expect)).unwrap() < 1e-20);
    }

    #[test]
    fn gradient_check_all_params() {
        let (mut store, p) = build(8, 11);
        let (xi, yi) = inputs(8, 4, 4, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let wts = Tensor::uniform(&[8, 4, 4], -1.0, 1.0, &mut rng);
        let ids: Vec<ParamId> = store.ids().collect();
        let report = check_gradients(&mut store, &ids, &GradCheckOptions::default(), |g| {
            let (x, y) = (g.input(xi.clone())?, g.input(yi.clone())?);
            let out = fmamba_block(g, &p, x, y)?;
            let w = g.input(wts.clone())?;
            let s = g.mul(out.fused, w)?;
            g.sum(s)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn l1_gradient_check_on_four_by_four() {
        let (mut store, p) = build(4, 14);
        let (xi, yi) = inputs(4, 4, 4, 15);
        // Fixed target far from the output so the check never meets a kink.
        let target = {
            let mut g = Graph::inference(&store);
            let (x, y) = (g.input(xi.clone()).unwrap(), g.input(yi.clone()).unwrap());
            let f = fmamba_block(&mut g, &p, x, y).unwrap().fused;
            g.value(f).map(|v| v + if v > 0.0 { -1.0 } else { 1.0 })
        };
        let ids: Vec<ParamId> = store.ids().collect();
        let report = check_gradients(&mut store, &ids, &GradCheckOptions::default(), |g| {
            let (x, y) = (g.input(xi.clone())?, g.input(yi.clone())?);
            let out = fmamba_block(g, &p, x, y)?;
            let t = g.input(target.clone())?;
            g.l1_loss(out.fused, t)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }
}
