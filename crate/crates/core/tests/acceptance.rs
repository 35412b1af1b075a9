//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs as a single test so the timing and memory measurements are not
//! disturbed by sibling tests. Set `S2W_ACCEPT=1,4` to run a subset.
//! Result lines go to stderr even without `--nocapture`.

use std::alloc::{GlobalAlloc, Layout, System};
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use nalgebra::Quaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2wmamba::autograd::{check_gradients, GradCheckOptions, Graph, Var};
use s2wmamba::branches::{bicubic_upsample, ShapeTrace};
use s2wmamba::dataset::{generate_triplets, image_bytes, image_from_bytes, SceneSpec, Triplet};
use s2wmamba::fmamba::{fmamba_block, FMambaConfig, FMambaParams};
use s2wmamba::metrics::{ergas, hqnr, psnr, q2n, sam, Q_BLOCK};
use s2wmamba::msdg::{msdg_gate, DualMsdg, MsdgParams};
use s2wmamba::network::{
    checkpoint_bytes, forward, fuse, load_checkpoint, model_from_bytes, save_checkpoint, AblationConfig, Head,
    ModelConfig, S2WMambaModel,
};
use s2wmamba::nn::Builder;
use s2wmamba::params::{ParamId, ParamStore};
use s2wmamba::train::{bicubic_psnr, mean_l1, mean_psnr, train_toy, TrainConfig};
use s2wmamba::wavelet::{dwt1d, dwt2d, idwt1d, idwt2d};
use s2wmamba::Tensor;

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Bytes above the starting level at the high-water mark of `f`.
fn peak_during<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = LIVE.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    (out, PEAK.load(Ordering::Relaxed) - base)
}

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn wv3_inputs(seed: u64) -> (Tensor, Tensor) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (Tensor::uniform(&[1, 64, 64], 0.0, 1.0, &mut r), Tensor::uniform(&[8, 16, 16], 0.0, 1.0, &mut r))
}

// 1 -------------------------------------------------------------------------

fn wavelets() -> Outcome {
    let t0 = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = r.gen_range(1..=8);
        let h = 2 * r.gen_range(1..=32);
        let w = 2 * r.gen_range(1..=32);
        let x = Tensor::uniform(&[c, h, w], -10.0, 10.0, &mut r);
        worst = worst.max(max_abs_diff(&ok(idwt2d(&ok(dwt2d(&x))?))?, &x));
        let ce = 2 * r.gen_range(1..=4);
        let y = Tensor::uniform(&[ce, h, w], -10.0, 10.0, &mut r);
        let b = ok(dwt1d(&y))?;
        worst = worst.max(max_abs_diff(&ok(idwt1d(&b.low, &b.high))?, &y));
    }
    ensure(worst < 1e-12, || format!("roundtrip error {worst:e}"))?;

    let quad = ok(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]))?;
    let s = ok(dwt2d(&quad))?;
    let got = [s.ll.data()[0], s.lh.data()[0], s.hl.data()[0], s.hh.data()[0]];
    ensure(got == [2.5, -1.0, -0.5, 0.0], || format!("2×2 subbands {got:?}"))?;
    let elapsed = t0.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("max roundtrip error {worst:.1e}, 2×2 subbands {got:?}"))
}

// 2 -------------------------------------------------------------------------

fn shape_trace() -> Outcome {
    let m = ok(S2WMambaModel::new(ModelConfig::wv3(), 12))?;
    let (pan, lrms) = wv3_inputs(13);
    let mut g = Graph::inference(&m.store);
    let mut trace = ShapeTrace::default();
    let out = ok(forward(&mut g, &m, &pan, &lrms, Some(&mut trace)))?;
    ensure(g.shape(out) == [8, 64, 64], || format!("output {:?}", g.shape(out)))?;
    let (c, h) = (32, 64);
    let expected: [(&str, [usize; 3]); 14] = [
        ("Input PAN conv", [c, h, h]),
        ("Level-1 DWT2D", [4 * c, h / 2, h / 2]),
        ("Level-2 DWT2D", [4 * c, h / 4, h / 4]),
        ("FMamba (SpeBS-1)", [4 * c, h / 4, h / 4]),
        ("IDWT2D (SpeBS-1)", [c, h / 2, h / 2]),
        ("FMamba (SpeBS-2)", [4 * c, h / 2, h / 2]),
        ("IDWT2D (SpeBS-2)", [c, h, h]),
        ("Reduce to c", [8, h, h]),
        ("Level-3 DWT1D", [1, h, h]),
        ("IDWT1D (SpaBS-1)", [2, h, h]),
        ("Level-2 DWT1D", [2, h, h]),
        ("IDWT1D (SpaBS-2)", [4, h, h]),
        ("Level-1 DWT1D", [4, h, h]),
        ("IDWT1D (SpaBS-3)", [8, h, h]),
    ];
    for (label, shape) in expected {
        let got = trace.get(label);
        ensure(got == Some(&shape[..]), || format!("{label}: {got:?}, expected {shape:?}"))?;
    }
    Ok(format!("{} rows match", expected.len()))
}

// 3 -------------------------------------------------------------------------

/// Weighted sum so no gradient is trivially zero (a plain sum would cancel
/// through a normalization).
fn probe(g: &mut Graph<'_>, out: Var, seed: u64) -> s2wmamba::Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(g.shape(out), -1.0, 1.0, &mut r);
    let w = g.input(w)?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

struct OpCase {
    store: ParamStore,
    ids: Vec<ParamId>,
}

impl OpCase {
    fn new(seed: u64, tensors: &[(&str, &[usize], f64, f64)]) -> (Self, ChaCha8Rng) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids = tensors
            .iter()
            .map(|(name, shape, lo, hi)| store.add(*name, Tensor::uniform(shape, *lo, *hi, &mut r)).unwrap())
            .collect();
        (OpCase { store, ids }, r)
    }

    fn check(mut self, f: impl Fn(&mut Graph<'_>, &[Var]) -> s2wmamba::Result<Var>) -> Result<f64, String> {
        let ids = self.ids.clone();
        let opts = GradCheckOptions::default();
        let report = ok(check_gradients(&mut self.store, &ids, &opts, |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let out = f(g, &vars)?;
            probe(g, out, 7)
        }))?;
        let worst = report.worst().map_or(0.0, |w| w.max_rel_error);
        ensure(report.passed(), || format!("{:?}", report.worst()))?;
        Ok(worst)
    }
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut worst = Vec::new();
    let mut note = |name: &str, r: Result<f64, String>| -> Result<(), String> {
        let e = r.map_err(|e| format!("{name}: {e}"))?;
        worst.push((name.to_string(), e));
        Ok(())
    };

    let (c, _) = OpCase::new(1, &[("x", &[5, 4], -1.0, 1.0), ("w", &[4, 3], -1.0, 1.0), ("b", &[3], -1.0, 1.0)]);
    note("linear", c.check(|g, v| g.linear(v[0], v[1], Some(v[2]))))?;

    for (stride, pad) in [(1, 1), (2, 0)] {
        let (c, _) = OpCase::new(
            2,
            &[("x", &[2, 6, 6], -1.0, 1.0), ("w", &[3, 2, 3, 3], -1.0, 1.0), ("b", &[3], -1.0, 1.0)],
        );
        note(&format!("conv2d s{stride} p{pad}"), c.check(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad)))?;
    }

    let (c, _) = OpCase::new(3, &[("x", &[3, 5, 5], -1.0, 1.0), ("w", &[3, 3, 3], -1.0, 1.0), ("b", &[3], -1.0, 1.0)]);
    note("depthwise_conv2d", c.check(|g, v| g.depthwise_conv2d(v[0], v[1], v[2])))?;

    let (c, _) = OpCase::new(4, &[("x", &[12, 3], -1.0, 1.0), ("w", &[3, 4], -1.0, 1.0), ("b", &[3], -1.0, 1.0)]);
    note("causal_conv", c.check(|g, v| g.causal_conv(v[0], v[1], v[2], 4)))?;

    let (c, _) = OpCase::new(5, &[("x", &[4, 6], -2.0, 2.0), ("gamma", &[6], 0.5, 1.5), ("beta", &[6], -1.0, 1.0)]);
    note("layernorm", c.check(|g, v| g.layernorm(v[0], v[1], v[2])))?;

    let (c, _) = OpCase::new(
        6,
        &[
            ("u", &[9, 3], -1.0, 1.0),
            ("delta", &[9, 3], 0.1, 0.6),
            ("a_log", &[3, 4], -0.5, 0.5),
            ("b", &[9, 4], -1.0, 1.0),
            ("c", &[9, 4], -1.0, 1.0),
            ("d", &[3], -1.0, 1.0),
        ],
    );
    note("selective_scan", c.check(|g, v| g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])))?;

    let (c, _) = OpCase::new(7, &[("x", &[3, 4, 4], -1.0, 1.0), ("v", &[3], -1.0, 1.0)]);
    note("mul_channels", c.check(|g, v| g.mul_channels(v[0], v[1])))?;
    let (c, _) = OpCase::new(8, &[("x", &[5, 3], -1.0, 1.0), ("v", &[3], -1.0, 1.0)]);
    note("mul_features", c.check(|g, v| g.mul_features(v[0], v[1])))?;

    // Blocks with their own parameter sets.
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let fm = ok(FMambaParams::new(&mut Builder::new(&mut store, &mut r), "fm", &FMambaConfig::new(4)))?;
    store.value_mut(fm.alpha).data_mut()[0] = 0.3;
    let (x, y) = (Tensor::uniform(&[4, 4, 4], -1.0, 1.0, &mut r), Tensor::uniform(&[4, 4, 4], -1.0, 1.0, &mut r));
    let ids: Vec<ParamId> = store.ids().collect();
    let report = ok(check_gradients(&mut store, &ids, &GradCheckOptions::default(), |g| {
        let (xv, yv) = (g.input(x.clone())?, g.input(y.clone())?);
        let out = fmamba_block(g, &fm, xv, yv)?;
        probe(g, out.fused, 11)
    }))?;
    note("fmamba_block", if report.passed() { Ok(report.worst().map_or(0.0, |w| w.max_rel_error)) } else { Err(format!("{:?}", report.worst())) })?;

    let mut store = ParamStore::new();
    let dm = ok(DualMsdg::new(&mut Builder::new(&mut store, &mut r), "dual", 4))?;
    let (o1, o2) = (Tensor::uniform(&[4, 6, 6], -1.0, 1.0, &mut r), Tensor::uniform(&[4, 6, 6], -1.0, 1.0, &mut r));
    let ids: Vec<ParamId> = store.ids().collect();
    let report = ok(check_gradients(&mut store, &ids, &GradCheckOptions::default(), |g| {
        let (a, b) = (g.input(o1.clone())?, g.input(o2.clone())?);
        let out = s2wmamba::msdg::dual_msdg(g, &dm, a, b)?;
        probe(g, out, 12)
    }))?;
    note("dual_msdg", if report.passed() { Ok(report.worst().map_or(0.0, |w| w.max_rel_error)) } else { Err(format!("{:?}", report.worst())) })?;

    // Whole network on a 16×16 fixture at reduced feature width.
    let cfg = ModelConfig { width: 4, ..ModelConfig::new(4, 4) };
    let mut m = ok(S2WMambaModel::new(cfg, 13))?;
    if let Head::Dual(d) = &m.head {
        for h in [&d.first.head, &d.second.head] {
            let shape = m.store.value(h.weight).shape().to_vec();
            *m.store.value_mut(h.weight) = Tensor::uniform(&shape, -0.3, 0.3, &mut r);
        }
    }
    let pan = Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut r);
    let lrms = Tensor::uniform(&[4, 4, 4], 0.0, 1.0, &mut r);
    let target = Tensor::uniform(&[4, 16, 16], 3.0, 4.0, &mut r);
    let ids: Vec<ParamId> = m.store.ids().collect();
    let model = m.clone();
    let opts = GradCheckOptions { max_entries: 2, ..GradCheckOptions::default() };
    let report = ok(check_gradients(&mut m.store, &ids, &opts, |g| {
        let out = forward(g, &model, &pan, &lrms, None)?;
        let t = g.input(target.clone())?;
        g.l1_loss(out, t)
    }))?;
    let n_params = report.params.len();
    note("network", if report.passed() { Ok(report.worst().map_or(0.0, |w| w.max_rel_error)) } else { Err(format!("{:?}", report.worst())) })?;

    let elapsed = t0.elapsed();
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    let (name, e) = worst.iter().max_by(|a, b| a.1.total_cmp(&b.1)).cloned().unwrap_or_default();
    Ok(format!(
        "{} cases, {n_params} network tensors, worst rel error {e:.1e} ({name}), {:.0}s",
        worst.len(),
        elapsed.as_secs_f64()
    ))
}

// 4 -------------------------------------------------------------------------

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn scan_scaling() -> Outcome {
    let (d, s) = (64, 16);
    let sizes = [1024usize, 4096, 16384, 65536];
    let mut r = ChaCha8Rng::seed_from_u64(404);
    let store = ParamStore::new();
    let inputs: Vec<[Tensor; 6]> = sizes
        .iter()
        .map(|&n| {
            [
                Tensor::uniform(&[n, d], -1.0, 1.0, &mut r),
                Tensor::uniform(&[n, d], 1e-3, 0.1, &mut r),
                Tensor::uniform(&[d, s], 0.0, 2.0, &mut r),
                Tensor::uniform(&[n, s], -1.0, 1.0, &mut r),
                Tensor::uniform(&[n, s], -1.0, 1.0, &mut r),
                Tensor::ones(&[d]),
            ]
        })
        .collect();
    // Repeats go round-robin over the sizes so a slow spell on the host
    // hits every size alike. The first round is a warm-up.
    let mut times = vec![Vec::new(); sizes.len()];
    let mut peaks = vec![Vec::new(); sizes.len()];
    for rep in 0..6 {
        for (k, ins) in inputs.iter().enumerate() {
            let mut g = Graph::inference(&store);
            let v: Vec<Var> = ins.iter().map(|t| g.input(t.clone()).unwrap()).collect();
            let t = Instant::now();
            let (out, peak) = peak_during(|| g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]));
            let secs = t.elapsed().as_secs_f64();
            ok(out)?;
            if rep > 0 {
                times[k].push(secs);
                peaks[k].push(peak as f64);
            }
        }
    }
    // Each round measures neighbouring sizes back to back, so the growth
    // ratio is taken per round and the median of the five is reported.
    let mut summary = Vec::new();
    for k in 0..sizes.len() - 1 {
        let t_ratio = median(times[k + 1].iter().zip(&times[k]).map(|(b, a)| b / a).collect());
        let m_ratio = median(peaks[k + 1].iter().zip(&peaks[k]).map(|(b, a)| b / a).collect());
        summary.push(format!("{}→{}: time ×{t_ratio:.2} mem ×{m_ratio:.2}", sizes[k], sizes[k + 1]));
        ensure((3.0..=6.0).contains(&t_ratio), || format!("time ratio {t_ratio:.2} at {}", sizes[k + 1]))?;
        ensure((4.0 / 1.5..=4.0 * 1.5).contains(&m_ratio), || format!("memory ratio {m_ratio:.2} at {}", sizes[k + 1]))?;
    }
    Ok(summary.join(", "))
}

// 5 -------------------------------------------------------------------------

fn identities() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(505);

    let mut store = ParamStore::new();
    let gate = ok(MsdgParams::new(&mut Builder::new(&mut store, &mut r), "gate", 8))?;
    gate.zero_head(&mut store);
    let main = Tensor::uniform(&[8, 16, 16], -1.0, 1.0, &mut r);
    let extra = Tensor::uniform(&[8, 16, 16], -1.0, 1.0, &mut r);
    let mut g = Graph::inference(&store);
    let (a, b) = (ok(g.input(main.clone()))?, ok(g.input(extra))?);
    let out = ok(msdg_gate(&mut g, &gate, a, b))?;
    ensure(g.value(out) == &main, || "zero gate head changed the main stream".into())?;

    let mut m = ok(S2WMambaModel::new(ModelConfig::wv3(), 21))?;
    m.zero_residual();
    let (pan, lrms) = wv3_inputs(22);
    let fused = ok(fuse(&m, &pan, &lrms))?;
    ensure(fused == ok(bicubic_upsample(&lrms, 4))?, || "zero residual is not bicubic".into())?;

    let mut store = ParamStore::new();
    let fm = ok(FMambaParams::new(&mut Builder::new(&mut store, &mut r), "fm", &FMambaConfig::new(8)))?;
    fm.zero_output_projections(&mut store);
    let x = Tensor::uniform(&[8, 8, 8], -1.0, 1.0, &mut r);
    let y = Tensor::uniform(&[8, 8, 8], -1.0, 1.0, &mut r);
    let mut g = Graph::inference(&store);
    let (xv, yv) = (ok(g.input(x.clone()))?, ok(g.input(y.clone()))?);
    let out = ok(fmamba_block(&mut g, &fm, xv, yv))?;
    let avg = ok(x.add(&y))?.scale(0.5);
    ensure(g.value(out.fused) == &avg, || {
        format!("α=0 output differs from the average by {:e}", max_abs_diff(g.value(out.fused), &avg))
    })?;
    Ok("gate, residual and skip identities are bit-exact".into())
}

// 6 -------------------------------------------------------------------------

fn oracle_psnr(a: &Tensor, b: &Tensor) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    10.0 * (1.0 / mse).log10()
}

fn spectrum(t: &Tensor, i: usize) -> Vec<f64> {
    let n = t.shape()[1] * t.shape()[2];
    (0..t.shape()[0]).map(|b| t.data()[b * n + i]).collect()
}

fn oracle_sam(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.shape()[1] * a.shape()[2];
    let total: f64 = (0..n)
        .map(|i| {
            let (p, g) = (spectrum(a, i), spectrum(b, i));
            let dot: f64 = p.iter().zip(&g).map(|(x, y)| x * y).sum();
            let mut cross = 0.0;
            for j in 0..p.len() {
                for k in j + 1..p.len() {
                    cross += (p[j] * g[k] - p[k] * g[j]).powi(2);
                }
            }
            f64::atan2(cross.sqrt(), dot)
        })
        .sum();
    (total / n as f64).to_degrees()
}

fn oracle_ergas(a: &Tensor, b: &Tensor, r: f64) -> f64 {
    let c = a.shape()[0];
    let n = a.len() / c;
    let acc: f64 = (0..c)
        .map(|k| {
            let (p, g) = (&a.data()[k * n..(k + 1) * n], &b.data()[k * n..(k + 1) * n]);
            let rmse = (p.iter().zip(g).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64).sqrt();
            let mu = g.iter().sum::<f64>() / n as f64;
            (rmse / mu).powi(2)
        })
        .sum();
    100.0 / r * (acc / c as f64).sqrt()
}

/// Four-band Q2ⁿ over one global block with `nalgebra` quaternions.
fn oracle_q4(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.shape()[1] * a.shape()[2];
    let quat = |t: &Tensor, i: usize| {
        let s = spectrum(t, i);
        Quaternion::new(s[0], s[1], s[2], s[3])
    };
    let xs: Vec<Quaternion<f64>> = (0..n).map(|i| quat(a, i)).collect();
    let ys: Vec<Quaternion<f64>> = (0..n).map(|i| quat(b, i)).collect();
    let mean = |v: &[Quaternion<f64>]| v.iter().fold(Quaternion::new(0.0, 0.0, 0.0, 0.0), |acc, q| acc + q) / n as f64;
    let (mx, my) = (mean(&xs), mean(&ys));
    let vx = xs.iter().map(|q| (q - mx).norm_squared()).sum::<f64>() / n as f64;
    let vy = ys.iter().map(|q| (q - my).norm_squared()).sum::<f64>() / n as f64;
    let cov = xs
        .iter()
        .zip(&ys)
        .fold(Quaternion::new(0.0, 0.0, 0.0, 0.0), |acc, (x, y)| acc + (x - mx) * (y - my).conjugate())
        / n as f64;
    let lum = 2.0 * mx.norm() * my.norm() / (mx.norm_squared() + my.norm_squared());
    2.0 * cov.norm() / (vx + vy) * lum
}

fn metric_oracles() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(606);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let gt = Tensor::uniform(&[4, 16, 16], 0.05, 1.0, &mut r);
        let noise = Tensor::uniform(&[4, 16, 16], -0.1, 0.1, &mut r);
        let pred = ok(gt.add(&noise))?;
        let pairs = [
            ("psnr", ok(psnr(&pred, &gt, 1.0))?, oracle_psnr(&pred, &gt)),
            ("sam", ok(sam(&pred, &gt))?, oracle_sam(&pred, &gt)),
            ("ergas", ok(ergas(&pred, &gt, 4))?, oracle_ergas(&pred, &gt, 4.0)),
            ("q2n", ok(q2n(&pred, &gt, Q_BLOCK))?, oracle_q4(&pred, &gt)),
        ];
        for (name, got, want) in pairs {
            let e = rel(got, want);
            worst = worst.max(e);
            ensure(e <= 1e-9, || format!("pair {i} {name}: {got} vs oracle {want}"))?;
        }
    }
    let x = Tensor::uniform(&[4, 16, 16], 0.05, 1.0, &mut r);
    let s = ok(sam(&x.scale(3.7), &x))?;
    // Zero up to the rounding of the unit spectra.
    ensure(s.abs() < 1e-12, || format!("sam(k·x, x) = {s:e}"))?;
    let q = format!("{:.3}", hqnr(0.024, 0.021));
    ensure(q == "0.956", || format!("hqnr(0.024, 0.021) = {q}"))?;
    Ok(format!("worst rel error {worst:.1e}, sam(k·x, x) = 0, hqnr = {q}"))
}

// 7 -------------------------------------------------------------------------

fn toy_training() -> Outcome {
    let t0 = Instant::now();
    let spec = SceneSpec { bands: 8, height: 64, width: 64, count: 80, seed: 7 };
    let all = ok(generate_triplets(&spec, 4))?;
    let (train, val) = all.split_at(64);
    let mut m = ok(S2WMambaModel::new(ModelConfig::wv3(), 1))?;
    let probe_set = &train[..8];
    let l0 = ok(mean_l1(&m, probe_set))?;
    let bicubic = ok(bicubic_psnr(val, 4))?;
    let cfg = TrainConfig { seed: 7, ..TrainConfig::default() };
    ok(train_toy(&mut m, train, &[], &cfg))?;
    let l1 = ok(mean_l1(&m, probe_set))?;
    let fused = ok(mean_psnr(&m, val))?;
    let elapsed = t0.elapsed();
    let detail = format!(
        "l1 {l0:.4} → {l1:.4} (×{:.2}), held-out PSNR {fused:.2} dB vs bicubic {bicubic:.2} dB, {:.0}s",
        l1 / l0,
        elapsed.as_secs_f64()
    );
    ensure(l1 <= 0.5 * l0, || format!("loss did not halve: {detail}"))?;
    ensure(fused >= bicubic + 1.0, || format!("PSNR gain below 1 dB: {detail}"))?;
    ensure(elapsed < Duration::from_secs(15 * 60), || format!("too slow: {detail}"))?;
    Ok(detail)
}

// 8 -------------------------------------------------------------------------

fn ablations() -> Outcome {
    let spec = SceneSpec { bands: 8, height: 64, width: 64, count: 8, seed: 8 };
    let data: Vec<Triplet> = ok(generate_triplets(&spec, 4))?;
    let (pan, lrms) = wv3_inputs(808);
    let variants = AblationConfig::table();
    for (i, ab) in variants.iter().enumerate() {
        let cfg = ModelConfig { ablation: *ab, ..ModelConfig::wv3() };
        let mut m = ok(S2WMambaModel::new(cfg, 80 + i as u64)).map_err(|e| format!("{ab}: {e}"))?;
        let out = ok(fuse(&m, &pan, &lrms)).map_err(|e| format!("{ab}: {e}"))?;
        ensure(out.shape() == [8, 64, 64] && out.is_finite(), || format!("{ab}: output {:?}", out.shape()))?;
        let tc = TrainConfig { steps: 20, seed: i as u64, ..TrainConfig::default() };
        let hist = ok(train_toy(&mut m, &data, &[], &tc)).map_err(|e| format!("{ab}: {e}"))?;
        ensure(hist.len() == 20 && hist.iter().all(|h| h.loss.is_finite()), || format!("{ab}: bad history"))?;
        ensure(m.store.iter().all(|(_, p)| p.value.is_finite()), || format!("{ab}: non-finite weights"))?;
    }
    let names: Vec<String> = variants.iter().map(|a| a.to_string()).collect();
    Ok(format!("{} variants: {}", names.len(), names.join(", ")))
}

// 9 -------------------------------------------------------------------------

fn formats() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(909);
    let img = Tensor::uniform(&[8, 16, 16], -1.0, 1.0, &mut r);
    let bytes = ok(image_bytes(&img))?;
    let again = ok(image_bytes(&ok(image_from_bytes(&bytes))?))?;
    ensure(bytes == again, || "S2WT bytes changed on roundtrip".into())?;

    let model = ok(S2WMambaModel::new(ModelConfig::wv3(), 99))?;
    let ckpt = checkpoint_bytes(&model);
    let reloaded = checkpoint_bytes(&ok(model_from_bytes(&ckpt))?);
    ensure(ckpt == reloaded, || "S2WC bytes changed on roundtrip".into())?;

    let dir = ok(tempfile::tempdir())?;
    let path = dir.path().join("golden.s2wc");
    ok(save_checkpoint(&model, &path))?;
    let (pan, lrms) = wv3_inputs(910);
    let a = ok(fuse(&ok(load_checkpoint(&path))?, &pan, &lrms))?;
    let b = ok(fuse(&ok(load_checkpoint(&path))?, &pan, &lrms))?;
    let (ba, bb) = (ok(image_bytes(&a))?, ok(image_bytes(&b))?);
    ensure(ba == bb && a == b, || "golden checkpoint fused differently twice".into())?;
    Ok(format!("S2WT {} B, S2WC {} B, fused output bit-identical", bytes.len(), ckpt.len()))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("wavelet exactness", wavelets),
        ("shape trace", shape_trace),
        ("gradient correctness", gradients),
        ("linear scan complexity", scan_scaling),
        ("identity behaviours", identities),
        ("metric oracles", metric_oracles),
        ("toy training", toy_training),
        ("ablation matrix", ablations),
        ("format stability", formats),
    ];
    let only: Option<Vec<usize>> = std::env::var("S2W_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        // Straight to the handle so the line shows even when output is captured.
        let line = match outcome {
            Ok(detail) => format!("criterion {n} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(e) => {
                failed.push(n);
                format!("criterion {n} {name}: FAIL ({e}) [{secs:.1}s]")
            }
        };
        let _ = writeln!(std::io::stderr(), "{line}");
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
