use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use s2wmamba::autograd::Graph;
use s2wmamba::dataset::{self, generate_triplets, load_split, read_image, save_split, write_image, SceneSpec};
use s2wmamba::metrics::MetricsReport;
use s2wmamba::network::{fuse, load_checkpoint, save_checkpoint, AblationConfig, ModelConfig, S2WMambaModel};
use s2wmamba::params::ParamStore;
use s2wmamba::train::{format_history, train_toy, TrainConfig};
use s2wmamba::wavelet::{dwt1d, dwt2d, idwt1d, idwt2d};
use s2wmamba::{Error, Tensor};

use crate::manifest::RunManifest;
use crate::preview::write_pgm;
use crate::{BenchArgs, BenchOp, Cli, Command, DwtArgs, DwtMode, EvalArgs, FuseArgs, GenArgs, TrainArgs};

/// 1 usage, 2 data or format, 3 numerical.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return if err.is_numerical() { 3 } else { 2 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

pub fn run(cli: &Cli) -> Result<()> {
    let manifest = cli.manifest.as_deref();
    match &cli.command {
        Command::Gen(a) => gen(a, cli.seed, manifest),
        Command::Train(a) => train(a, cli.seed, manifest),
        Command::Fuse(a) => fuse_cmd(a, cli.seed, manifest),
        Command::Eval(a) => eval(a, cli.seed, manifest),
        Command::Bench(a) => bench(a, cli.seed, manifest),
        Command::Dwt(a) => dwt(a, cli.seed, manifest),
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen(a: &GenArgs, seed: u64, manifest: Option<&Path>) -> Result<()> {
    let t0 = Instant::now();
    let spec = SceneSpec {
        bands: a.bands,
        height: a.size,
        width: a.size,
        count: a.count,
        seed,
    };
    let triplets = generate_triplets(&spec, a.ratio)?;
    let paths = save_split(&a.out, &a.split, &triplets)?;
    let mut m = RunManifest::new("gen", seed);
    m.set("bands", a.bands)
        .set("size", a.size)
        .set("count", a.count)
        .set("ratio", a.ratio)
        .set("split", &a.split);
    if let (Some(p), Some(t)) = (&a.preview, triplets.first()) {
        write_pgm(p, &t.gt)?;
        m.output(p);
    }
    m.output(a.out.join(&a.split));
    m.time("total", t0.elapsed());
    println!("triplets={}", triplets.len());
    println!("files={}", paths.len());
    let default = a.out.join(format!("{}.manifest", a.split));
    m.emit(Some(manifest.unwrap_or(&default)))?;
    Ok(())
}

fn train(a: &TrainArgs, seed: u64, manifest: Option<&Path>) -> Result<()> {
    let t0 = Instant::now();
    let ablation: AblationConfig = a
        .ablation
        .parse()
        .map_err(|e| anyhow::anyhow!("--ablation {}: {e}", a.ablation))?;
    let train_set = load_split(&a.data, "train", a.ratio).context("loading training split")?;
    let val_set = if a.data.join("val").is_dir() {
        load_split(&a.data, "val", a.ratio)?
    } else {
        Vec::new()
    };
    let bands = train_set[0].gt.shape()[0];
    let cfg = ModelConfig {
        width: a.width,
        ablation,
        ..ModelConfig::new(bands, a.ratio)
    };
    let mut model = S2WMambaModel::new(cfg, seed)?;
    let tc = TrainConfig {
        learning_rate: a.lr,
        steps: a.steps,
        batch: a.batch,
        patch: a.patch,
        eval_every: a.eval_every,
        seed,
        ..TrainConfig::default()
    };
    let t_load = t0.elapsed();
    let history = train_toy(&mut model, &train_set, &val_set, &tc)?;
    let table = format_history(&history);
    print!("{table}");
    save_checkpoint(&model, &a.ckpt)?;

    let mut m = RunManifest::new("train", seed);
    m.set("data", a.data.display())
        .set("bands", bands)
        .set("ratio", a.ratio)
        .set("width", a.width)
        .set("ablation", ablation)
        .set("steps", tc.steps)
        .set("batch", tc.batch)
        .set("patch", tc.patch)
        .set("lr", tc.learning_rate)
        .set("decay", tc.decay)
        .set("decay_every", tc.decay_every)
        .set("beta1", tc.beta1)
        .set("beta2", tc.beta2)
        .set("weight_decay", tc.weight_decay)
        .set("parameters", model.num_parameters());
    if let Some(p) = &a.history {
        std::fs::write(p, &table)?;
        m.output(p);
    }
    m.output(&a.ckpt);
    m.time("load", t_load);
    m.time("total", t0.elapsed());
    let default = with_suffix(&a.ckpt, ".manifest");
    m.emit(Some(manifest.unwrap_or(&default)))?;
    Ok(())
}

fn fuse_cmd(a: &FuseArgs, seed: u64, manifest: Option<&Path>) -> Result<()> {
    let t0 = Instant::now();
    let model = load_checkpoint(&a.ckpt).with_context(|| format!("reading {}", a.ckpt.display()))?;
    let pan = read_image(&a.pan)?;
    let lrms = read_image(&a.lrms)?;
    let out = fuse(&model, &pan, &lrms)?;
    write_image(&a.out, &out)?;
    let mut m = RunManifest::new("fuse", seed);
    m.set("ckpt", a.ckpt.display())
        .set("pan", a.pan.display())
        .set("lrms", a.lrms.display())
        .set("model", format!("{:?}", model.cfg));
    if let Some(p) = &a.preview {
        write_pgm(p, &out)?;
        m.output(p);
    }
    m.output(&a.out);
    m.time("total", t0.elapsed());
    let s = out.shape();
    println!("shape={}x{}x{}", s[0], s[1], s[2]);
    let default = with_suffix(&a.out, ".manifest");
    m.emit(Some(manifest.unwrap_or(&default)))?;
    Ok(())
}

fn eval(a: &EvalArgs, seed: u64, manifest: Option<&Path>) -> Result<()> {
    let t0 = Instant::now();
    let mut m = RunManifest::new("eval", seed);
    let report = match (&a.pred, &a.gt, &a.fused, &a.lrms, &a.pan) {
        (Some(pred), Some(gt), None, _, _) => {
            m.set("pred", pred.display()).set("gt", gt.display());
            MetricsReport::reduced(&read_image(pred)?, &read_image(gt)?, a.ratio, a.peak)?
        }
        (None, _, Some(fused), Some(lrms), Some(pan)) => {
            m.set("fused", fused.display())
                .set("lrms", lrms.display())
                .set("pan", pan.display());
            let pan = read_image(pan)?;
            let pan_lp = dataset::blur_decimate(&pan, a.ratio)?;
            MetricsReport::full(&read_image(fused)?, &read_image(lrms)?, &pan, &pan_lp)?
        }
        _ => bail!("give either --pred with --gt, or --fused with --lrms and --pan"),
    };
    m.set("ratio", a.ratio).set("peak", a.peak);
    if a.json {
        let obj: serde_json::Map<String, serde_json::Value> = report
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), if v.is_finite() { json!(v) } else { json!(v.to_string()) }))
            .collect();
        println!("{}", serde_json::Value::Object(obj));
    } else {
        print!("{report}");
    }
    m.time("total", t0.elapsed());
    m.emit(manifest)?;
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn bench(a: &BenchArgs, seed: u64, manifest: Option<&Path>) -> Result<()> {
    if a.sizes.is_empty() || a.repeats == 0 {
        bail!("need at least one size and one repeat");
    }
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &n in &a.sizes {
        let mut times = Vec::with_capacity(a.repeats);
        match a.op {
            BenchOp::Scan => {
                let (d, s) = (a.d_inner, a.d_state);
                let u = Tensor::uniform(&[n, d], -1.0, 1.0, &mut rng);
                let delta = Tensor::uniform(&[n, d], 1e-3, 0.1, &mut rng);
                let a_log = Tensor::uniform(&[d, s], 0.0, 2.0, &mut rng);
                let b = Tensor::uniform(&[n, s], -1.0, 1.0, &mut rng);
                let c = Tensor::uniform(&[n, s], -1.0, 1.0, &mut rng);
                let dk = Tensor::ones(&[d]);
                let store = ParamStore::new();
                for _ in 0..a.repeats {
                    let mut g = Graph::inference(&store);
                    let ins = [&u, &delta, &a_log, &b, &c, &dk].map(|t| g.input(t.clone()));
                    let [u, delta, a_log, b, c, dk] = ins;
                    let t = Instant::now();
                    g.selective_scan(u?, delta?, a_log?, b?, c?, dk?)?;
                    times.push(t.elapsed().as_secs_f64());
                }
            }
            BenchOp::Dwt => {
                let side = ((n as f64).sqrt() as usize).max(2) & !1;
                let img = Tensor::from_fn(&[4, side, side], |_| rng.gen_range(0.0..1.0));
                for _ in 0..a.repeats {
                    let t = Instant::now();
                    std::hint::black_box(dwt2d(&img)?);
                    times.push(t.elapsed().as_secs_f64());
                }
            }
        }
        rows.push((n, median(times)));
    }
    println!("{:>10}  {:>12}  {:>8}", "size", "median_ms", "ratio");
    for (i, (n, t)) in rows.iter().enumerate() {
        let ratio = if i == 0 { "-".to_string() } else { format!("{:.2}", t / rows[i - 1].1) };
        println!("{:>10}  {:>12.4}  {:>8}", n, t * 1e3, ratio);
    }
    let mut m = RunManifest::new("bench", seed);
    m.set("op", format!("{:?}", a.op).to_lowercase())
        .set("sizes", a.sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","))
        .set("repeats", a.repeats);
    m.time("total", t0.elapsed());
    m.emit(manifest)?;
    Ok(())
}

fn dwt(a: &DwtArgs, seed: u64, manifest: Option<&Path>) -> Result<()> {
    let t0 = Instant::now();
    let img = read_image(&a.input)?;
    let mut m = RunManifest::new("dwt", seed);
    m.set("input", a.input.display())
        .set("mode", if a.mode == DwtMode::OneD { "1d" } else { "2d" })
        .set("roundtrip", a.roundtrip);
    let (stacked, recon) = match a.mode {
        DwtMode::TwoD => {
            let sb = dwt2d(&img)?;
            let [ll, lh, hl, hh] = sb.as_array();
            for (name, band) in [("ll", ll), ("lh", lh), ("hl", hl), ("hh", hh)] {
                println!("{name}_max_abs={}", band.max_abs());
            }
            let stacked = Tensor::concat_channels(&[ll, lh, hl, hh])?;
            let recon = if a.roundtrip { Some(idwt2d(&sb)?) } else { None };
            (stacked, recon)
        }
        DwtMode::OneD => {
            let bands = dwt1d(&img)?;
            println!("l_max_abs={}", bands.low.max_abs());
            println!("h_max_abs={}", bands.high.max_abs());
            let stacked = Tensor::concat_channels(&[&bands.low, &bands.high])?;
            let recon = if a.roundtrip { Some(idwt1d(&bands.low, &bands.high)?) } else { None };
            (stacked, recon)
        }
    };
    let s = stacked.shape();
    println!("shape={}x{}x{}", s[0], s[1], s[2]);
    if let Some(r) = recon {
        // Compare at the file's 32-bit precision.
        let r32 = r.map(|v| v as f32 as f64);
        println!("roundtrip_max_abs_error={:e}", r32.max_abs_diff(&img)?);
    }
    if let Some(out) = &a.out {
        write_image(out, &stacked)?;
        m.output(out);
    }
    m.time("total", t0.elapsed());
    m.emit(manifest)?;
    Ok(())
}
