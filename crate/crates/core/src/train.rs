//! Toy training: ℓ1 objective, step-decayed AdamW, patch sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Graph;
use crate::branches::bicubic_upsample;
use crate::dataset::Triplet;
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::network::{forward, fuse, S2WMambaModel};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` steps.
    pub decay: f64,
    pub decay_every: usize,
    pub steps: usize,
    pub batch: usize,
    /// Edge of the GT training patch; a multiple of the ratio.
    pub patch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Validate every this many steps (and after the last one); 0 disables.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 4e-4,
            decay: 0.7,
            decay_every: 100,
            steps: 200,
            batch: 4,
            patch: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, ratio: usize) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::invalid("decay must lie in (0, 1)"));
        }
        if self.decay_every == 0 || self.batch == 0 {
            return Err(Error::invalid("decay interval and batch size must be positive"));
        }
        if self.patch == 0 || self.patch % ratio != 0 || !(self.patch / ratio).is_power_of_two() {
            return Err(Error::invalid(format!(
                "patch {} must be a power-of-two multiple of the ratio {ratio}",
                self.patch
            )));
        }
        Ok(())
    }

    /// `lr · decay^⌊step / decay_every⌋`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.learning_rate * self.decay.powi((step / self.decay_every) as i32)
    }
}

/// Decoupled weight decay with adaptive moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, num_params: usize) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: vec![None; num_params],
            v: vec![None; num_params],
            t: 0,
        }
    }

    /// One update with gradients scaled by `grad_scale`. Parameters without a
    /// gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, grad_scale: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads.iter() {
            let i = id.index();
            let n = g.len();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape())).data_mut();
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape())).data_mut();
            let p = store.value_mut(id).data_mut();
            let gd = g.data();
            for k in 0..n {
                let gk = gd[k] * grad_scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                p[k] -= lr * (update + self.weight_decay * p[k]);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    /// Mean ℓ1 loss of the step's batch.
    pub loss: f64,
    pub lr: f64,
    pub val_psnr: Option<f64>,
}

/// A training crop.
#[derive(Clone, Debug)]
pub struct Sample {
    pub pan: Tensor,
    pub lrms: Tensor,
    pub gt: Tensor,
}

/// Random `patch×patch` crop aligned to the LRMS grid.
pub fn sample_patch(t: &Triplet, r: usize, patch: usize, rng: &mut impl Rng) -> Result<Sample> {
    let (_, h, w) = t.gt.chw()?;
    if patch > h || patch > w {
        return Err(Error::invalid(format!("patch {patch} exceeds image {h}×{w}")));
    }
    let y0 = rng.gen_range(0..=(h - patch) / r) * r;
    let x0 = rng.gen_range(0..=(w - patch) / r) * r;
    Ok(Sample {
        pan: t.pan.crop(y0, x0, patch, patch)?,
        lrms: t.lrms.crop(y0 / r, x0 / r, patch / r, patch / r)?,
        gt: t.gt.crop(y0, x0, patch, patch)?,
    })
}

/// ℓ1 loss and its gradients for one sample.
fn sample_grad(model: &S2WMambaModel, s: &Sample) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(&model.store);
    let out = forward(&mut g, model, &s.pan, &s.lrms, None)?;
    let target = g.input(s.gt.clone())?;
    let loss = g.l1_loss(out, target)?;
    let value = g.value(loss).data()[0];
    Ok((value, g.backward(loss)?))
}

/// Mean ℓ1 loss of full-image fusions.
pub fn mean_l1(model: &S2WMambaModel, set: &[Triplet]) -> Result<f64> {
    let per: Vec<f64> = set
        .par_iter()
        .map(|t| {
            let out = fuse(model, &t.pan, &t.lrms)?;
            Ok(out.sub(&t.gt)?.map(f64::abs).mean())
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Mean PSNR (peak 1) of full-image fusions.
pub fn mean_psnr(model: &S2WMambaModel, set: &[Triplet]) -> Result<f64> {
    let per: Vec<f64> = set
        .par_iter()
        .map(|t| psnr(&fuse(model, &t.pan, &t.lrms)?, &t.gt, 1.0))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Mean PSNR of plain bicubic upsampling.
pub fn bicubic_psnr(set: &[Triplet], r: usize) -> Result<f64> {
    let per: Vec<f64> = set
        .iter()
        .map(|t| psnr(&bicubic_upsample(&t.lrms, r)?, &t.gt, 1.0))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Train in place. Samples of a step run concurrently; their gradients are
/// summed in sample order so results do not depend on scheduling.
pub fn train_toy(
    model: &mut S2WMambaModel,
    train: &[Triplet],
    val: &[Triplet],
    cfg: &TrainConfig,
) -> Result<Vec<HistoryRow>> {
    let r = model.cfg.ratio;
    cfg.validate(r)?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg, model.store.len());
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Sample> = (0..cfg.batch)
            .map(|_| {
                let t = &train[rng.gen_range(0..train.len())];
                sample_patch(t, r, cfg.patch, &mut rng)
            })
            .collect::<Result<_>>()?;
        let results: Vec<(f64, Gradients)> = batch
            .par_iter()
            .map(|s| sample_grad(model, s))
            .collect::<Result<_>>()
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
                e => e,
            })?;
        let mut loss = 0.0;
        let mut total = Gradients::new(model.store.len());
        for (l, g) in results {
            loss += l;
            total.merge(g)?;
        }
        loss /= cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let lr = cfg.lr_at(step);
        opt.step(&mut model.store, &total, lr, 1.0 / cfg.batch as f64);
        if !model.store.iter().all(|(_, p)| p.value.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        let last = step + 1 == cfg.steps;
        let val_psnr = if !val.is_empty() && (last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0)) {
            Some(mean_psnr(model, val)?)
        } else {
            None
        };
        log::debug!("step {step} loss {loss:.6} lr {lr:.3e}");
        history.push(HistoryRow {
            step,
            loss,
            lr,
            val_psnr,
        });
    }
    Ok(history)
}

/// History as an aligned text table.
pub fn format_history(rows: &[HistoryRow]) -> String {
    let mut s = format!("{:>6}  {:>12}  {:>10}  {:>9}\n", "step", "loss", "lr", "val_psnr");
    for r in rows {
        let v = r.val_psnr.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        s.push_str(&format!("{:>6}  {:>12.6}  {:>10.3e}  {:>9}\n", r.step, r.loss, r.lr, v));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_triplets, SceneSpec};
    use crate::network::{AblationConfig, ModelConfig};
    use approx::assert_relative_eq;

    fn tiny_model(seed: u64) -> S2WMambaModel {
        S2WMambaModel::new(
            ModelConfig {
                width: 4,
                ..ModelConfig::new(4, 4)
            },
            seed,
        )
        .unwrap()
    }

    fn data(n: usize) -> Vec<Triplet> {
        generate_triplets(
            &SceneSpec {
                bands: 4,
                height: 32,
                width: 32,
                count: n,
                seed: 5,
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 4e-4);
        assert_eq!(c.lr_at(99), 4e-4);
        assert_relative_eq!(c.lr_at(100), 2.8e-4, max_relative = 1e-12);
        assert_relative_eq!(c.lr_at(250), 4e-4 * 0.49, max_relative = 1e-12);
        assert!(TrainConfig { decay: 1.0, ..c.clone() }.validate(4).is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..c.clone() }.validate(4).is_err());
        assert!(TrainConfig { patch: 12, ..c }.validate(4).is_err());
    }

    #[test]
    fn adamw_first_step_is_sign_times_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let mut grads = Gradients::new(1);
        grads.accumulate(id, Tensor::new(&[3], vec![0.3, -4.0, 0.0]).unwrap()).unwrap();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&cfg, 1);
        opt.step(&mut store, &grads, 0.1, 1.0);
        let p = store.value(id).data();
        assert_relative_eq!(p[0], 0.9, epsilon = 1e-6);
        assert_relative_eq!(p[1], -1.9, epsilon = 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn crops_align_with_lrms_grid() {
        let set = data(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let s = sample_patch(&set[0], 4, 16, &mut rng).unwrap();
            assert_eq!(s.gt.shape(), &[4, 16, 16]);
            assert_eq!(s.lrms.shape(), &[4, 4, 4]);
            assert_eq!(s.pan.shape(), &[1, 16, 16]);
        }
    }

    #[test]
    fn zero_steps_leave_model_untouched() {
        let mut m = tiny_model(1);
        let before = m.store.clone();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let h = train_toy(&mut m, &data(2), &[], &cfg).unwrap();
        assert!(h.is_empty());
        for ((_, a), (_, b)) in before.iter().zip(m.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn training_is_deterministic_and_monotone_in_step() {
        let set = data(4);
        let cfg = TrainConfig {
            steps: 4,
            batch: 3,
            eval_every: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut a = tiny_model(2);
        let mut b = tiny_model(2);
        let ha = train_toy(&mut a, &set, &set[..1], &cfg).unwrap();
        let hb = train_toy(&mut b, &set, &set[..1], &cfg).unwrap();
        assert_eq!(ha, hb);
        assert!(ha.windows(2).all(|w| w[1].step == w[0].step + 1));
        assert!(ha[1].val_psnr.is_some() && ha[0].val_psnr.is_none());
        assert!(format_history(&ha).lines().count() == 5);
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = tiny_model(3);
        let cfg = TrainConfig {
            steps: 3,
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        let err = train_toy(&mut m, &data(2), &[], &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn ablation_variant_trains() {
        let mut m = tiny_model(4);
        m = crate::network::apply_ablation(&m, "HP".parse::<AblationConfig>().unwrap(), 4).unwrap();
        let cfg = TrainConfig {
            steps: 2,
            ..TrainConfig::default()
        };
        let h = train_toy(&mut m, &data(2), &[], &cfg).unwrap();
        assert!(h.iter().all(|r| r.loss.is_finite()));
    }
}
