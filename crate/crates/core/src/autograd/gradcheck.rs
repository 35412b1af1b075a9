//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the max relative error.
    pub tolerance: f64,
    /// Denominator floor: gradients below it are compared with absolute
    /// tolerance `tolerance·floor`, which sits just above the rounding noise
    /// of a central difference at `step = 1e-5`.
    pub floor: f64,
    /// Entries probed per parameter; larger tensors are sampled.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            max_entries: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
    pub entries_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub(crate) fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let out = f(&mut g)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::invalid("gradient check needs a scalar function"));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "check_gradients" });
    }
    Ok(v)
}

/// Compare the tape gradient of the scalar `f` against central differences
/// for each parameter in `params`. The store is restored before returning.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if let Some(bad) = params.iter().find(|&&id| !store.value(id).is_finite()) {
        return Err(Error::invalid(format!("parameter {} is not finite", store.get(*bad).name)));
    }
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        if !g.value(loss).is_finite() {
            return Err(Error::NonFinite { op: "check_gradients" });
        }
        g.backward(loss)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(params.len());
    for &id in params {
        let n = store.value(id).len();
        let entries: Vec<usize> = if n <= opts.max_entries {
            (0..n).collect()
        } else {
            let mut idx = sample(&mut rng, n, opts.max_entries).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut worst = 0.0f64;
        for &k in &entries {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + opts.step;
            let plus = eval(store, &f);
            store.value_mut(id).data_mut()[k] = orig - opts.step;
            let minus = eval(store, &f);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            worst = worst.max(relative_error(a, numeric, opts.floor));
        }
        reports.push(ParamReport {
            name: store.get(id).name.clone(),
            max_rel_error: worst,
            entries_checked: entries.len(),
        });
    }
    Ok(GradReport {
        params: reports,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let f = |g: &mut Graph<'_>| {
            let v = g.param(x);
            let sq = g.mul(v, v)?;
            g.sum(sq)
        };
        let mut g = Graph::new(&store);
        let loss = f(&mut g).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
        let report = check_gradients(&mut store, &[x], &GradCheckOptions::default(), f).unwrap();
        assert!(report.params[0].max_rel_error < 1e-8, "{report:?}");
        assert_eq!(store.value(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-12);
    }
}
