//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParameterStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FdConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Relative errors use `max(|analytic|, |numeric|, abs_floor)` as the
    /// denominator so that vanishing gradients are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many entries per parameter (sampled
    /// deterministically); `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdEntry {
    pub path: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn entry(&self, path: &str) -> Option<&FdEntry> {
        self.entries.iter().find(|e| e.path == path)
    }
}

/// Compares tape gradients of `loss_fn` with central differences for every
/// trainable parameter in `params`. Frozen groups are skipped entirely.
///
/// `loss_fn` must build the loss on the tape it is handed, reading parameters
/// through [`Tape::param`], and be deterministic.
pub fn finite_difference_check<F>(mut loss_fn: F, params: &mut ParameterStore, cfg: &FdConfig) -> Result<FdReport>
where
    F: FnMut(&ParameterStore, &mut Tape) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&cfg.step) {
        return Err(Error::config(format!("finite-difference step {} outside [1e-6, 1e-4]", cfg.step)));
    }

    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    tape.backward(loss)?;
    let analytic: std::collections::HashMap<String, Vec<f64>> =
        tape.param_grads().map(|(k, g)| (k.to_string(), g.to_vec())).collect();

    let paths: Vec<String> = params
        .paths()
        .filter(|p| params.is_trainable(p))
        .map(str::to_string)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::with_capacity(paths.len());

    for path in paths {
        let n = params.value(&path)?.len();
        let indices: Vec<usize> = match cfg.max_entries_per_param {
            Some(k) if k < n => {
                let mut idx = sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        // Parameters the loss never touched have an analytic gradient of zero.
        let grads = analytic.get(&path);
        let mut entry = FdEntry {
            path: path.clone(),
            checked: indices.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in indices {
            let original = params.value(&path)?.data()[idx];
            params.value_mut(&path)?.data_mut()[idx] = original + cfg.step;
            let plus = eval(&mut loss_fn, params, &path, idx);
            params.value_mut(&path)?.data_mut()[idx] = original - cfg.step;
            let minus = eval(&mut loss_fn, params, &path, idx);
            params.value_mut(&path)?.data_mut()[idx] = original;
            let (plus, minus) = (plus?, minus?);

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grads.map_or(0.0, |g| g[idx]);
            let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            let rel = (a - numeric).abs() / denom;
            if rel >= entry.max_rel_error {
                entry.max_rel_error = rel;
                entry.worst_index = idx;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        entries.push(entry);
    }
    Ok(FdReport {
        entries,
        tolerance: cfg.tolerance,
    })
}

fn eval<F>(loss_fn: &mut F, params: &ParameterStore, path: &str, index: usize) -> Result<f64>
where
    F: FnMut(&ParameterStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let loss = loss_fn(params, &mut tape)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NumericalInstability {
            param: path.to_string(),
            index,
        });
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sq_norm(params: &ParameterStore, tape: &mut Tape) -> Result<Var> {
        let p = tape.param(params, "cocon/p")?;
        let pt = tape.transpose(p);
        let sq = tape.matmul(p, pt)?;
        Ok(tape.sum(sq))
    }

    #[test]
    fn quadratic_loss_is_exact() {
        let mut s = ParameterStore::new();
        s.insert("cocon/p", Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.01]).unwrap())
            .unwrap();
        let report = finite_difference_check(sq_norm, &mut s, &FdConfig::default()).unwrap();
        assert!(report.max_rel_error() < 1e-9, "{report:?}");
    }

    #[test]
    fn frozen_groups_are_not_reported() {
        let mut s = ParameterStore::new();
        s.insert("cocon/p", Tensor::new(vec![1, 2], vec![0.3, -1.2]).unwrap()).unwrap();
        s.insert("lm/q", Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        s.freeze_group("lm");
        let report = finite_difference_check(
            |params, tape| {
                let p = tape.param(params, "cocon/p")?;
                let q = tape.param(params, "lm/q")?;
                let s = tape.add(p, q)?;
                let st = tape.transpose(s);
                let sq = tape.matmul(s, st)?;
                Ok(tape.sum(sq))
            },
            &mut s,
            &FdConfig::default(),
        )
        .unwrap();
        assert!(report.entry("lm/q").is_none());
        assert!(report.entry("cocon/p").is_some());
        assert!(report.passed());
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let mut s = ParameterStore::new();
        s.insert("cocon/p", Tensor::scalar(1.0)).unwrap();
        let cfg = FdConfig {
            step: 1e-2,
            ..Default::default()
        };
        assert!(finite_difference_check(sq_norm, &mut s, &cfg).is_err());
    }

    #[test]
    fn non_finite_loss_names_the_parameter() {
        let mut s = ParameterStore::new();
        s.insert("cocon/p", Tensor::scalar(1.0)).unwrap();
        let err = finite_difference_check(
            |params, tape| {
                let p = tape.param(params, "cocon/p")?;
                // scale by NaN only when perturbed upwards
                let factor = if params.value("cocon/p")?.data()[0] > 1.0 { f64::NAN } else { 1.0 };
                let scaled = tape.scale(p, factor);
                Ok(tape.sum(scaled))
            },
            &mut s,
            &FdConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NumericalInstability { ref param, .. } if param == "cocon/p"));
    }
}
