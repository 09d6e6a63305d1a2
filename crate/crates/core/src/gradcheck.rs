//! Finite-difference check of the training objectives against the tape's
//! reverse sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::block::{self, CoConModel};
use crate::corpus::TrainingBatch;
use crate::error::Result;
use crate::lm::{self, LMConfig, LM_GROUP};
use crate::tensor::{ParameterStore, Tape, Var};
use crate::tokenizer::TokenId;
use crate::trainer::{self, Prepared, TrainerConfig};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckConfig {
    pub lm: LMConfig,
    pub step: f64,
    pub tolerance: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
    pub entries_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            lm: LMConfig {
                n_layers: 2,
                n_alpha: 1,
                d_model: 32,
                n_heads: 4,
                d_ff: 64,
                vocab_size: 64,
                max_seq_len: 64,
            },
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            entries_per_tensor: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossCheck {
    pub loss: String,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub entries: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<LossCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

type Objective<'a> = Box<dyn Fn(&mut Tape, &ParameterStore) -> Result<Var> + 'a>;

fn check(name: &str, f: &Objective, store: &ParameterStore, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<LossCheck> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    let grads: Vec<(String, Vec<f64>)> = tape.param_grads().map(|(p, g)| (p.to_string(), g.to_vec())).collect();
    let value = |s: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::inference();
        let v = f(&mut tape, s)?;
        Ok(tape.scalar(v))
    };
    let mut out = LossCheck {
        loss: name.to_string(),
        max_rel_error: 0.0,
        worst_param: String::new(),
        entries: 0,
    };
    let mut probe = store.clone();
    let paths: Vec<String> = store.paths().filter(|p| store.is_trainable(p)).map(str::to_string).collect();
    for path in paths {
        let n = store.value(&path)?.len();
        for _ in 0..cfg.entries_per_tensor {
            let idx = rng.gen_range(0..n);
            let orig = store.value(&path)?.data()[idx];
            probe.value_mut(&path)?.data_mut()[idx] = orig + cfg.step;
            let up = value(&probe)?;
            probe.value_mut(&path)?.data_mut()[idx] = orig - cfg.step;
            let down = value(&probe)?;
            probe.value_mut(&path)?.data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let exact = grads.iter().find(|(p, _)| *p == path).map_or(0.0, |(_, g)| g[idx]);
            let rel = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(cfg.floor);
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst_param = format!("{path}[{idx}]");
            }
            out.entries += 1;
        }
    }
    Ok(out)
}

/// Checks each loss and their weighted sum on a random batch, with the
/// greedy first cycle pass computed once and held fixed.
pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let lm_cfg = &cfg.lm;
    let model = CoConModel::new(lm_cfg.clone())?;
    let mut store = lm::init_params(lm_cfg, cfg.seed)?;
    store.merge(block::init_params(lm_cfg, cfg.seed + 1)?)?;
    store.merge(trainer::init_discriminator(lm_cfg.d_model, 16, 3, cfg.seed + 2)?)?;
    store.freeze_group(LM_GROUP);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ids = |n: usize| -> Vec<TokenId> { (0..n).map(|_| rng.gen_range(0..lm_cfg.vocab_size as TokenId)).collect() };
    let batch = TrainingBatch {
        x: ids(14),
        x_prime: ids(14),
        t: 5,
        doc: 0,
        doc_prime: 1,
    };
    let y = trainer::cycle_first_pass(&model, &store, &batch)?;
    let weights = TrainerConfig {
        lambda_self: 0.7,
        lambda_null: 1.3,
        lambda_cycle: 0.5,
        lambda_adv: 2.0,
        seg_len: batch.x.len(),
        ..TrainerConfig::default()
    };
    let prepared = Prepared {
        batch: batch.clone(),
        y: Some(y.clone()),
        y_matched: None,
    };
    let (m, b) = (&model, &batch);
    let objectives: Vec<(&str, Objective)> = vec![
        ("l_self", Box::new(|t: &mut Tape, s: &ParameterStore| trainer::loss_self(m, t, s, b, true))),
        ("l_null", Box::new(|t: &mut Tape, s: &ParameterStore| trainer::loss_null(m, t, s, b))),
        ("l_cycle", Box::new(|t: &mut Tape, s: &ParameterStore| trainer::loss_cycle(m, t, s, b, &y))),
        (
            "l_adv",
            Box::new(|t: &mut Tape, s: &ParameterStore| {
                Ok(trainer::loss_adv(m, t, s, &b.x, b.prime_prompt(), b.continuation(), &y)?.loss)
            }),
        ),
        (
            "weighted",
            Box::new(|t: &mut Tape, s: &ParameterStore| Ok(trainer::objective(m, t, s, &prepared, &weights)?.total)),
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let checks = objectives
        .iter()
        .map(|(name, f)| check(name, f, &store, cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        checks,
        tolerance: cfg.tolerance,
    })
}
