//! Self-supervised training of the conditioning block.
//!
//! Four objectives share one frozen base model: self reconstruction, null
//! content, cycle reconstruction across paired samples, and an adversarial
//! term against a representation discriminator that is updated on its own
//! schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{self, CoConModel, ContentSet, COCON_GROUP};
use crate::corpus::{SegmentSampler, TrainingBatch};
use crate::error::{Error, Result};
use crate::generator::{decode, DecodeContents, Sampling};
use crate::lm::LM_GROUP;
use crate::tensor::{AdamConfig, ParameterStore, Tape, Tensor, Var};
use crate::tokenizer::TokenId;

pub const DISC_GROUP: &str = "disc";
/// Class index of real samples in the discriminator output.
pub const REAL: usize = 1;
pub const FAKE: usize = 0;

/// Which generations feed the adversarial term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AdvSource {
    /// The cycle first-pass output: prompt `x'^a`, content `x^b`.
    #[default]
    Mismatched,
    /// A separate greedy pass with prompt `x^a` and content `x^b`.
    Matched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub lambda_self: f64,
    pub lambda_null: f64,
    pub lambda_cycle: f64,
    pub lambda_adv: f64,
    pub disc_update_interval: usize,
    pub lr_cocon: f64,
    pub lr_disc: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub seg_len: usize,
    pub break_lo: usize,
    pub break_hi: usize,
    pub self_token_mask: bool,
    pub adv_source: AdvSource,
    pub disc_channels: usize,
    pub disc_kernel: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lambda_self: 1.0,
            lambda_null: 1.0,
            lambda_cycle: 1.0,
            lambda_adv: 1.0,
            disc_update_interval: 5,
            lr_cocon: 1e-3,
            lr_disc: 1e-3,
            steps: 2000,
            batch_size: 8,
            seed: 0,
            seg_len: 30,
            break_lo: 8,
            break_hi: 12,
            self_token_mask: true,
            adv_source: AdvSource::Mismatched,
            disc_channels: 64,
            disc_kernel: 3,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_self, self.lambda_null, self.lambda_cycle, self.lambda_adv];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if self.disc_update_interval < 1 {
            return Err(Error::config("disc_update_interval must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.disc_kernel < 1 || self.disc_channels < 1 {
            return Err(Error::config("discriminator kernel and channels must be positive"));
        }
        if self.disc_kernel > self.seg_len {
            return Err(Error::config("discriminator kernel is longer than a segment"));
        }
        if !(self.lr_cocon > 0.0 && self.lr_disc > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(())
    }

    fn needs_generation(&self) -> bool {
        self.lambda_cycle > 0.0 || self.lambda_adv > 0.0
    }
}

/// Discriminator parameters: a width-`kernel` convolution over the sequence
/// axis, GELU, mean pooling and a linear map to two classes.
pub fn init_discriminator(d_model: usize, channels: usize, kernel: usize, seed: u64) -> Result<ParameterStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParameterStore::new();
    s.insert_normal("disc/conv/w", &[kernel * d_model, channels], 0.02, &mut rng)?;
    s.insert("disc/conv/b", Tensor::zeros(&[channels]))?;
    s.insert_normal("disc/out/w", &[channels, 2], 0.02, &mut rng)?;
    s.insert("disc/out/b", Tensor::zeros(&[2]))?;
    Ok(s)
}

/// Class logits `[1×2]` for a representation sequence `[T×d]`, `T >= kernel`.
pub fn discriminator_logits(tape: &mut Tape, store: &ParameterStore, reps: Var) -> Result<Var> {
    let w = tape.param(store, "disc/conv/w")?;
    let b = tape.param(store, "disc/conv/b")?;
    let d = tape.value(reps).cols();
    let kernel = tape.value(w).rows() / d;
    let t_len = tape.value(reps).rows();
    if t_len < kernel {
        return Err(Error::config(format!(
            "sequence of {t_len} positions is shorter than the discriminator kernel {kernel}"
        )));
    }
    let windows = t_len - kernel + 1;
    let shifted = (0..kernel)
        .map(|j| tape.slice_rows(reps, j, windows))
        .collect::<Result<Vec<_>>>()?;
    let unfolded = if kernel == 1 { shifted[0] } else { tape.concat_cols(&shifted)? };
    let conv = tape.matmul(unfolded, w)?;
    let conv = tape.add_row(conv, b)?;
    let act = tape.gelu(conv);
    let pooled = tape.mean_rows(act);
    let ow = tape.param(store, "disc/out/w")?;
    let ob = tape.param(store, "disc/out/b")?;
    let logits = tape.matmul(pooled, ow)?;
    tape.add_row(logits, ob)
}

/// Teacher-forced reconstruction of `x^b` with content `x^b` itself. With
/// `mask`, each position cannot see the token it predicts.
pub fn loss_self(model: &CoConModel, tape: &mut Tape, store: &ParameterStore, batch: &TrainingBatch, mask: bool) -> Result<Var> {
    let c = model.content_reps(tape, store, batch.continuation())?;
    let mut set = ContentSet::new(vec![c], 0.0);
    if mask {
        set = set.with_self_token_mask(batch.t);
    }
    model.continuation_loss(tape, store, &batch.x, batch.t, &set)
}

/// Reconstruction of `x^b` with the learned null content.
pub fn loss_null(model: &CoConModel, tape: &mut Tape, store: &ParameterStore, batch: &TrainingBatch) -> Result<Var> {
    let set = model.contents(tape, store, &[], 0.0)?;
    model.continuation_loss(tape, store, &batch.x, batch.t, &set)
}

/// Greedy continuation of `prompt` for `len` tokens conditioned on `content`.
pub fn greedy_with_content(
    model: &CoConModel,
    store: &ParameterStore,
    prompt: &[TokenId],
    content: &[TokenId],
    len: usize,
) -> Result<Vec<TokenId>> {
    let mut tape = Tape::inference();
    let c = model.content_reps(&mut tape, store, content)?;
    let reps = [tape.value(c).clone()];
    let cond = DecodeContents { reps: &reps, tau: 0.0 };
    Ok(decode(model, store, prompt, Some(cond), len, Sampling::Greedy, false)?.0)
}

/// `y = f((c = x^b), (p = x'^a))`, decoded greedily without gradient.
pub fn cycle_first_pass(model: &CoConModel, store: &ParameterStore, batch: &TrainingBatch) -> Result<Vec<TokenId>> {
    greedy_with_content(model, store, batch.prime_prompt(), batch.continuation(), batch.continuation().len())
}

/// Reconstruction of `x^b` from prompt `x^a` with content `y`.
pub fn loss_cycle(
    model: &CoConModel,
    tape: &mut Tape,
    store: &ParameterStore,
    batch: &TrainingBatch,
    y: &[TokenId],
) -> Result<Var> {
    let c = model.content_reps(tape, store, y)?;
    let set = ContentSet::new(vec![c], 0.0);
    model.continuation_loss(tape, store, &batch.x, batch.t, &set)
}

/// The adversarial objective and the representations it compared.
pub struct AdvTerms {
    pub loss: Var,
    pub real_reps: Var,
    pub fake_reps: Var,
    pub real_logits: Var,
    pub fake_logits: Var,
}

/// `log D(LM_α(x)) + log(1 - D(LM_α(ỹ)))`, where `ỹ` is the prompt followed by
/// the block's softmax rows along the generated continuation `y`, fed as soft
/// embeddings so the gradient reaches the block.
pub fn loss_adv(
    model: &CoConModel,
    tape: &mut Tape,
    store: &ParameterStore,
    real: &[TokenId],
    prompt: &[TokenId],
    content: &[TokenId],
    y: &[TokenId],
) -> Result<AdvTerms> {
    let vocab = model.config().vocab_size;
    let t = prompt.len();
    let seq = [prompt, y].concat();
    let c = model.content_reps(tape, store, content)?;
    let set = ContentSet::new(vec![c], 0.0);
    let (logits, from) = model.continuation_logits(tape, store, &seq, t, &set)?;
    let gen_logits = tape.slice_rows(logits, from, y.len())?;
    let gen_probs = tape.softmax_masked(gen_logits, None)?;
    let mut one_hot = Tensor::zeros(&[t, vocab]);
    for (r, &id) in prompt.iter().enumerate() {
        one_hot.data_mut()[r * vocab + id as usize] = 1.0;
    }
    let prompt_rows = tape.constant(one_hot);
    let soft = tape.concat_rows(&[prompt_rows, gen_probs])?;
    let emb = model.lm.embed_soft(tape, store, soft)?;
    let fake_reps = model.lm.alpha_from_embeddings(tape, store, emb)?;
    let real_reps = model.content_reps(tape, store, real)?;
    let real_logits = discriminator_logits(tape, store, real_reps)?;
    let fake_logits = discriminator_logits(tape, store, fake_reps)?;
    let ce_real = tape.cross_entropy(real_logits, &[REAL], usize::MAX)?;
    let ce_fake = tape.cross_entropy(fake_logits, &[FAKE], usize::MAX)?;
    let sum = tape.add(ce_real, ce_fake)?;
    let loss = tape.scale(sum, -1.0);
    Ok(AdvTerms {
        loss,
        real_reps,
        fake_reps,
        real_logits,
        fake_logits,
    })
}

/// Generations a step needs, computed before any gradient is recorded.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub batch: TrainingBatch,
    /// Cycle first-pass output.
    pub y: Option<Vec<TokenId>>,
    /// Matched-pair generation, only for [`AdvSource::Matched`].
    pub y_matched: Option<Vec<TokenId>>,
}

pub fn prepare(model: &CoConModel, store: &ParameterStore, batch: TrainingBatch, cfg: &TrainerConfig) -> Result<Prepared> {
    let y = if cfg.needs_generation() {
        Some(cycle_first_pass(model, store, &batch)?)
    } else {
        None
    };
    let y_matched = if cfg.lambda_adv > 0.0 && cfg.adv_source == AdvSource::Matched {
        Some(greedy_with_content(
            model,
            store,
            batch.prompt(),
            batch.continuation(),
            batch.continuation().len(),
        )?)
    } else {
        None
    };
    Ok(Prepared { batch, y, y_matched })
}

/// The weighted objective for one sample. Disabled terms are not built.
pub struct Objective {
    pub total: Var,
    pub l_self: Option<Var>,
    pub l_null: Option<Var>,
    pub l_cycle: Option<Var>,
    pub adv: Option<AdvTerms>,
}

pub fn objective(model: &CoConModel, tape: &mut Tape, store: &ParameterStore, p: &Prepared, cfg: &TrainerConfig) -> Result<Objective> {
    let mut terms: Vec<Var> = Vec::new();
    let mut weighted = |tape: &mut Tape, v: Var, lambda: f64| terms.push(tape.scale(v, lambda));
    let b = &p.batch;
    let l_self = if cfg.lambda_self > 0.0 {
        let v = loss_self(model, tape, store, b, cfg.self_token_mask)?;
        weighted(tape, v, cfg.lambda_self);
        Some(v)
    } else {
        None
    };
    let l_null = if cfg.lambda_null > 0.0 {
        let v = loss_null(model, tape, store, b)?;
        weighted(tape, v, cfg.lambda_null);
        Some(v)
    } else {
        None
    };
    let l_cycle = if cfg.lambda_cycle > 0.0 {
        let y = p.y.as_deref().ok_or_else(|| Error::config("cycle term needs the first-pass output"))?;
        let v = loss_cycle(model, tape, store, b, y)?;
        weighted(tape, v, cfg.lambda_cycle);
        Some(v)
    } else {
        None
    };
    let adv = if cfg.lambda_adv > 0.0 {
        let (prompt, y) = match cfg.adv_source {
            AdvSource::Mismatched => (b.prime_prompt(), p.y.as_deref()),
            AdvSource::Matched => (b.prompt(), p.y_matched.as_deref()),
        };
        let y = y.ok_or_else(|| Error::config("adversarial term needs a generation"))?;
        let terms = loss_adv(model, tape, store, &b.x, prompt, b.continuation(), y)?;
        weighted(tape, terms.loss, cfg.lambda_adv);
        Some(terms)
    } else {
        None
    };
    let total = match terms.len() {
        0 => {
            let zero = tape.constant(Tensor::scalar(0.0));
            tape.scale(zero, 1.0)
        }
        _ => {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t)?;
            }
            acc
        }
    };
    Ok(Objective {
        total,
        l_self,
        l_null,
        l_cycle,
        adv,
    })
}

/// One line of the metrics stream. Disabled terms are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_self: Option<f64>,
    pub l_null: Option<f64>,
    pub l_cycle: Option<f64>,
    pub l_adv: Option<f64>,
    /// Discriminator accuracy on this step's real and generated samples,
    /// measured before its update; `null` on steps without an update.
    pub disc_acc: Option<f64>,
    pub total: f64,
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = values.iter().copied().collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

pub struct Trainer {
    pub model: CoConModel,
    pub store: ParameterStore,
    pub config: TrainerConfig,
    sampler: SegmentSampler,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    /// Adds fresh block and discriminator parameters to `base` (which must
    /// hold the `lm` group) and freezes the base model.
    pub fn new(model: CoConModel, mut base: ParameterStore, sampler: SegmentSampler, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        if sampler.seg_len != config.seg_len {
            return Err(Error::config("sampler segment length differs from the trainer config"));
        }
        if base.num_scalars(Some(LM_GROUP)) == 0 {
            return Err(Error::config("base model parameters are missing"));
        }
        base.freeze_group(LM_GROUP);
        if base.num_scalars(Some(COCON_GROUP)) == 0 {
            base.merge(block::init_params(model.config(), config.seed.wrapping_add(1))?)?;
        }
        if base.num_scalars(Some(DISC_GROUP)) == 0 {
            base.merge(init_discriminator(
                model.config().d_model,
                config.disc_channels,
                config.disc_kernel,
                config.seed.wrapping_add(2),
            )?)?;
        }
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            store: base,
            config,
            sampler,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Draws a batch and runs [`Trainer::train_step`].
    pub fn step(&mut self) -> Result<StepMetrics> {
        let batches = self.sampler.sample_many(self.config.batch_size, &mut self.rng);
        self.train_step(&batches)
    }

    /// One block update on `batches`, plus a discriminator update when the
    /// (1-based) step index is a multiple of the interval.
    pub fn train_step(&mut self, batches: &[TrainingBatch]) -> Result<StepMetrics> {
        if batches.is_empty() {
            return Err(Error::config("empty batch"));
        }
        self.step += 1;
        let step = self.step;
        let cfg = self.config.clone();
        let scale = 1.0 / batches.len() as f64;
        let mut rows: Vec<[Option<f64>; 4]> = Vec::with_capacity(batches.len());
        let mut totals = 0.0;
        let mut detached: Vec<(Tensor, Tensor)> = Vec::new();
        for batch in batches {
            let prepared = prepare(&self.model, &self.store, batch.clone(), &cfg)?;
            let mut tape = Tape::new();
            let obj = objective(&self.model, &mut tape, &self.store, &prepared, &cfg)?;
            let value = |v: Option<Var>| v.map(|v| tape.scalar(v));
            let row = [
                value(obj.l_self),
                value(obj.l_null),
                value(obj.l_cycle),
                value(obj.adv.as_ref().map(|a| a.loss)),
            ];
            for (name, v) in ["l_self", "l_null", "l_cycle", "l_adv"].iter().zip(&row) {
                if v.is_some_and(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        step,
                        component: (*name).into(),
                    });
                }
            }
            totals += tape.scalar(obj.total);
            if let Some(adv) = &obj.adv {
                detached.push((tape.value(adv.real_reps).clone(), tape.value(adv.fake_reps).clone()));
            }
            let scaled = tape.scale(obj.total, scale);
            tape.backward(scaled)?;
            self.store.accumulate_grads(&tape);
            rows.push(row);
        }
        self.store.adam_step_group(&AdamConfig::with_lr(cfg.lr_cocon), Some(COCON_GROUP));
        self.store.zero_grads();

        let disc_acc = if cfg.lambda_adv > 0.0 && step % cfg.disc_update_interval == 0 {
            Some(self.update_discriminator(&detached, step)?)
        } else {
            None
        };
        let col = |k: usize| mean_opt(&rows.iter().map(|r| r[k]).collect::<Vec<_>>());
        Ok(StepMetrics {
            step,
            l_self: col(0),
            l_null: col(1),
            l_cycle: col(2),
            l_adv: col(3),
            disc_acc,
            total: totals * scale,
        })
    }

    /// Minimizes `CE(real, REAL) + CE(fake, FAKE)` on detached representations,
    /// i.e. maximizes the adversarial objective. Returns pre-update accuracy.
    fn update_discriminator(&mut self, pairs: &[(Tensor, Tensor)], step: usize) -> Result<f64> {
        let scale = 1.0 / pairs.len() as f64;
        let mut correct = 0usize;
        for (real, fake) in pairs {
            let mut tape = Tape::new();
            let r = tape.constant(real.clone());
            let f = tape.constant(fake.clone());
            let lr = discriminator_logits(&mut tape, &self.store, r)?;
            let lf = discriminator_logits(&mut tape, &self.store, f)?;
            let lrv = tape.value(lr).data();
            let lfv = tape.value(lf).data();
            correct += usize::from(lrv[REAL] > lrv[FAKE]) + usize::from(lfv[FAKE] > lfv[REAL]);
            let cr = tape.cross_entropy(lr, &[REAL], usize::MAX)?;
            let cf = tape.cross_entropy(lf, &[FAKE], usize::MAX)?;
            let loss = tape.add(cr, cf)?;
            if !tape.scalar(loss).is_finite() {
                return Err(Error::NonFinite {
                    step,
                    component: "discriminator".into(),
                });
            }
            let loss = tape.scale(loss, scale);
            tape.backward(loss)?;
            self.store.accumulate_grads(&tape);
        }
        self.store.adam_step_group(&AdamConfig::with_lr(self.config.lr_disc), Some(DISC_GROUP));
        self.store.zero_grads();
        Ok(correct as f64 / (2 * pairs.len()) as f64)
    }

    /// Runs the configured number of steps, handing each record to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepMetrics)) -> Result<()> {
        while self.step < self.config.steps {
            let m = self.step()?;
            on_step(&m);
        }
        Ok(())
    }
}
