use std::collections::BTreeMap;

use cocon::block::{self, CoConModel, COCON_GROUP};
use cocon::corpus::{SegmentSampler, TrainingBatch};
use cocon::corpus::encode_documents;
use cocon::lm::{self, LMConfig, PretrainConfig, LM_GROUP};
use cocon::synthetic;
use cocon::tokenizer::bpe_train;
use cocon::tensor::{ParameterStore, Tape, Tensor};
use cocon::tokenizer::TokenId;
use cocon::trainer::{
    self, cycle_first_pass, init_discriminator, loss_adv, loss_cycle, loss_null, loss_self, objective, prepare,
    AdvSource, Prepared, StepMetrics, Trainer, TrainerConfig, DISC_GROUP,
};
use cocon::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grad_config() -> LMConfig {
    LMConfig {
        n_layers: 2,
        n_alpha: 1,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        vocab_size: 64,
        max_seq_len: 64,
    }
}

fn tiny_trainer_config() -> TrainerConfig {
    TrainerConfig {
        batch_size: 2,
        seg_len: 12,
        break_lo: 4,
        break_hi: 6,
        disc_channels: 8,
        ..TrainerConfig::default()
    }
}

fn full_store(cfg: &LMConfig, seed: u64) -> ParameterStore {
    let mut s = lm::init_params(cfg, seed).unwrap();
    s.merge(block::init_params(cfg, seed + 1).unwrap()).unwrap();
    s.merge(init_discriminator(cfg.d_model, 8, 3, seed + 2).unwrap()).unwrap();
    s.freeze_group(LM_GROUP);
    s
}

fn random_ids(rng: &mut impl Rng, n: usize, vocab: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.gen_range(0..vocab as TokenId)).collect()
}

fn batch(seed: u64, len: usize, t: usize, vocab: usize) -> TrainingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TrainingBatch {
        x: random_ids(&mut rng, len, vocab),
        x_prime: random_ids(&mut rng, len, vocab),
        t,
        doc: 0,
        doc_prime: 1,
    }
}

fn sampler(n_docs: usize, doc_len: usize, vocab: usize, seed: u64, tc: &TrainerConfig) -> SegmentSampler {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs = (0..n_docs).map(|_| random_ids(&mut rng, doc_len, vocab)).collect();
    SegmentSampler::new(docs, tc.seg_len, tc.break_lo, tc.break_hi).unwrap()
}

type LossFn<'a> = dyn Fn(&mut Tape, &ParameterStore) -> Result<cocon::tensor::Var> + 'a;

fn loss_value(f: &LossFn, store: &ParameterStore) -> f64 {
    let mut tape = Tape::inference();
    let v = f(&mut tape, store).unwrap();
    tape.scalar(v)
}

fn analytic(f: &LossFn, store: &ParameterStore) -> BTreeMap<String, Vec<f64>> {
    let mut tape = Tape::new();
    let v = f(&mut tape, store).unwrap();
    tape.backward(v).unwrap();
    tape.param_grads().map(|(p, g)| (p.to_string(), g.to_vec())).collect()
}

/// Central differences at a few random entries of every trainable tensor.
/// Returns the largest relative error, with denominators floored at 1e-6.
fn max_fd_error(f: &LossFn, store: &ParameterStore, seed: u64) -> f64 {
    let h = 1e-5;
    let grads = analytic(f, store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let paths: Vec<String> = store
        .paths()
        .filter(|p| store.is_trainable(p))
        .map(str::to_string)
        .collect();
    assert!(!paths.is_empty());
    for path in paths {
        let n = store.value(&path).unwrap().len();
        for _ in 0..3 {
            let idx = rng.gen_range(0..n);
            let mut s = store.clone();
            let orig = s.value(&path).unwrap().data()[idx];
            s.value_mut(&path).unwrap().data_mut()[idx] = orig + h;
            let up = loss_value(f, &s);
            s.value_mut(&path).unwrap().data_mut()[idx] = orig - h;
            let down = loss_value(f, &s);
            let numeric = (up - down) / (2.0 * h);
            let exact = grads.get(&path).map_or(0.0, |g| g[idx]);
            let err = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn finite_differences_match_every_loss() {
    let cfg = grad_config();
    let model = CoConModel::new(cfg.clone()).unwrap();
    let store = full_store(&cfg, 11);
    let b = batch(3, 12, 5, cfg.vocab_size);
    let y = cycle_first_pass(&model, &store, &b).unwrap();

    let self_loss = |tape: &mut Tape, s: &ParameterStore| loss_self(&model, tape, s, &b, true);
    let null_loss = |tape: &mut Tape, s: &ParameterStore| loss_null(&model, tape, s, &b);
    let cycle_loss = |tape: &mut Tape, s: &ParameterStore| loss_cycle(&model, tape, s, &b, &y);
    let adv_loss = |tape: &mut Tape, s: &ParameterStore| {
        Ok(loss_adv(&model, tape, s, &b.x, b.prime_prompt(), b.continuation(), &y)?.loss)
    };
    let tc = TrainerConfig {
        lambda_self: 0.7,
        lambda_null: 1.3,
        lambda_cycle: 0.5,
        lambda_adv: 2.0,
        ..tiny_trainer_config()
    };
    let prepared = Prepared {
        batch: b.clone(),
        y: Some(y.clone()),
        y_matched: None,
    };
    let total = |tape: &mut Tape, s: &ParameterStore| Ok(objective(&model, tape, s, &prepared, &tc)?.total);

    let cases: [(&str, &LossFn); 5] = [
        ("self", &self_loss),
        ("null", &null_loss),
        ("cycle", &cycle_loss),
        ("adv", &adv_loss),
        ("weighted sum", &total),
    ];
    for (i, (name, f)) in cases.iter().enumerate() {
        let err = max_fd_error(*f, &store, 100 + i as u64);
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn combined_gradient_is_the_weighted_sum() {
    let cfg = grad_config();
    let model = CoConModel::new(cfg.clone()).unwrap();
    let store = full_store(&cfg, 21);
    let b = batch(5, 14, 6, cfg.vocab_size);
    let tc = TrainerConfig {
        lambda_self: 0.7,
        lambda_null: 1.3,
        lambda_cycle: 0.5,
        lambda_adv: 2.0,
        ..tiny_trainer_config()
    };
    let p = prepare(&model, &store, b, &tc).unwrap();
    let combined = analytic(&|tape, s| Ok(objective(&model, tape, s, &p, &tc)?.total), &store);

    let mut summed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let single = |which: usize| TrainerConfig {
        lambda_self: if which == 0 { tc.lambda_self } else { 0.0 },
        lambda_null: if which == 1 { tc.lambda_null } else { 0.0 },
        lambda_cycle: if which == 2 { tc.lambda_cycle } else { 0.0 },
        lambda_adv: if which == 3 { tc.lambda_adv } else { 0.0 },
        ..tc.clone()
    };
    for which in 0..4 {
        let one = single(which);
        let g = analytic(&|tape, s| Ok(objective(&model, tape, s, &p, &one)?.total), &store);
        for (path, grad) in g {
            let acc = summed.entry(path).or_insert_with(|| vec![0.0; grad.len()]);
            for (a, v) in acc.iter_mut().zip(grad) {
                *a += v;
            }
        }
    }
    for (path, g) in &combined {
        let s = &summed[path];
        for (a, b) in g.iter().zip(s) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
            assert!(rel < 1e-9 || (a - b).abs() < 1e-15, "{path}: {a} vs {b}");
        }
    }
}

#[test]
fn initial_self_loss_is_near_uniform() {
    let cfg = grad_config();
    let model = CoConModel::new(cfg.clone()).unwrap();
    let store = full_store(&cfg, 4);
    let ln_v = (cfg.vocab_size as f64).ln();
    for seed in 0..5 {
        let b = batch(seed, 16, 6, cfg.vocab_size);
        let mut tape = Tape::inference();
        let v = loss_self(&model, &mut tape, &store, &b, true).unwrap();
        let l = tape.scalar(v);
        assert!((l - ln_v).abs() < 0.2 * ln_v, "loss {l} vs ln V {ln_v}");
    }
}

#[test]
fn indifferent_discriminator_gives_two_log_half() {
    let cfg = grad_config();
    let model = CoConModel::new(cfg.clone()).unwrap();
    let mut store = full_store(&cfg, 8);
    for path in ["disc/out/w", "disc/out/b"] {
        store.value_mut(path).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let b = batch(9, 12, 5, cfg.vocab_size);
    let y = cycle_first_pass(&model, &store, &b).unwrap();
    let mut tape = Tape::inference();
    let adv = loss_adv(&model, &mut tape, &store, &b.x, b.prime_prompt(), b.continuation(), &y).unwrap();
    assert!((tape.scalar(adv.loss) - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    assert_eq!(tape.value(adv.real_reps).rows(), b.x.len());
    assert_eq!(tape.value(adv.fake_reps).rows(), b.x.len());
}

#[test]
fn short_sequences_are_rejected_by_the_discriminator() {
    let store = init_discriminator(4, 2, 3, 0).unwrap();
    let mut tape = Tape::inference();
    let reps = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(trainer::discriminator_logits(&mut tape, &store, reps).is_err());
    let reps = tape.constant(Tensor::zeros(&[3, 4]));
    let logits = trainer::discriminator_logits(&mut tape, &store, reps).unwrap();
    assert_eq!(tape.shape(logits), &[1, 2]);
}

#[test]
fn first_cycle_pass_has_continuation_length() {
    let cfg = grad_config();
    let model = CoConModel::new(cfg.clone()).unwrap();
    let store = full_store(&cfg, 2);
    let b = batch(1, 13, 5, cfg.vocab_size);
    let y = cycle_first_pass(&model, &store, &b).unwrap();
    assert_eq!(y.len(), b.continuation().len());
    assert_eq!(y, cycle_first_pass(&model, &store, &b).unwrap());

    // with x' = x the first pass continues the sample's own prompt
    let same = TrainingBatch {
        x_prime: b.x.clone(),
        ..b.clone()
    };
    let y_same = cycle_first_pass(&model, &store, &same).unwrap();
    let direct = trainer::greedy_with_content(&model, &store, b.prompt(), b.continuation(), y.len()).unwrap();
    assert_eq!(y_same, direct);
}

fn new_trainer(tc: TrainerConfig, seed: u64) -> Trainer {
    let cfg = grad_config();
    let model = CoConModel::new(cfg.clone()).unwrap();
    let base = lm::init_params(&cfg, seed).unwrap();
    let s = sampler(12, 20, cfg.vocab_size, seed, &tc);
    Trainer::new(model, base, s, tc).unwrap()
}

fn group_snapshot(store: &ParameterStore, group: &str) -> Vec<(String, Vec<f64>)> {
    store
        .iter()
        .filter(|(p, _)| p.starts_with(&format!("{group}/")))
        .map(|(p, param)| (p.to_string(), param.value.data().to_vec()))
        .collect()
}

#[test]
fn base_model_is_untouched_by_training() {
    let mut tr = new_trainer(tiny_trainer_config(), 1);
    let before = group_snapshot(&tr.store, LM_GROUP);
    let cocon_before = group_snapshot(&tr.store, COCON_GROUP);
    for _ in 0..6 {
        tr.step().unwrap();
    }
    assert_eq!(before, group_snapshot(&tr.store, LM_GROUP));
    assert_ne!(cocon_before, group_snapshot(&tr.store, COCON_GROUP));
}

#[test]
fn discriminator_moves_only_on_its_schedule() {
    let mut tr = new_trainer(tiny_trainer_config(), 2);
    let mut prev = group_snapshot(&tr.store, DISC_GROUP);
    for step in 1..=10 {
        let m = tr.step().unwrap();
        let now = group_snapshot(&tr.store, DISC_GROUP);
        let scheduled = step % 5 == 0;
        assert_eq!(now != prev, scheduled, "step {step}");
        assert_eq!(m.disc_acc.is_some(), scheduled, "step {step}");
        if let Some(acc) = m.disc_acc {
            assert!((0.0..=1.0).contains(&acc));
        }
        prev = now;
    }
}

#[test]
fn seeded_training_is_reproducible() {
    let run = |seed| {
        let mut tr = new_trainer(tiny_trainer_config(), seed);
        let metrics: Vec<StepMetrics> = (0..5).map(|_| tr.step().unwrap()).collect();
        (metrics, group_snapshot(&tr.store, COCON_GROUP))
    };
    let (a, sa) = run(3);
    let (b, sb) = run(3);
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    let (c, _) = run(4);
    assert_ne!(a, c);
}

#[test]
fn self_only_training_reports_only_the_self_term() {
    let tc = TrainerConfig {
        lambda_null: 0.0,
        lambda_cycle: 0.0,
        lambda_adv: 0.0,
        ..tiny_trainer_config()
    };
    let mut tr = new_trainer(tc, 5);
    let disc = group_snapshot(&tr.store, DISC_GROUP);
    for _ in 0..5 {
        let m = tr.step().unwrap();
        assert_eq!(m.total, m.l_self.unwrap());
        assert!(m.l_null.is_none() && m.l_cycle.is_none() && m.l_adv.is_none() && m.disc_acc.is_none());
        let line = serde_json::to_value(&m).unwrap();
        assert!(line["l_adv"].is_null() && line["disc_acc"].is_null());
    }
    assert_eq!(disc, group_snapshot(&tr.store, DISC_GROUP));
}

#[test]
fn matched_adversarial_source_trains() {
    let tc = TrainerConfig {
        adv_source: AdvSource::Matched,
        disc_update_interval: 1,
        ..tiny_trainer_config()
    };
    let mut tr = new_trainer(tc, 6);
    let m = tr.step().unwrap();
    assert!(m.l_adv.unwrap().is_finite() && m.disc_acc.is_some());
}

#[test]
fn invalid_trainer_configs_are_rejected() {
    let bad = [
        TrainerConfig {
            lambda_cycle: -1.0,
            ..tiny_trainer_config()
        },
        TrainerConfig {
            disc_update_interval: 0,
            ..tiny_trainer_config()
        },
        TrainerConfig {
            disc_kernel: 13,
            ..tiny_trainer_config()
        },
    ];
    for tc in bad {
        assert!(tc.validate().is_err());
    }
}

#[test]
fn hundred_full_steps_stay_finite() {
    let tc = TrainerConfig {
        lr_cocon: 3e-3,
        lr_disc: 3e-3,
        ..tiny_trainer_config()
    };
    let mut tr = new_trainer(tc, 7);
    for _ in 0..100 {
        let m = tr.step().unwrap();
        for v in [m.l_self, m.l_null, m.l_cycle, m.l_adv].into_iter().flatten() {
            assert!(v.is_finite());
        }
    }
    assert_eq!(tr.steps_done(), 100);
}

/// A small base pretrained on the synthetic corpus; its lower layers carry
/// the previous-token features that copying from the content relies on.
fn pretrained_base() -> (LMConfig, ParameterStore, Vec<Vec<TokenId>>) {
    let docs = synthetic::documents(20, 3);
    let vocab = bpe_train(docs.iter().map(String::as_str), 300).unwrap();
    let enc = encode_documents(&vocab, &docs);
    let cfg = LMConfig {
        n_layers: 2,
        n_alpha: 1,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        vocab_size: vocab.size(),
        max_seq_len: 64,
    };
    let pc = PretrainConfig {
        steps: 800,
        batch_size: 8,
        seq_len: 32,
        lr: 3e-3,
        seed: 0,
        warmup: 20,
    };
    let store = lm::pretrain_base(&enc, &cfg, &pc, |_| {}).unwrap();
    (cfg, store, enc)
}

#[test]
fn self_token_mask_prevents_trivial_copying() {
    let (cfg, base, docs) = pretrained_base();
    let tc = |mask: bool| TrainerConfig {
        lambda_null: 0.0,
        lambda_cycle: 0.0,
        lambda_adv: 0.0,
        self_token_mask: mask,
        lr_cocon: 1e-2,
        batch_size: 8,
        seg_len: 24,
        break_lo: 6,
        break_hi: 10,
        ..TrainerConfig::default()
    };
    let s = SegmentSampler::new(docs, 24, 6, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = s.sample_many(32, &mut rng);
    let trained = |mask: bool| {
        let model = CoConModel::new(cfg.clone()).unwrap();
        let mut tr = Trainer::new(model, base.clone(), s.clone(), tc(mask)).unwrap();
        for _ in 0..200 {
            tr.step().unwrap();
        }
        let mut total = 0.0;
        for b in &eval {
            let mut tape = Tape::inference();
            let v = loss_self(&tr.model, &mut tape, &tr.store, b, mask).unwrap();
            total += tape.scalar(v);
        }
        total / eval.len() as f64
    };
    let masked = trained(true);
    let unmasked = trained(false);
    assert!(masked > unmasked, "masked {masked} vs unmasked {unmasked}");
}
