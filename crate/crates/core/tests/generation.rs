use cocon::block::{self, CoConModel};
use cocon::generator::{generate, generate_multi, nucleus_filter, self_generate_corpus, GenerationRequest, Mode};
use cocon::lm::{self, LMConfig};
use cocon::tensor::{ParameterStore, Tape};
use cocon::tokenizer::Vocab;
use cocon::Error;
use proptest::prelude::*;

struct Fixture {
    model: CoConModel,
    store: ParameterStore,
    vocab: Vocab,
}

fn fixture() -> Fixture {
    let vocab = Vocab::bytes_only();
    let cfg = LMConfig {
        n_layers: 2,
        n_alpha: 1,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab.size(),
        max_seq_len: 64,
    };
    let mut store = lm::init_params(&cfg, 5).unwrap();
    store.merge(block::init_params(&cfg, 6).unwrap()).unwrap();
    // larger block weights so that contents visibly move the output
    for (path, _) in store.clone().iter() {
        if path.starts_with("cocon/") && path.contains("/w") {
            store.value_mut(path).unwrap().data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
    }
    Fixture {
        model: CoConModel::new(cfg).unwrap(),
        store,
        vocab,
    }
}

fn request(prompt: &str, contents: &[&str], tau: f64, seed: u64) -> GenerationRequest {
    GenerationRequest {
        contents: contents.iter().map(|c| c.to_string()).collect(),
        tau,
        seed: Some(seed),
        max_new_tokens: 12,
        n_samples: 2,
        ..GenerationRequest::new(prompt)
    }
}

#[test]
fn seeded_generation_is_reproducible() {
    let f = fixture();
    let req = request("the cat", &["a dog"], 0.0, 42);
    let a = generate(&req, &f.model, &f.store, &f.vocab).unwrap();
    let b = generate(&req, &f.model, &f.store, &f.vocab).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.seed, 42);
    let c = generate(&request("the cat", &["a dog"], 0.0, 43), &f.model, &f.store, &f.vocab).unwrap();
    assert_ne!(a.samples, c.samples);
}

#[test]
fn samples_extend_the_prompt() {
    let f = fixture();
    let res = generate(&request("hello", &["world"], 0.0, 1), &f.model, &f.store, &f.vocab).unwrap();
    assert_eq!(res.samples.len(), 2);
    let prompt_ids = f.vocab.encode("hello");
    for s in &res.samples {
        assert_eq!(&s.tokens[..s.prompt_len], prompt_ids.as_slice());
        assert_eq!(s.logprobs.len(), s.tokens.len() - s.prompt_len);
        assert!(!s.logprobs.is_empty() && s.logprobs.len() <= 12);
        assert!(s.logprobs.iter().all(|l| l.is_finite() && *l <= 0.0));
        assert!(s.text.starts_with("hello"));
    }
}

#[test]
fn unseeded_requests_report_their_seed() {
    let f = fixture();
    let req = GenerationRequest {
        seed: None,
        ..request("hi", &[], 0.0, 0)
    };
    let res = generate(&req, &f.model, &f.store, &f.vocab).unwrap();
    let replay = GenerationRequest {
        seed: Some(res.seed),
        ..req
    };
    assert_eq!(generate(&replay, &f.model, &f.store, &f.vocab).unwrap().samples, res.samples);
}

#[test]
fn masked_contents_do_not_matter() {
    let f = fixture();
    let a = generate(&request("once upon", &["red fox"], -1e9, 9), &f.model, &f.store, &f.vocab).unwrap();
    let b = generate(&request("once upon", &["big owl"], -1e9, 9), &f.model, &f.store, &f.vocab).unwrap();
    assert_eq!(a.samples, b.samples);
    let c = generate(&request("once upon", &["red fox"], 0.0, 9), &f.model, &f.store, &f.vocab).unwrap();
    let d = generate(&request("once upon", &["big owl"], 0.0, 9), &f.model, &f.store, &f.vocab).unwrap();
    assert_ne!(c.samples, d.samples);
}

#[test]
fn plain_mode_ignores_contents() {
    let f = fixture();
    let plain = |content: &str| GenerationRequest {
        mode: Mode::Plain,
        ..request("abc", &[content], 0.0, 3)
    };
    let a = generate(&plain("x"), &f.model, &f.store, &f.vocab).unwrap();
    let b = generate(&plain("yyy"), &f.model, &f.store, &f.vocab).unwrap();
    assert_eq!(a.samples, b.samples);
}

#[test]
fn several_contents_share_one_path() {
    let f = fixture();
    let req = request("we", &["sun", "moon", "stars"], 0.5, 4);
    let multi = generate_multi(&req, &f.model, &f.store, &f.vocab).unwrap();
    let single = generate(&req, &f.model, &f.store, &f.vocab).unwrap();
    assert_eq!(multi.samples, single.samples);
    assert!(generate_multi(&request("we", &["sun"], 0.0, 4), &f.model, &f.store, &f.vocab).is_err());
}

#[test]
fn logprobs_match_the_full_distribution_without_nucleus() {
    let f = fixture();
    let req = GenerationRequest {
        top_p: 1.0,
        mode: Mode::Plain,
        n_samples: 1,
        ..request("xy", &[], 0.0, 8)
    };
    let s = &generate(&req, &f.model, &f.store, &f.vocab).unwrap().samples[0];
    let v = f.vocab.size();
    let mut tape = Tape::inference();
    let logits = f.model.lm.forward(&mut tape, &f.store, &s.tokens).unwrap();
    let data = tape.value(logits).data();
    for (k, &lp) in s.logprobs.iter().enumerate() {
        let row = &data[(s.prompt_len - 1 + k) * v..(s.prompt_len + k) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let tok = s.tokens[s.prompt_len + k] as usize;
        assert!((lp - (row[tok] - lse)).abs() < 1e-9);
    }
}

#[test]
fn invalid_requests_are_rejected() {
    let f = fixture();
    let base = request("ok", &["c"], 0.0, 1);
    let cases = [
        ("top_p", GenerationRequest { top_p: 0.0, ..base.clone() }),
        ("top_p", GenerationRequest { top_p: 1.5, ..base.clone() }),
        ("prompt", GenerationRequest { prompt: String::new(), ..base.clone() }),
        ("max_new_tokens", GenerationRequest { max_new_tokens: 0, ..base.clone() }),
        ("n_samples", GenerationRequest { n_samples: 0, ..base.clone() }),
        ("tau", GenerationRequest { tau: f64::NAN, ..base.clone() }),
        ("contents", GenerationRequest { contents: vec![String::new()], ..base.clone() }),
    ];
    for (field, req) in cases {
        assert_eq!(req.validate().unwrap_err().0, field);
        assert!(generate(&req, &f.model, &f.store, &f.vocab).is_err());
    }
    let long = GenerationRequest {
        max_new_tokens: 100,
        ..base
    };
    assert!(matches!(
        generate(&long, &f.model, &f.store, &f.vocab),
        Err(Error::ContextOverflow { .. })
    ));
}

#[test]
fn request_defaults_fill_missing_fields() {
    let req: GenerationRequest = serde_json::from_str(r#"{"prompt": "hi"}"#).unwrap();
    assert_eq!(req, GenerationRequest::new("hi"));
    let plain: GenerationRequest = serde_json::from_str(r#"{"prompt": "hi", "mode": "plain"}"#).unwrap();
    assert_eq!(plain.mode, Mode::Plain);
}

#[test]
fn self_generated_corpus_is_seeded() {
    let f = fixture();
    let a = self_generate_corpus(&f.model, &f.store, &f.vocab, 3, 10, 0.9, 7).unwrap();
    let b = self_generate_corpus(&f.model, &f.store, &f.vocab, 3, 10, 0.9, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
}

proptest! {
    #[test]
    fn nucleus_output_is_a_distribution(raw in prop::collection::vec(0.0f64..1.0, 2..20), top_p in 0.01f64..1.0) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-6);
        let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let out = nucleus_filter(&probs, top_p);
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let kept: f64 = probs.iter().zip(&out).filter(|(_, o)| **o > 0.0).map(|(p, _)| p).sum();
        prop_assert!(kept >= top_p - 1e-12);
        // every kept token is at least as likely as every dropped one
        let min_kept = probs.iter().zip(&out).filter(|(_, o)| **o > 0.0).map(|(p, _)| *p).fold(1.0, f64::min);
        let max_dropped = probs.iter().zip(&out).filter(|(_, o)| **o == 0.0).map(|(p, _)| *p).fold(0.0, f64::max);
        prop_assert!(min_kept >= max_dropped);
    }
}
