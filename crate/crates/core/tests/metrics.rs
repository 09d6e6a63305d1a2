use cocon::metrics::{bleu4, corpus_bleu4, dist_n, meteor_lite, nist4, stem, MetricReport};
use cocon::Error;
use proptest::prelude::*;

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[test]
fn bleu_identity_and_disjoint() {
    let s = words("the cat sat on the mat");
    assert_eq!(bleu4(&s, &s).unwrap(), 1.0);
    assert_eq!(bleu4(&words("a b c d e"), &s).unwrap(), 0.0);
}

#[test]
fn bleu_clips_repeated_unigrams() {
    // p1 = min(3, 1) / 3; no candidate bigram "the the" in the reference
    let cand = words("the the the");
    let reference = words("the cat");
    assert_eq!(bleu4(&cand, &reference).unwrap(), 0.0);
}

#[test]
fn bleu_brevity_penalty_by_hand() {
    // candidate = first 4 words of a 6-word reference: all precisions are 1,
    // so the score is the brevity penalty exp(1 - 6/4)
    let reference = words("a b c d e f");
    let cand = words("a b c d");
    let expected = (1.0f64 - 6.0 / 4.0).exp();
    assert!((bleu4(&cand, &reference).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn bleu_rejects_empty_inputs() {
    let empty: Vec<&str> = Vec::new();
    assert!(matches!(bleu4(&words("a"), &empty), Err(Error::EmptyMetricInput(_))));
    assert!(matches!(bleu4(&empty, &words("a")), Err(Error::EmptyMetricInput(_))));
}

#[test]
fn corpus_bleu_pools_counts() {
    let pairs = vec![
        (words("a b c d e"), words("a b c d e")),
        (words("x y z w"), words("x y q w")),
    ];
    // 1-grams: 5+3 of 9; 2-grams: 4+1 of 7; 3-grams: 3+0 of 5; 4-grams: 2+0 of 3
    let p = [8.0 / 9.0, 5.0 / 7.0, 3.0 / 5.0, 2.0 / 3.0f64];
    let expected = (p.iter().map(|v| v.ln()).sum::<f64>() / 4.0).exp();
    assert!((corpus_bleu4(&pairs).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn nist_on_a_three_token_sentence() {
    // unigram info = log2(3 / 1) for each word; longer n-grams carry
    // log2(1 / 1) = 0; no 4-grams exist
    let s = words("a b c");
    let score = nist4(&[(s.clone(), s)]).unwrap();
    assert!((score - 3f64.log2()).abs() < 1e-12);
}

#[test]
fn nist_zero_overlap_and_duplication() {
    assert_eq!(nist4(&[(words("a b"), words("c d"))]).unwrap(), 0.0);
    let one = vec![(words("the cat sat"), words("the cat sat down"))];
    let two = vec![one[0].clone(), one[0].clone()];
    assert!((nist4(&one).unwrap() - nist4(&two).unwrap()).abs() < 1e-12);
}

#[test]
fn nist_brevity_factor_halves_at_two_thirds() {
    // candidate covers 2 of 3 reference words; unigram info log2(3) each,
    // bigram "a b" has info log2(1/1) = 0
    let score = nist4(&[(words("a b"), words("a b c"))]).unwrap();
    assert!((score - 0.5 * 3f64.log2()).abs() < 1e-12);
}

#[test]
fn meteor_closed_forms() {
    let s = words("the quick brown fox");
    let m = s.len() as f64;
    assert!((meteor_lite(&s, &s).unwrap() - (1.0 - 0.5 * (1.0 / m).powi(3))).abs() < 1e-12);
    assert_eq!(meteor_lite(&words("x y"), &words("a b")).unwrap(), 0.0);
    let same = meteor_lite(&words("a b"), &words("a b")).unwrap();
    let swapped = meteor_lite(&words("b a"), &words("a b")).unwrap();
    assert!((same - 0.9375).abs() < 1e-12);
    assert!((swapped - 0.5).abs() < 1e-12);
}

#[test]
fn meteor_stem_stage() {
    assert_eq!(stem("walking"), "walk");
    assert_eq!(stem("is"), "is");
    let exact = meteor_lite(&words("dogs barked"), &words("dogs barked")).unwrap();
    let stemmed = meteor_lite(&words("dog barking"), &words("dogs barked")).unwrap();
    assert!((stemmed - exact).abs() < 1e-12);
}

#[test]
fn dist_examples() {
    assert!((dist_n(&[words("a a a")], 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(dist_n(&[words("a b c d")], 1).unwrap(), 1.0);
    assert_eq!(dist_n(&[words("a b"), words("a b")], 1).unwrap(), 0.5);
    assert!(matches!(dist_n(&[words("a")], 2), Err(Error::EmptyMetricInput(_))));
    assert_eq!(dist_n(&[words("a"), words("a b")], 2).unwrap(), 1.0);
}

#[test]
fn report_json_and_table() {
    let gens = vec!["the cat sat".to_string(), "a dog ran home".to_string()];
    let refs = vec!["the cat sat".to_string(), "a dog ran away".to_string()];
    let r = MetricReport::from_texts("cocon", &gens, &refs, Some(12.5)).unwrap();
    let json = serde_json::to_value(&r).unwrap();
    for key in ["bleu4", "nist4", "meteor", "dist1", "dist2", "dist3", "perplexity", "n_samples"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    let table = MetricReport::table(&[r]);
    assert!(table.lines().next().unwrap().contains("BLEU-4"));
    assert!(table.contains("cocon"));
}

#[test]
fn short_generations_leave_dist_undefined() {
    let gens = vec!["the".to_string(), "a dog".to_string()];
    let refs = vec!["the cat".to_string(), "a dog ran".to_string()];
    let r = MetricReport::from_texts("plain", &gens, &refs, None).unwrap();
    assert_eq!(r.dist1, Some(1.0));
    assert_eq!(r.dist2, Some(1.0));
    assert_eq!(r.dist3, None);
    assert!(serde_json::to_value(&r).unwrap()["dist3"].is_null());
    assert!(MetricReport::table(&[r]).lines().nth(1).unwrap().trim_end().ends_with('-'));
}

fn sentence() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 1..12)
}

proptest! {
    #[test]
    fn bleu_is_bounded_by_unigram_precision(c in sentence(), r in sentence()) {
        let b = bleu4(&c, &r).unwrap();
        let mut hits = 0;
        let mut pool = r.clone();
        for t in &c {
            if let Some(i) = pool.iter().position(|x| x == t) {
                pool.remove(i);
                hits += 1;
            }
        }
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert!(b <= hits as f64 / c.len() as f64 + 1e-12);
    }

    #[test]
    fn corpus_metrics_ignore_pair_order(pairs in prop::collection::vec((sentence(), sentence()), 1..6)) {
        let mut rev = pairs.clone();
        rev.reverse();
        prop_assert!((corpus_bleu4(&pairs).unwrap() - corpus_bleu4(&rev).unwrap()).abs() < 1e-12);
        prop_assert!((nist4(&pairs).unwrap() - nist4(&rev).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn duplicating_samples_never_raises_dist(samples in prop::collection::vec(sentence(), 1..5), n in 1usize..4) {
        if let Ok(d) = dist_n(&samples, n) {
            let doubled: Vec<Vec<u8>> = samples.iter().chain(&samples).cloned().collect();
            prop_assert!(dist_n(&doubled, n).unwrap() <= d + 1e-12);
        }
    }
}
