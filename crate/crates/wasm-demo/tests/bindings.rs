use cocon_wasm_demo::{attention_row, content_mass, nucleus, score};

#[test]
fn nucleus_normalizes_its_input_first() {
    let kept = nucleus(vec![5.0, 3.0, 2.0], 0.75).unwrap();
    assert!((kept[0] - 0.625).abs() < 1e-12);
    assert!((kept[1] - 0.375).abs() < 1e-12);
    assert_eq!(kept[2], 0.0);
    assert_eq!(nucleus(vec![0.2, 0.8], 1.0).unwrap(), vec![0.2, 0.8]);
    assert!(nucleus(vec![0.0, 0.0], 0.5).is_err());
    assert!(nucleus(vec![-1.0, 2.0], 0.5).is_err());
    assert!(nucleus(vec![1.0], f64::NAN).is_err());
}

#[test]
fn content_mass_matches_the_closed_form() {
    // zero scores: lc columns at weight e^τ against query+1 visible positions
    for tau in [-6.0, -1.0, 0.0, 0.5, 3.0] {
        for (lens, query, t_len) in [(vec![4u32], 0u32, 5u32), (vec![2, 3], 3, 8), (vec![1, 1, 1], 7, 8)] {
            let lc: u32 = lens.iter().sum();
            let w = lc as f64 * f64::exp(tau);
            let expected = w / (w + (query + 1) as f64);
            let got = content_mass(lens, tau, query, t_len).unwrap();
            assert!((got - expected).abs() < 1e-12, "{tau} {got} {expected}");
        }
    }
}

#[test]
fn attention_row_hides_the_future_and_the_masked_token() {
    let row = attention_row(vec![3, 2], 0.0, 2, 3, 6).unwrap();
    assert_eq!(row.len(), 5 + 6);
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(row[5 + 4..].iter().all(|&w| w == 0.0));
    // query 3 with mask t = 2 bars content-0 column 3 + 1 - 2 = 2
    assert_eq!(row[2], 0.0);
    let open = row[0];
    for (j, &w) in row.iter().enumerate().take(5 + 4) {
        if j != 2 {
            assert!((w - open).abs() < 1e-12);
        }
    }
    assert!(attention_row(vec![1], 0.0, -1, 6, 6).is_err());
}

#[test]
fn score_reports_every_metric() {
    let v: serde_json::Value = serde_json::from_str(&score("the cat sat", "the cat sat").unwrap()).unwrap();
    for key in ["bleu4", "nist4", "meteor", "dist1", "dist2", "dist3"] {
        assert!(v[key].is_number(), "{key}");
    }
    // one chunk over three matches
    assert!((v["meteor"].as_f64().unwrap() - (1.0 - 0.5 / 27.0)).abs() < 1e-12);
    assert_eq!(v["dist1"], 1.0);
    assert!(score("", "the cat").is_err());
}
