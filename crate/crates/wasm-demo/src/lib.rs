//! Browser bindings for three small pieces of the model: the nucleus filter,
//! the content-attention bias and the text metrics.

use cocon::block::attention_bias;
use cocon::generator::nucleus_filter;
use cocon::metrics::MetricReport;
use cocon::tensor::kernels::softmax_row;
use wasm_bindgen::prelude::*;

/// Filtered and renormalized copy of `probs`.
#[wasm_bindgen]
pub fn nucleus(probs: Vec<f64>, top_p: f64) -> Result<Vec<f64>, String> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err("probabilities must be finite and non-negative".into());
    }
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return Err("probabilities sum to zero".into());
    }
    if !(top_p > 0.0) {
        return Err("top_p must be positive".into());
    }
    let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
    Ok(nucleus_filter(&probs, top_p))
}

/// Attention weights of one query row when every raw score is zero, so only
/// τ, the self-token mask and causality shape the distribution. The first
/// `sum(content_lens)` entries are content columns, the rest are the `t_len`
/// sequence positions. `mask_t < 0` disables the self-token mask.
#[wasm_bindgen]
pub fn attention_row(content_lens: Vec<u32>, tau: f64, mask_t: i32, query: u32, t_len: u32) -> Result<Vec<f64>, String> {
    if query >= t_len {
        return Err(format!("query {query} is outside a sequence of {t_len}"));
    }
    let lens: Vec<usize> = content_lens.iter().map(|&l| l as usize).collect();
    let mask = usize::try_from(mask_t).ok();
    let bias = attention_bias(&lens, tau, mask, query as usize, query as usize + 1);
    let mut row = bias.data().to_vec();
    row.resize(lens.iter().sum::<usize>() + t_len as usize, cocon::attention::MASK);
    softmax_row(&mut row);
    Ok(row)
}

/// Total weight the row puts on content columns.
#[wasm_bindgen]
pub fn content_mass(content_lens: Vec<u32>, tau: f64, query: u32, t_len: u32) -> Result<f64, String> {
    let lc: u32 = content_lens.iter().sum();
    let row = attention_row(content_lens, tau, -1, query, t_len)?;
    Ok(row[..lc as usize].iter().sum())
}

/// BLEU-4, NIST-4, METEOR and Dist-n of one generation against one reference,
/// as JSON.
#[wasm_bindgen]
pub fn score(generation: &str, reference: &str) -> Result<String, String> {
    let report = MetricReport::from_texts("demo", &[generation.to_string()], &[reference.to_string()], None)
        .map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}
