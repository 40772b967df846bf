//! Brute-force reference forward pass: no caches, f64 throughout, written
//! against the parameter tensors directly.

#![allow(dead_code)]

use guided_decode::model::{LayerParams, ModelParams};
use guided_decode::tensor::Matrix;
use guided_decode::SplitMix64;

const EPS: f64 = 1e-5;

fn mat_t(x: &[f64], m: &Matrix) -> Vec<f64> {
    (0..m.cols())
        .map(|c| (0..m.rows()).map(|r| x[r] * m.get(r, c) as f64).sum())
        .collect()
}

fn ln(x: &[f64], gain: &[f32], bias: &[f32]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (&g, &b))| (v - mean) / (var + EPS).sqrt() * g as f64 + b as f64)
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn mlp(layer: &LayerParams, h: &[f64]) -> Vec<f64> {
    let a = ln(h, &layer.ln2_gain, &layer.ln2_bias);
    let hidden: Vec<f64> = mat_t(&a, &layer.w1)
        .iter()
        .zip(&layer.b1)
        .map(|(x, &b)| gelu(x + b as f64))
        .collect();
    mat_t(&hidden, &layer.w2)
        .iter()
        .zip(&layer.b2)
        .map(|(x, &b)| x + b as f64)
        .collect()
}

/// Multi-head attention of `q` over explicit key/value rows.
fn attention(params: &ModelParams, q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let d = params.config.d_model;
    let dh = params.config.d_head();
    let mut out = vec![0.0; d];
    for head in 0..params.config.n_heads {
        let r = head * dh..(head + 1) * dh;
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| r.clone().map(|i| q[i] * k[i]).sum::<f64>() / (dh as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for (p, v) in e.iter().zip(values) {
            for i in r.clone() {
                out[i] += p / z * v[i];
            }
        }
    }
    out
}

fn embed(params: &ModelParams, token: u32, pos: usize) -> Vec<f64> {
    params
        .token_embedding
        .row(token as usize)
        .iter()
        .zip(params.position_embedding.row(pos))
        .map(|(&a, &b)| a as f64 + b as f64)
        .collect()
}

fn unembed(params: &ModelParams, h: &[f64]) -> Vec<f64> {
    mat_t(&ln(h, &params.final_gain, &params.final_bias), &params.unembedding)
}

/// Per-layer keys and values of every position, from a full causal pass,
/// plus the final hidden state of every position.
pub struct FullPass {
    pub keys: Vec<Vec<Vec<f64>>>,
    pub values: Vec<Vec<Vec<f64>>>,
    pub hidden: Vec<Vec<f64>>,
}

pub fn full_pass(params: &ModelParams, tokens: &[u32]) -> FullPass {
    let mut h: Vec<Vec<f64>> = tokens.iter().enumerate().map(|(p, &t)| embed(params, t, p)).collect();
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for layer in &params.layers {
        let a: Vec<Vec<f64>> = h.iter().map(|x| ln(x, &layer.ln1_gain, &layer.ln1_bias)).collect();
        let q: Vec<Vec<f64>> = a.iter().map(|x| mat_t(x, &layer.wq)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|x| mat_t(x, &layer.wk)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|x| mat_t(x, &layer.wv)).collect();
        for p in 0..h.len() {
            let att = attention(params, &q[p], &k[..=p], &v[..=p]);
            let proj = mat_t(&att, &layer.wo);
            h[p].iter_mut().zip(&proj).for_each(|(x, y)| *x += y);
            let m = mlp(layer, &h[p]);
            h[p].iter_mut().zip(&m).for_each(|(x, y)| *x += y);
        }
        keys.push(k);
        values.push(v);
    }
    FullPass {
        keys,
        values,
        hidden: h,
    }
}

/// Next-token logits after the whole of `tokens`.
pub fn reference_logits(params: &ModelParams, tokens: &[u32]) -> Vec<f64> {
    let pass = full_pass(params, tokens);
    unembed(params, pass.hidden.last().expect("nonempty"))
}

/// Logits for the last token of `tokens` when every value at position
/// `i + 1` is multiplied by `scale[i]` (so `scale.len() == tokens.len() - 1`).
/// Earlier positions keep their unscaled keys and values; the last position
/// runs its own stream through all layers with the scaled values.
pub fn reference_logits_scaled(params: &ModelParams, tokens: &[u32], scale: &[f64]) -> Vec<f64> {
    let n = tokens.len();
    assert_eq!(scale.len(), n - 1);
    let history = full_pass(params, &tokens[..n - 1]);
    let factor = |p: usize| if p == 0 { 1.0 } else { scale[p - 1] };
    let mut h = embed(params, tokens[n - 1], n - 1);
    for (l, layer) in params.layers.iter().enumerate() {
        let a = ln(&h, &layer.ln1_gain, &layer.ln1_bias);
        let q = mat_t(&a, &layer.wq);
        let mut keys = history.keys[l].clone();
        keys.push(mat_t(&a, &layer.wk));
        let mut values = history.values[l].clone();
        values.push(mat_t(&a, &layer.wv));
        for (p, v) in values.iter_mut().enumerate() {
            let f = factor(p);
            v.iter_mut().for_each(|x| *x *= f);
        }
        let att = attention(params, &q, &keys, &values);
        let proj = mat_t(&att, &layer.wo);
        h.iter_mut().zip(&proj).for_each(|(x, y)| *x += y);
        let m = mlp(layer, &h);
        h.iter_mut().zip(&m).for_each(|(x, y)| *x += y);
    }
    unembed(params, &h)
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

/// `n` image tokens drawn uniformly.
pub fn random_image_tokens(rng: &mut SplitMix64, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| (rng.next_u64() % vocab as u64) as u32).collect()
}
