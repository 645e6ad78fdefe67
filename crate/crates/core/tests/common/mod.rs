//! Direct-formula oracles on plain `f64` slices, plus small shared fixtures.
#![allow(dead_code)]

use matrn_core::config::{ModelConfig, Stage};
use matrn_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Row-stochastic `[rows, cols]` matrix.
pub fn random_stochastic(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| r.random_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::from_vec(&[rows, cols], data).unwrap()
}

/// `a: [m, k]`, `b: [k, n]`, triple loop.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        out.extend(row.iter().map(|v| v.exp() / denom));
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Attention map: `softmax(q kᵀ / √d)`, `q: [t, d]`, `k: [n, d]`.
pub fn attention_map(q: &[f64], k: &[f64], t: usize, n: usize, d: usize) -> Vec<f64> {
    let mut logits = vec![0.0; t * n];
    for i in 0..t {
        for j in 0..n {
            let dot: f64 = (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum();
            logits[i * n + j] = dot / (d as f64).sqrt();
        }
    }
    softmax_rows(&logits, n)
}

/// Seed prediction `softmax(A V W)`, `a: [t, n]`, `v: [n, d]`, `w: [d, c]`.
pub fn seed_prediction(a: &[f64], v: &[f64], w: &[f64], t: usize, n: usize, d: usize, c: usize) -> Vec<f64> {
    let e = matmul(a, v, t, n, d);
    softmax_rows(&matmul(&e, w, t, d, c), c)
}

/// Aligned position `A P` and aligned semantics `S + A P`.
pub fn spatial_alignment(s: &[f64], a: &[f64], p: &[f64], t: usize, n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let pa = matmul(a, p, t, n, d);
    let sa = s.iter().zip(&pa).map(|(x, y)| x + y).collect();
    (pa, sa)
}

/// Gate `σ([E; S] W)` and fused `G ⊙ E + (1 − G) ⊙ S`; `w: [2d, d]`.
pub fn gated_fusion(e: &[f64], s: &[f64], w: &[f64], t: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut g = vec![0.0; t * d];
    for i in 0..t {
        for j in 0..d {
            let mut acc = 0.0;
            for p in 0..d {
                acc += e[i * d + p] * w[p * d + j];
                acc += s[i * d + p] * w[(d + p) * d + j];
            }
            g[i * d + j] = sigmoid(acc);
        }
    }
    let f = (0..t * d).map(|x| g[x] * e[x] + (1.0 - g[x]) * s[x]).collect();
    (g, f)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Tiny but complete model: 8×16 input, D=8, T=4.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        img_h: 8,
        img_w: 16,
        channels: 1,
        d_model: 8,
        heads: 2,
        ffn: 16,
        max_len: 4,
        iterations: 2,
        stem: 4,
        backbone: vec![Stage { width: 4, stride: 2 }, Stage { width: 8, stride: 2 }],
        vm_blocks: 1,
        lm_blocks: 1,
        fe_blocks: 1,
        unet_channels: 4,
        ..ModelConfig::desk()
    }
}
