//! Reusable measurement suites: each returns the measured quantity so callers
//! can assert their own tolerances.
#![allow(dead_code)]

use std::collections::BTreeMap;

use deltallm_core::graph::Binary;
use deltallm_core::linalg::truncated_svd;
use deltallm_core::model::{forward_graph, Bound, BoundBackbone, Model, ModelConfig, SiteBinding};
use deltallm_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{fd_check, gram_singular_values};

pub const FD_EPS: f64 = 1e-5;

pub fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Worst relative finite-difference error per differentiable op.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    for (name, a_t, b_t) in [
        ("matmul", false, false),
        ("matmul_at", true, false),
        ("matmul_bt", false, true),
        ("matmul_at_bt", true, true),
    ] {
        let a = if a_t { rand_t(&[4, 3], 1) } else { rand_t(&[3, 4], 1) };
        let b = if b_t { rand_t(&[5, 4], 2) } else { rand_t(&[4, 5], 2) };
        let w = rand_t(&[3, 5], 3);
        out.push((name, fd_check(&[a, b], FD_EPS, |g, v| {
            let c = g.matmul_t(v[0], a_t, v[1], b_t).unwrap();
            let wv = g.constant(w.clone());
            let p = g.mul(c, wv).unwrap();
            g.sum(p)
        })));
    }
    for (name, kind) in [("add", Binary::Add), ("sub", Binary::Sub), ("mul", Binary::Mul)] {
        let w = rand_t(&[3, 4], 9);
        out.push((name, fd_check(&[rand_t(&[3, 4], 4), rand_t(&[4], 5)], FD_EPS, |g, v| {
            let c = g.binary(kind, v[0], v[1]).unwrap();
            let wv = g.constant(w.clone());
            let p = g.mul(c, wv).unwrap();
            g.sum(p)
        })));
    }
    let w = rand_t(&[2, 6], 10);
    for name in ["silu", "gelu", "scale", "mean"] {
        out.push((name, fd_check(&[rand_t(&[2, 6], 6)], FD_EPS, |g, v| {
            let y = match name {
                "silu" => g.silu(v[0]),
                "gelu" => g.gelu(v[0]),
                "scale" => g.scale(v[0], -1.7),
                _ => {
                    let sq = g.mul(v[0], v[0]).unwrap();
                    return g.mean(sq);
                }
            };
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv).unwrap();
            g.sum(p)
        })));
    }
    let w = rand_t(&[3, 4], 11);
    out.push(("reshape", fd_check(&[rand_t(&[4, 3], 12)], FD_EPS, |g, v| {
        let r = g.reshape(v[0], &[3, 4]).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(r, wv).unwrap();
        g.sum(p)
    })));
    let w = rand_t(&[4, 3], 13);
    out.push(("embedding", fd_check(&[rand_t(&[5, 3], 14)], FD_EPS, |g, v| {
        let e = g.embedding(v[0], &[4, 0, 4, 2]).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(e, wv).unwrap();
        g.sum(p)
    })));
    let w = rand_t(&[3, 6], 15);
    out.push(("rms_norm", fd_check(&[rand_t(&[3, 6], 16), rand_t(&[6], 17)], FD_EPS, |g, v| {
        let y = g.rms_norm(v[0], v[1], 1e-6).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv).unwrap();
        g.sum(p)
    })));
    let w = rand_t(&[8, 8], 18);
    out.push(("rope", fd_check(&[rand_t(&[8, 8], 19)], FD_EPS, |g, v| {
        let y = g.rope(v[0], 2, 4).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv).unwrap();
        g.sum(p)
    })));
    let w = rand_t(&[8, 8], 20);
    let qkv = [rand_t(&[8, 8], 21), rand_t(&[8, 8], 22), rand_t(&[8, 8], 23)];
    out.push(("causal_attention", fd_check(&qkv, FD_EPS, |g, v| {
        let y = g.causal_attention(v[0], v[1], v[2], 2, 4, 2).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv).unwrap();
        g.sum(p)
    })));
    out.push(("cross_entropy", fd_check(&[rand_t(&[4, 7], 24)], FD_EPS, |g, v| {
        g.cross_entropy(v[0], &[1, 6, 0, 3], Some(0)).unwrap()
    })));
    let teacher = rand_t(&[4, 7], 25);
    out.push(("kl_divergence", fd_check(&[rand_t(&[4, 7], 26)], FD_EPS, |g, v| {
        g.kl_divergence(&teacher, v[0], Some(&[true, false, true, true])).unwrap()
    })));
    let w = rand_t(&[3, 5], 27);
    out.push(("dropout", fd_check(&[rand_t(&[3, 5], 28)], FD_EPS, |g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = g.dropout(v[0], 0.3, &mut rng);
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv).unwrap();
        g.sum(p)
    })));
    out
}

pub fn tiny_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 8,
        n_heads: 2,
        d_ffn: 12,
        vocab_size: 11,
        max_seq_len: 16,
        norm_eps: 1e-6,
        seed: 0,
    }
}

/// Perturbs every tensor so that norms and weights are generic.
pub fn jitter(model: &mut Model, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.tensors_mut() {
        for x in t.data_mut() {
            *x += scale * (rng.random::<f64>() - 0.5);
        }
    }
}

/// Finite-difference error of the cross-entropy loss of a full model with
/// respect to every parameter.
pub fn model_gradient_error(model: &Model, tokens: &[usize], targets: &[usize], batch: usize) -> f64 {
    let cfg = model.config;
    let sites: Vec<_> = model.weights.keys().copied().collect();
    let mut m = model.clone();
    let inputs: Vec<Tensor> = m.tensors_mut().map(|t| t.clone()).collect();
    let l = cfg.n_layers;
    fd_check(&inputs, FD_EPS, |g, v: &[Var]| {
        let backbone = BoundBackbone {
            embedding: v[0],
            attn_norms: v[1..1 + l].to_vec(),
            mlp_norms: v[1 + l..1 + 2 * l].to_vec(),
            final_norm: v[1 + 2 * l],
            output: v[2 + 2 * l],
        };
        let site_vars: BTreeMap<_, _> = sites
            .iter()
            .zip(&v[3 + 2 * l..])
            .map(|(&s, &w)| (s, SiteBinding { weight: w, adapter: None }))
            .collect();
        let bound = Bound { backbone, sites: site_vars };
        let trace = forward_graph(g, &cfg, &bound, tokens, batch, None).unwrap();
        g.cross_entropy(trace.logits, targets, None).unwrap()
    })
}

/// Over `count` random matrices up to 32x48: worst relative deviation of the
/// singular values from the Gram oracle, and of the rank-r residual energy
/// from the tail energy.
pub fn eckart_young(count: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_sv, mut worst_resid) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let m = rng.random_range(2..=32);
        let n = rng.random_range(2..=48);
        let w = Tensor::randn(&[m, n], 1.0, &mut rng);
        let sv = gram_singular_values(&w);
        let r = rng.random_range(1..m.min(n).max(2));
        let svd = truncated_svd(&w, r).unwrap();
        for (a, b) in svd.s.iter().zip(&sv) {
            worst_sv = worst_sv.max((a - b).abs() / sv[0]);
        }
        let resid = w.sub(&svd.reconstruct()).unwrap().frobenius_norm().powi(2);
        let tail: f64 = sv[r..].iter().map(|s| s * s).sum();
        if tail > 0.0 {
            worst_resid = worst_resid.max((resid - tail).abs() / tail);
        }
    }
    (worst_sv, worst_resid)
}
