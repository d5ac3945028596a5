//! Plain-loop oracles and fixtures shared by the integration tests. None of
//! the oracles call into the crate's numeric kernels.

#![allow(dead_code)]

use htenc::masking::AttentionMask;
use htenc::params::ParameterStore;
use htenc::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

pub fn softmax_allowed(scores: &[f64], allowed: &[bool]) -> Vec<f64> {
    let max = scores
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .iter()
        .zip(allowed)
        .map(|(s, &a)| if a { (s - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn mat(store: &ParameterStore, name: &str) -> Vec<Vec<f64>> {
    rows_of(store.value(name).unwrap())
}

fn vecp(store: &ParameterStore, name: &str) -> Vec<f64> {
    store.value(name).unwrap().data().to_vec()
}

fn affine(x: &[Vec<f64>], w: &[Vec<f64>], b: Option<&[f64]>) -> Vec<Vec<f64>> {
    let mut y = matmul(x, w);
    if let Some(b) = b {
        for row in &mut y {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

/// Multi-head attention with the crate's parameter names, written out loop
/// by loop.
pub fn attention(
    store: &ParameterStore,
    prefix: &str,
    heads: usize,
    q_in: &[Vec<f64>],
    kv_in: &[Vec<f64>],
    mask: &AttentionMask,
) -> Vec<Vec<f64>> {
    let p = |s: &str| format!("{prefix}.{s}");
    let q = affine(q_in, &mat(store, &p("wq")), Some(&vecp(store, &p("bq"))));
    let k = affine(kv_in, &mat(store, &p("wk")), None);
    let v = affine(kv_in, &mat(store, &p("wv")), Some(&vecp(store, &p("bv"))));
    let h = q[0].len();
    let dk = h / heads;
    let mut cat = vec![vec![0.0; h]; q.len()];
    for head in 0..heads {
        let cols = head * dk..(head + 1) * dk;
        for i in 0..q.len() {
            let scores: Vec<f64> = (0..k.len())
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let probs = softmax_allowed(&scores, mask.row(i));
            for c in cols.clone() {
                cat[i][c] = (0..k.len()).map(|j| probs[j] * v[j][c]).sum();
            }
        }
    }
    affine(&cat, &mat(store, &p("out.w")), Some(&vecp(store, &p("out.b"))))
}

pub fn ffn(store: &ParameterStore, prefix: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = |s: &str| format!("{prefix}.{s}");
    x.iter()
        .map(|row| {
            let inner = affine(std::slice::from_ref(row), &mat(store, &p("inner.w")), Some(&vecp(store, &p("inner.b"))));
            let act: Vec<f64> = inner[0].iter().map(|v| v.max(0.0)).collect();
            affine(&[act], &mat(store, &p("outer.w")), Some(&vecp(store, &p("outer.b"))))
                .remove(0)
        })
        .collect()
}

pub fn layer_norm(x: &[Vec<f64>], gain: &[f64], bias: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .zip(gain.iter().zip(bias))
                .map(|(v, (g, b))| g * (v - mean) / (var + 1e-5).sqrt() + b)
                .collect()
        })
        .collect()
}

/// Cross entropy as log-sum-exp minus the target logit, averaged over
/// positions whose target is not `ignore`.
pub fn cross_entropy(logits: &[Vec<f64>], targets: &[usize], ignore: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (row, &t) in logits.iter().zip(targets) {
        if t == ignore {
            continue;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        sum += lse - row[t];
        n += 1;
    }
    sum / n as f64
}

/// Same-utterance predicate over an utterance-index vector.
pub fn same_utterance(index: &[usize]) -> Vec<Vec<bool>> {
    index.iter().map(|a| index.iter().map(|b| a == b).collect()).collect()
}

pub fn mask_rows(m: &AttentionMask) -> Vec<Vec<bool>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Post-norm encoder layer built from the loop oracles above.
pub fn encoder_layer(store: &ParameterStore, prefix: &str, heads: usize, x: &[Vec<f64>], mask: &AttentionMask) -> Vec<Vec<f64>> {
    let ln = |name: &str, v: &[Vec<f64>]| {
        layer_norm(v, &vecp(store, &format!("{prefix}.{name}.gain")), &vecp(store, &format!("{prefix}.{name}.bias")))
    };
    let a = attention(store, &format!("{prefix}.attn"), heads, x, x, mask);
    let x1 = ln("ln1", &add(x, &a));
    let f = ffn(store, &format!("{prefix}.ffn"), &x1);
    ln("ln2", &add(&x1, &f))
}

/// `sin(pos / 10000^(2i/d))`, `cos(...)` interleaved.
pub fn sinusoid(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let angle = pos as f64 / 10000f64.powf((c / 2 * 2) as f64 / d as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

pub fn add_positions(x: &[Vec<f64>], positions: &[usize]) -> Vec<Vec<f64>> {
    let pe: Vec<Vec<f64>> = positions.iter().map(|&p| sinusoid(p, x[0].len())).collect();
    add(x, &pe)
}
