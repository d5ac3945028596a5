//! Numeric kernels against plain-loop oracles.

mod common;

use common::*;
use htenc::autograd::Tape;
use htenc::masking::{build_layout, build_ut_mask, AttentionMask};
use htenc::nn::{Attention, FeedForward};
use htenc::params::ParameterStore;
use htenc::tensor::Tensor;

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let (a, b) = (random_rows(&mut r, 5, 4), random_rows(&mut r, 4, 3));
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(tensor(&a)).unwrap(), tape.constant(tensor(&b)).unwrap());
    let c = tape.matmul(va, vb).unwrap();
    assert!(max_diff(&rows_of(tape.value(c)), &matmul(&a, &b)) < 1e-12);
    let small = tensor(&[vec![1.0, 2.0], vec![3.0, 4.0]]).matmul(&tensor(&[vec![1.0], vec![1.0]])).unwrap();
    assert_eq!(small.data(), &[3.0, 7.0]);
}

#[test]
fn masked_softmax_matches_per_block_softmax() {
    let mut r = rng(2);
    let scores = random_rows(&mut r, 4, 4);
    let mask = build_ut_mask(&build_layout(&[2, 2]).unwrap());
    let mut tape = Tape::new();
    let s = tape.constant(tensor(&scores)).unwrap();
    let p = tape.masked_softmax(s, &mask).unwrap();
    let got = rows_of(tape.value(p));
    let want: Vec<Vec<f64>> = (0..4).map(|i| softmax_allowed(&scores[i], mask.row(i))).collect();
    assert!(max_diff(&got, &want) < 1e-12);
    for (i, row) in got.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            assert_eq!(p == 0.0, !mask.get(i, j));
        }
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn ln(x: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let h = x[0].len();
    let mut tape = Tape::new();
    let v = tape.constant(tensor(&x)).unwrap();
    let g = tape.constant(Tensor::full(&[h], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(&[h])).unwrap();
    let y = tape.layer_norm(v, g, b).unwrap();
    rows_of(tape.value(y))
}

#[test]
fn layer_norm_cases() {
    assert_eq!(ln(vec![vec![2.5; 4]]), vec![vec![0.0; 4]]);
    let y = ln(vec![vec![1.0, -1.0]]);
    assert!(y[0][0] < 1.0 && y[0][0] > 0.9999 && (y[0][0] + y[0][1]).abs() < 1e-15);
    let x = random_rows(&mut rng(3), 3, 8);
    let y = ln(x.clone());
    for row in &y {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-4);
    }
    assert!(max_diff(&y, &layer_norm(&x, &[1.0; 8], &[0.0; 8])) < 1e-12);
}

fn attention_store(h: usize, seed: u64) -> ParameterStore {
    let mut store = ParameterStore::new();
    Attention::init(&mut store, "a", h, &mut rng(seed)).unwrap();
    store
}

fn run_attention(store: &ParameterStore, heads: usize, x: &[Vec<f64>], mask: &AttentionMask) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let v = tape.constant(tensor(x)).unwrap();
    let a = Attention::load(&mut tape, store, "a", heads).unwrap();
    let y = a.forward(&mut tape, v, v, v, mask).unwrap();
    rows_of(tape.value(y))
}

#[test]
fn attention_matches_loop_oracle() {
    let store = attention_store(8, 4);
    let x = random_rows(&mut rng(5), 5, 8);
    let mask = AttentionMask::from_fn(5, 5, |i, j| (i + j) % 3 != 1 || i == j);
    let got = run_attention(&store, 2, &x, &mask);
    assert!(max_diff(&got, &attention(&store, "a", 2, &x, &x, &mask)) < 1e-12);
}

#[test]
fn attention_hand_case() {
    // One head, H = 2, identity projections, zero biases: q = k = v = x.
    let mut store = ParameterStore::new();
    for w in ["a.wq", "a.wk", "a.wv", "a.out.w"] {
        store.insert(w, Tensor::eye(2)).unwrap();
    }
    for b in ["a.bq", "a.bv", "a.out.b"] {
        store.insert(b, Tensor::zeros(&[2])).unwrap();
    }
    let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let got = run_attention(&store, 1, &x, &AttentionMask::ones(2, 2));
    // Scores are diag 1/sqrt(2), off-diagonal 0.
    let e = (1.0f64 / 2f64.sqrt()).exp();
    let (p, q) = (e / (e + 1.0), 1.0 / (e + 1.0));
    assert!(max_diff(&got, &[vec![p, q], vec![q, p]]) < 1e-15);
}

#[test]
fn identity_mask_projects_own_value() {
    let store = attention_store(4, 6);
    let x = random_rows(&mut rng(7), 3, 4);
    let got = run_attention(&store, 2, &x, &AttentionMask::identity(3));
    for (i, row) in x.iter().enumerate() {
        let alone = run_attention(&store, 2, std::slice::from_ref(row), &AttentionMask::ones(1, 1));
        assert!(max_diff(&[got[i].clone()], &alone) < 1e-15);
    }
}

#[test]
fn block_diagonal_attention_equals_blocks_alone() {
    let store = attention_store(8, 8);
    let x = random_rows(&mut rng(9), 5, 8);
    let layout = build_layout(&[3, 2]).unwrap();
    let got = run_attention(&store, 4, &x, &build_ut_mask(&layout));
    for u in 0..2 {
        let span = layout.span(u);
        let alone = run_attention(&store, 4, &x[span.clone()], &AttentionMask::ones(span.len(), span.len()));
        assert!(max_diff(&got[span], &alone) < 1e-12);
    }
}

fn run_ffn(store: &ParameterStore, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let v = tape.constant(tensor(x)).unwrap();
    let f = FeedForward::load(&mut tape, store, "f").unwrap();
    let y = f.forward(&mut tape, v).unwrap();
    rows_of(tape.value(y))
}

#[test]
fn ffn_matches_per_position_loop() {
    let mut store = ParameterStore::new();
    FeedForward::init(&mut store, "f", 6, 10, &mut rng(10)).unwrap();
    let x = random_rows(&mut rng(11), 4, 6);
    assert!(max_diff(&run_ffn(&store, &x), &ffn(&store, "f", &x)) < 1e-12);
    let same = vec![x[0].clone(); 3];
    let y = run_ffn(&store, &same);
    assert!(y.iter().all(|r| r == &run_ffn(&store, &x[..1])[0]));
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    let logits = random_rows(&mut rng(12), 6, 5);
    let targets = [0, 4, 2, 0, 3, 1];
    let mut tape = Tape::new();
    let l = tape.constant(tensor(&logits)).unwrap();
    let loss = tape.cross_entropy(l, &targets, 0).unwrap();
    assert!((tape.value(loss).item() - cross_entropy(&logits, &targets, 0)).abs() < 1e-10);
}
