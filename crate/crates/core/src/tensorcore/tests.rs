use super::*;
use crate::rng;
use rand::Rng;

fn random_graph_input(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, "tensorcore/tests");
    (0..n).map(|_| r.random_range(-2.0..2.0)).collect()
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::eval();
    let x = g.constant(5, 7, random_graph_input(1, 35));
    let y = g.softmax_rows(x);
    for row in g.value(y).chunks(7) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
    }
}

#[test]
fn masked_softmax_zeroes_invalid_columns() {
    let mut g = Graph::eval();
    let x = g.constant(2, 4, random_graph_input(2, 8));
    let mask = [true, false, true, false];
    let y = g.softmax_rows_masked(x, Some(&mask));
    for row in g.value(y).chunks(4) {
        assert_eq!(row[1], 0.0);
        assert_eq!(row[3], 0.0);
        assert!((row[0] + row[2] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_normalizes_rows() {
    let mut g = Graph::eval();
    let x = g.constant(4, 16, random_graph_input(3, 64));
    let gamma = g.constant(1, 16, vec![1.0; 16]);
    let beta = g.constant(1, 16, vec![0.0; 16]);
    let y = g.layer_norm(x, gamma, beta);
    for row in g.value(y).chunks(16) {
        let mu: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
        assert!(mu.abs() < 1e-10, "row mean {mu}");
        assert!((var - 1.0).abs() < 1e-8, "row var {var}");
    }
}

#[test]
fn matmul_matches_reference() {
    let mut g = Graph::eval();
    let a = g.constant(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let b = g.constant(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
    let c = g.matmul(a, b);
    assert_eq!(g.value(c), &[58.0, 64.0, 139.0, 154.0]);
    // a @ b == a @ transpose(transpose(b))
    let bt = g.constant(2, 3, vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]);
    let c2 = g.matmul_nt(a, bt);
    assert_eq!(g.value(c), g.value(c2));
}

#[test]
fn embedding_lookup_gathers_rows() {
    let mut g = Graph::eval();
    let table = g.constant(3, 2, vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
    let e = g.embedding_lookup(table, &[2, 0]);
    assert_eq!(g.value(e), &[20.0, 21.0, 0.0, 1.0]);
}

#[test]
fn attention_output_shape_is_query_rows_by_width() {
    let mut g = Graph::eval();
    let q = g.constant(5, 8, random_graph_input(4, 40));
    let k = g.constant(5, 8, random_graph_input(5, 40));
    let v = g.constant(5, 8, random_graph_input(6, 40));
    let out = g.multi_head_attention(q, k, v, 4, None);
    assert_eq!(g.shape(out), (5, 8));
}

#[test]
fn shared_leaf_accumulates_gradient_from_both_uses() {
    // loss = sum(x) + sum(2*x) => dx = 3 everywhere.
    let mut g = Graph::eval();
    let x = g.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0], true);
    let a = g.sum_all(x);
    let sx = g.scale(x, 2.0);
    let b = g.sum_all(sx);
    let loss = g.add(a, b);
    g.backward(loss);
    assert_eq!(g.grad(x), &[3.0, 3.0, 3.0, 3.0]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut g = Graph::train(rng::stream(9, "det"));
        let x = g.leaf(4, 8, random_graph_input(7, 32), true);
        let d = g.dropout(x, 0.2);
        let y = g.softmax_rows(d);
        let l = g.sum_all(y);
        g.value(l)[0].to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn cross_entropy_matches_closed_form() {
    let mut g = Graph::eval();
    let logits = g.constant(1, 3, vec![0.0, 0.0, 0.0]);
    let l = g.cross_entropy(logits, 1);
    assert!((g.value(l)[0] - 3.0f64.ln()).abs() < 1e-12);
}

#[test]
#[should_panic(expected = "matmul: dimension mismatch")]
fn matmul_shape_mismatch_names_the_primitive() {
    let mut g = Graph::eval();
    let a = g.constant(2, 3, vec![0.0; 6]);
    let b = g.constant(2, 3, vec![0.0; 6]);
    g.matmul(a, b);
}

#[test]
#[should_panic(expected = "multi_head_attention: width 6 not divisible by 4 heads")]
fn attention_head_mismatch_panics() {
    let mut g = Graph::eval();
    let q = g.constant(2, 6, vec![0.0; 12]);
    g.multi_head_attention(q, q, q, 4, None);
}

#[test]
fn finite_check_flags_nan() {
    let mut g = Graph::eval();
    g.constant(1, 2, vec![1.0, f64::NAN]);
    assert!(g.assert_all_finite().is_err());
}

#[test]
fn positional_encoding_only_touches_requested_rows() {
    let mut g = Graph::eval();
    let x = g.constant(3, 4, vec![0.0; 12]);
    let y = g.positional_encoding_add(x, 1, 1, 5);
    let v = g.value(y);
    assert_eq!(&v[0..4], &[0.0; 4]);
    assert_eq!(&v[8..12], &[0.0; 4]);
    let pos = 5.0f64;
    assert!((v[4] - pos.sin()).abs() < 1e-15);
    assert!((v[5] - pos.cos()).abs() < 1e-15);
}
