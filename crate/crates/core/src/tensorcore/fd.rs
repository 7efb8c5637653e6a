//! Finite-difference gradient checking.
//!
//! Central differences at `h = 1e-5` in f64 give ~1e-10 absolute error, four
//! orders below the 1e-4 acceptance tolerance for primitives. The battery in
//! [`primitive_battery`] drives every graph primitive on random instances and
//! is used both by unit tests and by the `gradcheck` CLI subcommand.

use rand::Rng;

use super::{Graph, TensorRef};
use crate::rng;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Relative-error tolerance for the composed end-to-end model.
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} max rel err {:.3e} (tol {:.1e})",
            if self.pass { "ok  " } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance
        )
    }
}

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Central finite difference of `f` at `x`, one coordinate at a time.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Compare supplied analytic gradients against central differences of `f`.
pub fn check_gradients(
    name: &str,
    x0: &[f64],
    h: f64,
    tol: f64,
    mut f: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
) -> FdReport {
    assert_eq!(x0.len(), analytic.len(), "check_gradients: length mismatch");
    let numeric = central_difference(&mut f, x0, h);
    let max_rel_err = analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max);
    FdReport { name: name.to_string(), max_rel_err, tolerance: tol, pass: max_rel_err < tol }
}

/// Inputs for a graph-builder check: shapes plus initial values.
pub type CaseInputs = Vec<((usize, usize), Vec<f64>)>;

/// Check all inputs of a graph-built scalar against finite differences.
///
/// `build` must be deterministic given the graph (dropout draws reuse the
/// graph factory's seed, so masks repeat across FD rebuilds).
pub fn check_case(
    name: &str,
    inputs: &CaseInputs,
    h: f64,
    tol: f64,
    mk_graph: &dyn Fn() -> Graph,
    build: &dyn Fn(&mut Graph, &[TensorRef]) -> TensorRef,
) -> FdReport {
    // Analytic pass.
    let mut g = mk_graph();
    let leafs: Vec<TensorRef> =
        inputs.iter().map(|((r, c), v)| g.leaf(*r, *c, v.clone(), true)).collect();
    let loss = build(&mut g, &leafs);
    assert_eq!(g.shape(loss), (1, 1), "check_case '{name}': loss must be scalar");
    g.backward(loss);
    let analytic: Vec<Vec<f64>> = leafs.iter().map(|t| g.grad(*t).to_vec()).collect();

    let mut worst = 0.0f64;
    for (idx, ((r, c), v0)) in inputs.iter().enumerate() {
        let eval = |x: &[f64]| -> f64 {
            let mut g = mk_graph();
            let leafs: Vec<TensorRef> = inputs
                .iter()
                .enumerate()
                .map(|(j, ((rr, cc), vv))| {
                    let data = if j == idx { x.to_vec() } else { vv.clone() };
                    g.leaf(*rr, *cc, data, false)
                })
                .collect();
            let loss = build(&mut g, &leafs);
            g.value(loss)[0]
        };
        let _ = (r, c);
        let mut eval = eval;
        let numeric = central_difference(&mut eval, v0, h);
        for (a, n) in analytic[idx].iter().zip(numeric.iter()) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    FdReport { name: name.to_string(), max_rel_err: worst, tolerance: tol, pass: worst < tol }
}

/// Random values bounded away from zero, so ReLU kinks sit far from the FD
/// step.
fn sample(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = r.random_range(0.1..1.0);
            if r.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn weighted_sum(g: &mut Graph, x: TensorRef, seed: u64) -> TensorRef {
    let (r, c) = g.shape(x);
    let mut rng = rng::stream(seed, "fd/weights");
    let w: Vec<f64> = (0..r * c).map(|_| rng.random_range(0.5..1.5)).collect();
    let weighted = g.mask_mul(x, w);
    g.sum_all(weighted)
}

/// Run the full primitive battery, `instances` random cases per primitive,
/// reporting the worst relative error seen for each.
pub fn primitive_battery(instances: usize) -> Vec<FdReport> {
    let mut reports: Vec<FdReport> = Vec::new();
    let mut run = |name: &str,
                   mk_inputs: &dyn Fn(&mut rand_chacha::ChaCha8Rng) -> CaseInputs,
                   mk_graph: &dyn Fn() -> Graph,
                   build: &dyn Fn(&mut Graph, &[TensorRef]) -> TensorRef| {
        let mut worst = FdReport {
            name: name.to_string(),
            max_rel_err: 0.0,
            tolerance: PRIMITIVE_TOL,
            pass: true,
        };
        for inst in 0..instances {
            let mut r = rng::stream2(0xfd, name, inst as u64, 0);
            let inputs = mk_inputs(&mut r);
            let rep = check_case(name, &inputs, FD_STEP, PRIMITIVE_TOL, mk_graph, build);
            if rep.max_rel_err > worst.max_rel_err {
                worst.max_rel_err = rep.max_rel_err;
            }
            worst.pass &= rep.pass;
        }
        reports.push(worst);
    };

    let eval_graph: &dyn Fn() -> Graph = &Graph::eval;

    run(
        "matmul",
        &|r| vec![((3, 4), sample(r, 12)), ((4, 2), sample(r, 8))],
        eval_graph,
        &|g, t| {
            let y = g.matmul(t[0], t[1]);
            weighted_sum(g, y, 1)
        },
    );
    run(
        "matmul_nt",
        &|r| vec![((3, 4), sample(r, 12)), ((2, 4), sample(r, 8))],
        eval_graph,
        &|g, t| {
            let y = g.matmul_nt(t[0], t[1]);
            weighted_sum(g, y, 2)
        },
    );
    run(
        "add",
        &|r| vec![((3, 4), sample(r, 12)), ((3, 4), sample(r, 12))],
        eval_graph,
        &|g, t| {
            let y = g.add(t[0], t[1]);
            weighted_sum(g, y, 3)
        },
    );
    run(
        "add_row_broadcast",
        &|r| vec![((3, 4), sample(r, 12)), ((1, 4), sample(r, 4))],
        eval_graph,
        &|g, t| {
            let y = g.add(t[0], t[1]);
            weighted_sum(g, y, 4)
        },
    );
    run(
        "scale",
        &|r| vec![((2, 5), sample(r, 10))],
        eval_graph,
        &|g, t| {
            let y = g.scale(t[0], 1.7);
            weighted_sum(g, y, 5)
        },
    );
    run(
        "relu",
        &|r| vec![((3, 4), sample(r, 12))],
        eval_graph,
        &|g, t| {
            let y = g.relu(t[0]);
            weighted_sum(g, y, 6)
        },
    );
    run(
        "softmax_rows",
        &|r| vec![((3, 5), sample(r, 15))],
        eval_graph,
        &|g, t| {
            let y = g.softmax_rows(t[0]);
            weighted_sum(g, y, 7)
        },
    );
    run(
        "softmax_rows_masked",
        &|r| vec![((2, 6), sample(r, 12))],
        eval_graph,
        &|g, t| {
            let mask = [true, true, false, true, false, true];
            let y = g.softmax_rows_masked(t[0], Some(&mask));
            weighted_sum(g, y, 8)
        },
    );
    run(
        "layer_norm",
        &|r| vec![((3, 6), sample(r, 18)), ((1, 6), sample(r, 6)), ((1, 6), sample(r, 6))],
        eval_graph,
        &|g, t| {
            let y = g.layer_norm(t[0], t[1], t[2]);
            weighted_sum(g, y, 9)
        },
    );
    run(
        "embedding_lookup",
        &|r| vec![((7, 4), sample(r, 28))],
        eval_graph,
        &|g, t| {
            let y = g.embedding_lookup(t[0], &[2, 0, 5, 2]);
            weighted_sum(g, y, 10)
        },
    );
    run(
        "dropout",
        &|r| vec![((3, 4), sample(r, 12))],
        &|| Graph::train(rng::stream(0xd20, "fd/dropout")),
        &|g, t| {
            let y = g.dropout(t[0], 0.35);
            weighted_sum(g, y, 11)
        },
    );
    run(
        "concat_rows",
        &|r| vec![((2, 3), sample(r, 6)), ((1, 3), sample(r, 3))],
        eval_graph,
        &|g, t| {
            let y = g.concat_rows(&[t[0], t[1]]);
            weighted_sum(g, y, 12)
        },
    );
    run(
        "concat_cols",
        &|r| vec![((2, 2), sample(r, 4)), ((2, 3), sample(r, 6))],
        eval_graph,
        &|g, t| {
            let y = g.concat_cols(&[t[0], t[1]]);
            weighted_sum(g, y, 13)
        },
    );
    run(
        "slice_cols",
        &|r| vec![((3, 6), sample(r, 18))],
        eval_graph,
        &|g, t| {
            let y = g.slice_cols(t[0], 1, 3);
            weighted_sum(g, y, 14)
        },
    );
    run(
        "select_row",
        &|r| vec![((4, 3), sample(r, 12))],
        eval_graph,
        &|g, t| {
            let y = g.select_row(t[0], 2);
            weighted_sum(g, y, 15)
        },
    );
    run(
        "reshape",
        &|r| vec![((2, 6), sample(r, 12))],
        eval_graph,
        &|g, t| {
            let y = g.reshape(t[0], 3, 4);
            weighted_sum(g, y, 16)
        },
    );
    run(
        "sum_all",
        &|r| vec![((3, 3), sample(r, 9))],
        eval_graph,
        &|g, t| g.sum_all(t[0]),
    );
    run(
        "positional_encoding_add",
        &|r| vec![((4, 6), sample(r, 24))],
        eval_graph,
        &|g, t| {
            let y = g.positional_encoding_add(t[0], 1, 2, 1);
            weighted_sum(g, y, 17)
        },
    );
    run(
        "cross_entropy",
        &|r| vec![((1, 5), sample(r, 5))],
        eval_graph,
        &|g, t| g.cross_entropy(t[0], 2),
    );
    run(
        "multi_head_attention",
        &|r| vec![((4, 8), sample(r, 32)), ((4, 8), sample(r, 32)), ((4, 8), sample(r, 32))],
        eval_graph,
        &|g, t| {
            let y = g.multi_head_attention(t[0], t[1], t[2], 2, None);
            weighted_sum(g, y, 18)
        },
    );
    run(
        "multi_head_attention_masked",
        &|r| vec![((4, 8), sample(r, 32)), ((4, 8), sample(r, 32)), ((4, 8), sample(r, 32))],
        eval_graph,
        &|g, t| {
            let mask = [true, true, true, false];
            let y = g.multi_head_attention(t[0], t[1], t[2], 2, Some(&mask));
            weighted_sum(g, y, 19)
        },
    );

    reports
}
