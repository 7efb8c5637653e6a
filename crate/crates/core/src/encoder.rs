//! Shared network building blocks: plain MLPs and post-norm transformer
//! encoder stacks. The visual, language and fusion paths all assemble their
//! encoders from these.

use crate::tensorcore::{Graph, ParamStore, TensorRef};

/// `x @ w + b` with parameters `{prefix}.w` and `{prefix}.b`.
pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: TensorRef) -> TensorRef {
    let w = g.param(store, &format!("{prefix}.w"));
    let b = g.param(store, &format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add(y, b)
}

pub fn init_linear(store: &mut ParamStore, seed: u64, prefix: &str, fan_in: usize, fan_out: usize) {
    init_linear_gain(store, seed, prefix, fan_in, fan_out, false);
}

/// As [`init_linear`], with the He gain when a ReLU consumes the output.
pub fn init_linear_gain(
    store: &mut ParamStore,
    seed: u64,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    relu_follows: bool,
) {
    store.insert_linear(seed, &format!("{prefix}.w"), fan_in, fan_out, relu_follows);
    store.insert_bias(seed, &format!("{prefix}.b"), fan_in, fan_out);
}

/// Multilayer perceptron: `dims[0]` in, one FC per subsequent entry, ReLU
/// between layers (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: &str, dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "mlp '{prefix}': need at least one layer");
        Mlp { prefix: prefix.to_string(), dims }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for i in 0..self.dims.len() - 1 {
            let relu_follows = i + 1 < self.dims.len() - 1;
            init_linear_gain(
                store,
                seed,
                &format!("{}.fc{i}", self.prefix),
                self.dims[i],
                self.dims[i + 1],
                relu_follows,
            );
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: TensorRef) -> TensorRef {
        let mut h = x;
        for i in 0..self.dims.len() - 1 {
            h = linear(g, store, &format!("{}.fc{i}", self.prefix), h);
            if i + 1 < self.dims.len() - 1 {
                h = g.relu(h);
            }
        }
        h
    }
}

/// Pre-norm transformer encoder stack: each sublayer reads a normalized view
/// of the residual stream (`h + attn(ln(h))`, `h + ffn(ln(h))`), with a final
/// norm after the last layer.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub prefix: String,
    pub layers: usize,
    pub width: usize,
    pub ffn: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl TransformerStack {
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for l in 0..self.layers {
            let p = format!("{}.layer{l}", self.prefix);
            for proj in ["wq", "wk", "wv", "wo"] {
                store.insert_linear(seed, &format!("{p}.attn.{proj}"), self.width, self.width, false);
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                store.insert_bias(seed, &format!("{p}.attn.{bias}"), self.width, self.width);
            }
            store.insert_layer_norm(&format!("{p}.ln1"), self.width);
            init_linear_gain(store, seed, &format!("{p}.ffn.fc0"), self.width, self.ffn, true);
            init_linear(store, seed, &format!("{p}.ffn.fc1"), self.ffn, self.width);
            store.insert_layer_norm(&format!("{p}.ln2"), self.width);
        }
        store.insert_layer_norm(&format!("{}.ln_out", self.prefix), self.width);
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: TensorRef,
        key_valid: Option<&[bool]>,
    ) -> TensorRef {
        let (_, w) = g.shape(x);
        assert_eq!(w, self.width, "{}: input width {w} != stack width {}", self.prefix, self.width);
        let mut h = x;
        for l in 0..self.layers {
            let p = format!("{}.layer{l}", self.prefix);
            let gamma1 = g.param(store, &format!("{p}.ln1.gamma"));
            let beta1 = g.param(store, &format!("{p}.ln1.beta"));
            let normed1 = g.layer_norm(h, gamma1, beta1);
            let wq = g.param(store, &format!("{p}.attn.wq"));
            let bq = g.param(store, &format!("{p}.attn.bq"));
            let wk = g.param(store, &format!("{p}.attn.wk"));
            let bk = g.param(store, &format!("{p}.attn.bk"));
            let wv = g.param(store, &format!("{p}.attn.wv"));
            let bv = g.param(store, &format!("{p}.attn.bv"));
            let q = g.matmul(normed1, wq);
            let q = g.add(q, bq);
            let k = g.matmul(normed1, wk);
            let k = g.add(k, bk);
            let v = g.matmul(normed1, wv);
            let v = g.add(v, bv);
            let attn = g.multi_head_attention(q, k, v, self.heads, key_valid);
            let attn = linear_with(g, store, &format!("{p}.attn.wo"), &format!("{p}.attn.bo"), attn);
            let attn = g.dropout(attn, self.dropout);
            h = g.add(h, attn);

            let gamma2 = g.param(store, &format!("{p}.ln2.gamma"));
            let beta2 = g.param(store, &format!("{p}.ln2.beta"));
            let normed2 = g.layer_norm(h, gamma2, beta2);
            let ff = linear(g, store, &format!("{p}.ffn.fc0"), normed2);
            let ff = g.relu(ff);
            let ff = linear(g, store, &format!("{p}.ffn.fc1"), ff);
            let ff = g.dropout(ff, self.dropout);
            h = g.add(h, ff);
        }
        let gamma = g.param(store, &format!("{}.ln_out.gamma", self.prefix));
        let beta = g.param(store, &format!("{}.ln_out.beta", self.prefix));
        g.layer_norm(h, gamma, beta)
    }
}

fn linear_with(
    g: &mut Graph,
    store: &ParamStore,
    w_name: &str,
    b_name: &str,
    x: TensorRef,
) -> TensorRef {
    let w = g.param(store, w_name);
    let b = g.param(store, b_name);
    let y = g.matmul(x, w);
    g.add(y, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn mlp_shapes_flow_through() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new("m", vec![2, 16, 16, 16]);
        mlp.init(&mut store, 3);
        let mut g = Graph::eval();
        let x = g.constant(9, 2, vec![0.1; 18]);
        let y = mlp.forward(&mut g, &store, x);
        assert_eq!(g.shape(y), (9, 16));
    }

    #[test]
    fn stack_preserves_shape_and_is_deterministic() {
        let mut store = ParamStore::new();
        let stack =
            TransformerStack { prefix: "t".into(), layers: 2, width: 16, ffn: 32, heads: 4, dropout: 0.0 };
        stack.init(&mut store, 5);
        let mut r = rng::stream(7, "enc-test");
        let x_data: Vec<f64> = (0..5 * 16).map(|_| r.random_range(-1.0..1.0)).collect();
        let run = || {
            let mut g = Graph::eval();
            let x = g.constant(5, 16, x_data.clone());
            let y = stack.forward(&mut g, &store, x, None);
            assert_eq!(g.shape(y), (5, 16));
            g.value(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradients_reach_every_stack_parameter() {
        let mut store = ParamStore::new();
        let stack =
            TransformerStack { prefix: "t".into(), layers: 1, width: 8, ffn: 16, heads: 2, dropout: 0.0 };
        stack.init(&mut store, 9);
        let mut g = Graph::eval();
        let mut r = rng::stream(8, "enc-grad");
        let x_data: Vec<f64> = (0..3 * 8).map(|_| r.random_range(-1.0..1.0)).collect();
        let x = g.leaf(3, 8, x_data, true);
        let y = stack.forward(&mut g, &store, x, None);
        let loss = g.sum_all(y);
        g.backward(loss);
        for (name, grad) in g.param_grads() {
            let norm: f64 = grad.iter().map(|v| v * v).sum();
            // Beta of the final layer norm always gets gradient; most others do too.
            assert!(norm.is_finite(), "{name} gradient not finite");
        }
        assert!(g.param_grads().values().any(|gr| gr.iter().any(|v| *v != 0.0)));
    }
}
