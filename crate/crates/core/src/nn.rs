//! Layers built on the autodiff tape. Parameters live in a [`ParamStore`];
//! layers only hold ids.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{AttnSegment, Graph, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// N(0, 1/fan_in)
    Normal,
    Zeros,
    /// Rectangular identity: ones on the leading diagonal.
    Identity,
}

fn init_tensor(rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(rows, cols),
        Init::Identity => {
            let mut t = Tensor::zeros(rows, cols);
            for i in 0..rows.min(cols) {
                t.set(i, i, 1.0);
            }
            t
        }
        Init::Normal => normal_tensor(rows, cols, 1.0 / (rows as f64).sqrt(), rng),
    }
}

pub fn normal_tensor(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(rows, cols, data)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_tensor(in_dim, out_dim, init, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add(y, b)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut y = x.matmul(store.get(self.weight));
        let b = store.get(self.bias);
        for r in 0..y.rows() {
            for (v, bb) in y.row_mut(r).iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm_rows(x, LN_EPS);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let s = g.mul(n, gamma);
        g.add(s, beta)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), in_dim, hidden, Init::Normal, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, out_dim, Init::Normal, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut lin = |n: &str| Linear::new(store, &format!("{name}.{n}"), dim, dim, Init::Normal, rng);
        Self {
            query: lin("query"),
            key: lin("key"),
            value: lin("value"),
            out: lin("out"),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        context: Var,
        segments: Vec<AttnSegment>,
    ) -> Var {
        let q = self.query.forward(g, store, queries);
        let k = self.key.forward(g, store, context);
        let v = self.value.forward(g, store, context);
        let a = g.attention(q, k, v, self.heads, segments);
        self.out.forward(g, store, a)
    }
}

/// Pre-norm transformer block. With `gated`, each residual branch is scaled
/// by a learned scalar that starts at zero, so the block is the identity at
/// construction.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub gates: Option<(ParamId, ParamId)>,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        gated: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let norm_attn = LayerNorm::new(store, &format!("{name}.norm_attn"), dim);
        let attn = MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng);
        let norm_ffn = LayerNorm::new(store, &format!("{name}.norm_ffn"), dim);
        let ffn = FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, dim, rng);
        let gates = gated.then(|| {
            (
                store.add(format!("{name}.gate_attn"), Tensor::zeros(1, 1)),
                store.add(format!("{name}.gate_ffn"), Tensor::zeros(1, 1)),
            )
        });
        Self {
            norm_attn,
            attn,
            norm_ffn,
            ffn,
            gates,
        }
    }

    /// Self-attention restricted to `segments` (row ranges of `x`). A mask,
    /// when given, applies to every segment and must be sized for it.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segments: &[Range<usize>],
        mask: Option<&Arc<Vec<bool>>>,
        dropout: &mut Dropout<'_>,
    ) -> Var {
        let segs = segments
            .iter()
            .map(|r| {
                let seg = AttnSegment::new(r.clone(), r.clone());
                match mask {
                    Some(m) => seg.masked(m.clone()),
                    None => seg,
                }
            })
            .collect();
        let h = self.norm_attn.forward(g, store, x);
        let a = self.attn.forward(g, store, h, h, segs);
        let a = dropout.apply(g, a);
        let a = self.gate(g, store, a, 0);
        let x = g.add(x, a);
        let h = self.norm_ffn.forward(g, store, x);
        let f = self.ffn.forward(g, store, h);
        let f = dropout.apply(g, f);
        let f = self.gate(g, store, f, 1);
        g.add(x, f)
    }

    fn gate(&self, g: &mut Graph, store: &ParamStore, branch: Var, which: usize) -> Var {
        match self.gates {
            None => branch,
            Some((ga, gf)) => {
                let p = g.param(store, if which == 0 { ga } else { gf });
                g.mul(branch, p)
            }
        }
    }
}

/// Inverted dropout driven by an explicit RNG; inactive in eval.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn eval() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else { return x };
        if self.p <= 0.0 {
            return x;
        }
        let (r, c) = g.shape(x);
        let keep = 1.0 - self.p;
        let mask = (0..r * c)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(Tensor::new(r, c, mask));
        g.mul(x, m)
    }
}

/// Constant S×N matrix whose row s averages the rows listed in `groups[s]`.
pub fn averaging_matrix(groups: &[Vec<Range<usize>>], n: usize) -> Tensor {
    let mut t = Tensor::zeros(groups.len(), n);
    for (s, ranges) in groups.iter().enumerate() {
        let count: usize = ranges.iter().map(|r| r.len()).sum();
        if count == 0 {
            continue;
        }
        let w = 1.0 / count as f64;
        for r in ranges {
            for i in r.clone() {
                t.set(s, i, w);
            }
        }
    }
    t
}
