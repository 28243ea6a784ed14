//! Named parameter storage and the transformer building blocks shared by the
//! keypoint estimator and the action recognizer.
//!
//! Blocks are pre-norm: `x + attn(ln(x))` then `x + ffn(ln(x))`.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named, trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    /// Every tensor, in store order.
    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Overwrites every tensor from `other`, which must have identical names
    /// and shapes in the same order.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape("parameter names differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Shape(format!(
                    "parameter shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Places every parameter on `graph`. With `trainable == false` the
    /// leaves are constants and no gradients are tracked.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.leaf(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Xavier-uniform `rows×cols` matrix.
pub fn xavier<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Zero-mean Gaussian `rows×cols` matrix.
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Affine map `x W + b` with `W: in×out` and `b: 1×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), xavier(rng, d_in, d_out)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let xw = g.matmul(x, p.var(self.weight))?;
        g.add_row(xw, p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[1, dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

/// Multi-head scaled dot-product attention with separate Q/K/V/output
/// projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
    pub dim: usize,
}

/// Attention output plus the per-head weight matrices.
pub struct AttentionTrace {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        n_heads: usize,
    ) -> Result<Self> {
        if n_heads == 0 || !dim.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "model dim {dim} not divisible by {n_heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            output: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            n_heads,
            dim,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        q_in: Var,
        k_in: Var,
        v_in: Var,
    ) -> Result<Var> {
        Ok(self.forward_traced(g, p, q_in, k_in, v_in)?.output)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        p: &Bound,
        q_in: Var,
        k_in: Var,
        v_in: Var,
    ) -> Result<AttentionTrace> {
        for v in [q_in, k_in, v_in] {
            if g.value(v).cols() != self.dim {
                return Err(Error::Shape(format!(
                    "attention input has {} columns, model dim is {}",
                    g.value(v).cols(),
                    self.dim
                )));
            }
        }
        if g.value(k_in).rows() != g.value(v_in).rows() {
            return Err(Error::Shape("key and value token counts differ".into()));
        }
        let q = self.query.forward(g, p, q_in)?;
        let k = self.key.forward(g, p, k_in)?;
        let v = self.value.forward(g, p, v_in)?;
        let d_head = self.dim / self.n_heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * d_head, d_head)?;
            let kh = g.slice_cols(k, h * d_head, d_head)?;
            let vh = g.slice_cols(v, h * d_head, d_head)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores)?;
            heads.push(g.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let output = self.output.forward(g, p, merged)?;
        Ok(AttentionTrace { output, weights })
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        n_heads: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, n_heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_dim),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, h, h)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, h)?;
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        n_heads: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            self_attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}.self_attn"),
                dim,
                n_heads,
            )?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            cross_attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}.cross_attn"),
                dim,
                n_heads,
            )?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_dim),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, memory: Var) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let a = self.self_attn.forward(g, p, h, h, h)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, p, x)?;
        let c = self.cross_attn.forward(g, p, h, memory, memory)?;
        let x = g.add(x, c)?;
        let h = self.norm3.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, h)?;
        g.add(x, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_attention_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 8, 2).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(gaussian(&mut rng, 1, 8, 1.0));
        let trace = mha.forward_traced(&mut g, &p, x, x, x).unwrap();
        for w in trace.weights {
            assert_eq!(g.value(w).data(), &[1.0]);
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut store, &mut rng, "a", 10, 4).is_err());
    }

    #[test]
    fn attention_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 8, 2).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[3, 6]));
        assert!(mha.forward(&mut g, &p, x, x, x).is_err());
    }

    #[test]
    fn duplicate_keys_attend_like_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 8, 2).unwrap();
        let q = gaussian(&mut rng, 2, 8, 1.0);
        let kv = gaussian(&mut rng, 1, 8, 1.0);
        let kv2 = Tensor::from_rows(&[kv.data().to_vec(), kv.data().to_vec()]).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let qv = g.constant(q);
        let one = g.constant(kv);
        let two = g.constant(kv2);
        let a = mha.forward(&mut g, &p, qv, one, one).unwrap();
        let b = mha.forward(&mut g, &p, qv, two, two).unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
