//! Parameter storage and transformer building blocks.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{AttnSpec, Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
    decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new(), decay: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. `decay` marks it for weight decay.
    pub fn add(&mut self, name: &str, value: Matrix<T>, decay: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.decay.push(decay);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// A graph under construction together with the parameters it reads.
///
/// Parameters become graph leaves the first time they are used.
pub struct Session<'a, T: Scalar> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Scalar> Session<'a, T> {
    /// A session whose parameters receive gradients.
    pub fn train(store: &'a ParamStore<T>) -> Self {
        Self { graph: Graph::new(), store, bound: vec![None; store.len()], trainable: true }
    }

    /// A session for forward evaluation only.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self { graph: Graph::new(), store, bound: vec![None; store.len()], trainable: false }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable { self.graph.param(value) } else { self.graph.constant(value) };
        self.bound[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients in store order; unused parameters get `None`.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Matrix<T>>> {
        self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect()
    }
}

/// Draws from a normal distribution truncated at two standard deviations.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix<T> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Matrix::from_fn(rows, cols, |_, _| loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            break T::from_f64_lossy(z * std);
        }
    })
}

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(&format!("{name}.weight"), trunc_normal(fan_in, fan_out, std, rng), true);
        let bias = bias.then(|| store.add(&format!("{name}.bias"), Matrix::zeros(1, fan_out), false));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let w = s.p(self.weight);
        let y = s.graph.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = s.p(b);
                s.graph.add_bias(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Matrix::filled(1, width, T::one()), false);
        let beta = store.add(&format!("{name}.beta"), Matrix::zeros(1, width), false);
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let g = s.p(self.gamma);
        let b = s.p(self.beta);
        s.graph.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        out_std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, true, INIT_STD, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, true, INIT_STD, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, true, INIT_STD, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, true, out_std, rng),
            heads,
        }
    }

    /// Queries from `xq`, keys and values from `xkv`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, xq: Var, xkv: Var, mask: &SeqMask) -> Var {
        let q = self.q.forward(s, xq);
        let k = self.k.forward(s, xkv);
        let v = self.v.forward(s, xkv);
        let spec = AttnSpec {
            batch: mask.batch,
            q_len: mask.q_len,
            k_len: mask.k_len,
            heads: self.heads,
            allow: mask.allow.clone(),
            key_valid: mask.key_valid.clone(),
        };
        let a = s.graph.attention(q, k, v, spec);
        self.out.forward(s, a)
    }
}

/// Attention visibility for a batch of sequences; see [`AttnSpec`].
#[derive(Debug, Clone)]
pub struct SeqMask {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub allow: Option<Rc<Vec<bool>>>,
    pub key_valid: Option<Rc<Vec<bool>>>,
}

impl SeqMask {
    /// Bidirectional attention over the first `valid[b]` keys of each sequence.
    pub fn padded(seq: usize, valid: &[usize]) -> Self {
        let key_valid = valid.iter().flat_map(|&n| (0..seq).map(move |j| j < n)).collect();
        Self { batch: valid.len(), q_len: seq, k_len: seq, allow: None, key_valid: Some(Rc::new(key_valid)) }
    }

    /// Like [`padded`](Self::padded) with an additional lower-triangular constraint.
    pub fn causal_padded(seq: usize, valid: &[usize]) -> Self {
        let mut m = Self::padded(seq, valid);
        m.allow = Some(Rc::new(causal_allow(seq)));
        m
    }
}

/// Row-major `n × n` lower-triangular visibility.
pub fn causal_allow(n: usize) -> Vec<bool> {
    (0..n * n).map(|x| x % n <= x / n).collect()
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        hidden: usize,
        out_std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), width, hidden, true, INIT_STD, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, width, true, out_std, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let h = self.fc1.forward(s, x);
        let h = s.graph.gelu(h);
        self.fc2.forward(s, h)
    }
}

/// Pre-norm transformer block with optional cross-attention.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        depth: usize,
        with_cross: bool,
        rng: &mut R,
    ) -> Self {
        let out_std = INIT_STD / (2.0 * depth.max(1) as f64).sqrt();
        let cross = with_cross.then(|| {
            (
                LayerNorm::new(store, &format!("{name}.ln_cross"), width),
                Attention::new(store, &format!("{name}.cross"), width, heads, out_std, rng),
            )
        });
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: Attention::new(store, &format!("{name}.attn"), width, heads, out_std, rng),
            cross,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, width * mlp_ratio, out_std, rng),
        }
    }

    /// Self-attention block.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, mask: &SeqMask) -> Var {
        self.forward_with_memory(s, x, mask, None)
    }

    /// `memory` supplies keys for the cross-attention sub-layer when present.
    pub fn forward_with_memory<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        mask: &SeqMask,
        memory: Option<(Var, &SeqMask)>,
    ) -> Var {
        let h = self.ln1.forward(s, x);
        let a = self.attn.forward(s, h, h, mask);
        let mut x = s.graph.add(x, a);
        if let (Some((ln, cross)), Some((mem, mmask))) = (&self.cross, memory) {
            let h = ln.forward(s, x);
            let c = cross.forward(s, h, mem, mmask);
            x = s.graph.add(x, c);
        }
        let h = self.ln2.forward(s, x);
        let m = self.mlp.forward(s, h);
        s.graph.add(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m: Matrix<f64> = trunc_normal(50, 50, 0.02, &mut rng);
        assert!(m.data().iter().all(|x| x.abs() <= 0.04));
        let mean = m.sum() / m.len() as f64;
        assert!(mean.abs() < 0.002);
    }

    #[test]
    fn causal_allow_is_lower_triangular() {
        let a = causal_allow(3);
        assert_eq!(a, vec![true, false, false, true, true, false, true, true, true]);
    }

    #[test]
    fn session_binds_each_param_once() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, "l", 3, 2, true, 0.1, &mut rng);
        let mut s = Session::train(&store);
        let x = s.graph.constant(Matrix::filled(4, 3, 1.0));
        let _ = lin.forward(&mut s, x);
        let before = s.graph.len();
        let x2 = s.graph.scale(x, 1.0);
        let _ = lin.forward(&mut s, x2);
        // second call reuses the weight and bias leaves: scale, matmul, add_bias
        assert_eq!(s.graph.len(), before + 3);
    }
}
