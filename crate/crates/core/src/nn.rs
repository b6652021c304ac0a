//! Model-building blocks shared by the encoder and the aggregator: a named
//! parameter registry, a graph binder that lazily inserts parameters as
//! leaves, and the standard layers (linear, layer norm, multi-head
//! attention, MLP, pre-norm transformer block).

use rand::Rng;

use crate::optim::orthogonal_init;
use crate::tensor::{Element, Graph, Result, Tensor, Var};

/// Index of one named parameter tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors. Insertion order is the
/// canonical order for optimizers and checkpoints.
#[derive(Debug)]
pub struct ParamSet<T: Element> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    exempt: Vec<bool>,
}

impl<T: Element> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), exempt: Vec::new() }
    }

    /// Register a tensor; `decay_exempt` marks biases/norm/token parameters
    /// that skip weight decay.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay_exempt: bool) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.exempt.push(decay_exempt);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn exempt_flags(&self) -> Vec<bool> {
        self.exempt.clone()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    /// Replace a tensor by name (checkpoint loading); shape must match.
    pub fn set_by_name(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let idx = self.names.iter().position(|n| n == name).ok_or_else(|| crate::tensor::TensorError::Invalid {
            op: "param_set",
            msg: format!("unknown parameter {name}"),
        })?;
        if self.tensors[idx].shape() != tensor.shape() {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "param_set",
                lhs: tensor.shape().to_vec(),
                rhs: self.tensors[idx].shape().to_vec(),
            });
        }
        self.tensors[idx] = tensor;
        Ok(())
    }

    /// Total scalar count, optionally restricted to a name prefix.
    pub fn count_params(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    /// Convert every tensor, e.g. to run an f32 model under f64 gradient
    /// checking.
    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast::<U>()).collect(),
            exempt: self.exempt.clone(),
        }
    }
}

/// Per-forward cache mapping parameters to graph leaves. Only parameters
/// actually pulled through `var` enter the graph, so a disabled loss path
/// contributes no leaves — and later no gradients — for its parameters.
pub struct Binder {
    vars: Vec<Option<Var>>,
}

impl Binder {
    pub fn new<T: Element>(params: &ParamSet<T>) -> Self {
        Self { vars: vec![None; params.len()] }
    }

    pub fn var<T: Element>(&mut self, g: &mut Graph<T>, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = g.leaf(params.get(id).clone(), true);
        self.vars[id.0] = v.into();
        v
    }

    /// Gradients aligned with the parameter order; `None` for parameters
    /// that never entered the graph.
    pub fn grads<T: Element>(&self, g: &Graph<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|slot| slot.and_then(|v| g.grad(v).cloned())).collect()
    }
}

/// Fully connected layer y = x·Wᵀ + b with orthogonal W and zero b.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<T: Element, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = params.add(format!("{name}.w"), orthogonal_init(&[out_dim, in_dim], rng)?, false);
        let b = params.add(format!("{name}.b"), Tensor::zeros(vec![out_dim]), true);
        Ok(Self { w, b })
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        binder: &mut Binder,
        x: Var,
    ) -> Result<Var> {
        let w = binder.var(g, params, self.w);
        let b = binder.var(g, params, self.b);
        g.linear(x, w, b)
    }
}

/// Layer normalization with learned scale/shift (both decay-exempt).
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init<T: Element>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Tensor::ones(vec![dim]), true);
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(vec![dim]), true);
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        binder: &mut Binder,
        x: Var,
    ) -> Result<Var> {
        let gamma = binder.var(g, params, self.gamma);
        let beta = binder.var(g, params, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Multi-head scaled dot-product self-attention over a tokens×dim stack.
/// The output projection is optional: the encoder blocks use it, the
/// single-head aggregator variant does not.
#[derive(Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Option<Linear>,
    pub n_heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn init<T: Element, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        n_heads: usize,
        with_output_proj: bool,
        rng: &mut R,
    ) -> Result<Self> {
        assert!(dim.is_multiple_of(n_heads), "dim {dim} not divisible by heads {n_heads}");
        let wq = Linear::init(params, &format!("{name}.wq"), dim, dim, rng)?;
        let wk = Linear::init(params, &format!("{name}.wk"), dim, dim, rng)?;
        let wv = Linear::init(params, &format!("{name}.wv"), dim, dim, rng)?;
        let wo = if with_output_proj { Some(Linear::init(params, &format!("{name}.wo"), dim, dim, rng)?) } else { None };
        Ok(Self { wq, wk, wv, wo, n_heads, dim })
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        binder: &mut Binder,
        x: Var,
    ) -> Result<Var> {
        let q = self.wq.forward(g, params, binder, x)?;
        let k = self.wk.forward(g, params, binder, x)?;
        let v = self.wv.forward(g, params, binder, x)?;
        let hd = self.dim / self.n_heads;
        let scale = crate::tensor::elem::<T>(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, scale)?;
            let attn = g.softmax(scaled, 1)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
        match &self.wo {
            Some(wo) => wo.forward(g, params, binder, cat),
            None => Ok(cat),
        }
    }
}

/// Two-layer GELU MLP, dim → hidden → dim.
#[derive(Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn init<T: Element, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::init(params, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::init(params, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        binder: &mut Binder,
        x: Var,
    ) -> Result<Var> {
        let h = self.fc1.forward(g, params, binder, x)?;
        let a = g.gelu(h)?;
        self.fc2.forward(g, params, binder, a)
    }
}

/// Pre-norm transformer block: x + attn(ln1(x)), then + mlp(ln2(x)).
#[derive(Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn init<T: Element, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        n_heads: usize,
        mlp_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::init(params, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::init(params, &format!("{name}.attn"), dim, n_heads, true, rng)?,
            ln2: LayerNorm::init(params, &format!("{name}.ln2"), dim),
            mlp: Mlp::init(params, &format!("{name}.mlp"), dim, mlp_hidden, rng)?,
        })
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        binder: &mut Binder,
        x: Var,
    ) -> Result<Var> {
        let n1 = self.ln1.forward(g, params, binder, x)?;
        let a = self.attn.forward(g, params, binder, n1)?;
        let x = g.add(x, a)?;
        let n2 = self.ln2.forward(g, params, binder, x)?;
        let m = self.mlp.forward(g, params, binder, n2)?;
        g.add(x, m)
    }
}
