//! Parameter storage and layer compositions.
//!
//! Layers are functional: parameter tensors live in a [`ParamSet`], get
//! registered on a fresh graph each step, and the composition functions here
//! wire them together. Multi-head attention is composed from verified
//! primitives (column slices, matmul, masked softmax) rather than fused, so
//! its gradient correctness follows from the primitive checks.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var, NEG_MASK};
use crate::error::{Error, Result};
use crate::rng::RngExt;
use crate::tensor::{Scalar, Tensor};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PId(pub usize);

/// One named parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    /// Excluded from weight decay (norm gains/biases, temperatures).
    pub no_decay: bool,
}

/// Named, ordered parameter tensors for one model.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, no_decay: bool) -> PId {
        self.entries.push(ParamEntry { name: name.into(), value, no_decay });
        PId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn value(&self, id: PId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: PId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: PId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<PId> {
        self.entries.iter().position(|e| e.name == name).map(PId)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Register every parameter as a gradient-tracked leaf, in order.
    pub fn register(&self, g: &Graph<T>) -> Result<Vec<Var>> {
        self.entries.iter().map(|e| g.param(e.value.clone())).collect()
    }

    /// Copy values from another set by matching names (used by MLM init).
    /// Returns how many entries were overwritten.
    pub fn copy_matching(&mut self, other: &ParamSet<T>) -> Result<usize> {
        let mut n = 0;
        for e in &other.entries {
            if let Some(id) = self.find(&e.name) {
                if self.entries[id.0].value.shape() != e.value.shape() {
                    return Err(Error::shape(
                        "copy_matching",
                        alloc::format!(
                            "{}: {:?} vs {:?}",
                            e.name,
                            self.entries[id.0].value.shape(),
                            e.value.shape()
                        ),
                    ));
                }
                self.entries[id.0].value = e.value.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), no_decay: e.no_decay })
                .collect(),
        }
    }
}

/// Initialization helpers: scaled-uniform (fan-in) weights, zero biases,
/// unit-normal/sqrt(D) query tokens.
pub struct ParamBuilder<'a, T: Scalar, R: rand_core::RngCore> {
    pub set: &'a mut ParamSet<T>,
    pub rng: &'a mut R,
}

impl<'a, T: Scalar, R: rand_core::RngCore> ParamBuilder<'a, T, R> {
    pub fn new(set: &'a mut ParamSet<T>, rng: &'a mut R) -> Self {
        ParamBuilder { set, rng }
    }

    fn uniform_tensor(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.rng.range(-bound, bound))).collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape")
    }

    /// fan-in scaled uniform weight matrix [in, out].
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> LinearP {
        let bound = 1.0 / libm::sqrt(d_in as f64);
        let wt = self.uniform_tensor(&[d_in, d_out], bound);
        let w = self.set.add(alloc::format!("{name}.w"), wt, false);
        let b = self.set.add(alloc::format!("{name}.b"), Tensor::zeros(alloc::vec![d_out]), false);
        LinearP { w, b }
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> NormP {
        let g = self.set.add(alloc::format!("{name}.g"), Tensor::full(alloc::vec![d], T::ONE), true);
        let b = self.set.add(alloc::format!("{name}.b"), Tensor::zeros(alloc::vec![d]), true);
        NormP { g, b }
    }

    pub fn group_norm(&mut self, name: &str, channels: usize) -> NormP {
        let g = self.set.add(alloc::format!("{name}.g"), Tensor::full(alloc::vec![channels], T::ONE), true);
        let b = self.set.add(alloc::format!("{name}.b"), Tensor::zeros(alloc::vec![channels]), true);
        NormP { g, b }
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize) -> ConvP {
        let bound = 1.0 / libm::sqrt((c_in * kernel) as f64);
        let wt = self.uniform_tensor(&[c_out, c_in, kernel], bound);
        let w = self.set.add(alloc::format!("{name}.w"), wt, false);
        let b = self.set.add(alloc::format!("{name}.b"), Tensor::zeros(alloc::vec![c_out]), false);
        ConvP { w, b }
    }

    /// Embedding table [vocab, d], fan-in scaled by d.
    pub fn embedding(&mut self, name: &str, vocab: usize, d: usize) -> PId {
        let bound = 1.0 / libm::sqrt(d as f64);
        let t = self.uniform_tensor(&[vocab, d], bound);
        self.set.add(name, t, false)
    }

    /// Learnable query tokens [k, d]: unit normal scaled by 1/sqrt(d).
    pub fn queries(&mut self, name: &str, k: usize, d: usize) -> PId {
        let scale = 1.0 / libm::sqrt(d as f64);
        let data = (0..k * d).map(|_| T::from_f64(self.rng.normal() * scale)).collect();
        self.set.add(name, Tensor::from_vec(alloc::vec![k, d], data).expect("shape"), false)
    }

    pub fn scalar(&mut self, name: &str, value: f64, no_decay: bool) -> PId {
        self.set.add(name, Tensor::scalar(T::from_f64(value)), no_decay)
    }

    pub fn attention(&mut self, name: &str, d: usize) -> AttnP {
        AttnP {
            q: self.linear(&alloc::format!("{name}.q"), d, d),
            k: self.linear(&alloc::format!("{name}.k"), d, d),
            v: self.linear(&alloc::format!("{name}.v"), d, d),
            o: self.linear(&alloc::format!("{name}.o"), d, d),
        }
    }

    pub fn block(&mut self, name: &str, d: usize, mlp_ratio: usize) -> BlockP {
        BlockP {
            ln1: self.layer_norm(&alloc::format!("{name}.ln1"), d),
            attn: self.attention(&alloc::format!("{name}.attn"), d),
            ln2: self.layer_norm(&alloc::format!("{name}.ln2"), d),
            fc1: self.linear(&alloc::format!("{name}.fc1"), d, d * mlp_ratio),
            fc2: self.linear(&alloc::format!("{name}.fc2"), d * mlp_ratio, d),
        }
    }

    pub fn cross_block(&mut self, name: &str, d: usize, mlp_ratio: usize) -> CrossBlockP {
        CrossBlockP {
            ln1: self.layer_norm(&alloc::format!("{name}.ln1"), d),
            self_attn: self.attention(&alloc::format!("{name}.self"), d),
            ln_cross: self.layer_norm(&alloc::format!("{name}.lnx"), d),
            cross_attn: self.attention(&alloc::format!("{name}.cross"), d),
            ln2: self.layer_norm(&alloc::format!("{name}.ln2"), d),
            fc1: self.linear(&alloc::format!("{name}.fc1"), d, d * mlp_ratio),
            fc2: self.linear(&alloc::format!("{name}.fc2"), d * mlp_ratio, d),
        }
    }

    pub fn pooler(&mut self, name: &str, k: usize, d: usize) -> PoolerP {
        PoolerP {
            queries: self.queries(&alloc::format!("{name}.queries"), k, d),
            attn: self.attention(&alloc::format!("{name}.attn"), d),
            ln: self.layer_norm(&alloc::format!("{name}.ln"), d),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearP {
    pub w: PId,
    pub b: PId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormP {
    pub g: PId,
    pub b: PId,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvP {
    pub w: PId,
    pub b: PId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnP {
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
    pub o: LinearP,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockP {
    pub ln1: NormP,
    pub attn: AttnP,
    pub ln2: NormP,
    pub fc1: LinearP,
    pub fc2: LinearP,
}

#[derive(Clone, Copy, Debug)]
pub struct CrossBlockP {
    pub ln1: NormP,
    pub self_attn: AttnP,
    pub ln_cross: NormP,
    pub cross_attn: AttnP,
    pub ln2: NormP,
    pub fc1: LinearP,
    pub fc2: LinearP,
}

#[derive(Clone, Copy, Debug)]
pub struct PoolerP {
    pub queries: PId,
    pub attn: AttnP,
    pub ln: NormP,
}

/// Forward-pass context: parameter vars registered on the current graph,
/// plus the dropout state for training mode.
pub struct Fwd<'g, T: Scalar> {
    pub g: &'g Graph<T>,
    pub vars: &'g [Var],
    pub dropout: Option<DropoutCtx>,
}

/// Dropout configuration for a training-mode forward pass.
pub struct DropoutCtx {
    pub p: f64,
    pub rng: core::cell::RefCell<rand_chacha::ChaCha8Rng>,
}

impl<'g, T: Scalar> Fwd<'g, T> {
    pub fn eval(g: &'g Graph<T>, vars: &'g [Var]) -> Self {
        Fwd { g, vars, dropout: None }
    }

    pub fn train(g: &'g Graph<T>, vars: &'g [Var], p: f64, rng: rand_chacha::ChaCha8Rng) -> Self {
        let dropout =
            if p > 0.0 { Some(DropoutCtx { p, rng: core::cell::RefCell::new(rng) }) } else { None };
        Fwd { g, vars, dropout }
    }

    pub fn var(&self, id: PId) -> Var {
        self.vars[id.0]
    }

    /// Inverted dropout: identity in eval mode.
    pub fn dropout(&self, x: Var) -> Result<Var> {
        let Some(ctx) = &self.dropout else { return Ok(x) };
        let shape = self.g.shape_of(x);
        let n: usize = shape.iter().product();
        let keep = T::from_f64(1.0 / (1.0 - ctx.p));
        let mut rng = ctx.rng.borrow_mut();
        let data = (0..n).map(|_| if rng.uniform() < ctx.p { T::ZERO } else { keep }).collect();
        drop(rng);
        self.g.mul_mask(x, Tensor::from_vec(shape, data)?)
    }

    pub fn linear(&self, p: LinearP, x: Var) -> Result<Var> {
        let y = self.g.matmul(x, self.var(p.w))?;
        self.g.add_row_broadcast(y, self.var(p.b))
    }

    pub fn layer_norm(&self, p: NormP, x: Var) -> Result<Var> {
        self.g.layer_norm(x, self.var(p.g), self.var(p.b), 1e-5)
    }

    pub fn mlp(&self, fc1: LinearP, fc2: LinearP, x: Var) -> Result<Var> {
        let h = self.linear(fc1, x)?;
        let h = self.g.gelu(h)?;
        self.linear(fc2, h)
    }
}

/// Multi-head attention output plus per-head attention weight matrices.
pub struct AttnOut {
    pub out: Var,
    /// One [n_q, n_kv] row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

/// Multi-head attention composed from primitives. `mask` is an additive
/// [n_q, n_kv] tensor (0 = allowed, NEG_MASK = blocked).
pub fn multi_head_attention<T: Scalar>(
    f: &Fwd<'_, T>,
    p: AttnP,
    queries: Var,
    keys_values: Var,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<AttnOut> {
    let g = f.g;
    let d = g.shape_of(queries)[1];
    if d % heads != 0 {
        return Err(Error::shape("attention", alloc::format!("dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = f.linear(p.q, queries)?;
    let k = f.linear(p.k, keys_values)?;
    let v = f.linear(p.v, keys_values)?;
    let scale = 1.0 / libm::sqrt(dh as f64);

    let mut head_outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.col_slice(q, h * dh, (h + 1) * dh)?;
        let kh = g.col_slice(k, h * dh, (h + 1) * dh)?;
        let vh = g.col_slice(v, h * dh, (h + 1) * dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let scores = match mask {
            Some(m) => g.add_mask(scores, m)?,
            None => scores,
        };
        let att = g.softmax_rows(scores)?;
        weights.push(att);
        head_outs.push(g.matmul(att, vh)?);
    }
    let cat = g.concat_cols(&head_outs)?;
    let out = f.linear(p.o, cat)?;
    Ok(AttnOut { out, weights })
}

/// Additive causal mask for sequence length n: position i sees j <= i.
pub fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(alloc::vec![n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            m.data_mut()[i * n + j] = T::from_f64(NEG_MASK);
        }
    }
    m
}

/// Pre-norm transformer block: x += attn(LN(x)); x += MLP(LN(x)).
pub fn transformer_block<T: Scalar>(
    f: &Fwd<'_, T>,
    p: &BlockP,
    x: Var,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let h = f.layer_norm(p.ln1, x)?;
    let att = multi_head_attention(f, p.attn, h, h, heads, mask)?;
    let att_out = f.dropout(att.out)?;
    let x = f.g.add(x, att_out)?;
    let h2 = f.layer_norm(p.ln2, x)?;
    let m = f.mlp(p.fc1, p.fc2, h2)?;
    let m = f.dropout(m)?;
    f.g.add(x, m)
}

/// Pre-norm decoder block: causal self-attention, cross-attention to the
/// pooled context, then the MLP.
pub fn decoder_block<T: Scalar>(
    f: &Fwd<'_, T>,
    p: &CrossBlockP,
    x: Var,
    context: Var,
    heads: usize,
    causal: &Tensor<T>,
) -> Result<Var> {
    let h = f.layer_norm(p.ln1, x)?;
    let self_att = multi_head_attention(f, p.self_attn, h, h, heads, Some(causal))?;
    let self_out = f.dropout(self_att.out)?;
    let x = f.g.add(x, self_out)?;
    let hx = f.layer_norm(p.ln_cross, x)?;
    let cross = multi_head_attention(f, p.cross_attn, hx, context, heads, None)?;
    let cross_out = f.dropout(cross.out)?;
    let x = f.g.add(x, cross_out)?;
    let h2 = f.layer_norm(p.ln2, x)?;
    let m = f.mlp(p.fc1, p.fc2, h2)?;
    let m = f.dropout(m)?;
    f.g.add(x, m)
}

/// Attention pooler: k learnable queries cross-attend to the sequence
/// (keys == values == the sequence), then layer norm. No residual on queries.
pub fn attention_pool<T: Scalar>(
    f: &Fwd<'_, T>,
    p: &PoolerP,
    sequence: Var,
    heads: usize,
) -> Result<AttnOut> {
    let q = f.var(p.queries);
    let att = multi_head_attention(f, p.attn, q, sequence, heads, None)?;
    let out = f.layer_norm(p.ln, att.out)?;
    Ok(AttnOut { out, weights: att.weights })
}
