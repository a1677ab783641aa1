//! Transformer building blocks shared by every network in the crate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: String,
    pub b: Option<String>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            w: format!("{prefix}.weight"),
            b: bias.then(|| format!("{prefix}.bias")),
            fan_in,
            fan_out,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        store.init_xavier(rng, &self.w, self.fan_in, self.fan_out);
        if let Some(b) = &self.b {
            store.init_const(b, &[1, self.fan_out], 0.0);
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(&self.w))?;
        match &self.b {
            Some(b) => g.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            gain: format!("{prefix}.gain"),
            bias: format!("{prefix}.bias"),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.init_const(&self.gain, &[1, self.dim], 1.0);
        store.init_const(&self.bias, &[1, self.dim], 0.0);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(&self.gain), p.var(&self.bias))
    }
}

/// Additive attention mask: 0 on allowed pairs, `-inf` above the diagonal.
pub fn causal_mask(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            t.data_mut()[i * n + j] = f64::NEG_INFINITY;
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    /// Queries come from `dim`-wide rows, keys and values from
    /// `context_dim`-wide rows.
    pub fn new(prefix: &str, dim: usize, context_dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must divide into heads");
        Self {
            q: Linear::new(&format!("{prefix}.q"), dim, dim, true),
            k: Linear::new(&format!("{prefix}.k"), context_dim, dim, true),
            v: Linear::new(&format!("{prefix}.v"), context_dim, dim, true),
            o: Linear::new(&format!("{prefix}.o"), dim, dim, true),
            heads,
            dim,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(store, rng);
        }
    }

    /// Attends from rows of `x` to rows of `context`. `mask` is an optional
    /// additive `rows(x) × rows(context)` constant.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        context: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, context)?;
        let v = self.v.forward(g, p, context)?;
        let hd = self.dim / self.heads;
        let scale = 1.0 / libm::sqrt(hd as f64);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * hd, hd)?,
                    g.slice_cols(k, h * hd, hd)?,
                    g.slice_cols(v, h * hd, hd)?,
                )
            };
            let s = g.matmul_nt(qh, kh)?;
            let mut s = g.scale(s, scale)?;
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let a = g.softmax(s, 1)?;
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.o.forward(g, p, cat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(prefix: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(&format!("{prefix}.fc1"), dim, hidden, true),
            fc2: Linear::new(&format!("{prefix}.fc2"), hidden, dim, true),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, p, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln x)` then `h + mlp(ln h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(prefix: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), dim),
            attn: MultiHeadAttention::new(&format!("{prefix}.attn"), dim, dim, heads),
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), dim),
            mlp: Mlp::new(&format!("{prefix}.mlp"), dim, dim * mlp_ratio),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.ln1.init(store);
        self.attn.init(store, rng);
        self.ln2.init(store);
        self.mlp.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mask: Option<Var>) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let m = self.mlp.forward(g, p, h)?;
        g.add(x, m)
    }
}
