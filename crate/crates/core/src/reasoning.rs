//! Causal instruction model, edit-signal extraction, the hierarchical
//! reasoning module and the reasoning-attention bridge.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, LayerNorm, Linear, TransformerBlock};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MllmConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Bridge feature dimension `d`.
    pub d: usize,
    /// Cap on generated tokens after REASON.
    pub t_max: usize,
    pub max_context: usize,
}

impl MllmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::input("d_model must be divisible by the head count"));
        }
        if self.t_max == 0 || self.layers == 0 || self.d == 0 {
            return Err(Error::input("t_max, layers and d must be positive"));
        }
        Ok(())
    }
}

/// Decoder-only transformer over `visual ++ text ++ REASON ++ generated`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mllm {
    pub cfg: MllmConfig,
    pub vocab_size: usize,
    embed: String,
    pos: String,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head: Linear,
    /// ψ: edit-token hidden state to the bridge dimension.
    pub psi: Linear,
    /// Γ: shared per-step projection of reasoning states.
    pub gamma: Linear,
}

impl Mllm {
    pub fn new(cfg: MllmConfig, vocab_size: usize) -> Self {
        let dm = cfg.d_model;
        Self {
            embed: "mllm.embed".into(),
            pos: "mllm.pos".into(),
            blocks: (0..cfg.layers)
                .map(|l| TransformerBlock::new(&format!("mllm.block{l}"), dm, cfg.heads, 4))
                .collect(),
            ln_f: LayerNorm::new("mllm.ln_f", dm),
            head: Linear::new("mllm.head", dm, vocab_size, true),
            psi: Linear::new("mllm.psi", dm, cfg.d, false),
            gamma: Linear::new("mllm.gamma", dm, dm, false),
            vocab_size,
            cfg,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let dm = self.cfg.d_model;
        store.init_uniform(rng, &self.embed, &[self.vocab_size, dm], 0.1);
        store.init_uniform(rng, &self.pos, &[self.cfg.max_context, dm], 0.1);
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.ln_f.init(store);
        self.head.init(store, rng);
        self.psi.init(store, rng);
        self.gamma.init(store, rng);
    }

    /// Final-layer hidden states, one row per input position.
    pub fn hidden(&self, g: &mut Graph, p: &Bound, ids: &[usize]) -> Result<Var> {
        let n = ids.len();
        if n == 0 || n > self.cfg.max_context {
            return Err(Error::input(format!(
                "sequence of {n} tokens does not fit context of {}",
                self.cfg.max_context
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::input(format!("token id {bad} outside vocabulary")));
        }
        let tok = g.embedding(p.var(&self.embed), ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.embedding(p.var(&self.pos), &positions)?;
        let mut x = g.add(tok, pos)?;
        let mask = g.constant(causal_mask(n));
        for b in &self.blocks {
            x = b.forward(g, p, x, Some(mask))?;
        }
        self.ln_f.forward(g, p, x)
    }

    pub fn logits(&self, g: &mut Graph, p: &Bound, hidden: Var) -> Result<Var> {
        self.head.forward(g, p, hidden)
    }

    /// Greedy decoding from `prompt` (which should end in REASON) until
    /// `eos` or `t_max` new tokens.
    pub fn generate(&self, store: &ParamStore, prompt: &[usize], eos: usize) -> Result<Decoded> {
        let mut seq = prompt.to_vec();
        let room = self.cfg.max_context.saturating_sub(prompt.len());
        if room == 0 {
            return Err(Error::input("prompt fills the whole context"));
        }
        for _ in 0..self.cfg.t_max.min(room) {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let h = self.hidden(&mut g, &p, &seq)?;
            let last = g.gather_rows(h, &[seq.len() - 1])?;
            let logits = self.logits(&mut g, &p, last)?;
            let next = argmax(g.value(logits).data());
            seq.push(next);
            if next == eos {
                break;
            }
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let h = self.hidden(&mut g, &p, &seq)?;
        Ok(Decoded {
            prompt_len: prompt.len(),
            hidden: g.value(h).clone(),
            sequence: seq,
        })
    }

    /// `h_edit = ψ(h̃_k)` for row `k` of `hidden`.
    pub fn extract_edit_signal(&self, g: &mut Graph, p: &Bound, hidden: Var, k: usize) -> Result<Var> {
        if k >= g.shape(hidden)[0] {
            return Err(Error::contract(format!(
                "edit position {k} outside {} hidden states",
                g.shape(hidden)[0]
            )));
        }
        let row = g.gather_rows(hidden, &[k])?;
        self.psi.forward(g, p, row)
    }

    /// Γ applied to the states strictly between `reason` and `k`.
    /// Returns `None` when EDIT immediately follows REASON.
    pub fn project_reason_states(
        &self,
        g: &mut Graph,
        p: &Bound,
        hidden: Var,
        reason: usize,
        k: usize,
    ) -> Result<Option<Var>> {
        if k <= reason || k > g.shape(hidden)[0] {
            return Err(Error::contract(format!("edit position {k} must follow reason position {reason}")));
        }
        if k == reason + 1 {
            return Ok(None);
        }
        let idx: Vec<usize> = (reason + 1..k).collect();
        let rows = g.gather_rows(hidden, &idx)?;
        self.gamma.forward(g, p, rows).map(Some)
    }
}

/// Output of [`Mllm::generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub prompt_len: usize,
    /// Prompt followed by generated ids.
    pub sequence: Vec<usize>,
    /// Final-layer hidden states over `sequence`.
    pub hidden: Tensor,
}

impl Decoded {
    pub fn generated(&self) -> &[usize] {
        &self.sequence[self.prompt_len..]
    }

    pub fn reason_position(&self) -> usize {
        self.prompt_len - 1
    }
}

/// Index of the largest value, first on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Iterated block over `h ‖ V_global`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hrm {
    pub d_model: usize,
    inputs: Vec<Linear>,
    blocks: Vec<TransformerBlock>,
}

impl Hrm {
    /// `per_step` gives every iteration up to `max_steps` its own weights;
    /// otherwise one block is shared.
    pub fn new(d_model: usize, heads: usize, per_step: bool, max_steps: usize) -> Self {
        let n = if per_step { max_steps.max(1) } else { 1 };
        Self {
            d_model,
            inputs: (0..n)
                .map(|i| Linear::new(&format!("hrm.in{i}"), 2 * d_model, d_model, true))
                .collect(),
            blocks: (0..n)
                .map(|i| TransformerBlock::new(&format!("hrm.block{i}"), d_model, heads, 2))
                .collect(),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for (l, b) in self.inputs.iter().zip(&self.blocks) {
            l.init(store, rng);
            b.init(store, rng);
        }
    }

    /// `v_global = mean of rows of v`.
    pub fn pool(g: &mut Graph, v: Var) -> Result<Var> {
        g.mean_rows(v)
    }

    /// One iteration `h ↦ Block(In(h ‖ v_global))` using weights of step `t`.
    pub fn step(&self, g: &mut Graph, p: &Bound, h: Var, v_global: Var, t: usize) -> Result<Var> {
        let i = t.min(self.blocks.len() - 1);
        let x = g.concat_cols(&[h, v_global])?;
        let x = self.inputs[i].forward(g, p, x)?;
        self.blocks[i].forward(g, p, x, None)
    }

    /// Runs `steps` iterations from `h0` (`1×d_model`) against the pooled
    /// features of `v` (`HW×d_model`).
    pub fn reason(&self, g: &mut Graph, p: &Bound, h0: Var, v: Var, steps: usize) -> Result<Var> {
        self.reason_from(g, p, h0, v, 0, steps)
    }

    /// Like [`Hrm::reason`] but starting at iteration index `start`, so
    /// split runs use the same per-step weights as one long run.
    pub fn reason_from(&self, g: &mut Graph, p: &Bound, h0: Var, v: Var, start: usize, steps: usize) -> Result<Var> {
        if steps == 0 {
            return Ok(h0);
        }
        let vg = Self::pool(g, v)?;
        let mut h = h0;
        for t in start..start + steps {
            h = self.step(g, p, h, vg, t)?;
        }
        Ok(h)
    }
}

/// Cross-attention from the edit signal over spatial features.
#[derive(Debug, Clone, PartialEq)]
pub struct Rab {
    pub d: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

impl Rab {
    pub fn new(d_model: usize, d: usize) -> Self {
        Self {
            d,
            wq: Linear::new("rab.wq", d, d, false),
            wk: Linear::new("rab.wk", d_model, d, false),
            wv: Linear::new("rab.wv", d_model, d, false),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.wq.init(store, rng);
        self.wk.init(store, rng);
        self.wv.init(store, rng);
    }

    /// Pre-softmax scores `(W_Q h)(W_K V_ij)ᵀ/√d` as `1×HW`.
    pub fn scores(&self, g: &mut Graph, p: &Bound, h_edit: Var, v: Var) -> Result<Var> {
        let q = self.wq.forward(g, p, h_edit)?;
        let k = self.wk.forward(g, p, v)?;
        let s = g.matmul_nt(q, k)?;
        g.scale(s, 1.0 / libm::sqrt(self.d as f64))
    }

    /// Returns `(α, Z)`: `α` is `1×HW` and sums to one, `Z = Σ α_ij W_V V_ij`.
    pub fn attend(&self, g: &mut Graph, p: &Bound, h_edit: Var, v: Var) -> Result<(Var, Var)> {
        let s = self.scores(g, p, h_edit, v)?;
        let alpha = g.softmax(s, 1)?;
        let vals = self.wv.forward(g, p, v)?;
        let z = g.matmul(alpha, vals)?;
        Ok((alpha, z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_store, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small_cfg() -> MllmConfig {
        MllmConfig {
            d_model: 8,
            heads: 2,
            layers: 2,
            d: 8,
            t_max: 6,
            max_context: 24,
        }
    }

    #[test]
    fn rab_single_cell_puts_all_weight_there() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rab = Rab::new(4, 3);
        let mut store = ParamStore::new();
        rab.init(&mut store, &mut rng);
        let h = random(&mut rng, &[1, 3]);
        let v = random(&mut rng, &[1, 4]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (hv, vv) = (g.constant(h), g.constant(v.clone()));
        let (a, z) = rab.attend(&mut g, &p, hv, vv).unwrap();
        assert_eq!(g.value(a).data(), &[1.0]);
        let wv = store.get("rab.wv.weight").unwrap();
        let want = crate::tensor::kernels::matmul(v.data(), wv.data(), 1, 4, 3);
        assert_eq!(g.value(z).data(), &want[..]);
    }

    #[test]
    fn rab_identical_cells_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rab = Rab::new(4, 4);
        let mut store = ParamStore::new();
        rab.init(&mut store, &mut rng);
        let cell = random(&mut rng, &[1, 4]);
        let v = Tensor::from_rows(&[cell.data(); 6]).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let h = g.constant(random(&mut rng, &[1, 4]));
        let vv = g.constant(v);
        let (a, _) = rab.attend(&mut g, &p, h, vv).unwrap();
        for &x in g.value(a).data() {
            assert!((x - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hrm_zero_steps_is_identity_and_pool_of_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hrm = Hrm::new(4, 2, false, 2);
        let mut store = ParamStore::new();
        hrm.init(&mut store, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let h0 = g.constant(random(&mut rng, &[1, 4]));
        let v = g.constant(Tensor::full(&[4, 4], 0.25));
        let out = hrm.reason(&mut g, &p, h0, v, 0).unwrap();
        assert_eq!(out, h0);
        let vg = Hrm::pool(&mut g, v).unwrap();
        assert_eq!(g.value(vg).data(), &[0.25; 4]);
    }

    #[test]
    fn psi_and_gamma_are_linear_without_bias() {
        let mllm = Mllm::new(small_cfg(), 12);
        let mut store = ParamStore::new();
        mllm.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let zeros = g.constant(Tensor::zeros(&[5, 8]));
        let e = mllm.extract_edit_signal(&mut g, &p, zeros, 4).unwrap();
        assert!(g.value(e).data().iter().all(|&x| x == 0.0));
        let r = mllm.project_reason_states(&mut g, &p, zeros, 1, 4).unwrap().unwrap();
        assert_eq!(g.shape(r), &[2, 8]);
        assert!(g.value(r).data().iter().all(|&x| x == 0.0));
        assert!(mllm.project_reason_states(&mut g, &p, zeros, 1, 2).unwrap().is_none());
        assert!(matches!(
            mllm.extract_edit_signal(&mut g, &p, zeros, 5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn identity_psi_passes_the_state_through() {
        let mllm = Mllm::new(small_cfg(), 12);
        let mut store = ParamStore::new();
        mllm.init(&mut store, &mut ChaCha8Rng::seed_from_u64(4));
        store.insert("mllm.psi.weight", Tensor::identity(8));
        let h = random(&mut ChaCha8Rng::seed_from_u64(5), &[3, 8]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let hv = g.constant(h.clone());
        let e = mllm.extract_edit_signal(&mut g, &p, hv, 1).unwrap();
        assert_eq!(g.value(e).data(), h.row_slice(1));
    }

    #[test]
    fn context_overflow_is_an_input_error() {
        let mllm = Mllm::new(small_cfg(), 12);
        let mut store = ParamStore::new();
        mllm.init(&mut store, &mut ChaCha8Rng::seed_from_u64(6));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let ids = [0usize; 25];
        assert!(matches!(mllm.hidden(&mut g, &p, &ids), Err(Error::Input(_))));
    }

    #[test]
    fn causal_prefix_is_independent_of_suffix() {
        let mllm = Mllm::new(small_cfg(), 12);
        let mut store = ParamStore::new();
        mllm.init(&mut store, &mut ChaCha8Rng::seed_from_u64(7));
        let run = |ids: &[usize]| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let h = mllm.hidden(&mut g, &p, ids).unwrap();
            g.value(h).clone()
        };
        let a = run(&[1, 2, 3, 4, 5]);
        let b = run(&[1, 2, 3, 9, 0]);
        assert_eq!(&a.data()[..24], &b.data()[..24]);
        assert_ne!(&a.data()[24..], &b.data()[24..]);
    }

    #[test]
    fn decoding_is_deterministic() {
        let mllm = Mllm::new(small_cfg(), 12);
        let mut store = ParamStore::new();
        mllm.init(&mut store, &mut ChaCha8Rng::seed_from_u64(8));
        let a = mllm.generate(&store, &[1, 2, 3], 11).unwrap();
        let b = mllm.generate(&store, &[1, 2, 3], 11).unwrap();
        assert_eq!(a.sequence, b.sequence);
        assert!(a.hidden.bit_eq(&b.hidden));
        assert!(a.generated().len() <= 6);
    }

    #[test]
    fn hrm_and_rab_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hrm = Hrm::new(4, 2, true, 2);
        let rab = Rab::new(4, 4);
        let mut store = ParamStore::new();
        hrm.init(&mut store, &mut rng);
        rab.init(&mut store, &mut rng);
        let inputs = [random(&mut rng, &[1, 4]), random(&mut rng, &[6, 4])];
        let w = random(&mut rng, &[1, 4]);
        let r = grad_check_store(&store, &inputs, GradCheckOptions::default(), |g, p, v| {
            let h = hrm.reason(g, p, v[0], v[1], 2)?;
            let (_, z) = rab.attend(g, p, h, v[1])?;
            let w = g.constant(w.clone());
            let y = g.mul(z, w)?;
            g.sum(y)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
