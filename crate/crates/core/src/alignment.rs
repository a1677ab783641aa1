//! Frozen text encoder, trainable vision encoder with semantic and
//! pixel-aware heads, the contrastive term and the time-weighted hybrid
//! objective.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, TransformerBlock};
use crate::params::{Bound, ParamStore};

/// Parameter-name prefix of the frozen text encoder.
pub const TEXT_PREFIX: &str = "text_encoder.";

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub max_len: usize,
    pub words: usize,
    embed: String,
    pos: String,
    block: TransformerBlock,
    ln: LayerNorm,
    proj: Linear,
}

impl TextEncoder {
    pub fn new(words: usize, max_len: usize, d_model: usize, heads: usize, d: usize) -> Self {
        Self {
            max_len,
            words,
            embed: format!("{TEXT_PREFIX}embed"),
            pos: format!("{TEXT_PREFIX}pos"),
            block: TransformerBlock::new(&format!("{TEXT_PREFIX}block0"), d_model, heads, 2),
            ln: LayerNorm::new(&format!("{TEXT_PREFIX}ln"), d_model),
            proj: Linear::new(&format!("{TEXT_PREFIX}proj"), d_model, d, true),
        }
    }

    /// Initialises and freezes the encoder.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let dm = self.ln.dim;
        store.init_uniform(rng, &self.embed, &[self.words, dm], 1.0);
        store.init_uniform(rng, &self.pos, &[self.max_len, dm], 0.1);
        self.block.init(store, rng);
        self.ln.init(store);
        self.proj.init(store, rng);
        store.freeze_prefix(TEXT_PREFIX);
    }

    /// Mean-pooled embedding of word ids, `1×d`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.max_len {
            return Err(Error::input(format!("text of {} words for encoder of {}", ids.len(), self.max_len)));
        }
        if ids.iter().any(|&i| i >= self.words) {
            return Err(Error::input("text encoder only accepts word ids"));
        }
        let tok = g.embedding(p.var(&self.embed), ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.embedding(p.var(&self.pos), &positions)?;
        let x = g.add(tok, pos)?;
        let x = self.block.forward(g, p, x, None)?;
        let x = self.ln.forward(g, p, x)?;
        let pooled = g.mean_rows(x)?;
        self.proj.forward(g, p, pooled)
    }
}

/// Vision features for one grid.
#[derive(Debug, Clone, Copy)]
pub struct VisionOutput {
    /// `HW×d_model`
    pub v: Var,
    /// `HW×d`
    pub sem: Var,
    /// `HW×pix_dim`
    pub pix: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    pub cells: usize,
    pub feature_dim: usize,
    inp: Linear,
    pos: String,
    block: TransformerBlock,
    ln: LayerNorm,
    pub psi_sem: Linear,
    pub psi_pix: Linear,
}

impl VisionEncoder {
    /// `pix_dim` is the width of the pixel-aware head.
    pub fn new(cells: usize, feature_dim: usize, d_model: usize, heads: usize, d: usize, pix_dim: usize) -> Self {
        Self {
            cells,
            feature_dim,
            inp: Linear::new("vision.in", feature_dim, d_model, true),
            pos: "vision.pos".into(),
            block: TransformerBlock::new("vision.block0", d_model, heads, 2),
            ln: LayerNorm::new("vision.ln", d_model),
            psi_sem: Linear::new("vision.sem", d_model, d, true),
            psi_pix: Linear::new("vision.pix", d_model, pix_dim, true),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.inp.init(store, rng);
        store.init_uniform(rng, &self.pos, &[self.cells, self.ln.dim], 0.1);
        self.block.init(store, rng);
        self.ln.init(store);
        self.psi_sem.init(store, rng);
        self.psi_pix.init(store, rng);
    }

    /// `features` is the dequantized grid as `HW×c`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<VisionOutput> {
        let shape = g.shape(features);
        if shape != [self.cells, self.feature_dim] {
            return Err(Error::shape("vision_encoder", &[self.cells, self.feature_dim], shape));
        }
        let x = self.inp.forward(g, p, features)?;
        let x = g.add(x, p.var(&self.pos))?;
        let x = self.block.forward(g, p, x, None)?;
        let v = self.ln.forward(g, p, x)?;
        let sem = self.psi_sem.forward(g, p, v)?;
        let pix = self.psi_pix.forward(g, p, v)?;
        Ok(VisionOutput { v, sem, pix })
    }
}

/// Runs both encoders: `(V, V_sem, V_pix, T_txt)`.
pub fn encode_pair(
    vision: &VisionEncoder,
    text: &TextEncoder,
    g: &mut Graph,
    p: &Bound,
    features: Var,
    text_ids: &[usize],
) -> Result<(Var, Var, Var, Var)> {
    let out = vision.encode(g, p, features)?;
    let t = text.encode(g, p, text_ids)?;
    Ok((out.v, out.sem, out.pix, t))
}

/// Mean of the rows of `x` selected by `mask`, `1×cols`.
pub fn masked_pool(g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
    let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if idx.is_empty() {
        return Err(Error::contract("pooling over an empty region"));
    }
    let rows = g.gather_rows(x, &idx)?;
    g.mean_rows(rows)
}

/// Symmetric InfoNCE over cosine similarities of matching rows.
pub fn info_nce(g: &mut Graph, vis: Var, txt: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::contract("temperature must be positive"));
    }
    let b = g.shape(vis)[0];
    if b == 0 || g.shape(vis) != g.shape(txt) {
        return Err(Error::shape("info_nce", g.shape(vis), g.shape(txt)));
    }
    let vn = g.l2_normalize_rows(vis)?;
    let tn = g.l2_normalize_rows(txt)?;
    let s = g.matmul_nt(vn, tn)?;
    let s = g.scale(s, 1.0 / temperature)?;
    let st = g.transpose(s)?;
    let diag: Vec<usize> = (0..b).collect();
    let all = alloc::vec![true; b];
    let a = g.cross_entropy(s, &diag, &all)?;
    let c = g.cross_entropy(st, &diag, &all)?;
    let sum = g.add(a, c)?;
    g.scale(sum, 0.5)
}

/// `λ1 = 1 − α_t` on the contrastive term, `λ2 = α_t` on reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_t: f64,
    pub lambda_con: f64,
    pub lambda_recon: f64,
}

impl LossWeights {
    pub fn new(alpha_t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha_t) {
            return Err(Error::contract(format!("alpha_t {alpha_t} outside [0, 1]")));
        }
        Ok(Self {
            alpha_t,
            lambda_con: 1.0 - alpha_t,
            lambda_recon: alpha_t,
        })
    }
}

/// `(1 − α_t)·L_con + α_t·L_recon`.
pub fn hybrid_loss(g: &mut Graph, l_con: Var, l_recon: Var, alpha_t: f64) -> Result<Var> {
    let w = LossWeights::new(alpha_t)?;
    let a = g.scale(l_con, w.lambda_con)?;
    let b = g.scale(l_recon, w.lambda_recon)?;
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_store, GradCheckOptions};
    use crate::tensor::Tensor;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_pair_has_zero_loss() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::row(vec![1.0, 2.0]));
        let t = g.constant(Tensor::row(vec![-3.0, 0.5]));
        let l = info_nce(&mut g, v, t, 0.07).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn orthogonal_pairs_match_closed_form() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::identity(2));
        let t = g.constant(Tensor::identity(2));
        let l = info_nce(&mut g, v, t, 1.0).unwrap();
        let e = core::f64::consts::E;
        assert!((g.value(l).item() + libm::log(e / (e + 1.0))).abs() < 1e-12);
        assert!((g.value(l).item() - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn zero_vector_is_a_contract_error() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let t = g.constant(Tensor::identity(2));
        assert!(matches!(info_nce(&mut g, v, t, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn hybrid_endpoints() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(3.0));
        let r = g.constant(Tensor::scalar(5.0));
        let l0 = hybrid_loss(&mut g, c, r, 0.0).unwrap();
        let l1 = hybrid_loss(&mut g, c, r, 1.0).unwrap();
        let lh = hybrid_loss(&mut g, c, r, 0.5).unwrap();
        assert_eq!(g.value(l0).item(), 3.0);
        assert_eq!(g.value(l1).item(), 5.0);
        assert_eq!(g.value(lh).item(), 4.0);
        assert!(matches!(hybrid_loss(&mut g, c, r, 1.5), Err(Error::Contract(_))));
        let w = LossWeights::new(0.5).unwrap();
        assert_eq!((w.lambda_con, w.lambda_recon), (0.5, 0.5));
    }

    #[test]
    fn text_encoder_is_frozen_and_vision_path_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let text = TextEncoder::new(10, 4, 4, 2, 3);
        let vision = VisionEncoder::new(4, 5, 4, 2, 3, 4);
        let mut store = ParamStore::new();
        text.init(&mut store, &mut rng);
        vision.init(&mut store, &mut rng);
        assert!(store.is_frozen("text_encoder.embed"));
        assert!(!store.is_frozen("vision.in.weight"));
        let feats = Tensor::new(&[4, 5], (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mask = [true, false, true, true];
        let r = grad_check_store(&store, &[feats.clone()], GradCheckOptions::default(), |g, p, v| {
            let (_, sem, pix, t) = encode_pair(&vision, &text, g, p, v[0], &[1, 2])?;
            let pooled = masked_pool(g, sem, &mask)?;
            let both = g.concat_rows(&[pooled, t])?;
            let other = g.concat_rows(&[t, pooled])?;
            let con = info_nce(g, both, other, 0.5)?;
            let px = g.mean(pix)?;
            hybrid_loss(g, con, px, 0.5)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");

        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(feats);
        let (_, _, pix, t) = encode_pair(&vision, &text, &mut g, &p, f, &[3]).unwrap();
        assert_eq!(g.shape(pix), &[4, 4]);
        assert!(!g.requires_grad(t));
    }
}
