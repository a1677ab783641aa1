//! Absorbing-state discrete diffusion over token grids.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use core::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention, TransformerBlock};
use crate::params::{Bound, ParamStore};
use crate::tensor::{kernels, Tensor};
use crate::tokenization::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleFamily {
    Cosine,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub family: ScheduleFamily,
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Self {
        Self {
            steps,
            family: ScheduleFamily::Cosine,
        }
    }

    /// Mask rate at step `tau`: 0 at `tau = 0`, 1 at `tau = steps`.
    pub fn rate(&self, tau: usize) -> Result<f64> {
        if self.steps == 0 {
            return Err(Error::contract("schedule needs at least one step"));
        }
        if tau > self.steps {
            return Err(Error::contract(format!("step {tau} beyond schedule of {}", self.steps)));
        }
        if tau == self.steps {
            return Ok(1.0);
        }
        let x = tau as f64 / self.steps as f64;
        Ok(match self.family {
            ScheduleFamily::Cosine => 1.0 - libm::cos(FRAC_PI_2 * x),
            ScheduleFamily::Linear => x,
        })
    }

    /// Smallest step whose rate reaches `fraction`.
    pub fn step_for_rate(&self, fraction: f64) -> usize {
        (0..=self.steps)
            .find(|&t| self.rate(t).unwrap() >= fraction)
            .unwrap_or(self.steps)
    }
}

/// A partially absorbed grid. `grid` holds MASK exactly where `mask` is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffusionState {
    grid: TokenGrid,
    mask: Vec<bool>,
    tau: usize,
}

impl DiffusionState {
    pub fn new(grid: TokenGrid, tau: usize) -> Self {
        let mask = grid.ids().iter().map(|&i| i == TokenGrid::MASK).collect();
        Self { grid, mask, tau }
    }

    pub fn grid(&self) -> &TokenGrid {
        &self.grid
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Writes `id` into a masked cell.
    pub fn commit(&mut self, cell: usize, id: u32) {
        debug_assert!(self.mask[cell] && id != TokenGrid::MASK);
        self.grid.ids_mut()[cell] = id;
        self.mask[cell] = false;
    }

    pub fn set_tau(&mut self, tau: usize) {
        self.tau = tau;
    }
}

/// Replaces each cell by MASK independently with probability `rate`.
pub fn mask_with_rate<R: Rng>(grid: &TokenGrid, rate: f64, tau: usize, rng: &mut R) -> Result<DiffusionState> {
    if grid.has_mask() {
        return Err(Error::contract("forward masking expects a clean grid"));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::contract(format!("mask rate {rate} outside [0, 1]")));
    }
    let mut g = grid.clone();
    for id in g.ids_mut() {
        if rng.random::<f64>() < rate {
            *id = TokenGrid::MASK;
        }
    }
    Ok(DiffusionState::new(g, tau))
}

/// Like [`mask_with_rate`] but only cells of `region` may be masked. At
/// least one region cell is masked when the region is non-empty.
pub fn mask_region_with_rate<R: Rng>(
    grid: &TokenGrid,
    region: &[bool],
    rate: f64,
    tau: usize,
    rng: &mut R,
) -> Result<DiffusionState> {
    if region.len() != grid.len() {
        return Err(Error::shape("mask_region_with_rate", &[grid.len()], &[region.len()]));
    }
    if grid.has_mask() {
        return Err(Error::contract("forward masking expects a clean grid"));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::contract(format!("mask rate {rate} outside [0, 1]")));
    }
    let mut g = grid.clone();
    let mut any = false;
    for (id, &r) in g.ids_mut().iter_mut().zip(region) {
        if r && rng.random::<f64>() < rate {
            *id = TokenGrid::MASK;
            any = true;
        }
    }
    let cells: Vec<usize> = (0..region.len()).filter(|&i| region[i]).collect();
    if !any && !cells.is_empty() {
        g.ids_mut()[cells[rng.random_range(0..cells.len())]] = TokenGrid::MASK;
    }
    Ok(DiffusionState::new(g, tau))
}

pub fn forward_mask<R: Rng>(
    grid: &TokenGrid,
    tau: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<DiffusionState> {
    mask_with_rate(grid, schedule.rate(tau)?, tau, rng)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
}

/// Which conditioning paths are wired in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserWiring {
    /// Reasoning-attention layers, the bridge summary and the spatial prior.
    pub bridge: bool,
    pub hrm: bool,
    pub gates: bool,
}

/// Graph values conditioning one denoiser call.
#[derive(Debug, Clone, Copy)]
pub struct EditCondition {
    /// `1×d`
    pub h_edit: Var,
    /// `1×d`, bridge only.
    pub z: Option<Var>,
    /// `1×d_model`, HRM only.
    pub h_reason: Option<Var>,
    /// `1×HW` attention weights, bridge only.
    pub prior: Option<Var>,
    /// `HW×dim` pixel-aware features of the source grid.
    pub visual: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
struct CrossLayer {
    ln: LayerNorm,
    attn: MultiHeadAttention,
}

/// Residual sigmoid gate `x + g ⊙ (y − x)`, `g = σ(x·w + b)` per position.
#[derive(Debug, Clone, PartialEq)]
struct Gate {
    lin: Linear,
}

impl Gate {
    fn new(prefix: &str, dim: usize) -> Self {
        Self {
            lin: Linear::new(prefix, dim, 1, true),
        }
    }

    fn init(&self, store: &mut ParamStore) {
        store.init_const(&self.lin.w, &[self.lin.fan_in, 1], 0.0);
        store.init_const(self.lin.b.as_ref().unwrap(), &[1, 1], GATE_BIAS_INIT);
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var, y: Var) -> Result<Var> {
        let s = self.lin.forward(g, p, x)?;
        let gate = g.sigmoid(s)?;
        let d = g.sub(y, x)?;
        let d = g.mul_col(d, gate)?;
        g.add(x, d)
    }
}

/// Initial gate bias; `σ(4) ≈ 0.982` so gated layers start near their
/// ungated output.
pub const GATE_BIAS_INIT: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub wiring: DenoiserWiring,
    pub codes: usize,
    pub cells: usize,
    pub schedule_steps: usize,
    tok: String,
    pos: String,
    step: String,
    alpha_w: String,
    proj_edit: Linear,
    proj_z: Linear,
    proj_reason: Linear,
    blocks: Vec<TransformerBlock>,
    cross: Vec<CrossLayer>,
    self_gates: Vec<Gate>,
    cross_gates: Vec<Gate>,
    ln_f: LayerNorm,
    head: Linear,
}

impl Denoiser {
    /// `d` is the edit-signal width and `d_model` the reasoning-state width.
    pub fn new(
        cfg: DenoiserConfig,
        wiring: DenoiserWiring,
        codes: usize,
        cells: usize,
        schedule_steps: usize,
        d: usize,
        d_model: usize,
    ) -> Self {
        let dim = cfg.dim;
        let layers = cfg.layers;
        Self {
            tok: "den.tok".into(),
            pos: "den.pos".into(),
            step: "den.step".into(),
            alpha_w: "den.alpha".into(),
            proj_edit: Linear::new("den.cond_edit", d, dim, true),
            proj_z: Linear::new("den.cond_z", d, dim, false),
            proj_reason: Linear::new("den.cond_reason", d_model, dim, false),
            blocks: (0..layers)
                .map(|l| TransformerBlock::new(&format!("den.block{l}"), dim, cfg.heads, 4))
                .collect(),
            cross: (0..layers)
                .map(|l| CrossLayer {
                    ln: LayerNorm::new(&format!("den.cross{l}.ln"), dim),
                    attn: MultiHeadAttention::new(&format!("den.cross{l}.attn"), dim, dim, cfg.heads),
                })
                .collect(),
            self_gates: (0..layers).map(|l| Gate::new(&format!("den.gate_self{l}"), dim)).collect(),
            cross_gates: (0..layers).map(|l| Gate::new(&format!("den.gate_cross{l}"), dim)).collect(),
            ln_f: LayerNorm::new("den.ln_f", dim),
            head: Linear::new("den.head", dim, codes, true),
            cfg,
            wiring,
            codes,
            cells,
            schedule_steps,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let dim = self.cfg.dim;
        store.init_uniform(rng, &self.tok, &[self.codes + 1, dim], 0.1);
        store.init_uniform(rng, &self.pos, &[self.cells, dim], 0.1);
        store.init_uniform(rng, &self.step, &[self.schedule_steps + 1, dim], 0.1);
        self.proj_edit.init(store, rng);
        if self.wiring.bridge {
            store.init_uniform(rng, &self.alpha_w, &[1, dim], 0.1);
            self.proj_z.init(store, rng);
            for c in &self.cross {
                c.ln.init(store);
                c.attn.init(store, rng);
            }
        }
        if self.wiring.hrm {
            self.proj_reason.init(store, rng);
        }
        for b in &self.blocks {
            b.init(store, rng);
        }
        if self.wiring.gates {
            for gt in self.self_gates.iter().chain(if self.wiring.bridge { &self.cross_gates[..] } else { &[] }) {
                gt.init(store);
            }
        }
        self.ln_f.init(store);
        self.head.init(store, rng);
    }

    /// Condition tokens: projected edit signal, bridge summary and
    /// reasoning state, as rows.
    fn condition_tokens(&self, g: &mut Graph, p: &Bound, cond: &EditCondition) -> Result<Vec<Var>> {
        let mut rows = vec![self.proj_edit.forward(g, p, cond.h_edit)?];
        if self.wiring.bridge {
            let z = cond.z.ok_or_else(|| Error::contract("bridge wiring needs Z"))?;
            rows.push(self.proj_z.forward(g, p, z)?);
        }
        if self.wiring.hrm {
            let h = cond.h_reason.ok_or_else(|| Error::contract("HRM wiring needs a reasoning state"))?;
            rows.push(self.proj_reason.forward(g, p, h)?);
        }
        Ok(rows)
    }

    /// `HW×K` logits for every cell of `state`.
    pub fn logits(&self, g: &mut Graph, p: &Bound, state: &DiffusionState, cond: &EditCondition) -> Result<Var> {
        let n = state.grid().len();
        if n != self.cells {
            return Err(Error::shape("denoiser", &[self.cells], &[n]));
        }
        if state.tau() > self.schedule_steps {
            return Err(Error::contract("diffusion step beyond schedule"));
        }
        let ids: Vec<usize> = state
            .grid()
            .ids()
            .iter()
            .map(|&i| if i == TokenGrid::MASK { self.codes } else { i as usize })
            .collect();
        if ids.iter().any(|&i| i > self.codes) {
            return Err(Error::input("token id outside codebook"));
        }
        let tok = g.embedding(p.var(&self.tok), &ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.embedding(p.var(&self.pos), &positions)?;
        let step = g.embedding(p.var(&self.step), &[state.tau()])?;
        let mut x = g.add(tok, pos)?;
        x = g.add_row(x, step)?;
        if let Some(v) = cond.visual {
            x = g.add(x, v)?;
        }
        let tokens = self.condition_tokens(g, p, cond)?;
        let mut stream = tokens[0];
        for &t in &tokens[1..] {
            stream = g.add(stream, t)?;
        }
        x = g.add_row(x, stream)?;
        if self.wiring.bridge {
            let a = cond.prior.ok_or_else(|| Error::contract("bridge wiring needs a spatial prior"))?;
            let col = g.transpose(a)?;
            let col = g.scale(col, n as f64)?;
            let spread = g.matmul(col, p.var(&self.alpha_w))?;
            x = g.add(x, spread)?;
        }
        let ctx = if self.wiring.bridge {
            Some(g.concat_rows(&tokens)?)
        } else {
            None
        };
        for l in 0..self.cfg.layers {
            let y = self.blocks[l].forward(g, p, x, None)?;
            x = if self.wiring.gates {
                self.self_gates[l].apply(g, p, x, y)?
            } else {
                y
            };
            if let Some(ctx) = ctx {
                let c = &self.cross[l];
                let h = c.ln.forward(g, p, x)?;
                let a = c.attn.forward(g, p, h, ctx, None)?;
                let y = g.add(x, a)?;
                x = if self.wiring.gates {
                    self.cross_gates[l].apply(g, p, x, y)?
                } else {
                    y
                };
            }
        }
        let x = self.ln_f.forward(g, p, x)?;
        self.head.forward(g, p, x)
    }
}

/// Mean negative log-likelihood of `target` over masked cells.
pub fn reconstruct_loss(g: &mut Graph, logits: Var, target: &TokenGrid, mask: &[bool]) -> Result<Var> {
    if target.has_mask() {
        return Err(Error::contract("reconstruction target contains MASK"));
    }
    let t: Vec<usize> = target.ids().iter().map(|&i| i as usize).collect();
    g.cross_entropy(logits, &t, mask)
}

/// Anything that scores a partially masked grid.
pub trait Denoise {
    /// `HW×K` logits.
    fn predict(&self, state: &DiffusionState) -> Result<Tensor>;
}

impl<F> Denoise for F
where
    F: Fn(&DiffusionState) -> Result<Tensor>,
{
    fn predict(&self, state: &DiffusionState) -> Result<Tensor> {
        self(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    /// `0` picks the most likely code; otherwise codes are drawn from the
    /// tempered softmax.
    pub temperature: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 8,
            temperature: 0.0,
        }
    }
}

/// One committed cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Commit {
    pub round: usize,
    pub cell: usize,
    pub id: u32,
    pub confidence: f64,
}

/// Cells still masked after `round` of `steps` under the cosine plan.
pub fn unmask_plan(n0: usize, round: usize, steps: usize) -> usize {
    if round >= steps {
        return 0;
    }
    libm::floor(n0 as f64 * libm::cos(FRAC_PI_2 * round as f64 / steps as f64)) as usize
}

/// Resynthesises the cells of `edit_mask` by iterative unmasking. Cells
/// outside the mask are copied from `source` and never written.
pub fn sample_edit<D: Denoise, R: Rng>(
    denoiser: &D,
    source: &TokenGrid,
    edit_mask: &[bool],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(TokenGrid, Vec<Commit>)> {
    if cfg.steps < 1 {
        return Err(Error::contract("sampler needs at least one round"));
    }
    if edit_mask.len() != source.len() {
        return Err(Error::shape("sample_edit", &[source.len()], &[edit_mask.len()]));
    }
    if source.has_mask() {
        return Err(Error::contract("source grid contains MASK"));
    }
    let mut ids = source.ids().to_vec();
    for (id, &m) in ids.iter_mut().zip(edit_mask) {
        if m {
            *id = TokenGrid::MASK;
        }
    }
    let n0 = edit_mask.iter().filter(|&&m| m).count();
    let mut state = DiffusionState::new(TokenGrid::new(source.height(), source.width(), ids)?, 0);
    let mut trace = Vec::new();
    for round in 1..=cfg.steps {
        let remaining = state.masked_count();
        if remaining == 0 {
            break;
        }
        let frac = remaining as f64 / source.len() as f64;
        state.set_tau(schedule.step_for_rate(frac));
        let logits = denoiser.predict(&state)?;
        let k = logits.cols();
        let mut proposals = Vec::with_capacity(remaining);
        for cell in (0..source.len()).filter(|&c| state.mask()[c]) {
            let row = logits.row_slice(cell);
            let (id, conf) = draw(row, cfg.temperature, rng);
            debug_assert!(id < k);
            proposals.push((cell, id as u32, conf));
        }
        proposals.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        let keep = unmask_plan(n0, round, cfg.steps).min(remaining);
        for &(cell, id, confidence) in &proposals[..remaining - keep] {
            state.commit(cell, id);
            trace.push(Commit {
                round,
                cell,
                id,
                confidence,
            });
        }
    }
    Ok((state.grid().clone(), trace))
}

/// Picks a code from one row of logits and returns it with its probability.
fn draw<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> (usize, f64) {
    if temperature <= 0.0 {
        let probs = kernels::softmax(logits, &[logits.len()], 0);
        let best = crate::reasoning::argmax(&probs);
        return (best, probs[best]);
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let probs = kernels::softmax(&scaled, &[scaled.len()], 0);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return (i, p);
        }
    }
    let last = probs.len() - 1;
    (last, probs[last])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_store, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let s = NoiseSchedule::cosine(10);
        assert_eq!(s.rate(0).unwrap(), 0.0);
        assert_eq!(s.rate(10).unwrap(), 1.0);
        assert!((s.rate(5).unwrap() - (1.0 - libm::cos(core::f64::consts::FRAC_PI_4))).abs() < 1e-15);
        assert!(matches!(s.rate(11), Err(Error::Contract(_))));
        for t in 0..10 {
            assert!(s.rate(t).unwrap() <= s.rate(t + 1).unwrap());
        }
    }

    #[test]
    fn mask_extremes() {
        let g = TokenGrid::new(2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = forward_mask(&g, 0, &NoiseSchedule::cosine(4), &mut rng).unwrap();
        assert_eq!(s.grid(), &g);
        assert_eq!(s.masked_count(), 0);
        let s = forward_mask(&g, 4, &NoiseSchedule::cosine(4), &mut rng).unwrap();
        assert!(s.grid().ids().iter().all(|&i| i == TokenGrid::MASK));
        assert!(s.mask().iter().all(|&m| m));
    }

    #[test]
    fn unmask_plan_reaches_zero() {
        assert_eq!(unmask_plan(10, 0, 4), 10);
        assert_eq!(unmask_plan(10, 4, 4), 0);
        for r in 0..4 {
            assert!(unmask_plan(10, r, 4) >= unmask_plan(10, r + 1, 4));
        }
    }

    #[test]
    fn empty_edit_mask_is_a_no_op() {
        let src = TokenGrid::new(2, 2, vec![3, 1, 0, 2]).unwrap();
        let den = |_: &DiffusionState| -> Result<Tensor> { panic!("no cells to predict") };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, trace) =
            sample_edit(&den, &src, &[false; 4], &NoiseSchedule::cosine(8), &SamplerConfig::default(), &mut rng)
                .unwrap();
        assert_eq!(out, src);
        assert!(trace.is_empty());
    }

    #[test]
    fn zero_rounds_is_a_contract_error() {
        let src = TokenGrid::new(1, 1, vec![0]).unwrap();
        let den = |_: &DiffusionState| Ok(Tensor::zeros(&[1, 2]));
        let cfg = SamplerConfig {
            steps: 0,
            temperature: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = sample_edit(&den, &src, &[true], &NoiseSchedule::cosine(8), &cfg, &mut rng);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn sampler_only_writes_masked_cells() {
        let src = TokenGrid::new(3, 3, (0..9).collect()).unwrap();
        let mask = [false, true, true, false, true, false, false, false, true];
        let den = |s: &DiffusionState| {
            let mut t = Tensor::zeros(&[9, 16]);
            for c in 0..9 {
                t.data_mut()[c * 16 + 15 - c] = 5.0 + s.tau() as f64;
            }
            Ok(t)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SamplerConfig {
            steps: 3,
            temperature: 1.0,
        };
        let (out, trace) = sample_edit(&den, &src, &mask, &NoiseSchedule::cosine(8), &cfg, &mut rng).unwrap();
        assert_eq!(trace.len(), 4);
        for c in 0..9 {
            if !mask[c] {
                assert_eq!(out.ids()[c], src.ids()[c]);
            }
            assert_ne!(out.ids()[c], TokenGrid::MASK);
        }
    }

    #[test]
    fn greedy_commits_highest_confidence_first() {
        let src = TokenGrid::new(1, 3, vec![0, 0, 0]).unwrap();
        let den = |_: &DiffusionState| Tensor::matrix(3, 2, vec![0.0, 1.0, 0.0, 3.0, 0.0, 2.0]);
        let cfg = SamplerConfig {
            steps: 3,
            temperature: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, trace) = sample_edit(&den, &src, &[true; 3], &NoiseSchedule::cosine(4), &cfg, &mut rng).unwrap();
        let order: Vec<usize> = trace.iter().map(|c| c.cell).collect();
        assert_eq!(order, vec![1, 2, 0]);
    }

    fn tiny(wiring: DenoiserWiring) -> (Denoiser, ParamStore) {
        let cfg = DenoiserConfig {
            dim: 4,
            heads: 2,
            layers: 1,
        };
        let den = Denoiser::new(cfg, wiring, 3, 4, 4, 3, 4);
        let mut store = ParamStore::new();
        den.init(&mut store, &mut ChaCha8Rng::seed_from_u64(4));
        (den, store)
    }

    const ALL: DenoiserWiring = DenoiserWiring {
        bridge: true,
        hrm: true,
        gates: true,
    };

    fn cond_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let mut r = |s: &[usize]| {
            let n = s.iter().product();
            Tensor::new(s, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let alpha = Tensor::row(vec![0.1, 0.2, 0.3, 0.4]);
        vec![r(&[1, 3]), r(&[1, 3]), r(&[1, 4]), alpha, r(&[4, 4])]
    }

    fn run(den: &Denoiser, g: &mut Graph, p: &Bound, v: &[Var], state: &DiffusionState) -> Result<Var> {
        let cond = EditCondition {
            h_edit: v[0],
            z: Some(v[1]),
            h_reason: Some(v[2]),
            prior: Some(v[3]),
            visual: Some(v[4]),
        };
        den.logits(g, p, state, &cond)
    }

    #[test]
    fn gates_start_near_open() {
        let (den, store) = tiny(ALL);
        let b = store.get("den.gate_self0.bias").unwrap().item();
        assert_eq!(b, GATE_BIAS_INIT);
        let g = kernels::sigmoid(b);
        assert!((g - 0.982).abs() < 1e-3);
        let state = DiffusionState::new(TokenGrid::new(2, 2, vec![0, TokenGrid::MASK, 2, 1]).unwrap(), 2);
        let mut graph = Graph::new();
        let p = store.bind(&mut graph);
        let inputs = cond_inputs(&mut ChaCha8Rng::seed_from_u64(5));
        let v: Vec<Var> = inputs.into_iter().map(|t| graph.constant(t)).collect();
        let out = run(&den, &mut graph, &p, &v, &state).unwrap();
        assert_eq!(graph.shape(out), &[4, 3]);
    }

    #[test]
    fn reconstruct_loss_uniform_logits() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[4, 64]));
        let t = TokenGrid::new(2, 2, vec![5, 9, 0, 63]).unwrap();
        let loss = reconstruct_loss(&mut g, l, &t, &[true, false, true, true]).unwrap();
        assert!((g.value(loss).item() - libm::log(64.0)).abs() < 1e-12);
    }

    #[test]
    fn denoiser_passes_grad_check() {
        let (den, store) = tiny(ALL);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = cond_inputs(&mut rng);
        let state = DiffusionState::new(TokenGrid::new(2, 2, vec![0, TokenGrid::MASK, TokenGrid::MASK, 1]).unwrap(), 3);
        let target = TokenGrid::new(2, 2, vec![0, 2, 1, 1]).unwrap();
        let r = grad_check_store(&store, &inputs, GradCheckOptions::default(), |g, p, v| {
            let logits = run(&den, g, p, v, &state)?;
            reconstruct_loss(g, logits, &target, state.mask())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn ablated_wiring_needs_fewer_parameters() {
        let (_, full) = tiny(ALL);
        let (_, bare) = tiny(DenoiserWiring {
            bridge: false,
            hrm: false,
            gates: false,
        });
        assert!(bare.num_values() < full.num_values());
        assert!(bare.get("den.cross0.attn.q.weight").is_none());
    }
}
