//! The full editor: reasoning model, vision and text encoders, reasoning
//! refinement, reasoning-attention bridge and the diffusion denoiser, with
//! the joint training objective and the inference pipeline.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{info_nce, masked_pool, LossWeights, TextEncoder, VisionEncoder, VisionOutput, DEFAULT_TEMPERATURE};
use crate::autodiff::{Graph, Var};
use crate::diffusion::{
    forward_mask, mask_region_with_rate, reconstruct_loss, sample_edit, Commit, Denoiser, DenoiserConfig, DenoiserWiring, DiffusionState,
    EditCondition, NoiseSchedule, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::microworld::{derive_seed, EditSample, World, DESCRIBE_PROMPT};
use crate::params::{AdamW, Bound, ParamStore};
use crate::reasoning::{Hrm, Mllm, MllmConfig, Rab};
use crate::tensor::Tensor;
use crate::tokenization::{dequantize, find_edit_position, TokenGrid};

/// Architecture and loss switches. Each can be turned off for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Switches {
    /// Iterative reasoning refinement.
    pub hrm: bool,
    /// Reasoning-attention bridge: spatial prior, summary and cross layers.
    pub rab: bool,
    /// Sigmoid gates around denoiser layers.
    pub gates: bool,
    /// Contrastive term with the time-weighted mix; off trains on
    /// reconstruction alone.
    pub hybrid: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self {
            hrm: true,
            rab: true,
            gates: true,
            hybrid: true,
        }
    }
}

impl Switches {
    pub const NAMES: [&'static str; 4] = ["hrm", "rab", "gates", "hybrid"];

    pub fn get(&self, name: &str) -> Option<bool> {
        match name {
            "hrm" => Some(self.hrm),
            "rab" => Some(self.rab),
            "gates" => Some(self.gates),
            "hybrid" => Some(self.hybrid),
            _ => None,
        }
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = match name {
            "hrm" => &mut self.hrm,
            "rab" => &mut self.rab,
            "gates" => &mut self.gates,
            "hybrid" => &mut self.hybrid,
            _ => return Err(Error::input(format!("unknown switch {name:?}"))),
        };
        *slot = on;
        Ok(())
    }

    /// All 16 on/off combinations, full model first.
    pub fn all_combinations() -> Vec<Switches> {
        (0..16u8)
            .map(|bits| {
                let mut s = Switches::default();
                for (i, name) in Self::NAMES.iter().enumerate() {
                    s.set(name, bits & (1 << i) == 0).unwrap();
                }
                s
            })
            .collect()
    }

    /// `hrm=on,rab=on,...`
    pub fn label(&self) -> String {
        let parts: Vec<String> = Self::NAMES
            .iter()
            .map(|n| format!("{n}={}", if self.get(n).unwrap() { "on" } else { "off" }))
            .collect();
        parts.join(",")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    /// Constant `alpha_t` from the training config.
    Fixed,
    /// `alpha_t` is the mask rate of the batch's diffusion step.
    Schedule,
}

/// Stops training after `patience` epochs whose mean loss fails to beat
/// the best so far by a relative margin of `min_delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            patience: 3,
            min_delta: 0.01,
        }
    }
}

/// Which cells of a training target may be masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    /// Any cell, at the schedule rate.
    Global,
    /// Only cells of the edit region, at the schedule rate.
    Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mllm: MllmConfig,
    pub denoiser: DenoiserConfig,
    pub hrm_steps: usize,
    pub hrm_per_step: bool,
    pub schedule: NoiseSchedule,
    /// InfoNCE temperature.
    pub temperature: f64,
    pub text_max_len: usize,
    pub switches: Switches,
}

impl ModelConfig {
    /// Small dimensions that train on a laptop CPU.
    pub fn desk(world: &crate::microworld::WorldConfig) -> Self {
        Self::sized(world, 32, 4, 2, 32, 32)
    }

    /// Reference dimensions: `d = 1024`, 4-layer reasoning model.
    pub fn paper(world: &crate::microworld::WorldConfig) -> Self {
        Self::sized(world, 128, 4, 4, 1024, 128)
    }

    fn sized(
        world: &crate::microworld::WorldConfig,
        d_model: usize,
        heads: usize,
        layers: usize,
        d: usize,
        den_dim: usize,
    ) -> Self {
        let cells = world.height * world.width;
        let t_max = 3 * world.max_objects + 2;
        Self {
            mllm: MllmConfig {
                d_model,
                heads,
                layers,
                d,
                t_max,
                max_context: cells + 16 + t_max,
            },
            denoiser: DenoiserConfig {
                dim: den_dim,
                heads,
                layers: 2,
            },
            hrm_steps: 2,
            hrm_per_step: false,
            schedule: NoiseSchedule::cosine(16),
            temperature: DEFAULT_TEMPERATURE,
            text_max_len: 8,
            switches: Switches::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mllm.validate()?;
        if self.denoiser.dim == 0 || self.denoiser.heads == 0 || self.denoiser.dim % self.denoiser.heads != 0 {
            return Err(Error::input("denoiser width must be a positive multiple of its heads"));
        }
        if self.schedule.steps == 0 {
            return Err(Error::input("schedule needs at least one step"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::input("temperature must be positive"));
        }
        if self.text_max_len == 0 {
            return Err(Error::input("text_max_len must be positive"));
        }
        Ok(())
    }

    fn wiring(&self) -> DenoiserWiring {
        DenoiserWiring {
            bridge: self.switches.rab,
            hrm: self.switches.hrm,
            gates: self.switches.gates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha_mode: AlphaMode,
    pub alpha_t: f64,
    pub corruption: Corruption,
    pub clip_norm: Option<f64>,
    /// Stop once the epoch loss has not improved for a while.
    pub early_stop: Option<EarlyStop>,
    /// Scene-description samples (no edit) mixed into every batch.
    pub describe_per_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.0,
            epochs: 100,
            batch_size: 16,
            alpha_mode: AlphaMode::Fixed,
            alpha_t: 0.5,
            corruption: Corruption::Region,
            clip_norm: None,
            early_stop: None,
            describe_per_batch: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.alpha_t)?;
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::input("lr and batch_size must be positive"));
        }
        if let Some(es) = self.early_stop {
            if es.patience == 0 || !(0.0..1.0).contains(&es.min_delta) {
                return Err(Error::input("early_stop needs patience >= 1 and min_delta in [0, 1)"));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::input("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Conditioning tensors for one edit, computed once per request.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub h_edit: Tensor,
    pub z: Option<Tensor>,
    pub h_reason: Option<Tensor>,
    /// `1×HW` attention weights.
    pub alpha: Option<Tensor>,
    /// `HW×dim` pixel-aware features of the source.
    pub pix: Tensor,
}

/// One training sequence with its optional edit payload.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub index: usize,
    input: Vec<usize>,
    targets: Vec<usize>,
    lm_mask: Vec<bool>,
    reason: usize,
    edit: Option<EditPart>,
}

#[derive(Debug, Clone)]
struct EditPart {
    k: usize,
    source: Tensor,
    target: TokenGrid,
    target_features: Tensor,
    mask: Vec<bool>,
    text: Tensor,
}

impl Prepared {
    pub fn is_edit(&self) -> bool {
        self.edit.is_some()
    }
}

/// Graph values produced for one training item.
#[derive(Debug, Clone, Copy)]
struct SampleVars {
    lm: Var,
    recon: Option<Var>,
    pooled: Option<Var>,
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    pub lm: f64,
    pub recon: f64,
    pub con: f64,
    pub total: f64,
    pub lambda_con: f64,
    pub lambda_recon: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochLog {
    pub epoch: usize,
    pub lm: f64,
    pub recon: f64,
    pub con: f64,
    pub total: f64,
    pub lambda_con: f64,
    pub lambda_recon: f64,
    pub grad_norm: f64,
}

/// Result of [`Model::edit`].
#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub output: TokenGrid,
    /// Tokens produced after REASON.
    pub generated: Vec<usize>,
    /// No EDIT token was produced, so the source is returned unchanged.
    pub passthrough: bool,
    /// Cells the sampler was allowed to rewrite.
    pub region: Vec<bool>,
    pub commits: Vec<Commit>,
    pub conditioning: Conditioning,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub world: World,
    pub store: ParamStore,
    pub mllm: Mllm,
    pub text: TextEncoder,
    pub vision: VisionEncoder,
    pub hrm: Hrm,
    pub rab: Rab,
    pub denoiser: Denoiser,
}

impl Model {
    pub fn new(cfg: ModelConfig, world: World, seed: u64) -> Result<Self> {
        let mut m = Self::skeleton(cfg, world)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.text.init(&mut m.store, &mut rng);
        m.mllm.init(&mut m.store, &mut rng);
        m.vision.init(&mut m.store, &mut rng);
        if m.cfg.switches.hrm {
            m.hrm.init(&mut m.store, &mut rng);
        }
        if m.cfg.switches.rab {
            m.rab.init(&mut m.store, &mut rng);
        }
        m.denoiser.init(&mut m.store, &mut rng);
        Ok(m)
    }

    /// Rebuilds a model around saved parameters. Every expected tensor must
    /// be present with its expected shape.
    pub fn from_store(cfg: ModelConfig, world: World, store: ParamStore) -> Result<Self> {
        let reference = Self::new(cfg, world, 0)?;
        for (name, t) in reference.store.iter() {
            match store.get(name) {
                Some(s) if s.shape() == t.shape() => {}
                Some(s) => return Err(Error::shape("checkpoint", t.shape(), s.shape())),
                None => return Err(Error::input(format!("checkpoint lacks parameter {name}"))),
            }
        }
        if store.len() != reference.store.len() {
            return Err(Error::input("checkpoint has unexpected parameters"));
        }
        let mut store = store;
        store.freeze_prefix(crate::alignment::TEXT_PREFIX);
        Ok(Self { store, ..reference })
    }

    fn skeleton(cfg: ModelConfig, world: World) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.mllm;
        let cells = world.cells();
        let vocab = world.vocab.len();
        if m.max_context < cells + 4 {
            return Err(Error::input("reasoning context cannot hold the grid tokens"));
        }
        let mllm = Mllm::new(m.clone(), vocab);
        let text = TextEncoder::new(world.vocab.num_words(), cfg.text_max_len, m.d_model, m.heads, m.d);
        let vision = VisionEncoder::new(cells, world.codebook.dim(), m.d_model, m.heads, m.d, cfg.denoiser.dim);
        let hrm = Hrm::new(m.d_model, m.heads, cfg.hrm_per_step, cfg.hrm_steps);
        let rab = Rab::new(m.d_model, m.d);
        let denoiser = Denoiser::new(
            cfg.denoiser.clone(),
            cfg.wiring(),
            world.codebook.len(),
            cells,
            cfg.schedule.steps,
            m.d,
            m.d_model,
        );
        Ok(Self {
            store: ParamStore::new(),
            mllm,
            text,
            vision,
            hrm,
            rab,
            denoiser,
            cfg,
            world,
        })
    }

    /// Hash of the frozen text encoder.
    pub fn text_encoder_hash(&self) -> [u8; 32] {
        self.store.content_hash(crate::alignment::TEXT_PREFIX)
    }

    /// `HW×c` features of a clean grid.
    pub fn features(&self, grid: &TokenGrid) -> Result<Tensor> {
        let f = dequantize(grid, &self.world.codebook)?;
        f.reshape(&[grid.len(), self.world.codebook.dim()])
    }

    /// BOS, grid codes, instruction words, REASON.
    pub fn prompt(&self, source: &TokenGrid, instruction: &str) -> Result<Vec<usize>> {
        let v = &self.world.vocab;
        source.validate(self.world.codebook.len())?;
        let mut ids = vec![v.bos()];
        ids.extend(source.ids().iter().map(|&c| v.visual_id(c as usize)));
        ids.extend(v.encode(instruction)?);
        ids.push(v.reason());
        Ok(ids)
    }

    /// Frozen text embedding, `1×d`.
    pub fn text_embedding(&self, text: &str) -> Result<Tensor> {
        let ids = self.world.vocab.encode(text)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let t = self.text.encode(&mut g, &p, &ids)?;
        Ok(g.value(t).clone())
    }

    fn sequence_item(&self, index: usize, prompt: Vec<usize>, answer: &[usize], edit: Option<EditPart>) -> Result<Prepared> {
        let reason = prompt.len() - 1;
        let mut seq = prompt;
        seq.extend_from_slice(answer);
        if seq.len() > self.cfg.mllm.max_context + 1 {
            return Err(Error::input(format!("training sequence of {} tokens exceeds context", seq.len())));
        }
        let n = seq.len() - 1;
        Ok(Prepared {
            index,
            input: seq[..n].to_vec(),
            targets: seq[1..].to_vec(),
            lm_mask: (0..n).map(|i| i >= reason).collect(),
            reason,
            edit,
        })
    }

    /// Teacher-forced sequence and cached tensors for one edit sample.
    pub fn prepare(&self, s: &EditSample) -> Result<Prepared> {
        let v = &self.world.vocab;
        let prompt = self.prompt(&s.source, &s.instruction)?;
        let mut answer = Vec::new();
        for w in &s.reasoning {
            answer.extend(v.encode(w)?);
        }
        let k = prompt.len() + answer.len();
        answer.push(v.edit());
        answer.push(v.eos());
        if s.target.len() != self.world.cells() || s.mask.len() != s.target.len() {
            return Err(Error::shape("prepare", &[self.world.cells()], &[s.target.len()]));
        }
        let edit = EditPart {
            k,
            source: self.features(&s.source)?,
            target: s.target.clone(),
            target_features: self.features(&s.target)?,
            mask: s.mask.clone(),
            text: self.text_embedding(&s.target_text)?,
        };
        self.sequence_item(s.index, prompt, &answer, Some(edit))
    }

    /// A scene-description sequence with no EDIT token.
    pub fn prepare_description(&self, index: usize, grid: &TokenGrid, words: &[String]) -> Result<Prepared> {
        let v = &self.world.vocab;
        let prompt = self.prompt(grid, DESCRIBE_PROMPT)?;
        let mut answer = Vec::new();
        for w in words {
            answer.extend(v.encode(w)?);
        }
        answer.push(v.eos());
        self.sequence_item(index, prompt, &answer, None)
    }

    /// Builds the conditioning of the denoiser from reasoning hidden states
    /// and source vision features.
    fn condition(
        &self,
        g: &mut Graph,
        p: &Bound,
        hidden: Var,
        reason: usize,
        k: usize,
        vo: &VisionOutput,
    ) -> Result<EditCondition> {
        let sw = self.cfg.switches;
        let h_edit = self.mllm.extract_edit_signal(g, p, hidden, k)?;
        let h_reason = if sw.hrm {
            let h0 = match self.mllm.project_reason_states(g, p, hidden, reason, k)? {
                Some(states) => {
                    let last = g.shape(states)[0] - 1;
                    g.gather_rows(states, &[last])?
                }
                None => g.constant(Tensor::zeros(&[1, self.cfg.mllm.d_model])),
            };
            Some(self.hrm.reason(g, p, h0, vo.v, self.cfg.hrm_steps)?)
        } else {
            None
        };
        let (prior, z) = if sw.rab {
            let (a, z) = self.rab.attend(g, p, h_edit, vo.v)?;
            (Some(a), Some(z))
        } else {
            (None, None)
        };
        Ok(EditCondition {
            h_edit,
            z,
            h_reason,
            prior,
            visual: Some(vo.pix),
        })
    }

    fn forward_item(&self, g: &mut Graph, p: &Bound, item: &Prepared, state: Option<&DiffusionState>) -> Result<SampleVars> {
        let hidden = self.mllm.hidden(g, p, &item.input)?;
        let logits = self.mllm.logits(g, p, hidden)?;
        let lm = g.cross_entropy(logits, &item.targets, &item.lm_mask)?;
        let Some(e) = &item.edit else {
            return Ok(SampleVars {
                lm,
                recon: None,
                pooled: None,
            });
        };
        let state = state.ok_or_else(|| Error::contract("edit item needs a corrupted target"))?;
        let src = g.constant(e.source.clone());
        let vo = self.vision.encode(g, p, src)?;
        let cond = self.condition(g, p, hidden, item.reason, e.k, &vo)?;
        let dl = self.denoiser.logits(g, p, state, &cond)?;
        let recon = reconstruct_loss(g, dl, &e.target, state.mask())?;
        let pooled = if self.cfg.switches.hybrid {
            let tf = g.constant(e.target_features.clone());
            let vt = self.vision.encode(g, p, tf)?;
            Some(masked_pool(g, vt.sem, &e.mask)?)
        } else {
            None
        };
        Ok(SampleVars {
            lm,
            recon: Some(recon),
            pooled,
        })
    }

    fn loss_weights(&self, alpha_t: f64) -> Result<LossWeights> {
        let w = LossWeights::new(alpha_t)?;
        Ok(if self.cfg.switches.hybrid {
            w
        } else {
            LossWeights {
                alpha_t,
                lambda_con: 0.0,
                lambda_recon: 1.0,
            }
        })
    }

    /// Corrupts each edit item's target at step `tau`.
    pub fn corrupt<R: Rng>(
        &self,
        items: &[&Prepared],
        tau: usize,
        corruption: Corruption,
        rng: &mut R,
    ) -> Result<Vec<Option<DiffusionState>>> {
        items
            .iter()
            .map(|it| match &it.edit {
                Some(e) => match corruption {
                    Corruption::Global => forward_mask(&e.target, tau, &self.cfg.schedule, rng).map(Some),
                    Corruption::Region => {
                        mask_region_with_rate(&e.target, &e.mask, self.cfg.schedule.rate(tau)?, tau, rng).map(Some)
                    }
                },
                None => Ok(None),
            })
            .collect()
    }

    /// Batch objective in one graph:
    /// `mean L_lm + λ_recon · mean L_recon + λ_con · L_con`.
    pub fn joint_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        items: &[&Prepared],
        states: &[Option<DiffusionState>],
        alpha_t: f64,
    ) -> Result<Var> {
        let w = self.loss_weights(alpha_t)?;
        let mut lms = Vec::new();
        let mut recons = Vec::new();
        let mut pooled = Vec::new();
        let mut texts = Vec::new();
        for (it, st) in items.iter().zip(states) {
            let v = self.forward_item(g, p, it, st.as_ref())?;
            lms.push(v.lm);
            if let Some(r) = v.recon {
                recons.push(r);
            }
            if let (Some(pv), Some(e)) = (v.pooled, &it.edit) {
                pooled.push(pv);
                texts.push(e.text.clone());
            }
        }
        let lm = mean_of(g, &lms)?;
        let mut total = lm;
        if !recons.is_empty() {
            let r = mean_of(g, &recons)?;
            let r = g.scale(r, w.lambda_recon)?;
            total = g.add(total, r)?;
        }
        if !pooled.is_empty() {
            let vis = g.concat_rows(&pooled)?;
            let txt = g.constant(stack_rows(&texts)?);
            let c = info_nce(g, vis, txt, self.cfg.temperature)?;
            let c = g.scale(c, w.lambda_con)?;
            total = g.add(total, c)?;
        }
        Ok(total)
    }

    /// Gradients of [`Model::joint_loss`] computed with one graph per item.
    /// Items run through `exec`; the contrastive term couples them only
    /// through their pooled embeddings, whose gradients are fed back as
    /// seeds. Per-item gradients are summed in item order.
    pub fn batch_gradients<E: Executor>(
        &self,
        exec: &E,
        items: &[&Prepared],
        states: &[Option<DiffusionState>],
        alpha_t: f64,
    ) -> Result<(BTreeMap<String, Tensor>, BatchStats)> {
        let n = items.len();
        if n == 0 || states.len() != n {
            return Err(Error::contract("batch needs one corruption slot per item"));
        }
        let w = self.loss_weights(alpha_t)?;
        let forward = exec.map(n, &|i| -> Result<(Graph, Bound, SampleVars)> {
            let mut g = Graph::new();
            let p = self.store.bind(&mut g);
            let v = self.forward_item(&mut g, &p, items[i], states[i].as_ref())?;
            Ok((g, p, v))
        });
        let forward: Vec<(Graph, Bound, SampleVars)> = forward.into_iter().collect::<Result<_>>()?;

        let n_edit = forward.iter().filter(|f| f.2.recon.is_some()).count();
        let mut stats = BatchStats {
            lambda_con: w.lambda_con,
            lambda_recon: w.lambda_recon,
            ..BatchStats::default()
        };
        for (g, _, v) in &forward {
            stats.lm += g.value(v.lm).item() / n as f64;
            if let Some(r) = v.recon {
                stats.recon += g.value(r).item() / n_edit as f64;
            }
        }

        // contrastive term over the pooled embeddings
        let owners: Vec<usize> = (0..n).filter(|&i| forward[i].2.pooled.is_some()).collect();
        let mut pooled_grads: BTreeMap<usize, Tensor> = BTreeMap::new();
        if !owners.is_empty() {
            let rows: Vec<Tensor> = owners
                .iter()
                .map(|&i| forward[i].0.value(forward[i].2.pooled.unwrap()).clone())
                .collect();
            let texts: Vec<Tensor> = owners.iter().map(|&i| items[i].edit.as_ref().unwrap().text.clone()).collect();
            let mut g = Graph::new();
            let vis = g.param(stack_rows(&rows)?);
            let txt = g.constant(stack_rows(&texts)?);
            let c = info_nce(&mut g, vis, txt, self.cfg.temperature)?;
            stats.con = g.value(c).item();
            let grads = g.backward(c)?;
            let gv = grads.get(vis).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(vis)));
            for (r, &i) in owners.iter().enumerate() {
                pooled_grads.insert(i, Tensor::row(gv.row_slice(r).to_vec()).scale(w.lambda_con));
            }
        }
        stats.total = stats.lm + w.lambda_recon * stats.recon + w.lambda_con * stats.con;

        let per_item = exec.map(n, &|i| -> Result<BTreeMap<String, Tensor>> {
            let (g, p, v) = &forward[i];
            let mut seeds = vec![(v.lm, Tensor::scalar(1.0 / n as f64))];
            if let Some(r) = v.recon {
                seeds.push((r, Tensor::scalar(w.lambda_recon / n_edit as f64)));
            }
            if let (Some(pv), Some(t)) = (v.pooled, pooled_grads.get(&i)) {
                seeds.push((pv, t.clone()));
            }
            let grads = g.backward_seeded(&seeds)?;
            Ok(p.gradients(&grads))
        });
        let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
        for grads in per_item {
            for (k, t) in grads? {
                match total.get_mut(&k) {
                    Some(acc) => acc.add_assign(&t),
                    None => {
                        total.insert(k, t);
                    }
                }
            }
        }
        Ok((total, stats))
    }

    fn conditioning_from(&self, g: &Graph, cond: &EditCondition) -> Conditioning {
        Conditioning {
            h_edit: g.value(cond.h_edit).clone(),
            z: cond.z.map(|v| g.value(v).clone()),
            h_reason: cond.h_reason.map(|v| g.value(v).clone()),
            alpha: cond.prior.map(|v| g.value(v).clone()),
            pix: g.value(cond.visual.unwrap()).clone(),
        }
    }

    /// Conditioning used when no edit signal exists: zero signals, uniform
    /// prior and the source's pixel features.
    pub fn neutral_conditioning(&self, source: &TokenGrid) -> Result<Conditioning> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let f = g.constant(self.features(source)?);
        let vo = self.vision.encode(&mut g, &p, f)?;
        let d = self.cfg.mllm.d;
        let sw = self.cfg.switches;
        let n = source.len();
        Ok(Conditioning {
            h_edit: Tensor::zeros(&[1, d]),
            z: sw.rab.then(|| Tensor::zeros(&[1, d])),
            h_reason: sw.hrm.then(|| Tensor::zeros(&[1, self.cfg.mllm.d_model])),
            alpha: sw.rab.then(|| Tensor::full(&[1, n], 1.0 / n as f64)),
            pix: g.value(vo.pix).clone(),
        })
    }

    /// `HW×K` denoiser logits under fixed conditioning.
    pub fn denoise(&self, cond: &Conditioning, state: &DiffusionState) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let ec = EditCondition {
            h_edit: g.constant(cond.h_edit.clone()),
            z: cond.z.clone().map(|t| g.constant(t)),
            h_reason: cond.h_reason.clone().map(|t| g.constant(t)),
            prior: cond.alpha.clone().map(|t| g.constant(t)),
            visual: Some(g.constant(cond.pix.clone())),
        };
        let l = self.denoiser.logits(&mut g, &p, state, &ec)?;
        Ok(g.value(l).clone())
    }

    /// Mean per-cell NLL of `output` over `region` when the region is fully
    /// masked. `None` for an empty region.
    pub fn plausibility(&self, cond: &Conditioning, output: &TokenGrid, region: &[bool]) -> Result<Option<f64>> {
        let n = region.iter().filter(|&&m| m).count();
        if n == 0 {
            return Ok(None);
        }
        let mut ids = output.ids().to_vec();
        for (id, &m) in ids.iter_mut().zip(region) {
            if m {
                *id = TokenGrid::MASK;
            }
        }
        let frac = n as f64 / output.len() as f64;
        let state = DiffusionState::new(
            TokenGrid::new(output.height(), output.width(), ids)?,
            self.cfg.schedule.step_for_rate(frac),
        );
        let logits = self.denoise(cond, &state)?;
        let mut g = Graph::new();
        let l = g.constant(logits);
        let targets: Vec<usize> = output.ids().iter().map(|&i| i as usize).collect();
        let ce = g.cross_entropy(l, &targets, region)?;
        Ok(Some(g.value(ce).item()))
    }

    /// Mean semantic vision feature of `grid` over `region`, `1×d`.
    pub fn region_embedding(&self, grid: &TokenGrid, region: &[bool]) -> Result<Option<Tensor>> {
        if !region.iter().any(|&m| m) {
            return Ok(None);
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let f = g.constant(self.features(grid)?);
        let vo = self.vision.encode(&mut g, &p, f)?;
        let pooled = masked_pool(&mut g, vo.sem, region)?;
        Ok(Some(g.value(pooled).clone()))
    }

    /// Runs reasoning, locates EDIT and resamples the edit region.
    ///
    /// With `oracle` the region is given; otherwise cells whose bridge
    /// attention is at least one standard deviation above its mean are
    /// used, or the whole grid when the bridge is switched off.
    pub fn edit<R: Rng>(
        &self,
        source: &TokenGrid,
        instruction: &str,
        oracle: Option<&[bool]>,
        sampler: &SamplerConfig,
        rng: &mut R,
    ) -> Result<EditOutcome> {
        let v = &self.world.vocab;
        let prompt = self.prompt(source, instruction)?;
        let decoded = self.mllm.generate(&self.store, &prompt, v.eos())?;
        let generated = decoded.generated().to_vec();
        let k = match find_edit_position(&decoded.sequence, v) {
            Some(k) if k > decoded.reason_position() => k,
            _ => {
                return Ok(EditOutcome {
                    output: source.clone(),
                    generated,
                    passthrough: true,
                    region: vec![false; source.len()],
                    commits: Vec::new(),
                    conditioning: self.neutral_conditioning(source)?,
                });
            }
        };
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let hidden = g.constant(decoded.hidden.clone());
        let f = g.constant(self.features(source)?);
        let vo = self.vision.encode(&mut g, &p, f)?;
        let cond = self.condition(&mut g, &p, hidden, decoded.reason_position(), k, &vo)?;
        let conditioning = self.conditioning_from(&g, &cond);
        let region = match oracle {
            Some(m) => {
                if m.len() != source.len() {
                    return Err(Error::shape("edit", &[source.len()], &[m.len()]));
                }
                m.to_vec()
            }
            None => match &conditioning.alpha {
                Some(a) => predicted_mask(a.data()),
                None => vec![true; source.len()],
            },
        };
        let den = |s: &DiffusionState| self.denoise(&conditioning, s);
        let (output, commits) = sample_edit(&den, source, &region, &self.cfg.schedule, sampler, rng)?;
        Ok(EditOutcome {
            output,
            generated,
            passthrough: false,
            region,
            commits,
            conditioning,
        })
    }
}

/// Cells with `α ≥ mean + 1σ`.
pub fn predicted_mask(alpha: &[f64]) -> Vec<bool> {
    let n = alpha.len() as f64;
    let mean = alpha.iter().sum::<f64>() / n;
    let var = alpha.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let thr = mean + libm::sqrt(var);
    alpha.iter().map(|&a| a >= thr).collect()
}

fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    g.scale(acc, 1.0 / xs.len() as f64)
}

fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    let cols = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        if r.len() != cols {
            return Err(Error::shape("stack_rows", &[cols], &[r.len()]));
        }
        data.extend_from_slice(r.data());
    }
    Tensor::matrix(rows.len(), cols, data)
}

/// Number of scene-description sequences prepared for training.
pub const DESCRIBE_POOL: usize = 64;

/// Minibatch AdamW over `train`. `on_epoch` sees every epoch's averaged
/// losses. A non-finite loss stops training with the offending samples.
pub fn train<E: Executor, F: FnMut(&EpochLog)>(
    model: &mut Model,
    train: &[EditSample],
    cfg: &TrainConfig,
    exec: &E,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::input("empty training set"));
    }
    let items: Vec<Prepared> = train.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?;
    let describe: Vec<Prepared> = if cfg.describe_per_batch > 0 {
        (0..DESCRIBE_POOL)
            .map(|i| {
                let (grid, words) = model.world.describe_scene(derive_seed(cfg.seed, 9, i as u64))?;
                model.prepare_description(usize::MAX - i, &grid, &words)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    opt.clip_norm = cfg.clip_norm;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut next_describe = 0;
    let steps = model.cfg.schedule.steps;
    let mut logs = Vec::new();
    let (mut best, mut stale) = (f64::INFINITY, 0usize);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut log = EpochLog {
            epoch,
            ..EpochLog::default()
        };
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch: Vec<&Prepared> = chunk.iter().map(|&i| &items[i]).collect();
            for _ in 0..cfg.describe_per_batch.min(describe.len()) {
                batch.push(&describe[next_describe % describe.len()]);
                next_describe += 1;
            }
            let tau = rng.random_range(1..=steps);
            let alpha_t = match cfg.alpha_mode {
                AlphaMode::Fixed => cfg.alpha_t,
                AlphaMode::Schedule => model.cfg.schedule.rate(tau)?,
            };
            let states = model.corrupt(&batch, tau, cfg.corruption, &mut rng)?;
            let (grads, stats) = model.batch_gradients(exec, &batch, &states, alpha_t)?;
            let bad_grad = grads.values().any(|t| !t.is_finite());
            if !stats.total.is_finite() || bad_grad {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    samples: chunk.iter().map(|&i| items[i].index).collect(),
                });
            }
            let norm = opt.step(&mut model.store, &grads)?;
            log.lm += stats.lm;
            log.recon += stats.recon;
            log.con += stats.con;
            log.total += stats.total;
            log.lambda_con += stats.lambda_con;
            log.lambda_recon += stats.lambda_recon;
            log.grad_norm += norm;
            batches += 1;
        }
        let nb = batches as f64;
        for x in [
            &mut log.lm,
            &mut log.recon,
            &mut log.con,
            &mut log.total,
            &mut log.lambda_con,
            &mut log.lambda_recon,
            &mut log.grad_norm,
        ] {
            *x /= nb;
        }
        on_epoch(&log);
        let total = log.total;
        logs.push(log);
        if let Some(es) = cfg.early_stop {
            if total < best * (1.0 - es.min_delta) {
                best = total;
                stale = 0;
            } else {
                stale += 1;
                if stale >= es.patience {
                    break;
                }
            }
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Sequential;
    use crate::gradcheck::{grad_check_store, GradCheckOptions};
    use crate::microworld::{WorldConfig, DEFAULT_TRAIN};

    fn tiny() -> (Model, Vec<EditSample>) {
        let wc = WorldConfig {
            height: 6,
            width: 6,
            min_objects: 2,
            max_objects: 3,
            codebook_size: 24,
        };
        let world = World::new(wc.clone(), 3).unwrap();
        let mut cfg = ModelConfig::desk(&wc);
        cfg.mllm.d_model = 8;
        cfg.mllm.d = 8;
        cfg.mllm.heads = 2;
        cfg.mllm.layers = 1;
        cfg.denoiser.dim = 8;
        cfg.denoiser.heads = 2;
        cfg.denoiser.layers = 1;
        cfg.schedule = NoiseSchedule::cosine(4);
        let data = world.build_dataset(5, 4, 1).unwrap();
        (Model::new(cfg, world, 11).unwrap(), data.train)
    }

    #[test]
    fn switch_combinations_are_distinct() {
        let all = Switches::all_combinations();
        assert_eq!(all.len(), 16);
        assert_eq!(all[0], Switches::default());
        for i in 0..16 {
            for j in i + 1..16 {
                assert_ne!(all[i], all[j]);
            }
        }
        assert!(Switches::default().set("nope", true).is_err());
    }

    #[test]
    fn split_gradients_match_joint_graph() {
        let (m, data) = tiny();
        let mut items: Vec<Prepared> = data.iter().map(|s| m.prepare(s).unwrap()).collect();
        let (grid, words) = m.world.describe_scene(1).unwrap();
        items.push(m.prepare_description(99, &grid, &words).unwrap());
        let refs: Vec<&Prepared> = items.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let states = m.corrupt(&refs, 3, Corruption::Global, &mut rng).unwrap();
        let (split, stats) = m.batch_gradients(&Sequential, &refs, &states, 0.3).unwrap();

        let mut g = Graph::new();
        let p = m.store.bind(&mut g);
        let loss = m.joint_loss(&mut g, &p, &refs, &states, 0.3).unwrap();
        assert!((g.value(loss).item() - stats.total).abs() < 1e-12);
        let joint = p.gradients(&g.backward(loss).unwrap());
        assert_eq!(split.len(), joint.len());
        for (k, t) in &joint {
            let s = &split[k];
            let diff = t.data().iter().zip(s.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "{k}: {diff}");
        }
        assert!(split.keys().all(|k| !k.starts_with(crate::alignment::TEXT_PREFIX)));
    }

    #[test]
    fn joint_objective_passes_grad_check() {
        let (m, data) = tiny();
        let items: Vec<Prepared> = data[..2].iter().map(|s| m.prepare(s).unwrap()).collect();
        let refs: Vec<&Prepared> = items.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let states = m.corrupt(&refs, 2, Corruption::Region, &mut rng).unwrap();
        let opts = GradCheckOptions {
            max_elements_per_leaf: Some(3),
            ..GradCheckOptions::default()
        };
        let r = grad_check_store(&m.store, &[], opts, |g, p, _| m.joint_loss(g, p, &refs, &states, 0.5)).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn training_is_deterministic_and_keeps_text_encoder_frozen() {
        let (m0, data) = tiny();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            describe_per_batch: 1,
            ..TrainConfig::default()
        };
        let hash = m0.text_encoder_hash();
        let mut a = m0.clone();
        let mut b = m0.clone();
        let la = train(&mut a, &data, &cfg, &Sequential, |_| {}).unwrap();
        let lb = train(&mut b, &data, &cfg, &Sequential, |_| {}).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.store.content_hash(""), b.store.content_hash(""));
        assert_ne!(a.store.content_hash(""), m0.store.content_hash(""));
        assert_eq!(a.text_encoder_hash(), hash);
        assert!(la.iter().all(|l| l.total.is_finite()));
        assert!(DEFAULT_TRAIN > 0);
    }

    #[test]
    fn edit_never_touches_cells_outside_region() {
        let (m, data) = tiny();
        let s = &data[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sampler = SamplerConfig {
            steps: 3,
            temperature: 1.0,
        };
        let out = m.edit(&s.source, &s.instruction, Some(&s.mask), &sampler, &mut rng).unwrap();
        for i in 0..s.source.len() {
            if !out.region[i] {
                assert_eq!(out.output.ids()[i], s.source.ids()[i]);
            }
        }
        assert!(!out.output.has_mask());
    }

    #[test]
    fn predicted_mask_thresholds_at_one_sigma() {
        let m = predicted_mask(&[0.1, 0.1, 0.1, 0.7]);
        assert_eq!(m, vec![false, false, false, true]);
        // constant attention selects everything
        assert!(predicted_mask(&[0.25; 4]).iter().all(|&x| x));
    }

    #[test]
    fn checkpoint_store_round_trip_validates_shapes() {
        let (m, _) = tiny();
        let again = Model::from_store(m.cfg.clone(), m.world.clone(), m.store.clone()).unwrap();
        assert_eq!(again.store.content_hash(""), m.store.content_hash(""));
        let mut broken = m.store.clone();
        broken.insert("den.head.weight", Tensor::zeros(&[1, 1]));
        assert!(Model::from_store(m.cfg.clone(), m.world.clone(), broken).is_err());
    }
}
