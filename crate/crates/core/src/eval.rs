//! Desk-scale edit metrics and per-sample reports.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::microworld::{derive_seed, EditKind, EditSample};
use crate::model::Model;
use crate::tokenization::{dequantize, Codebook, TokenGrid};

/// `50·(1 + cos(a, b))`.
pub fn cosine_percent(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", &[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::input("cosine of a zero vector"));
    }
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok(50.0 * (1.0 + cos))
}

/// Similarity between the pooled semantic features of `edited` over `mask`
/// and the frozen embedding of `target_text`. Absent for an empty mask.
pub fn region_text_similarity(model: &Model, edited: &TokenGrid, mask: &[bool], target_text: &str) -> Result<Option<f64>> {
    let Some(region) = model.region_embedding(edited, mask)? else {
        return Ok(None);
    };
    let text = model.text_embedding(target_text)?;
    cosine_percent(region.data(), text.data()).map(Some)
}

/// Largest minus smallest codebook value.
pub fn feature_range(codebook: &Codebook) -> f64 {
    let d = codebook.codes().data();
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    hi - lo
}

/// Mean squared feature difference over cells outside `mask`, divided by
/// the squared feature range, in percent. Absent when `mask` covers every
/// cell.
pub fn l2_background_loss(edited: &TokenGrid, source: &TokenGrid, mask: &[bool], codebook: &Codebook) -> Result<Option<f64>> {
    if edited.height() != source.height() || edited.width() != source.width() {
        return Err(Error::shape(
            "l2_background_loss",
            &[edited.height(), edited.width()],
            &[source.height(), source.width()],
        ));
    }
    if mask.len() != source.len() {
        return Err(Error::shape("l2_background_loss", &[source.len()], &[mask.len()]));
    }
    let outside = mask.iter().filter(|&&m| !m).count();
    if outside == 0 {
        return Ok(None);
    }
    let a = dequantize(edited, codebook)?;
    let b = dequantize(source, codebook)?;
    let c = codebook.dim();
    let mut sse = 0.0;
    for (cell, _) in mask.iter().enumerate().filter(|(_, &m)| !m) {
        for j in 0..c {
            let d = a.data()[cell * c + j] - b.data()[cell * c + j];
            sse += d * d;
        }
    }
    let range = feature_range(codebook);
    let mse = sse / (outside * c) as f64;
    let scaled = if range > 0.0 { mse / (range * range) } else { 0.0 };
    Ok(Some(100.0 * scaled))
}

/// Percent of in-mask cells whose code equals the target's.
pub fn edit_accuracy(edited: &TokenGrid, target: &TokenGrid, mask: &[bool]) -> Result<Option<f64>> {
    if edited.len() != target.len() || mask.len() != target.len() {
        return Err(Error::shape("edit_accuracy", &[target.len()], &[edited.len(), mask.len()]));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Ok(None);
    }
    let hits = (0..mask.len())
        .filter(|&i| mask[i] && edited.ids()[i] == target.ids()[i])
        .count();
    Ok(Some(100.0 * hits as f64 / n as f64))
}

pub fn plausibility_percent(nll_per_cell: f64) -> f64 {
    100.0 * libm::exp(-nll_per_cell)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeWeights {
    pub adherence: f64,
    pub consistency: f64,
    pub plausibility: f64,
}

impl Default for CompositeWeights {
    fn default() -> Self {
        Self {
            adherence: 1.0,
            consistency: 1.0,
            plausibility: 1.0,
        }
    }
}

/// Weighted mean of edit accuracy, `100 − l2` clamped to `[0, 100]` and
/// plausibility. Absent when any component is.
pub fn composite_score(
    edit_accuracy: Option<f64>,
    l2_bg: Option<f64>,
    plausibility: Option<f64>,
    w: &CompositeWeights,
) -> Option<f64> {
    let consistency = (100.0 - l2_bg?).clamp(0.0, 100.0);
    let total = w.adherence + w.consistency + w.plausibility;
    if !(total > 0.0) {
        return None;
    }
    Some((w.adherence * edit_accuracy? + w.consistency * consistency + w.plausibility * plausibility?) / total)
}

/// Intersection over union; absent when both masks are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Option<f64> {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    (union > 0).then(|| inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    Oracle,
    Predicted,
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Oracle => "oracle",
            MaskMode::Predicted => "predicted",
        }
    }
}

/// One evaluated sample. Absent metrics are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub index: usize,
    pub kind: EditKind,
    pub template: String,
    pub hops: usize,
    pub clip_sim_pct: Option<f64>,
    pub l2_bg_pct: Option<f64>,
    pub edit_accuracy_pct: Option<f64>,
    pub nll_per_cell: Option<f64>,
    pub plausibility_pct: Option<f64>,
    pub composite_score: Option<f64>,
    pub mask_iou: Option<f64>,
    pub external_score: Option<f64>,
    pub passthrough: bool,
}

/// Column names in report order.
pub const COLUMNS: [&str; 7] = [
    "clip_sim_pct",
    "l2_bg_pct",
    "edit_accuracy_pct",
    "plausibility_pct",
    "composite_score",
    "mask_iou",
    "external_score",
];

impl MetricRow {
    pub fn column(&self, name: &str) -> Option<f64> {
        match name {
            "clip_sim_pct" => self.clip_sim_pct,
            "l2_bg_pct" => self.l2_bg_pct,
            "edit_accuracy_pct" => self.edit_accuracy_pct,
            "plausibility_pct" => self.plausibility_pct,
            "composite_score" => self.composite_score,
            "mask_iou" => self.mask_iou,
            "external_score" => self.external_score,
            "nll_per_cell" => self.nll_per_cell,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// Mean of the present values of `column`.
    pub fn aggregate(&self, column: &str) -> Option<f64> {
        mean(self.rows.iter().filter_map(|r| r.column(column)))
    }

    /// Mean of `column` over rows of one kind.
    pub fn aggregate_kind(&self, column: &str, kind: EditKind) -> Option<f64> {
        mean(self.rows.iter().filter(|r| r.kind == kind).filter_map(|r| r.column(column)))
    }

    pub fn passthrough_count(&self) -> usize {
        self.rows.iter().filter(|r| r.passthrough).count()
    }

    /// Checks the percentage range of every present value.
    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            for c in COLUMNS {
                if c == "external_score" || c == "mask_iou" {
                    continue;
                }
                if let Some(v) = r.column(c) {
                    if !(0.0..=100.0).contains(&v) {
                        return Err(Error::contract(format!("{c} = {v} for sample {} outside [0, 100]", r.index)));
                    }
                }
            }
        }
        Ok(())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub mode: MaskMode,
    pub sampler: SamplerConfig,
    pub weights: CompositeWeights,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: MaskMode::Oracle,
            sampler: SamplerConfig::default(),
            weights: CompositeWeights::default(),
            seed: 0,
        }
    }
}

/// Edits one sample and scores it against its ground truth. Metrics use
/// the ground-truth edit mask.
pub fn evaluate_sample(model: &Model, s: &EditSample, opts: &EvalOptions) -> Result<(MetricRow, TokenGrid)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 31, s.index as u64));
    let oracle = match opts.mode {
        MaskMode::Oracle => Some(&s.mask[..]),
        MaskMode::Predicted => None,
    };
    let out = model.edit(&s.source, &s.instruction, oracle, &opts.sampler, &mut rng)?;
    let edited = out.output;
    let acc = edit_accuracy(&edited, &s.target, &s.mask)?;
    let l2 = l2_background_loss(&edited, &s.source, &s.mask, &model.world.codebook)?;
    let nll = model.plausibility(&out.conditioning, &edited, &s.mask)?;
    let plaus = nll.map(plausibility_percent);
    let row = MetricRow {
        index: s.index,
        kind: s.kind,
        template: s.template.name().into(),
        hops: s.hops,
        clip_sim_pct: region_text_similarity(model, &edited, &s.mask, &s.target_text)?,
        l2_bg_pct: l2,
        edit_accuracy_pct: acc,
        nll_per_cell: nll,
        plausibility_pct: plaus,
        composite_score: composite_score(acc, l2, plaus, &opts.weights),
        mask_iou: if out.passthrough { None } else { mask_iou(&out.region, &s.mask) },
        external_score: None,
        passthrough: out.passthrough,
    };
    Ok((row, edited))
}

/// Evaluates every sample; rows are ordered by position in `samples`.
pub fn evaluate<E: Executor>(
    model: &Model,
    samples: &[EditSample],
    opts: &EvalOptions,
    exec: &E,
) -> Result<(MetricReport, Vec<TokenGrid>)> {
    let results = exec.map(samples.len(), &|i| evaluate_sample(model, &samples[i], opts));
    let mut report = MetricReport::default();
    let mut grids = Vec::with_capacity(samples.len());
    for r in results {
        let (row, grid) = r?;
        report.rows.push(row);
        grids.push(grid);
    }
    Ok((report, grids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn grid(ids: &[u32]) -> TokenGrid {
        TokenGrid::new(2, 2, ids.to_vec()).unwrap()
    }

    #[test]
    fn cosine_mapping_examples() {
        assert!((cosine_percent(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 100.0).abs() < 1e-12);
        assert!((cosine_percent(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 50.0).abs() < 1e-12);
        assert!((cosine_percent(&[1.0, 0.0], &[-1.0, 0.0]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let a = [0.3, -1.2, 2.0];
        let b = [1.0, 0.5, -0.25];
        let base = cosine_percent(&a, &b).unwrap();
        let a2: Vec<f64> = a.iter().map(|x| x * 7.5).collect();
        let b2: Vec<f64> = b.iter().map(|x| x * 0.01).collect();
        assert!((cosine_percent(&a2, &b2).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn edit_accuracy_examples() {
        let t = grid(&[1, 2, 3, 4]);
        let all = [true; 4];
        assert_eq!(edit_accuracy(&t, &t, &all).unwrap(), Some(100.0));
        assert_eq!(edit_accuracy(&grid(&[0, 0, 0, 0]), &t, &all).unwrap(), Some(0.0));
        assert_eq!(edit_accuracy(&grid(&[1, 2, 0, 0]), &t, &all).unwrap(), Some(50.0));
        assert_eq!(edit_accuracy(&t, &t, &[false; 4]).unwrap(), None);
    }

    #[test]
    fn l2_background_hand_case() {
        let cb = Codebook::new(crate::Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 2.0]).unwrap()).unwrap();
        let src = grid(&[0, 0, 1, 2]);
        let out = grid(&[1, 0, 2, 2]);
        let mask = [false, false, false, true];
        // outside cells 0..3: diffs (1,0), (0,0), (-1,2) → sse 6 over 3 cells × 2 dims
        let want = 100.0 * (6.0 / 6.0) / 4.0;
        let got = l2_background_loss(&out, &src, &mask, &cb).unwrap().unwrap();
        assert!((got - want).abs() < 1e-12);
        assert_eq!(l2_background_loss(&src, &src, &mask, &cb).unwrap(), Some(0.0));
        assert_eq!(l2_background_loss(&out, &src, &[true; 4], &cb).unwrap(), None);
    }

    #[test]
    fn composite_examples() {
        let w = CompositeWeights::default();
        assert_eq!(composite_score(Some(90.0), Some(0.0), Some(50.0), &w), Some(80.0));
        assert_eq!(composite_score(Some(90.0), None, Some(50.0), &w), None);
        let near = composite_score(Some(100.0), Some(0.0), Some(plausibility_percent(1e-9)), &w).unwrap();
        assert!(near > 99.999_999);
        // l2 above 100 clamps consistency to zero
        assert_eq!(composite_score(Some(60.0), Some(150.0), Some(30.0), &w), Some(30.0));
    }

    #[test]
    fn report_aggregates_skip_absent_values() {
        let row = |i, acc: Option<f64>| MetricRow {
            index: i,
            kind: EditKind::Atomic,
            template: "recolor".into(),
            hops: 1,
            clip_sim_pct: None,
            l2_bg_pct: Some(0.0),
            edit_accuracy_pct: acc,
            nll_per_cell: None,
            plausibility_pct: None,
            composite_score: None,
            mask_iou: None,
            external_score: None,
            passthrough: false,
        };
        let r = MetricReport {
            rows: vec![row(0, Some(40.0)), row(1, None), row(2, Some(80.0))],
        };
        assert_eq!(r.aggregate("edit_accuracy_pct"), Some(60.0));
        assert_eq!(r.aggregate("clip_sim_pct"), None);
        assert!(r.validate().is_ok());
    }

    #[test]
    fn iou() {
        assert_eq!(mask_iou(&[true, true, false], &[true, false, true]), Some(1.0 / 3.0));
        assert_eq!(mask_iou(&[false, false], &[false, false]), None);
    }
}
