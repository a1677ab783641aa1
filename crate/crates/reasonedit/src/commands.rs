//! The pipeline behind each subcommand. Every command writes the resolved
//! configuration as `config.toml` beside its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reasonedit_core::eval::{evaluate, mask_iou, EvalOptions, MaskMode, MetricReport};
use reasonedit_core::microworld::{derive_seed, EditSample, World};
use reasonedit_core::model::{train as train_model, EpochLog, Model, Switches};
use reasonedit_core::params::hex_digest;
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::{self, rle_encode, Record, TRAIN_FILE, VAL_FILE};
use crate::scorer::ScorerClient;
use crate::{checkpoint, report, verify, Error, Result, Threaded};

/// Environment variable naming the data root.
pub const DATA_ENV: &str = "RGENIE_DATA_DIR";
pub const CONFIG_ECHO: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const NONFINITE_DUMP: &str = "nonfinite_batch.jsonl";
pub const EDITS_FILE: &str = "edits.jsonl";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const REPORT_FILE: &str = "report.tsv";

/// An explicit path wins, then `RGENIE_DATA_DIR`, then `./data`.
pub fn data_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("data"),
    }
}

pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    dataset::write(&dir.join(CONFIG_ECHO), &cfg.to_toml())
}

fn exec(cfg: &RunConfig) -> Threaded {
    Threaded::new(cfg.threads)
}

/// Generates the micro-world and both splits, checks that they read back
/// identically, then writes them.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let world = World::new(cfg.world.clone(), cfg.seed)?;
    let data = world.build_dataset(cfg.seed, cfg.data.n_train, cfg.data.n_val)?;
    for (name, split) in [("train", &data.train), ("val", &data.val)] {
        let text = dataset::split_to_string(name, split, &world)?;
        let (_, back) = dataset::split_from_str(&text, &world)?;
        if &back != split {
            return Err(Error::Failed(format!("{name} split does not survive serialization")));
        }
        for s in split.iter() {
            if s.mask.len() != world.cells() || !s.mask.iter().any(|&m| m) {
                return Err(Error::Failed(format!("{name} sample {} has an empty or malformed mask", s.index)));
            }
            let outside = (0..s.mask.len()).any(|c| !s.mask[c] && s.source.ids()[c] != s.target.ids()[c]);
            if outside {
                return Err(Error::Failed(format!("{name} sample {} changes cells outside its mask", s.index)));
            }
        }
    }
    dataset::write_dataset(dir, &world, &data)?;
    echo_config(cfg, dir)?;
    log::info!(
        "wrote {} train and {} val samples to {}",
        data.train.len(),
        data.val.len(),
        dir.display()
    );
    Ok(())
}

fn load_data(cfg: &RunConfig, dir: &Path) -> Result<(World, reasonedit_core::microworld::Dataset)> {
    let (world, data) = dataset::read_dataset(dir)?;
    if world.config != cfg.world {
        return Err(Error::Config(format!(
            "dataset in {} was generated with a different world config",
            dir.display()
        )));
    }
    Ok((world, data))
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub checkpoint: PathBuf,
    pub hash: String,
    pub text_encoder_hash: String,
    pub epochs: Vec<EpochLog>,
}

pub fn epoch_line(l: &EpochLog) -> String {
    format!(
        "epoch {:>3}  L_con {:.6}  L_recon {:.6}  lambda_con {:.3}  lambda_recon {:.3}  L_lm {:.6}  total {:.6}  grad_norm {:.4}",
        l.epoch, l.con, l.recon, l.lambda_con, l.lambda_recon, l.lm, l.total, l.grad_norm
    )
}

fn write_train_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut s = String::from("epoch\tL_con\tL_recon\tlambda_con\tlambda_recon\tL_lm\ttotal\tgrad_norm\n");
    for l in logs {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            l.epoch, l.con, l.recon, l.lambda_con, l.lambda_recon, l.lm, l.total, l.grad_norm
        ));
    }
    dataset::write(path, &s)
}

/// Trains on the train split and writes the checkpoint, its hash, the
/// epoch log and the config echo. A non-finite loss writes the offending
/// batch to `nonfinite_batch.jsonl` and fails.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Trained> {
    let (world, ds) = load_data(cfg, data)?;
    echo_config(cfg, out)?;
    let mut tc = cfg.train.clone();
    tc.seed = derive_seed(cfg.seed, 2, tc.seed);
    let mut model = Model::new(cfg.model.clone(), world, cfg.seed)?;
    let text_before = model.text_encoder_hash();
    let mut logs = Vec::new();
    let r = train_model(&mut model, &ds.train, &tc, &exec(cfg), |l| {
        log::info!("{}", epoch_line(l));
        logs.push(l.clone());
    });
    write_train_log(&out.join(TRAIN_LOG), &logs)?;
    if let Err(reasonedit_core::Error::NonFinite { epoch, batch, samples }) = &r {
        let dump = out.join(NONFINITE_DUMP);
        let bad: Vec<EditSample> = ds.train.iter().filter(|s| samples.contains(&s.index)).cloned().collect();
        dataset::write(&dump, &dataset::split_to_string("nonfinite", &bad, &model.world)?)?;
        return Err(Error::Failed(format!(
            "non-finite loss at epoch {epoch}, batch {batch}; batch dumped to {}",
            dump.display()
        )));
    }
    r?;
    if model.text_encoder_hash() != text_before {
        return Err(Error::Failed("frozen text encoder changed during training".into()));
    }
    let path = out.join(CHECKPOINT_FILE);
    let hash = checkpoint::save(&model, &path)?;
    dataset::write(&out.join(format!("{CHECKPOINT_FILE}.sha256")), &format!("{hash}  {CHECKPOINT_FILE}\n"))?;
    log::info!("checkpoint {} sha256 {hash}", path.display());
    Ok(Trained {
        checkpoint: path,
        hash,
        text_encoder_hash: hex_digest(&text_before),
        epochs: logs,
    })
}

/// Subdirectory for one switch combination in a sweep.
pub fn sweep_dir(root: &Path, s: &Switches) -> PathBuf {
    root.join(s.label().replace(',', "_").replace('=', "-"))
}

/// Trains every switch combination into its own subdirectory.
pub fn train_sweep(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<Trained>> {
    Switches::all_combinations()
        .iter()
        .map(|s| {
            let mut c = cfg.clone();
            c.model.switches = *s;
            log::info!("sweep: training {}", s.label());
            train(&c, data, &sweep_dir(out, s))
        })
        .collect()
}

fn load_checkpoint(path: &Path) -> Result<Model> {
    if !path.is_file() {
        return Err(Error::Failed(format!("checkpoint {} not found", path.display())));
    }
    checkpoint::load(path)
}

fn split_file(split: &str) -> Result<&'static str> {
    match split {
        "train" => Ok(TRAIN_FILE),
        "val" => Ok(VAL_FILE),
        _ => Err(Error::Config(format!("unknown split {split:?}"))),
    }
}

#[derive(Debug, Clone, Serialize)]
struct Trace {
    index: usize,
    instruction: String,
    generated: String,
    passthrough: bool,
    region_rle: Vec<usize>,
    mask_iou: Option<f64>,
    /// `(round, cell, code, confidence)`
    commits: Vec<(usize, usize, u32, f64)>,
}

/// Options of the `edit` command.
#[derive(Debug, Clone)]
pub struct EditRequest {
    pub split: String,
    pub mode: MaskMode,
    pub limit: Option<usize>,
    /// Replaces every sample's instruction.
    pub instruction: Option<String>,
}

/// Edits samples of a split and writes the edited grids in dataset record
/// format plus per-sample traces. Returns the mean mask IoU.
pub fn edit(cfg: &RunConfig, ckpt: &Path, data: &Path, out: &Path, req: &EditRequest) -> Result<Option<f64>> {
    let model = load_checkpoint(ckpt)?;
    let world = &model.world;
    let mut samples = dataset::read_split(data, world, split_file(&req.split)?)?;
    if let Some(n) = req.limit {
        samples.truncate(n);
    }
    if let Some(text) = &req.instruction {
        world.vocab.encode(text)?;
        for s in &mut samples {
            s.instruction = text.clone();
        }
    }
    echo_config(cfg, out)?;
    let results = {
        use reasonedit_core::Executor;
        exec(cfg).map(samples.len(), &|i| {
            let s = &samples[i];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 31, s.index as u64));
            let oracle = match req.mode {
                MaskMode::Oracle => Some(&s.mask[..]),
                MaskMode::Predicted => None,
            };
            model.edit(&s.source, &s.instruction, oracle, &cfg.sampler, &mut rng)
        })
    };
    let mut edited = Vec::with_capacity(samples.len());
    let mut traces = String::new();
    let mut ious = Vec::new();
    for (s, r) in samples.iter().zip(results) {
        let o = r?;
        let iou = if o.passthrough { None } else { mask_iou(&o.region, &s.mask) };
        match (o.passthrough, iou) {
            (true, _) => log::info!("sample {}: no edit signal, passthrough", s.index),
            (false, Some(v)) => log::info!("sample {}: mask IoU {v:.4}", s.index),
            (false, None) => log::info!("sample {}: mask IoU undefined", s.index),
        }
        ious.extend(iou);
        let t = Trace {
            index: s.index,
            instruction: s.instruction.clone(),
            generated: world.vocab.decode(&o.generated),
            passthrough: o.passthrough,
            region_rle: rle_encode(&o.region),
            mask_iou: iou,
            commits: o.commits.iter().map(|c| (c.round, c.cell, c.id, c.confidence)).collect(),
        };
        traces.push_str(&serde_json::to_string(&t).map_err(Error::json)?);
        traces.push('\n');
        let mut e = s.clone();
        e.target = o.output;
        edited.push(e);
    }
    dataset::write(&out.join(EDITS_FILE), &dataset::split_to_string("edits", &edited, world)?)?;
    dataset::write(&out.join(TRACES_FILE), &traces)?;
    let mean = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
    Ok(mean)
}

/// Evaluates a checkpoint on the val split. With a configured scorer each
/// edited grid is also sent out for an external score.
pub fn evaluate_checkpoint(cfg: &RunConfig, model: &Model, data: &Path, scorer: &ScorerClient) -> Result<MetricReport> {
    let samples = dataset::read_split(data, &model.world, VAL_FILE)?;
    let opts = EvalOptions {
        mode: cfg.eval.mode,
        sampler: cfg.sampler,
        weights: cfg.eval.weights,
        seed: cfg.seed,
    };
    let (mut report, grids) = evaluate(model, &samples, &opts, &exec(cfg))?;
    if scorer.is_configured() {
        for ((row, s), g) in report.rows.iter_mut().zip(&samples).zip(grids) {
            let mut e = s.clone();
            e.target = g;
            let body = serde_json::to_string(&Record::from_sample(&e, &model.world)?).map_err(Error::json)?;
            row.external_score = scorer.score(&body);
            if row.external_score.is_none() {
                log::warn!("sample {}: scorer gave no answer", s.index);
            }
        }
    }
    report.validate()?;
    Ok(report)
}

/// Writes `report.tsv` for one checkpoint.
pub fn eval(cfg: &RunConfig, ckpt: &Path, data: &Path, out: &Path) -> Result<MetricReport> {
    let model = load_checkpoint(ckpt)?;
    echo_config(cfg, out)?;
    let report = evaluate_checkpoint(cfg, &model, data, &ScorerClient::from_config(cfg.scorer.as_ref()))?;
    dataset::write(&out.join(REPORT_FILE), &report::render(&report))?;
    Ok(report)
}

/// Evaluates every switch combination found under `root` (as written by
/// [`train_sweep`]) and writes one report per combination.
pub fn eval_sweep(cfg: &RunConfig, root: &Path, data: &Path, out: &Path) -> Result<Vec<(Switches, MetricReport)>> {
    echo_config(cfg, out)?;
    let scorer = ScorerClient::from_config(cfg.scorer.as_ref());
    let mut all = Vec::new();
    for s in Switches::all_combinations() {
        let model = load_checkpoint(&sweep_dir(root, &s).join(CHECKPOINT_FILE))?;
        if model.cfg.switches != s {
            return Err(Error::Failed(format!("checkpoint for {} was trained with other switches", s.label())));
        }
        let report = evaluate_checkpoint(cfg, &model, data, &scorer)?;
        let name = format!("report_{}.tsv", s.label().replace(',', "_").replace('=', "-"));
        dataset::write(&out.join(name), &report::render(&report))?;
        all.push((s, report));
    }
    Ok(all)
}

/// Runs the self-checks, printing one line per check. Fails if any check
/// fails.
pub fn verify(filter: Option<&str>) -> Result<Vec<verify::Outcome>> {
    let checks: Vec<verify::Check> = verify::all_checks()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .collect();
    if checks.is_empty() {
        return Err(Error::Config("no check matches the filter".into()));
    }
    let outcomes = verify::run(&checks, |o| {
        println!(
            "{} {:<34} {:>7.2}s  {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.seconds,
            o.detail
        );
    });
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} checks, {failed} failed", outcomes.len());
    if failed > 0 {
        return Err(Error::Failed(format!("{failed} verification checks failed")));
    }
    Ok(outcomes)
}
