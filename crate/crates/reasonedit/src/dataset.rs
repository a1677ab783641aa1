//! Line-delimited dataset files, the world description and the
//! special-token sidecar.

use std::fs;
use std::path::Path;

use reasonedit_core::microworld::{Dataset, EditKind, EditSample, Template, World, WorldConfig};
use reasonedit_core::tokenization::{Codebook, TokenGrid};
use reasonedit_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const FORMAT: &str = "reasonedit-dataset";
pub const VERSION: u32 = 1;
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const WORLD_FILE: &str = "world.json";
pub const SPECIALS_FILE: &str = "specials.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub split: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
}

/// One sample as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub index: usize,
    pub seed: u64,
    pub kind: EditKind,
    pub template: String,
    pub hops: usize,
    pub instruction: String,
    pub instruction_ids: Vec<usize>,
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    /// Alternating run lengths, starting with cells outside the mask.
    pub mask_rle: Vec<usize>,
    pub reasoning: Vec<String>,
    pub target_text: String,
}

/// Run lengths of alternating `false`/`true` stretches, starting with
/// `false` (possibly a zero-length run).
pub fn rle_encode(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut cur = false;
    let mut len = 0;
    for &m in mask {
        if m == cur {
            len += 1;
        } else {
            runs.push(len);
            cur = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[usize], cells: usize) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(cells);
    for (i, &r) in runs.iter().enumerate() {
        out.extend(std::iter::repeat(i % 2 == 1).take(r));
    }
    if out.len() != cells {
        return Err(Error::Format(format!("mask runs cover {} cells, grid has {cells}", out.len())));
    }
    Ok(out)
}

impl Record {
    pub fn from_sample(s: &EditSample, world: &World) -> Result<Self> {
        Ok(Self {
            index: s.index,
            seed: s.seed,
            kind: s.kind,
            template: s.template.name().into(),
            hops: s.hops,
            instruction: s.instruction.clone(),
            instruction_ids: world.vocab.encode(&s.instruction)?,
            source: s.source.ids().to_vec(),
            target: s.target.ids().to_vec(),
            mask_rle: rle_encode(&s.mask),
            reasoning: s.reasoning.clone(),
            target_text: s.target_text.clone(),
        })
    }

    pub fn into_sample(self, height: usize, width: usize, world: &World) -> Result<EditSample> {
        let template = Template::parse(&self.template)
            .ok_or_else(|| Error::Format(format!("unknown template {:?}", self.template)))?;
        if world.vocab.encode(&self.instruction)? != self.instruction_ids {
            return Err(Error::Format(format!("record {}: instruction ids disagree with text", self.index)));
        }
        let k = world.codebook.len();
        let source = TokenGrid::new(height, width, self.source)?;
        let target = TokenGrid::new(height, width, self.target)?;
        source.validate(k)?;
        target.validate(k)?;
        Ok(EditSample {
            index: self.index,
            seed: self.seed,
            kind: self.kind,
            template,
            hops: self.hops,
            instruction: self.instruction,
            mask: rle_decode(&self.mask_rle, height * width)?,
            source,
            target,
            reasoning: self.reasoning,
            target_text: self.target_text,
        })
    }
}

/// World configuration and codebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    pub format: String,
    pub version: u32,
    pub config: WorldConfig,
    pub codebook_rows: usize,
    pub codebook_dim: usize,
    pub codebook: Vec<f64>,
}

impl WorldFile {
    pub fn from_world(w: &World) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: w.config.clone(),
            codebook_rows: w.codebook.len(),
            codebook_dim: w.codebook.dim(),
            codebook: w.codebook.codes().data().to_vec(),
        }
    }

    pub fn into_world(self) -> Result<World> {
        check_version(&self.format, self.version)?;
        let codes = Tensor::matrix(self.codebook_rows, self.codebook_dim, self.codebook)?;
        Ok(World::from_parts(self.config, Codebook::new(codes)?)?)
    }
}

fn check_version(format: &str, version: u32) -> Result<()> {
    if format != FORMAT || version != VERSION {
        return Err(Error::Format(format!("expected {FORMAT} v{VERSION}, found {format} v{version}")));
    }
    Ok(())
}

/// Serializes one split: header line then one record per line.
pub fn split_to_string(split: &str, samples: &[EditSample], world: &World) -> Result<String> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        split: split.into(),
        count: samples.len(),
        height: world.config.height,
        width: world.config.width,
    };
    let mut out = serde_json::to_string(&header).map_err(Error::json)?;
    out.push('\n');
    for s in samples {
        out.push_str(&serde_json::to_string(&Record::from_sample(s, world)?).map_err(Error::json)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn split_from_str(text: &str, world: &World) -> Result<(Header, Vec<EditSample>)> {
    let mut lines = text.lines();
    let header: Header = serde_json::from_str(lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))?)
        .map_err(Error::json)?;
    check_version(&header.format, header.version)?;
    if (header.height, header.width) != (world.config.height, world.config.width) {
        return Err(Error::Format("dataset grid size differs from world".into()));
    }
    let samples = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: Record = serde_json::from_str(l).map_err(Error::json)?;
            r.into_sample(header.height, header.width, world)
        })
        .collect::<Result<Vec<_>>>()?;
    if samples.len() != header.count {
        return Err(Error::Format(format!("header announces {} records, found {}", header.count, samples.len())));
    }
    Ok((header, samples))
}

/// Writes `train.jsonl`, `val.jsonl`, `world.json` and the specials sidecar.
pub fn write_dataset(dir: &Path, world: &World, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let world_json = serde_json::to_string_pretty(&WorldFile::from_world(world)).map_err(Error::json)? + "\n";
    write(&dir.join(WORLD_FILE), &world_json)?;
    write(&dir.join(SPECIALS_FILE), &world.vocab.specials_sidecar())?;
    write(&dir.join(TRAIN_FILE), &split_to_string("train", &data.train, world)?)?;
    write(&dir.join(VAL_FILE), &split_to_string("val", &data.val, world)?)?;
    Ok(())
}

pub fn read_world(dir: &Path) -> Result<World> {
    let p = dir.join(WORLD_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let wf: WorldFile = serde_json::from_str(&text).map_err(Error::json)?;
    wf.into_world()
}

pub fn read_split(dir: &Path, world: &World, file: &str) -> Result<Vec<EditSample>> {
    let p = dir.join(file);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(split_from_str(&text, world)?.1)
}

pub fn read_dataset(dir: &Path) -> Result<(World, Dataset)> {
    let world = read_world(dir)?;
    let train = read_split(dir, &world, TRAIN_FILE)?;
    let val = read_split(dir, &world, VAL_FILE)?;
    Ok((world, Dataset { train, val }))
}

pub(crate) fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rle_round_trips(mask in proptest::collection::vec(any::<bool>(), 0..200)) {
            let runs = rle_encode(&mask);
            prop_assert_eq!(rle_decode(&runs, mask.len()).unwrap(), mask);
        }
    }

    #[test]
    fn rle_examples() {
        assert_eq!(rle_encode(&[true, true, false]), vec![0, 2, 1]);
        assert_eq!(rle_encode(&[false, false]), vec![2]);
        assert!(rle_decode(&[1, 1], 3).is_err());
    }

    #[test]
    fn split_round_trip() {
        let world = World::new(WorldConfig::desk(), 1).unwrap();
        let data = world.build_dataset(2, 6, 4).unwrap();
        let text = split_to_string("train", &data.train, &world).unwrap();
        let (h, back) = split_from_str(&text, &world).unwrap();
        assert_eq!(h.count, 6);
        assert_eq!(back, data.train);
        let wf = WorldFile::from_world(&world);
        let json = serde_json::to_string(&wf).unwrap();
        let w2 = serde_json::from_str::<WorldFile>(&json).unwrap().into_world().unwrap();
        assert_eq!(w2, world);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let world = World::new(WorldConfig::desk(), 1).unwrap();
        let data = world.build_dataset(2, 2, 2).unwrap();
        let text = split_to_string("val", &data.val, &world).unwrap().replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(split_from_str(&text, &world), Err(Error::Format(_))));
    }
}
