//! Procedural editing benchmark: coloured shapes on a grid, templated
//! instructions with atomic and composite referents, exact targets and
//! edit masks.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenization::{quantize, Codebook, TokenGrid, Vocabulary};

/// Feature depth of a rendered cell: colour prototype then shape prototype.
pub const FEATURE_DIM: usize = 16;

const PLACEMENT_ATTEMPTS: usize = 1000;
const SAMPLE_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Color {
    Red,
    Orange,
    Yellow,
    Green,
    Blue,
    Purple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Warm,
    Cool,
}

/// Which colours count as warm. Everything else is cool.
pub const WARM_COLORS: [Color; 3] = [Color::Red, Color::Orange, Color::Yellow];

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Orange,
        Color::Yellow,
        Color::Green,
        Color::Blue,
        Color::Purple,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Orange => "orange",
            Color::Yellow => "yellow",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Purple => "purple",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn category(self) -> Category {
        if WARM_COLORS.contains(&self) {
            Category::Warm
        } else {
            Category::Cool
        }
    }
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Warm => "warm",
            Category::Cool => "cool",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Category::Warm => Category::Cool,
            Category::Cool => Category::Warm,
        }
    }

    pub fn colors(self) -> Vec<Color> {
        Color::ALL
            .iter()
            .copied()
            .filter(|c| c.category() == self)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Square,
    Circle,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Bar];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Bar => "bar",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Only meaningful for bars.
    pub vertical: bool,
    pub row: usize,
    pub col: usize,
}

impl Object {
    /// Bounding box extent `(height, width)`.
    pub fn extent(&self) -> (usize, usize) {
        match (self.shape, self.size) {
            (Shape::Square | Shape::Circle, Size::Small) => (2, 2),
            (Shape::Square | Shape::Circle, Size::Large) => (3, 3),
            (Shape::Bar, size) => {
                let len = if size == Size::Small { 2 } else { 4 };
                if self.vertical {
                    (len, 1)
                } else {
                    (1, len)
                }
            }
        }
    }

    /// Occupied cells in row-major order.
    pub fn footprint(&self) -> Vec<(usize, usize)> {
        let (h, w) = self.extent();
        let mut cells = Vec::with_capacity(h * w);
        for dr in 0..h {
            for dc in 0..w {
                let corner = (dr == 0 || dr == h - 1) && (dc == 0 || dc == w - 1);
                if self.shape == Shape::Circle && self.size == Size::Large && corner {
                    continue;
                }
                cells.push((self.row + dr, self.col + dc));
            }
        }
        cells
    }

    pub fn last_col(&self) -> usize {
        self.col + self.extent().1 - 1
    }

    /// Words naming this object: `<size> <color> <shape>`.
    pub fn describe(&self) -> [&'static str; 3] {
        [self.size.name(), self.color.name(), self.shape.name()]
    }

    /// True when the bounding boxes, grown by one cell, intersect.
    fn crowds(&self, other: &Object) -> bool {
        let (h1, w1) = self.extent();
        let (h2, w2) = other.extent();
        let (r1, c1) = (self.row as isize, self.col as isize);
        let (r2, c2) = (other.row as isize, other.col as isize);
        r1 - 1 < r2 + h2 as isize && r2 < r1 + h1 as isize + 1 && c1 - 1 < c2 + w2 as isize && c2 < c1 + w1 as isize + 1
    }
}

/// Appearance of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Appearance {
    Background,
    Paint(Color, Shape),
}

impl Appearance {
    pub fn feature(self) -> [f64; FEATURE_DIM] {
        let mut f = [0.0; FEATURE_DIM];
        if let Appearance::Paint(c, s) = self {
            f[c.index()] = 1.0;
            f[8 + s.index()] = 1.0;
        }
        f
    }

    /// Background first, then colour-major over shapes.
    pub fn all() -> Vec<Appearance> {
        let mut v = vec![Appearance::Background];
        for c in Color::ALL {
            for s in Shape::ALL {
                v.push(Appearance::Paint(c, s));
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn appearance(&self) -> Vec<Appearance> {
        let mut cells = vec![Appearance::Background; self.height * self.width];
        for o in &self.objects {
            for (r, c) in o.footprint() {
                cells[r * self.width + c] = Appearance::Paint(o.color, o.shape);
            }
        }
        cells
    }

    /// `H×W×FEATURE_DIM` cell features.
    pub fn render(&self) -> Tensor {
        let data = self
            .appearance()
            .into_iter()
            .flat_map(|a| a.feature())
            .collect();
        Tensor::new(&[self.height, self.width, FEATURE_DIM], data).expect("extent matches")
    }

    /// Cell-level footprint of every object, as a mask.
    pub fn object_mask(&self, idx: &[usize]) -> Vec<bool> {
        let mut m = vec![false; self.height * self.width];
        for &i in idx {
            for (r, c) in self.objects[i].footprint() {
                m[r * self.width + c] = true;
            }
        }
        m
    }

    /// Every footprint cell is covered by at most one object.
    pub fn overlap_free(&self) -> bool {
        let mut seen = vec![false; self.height * self.width];
        for o in &self.objects {
            for (r, c) in o.footprint() {
                if r >= self.height || c >= self.width || seen[r * self.width + c] {
                    return false;
                }
                seen[r * self.width + c] = true;
            }
        }
        true
    }

    /// Objects in reading order of their top-left corners.
    pub fn reading_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.objects.len()).collect();
        idx.sort_by_key(|&i| (self.objects[i].row, self.objects[i].col, i));
        idx
    }

    /// `<size> <color> <shape>` for each object in reading order.
    pub fn describe(&self) -> Vec<String> {
        self.reading_order()
            .into_iter()
            .flat_map(|i| self.objects[i].describe())
            .map(str::to_string)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub codebook_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            min_objects: 1,
            max_objects: 5,
            codebook_size: 64,
        }
    }
}

impl WorldConfig {
    /// Small grid for single-core training runs.
    pub fn desk() -> Self {
        Self {
            height: 8,
            width: 8,
            min_objects: 2,
            max_objects: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::input("grid must be at least 4×4"));
        }
        if self.min_objects < 1 || self.max_objects > 5 || self.min_objects > self.max_objects {
            return Err(Error::input("object count must satisfy 1 ≤ min ≤ max ≤ 5"));
        }
        if self.codebook_size < 2 {
            return Err(Error::input("codebook needs at least two codes"));
        }
        Ok(())
    }
}

pub fn generate_scene<R: Rng>(rng: &mut R, cfg: &WorldConfig) -> Result<Scene> {
    cfg.validate()?;
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<Object> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let mut o = Object {
                shape: *Shape::ALL.choose(rng).unwrap(),
                color: *Color::ALL.choose(rng).unwrap(),
                size: if rng.random_bool(0.5) { Size::Small } else { Size::Large },
                vertical: rng.random_bool(0.5),
                row: 0,
                col: 0,
            };
            let (h, w) = o.extent();
            if h > cfg.height || w > cfg.width {
                continue;
            }
            o.row = rng.random_range(0..=cfg.height - h);
            o.col = rng.random_range(0..=cfg.width - w);
            if objects.iter().all(|p| !p.crowds(&o)) {
                objects.push(o);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place object {} of {n} after {PLACEMENT_ATTEMPTS} attempts",
                objects.len() + 1
            )));
        }
    }
    Ok(Scene {
        height: cfg.height,
        width: cfg.width,
        objects,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    Atomic,
    Composite,
}

impl EditKind {
    pub fn name(self) -> &'static str {
        match self {
            EditKind::Atomic => "atomic",
            EditKind::Composite => "composite",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "atomic" => Some(EditKind::Atomic),
            "composite" => Some(EditKind::Composite),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Template {
    /// change the <color> <shape> to <color2>
    Recolor,
    /// remove the <color> <shape>
    Remove,
    /// change the largest object to <color2>
    Largest,
    /// remove the object left of the <color> <shape>
    LeftOf,
    /// recolor every <category> object to <color2>
    RecolorCategory,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::Recolor,
        Template::Remove,
        Template::Largest,
        Template::LeftOf,
        Template::RecolorCategory,
    ];

    pub fn kind(self) -> EditKind {
        match self {
            Template::Recolor | Template::Remove => EditKind::Atomic,
            _ => EditKind::Composite,
        }
    }

    pub fn of_kind(kind: EditKind) -> Vec<Template> {
        Self::ALL.iter().copied().filter(|t| t.kind() == kind).collect()
    }

    pub fn hops(self) -> usize {
        match self.kind() {
            EditKind::Atomic => 1,
            EditKind::Composite => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Template::Recolor => "recolor",
            Template::Remove => "remove",
            Template::Largest => "largest",
            Template::LeftOf => "left_of",
            Template::RecolorCategory => "recolor_category",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| t.name() == s)
    }
}

/// Template × attribute pairs reserved for validation. The attribute is
/// the referent colour for single-referent templates, the anchor colour
/// for `LeftOf` and the new colour for `RecolorCategory`.
pub const HELD_OUT: [(Template, Color); 6] = [
    (Template::Recolor, Color::Purple),
    (Template::Remove, Color::Yellow),
    (Template::Largest, Color::Green),
    (Template::LeftOf, Color::Orange),
    (Template::RecolorCategory, Color::Blue),
    (Template::RecolorCategory, Color::Red),
];

pub fn is_held_out(template: Template, attribute: Color) -> bool {
    HELD_OUT.contains(&(template, attribute))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Recolor(Color),
    Remove,
}

/// A filled template before it is applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub template: Template,
    pub text: String,
    pub op: EditOp,
    /// Object indices edited, in reading order.
    pub referents: Vec<usize>,
    pub attribute: Color,
}

impl Instruction {
    pub fn held_out(&self) -> bool {
        is_held_out(self.template, self.attribute)
    }
}

fn unique_by_color_shape(scene: &Scene, i: usize) -> bool {
    let o = &scene.objects[i];
    scene
        .objects
        .iter()
        .filter(|p| p.color == o.color && p.shape == o.shape)
        .count()
        == 1
}

fn sort_reading(scene: &Scene, mut idx: Vec<usize>) -> Vec<usize> {
    idx.sort_by_key(|&i| (scene.objects[i].row, scene.objects[i].col, i));
    idx
}

/// Every valid filling of `template` in `scene`.
pub fn instantiate(scene: &Scene, template: Template) -> Vec<Instruction> {
    let mut out = Vec::new();
    let objs = &scene.objects;
    match template {
        Template::Recolor => {
            for i in 0..objs.len() {
                if !unique_by_color_shape(scene, i) {
                    continue;
                }
                let o = objs[i];
                for c2 in Color::ALL.iter().copied().filter(|&c| c != o.color) {
                    out.push(Instruction {
                        template,
                        text: format!("change the {} {} to {}", o.color.name(), o.shape.name(), c2.name()),
                        op: EditOp::Recolor(c2),
                        referents: vec![i],
                        attribute: o.color,
                    });
                }
            }
        }
        Template::Remove => {
            for i in 0..objs.len() {
                if unique_by_color_shape(scene, i) {
                    let o = objs[i];
                    out.push(Instruction {
                        template,
                        text: format!("remove the {} {}", o.color.name(), o.shape.name()),
                        op: EditOp::Remove,
                        referents: vec![i],
                        attribute: o.color,
                    });
                }
            }
        }
        Template::Largest => {
            let large: Vec<usize> = (0..objs.len()).filter(|&i| objs[i].size == Size::Large).collect();
            if let [i] = large[..] {
                for c2 in Color::ALL.iter().copied().filter(|&c| c != objs[i].color) {
                    out.push(Instruction {
                        template,
                        text: format!("change the largest object to {}", c2.name()),
                        op: EditOp::Recolor(c2),
                        referents: vec![i],
                        attribute: objs[i].color,
                    });
                }
            }
        }
        Template::LeftOf => {
            for a in 0..objs.len() {
                if !unique_by_color_shape(scene, a) {
                    continue;
                }
                let left: Vec<usize> = (0..objs.len())
                    .filter(|&j| j != a && objs[j].last_col() < objs[a].col)
                    .collect();
                if let [j] = left[..] {
                    out.push(Instruction {
                        template,
                        text: format!(
                            "remove the object left of the {} {}",
                            objs[a].color.name(),
                            objs[a].shape.name()
                        ),
                        op: EditOp::Remove,
                        referents: vec![j],
                        attribute: objs[a].color,
                    });
                }
            }
        }
        Template::RecolorCategory => {
            for cat in [Category::Warm, Category::Cool] {
                let members: Vec<usize> = (0..objs.len()).filter(|&i| objs[i].color.category() == cat).collect();
                if members.is_empty() {
                    continue;
                }
                let members = sort_reading(scene, members);
                for c2 in cat.other().colors() {
                    out.push(Instruction {
                        template,
                        text: format!("recolor every {} object to {}", cat.name(), c2.name()),
                        op: EditOp::Recolor(c2),
                        referents: members.clone(),
                        attribute: c2,
                    });
                }
            }
        }
    }
    out
}

/// Applies an instruction, returning the target scene.
pub fn apply(scene: &Scene, ins: &Instruction) -> Scene {
    let mut target = scene.clone();
    match ins.op {
        EditOp::Recolor(c) => {
            for &i in &ins.referents {
                target.objects[i].color = c;
            }
        }
        EditOp::Remove => {
            let mut keep = Vec::new();
            for (i, o) in scene.objects.iter().enumerate() {
                if !ins.referents.contains(&i) {
                    keep.push(*o);
                }
            }
            target.objects = keep;
        }
    }
    target
}

/// Text describing the edited region after the edit.
pub fn target_description(scene: &Scene, ins: &Instruction) -> String {
    match (ins.op, ins.template) {
        (EditOp::Remove, _) => "empty background".to_string(),
        (EditOp::Recolor(c), Template::RecolorCategory) => format!("{} objects", c.name()),
        (EditOp::Recolor(c), _) => format!("{} {}", c.name(), scene.objects[ins.referents[0]].shape.name()),
    }
}

/// Closed word list for instructions, reasoning chains and descriptions.
pub fn word_list() -> Vec<String> {
    let mut w: Vec<&str> = vec![
        "change", "the", "to", "remove", "largest", "object", "left", "of", "recolor", "every", "objects",
        "describe", "scene", "empty", "background", "warm", "cool", "small", "large",
    ];
    w.extend(Color::ALL.iter().map(|c| c.name()));
    w.extend(Shape::ALL.iter().map(|s| s.name()));
    w.into_iter().map(str::to_string).collect()
}

pub const DESCRIBE_PROMPT: &str = "describe the scene";

/// One benchmark sample in its serialisable form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditSample {
    pub index: usize,
    pub seed: u64,
    pub kind: EditKind,
    pub template: Template,
    pub hops: usize,
    pub instruction: String,
    pub source: TokenGrid,
    pub target: TokenGrid,
    pub mask: Vec<bool>,
    /// Referent words the reasoning chain should produce.
    pub reasoning: Vec<String>,
    pub target_text: String,
}

/// A sample together with the scenes it came from.
#[derive(Debug, Clone)]
pub struct Generated {
    pub sample: EditSample,
    pub scene: Scene,
    pub target_scene: Scene,
    pub instruction: Instruction,
}

/// Scene configuration plus the frozen codebook and vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub codebook: Codebook,
    pub vocab: Vocabulary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl World {
    /// Fits the codebook by k-means on cells of `fit_scenes` random scenes.
    pub fn new(config: WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut rows = 0;
        for _ in 0..64 {
            let s = generate_scene(&mut rng, &config)?;
            let f = s.render();
            rows += f.len() / FEATURE_DIM;
            data.extend(f.into_data());
        }
        let samples = Tensor::matrix(rows, FEATURE_DIM, data)?;
        let codebook = Codebook::fit(&samples, config.codebook_size, 50, &mut rng)?;
        let vocab = Vocabulary::new(word_list(), codebook.len())?;
        Ok(Self {
            config,
            codebook,
            vocab,
        })
    }

    pub fn from_parts(config: WorldConfig, codebook: Codebook) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::new(word_list(), codebook.len())?;
        Ok(Self {
            config,
            codebook,
            vocab,
        })
    }

    pub fn cells(&self) -> usize {
        self.config.height * self.config.width
    }

    pub fn tokenize(&self, scene: &Scene) -> TokenGrid {
        quantize(&scene.render(), &self.codebook).expect("rendered features are finite")
    }

    /// Draws a sample of `kind` whose template × attribute pair belongs to
    /// `split`.
    pub fn generate_sample(&self, seed: u64, index: usize, kind: EditKind, split: Split) -> Result<Generated> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // fixed before the scene loop so rejection does not skew the mix
        let template = *Template::of_kind(kind).choose(&mut rng).unwrap();
        for _ in 0..SAMPLE_ATTEMPTS {
            let scene = match generate_scene(&mut rng, &self.config) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let want_held = split == Split::Val;
            let options: Vec<Instruction> = instantiate(&scene, template)
                .into_iter()
                .filter(|i| i.held_out() == want_held)
                .collect();
            let Some(ins) = options.choose(&mut rng).cloned() else {
                continue;
            };
            let target_scene = apply(&scene, &ins);
            let reasoning = ins
                .referents
                .iter()
                .flat_map(|&i| scene.objects[i].describe())
                .map(str::to_string)
                .collect();
            let sample = EditSample {
                index,
                seed,
                kind,
                template,
                hops: template.hops(),
                instruction: ins.text.clone(),
                source: self.tokenize(&scene),
                target: self.tokenize(&target_scene),
                mask: scene.object_mask(&ins.referents),
                reasoning,
                target_text: target_description(&scene, &ins),
            };
            return Ok(Generated {
                sample,
                scene,
                target_scene,
                instruction: ins,
            });
        }
        Err(Error::Generation(format!(
            "no {} sample for split {split:?} after {SAMPLE_ATTEMPTS} scenes",
            template.name()
        )))
    }

    /// Train and validation samples. Kinds alternate so each is half of
    /// every split; validation uses only held-out template × attribute pairs.
    pub fn build_dataset(&self, seed: u64, n_train: usize, n_val: usize) -> Result<Dataset> {
        if n_train == 0 || n_val == 0 {
            return Err(Error::input("split sizes must be at least 1"));
        }
        let make = |split: Split, n: usize| -> Result<Vec<EditSample>> {
            (0..n)
                .map(|i| {
                    let kind = if i % 2 == 0 { EditKind::Atomic } else { EditKind::Composite };
                    let s = derive_seed(seed, split as u64, i as u64);
                    self.generate_sample(s, i, kind, split).map(|g| g.sample)
                })
                .collect()
        };
        Ok(Dataset {
            train: make(Split::Train, n_train)?,
            val: make(Split::Val, n_val)?,
        })
    }

    /// Scene description samples without an edit, for the reasoning head.
    pub fn describe_scene(&self, seed: u64) -> Result<(TokenGrid, Vec<String>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..SAMPLE_ATTEMPTS {
            if let Ok(s) = generate_scene(&mut rng, &self.config) {
                return Ok((self.tokenize(&s), s.describe()));
            }
        }
        Err(Error::Generation("no scene for description".into()))
    }
}

pub const DEFAULT_TRAIN: usize = 850;
pub const DEFAULT_VAL: usize = 220;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<EditSample>,
    pub val: Vec<EditSample>,
}

/// SplitMix64-style mixing of a base seed with two stream coordinates.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(shape: Shape, color: Color, size: Size, row: usize, col: usize) -> Object {
        Object {
            shape,
            color,
            size,
            vertical: false,
            row,
            col,
        }
    }

    #[test]
    fn footprints_have_documented_sizes() {
        let cells = |s, z| obj(s, Color::Red, z, 0, 0).footprint().len();
        assert_eq!(cells(Shape::Square, Size::Small), 4);
        assert_eq!(cells(Shape::Square, Size::Large), 9);
        assert_eq!(cells(Shape::Circle, Size::Large), 5);
        assert_eq!(cells(Shape::Bar, Size::Small), 2);
        assert_eq!(cells(Shape::Bar, Size::Large), 4);
    }

    #[test]
    fn single_object_config() {
        let cfg = WorldConfig {
            min_objects: 1,
            max_objects: 1,
            ..WorldConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = generate_scene(&mut rng, &cfg).unwrap();
        assert_eq!(s.objects.len(), 1);
    }

    #[test]
    fn largest_is_rejected_when_ambiguous() {
        let scene = Scene {
            height: 16,
            width: 16,
            objects: vec![
                obj(Shape::Square, Color::Red, Size::Small, 0, 0),
                obj(Shape::Square, Color::Blue, Size::Large, 5, 5),
                obj(Shape::Circle, Color::Green, Size::Large, 10, 10),
            ],
        };
        assert!(instantiate(&scene, Template::Largest).is_empty());
        let mut two = scene.clone();
        two.objects[2].size = Size::Small;
        let ins = instantiate(&two, Template::Largest);
        assert_eq!(ins.len(), 5);
        assert!(ins.iter().all(|i| i.referents == vec![1]));
    }

    #[test]
    fn atomic_mask_is_the_footprint() {
        let scene = Scene {
            height: 8,
            width: 8,
            objects: vec![obj(Shape::Circle, Color::Red, Size::Large, 1, 1)],
        };
        let ins = &instantiate(&scene, Template::Recolor)[0];
        let m = scene.object_mask(&ins.referents);
        let expect: Vec<bool> = (0..64)
            .map(|i| scene.objects[0].footprint().contains(&(i / 8, i % 8)))
            .collect();
        assert_eq!(m, expect);
        assert_eq!(m.iter().filter(|&&b| b).count(), 5);
    }

    #[test]
    fn category_table() {
        assert_eq!(Category::Warm.colors(), WARM_COLORS.to_vec());
        assert_eq!(Color::Blue.category(), Category::Cool);
    }

    #[test]
    fn every_template_has_a_held_out_attribute() {
        for t in Template::ALL {
            assert!(HELD_OUT.iter().any(|(h, _)| *h == t));
        }
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
    }
}
