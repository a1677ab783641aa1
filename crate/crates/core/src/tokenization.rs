//! Shared id space, the visual codebook and discrete token grids.
//!
//! Ids are laid out contiguously: text words first, then one id per
//! codebook entry, then the six special tokens.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Reason,
    Edit,
    Mask,
    Pad,
    Bos,
    Eos,
}

impl Special {
    pub const ALL: [Special; 6] = [
        Special::Reason,
        Special::Edit,
        Special::Mask,
        Special::Pad,
        Special::Bos,
        Special::Eos,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Special::Reason => "<REASON>",
            Special::Edit => "<EDIT>",
            Special::Mask => "<MASK>",
            Special::Pad => "<PAD>",
            Special::Bos => "<BOS>",
            Special::Eos => "<EOS>",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    visual: usize,
}

impl Vocabulary {
    /// `words` must be unique and non-empty strings without whitespace.
    pub fn new(words: Vec<String>, visual: usize) -> Result<Self> {
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::input(format!("bad vocabulary word {w:?}")));
            }
            if words[..i].contains(w) {
                return Err(Error::input(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, visual })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_visual(&self) -> usize {
        self.visual
    }

    /// Total number of ids.
    pub fn len(&self) -> usize {
        self.words.len() + self.visual + Special::ALL.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn special(&self, s: Special) -> usize {
        let base = self.words.len() + self.visual;
        base + Special::ALL.iter().position(|x| *x == s).unwrap()
    }

    pub fn reason(&self) -> usize {
        self.special(Special::Reason)
    }

    pub fn edit(&self) -> usize {
        self.special(Special::Edit)
    }

    pub fn eos(&self) -> usize {
        self.special(Special::Eos)
    }

    pub fn bos(&self) -> usize {
        self.special(Special::Bos)
    }

    pub fn word_id(&self, w: &str) -> Option<usize> {
        self.words.iter().position(|x| x == w)
    }

    /// Id of codebook entry `code`.
    pub fn visual_id(&self, code: usize) -> usize {
        debug_assert!(code < self.visual);
        self.words.len() + code
    }

    /// Codebook index for a visual id.
    pub fn code_of(&self, id: usize) -> Option<usize> {
        let lo = self.words.len();
        (lo..lo + self.visual).contains(&id).then(|| id - lo)
    }

    pub fn is_word(&self, id: usize) -> bool {
        id < self.words.len()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id >= self.words.len() + self.visual && id < self.len()
    }

    /// Whitespace-separated words to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.word_id(w)
                    .ok_or_else(|| Error::input(format!("word {w:?} not in vocabulary")))
            })
            .collect()
    }

    /// Renders ids back to text; visual ids as `v<code>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < self.words.len() {
                parts.push(self.words[id].clone());
            } else if let Some(c) = self.code_of(id) {
                parts.push(format!("v{c}"));
            } else if self.is_special(id) {
                let s = Special::ALL[id - self.words.len() - self.visual];
                parts.push(s.symbol().to_string());
            } else {
                parts.push(format!("?{id}"));
            }
        }
        parts.join(" ")
    }

    /// `name<TAB>id` lines for the special tokens.
    pub fn specials_sidecar(&self) -> String {
        let mut s = String::new();
        for sp in Special::ALL {
            s.push_str(sp.symbol());
            s.push('\t');
            s.push_str(&self.special(sp).to_string());
            s.push('\n');
        }
        s
    }
}

/// `text ++ [REASON]`.
pub fn append_reason(text_ids: &[usize], vocab: &Vocabulary) -> Vec<usize> {
    let mut v = text_ids.to_vec();
    v.push(vocab.reason());
    v
}

/// Index of the first EDIT token, if any.
pub fn find_edit_position(output_ids: &[usize], vocab: &Vocabulary) -> Option<usize> {
    let edit = vocab.edit();
    output_ids.iter().position(|&t| t == edit)
}

/// `H×W` grid of codebook indices; [`TokenGrid::MASK`] marks absorbed cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    h: usize,
    w: usize,
    ids: Vec<u32>,
}

impl TokenGrid {
    pub const MASK: u32 = u32::MAX;

    pub fn new(h: usize, w: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != h * w {
            return Err(Error::shape("token_grid", &[h, w], &[ids.len()]));
        }
        Ok(Self { h, w, ids })
    }

    pub fn filled(h: usize, w: usize, id: u32) -> Self {
        Self {
            h,
            w,
            ids: vec![id; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u32] {
        &mut self.ids
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.ids[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, id: u32) {
        self.ids[r * self.w + c] = id;
    }

    pub fn has_mask(&self) -> bool {
        self.ids.contains(&Self::MASK)
    }

    /// Checks every id is a code below `k` or MASK.
    pub fn validate(&self, k: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id != Self::MASK && id as usize >= k) {
            Some(id) => Err(Error::input(format!("token id {id} outside codebook of {k}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codes: Tensor,
}

impl Codebook {
    /// `codes` is `K×c` with finite entries.
    pub fn new(codes: Tensor) -> Result<Self> {
        if codes.ndim() != 2 || codes.rows() == 0 || codes.cols() == 0 {
            return Err(Error::input("codebook must be a non-empty K×c matrix"));
        }
        if !codes.is_finite() {
            return Err(Error::input("codebook entries must be finite"));
        }
        Ok(Self { codes })
    }

    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    pub fn code(&self, i: usize) -> &[f64] {
        self.codes.row_slice(i)
    }

    /// Nearest code by squared distance, lowest index on ties.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.len() {
            let d = sq_dist(x, self.code(k));
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }

    /// k-means over the rows of `samples` (`n×c`) with k-means++ seeding.
    /// When the samples hold fewer than `k` distinct points the surplus
    /// codes duplicate existing ones and are never selected by
    /// [`Codebook::nearest`].
    pub fn fit<R: Rng>(samples: &Tensor, k: usize, iters: usize, rng: &mut R) -> Result<Self> {
        let (n, c) = (samples.rows(), samples.cols());
        if k < 2 {
            return Err(Error::input("codebook needs at least two codes"));
        }
        if n == 0 || !samples.is_finite() {
            return Err(Error::input("k-means needs finite samples"));
        }
        let row = |i: usize| samples.row_slice(i);
        let mut centers: Vec<Vec<f64>> = vec![row(rng.random_range(0..n)).to_vec()];
        let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[0])).collect();
        while centers.len() < k {
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let mut t = rng.random_range(0.0..total);
                let mut chosen = n - 1;
                for (i, &d) in d2.iter().enumerate() {
                    if t < d {
                        chosen = i;
                        break;
                    }
                    t -= d;
                }
                chosen
            } else {
                rng.random_range(0..n)
            };
            let center = row(pick).to_vec();
            for (i, d) in d2.iter_mut().enumerate() {
                *d = d.min(sq_dist(row(i), &center));
            }
            centers.push(center);
        }
        let mut assign = vec![usize::MAX; n];
        for _ in 0..iters {
            let book = Self::from_centers(&centers, c)?;
            let mut changed = false;
            for (i, a) in assign.iter_mut().enumerate() {
                let nk = book.nearest(row(i));
                if *a != nk {
                    *a = nk;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = vec![vec![0.0; c]; k];
            let mut counts = vec![0usize; k];
            for (i, &a) in assign.iter().enumerate() {
                counts[a] += 1;
                for (s, v) in sums[a].iter_mut().zip(row(i)) {
                    *s += v;
                }
            }
            for j in 0..k {
                if counts[j] > 0 {
                    for (cv, s) in centers[j].iter_mut().zip(&sums[j]) {
                        *cv = s / counts[j] as f64;
                    }
                }
            }
        }
        Self::from_centers(&centers, c)
    }

    fn from_centers(centers: &[Vec<f64>], c: usize) -> Result<Self> {
        let data = centers.iter().flat_map(|v| v.iter().copied()).collect();
        Self::new(Tensor::matrix(centers.len(), c, data)?)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Maps an `H×W×c` feature grid to code indices.
pub fn quantize(features: &Tensor, codebook: &Codebook) -> Result<TokenGrid> {
    let s = features.shape();
    if s.len() != 3 || s[2] != codebook.dim() {
        return Err(Error::shape("quantize", s, &[0, 0, codebook.dim()]));
    }
    if features.data().iter().any(|v| v.is_nan()) {
        return Err(Error::input("NaN in feature grid"));
    }
    let c = s[2];
    let ids = features
        .data()
        .chunks(c)
        .map(|cell| codebook.nearest(cell) as u32)
        .collect();
    TokenGrid::new(s[0], s[1], ids)
}

/// Replaces each id by its code vector, giving `H×W×c`.
pub fn dequantize(grid: &TokenGrid, codebook: &Codebook) -> Result<Tensor> {
    let c = codebook.dim();
    let mut data = Vec::with_capacity(grid.len() * c);
    for &id in grid.ids() {
        if id == TokenGrid::MASK {
            return Err(Error::contract("cannot dequantize a MASK cell"));
        }
        if id as usize >= codebook.len() {
            return Err(Error::input(format!("token id {id} outside codebook")));
        }
        data.extend_from_slice(codebook.code(id as usize));
    }
    Tensor::new(&[grid.height(), grid.width(), c], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        let words = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        Vocabulary::new(words, 4).unwrap()
    }

    #[test]
    fn id_ranges_are_contiguous_and_disjoint() {
        let v = vocab();
        assert_eq!(v.len(), 3 + 4 + 6);
        assert_eq!(v.visual_id(0), 3);
        assert_eq!(v.code_of(6), Some(3));
        assert_eq!(v.code_of(7), None);
        let specials: Vec<usize> = Special::ALL.iter().map(|&s| v.special(s)).collect();
        assert_eq!(specials, (7..13).collect::<Vec<_>>());
        assert!(specials.iter().all(|&s| v.is_special(s) && !v.is_word(s)));
    }

    #[test]
    fn reason_and_edit_helpers() {
        let v = vocab();
        assert_eq!(append_reason(&[], &v), vec![v.reason()]);
        assert_eq!(append_reason(&[5, 9], &v), vec![5, 9, v.reason()]);
        let e = v.edit();
        assert_eq!(find_edit_position(&[0, 1, e, 2], &v), Some(2));
        assert_eq!(find_edit_position(&[0, 1, 2], &v), None);
        assert_eq!(find_edit_position(&[e, e], &v), Some(0));
    }

    #[test]
    fn encode_rejects_unknown_words() {
        let v = vocab();
        assert_eq!(v.encode("a c").unwrap(), vec![0, 2]);
        assert!(matches!(v.encode("a z"), Err(Error::Input(_))));
        assert_eq!(v.decode(&[0, 3, v.edit()]), "a v0 <EDIT>");
    }

    #[test]
    fn single_code_takes_everything() {
        let book = Codebook::new(Tensor::row(vec![0.5, -1.0])).unwrap();
        let f = Tensor::new(&[2, 2, 2], vec![9.0, 1.0, -3.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(quantize(&f, &book).unwrap().ids(), &[0, 0, 0, 0]);
    }

    #[test]
    fn exact_code_maps_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = (0..10 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let book = Codebook::new(Tensor::matrix(10, 3, data).unwrap()).unwrap();
        let f = Tensor::new(&[1, 1, 3], book.code(7).to_vec()).unwrap();
        assert_eq!(quantize(&f, &book).unwrap().ids(), &[7]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let book = Codebook::new(Tensor::matrix(3, 1, vec![1.0, -1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(book.nearest(&[0.0]), 0);
        assert_eq!(book.nearest(&[1.0]), 0);
    }

    #[test]
    fn nan_and_mask_are_rejected() {
        let book = Codebook::new(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap()).unwrap();
        let f = Tensor::new(&[1, 1, 1], vec![f64::NAN]).unwrap();
        assert!(matches!(quantize(&f, &book), Err(Error::Input(_))));
        let g = TokenGrid::new(1, 2, vec![0, TokenGrid::MASK]).unwrap();
        assert!(matches!(dequantize(&g, &book), Err(Error::Contract(_))));
    }

    #[test]
    fn kmeans_recovers_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut data = Vec::new();
        for i in 0..60 {
            let base = if i % 2 == 0 { 10.0 } else { -10.0 };
            data.push(base + rng.random_range(-0.1..0.1));
        }
        let s = Tensor::matrix(60, 1, data).unwrap();
        let book = Codebook::fit(&s, 2, 20, &mut rng).unwrap();
        let mut c: Vec<f64> = (0..2).map(|k| book.code(k)[0]).collect();
        c.sort_by(f64::total_cmp);
        assert!((c[0] + 10.0).abs() < 0.1 && (c[1] - 10.0).abs() < 0.1, "{c:?}");
    }

    #[test]
    fn kmeans_with_few_distinct_points_duplicates_codes() {
        let s = Tensor::matrix(4, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let book = Codebook::fit(&s, 5, 10, &mut rng).unwrap();
        assert_eq!(book.len(), 5);
        let used: Vec<usize> = [0.0, 1.0].iter().map(|&x| book.nearest(&[x])).collect();
        assert_eq!(book.code(used[0]), &[0.0]);
        assert_eq!(book.code(used[1]), &[1.0]);
    }
}
