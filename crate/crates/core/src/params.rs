//! Named parameter storage, graph binding, content hashing and AdamW.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by a stable dotted name (`module.layer.tensor`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Marks every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<String> = self
            .params
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        self.frozen.extend(names);
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &String> {
        self.frozen.iter()
    }

    /// Xavier-uniform matrix `fan_in × fan_out`.
    pub fn init_xavier<R: Rng>(&mut self, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) {
        let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        self.init_uniform(rng, name, &[fan_in, fan_out], bound);
    }

    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R, name: &str, shape: &[usize], bound: f64) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape, data).expect("shape matches data"));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }

    /// Leaves for every parameter: trainable ones as graph params, frozen
    /// ones as constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if self.frozen.contains(k) {
                    g.constant(t.clone())
                } else {
                    g.param(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and little-endian values of every
    /// parameter whose name starts with `prefix` (all of them for `""`).
    pub fn content_hash(&self, prefix: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.ndim() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Graph leaves for a [`ParamStore`], looked up by name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_map(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not registered"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collects gradients by parameter name.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip applied before the update.
    pub clip_norm: Option<f64>,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: None,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Frozen parameters and parameters without a
    /// gradient are left untouched. Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        let norm = libm::sqrt(
            grads
                .iter()
                .filter(|(k, _)| !store.is_frozen(k))
                .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>(),
        );
        if !norm.is_finite() {
            return Err(Error::input("non-finite gradient norm"));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (name, g) in grads {
            if store.is_frozen(name) {
                continue;
            }
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i] * scale;
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * (mhat / (libm::sqrt(vhat) + self.eps) + self.weight_decay * pd[i]);
            }
        }
        Ok(norm)
    }
}

/// Lowercase hex of a digest.
pub fn hex_digest(bytes: &[u8]) -> String {
    const HEX: &[u8; 16] = b"0123456789abcdef";
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push(HEX[(b >> 4) as usize] as char);
        s.push(HEX[(b & 0xf) as usize] as char);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hash_is_stable_and_prefix_scoped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.init_xavier(&mut rng, "a.w", 3, 4);
        s.init_xavier(&mut rng, "b.w", 3, 4);
        let full = s.content_hash("");
        let a = s.content_hash("a.");
        s.get_mut("b.w").unwrap().data_mut()[0] += 1.0;
        assert_ne!(s.content_hash(""), full);
        assert_eq!(s.content_hash("a."), a);
    }

    #[test]
    fn adamw_skips_frozen_and_moves_trainable() {
        let mut s = ParamStore::new();
        s.insert("enc.w", Tensor::row(vec![1.0, 2.0]));
        s.insert("txt.w", Tensor::row(vec![1.0, 2.0]));
        s.freeze_prefix("txt.");
        let before = s.content_hash("txt.");
        let mut opt = AdamW::new(0.1, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("enc.w".to_string(), Tensor::row(vec![1.0, -1.0]));
        grads.insert("txt.w".to_string(), Tensor::row(vec![1.0, -1.0]));
        opt.step(&mut s, &grads).unwrap();
        assert_eq!(s.content_hash("txt."), before);
        let w = s.get("enc.w").unwrap().data();
        // first Adam step moves each coordinate by lr against the gradient sign
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 2.1).abs() < 1e-6);
    }

    #[test]
    fn bind_marks_frozen_as_constant() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0));
        s.insert("b", Tensor::scalar(1.0));
        s.freeze_prefix("b");
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        assert!(g.requires_grad(p.var("a")));
        assert!(!g.requires_grad(p.var("b")));
    }

    #[test]
    fn hex_digest_formats() {
        assert_eq!(hex_digest(&[0x00, 0xab, 0x10]), "00ab10");
    }
}
