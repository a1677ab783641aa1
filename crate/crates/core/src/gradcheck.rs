//! Central-difference verification of reverse-mode gradients.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Probe at most this many elements per leaf (chosen with `seed`);
    /// `None` probes every element.
    pub max_elements_per_leaf: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            max_elements_per_leaf: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(leaf, element)` where the worst error occurred.
    pub worst: Option<(usize, usize)>,
    pub probed: usize,
}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the backward pass of `f` against central differences.
///
/// `f` builds a scalar-valued graph from the given leaves. It is called
/// once with trainable leaves for the analytic gradient and then twice
/// per probed element with perturbed constant leaves.
pub fn grad_check<F>(leaves: &[Tensor], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::contract("grad_check requires a scalar-valued function"));
    }
    let grads = g.backward(out)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        probed: 0,
    };
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let zeros = Tensor::zeros(leaf.shape());
        let analytic = grads.get(vars[li]).unwrap_or(&zeros);
        let elems: Vec<usize> = match opts.max_elements_per_leaf {
            Some(k) if k < leaf.len() => {
                let mut v = sample(&mut rng, leaf.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..leaf.len()).collect(),
        };
        for e in elems {
            let orig = leaf.data()[e];
            work[li].data_mut()[e] = orig + opts.eps;
            let plus = eval(&work)?;
            work[li].data_mut()[e] = orig - opts.eps;
            let minus = eval(&work)?;
            work[li].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic.data()[e], numeric);
            report.probed += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((li, e));
            }
        }
    }
    Ok(report)
}

/// [`grad_check`] over every trainable parameter of `store` followed by
/// the extra `inputs`. Frozen parameters enter as constants.
pub fn grad_check_store<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store
        .iter()
        .filter(|(k, _)| !store.is_frozen(k))
        .map(|(k, _)| k.clone())
        .collect();
    let mut leaves: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    leaves.extend_from_slice(inputs);
    grad_check(&leaves, opts, |g, vars| {
        let mut map = BTreeMap::new();
        for (n, v) in names.iter().zip(vars) {
            map.insert(n.clone(), *v);
        }
        for (k, t) in store.iter().filter(|(k, _)| store.is_frozen(k)) {
            map.insert(k.clone(), g.constant(t.clone()));
        }
        f(g, &Bound::from_map(map), &vars[names.len()..])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::row(vec![0.5, -2.0, 3.0]);
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, -1.0]).unwrap();
        let r = grad_check(&[w, x], GradCheckOptions::default(), |g, v| {
            let y = g.matmul(v[0], v[1])?;
            g.sum(y)
        })
        .unwrap();
        // bilinear in the leaves, linear in each element
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.probed, 6);
    }

    #[test]
    fn non_scalar_output_is_a_contract_error() {
        let x = Tensor::row(vec![1.0, 2.0]);
        let err = grad_check(&[x], GradCheckOptions::default(), |g, v| g.scale(v[0], 2.0));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn smooth_nonlinearity_passes() {
        let x = Tensor::row(vec![0.3, -0.7]);
        let r = grad_check(&[x], GradCheckOptions::default(), |g, v| {
            let y = g.sigmoid(v[0])?;
            g.sum(y)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8);
        assert!(relative_error(1.0, -1.0) > 1.0);
    }

    #[test]
    fn sampling_limits_probes() {
        let x = Tensor::zeros(&[10, 10]);
        let opts = GradCheckOptions {
            max_elements_per_leaf: Some(7),
            ..Default::default()
        };
        let r = grad_check(&[x], opts, |g, v| {
            let y = g.gelu(v[0])?;
            g.sum(y)
        })
        .unwrap();
        assert_eq!(r.probed, 7);
    }
}
