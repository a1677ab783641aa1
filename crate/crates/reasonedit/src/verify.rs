//! Self-checks: gradient checks, brute-force oracles, statistical tests
//! and invariant suites. Each check returns a one-line detail.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reasonedit_core::alignment::{hybrid_loss, info_nce, LossWeights, VisionEncoder};
use reasonedit_core::autodiff::Fault;
use reasonedit_core::diffusion::{
    forward_mask, reconstruct_loss, sample_edit, Denoiser, DenoiserConfig, DenoiserWiring, DiffusionState,
    EditCondition, NoiseSchedule, SamplerConfig, ScheduleFamily,
};
use reasonedit_core::eval::l2_background_loss;
use reasonedit_core::gradcheck::{grad_check, grad_check_store, GradCheckOptions, GradCheckReport};
use reasonedit_core::microworld::{World, WorldConfig};
use reasonedit_core::model::{Corruption, Model, ModelConfig, Prepared};
use reasonedit_core::reasoning::{Hrm, Rab};
use reasonedit_core::tokenization::{quantize, Codebook, TokenGrid};
use reasonedit_core::{Graph, ParamStore, Result as CoreResult, Tensor, Var};

/// Gradient-check tolerance.
pub const GRAD_TOL: f64 = 1e-4;

pub type CheckResult = std::result::Result<String, String>;

#[derive(Debug, Clone, Copy)]
pub struct Check {
    pub name: &'static str,
    pub run: fn() -> CheckResult,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub fn all_checks() -> Vec<Check> {
    vec![
        Check { name: "grad.ops", run: grad_ops },
        Check { name: "grad.rab", run: grad_rab },
        Check { name: "grad.hrm", run: grad_hrm },
        Check { name: "grad.denoiser_recon", run: grad_denoiser },
        Check { name: "grad.infonce_hybrid", run: grad_infonce_hybrid },
        Check { name: "grad.vision", run: grad_vision },
        Check { name: "grad.training_step", run: grad_training_step },
        Check { name: "mutation.softmax_sign", run: mutation_softmax_sign },
        Check { name: "invariant.softmax_sum", run: softmax_sums },
        Check { name: "oracle.rab_loop", run: oracle_rab },
        Check { name: "oracle.quantizer", run: oracle_quantizer },
        Check { name: "oracle.infonce_loop", run: oracle_infonce },
        Check { name: "oracle.recon_2x2", run: oracle_recon_2x2 },
        Check { name: "stats.forward_mask", run: stats_forward_mask },
        Check { name: "stats.sampler", run: stats_sampler },
        Check { name: "invariant.preservation", run: preservation },
        Check { name: "contract.loss_weights", run: loss_weights },
        Check { name: "invariant.denoiser_permutation", run: denoiser_permutation },
    ]
}

/// Runs checks in order, reporting each as it finishes.
pub fn run(checks: &[Check], mut on_each: impl FnMut(&Outcome)) -> Vec<Outcome> {
    checks
        .iter()
        .map(|c| {
            let t = Instant::now();
            let r = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
            let o = Outcome {
                name: c.name,
                passed: r.is_ok(),
                detail: r.unwrap_or_else(|e| e),
                seconds: t.elapsed().as_secs_f64(),
            };
            on_each(&o);
            o
        })
        .collect()
}

fn err(e: reasonedit_core::Error) -> String {
    e.to_string()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ x ⊙ r` for a fixed random `r`, turning any output into a scalar.
fn project(g: &mut Graph, x: Var, rng: &mut ChaCha8Rng) -> CoreResult<Var> {
    let r = g.constant(random(rng, g.shape(x)));
    let y = g.mul(x, r)?;
    g.sum(y)
}

fn judge(what: &str, r: &GradCheckReport) -> CheckResult {
    let line = format!("{what}: max rel err {:.2e} over {} probes", r.max_rel_error, r.probed);
    if r.max_rel_error < GRAD_TOL {
        Ok(line)
    } else {
        Err(line)
    }
}

type OpFn = fn(&mut Graph, &[Var], &mut ChaCha8Rng, &[usize]) -> CoreResult<Var>;

/// Every differentiable op over 100 random shapes and seeds.
pub fn grad_ops() -> CheckResult {
    // (name, leaf shapes from (m, n, k), op)
    let ops: Vec<(&str, fn(usize, usize, usize) -> Vec<Vec<usize>>, OpFn)> = vec![
        ("matmul", |m, n, k| vec![vec![m, k], vec![k, n]], |g, v, _, _| g.matmul(v[0], v[1])),
        ("matmul_nt", |m, n, k| vec![vec![m, k], vec![n, k]], |g, v, _, _| g.matmul_nt(v[0], v[1])),
        ("add", |m, n, _| vec![vec![m, n], vec![m, n]], |g, v, _, _| g.add(v[0], v[1])),
        ("sub", |m, n, _| vec![vec![m, n], vec![m, n]], |g, v, _, _| g.sub(v[0], v[1])),
        ("mul", |m, n, _| vec![vec![m, n], vec![m, n]], |g, v, _, _| g.mul(v[0], v[1])),
        ("add_row", |m, n, _| vec![vec![m, n], vec![1, n]], |g, v, _, _| g.add_row(v[0], v[1])),
        ("mul_col", |m, n, _| vec![vec![m, n], vec![m, 1]], |g, v, _, _| g.mul_col(v[0], v[1])),
        ("scale", |m, n, _| vec![vec![m, n]], |g, v, _, _| g.scale(v[0], -1.7)),
        ("gelu", |m, n, _| vec![vec![m, n]], |g, v, _, _| g.gelu(v[0])),
        ("sigmoid", |m, n, _| vec![vec![m, n]], |g, v, _, _| g.sigmoid(v[0])),
        ("softmax0", |m, n, _| vec![vec![m, n]], |g, v, _, _| g.softmax(v[0], 0)),
        ("softmax1", |m, n, _| vec![vec![m, n]], |g, v, _, _| g.softmax(v[0], 1)),
        ("layer_norm", |m, n, _| vec![vec![m, n], vec![1, n], vec![1, n]], |g, v, _, _| {
            g.layer_norm(v[0], v[1], v[2])
        }),
        ("embedding", |_, n, k| vec![vec![k, n]], |g, v, rng, s| {
            let ids: Vec<usize> = (0..s[2] + 1).map(|_| rng.random_range(0..s[0])).collect();
            g.embedding(v[0], &ids)
        }),
        ("cross_entropy", |m, n, _| vec![vec![m, n]], |g, v, rng, s| {
            let t: Vec<usize> = (0..s[0]).map(|_| rng.random_range(0..s[1])).collect();
            let mut mask: Vec<bool> = (0..s[0]).map(|_| rng.random_bool(0.6)).collect();
            mask[0] = true;
            g.cross_entropy(v[0], &t, &mask)
        }),
        ("slice_cols", |m, n, _| vec![vec![m, n + 1]], |g, v, _, s| g.slice_cols(v[0], 1, s[1] - 1)),
        ("concat_cols", |m, n, k| vec![vec![m, n], vec![m, k]], |g, v, _, _| g.concat_cols(&[v[0], v[1]])),
        ("concat_rows", |m, n, k| vec![vec![m, n], vec![k, n]], |g, v, _, _| g.concat_rows(&[v[0], v[1]])),
        ("gather_rows", |m, n, _| vec![vec![m, n]], |g, v, rng, s| {
            let idx: Vec<usize> = (0..3).map(|_| rng.random_range(0..s[0])).collect();
            g.gather_rows(v[0], &idx)
        }),
        ("mean_rows", |m, n, _| vec![vec![m, n]], |g, v, _, _| g.mean_rows(v[0])),
        ("sum", |m, n, _| vec![vec![m, n]], |g, v, _, _| g.sum(v[0])),
        ("mean", |m, n, _| vec![vec![m, n]], |g, v, _, _| g.mean(v[0])),
        ("l2_normalize_rows", |m, n, _| vec![vec![m, n]], |g, v, _, _| g.l2_normalize_rows(v[0])),
        ("transpose", |m, n, _| vec![vec![m, n]], |g, v, _, _| g.transpose(v[0])),
        ("reshape", |m, n, _| vec![vec![m, n]], |g, v, _, s| g.reshape(v[0], &[s[1], s[0]])),
        ("affine", |m, n, k| vec![vec![m, k], vec![k, n], vec![1, n]], |g, v, _, _| g.affine(v[0], v[1], v[2])),
    ];
    let mut worst = (0.0f64, "");
    let mut probes = 0;
    for (name, shapes, op) in &ops {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
            let (m, n, k) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            let leaves: Vec<Tensor> = shapes(m, n, k).iter().map(|s| random(&mut rng, s)).collect();
            let dims = [leaves[0].shape()[0], leaves[0].shape()[1], k];
            let op_seed = rng.random::<u64>();
            let r = grad_check(&leaves, GradCheckOptions::default(), |g, v| {
                let mut r2 = ChaCha8Rng::seed_from_u64(op_seed);
                let y = op(g, v, &mut r2, &dims)?;
                project(g, y, &mut r2)
            })
            .map_err(|e| format!("{name}: {e}"))?;
            probes += r.probed;
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, name);
            }
        }
    }
    let line = format!(
        "{} ops x 100 shapes, {probes} probes, worst {:.2e} ({})",
        ops.len(),
        worst.0,
        worst.1
    );
    if worst.0 < GRAD_TOL {
        Ok(line)
    } else {
        Err(line)
    }
}

pub fn grad_rab() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (dm, d, cells) = (6, 4, 9);
    let rab = Rab::new(dm, d);
    let mut store = ParamStore::new();
    rab.init(&mut store, &mut rng);
    let inputs = [random(&mut rng, &[1, d]), random(&mut rng, &[cells, dm])];
    let r = grad_check_store(&store, &inputs, GradCheckOptions::default(), |g, p, x| {
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let (a, z) = rab.attend(g, p, x[0], x[1])?;
        let la = project(g, a, &mut r2)?;
        let lz = project(g, z, &mut r2)?;
        g.add(la, lz)
    })
    .map_err(err)?;
    judge("reasoning-attention bridge", &r)
}

pub fn grad_hrm() -> CheckResult {
    let mut lines = Vec::new();
    for per_step in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dm = 4;
        let hrm = Hrm::new(dm, 2, per_step, 2);
        let mut store = ParamStore::new();
        hrm.init(&mut store, &mut rng);
        let inputs = [random(&mut rng, &[1, dm]), random(&mut rng, &[5, dm])];
        let r = grad_check_store(&store, &inputs, GradCheckOptions::default(), |g, p, x| {
            let mut r2 = ChaCha8Rng::seed_from_u64(4);
            let h = hrm.reason(g, p, x[0], x[1], 2)?;
            project(g, h, &mut r2)
        })
        .map_err(err)?;
        lines.push(judge(if per_step { "refinement (per-step)" } else { "refinement (shared)" }, &r)?);
    }
    Ok(lines.join("; "))
}

pub fn grad_denoiser() -> CheckResult {
    let mut lines = Vec::new();
    for gates in [true, false] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (k, d, dm, dim) = (5, 4, 4, 4);
        let wiring = DenoiserWiring {
            bridge: true,
            hrm: true,
            gates,
        };
        let den = Denoiser::new(DenoiserConfig { dim, heads: 2, layers: 2 }, wiring, k, 4, 4, d, dm);
        let mut store = ParamStore::new();
        den.init(&mut store, &mut rng);
        let target = TokenGrid::new(2, 2, vec![0, 3, 1, 4]).unwrap();
        let state = DiffusionState::new(TokenGrid::new(2, 2, vec![TokenGrid::MASK, 3, TokenGrid::MASK, TokenGrid::MASK]).unwrap(), 2);
        let mut prior = random(&mut rng, &[1, 4]).map(f64::exp);
        let s = prior.sum();
        prior = prior.scale(1.0 / s);
        let inputs = [
            random(&mut rng, &[1, d]),
            random(&mut rng, &[1, d]),
            random(&mut rng, &[1, dm]),
            prior,
            random(&mut rng, &[4, dim]),
        ];
        let r = grad_check_store(&store, &inputs, GradCheckOptions::default(), |g, p, x| {
            let cond = EditCondition {
                h_edit: x[0],
                z: Some(x[1]),
                h_reason: Some(x[2]),
                prior: Some(x[3]),
                visual: Some(x[4]),
            };
            let logits = den.logits(g, p, &state, &cond)?;
            reconstruct_loss(g, logits, &target, state.mask())
        })
        .map_err(err)?;
        lines.push(judge(if gates { "denoiser+recon (gated)" } else { "denoiser+recon (ungated)" }, &r)?);
    }
    Ok(lines.join("; "))
}

pub fn grad_infonce_hybrid() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let leaves = [random(&mut rng, &[4, 5]), random(&mut rng, &[4, 5]), random(&mut rng, &[3, 6])];
    let mut lines = Vec::new();
    for alpha in [0.0, 0.3, 0.5, 1.0] {
        let r = grad_check(&leaves, GradCheckOptions::default(), |g, v| {
            let con = info_nce(g, v[0], v[1], 0.5)?;
            let recon = g.cross_entropy(v[2], &[1, 0, 5], &[true, false, true])?;
            hybrid_loss(g, con, recon, alpha)
        })
        .map_err(err)?;
        lines.push(judge(&format!("contrastive+hybrid a={alpha}"), &r)?);
    }
    Ok(lines.join("; "))
}

pub fn grad_vision() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v = VisionEncoder::new(4, 3, 4, 2, 3, 5);
    let mut store = ParamStore::new();
    v.init(&mut store, &mut rng);
    let inputs = [random(&mut rng, &[4, 3])];
    let r = grad_check_store(&store, &inputs, GradCheckOptions::default(), |g, p, x| {
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        let o = v.encode(g, p, x[0])?;
        let a = project(g, o.sem, &mut r2)?;
        let b = project(g, o.pix, &mut r2)?;
        g.add(a, b)
    })
    .map_err(err)?;
    judge("vision encoder", &r)
}

/// Full objective of a two-sample batch at desk widths, sampling three
/// elements of every parameter tensor.
pub fn grad_training_step() -> CheckResult {
    let wc = WorldConfig::desk();
    let world = World::new(wc.clone(), 0).map_err(err)?;
    let data = world.build_dataset(1, 2, 1).map_err(err)?;
    let model = Model::new(ModelConfig::desk(&wc), world, 2).map_err(err)?;
    let items: Vec<Prepared> = data.train.iter().map(|s| model.prepare(s)).collect::<CoreResult<_>>().map_err(err)?;
    let refs: Vec<&Prepared> = items.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let states = model.corrupt(&refs, 8, Corruption::Region, &mut rng).map_err(err)?;
    let opts = GradCheckOptions {
        max_elements_per_leaf: Some(3),
        ..GradCheckOptions::default()
    };
    let r = grad_check_store(&model.store, &[], opts, |g, p, _| model.joint_loss(g, p, &refs, &states, 0.5)).map_err(err)?;
    judge("desk training objective", &r)
}

/// A sign error in the softmax backward pass must be caught.
pub fn mutation_softmax_sign() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&mut rng, &[3, 4]);
    let r = grad_check(&[x], GradCheckOptions::default(), |g, v| {
        g.inject_fault(Fault::SoftmaxBackwardSign);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let y = g.softmax(v[0], 1)?;
        project(g, y, &mut r2)
    })
    .map_err(err)?;
    let line = format!("faulty softmax backward: max rel err {:.2e}", r.max_rel_error);
    if r.max_rel_error > GRAD_TOL {
        Ok(line + " (caught)")
    } else {
        Err(line + " (missed)")
    }
}

pub fn softmax_sums() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..20);
        let scale = 10f64.powi(rng.random_range(-3..4));
        let mut g = Graph::new();
        let x = g.constant(random(&mut rng, &[1, n]).scale(scale));
        let y = g.softmax(x, 1).map_err(err)?;
        let v = g.value(y);
        if v.data().iter().any(|&p| p < 0.0) {
            return Err("negative probability".into());
        }
        worst = worst.max((v.sum() - 1.0).abs());
    }
    let line = format!("1000 rows, worst |sum - 1| = {worst:.2e}");
    if worst <= 1e-9 {
        Ok(line)
    } else {
        Err(line)
    }
}

/// Bridge output against explicit loops on random 3×3 grids.
pub fn oracle_rab() -> CheckResult {
    let (dm, d, cells) = (5, 4, 9);
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rab = Rab::new(dm, d);
        let mut store = ParamStore::new();
        rab.init(&mut store, &mut rng);
        let h = random(&mut rng, &[1, d]);
        let v = random(&mut rng, &[cells, dm]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let hv = g.constant(h.clone());
        let vv = g.constant(v.clone());
        let (a, z) = rab.attend(&mut g, &p, hv, vv).map_err(err)?;
        let (wq, wk, wv) = (
            store.get(&rab.wq.w).unwrap(),
            store.get(&rab.wk.w).unwrap(),
            store.get(&rab.wv.w).unwrap(),
        );
        let mut q = vec![0.0; d];
        for o in 0..d {
            for i in 0..d {
                q[o] += h.data()[i] * wq.data()[i * d + o];
            }
        }
        let mut scores = vec![0.0; cells];
        let mut vals = vec![vec![0.0; d]; cells];
        for c in 0..cells {
            for o in 0..d {
                let mut kc = 0.0;
                for i in 0..dm {
                    kc += v.data()[c * dm + i] * wk.data()[i * d + o];
                    vals[c][o] += v.data()[c * dm + i] * wv.data()[i * d + o];
                }
                scores[c] += q[o] * kc;
            }
            scores[c] /= (d as f64).sqrt();
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let tot: f64 = e.iter().sum();
        for c in 0..cells {
            worst = worst.max((g.value(a).data()[c] - e[c] / tot).abs());
        }
        for o in 0..d {
            let zo: f64 = (0..cells).map(|c| e[c] / tot * vals[c][o]).sum();
            worst = worst.max((g.value(z).data()[o] - zo).abs());
        }
    }
    let line = format!("100 seeds, max abs diff {worst:.2e}");
    if worst <= 1e-12 {
        Ok(line)
    } else {
        Err(line)
    }
}

/// Quantizer against brute-force nearest neighbour on 1000 grids.
pub fn oracle_quantizer() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (h, w, c, k) = (
            rng.random_range(1..6),
            rng.random_range(1..6),
            rng.random_range(1..5),
            rng.random_range(1..9),
        );
        // a coarse lattice makes exact ties common
        let codes = Tensor::new(&[k, c], (0..k * c).map(|_| rng.random_range(-2..3) as f64).collect()).unwrap();
        let feats = Tensor::new(&[h, w, c], (0..h * w * c).map(|_| rng.random_range(-4..5) as f64 * 0.5).collect()).unwrap();
        let cb = Codebook::new(codes.clone()).map_err(err)?;
        let grid = quantize(&feats, &cb).map_err(err)?;
        for cell in 0..h * w {
            let x = &feats.data()[cell * c..(cell + 1) * c];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..k {
                let dist: f64 = (0..c).map(|i| (x[i] - codes.data()[j * c + i]).powi(2)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = j;
                }
            }
            if grid.ids()[cell] as usize != best {
                mismatches += 1;
            }
        }
    }
    if mismatches == 0 {
        Ok("1000 grids, all cells agree (ties to lowest index)".into())
    } else {
        Err(format!("{mismatches} cells disagree"))
    }
}

/// Symmetric InfoNCE against a double loop, B = 8.
pub fn oracle_infonce() -> CheckResult {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (b, d, t) = (8, 6, 0.07 + seed as f64 * 0.05);
        let vis = random(&mut rng, &[b, d]);
        let txt = random(&mut rng, &[b, d]);
        let mut g = Graph::new();
        let vv = g.constant(vis.clone());
        let tv = g.constant(txt.clone());
        let l = info_nce(&mut g, vv, tv, t).map_err(err)?;
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut s = vec![vec![0.0; b]; b];
        for i in 0..b {
            for j in 0..b {
                let a = vis.row_slice(i);
                let c = txt.row_slice(j);
                let dot: f64 = a.iter().zip(c).map(|(x, y)| x * y).sum();
                s[i][j] = dot / (norm(a) * norm(c)) / t;
            }
        }
        let mut v2t = 0.0;
        let mut t2v = 0.0;
        for i in 0..b {
            let row: f64 = (0..b).map(|j| s[i][j].exp()).sum();
            let col: f64 = (0..b).map(|j| s[j][i].exp()).sum();
            v2t += -(s[i][i].exp() / row).ln();
            t2v += -(s[i][i].exp() / col).ln();
        }
        let want = 0.5 * (v2t / b as f64 + t2v / b as f64);
        worst = worst.max((g.value(l).item() - want).abs());
    }
    let line = format!("20 batches of 8, max abs diff {worst:.2e}");
    if worst <= 1e-10 {
        Ok(line)
    } else {
        Err(line)
    }
}

/// Masked reconstruction loss on a 2×2 grid against closed forms.
pub fn oracle_recon_2x2() -> CheckResult {
    let ln2 = std::f64::consts::LN_2;
    // cell 0: logits (0, ln 2, 0), target 1 → −ln(2/4) = ln 2
    // cell 3: logits (0, 0, 0), target 2 → ln 3
    // cells 1, 2 are unmasked and must not count
    let logits = Tensor::matrix(4, 3, vec![0.0, ln2, 0.0, 5.0, -1.0, 2.0, 0.3, 0.3, 9.0, 0.0, 0.0, 0.0]).unwrap();
    let target = TokenGrid::new(2, 2, vec![1, 0, 2, 2]).unwrap();
    let mask = [true, false, false, true];
    let mut g = Graph::new();
    let l = g.constant(logits);
    let loss = reconstruct_loss(&mut g, l, &target, &mask).map_err(err)?;
    let want = (2f64.ln() + 3f64.ln()) / 2.0;
    let mut worst = (g.value(loss).item() - want).abs();
    // uniform logits over K = 64 give ln 64 on any mask
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[4, 64]));
    let u = reconstruct_loss(&mut g, l, &TokenGrid::new(2, 2, vec![5, 9, 63, 0]).unwrap(), &[true, true, false, true])
        .map_err(err)?;
    worst = worst.max((g.value(u).item() - 64f64.ln()).abs());
    let line = format!("max abs diff {worst:.2e}");
    if worst <= 1e-12 {
        Ok(line)
    } else {
        Err(line)
    }
}

/// Empirical mask fraction within 3 binomial σ for r ∈ {0.1, 0.3, 0.7}.
pub fn stats_forward_mask() -> CheckResult {
    let schedule = NoiseSchedule {
        steps: 10,
        family: ScheduleFamily::Linear,
    };
    let grid = TokenGrid::filled(16, 16, 0);
    let mut lines = Vec::new();
    let mut ok = true;
    for tau in [1usize, 3, 7] {
        let r = schedule.rate(tau).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(tau as u64);
        let trials = 1000;
        let mut masked = 0usize;
        for _ in 0..trials {
            masked += forward_mask(&grid, tau, &schedule, &mut rng).map_err(err)?.masked_count();
        }
        let n = (trials * grid.len()) as f64;
        let frac = masked as f64 / n;
        let sigma = (r * (1.0 - r) / n).sqrt();
        let z = (frac - r) / sigma;
        ok &= z.abs() <= 3.0;
        lines.push(format!("r={r:.1}: {frac:.5} (z={z:+.2})"));
    }
    let line = lines.join(", ");
    if ok {
        Ok(line)
    } else {
        Err(line)
    }
}

/// One masked cell, K = 2, one round: sampled frequencies against softmax.
pub fn stats_sampler() -> CheckResult {
    let logits = Tensor::matrix(1, 2, vec![0.4, -0.3]).unwrap();
    let p0 = 1.0 / (1.0 + (-0.7f64).exp());
    let source = TokenGrid::new(1, 1, vec![1]).unwrap();
    let den = |_: &DiffusionState| -> CoreResult<Tensor> { Ok(logits.clone()) };
    let cfg = SamplerConfig {
        steps: 1,
        temperature: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let draws = 10_000;
    let mut zeros = 0;
    for _ in 0..draws {
        let (out, _) = sample_edit(&den, &source, &[true], &NoiseSchedule::cosine(4), &cfg, &mut rng).map_err(err)?;
        zeros += (out.ids()[0] == 0) as usize;
    }
    let frac = zeros as f64 / draws as f64;
    let sigma = (p0 * (1.0 - p0) / draws as f64).sqrt();
    let z = (frac - p0) / sigma;
    let line = format!("P(0) = {p0:.4}, observed {frac:.4} (z={z:+.2})");
    if z.abs() <= 3.0 {
        Ok(line)
    } else {
        Err(line)
    }
}

/// 1000 sampled edits: random grids, masks, schedules, temperatures and
/// denoisers, plus a real model. No background cell may change.
pub fn preservation() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut changed = 0usize;
    let mut worst_l2 = 0.0f64;
    let k = 6;
    let cb = Codebook::new(random(&mut rng, &[k, 3])).map_err(err)?;
    for i in 0..1000 {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let source = TokenGrid::new(h, w, (0..h * w).map(|_| rng.random_range(0..k as u32)).collect()).unwrap();
        let p = rng.random_range(0.0..1.0);
        let mask: Vec<bool> = (0..h * w).map(|_| rng.random_bool(p)).collect();
        let cfg = SamplerConfig {
            steps: rng.random_range(1..10),
            temperature: if i % 3 == 0 { 0.0 } else { rng.random_range(0.1..3.0) },
        };
        let schedule = NoiseSchedule::cosine(rng.random_range(1..20));
        let seed = rng.random::<u64>();
        let den = move |s: &DiffusionState| -> CoreResult<Tensor> {
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ s.masked_count() as u64);
            Ok(random(&mut r, &[s.grid().len(), k]).scale(4.0))
        };
        let (out, _) = sample_edit(&den, &source, &mask, &schedule, &cfg, &mut rng).map_err(err)?;
        changed += (0..h * w).filter(|&c| !mask[c] && out.ids()[c] != source.ids()[c]).count();
        if let Some(l2) = l2_background_loss(&out, &source, &mask, &cb).map_err(err)? {
            worst_l2 = worst_l2.max(l2);
        }
    }
    // the trained-model path goes through the same sampler
    let wc = WorldConfig {
        height: 6,
        width: 6,
        min_objects: 1,
        max_objects: 3,
        codebook_size: 16,
    };
    let world = World::new(wc.clone(), 1).map_err(err)?;
    let data = world.build_dataset(2, 10, 1).map_err(err)?;
    let mut cfg = ModelConfig::desk(&wc);
    cfg.mllm.t_max = 3;
    let model = Model::new(cfg, world, 3).map_err(err)?;
    for s in &data.train {
        let out = model
            .edit(&s.source, &s.instruction, Some(&s.mask), &SamplerConfig::default(), &mut rng)
            .map_err(err)?;
        changed += (0..s.mask.len())
            .filter(|&c| !out.region[c] && out.output.ids()[c] != s.source.ids()[c])
            .count();
        if let Some(l2) = l2_background_loss(&out.output, &s.source, &s.mask, &model.world.codebook).map_err(err)? {
            if !out.passthrough {
                worst_l2 = worst_l2.max(l2);
            }
        }
    }
    let line = format!("1010 edits, {changed} background changes, max l2_bg {worst_l2}");
    if changed == 0 && worst_l2 == 0.0 {
        Ok(line)
    } else {
        Err(line)
    }
}

pub fn loss_weights() -> CheckResult {
    let check = |a: f64, con: f64, rec: f64| -> std::result::Result<(), String> {
        let w = LossWeights::new(a).map_err(err)?;
        if w.lambda_con != con || w.lambda_recon != rec {
            return Err(format!("alpha {a}: got ({}, {})", w.lambda_con, w.lambda_recon));
        }
        Ok(())
    };
    check(0.0, 1.0, 0.0)?;
    check(1.0, 0.0, 1.0)?;
    check(0.5, 0.5, 0.5)?;
    let mut g = Graph::new();
    let con = g.constant(Tensor::scalar(2.75));
    let rec = g.constant(Tensor::scalar(-1.5));
    for (a, want) in [(0.0, 2.75), (1.0, -1.5), (0.5, 0.625)] {
        let l = hybrid_loss(&mut g, con, rec, a).map_err(err)?;
        if g.value(l).item() != want {
            return Err(format!("hybrid at {a} = {}", g.value(l).item()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let a: f64 = rng.random();
        let w = LossWeights::new(a).map_err(err)?;
        worst = worst.max((w.lambda_con + w.lambda_recon - 1.0).abs());
        if w.lambda_con < 0.0 || w.lambda_recon < 0.0 {
            return Err(format!("negative weight at {a}"));
        }
    }
    for bad in [-0.1, 1.1, f64::NAN] {
        if LossWeights::new(bad).is_ok() {
            return Err(format!("alpha {bad} accepted"));
        }
    }
    let line = format!("endpoints exact, 0.5 -> 0.5/0.5, 100 random: max |l1+l2-1| = {worst:.1e}");
    if worst <= f64::EPSILON {
        Ok(line)
    } else {
        Err(line)
    }
}

/// Relabelling codes (permuting embedding rows and output units) permutes
/// the logits.
pub fn denoiser_permutation() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (k, d, dm, dim, cells) = (5, 4, 4, 8, 6);
    let wiring = DenoiserWiring {
        bridge: true,
        hrm: true,
        gates: true,
    };
    let den = Denoiser::new(DenoiserConfig { dim, heads: 2, layers: 2 }, wiring, k, cells, 4, d, dm);
    let mut store = ParamStore::new();
    den.init(&mut store, &mut rng);
    let perm = [3usize, 0, 4, 1, 2];
    let mut permuted = store.clone();
    {
        let tok = store.get("den.tok").unwrap();
        let mut t = tok.clone();
        for (a, &b) in perm.iter().enumerate() {
            t.data_mut()[b * dim..(b + 1) * dim].copy_from_slice(&tok.data()[a * dim..(a + 1) * dim]);
        }
        permuted.insert("den.tok", t);
        let w = store.get("den.head.weight").unwrap();
        let mut pw = w.clone();
        for r in 0..dim {
            for (a, &b) in perm.iter().enumerate() {
                pw.data_mut()[r * k + b] = w.data()[r * k + a];
            }
        }
        permuted.insert("den.head.weight", pw);
        let bias = store.get("den.head.bias").unwrap();
        let mut pb = bias.clone();
        for (a, &b) in perm.iter().enumerate() {
            pb.data_mut()[b] = bias.data()[a];
        }
        permuted.insert("den.head.bias", pb);
    }
    let ids = vec![0, TokenGrid::MASK, 2, 4, TokenGrid::MASK, 1];
    let pids: Vec<u32> = ids.iter().map(|&i| if i == TokenGrid::MASK { i } else { perm[i as usize] as u32 }).collect();
    let conds = [
        random(&mut rng, &[1, d]),
        random(&mut rng, &[1, d]),
        random(&mut rng, &[1, dm]),
        Tensor::full(&[1, cells], 1.0 / cells as f64),
        random(&mut rng, &[cells, dim]),
    ];
    let run = |st: &ParamStore, ids: Vec<u32>| -> CoreResult<Tensor> {
        let mut g = Graph::new();
        let p = st.bind(&mut g);
        let c: Vec<Var> = conds.iter().map(|t| g.constant(t.clone())).collect();
        let cond = EditCondition {
            h_edit: c[0],
            z: Some(c[1]),
            h_reason: Some(c[2]),
            prior: Some(c[3]),
            visual: Some(c[4]),
        };
        let state = DiffusionState::new(TokenGrid::new(2, 3, ids)?, 2);
        let l = den.logits(&mut g, &p, &state, &cond)?;
        Ok(g.value(l).clone())
    };
    let a = run(&store, ids).map_err(err)?;
    let b = run(&permuted, pids).map_err(err)?;
    let mut worst = 0.0f64;
    for cell in 0..cells {
        for (x, &y) in perm.iter().enumerate() {
            worst = worst.max((a.data()[cell * k + x] - b.data()[cell * k + y]).abs());
        }
    }
    let line = format!("max abs diff {worst:.2e}");
    if worst <= 1e-12 {
        Ok(line)
    } else {
        Err(line)
    }
}
