//! Central finite-difference checks of every differentiable op and of the
//! composed modules, run in `f64`.
//!
//! Each check projects its outputs onto fixed random weights to get a scalar,
//! compares the tape's gradient with `(L(x+h) − L(x−h)) / 2h` on a sample of
//! input coordinates, and passes when every relative error
//! `|a − n| / max(|a|, |n|, REL_FLOOR)` stays below [`REL_TOLERANCE`].

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{cross_masked_attention, self_attention_block, AttentionConfig, MhaParams, TokenSequence};
use crate::encoder::{mife_forward, EncoderConfig, MifeParams};
use crate::error::{Error, Result};
use crate::model::{episode_loss, forward_with, CatNet, EpisodeInput, ModelConfig};
use crate::params::{Bindings, ParamStore};
use crate::prototype::{soft_dice_loss, ProtoConfig};
use crate::refine::{proto_head, refine, CmatParams, CmatState, CrossMode, RefineConfig};
use crate::tensor::{OpKind, Tape, Tensor, Var};

pub const REL_TOLERANCE: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-4;
/// Step for single ops.
pub const OP_STEP: f64 = 1e-4;
/// Step for composed modules; small so that perturbations rarely cross a
/// ReLU kink or flip a thresholded mask.
pub const MODULE_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Op,
    Module,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Category::Op => "op",
            Category::Module => "module",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub category: Category,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name, element, analytic and numeric derivative at the
    /// worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub passed: bool,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<6} {:<24} max_rel_error={:.3e} coords={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.category,
            self.name,
            self.max_rel_error,
            self.checked
        )?;
        if let (false, Some((n, i, a, num))) = (self.passed, &self.worst) {
            write!(f, " worst={n}[{i}] analytic={a:.6e} numeric={num:.6e}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub seed: u64,
    /// Backward rule to corrupt in the analytic pass.
    pub fault: Option<OpKind>,
    /// Coordinates sampled per check.
    pub max_coords: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            seed: 0,
            fault: None,
            max_coords: 48,
        }
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &Bindings) -> Result<Vec<Var>>>;

/// A differentiable function of the named tensors in `inputs`.
pub struct Case {
    pub inputs: ParamStore<f64>,
    pub build: Build,
    pub step: f64,
}

fn projected_loss(
    tape: &mut Tape<f64>,
    outputs: &[Var],
    weights: &mut Vec<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (i, &o) in outputs.iter().enumerate() {
        if weights.len() <= i {
            let dims = tape.shape(o).dims().to_vec();
            weights.push(Tensor::from_fn(&dims, |_| rng.random_range(-1.0..1.0))?);
        }
        let w = tape.constant(weights[i].clone());
        let p = tape.mul(o, w)?;
        let s = tape.sum(p);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::Usage("check produced no outputs".into()))
}

/// Runs one finite-difference comparison.
pub fn run_case(name: &str, category: Category, case: &Case, opts: &CheckOptions) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut weights = Vec::new();

    let mut tape = Tape::new();
    if let Some(kind) = opts.fault {
        tape.inject_gradient_fault(kind);
    }
    let bindings = case.inputs.bind(&mut tape);
    let outputs = (case.build)(&mut tape, &bindings)?;
    let loss = projected_loss(&mut tape, &outputs, &mut weights, &mut rng)?;
    let grads = tape.backward(loss)?;

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let outs = (case.build)(&mut t, &b)?;
        let mut w = weights.clone();
        let l = projected_loss(&mut t, &outs, &mut w, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(t.value(l).data()[0])
    };

    let coords: Vec<(String, usize)> = case
        .inputs
        .iter()
        .flat_map(|(n, t)| (0..t.numel()).map(move |i| (n.to_string(), i)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= opts.max_coords {
        (0..coords.len()).collect()
    } else {
        let mut v = sample(&mut rng, coords.len(), opts.max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut worst: f64 = 0.0;
    let mut worst_at = None;
    let mut probe = case.inputs.clone();
    for &c in &chosen {
        let (ref pname, i) = coords[c];
        let analytic = grads.get(bindings.var(pname)?).map_or(0.0, |g| g[i]);
        let base = case.inputs.get(pname).expect("listed").data()[i];
        probe.get_mut(pname).expect("listed").data_mut()[i] = base + case.step;
        let up = eval(&probe)?;
        probe.get_mut(pname).expect("listed").data_mut()[i] = base - case.step;
        let down = eval(&probe)?;
        probe.get_mut(pname).expect("listed").data_mut()[i] = base;
        let numeric = (up - down) / (2.0 * case.step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel >= worst {
            worst = rel;
            worst_at = Some((pname.clone(), i, analytic, numeric));
        }
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        category,
        checked: chosen.len(),
        max_rel_error: worst,
        worst: worst_at,
        passed: worst < REL_TOLERANCE,
    })
}

/// Named check in the registry.
pub struct GradCheck {
    pub name: &'static str,
    pub category: Category,
    pub make: fn(&mut ChaCha8Rng) -> Result<Case>,
}

impl GradCheck {
    pub fn run(&self, opts: &CheckOptions) -> Result<CheckOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
        let case = (self.make)(&mut rng)?;
        run_case(self.name, self.category, &case, opts)
    }
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Result<Tensor<f64>> {
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi))
}

/// Values in ±[lo, hi], keeping clear of zero.
fn away_from_zero(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Result<Tensor<f64>> {
    Tensor::from_fn(dims, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn store(pairs: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in pairs {
        s.insert(n, t);
    }
    s
}

fn op_case(inputs: Vec<(&str, Tensor<f64>)>, build: impl Fn(&mut Tape<f64>, &Bindings) -> Result<Var> + 'static) -> Case {
    Case {
        inputs: store(inputs),
        build: Box::new(move |t, b| Ok(vec![build(t, b)?])),
        step: OP_STEP,
    }
}

fn v(b: &Bindings, n: &str) -> Result<Var> {
    b.var(n)
}

fn op_checks() -> Vec<GradCheck> {
    use Category::Op;
    vec![
        GradCheck { name: "matmul", category: Op, make: |r| {
            Ok(op_case(vec![("a", uniform(r, &[3, 4], -1.0, 1.0)?), ("b", uniform(r, &[4, 5], -1.0, 1.0)?)],
                |t, b| t.matmul(v(b, "a")?, v(b, "b")?)))
        }},
        GradCheck { name: "transpose", category: Op, make: |r| {
            Ok(op_case(vec![("x", uniform(r, &[3, 4], -1.0, 1.0)?)], |t, b| t.transpose(v(b, "x")?)))
        }},
        GradCheck { name: "add", category: Op, make: |r| {
            Ok(op_case(vec![("a", uniform(r, &[2, 3], -1.0, 1.0)?), ("b", uniform(r, &[2, 3], -1.0, 1.0)?)],
                |t, b| t.add(v(b, "a")?, v(b, "b")?)))
        }},
        GradCheck { name: "sub", category: Op, make: |r| {
            Ok(op_case(vec![("a", uniform(r, &[2, 3], -1.0, 1.0)?), ("b", uniform(r, &[2, 3], -1.0, 1.0)?)],
                |t, b| t.sub(v(b, "a")?, v(b, "b")?)))
        }},
        GradCheck { name: "mul", category: Op, make: |r| {
            Ok(op_case(vec![("a", uniform(r, &[2, 3], -1.0, 1.0)?), ("b", uniform(r, &[2, 3], -1.0, 1.0)?)],
                |t, b| t.mul(v(b, "a")?, v(b, "b")?)))
        }},
        GradCheck { name: "div", category: Op, make: |r| {
            Ok(op_case(vec![("a", uniform(r, &[2, 3], -1.0, 1.0)?), ("b", away_from_zero(r, &[2, 3], 0.5, 1.5)?)],
                |t, b| t.div(v(b, "a")?, v(b, "b")?)))
        }},
        GradCheck { name: "scale", category: Op, make: |r| {
            Ok(op_case(vec![("x", uniform(r, &[2, 3], -1.0, 1.0)?)], |t, b| Ok(t.scale(v(b, "x")?, -1.7))))
        }},
        GradCheck { name: "add_scalar", category: Op, make: |r| {
            Ok(op_case(vec![("x", uniform(r, &[2, 3], -1.0, 1.0)?)], |t, b| Ok(t.add_scalar(v(b, "x")?, 0.3))))
        }},
        GradCheck { name: "relu", category: Op, make: |r| {
            Ok(op_case(vec![("x", away_from_zero(r, &[3, 4], 0.1, 1.0)?)], |t, b| Ok(t.relu(v(b, "x")?))))
        }},
        GradCheck { name: "sigmoid", category: Op, make: |r| {
            Ok(op_case(vec![("x", uniform(r, &[3, 4], -3.0, 3.0)?)], |t, b| Ok(t.sigmoid(v(b, "x")?))))
        }},
        GradCheck { name: "softmax", category: Op, make: |r| {
            Ok(op_case(vec![("x", uniform(r, &[3, 5], -2.0, 2.0)?)], |t, b| {
                let x = v(b, "x")?;
                let rows = t.softmax(x, 1)?;
                let cols = t.softmax(x, 0)?;
                t.add(rows, cols)
            }))
        }},
        GradCheck { name: "layer_norm", category: Op, make: |r| {
            Ok(op_case(
                vec![
                    ("x", uniform(r, &[4, 6], -2.0, 2.0)?),
                    ("gain", uniform(r, &[6], 0.5, 1.5)?),
                    ("bias", uniform(r, &[6], -0.5, 0.5)?),
                ],
                |t, b| t.layer_norm(v(b, "x")?, v(b, "gain")?, v(b, "bias")?, 1e-5),
            ))
        }},
        GradCheck { name: "conv2d", category: Op, make: |r| {
            Ok(op_case(
                vec![("x", uniform(r, &[2, 6, 5], -1.0, 1.0)?), ("w", uniform(r, &[3, 2, 3, 3], -1.0, 1.0)?)],
                |t, b| {
                    let strided = t.conv2d(v(b, "x")?, v(b, "w")?, 2, 1)?;
                    let flat = t.conv2d(v(b, "x")?, v(b, "w")?, 1, 1)?;
                    let a = t.reshape(strided, &[3 * 3 * 3])?;
                    let c = t.reshape(flat, &[3 * 6 * 5])?;
                    t.concat(&[a, c], 0)
                },
            ))
        }},
        GradCheck { name: "add_bias", category: Op, make: |r| {
            Ok(op_case(
                vec![("x", uniform(r, &[3, 4, 2], -1.0, 1.0)?), ("b0", uniform(r, &[3], -1.0, 1.0)?), ("b2", uniform(r, &[2], -1.0, 1.0)?)],
                |t, b| {
                    let y = t.add_bias(v(b, "x")?, v(b, "b0")?, 0)?;
                    t.add_bias(y, v(b, "b2")?, 2)
                },
            ))
        }},
        GradCheck { name: "masked_fill", category: Op, make: |r| {
            let mask = Tensor::from_fn(&[4], |i| if i % 3 == 0 { 0.0 } else { 1.0 })?;
            Ok(op_case(vec![("x", uniform(r, &[3, 4], -1.0, 1.0)?)], move |t, b| {
                let y = t.masked_fill(v(b, "x")?, &mask, -4.0)?;
                t.softmax(y, 1)
            }))
        }},
        GradCheck { name: "concat", category: Op, make: |r| {
            Ok(op_case(
                vec![("a", uniform(r, &[2, 3], -1.0, 1.0)?), ("b", uniform(r, &[2, 2], -1.0, 1.0)?)],
                |t, b| t.concat(&[v(b, "a")?, v(b, "b")?, v(b, "a")?], 1),
            ))
        }},
        GradCheck { name: "mean", category: Op, make: |r| {
            Ok(op_case(vec![("x", uniform(r, &[3, 4, 2], -1.0, 1.0)?)], |t, b| t.mean(v(b, "x")?, 1)))
        }},
        GradCheck { name: "sum", category: Op, make: |r| {
            Ok(op_case(vec![("x", uniform(r, &[3, 4], -1.0, 1.0)?)], |t, b| Ok(t.sum(v(b, "x")?))))
        }},
        GradCheck { name: "narrow", category: Op, make: |r| {
            Ok(op_case(vec![("x", uniform(r, &[3, 5], -1.0, 1.0)?)], |t, b| t.narrow(v(b, "x")?, 1, 1, 3)))
        }},
        GradCheck { name: "reshape", category: Op, make: |r| {
            Ok(op_case(vec![("x", uniform(r, &[3, 4], -1.0, 1.0)?)], |t, b| {
                let y = t.reshape(v(b, "x")?, &[2, 6])?;
                t.transpose(y)
            }))
        }},
        GradCheck { name: "cosine", category: Op, make: |r| {
            Ok(op_case(
                vec![("x", uniform(r, &[5, 4], -1.0, 1.0)?), ("p", uniform(r, &[4], -1.0, 1.0)?)],
                |t, b| t.cosine_rows(v(b, "x")?, v(b, "p")?),
            ))
        }},
    ]
}

/// Small widths used by the module checks: D = 8, 2 heads, 16×16 images so
/// that feature maps hold 16 tokens.
pub fn check_model_config(depth: usize) -> ModelConfig {
    let mut cfg = ModelConfig::with_embed_dim(8);
    cfg.attention.num_heads = 2;
    cfg.refine = RefineConfig {
        num_iterations: depth,
        ..RefineConfig::default()
    };
    cfg
}

fn check_attention() -> AttentionConfig {
    check_model_config(1).attention
}

fn blob_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<Tensor<f64>> {
    let (cy, cx) = (rng.random_range(0.3..0.7) * h as f64, rng.random_range(0.3..0.7) * w as f64);
    let r = rng.random_range(0.2..0.35) * h.min(w) as f64;
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
        if (y - cy).hypot(x - cx) <= r {
            1.0
        } else {
            0.0
        }
    })
}

fn image(rng: &mut ChaCha8Rng, mask: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (h, w) = (mask.dims()[0], mask.dims()[1]);
    Tensor::from_fn(&[1, h, w], |i| mask.data()[i] * 1.5 + rng.random_range(-0.5..0.5))
}

fn module_checks() -> Vec<GradCheck> {
    use Category::Module;
    vec![
        GradCheck { name: "mife", category: Module, make: |r| {
            let cfg = EncoderConfig::with_embed_dim(8);
            let mut inputs = ParamStore::new();
            MifeParams::init(&mut inputs, &cfg, r)?;
            let sm = blob_mask(r, 16, 16)?;
            let qm = blob_mask(r, 16, 16)?;
            let (si, qi) = (image(r, &sm)?, image(r, &qm)?);
            Ok(Case {
                inputs,
                build: Box::new(move |t, b| {
                    let p = MifeParams::bind(b, &cfg)?;
                    let (q, s) = (t.constant(qi.clone()), t.constant(si.clone()));
                    let out = mife_forward(t, q, s, &sm, &p, &cfg)?;
                    Ok(vec![out.query, out.support, out.probabilities])
                }),
                step: MODULE_STEP,
            })
        }},
        GradCheck { name: "self_attention", category: Module, make: |r| {
            let cfg = check_attention();
            let mut inputs = ParamStore::new();
            MhaParams::init(&mut inputs, "block", &cfg, r)?;
            inputs.insert("x", uniform(r, &[16, 8], -1.0, 1.0)?);
            Ok(Case {
                inputs,
                build: Box::new(move |t, b| {
                    let p = MhaParams::bind(b, "block")?;
                    let seq = TokenSequence { tensor: b.var("x")?, origin: (4, 4) };
                    Ok(vec![self_attention_block(t, &seq, &p, &cfg)?.tensor])
                }),
                step: MODULE_STEP,
            })
        }},
        GradCheck { name: "cross_masked_attention", category: Module, make: |r| {
            let cfg = check_attention();
            let mut inputs = ParamStore::new();
            MhaParams::init(&mut inputs, "block", &cfg, r)?;
            inputs.insert("src", uniform(r, &[16, 8], -1.0, 1.0)?);
            inputs.insert("dst", uniform(r, &[16, 8], -1.0, 1.0)?);
            let mut mask = Tensor::from_fn(&[16], |_| if r.random_bool(0.4) { 1.0 } else { 0.0 })?;
            mask.data_mut()[0] = 1.0;
            Ok(Case {
                inputs,
                build: Box::new(move |t, b| {
                    let p = MhaParams::bind(b, "block")?;
                    let src = TokenSequence { tensor: b.var("src")?, origin: (4, 4) };
                    let dst = TokenSequence { tensor: b.var("dst")?, origin: (4, 4) };
                    Ok(vec![cross_masked_attention(t, &src, &dst, &mask, &p, &cfg)?.tensor])
                }),
                step: MODULE_STEP,
            })
        }},
        GradCheck { name: "prototype_head", category: Module, make: |r| {
            let proto = ProtoConfig::default();
            let mut inputs = ParamStore::new();
            inputs.insert("support", uniform(r, &[8, 4, 4], -1.0, 1.0)?);
            inputs.insert("query", uniform(r, &[8, 4, 4], -1.0, 1.0)?);
            let sm = blob_mask(r, 4, 4)?;
            let truth = blob_mask(r, 4, 4)?;
            Ok(Case {
                inputs,
                build: Box::new(move |t, b| {
                    let p = proto_head(t, b.var("support")?, b.var("query")?, &sm, &proto)?;
                    Ok(vec![p, soft_dice_loss(t, p, &truth)?])
                }),
                step: MODULE_STEP,
            })
        }},
        GradCheck { name: "cmat_stack", category: Module, make: |r| {
            let cfg = check_model_config(4);
            let mut inputs = ParamStore::new();
            CmatParams::init_all(&mut inputs, &cfg.refine, &cfg.attention, r)?;
            inputs.insert("support", uniform(r, &[8, 4, 4], -1.0, 1.0)?);
            inputs.insert("query", uniform(r, &[8, 4, 4], -1.0, 1.0)?);
            let initial = uniform(r, &[4, 4], 0.0, 1.0)?;
            let sm = blob_mask(r, 4, 4)?;
            let truth = blob_mask(r, 4, 4)?;
            Ok(Case {
                inputs,
                build: Box::new(move |t, b| {
                    let params = CmatParams::bind_all(b, &cfg.refine)?;
                    let p0 = t.constant(initial.clone());
                    let start = CmatState::new(t, b.var("support")?, b.var("query")?, p0, &cfg.proto, 0)?;
                    let r = refine(t, start, &sm, &params, &cfg.attention, &cfg.proto, CrossMode::Bidirectional)?;
                    Ok(vec![soft_dice_loss(t, r.last.probabilities, &truth)?])
                }),
                step: MODULE_STEP,
            })
        }},
        GradCheck { name: "full_model", category: Module, make: |r| {
            let cfg = check_model_config(2);
            let model = CatNet::<f64>::init(cfg.clone(), r)?;
            let sm = blob_mask(r, 16, 16)?;
            let truth = blob_mask(r, 16, 16)?;
            let (si, qi) = (image(r, &sm)?, image(r, &truth)?);
            Ok(Case {
                inputs: model.params,
                build: Box::new(move |t, b| {
                    let input = EpisodeInput { support_image: &si, support_mask: &sm, query_image: &qi };
                    let pass = forward_with(t, b.clone(), &cfg, input)?;
                    Ok(vec![episode_loss(t, &pass, &truth, &cfg)?])
                }),
                step: MODULE_STEP,
            })
        }},
    ]
}

/// Every registered check: one per differentiable op, then the modules.
pub fn registry() -> Vec<GradCheck> {
    let mut all = op_checks();
    all.extend(module_checks());
    all
}

/// Runs every check (or those whose name contains `filter`).
pub fn run_all(opts: &CheckOptions, filter: Option<&str>) -> Result<Vec<CheckOutcome>> {
    registry()
        .iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| c.run(opts))
        .collect()
}
