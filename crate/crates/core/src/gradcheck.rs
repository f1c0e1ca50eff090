//! Finite-difference gradient checks for graph ops, model-zoo blocks and the
//! contrastive loss.
//!
//! The error of one input tensor is `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-3·G)`
//! where `a` is the analytic gradient, `n` the central difference with step
//! `1e-5` and `G` the largest gradient entry over all inputs of the check.
//! The `G` floor keeps tensors whose true gradient is zero (a key bias under
//! softmax) from dividing rounding noise by itself. Draws whose ReLU inputs
//! come within `1e-4` of the kink, or where a perturbation flips any ReLU,
//! are redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fl::{moon_loss_node, COSINE_EPS};
use crate::graph::{Graph, Var};
use crate::model::{build_model, ArchSpec, Mode, ModelSpec};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const KINK_MARGIN: f64 = 1e-4;
const FLOOR: f64 = 1e-3;
const MAX_REDRAWS: u64 = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    /// Worst error over the checked tensors.
    pub max_rel_error: f64,
    pub checked_scalars: usize,
}

/// Scalar builder: records a loss from one leaf per input tensor.
pub trait LossFn: Fn(&mut Graph, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph, &[Var]) -> Result<Var>> LossFn for F {}

struct Eval {
    loss: f64,
    margin: f64,
    pattern: u64,
}

fn eval(inputs: &[Tensor], f: &dyn LossFn) -> Result<Eval> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let l = f(&mut g, &vars)?;
    Ok(Eval {
        loss: g.value(l).data()[0],
        margin: g.relu_margin(),
        pattern: g.relu_pattern(),
    })
}

/// Group name for inputs that are read by value only (running statistics).
pub const NOT_DIFFERENTIATED: &str = "-";

/// Analytic and numeric gradients per tensor; `groups` maps each input to a
/// report name (inputs sharing a name are pooled).
pub fn check_grouped(inputs: &[Tensor], groups: &[String], f: &dyn LossFn) -> Result<Vec<GradCheckReport>> {
    Ok(check_inner(inputs, groups, f, false)?.expect("kinks not checked"))
}

/// `None` when `reject_kinks` is set and a perturbation crossed a ReLU kink.
fn check_inner(
    inputs: &[Tensor],
    groups: &[String],
    f: &dyn LossFn,
    reject_kinks: bool,
) -> Result<Option<Vec<GradCheckReport>>> {
    let base = eval(inputs, f)?.pattern;
    assert_eq!(inputs.len(), groups.len());
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    if g.shape(loss).iter().product::<usize>() != 1 {
        return Err(Error::NonScalarBackward(g.shape(loss).to_vec()));
    }
    g.backward(loss)?;
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let scale = analytic.iter().map(|a| inf(a)).fold(f64::MIN_POSITIVE, f64::max);
    let mut reports: Vec<GradCheckReport> = Vec::new();
    let mut work = inputs.to_vec();
    for (i, analytic) in analytic.iter().enumerate() {
        if groups[i] == NOT_DIFFERENTIATED {
            continue;
        }
        let mut numeric = vec![0.0; analytic.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = eval(&work, f)?;
            work[i].data_mut()[j] = orig - STEP;
            let down = eval(&work, f)?;
            work[i].data_mut()[j] = orig;
            if reject_kinks && (up.pattern != base || down.pattern != base) {
                return Ok(None);
            }
            *n = (up.loss - down.loss) / (2.0 * STEP);
        }
        let diff = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let err = diff / inf(analytic).max(inf(&numeric)).max(FLOOR * scale);
        match reports.iter_mut().find(|r| r.name == groups[i]) {
            Some(r) => {
                r.max_rel_error = r.max_rel_error.max(err);
                r.checked_scalars += analytic.len();
            }
            None => reports.push(GradCheckReport {
                name: groups[i].clone(),
                max_rel_error: err,
                checked_scalars: analytic.len(),
            }),
        }
    }
    Ok(Some(reports))
}

/// Redraws inputs via `draw(attempt)` until no ReLU input is near its kink,
/// then checks every input under one report name.
pub fn check_drawn(
    name: &str,
    draw: &dyn Fn(u64) -> (Vec<Tensor>, Vec<String>),
    f: &dyn LossFn,
) -> Result<Vec<GradCheckReport>> {
    for attempt in 0..MAX_REDRAWS {
        let (inputs, groups) = draw(attempt);
        if eval(&inputs, f)?.margin < KINK_MARGIN {
            continue;
        }
        let Some(mut r) = check_inner(&inputs, &groups, f, true)? else {
            continue;
        };
        for rep in &mut r {
            rep.name = format!("{name}/{}", rep.name);
        }
        return Ok(r);
    }
    Err(Error::Shape {
        op: "gradcheck",
        detail: format!("{name}: every draw put a ReLU input near its kink"),
    })
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// `Σ out ⊙ r` for a fixed random `r`, turning any output into a scalar.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = randn(&mut rng, g.shape(out));
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn single(name: &str, seed: u64, shapes: &[&[usize]], f: &dyn LossFn) -> Result<Vec<GradCheckReport>> {
    let draw = |attempt: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(attempt));
        let inputs: Vec<Tensor> = shapes.iter().map(|s| randn(&mut rng, s)).collect();
        let groups = (0..shapes.len()).map(|i| format!("arg{i}")).collect();
        (inputs, groups)
    };
    check_drawn(name, &draw, f)
}

/// Every differentiable graph op on random inputs.
pub fn check_ops(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let s = seed;
    let mut add = |r: Result<Vec<GradCheckReport>>| -> Result<()> {
        out.extend(r?);
        Ok(())
    };
    add(single("add", s, &[&[2, 3], &[2, 3]], &|g, v| {
        let o = g.add(v[0], v[1])?;
        weighted_sum(g, o, s)
    }))?;
    add(single("mul", s, &[&[2, 3], &[2, 3]], &|g, v| {
        let o = g.mul(v[0], v[1])?;
        weighted_sum(g, o, s)
    }))?;
    add(single("scale", s, &[&[4]], &|g, v| {
        let o = g.scale(v[0], -1.7);
        weighted_sum(g, o, s)
    }))?;
    add(single("add_broadcast", s, &[&[2, 3, 4], &[4]], &|g, v| {
        let o = g.add_broadcast(v[0], v[1])?;
        weighted_sum(g, o, s)
    }))?;
    add(single("linear", s, &[&[2, 3, 4], &[4, 5], &[5]], &|g, v| {
        let o = g.linear(v[0], v[1], Some(v[2]))?;
        weighted_sum(g, o, s)
    }))?;
    add(single("matmul", s, &[&[3, 4], &[4, 2]], &|g, v| {
        let o = g.matmul(v[0], v[1])?;
        weighted_sum(g, o, s)
    }))?;
    add(single("batch_matmul", s, &[&[2, 3, 4], &[2, 4, 5]], &|g, v| {
        let o = g.batch_matmul(v[0], v[1], false)?;
        weighted_sum(g, o, s)
    }))?;
    add(single("batch_matmul_t", s, &[&[2, 3, 4], &[2, 5, 4]], &|g, v| {
        let o = g.batch_matmul(v[0], v[1], true)?;
        weighted_sum(g, o, s)
    }))?;
    add(single("relu", s, &[&[3, 5]], &|g, v| {
        let o = g.relu(v[0]);
        weighted_sum(g, o, s)
    }))?;
    add(single("gelu", s, &[&[3, 5]], &|g, v| {
        let o = g.gelu(v[0]);
        weighted_sum(g, o, s)
    }))?;
    add(single("softmax", s, &[&[3, 5]], &|g, v| {
        let o = g.softmax(v[0]);
        weighted_sum(g, o, s)
    }))?;
    add(single("layer_norm", s, &[&[2, 3, 6], &[6], &[6]], &|g, v| {
        let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(g, o, s)
    }))?;
    add(single("batch_norm", s, &[&[4, 3, 2, 2], &[3], &[3]], &|g, v| {
        let o = g.batch_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(g, o, s)
    }))?;
    add(single("batch_norm_eval", s, &[&[4, 3, 2, 2], &[3], &[3]], &|g, v| {
        let o = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
        weighted_sum(g, o, s)
    }))?;
    add(single("conv2d", s, &[&[2, 3, 5, 5], &[4, 3, 3, 3]], &|g, v| {
        let o = g.conv2d(v[0], v[1], 1, 1)?;
        weighted_sum(g, o, s)
    }))?;
    add(single("conv2d_stride2", s, &[&[2, 3, 5, 5], &[4, 3, 3, 3]], &|g, v| {
        let o = g.conv2d(v[0], v[1], 2, 1)?;
        weighted_sum(g, o, s)
    }))?;
    add(single("reshape", s, &[&[2, 6]], &|g, v| {
        let o = g.reshape(v[0], &[3, 4])?;
        weighted_sum(g, o, s)
    }))?;
    add(single("permute", s, &[&[2, 3, 4]], &|g, v| {
        let o = g.permute(v[0], &[2, 0, 1])?;
        weighted_sum(g, o, s)
    }))?;
    add(single("mean_axis", s, &[&[2, 3, 4]], &|g, v| {
        let o = g.mean_axis(v[0], 1)?;
        weighted_sum(g, o, s)
    }))?;
    add(single("sum", s, &[&[2, 3]], &|g, v| {
        let o = g.sum(v[0]);
        weighted_sum(g, o, s)
    }))?;
    add(single("cross_entropy", s, &[&[4, 5]], &|g, v| g.cross_entropy(v[0], &[0, 3, 4, 1])))?;
    add(single("cosine_rows", s, &[&[3, 4], &[3, 4]], &|g, v| {
        let o = g.cosine_rows(v[0], v[1], COSINE_EPS)?;
        weighted_sum(g, o, s)
    }))?;
    add(single("stack_cols", s, &[&[3], &[3]], &|g, v| {
        let o = g.stack_cols(v[0], v[1])?;
        weighted_sum(g, o, s)
    }))?;
    Ok(out)
}

/// Contrastive loss with respect to all three representation batches.
pub fn check_moon(seed: u64, tau: f64) -> Result<Vec<GradCheckReport>> {
    single("moon_loss", seed, &[&[4, 6], &[4, 6], &[4, 6]], &|g, v| moon_loss_node(g, v[0], v[1], v[2], tau))
}

/// Small specs exercising every block kind of each architecture.
pub fn gradcheck_specs() -> Vec<ModelSpec> {
    let base = |arch, input_shape| ModelSpec {
        arch,
        input_shape,
        num_classes: 3,
        proj_dim: 4,
    };
    vec![
        base(
            ArchSpec::TinyVit {
                patch_size: 2,
                embed_dim: 8,
                num_heads: 2,
                num_blocks: 2,
                mlp_ratio: 2,
            },
            [3, 4, 4],
        ),
        base(
            ArchSpec::TinyCnn {
                num_stages: 2,
                base_channels: 4,
            },
            [3, 6, 6],
        ),
        base(ArchSpec::TinyMlp { hidden: vec![6, 5] }, [3, 3, 3]),
    ]
}

/// Full-model check of `spec`: cross-entropy plus the contrastive term on
/// the projected representation, against every parameter (grouped by block
/// prefix) and the input. Training mode uses batch statistics.
pub fn check_model(spec: &ModelSpec, seed: u64, mode: Mode) -> Result<Vec<GradCheckReport>> {
    let name = format!("{}_{}", spec.arch.name(), if mode == Mode::Train { "train" } else { "eval" });
    let proto = build_model(spec, seed)?;
    let [c, h, w] = spec.input_shape;
    let batch = 3;
    let labels: Vec<usize> = (0..batch).map(|i| i % spec.num_classes).collect();
    let np = proto.params.len();
    let draw = |attempt: u64| {
        let model = build_model(spec, seed.wrapping_mul(1000).wrapping_add(attempt)).expect("valid spec");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ attempt.wrapping_mul(0x9e37));
        let mut inputs: Vec<Tensor> = model.params.iter().map(|p| p.value.clone()).collect();
        // O(1) weights keep gradients well above finite-difference noise;
        // random buffers give eval mode non-trivial running statistics
        for (t, p) in inputs.iter_mut().zip(model.params.iter()) {
            if p.kind == crate::params::ParamKind::Trainable {
                *t = Tensor::randn(t.shape(), 0.5, &mut rng);
            } else {
                for v in t.data_mut() {
                    *v = if p.name.ends_with("running_var") {
                        rng.random_range(0.5..1.5)
                    } else {
                        rng.random_range(-0.2..0.2)
                    };
                }
            }
        }
        inputs.push(randn(&mut rng, &[batch, c, h, w]));
        let mut groups: Vec<String> = model
            .params
            .iter()
            .map(|p| match p.kind {
                crate::params::ParamKind::Buffer => NOT_DIFFERENTIATED.to_string(),
                _ => p.name.split('.').next().unwrap_or(&p.name).to_string(),
            })
            .collect();
        groups.push("input".into());
        (inputs, groups)
    };
    let arch = &proto.arch;
    let zseed = seed;
    let f = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let out = arch.forward(g, &v[..np], v[np], mode)?;
        let ce = g.cross_entropy(out.logits, &labels)?;
        let z = arch.project(g, &v[..np], out.features)?;
        let mut rng = ChaCha8Rng::seed_from_u64(zseed ^ 0xface);
        let d = g.shape(z)[1];
        let zg = g.constant(randn(&mut rng, &[batch, d]));
        let zp = g.constant(randn(&mut rng, &[batch, d]));
        let m = moon_loss_node(g, z, zg, zp, 0.5)?;
        let m = g.scale(m, 0.5);
        g.add(ce, m)
    };
    check_drawn(&name, &draw, &f)
}

/// Multi-head self-attention sub-layer of the first transformer block.
pub fn check_attention(seed: u64) -> Result<Vec<GradCheckReport>> {
    let spec = &gradcheck_specs()[0];
    let proto = build_model(spec, seed)?;
    let np = proto.params.len();
    let d = match spec.arch {
        ArchSpec::TinyVit { embed_dim, .. } => embed_dim,
        _ => unreachable!(),
    };
    let draw = |attempt: u64| {
        let model = build_model(spec, seed.wrapping_mul(1000).wrapping_add(attempt)).expect("valid spec");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ attempt);
        let mut inputs: Vec<Tensor> = model.params.iter().map(|p| Tensor::randn(p.value.shape(), 0.5, &mut rng)).collect();
        inputs.push(randn(&mut rng, &[2, 5, d]));
        let mut groups: Vec<String> = model.params.iter().map(|_| "params".to_string()).collect();
        groups.push("tokens".into());
        (inputs, groups)
    };
    let arch = &proto.arch;
    let f = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let (o, _) = arch.self_attention(g, &v[..np], 0, v[np])?;
        weighted_sum(g, o, seed)
    };
    check_drawn("attention", &draw, &f)
}

/// Everything above for one seed.
pub fn check_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = check_ops(seed)?;
    out.extend(check_moon(seed, 0.5)?);
    out.extend(check_attention(seed)?);
    for spec in gradcheck_specs() {
        out.extend(check_model(&spec, seed, Mode::Train)?);
        if matches!(spec.arch, ArchSpec::TinyCnn { .. }) {
            out.extend(check_model(&spec, seed, Mode::Eval)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // a constant leaking into the loss through value-only arithmetic has
        // no recorded gradient, so the check must flag it
        let inputs = vec![Tensor::new(vec![2], vec![0.3, -0.4]).unwrap()];
        let r = check_grouped(&inputs, &["x".into()], &|g, v| {
            let x2 = g.value(v[0]).data().iter().map(|a| a * a).sum::<f64>();
            let c = g.constant(Tensor::scalar(x2));
            let s = g.sum(v[0]);
            g.add(s, c)
        })
        .unwrap();
        assert!(r[0].max_rel_error > 0.1);
    }

    #[test]
    fn one_seed_passes() {
        for r in check_all(0).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }
}
