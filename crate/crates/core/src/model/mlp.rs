use rand::Rng;

use super::init::{fan_in_normal, ParamBuilder};
use super::{ArchSpec, Ctx, ForwardOutput, ModelSpec};
use crate::error::Result;
use crate::graph::{Graph, Var};

fn hidden(spec: &ModelSpec) -> &[usize] {
    match &spec.arch {
        ArchSpec::TinyMlp { hidden } => hidden,
        _ => unreachable!("mlp widths on non-mlp spec"),
    }
}

pub(super) fn build<R: Rng>(spec: &ModelSpec, b: &mut ParamBuilder, rng: &mut R) -> (Vec<String>, usize) {
    let widths = hidden(spec).to_vec();
    let mut din = spec.input_len();
    let mut names = Vec::new();
    for (i, &w) in widths.iter().enumerate() {
        b.linear(&format!("hidden{i}"), din, w, fan_in_normal(&[din, w], din, 2f64.sqrt(), rng), i);
        names.push(format!("hidden{i}"));
        din = w;
    }
    let l = widths.len();
    b.linear(
        "head",
        din,
        spec.num_classes,
        fan_in_normal(&[din, spec.num_classes], din, 1.0, rng),
        l,
    );
    b.linear("proj.fc1", din, din, fan_in_normal(&[din, din], din, 2f64.sqrt(), rng), l + 1);
    b.linear("proj.fc2", din, spec.proj_dim, fan_in_normal(&[din, spec.proj_dim], din, 1.0, rng), l + 1);
    (names, l + 2)
}

pub(super) fn forward(ctx: &mut Ctx, g: &mut Graph, x: Var) -> Result<ForwardOutput> {
    let m = g.shape(x)[0];
    let mut h = g.reshape(x, &[m, ctx.arch.spec.input_len()])?;
    let mut outs = Vec::new();
    for i in 0..hidden(&ctx.arch.spec).len() {
        h = ctx.linear(g, h, &format!("hidden{i}"))?;
        h = g.relu(h);
        outs.push(h);
    }
    let logits = ctx.linear(g, h, "head")?;
    Ok(ForwardOutput {
        logits,
        features: h,
        blocks: outs,
        attention: Vec::new(),
        bn_updates: Vec::new(),
    })
}
