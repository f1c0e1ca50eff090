//! Pre-activation residual CNN. Stage `s > 0` halves the resolution and
//! doubles the channels with a strided transition convolution; each stage
//! then applies one residual block `x + conv(relu(bn(conv(relu(bn(x))))))`.

use rand::Rng;

use super::init::{fan_in_normal, ParamBuilder};
use super::{ArchSpec, Ctx, ForwardOutput, ModelSpec};
use crate::error::Result;
use crate::graph::{Graph, Var};

fn knobs(spec: &ModelSpec) -> (usize, usize) {
    match spec.arch {
        ArchSpec::TinyCnn {
            num_stages,
            base_channels,
        } => (num_stages, base_channels),
        _ => unreachable!("cnn knobs on non-cnn spec"),
    }
}

fn conv_w<R: Rng>(out: usize, inp: usize, rng: &mut R) -> crate::tensor::Tensor {
    fan_in_normal(&[out, inp, 3, 3], inp * 9, 2f64.sqrt(), rng)
}

pub(super) fn build<R: Rng>(spec: &ModelSpec, b: &mut ParamBuilder, rng: &mut R) -> (Vec<String>, usize) {
    let (stages, base) = knobs(spec);
    let cin = spec.input_shape[0];
    b.push("stem.w", conv_w(base, cin, rng), 0);
    let mut names = Vec::new();
    let mut ch = base;
    for s in 0..stages {
        let layer = s + 1;
        let p = format!("stage{s}");
        if s > 0 {
            b.batch_norm(&format!("{p}.down.bn"), ch, layer);
            b.push(format!("{p}.down.w"), conv_w(2 * ch, ch, rng), layer);
            ch *= 2;
        }
        b.batch_norm(&format!("{p}.block.bn1"), ch, layer);
        b.push(format!("{p}.block.conv1.w"), conv_w(ch, ch, rng), layer);
        b.batch_norm(&format!("{p}.block.bn2"), ch, layer);
        b.push(format!("{p}.block.conv2.w"), conv_w(ch, ch, rng), layer);
        names.push(p);
    }
    names.push("pooled".to_string());
    let head_layer = stages + 1;
    b.batch_norm("final_bn", ch, head_layer);
    b.linear(
        "head",
        ch,
        spec.num_classes,
        fan_in_normal(&[ch, spec.num_classes], ch, 1.0, rng),
        head_layer,
    );
    let proj_layer = stages + 2;
    b.linear("proj.fc1", ch, ch, fan_in_normal(&[ch, ch], ch, 2f64.sqrt(), rng), proj_layer);
    b.linear("proj.fc2", ch, spec.proj_dim, fan_in_normal(&[ch, spec.proj_dim], ch, 1.0, rng), proj_layer);
    (names, stages + 3)
}

/// The residual block of stage `s`.
pub(super) fn residual_block(ctx: &mut Ctx, g: &mut Graph, x: Var, s: usize) -> Result<Var> {
    let p = format!("stage{s}.block");
    let h = ctx.batch_norm(g, x, &format!("{p}.bn1"))?;
    let h = g.relu(h);
    let h = g.conv2d(h, ctx.p(&format!("{p}.conv1.w")), 1, 1)?;
    let h = ctx.batch_norm(g, h, &format!("{p}.bn2"))?;
    let h = g.relu(h);
    let h = g.conv2d(h, ctx.p(&format!("{p}.conv2.w")), 1, 1)?;
    g.add(x, h)
}

pub(super) fn forward(ctx: &mut Ctx, g: &mut Graph, x: Var) -> Result<ForwardOutput> {
    let (stages, _) = knobs(&ctx.arch.spec);
    let mut h = g.conv2d(x, ctx.p("stem.w"), 1, 1)?;
    let mut outs = Vec::with_capacity(stages + 1);
    for s in 0..stages {
        if s > 0 {
            let p = format!("stage{s}.down");
            let t = ctx.batch_norm(g, h, &format!("{p}.bn"))?;
            let t = g.relu(t);
            h = g.conv2d(t, ctx.p(&format!("{p}.w")), 2, 1)?;
        }
        h = residual_block(ctx, g, h, s)?;
        outs.push(h);
    }
    let f = ctx.batch_norm(g, h, "final_bn")?;
    let f = g.relu(f);
    let s = g.shape(f).to_vec();
    let f = g.reshape(f, &[s[0], s[1], s[2] * s[3]])?;
    let features = g.mean_axis(f, 2)?;
    outs.push(features);
    let logits = ctx.linear(g, features, "head")?;
    Ok(ForwardOutput {
        logits,
        features,
        blocks: outs,
        attention: Vec::new(),
        bn_updates: Vec::new(),
    })
}
