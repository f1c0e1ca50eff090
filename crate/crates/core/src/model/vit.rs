//! Pre-norm patch transformer with mean pooling over tokens (no class token).

use rand::Rng;

use super::init::{fan_in_normal, trunc_normal, ParamBuilder};
use super::{ArchSpec, Ctx, ForwardOutput, ModelSpec};
use crate::error::Result;
use crate::graph::{Graph, Var};

const INIT_STD: f64 = 0.02;

struct Dims {
    patch: usize,
    d: usize,
    heads: usize,
    blocks: usize,
    ratio: usize,
}

fn dims(spec: &ModelSpec) -> Dims {
    match spec.arch {
        ArchSpec::TinyVit {
            patch_size,
            embed_dim,
            num_heads,
            num_blocks,
            mlp_ratio,
        } => Dims {
            patch: patch_size,
            d: embed_dim,
            heads: num_heads,
            blocks: num_blocks,
            ratio: mlp_ratio,
        },
        _ => unreachable!("vit dims on non-vit spec"),
    }
}

pub(super) fn build<R: Rng>(spec: &ModelSpec, b: &mut ParamBuilder, rng: &mut R) -> (Vec<String>, usize) {
    let Dims {
        patch,
        d,
        blocks,
        ratio,
        ..
    } = dims(spec);
    let [c, h, w] = spec.input_shape;
    let tokens = (h / patch) * (w / patch);
    let pdim = c * patch * patch;
    let tn = |shape: &[usize], rng: &mut R| trunc_normal(shape, INIT_STD, rng);

    b.linear("patch", pdim, d, tn(&[pdim, d], rng), 0);
    b.push("pos", tn(&[tokens, d], rng), 0);
    let mut names = Vec::new();
    for i in 0..blocks {
        let layer = i + 1;
        let p = format!("block{i}");
        b.layer_norm(&format!("{p}.ln1"), d, layer);
        for m in ["q", "k", "v", "o"] {
            b.linear(&format!("{p}.attn.{m}"), d, d, tn(&[d, d], rng), layer);
        }
        b.layer_norm(&format!("{p}.ln2"), d, layer);
        b.linear(&format!("{p}.mlp.fc1"), d, ratio * d, tn(&[d, ratio * d], rng), layer);
        b.linear(&format!("{p}.mlp.fc2"), ratio * d, d, tn(&[ratio * d, d], rng), layer);
        names.push(p);
    }
    names.push("pooled".to_string());
    let head_layer = blocks + 1;
    b.layer_norm("norm", d, head_layer);
    b.linear("head", d, spec.num_classes, tn(&[d, spec.num_classes], rng), head_layer);
    let proj_layer = blocks + 2;
    b.linear("proj.fc1", d, d, fan_in_normal(&[d, d], d, 2f64.sqrt(), rng), proj_layer);
    b.linear("proj.fc2", d, spec.proj_dim, fan_in_normal(&[d, spec.proj_dim], d, 1.0, rng), proj_layer);
    (names, blocks + 3)
}

/// Multi-head self-attention on `[B, T, D]`; returns (projected output, weights).
pub(super) fn attention(ctx: &Ctx, g: &mut Graph, x: Var, block: usize) -> Result<(Var, Var)> {
    let Dims { d, heads, .. } = dims(&ctx.arch.spec);
    let s = g.shape(x).to_vec();
    let (bsz, t) = (s[0], s[1]);
    let dh = d / heads;
    let p = format!("block{block}.attn");
    let split = |g: &mut Graph, v: Var| -> Result<Var> {
        let v = g.reshape(v, &[bsz, t, heads, dh])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        g.reshape(v, &[bsz * heads, t, dh])
    };
    let q = ctx.linear(g, x, &format!("{p}.q"))?;
    let q = split(g, q)?;
    let k = ctx.linear(g, x, &format!("{p}.k"))?;
    let k = split(g, k)?;
    let v = ctx.linear(g, x, &format!("{p}.v"))?;
    let v = split(g, v)?;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax(scores);
    let o = g.batch_matmul(weights, v, false)?;
    let o = g.reshape(o, &[bsz, heads, t, dh])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[bsz, t, d])?;
    let o = ctx.linear(g, o, &format!("{p}.o"))?;
    Ok((o, weights))
}

/// One pre-norm transformer block; returns (output tokens, attention weights).
pub(super) fn block(ctx: &Ctx, g: &mut Graph, x: Var, i: usize) -> Result<(Var, Var)> {
    let p = format!("block{i}");
    let h = ctx.layer_norm(g, x, &format!("{p}.ln1"))?;
    let (a, w) = attention(ctx, g, h, i)?;
    let x = g.add(x, a)?;
    let h = ctx.layer_norm(g, x, &format!("{p}.ln2"))?;
    let h = ctx.linear(g, h, &format!("{p}.mlp.fc1"))?;
    let h = g.gelu(h);
    let h = ctx.linear(g, h, &format!("{p}.mlp.fc2"))?;
    Ok((g.add(x, h)?, w))
}

/// `[B, C, H, W]` to patch tokens `[B, T, C·P·P]`.
pub(super) fn patchify(g: &mut Graph, x: Var, patch: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let x = g.reshape(x, &[b, c, gh, patch, gw, patch])?;
    let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
    g.reshape(x, &[b, gh * gw, c * patch * patch])
}

pub(super) fn forward(ctx: &mut Ctx, g: &mut Graph, x: Var) -> Result<ForwardOutput> {
    let Dims { patch, blocks, .. } = dims(&ctx.arch.spec);
    let tokens = patchify(g, x, patch)?;
    let e = ctx.linear(g, tokens, "patch")?;
    let mut h = g.add_broadcast(e, ctx.p("pos"))?;
    let mut outs = Vec::with_capacity(blocks + 1);
    let mut attention = Vec::with_capacity(blocks);
    for i in 0..blocks {
        let (y, w) = block(ctx, g, h, i)?;
        h = y;
        outs.push(h);
        attention.push(w);
    }
    let n = ctx.layer_norm(g, h, "norm")?;
    let features = g.mean_axis(n, 1)?;
    outs.push(features);
    let logits = ctx.linear(g, features, "head")?;
    Ok(ForwardOutput {
        logits,
        features,
        blocks: outs,
        attention,
        bn_updates: Vec::new(),
    })
}
