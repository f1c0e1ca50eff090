//! Desk-scale model zoo: a tiny patch transformer, a tiny pre-activation
//! residual CNN and a tiny MLP.
//!
//! Parameters live in a [`ModelParams`] kept separate from the
//! [`Architecture`], so one architecture can evaluate many parameter sets
//! (one per federated client). Every model exposes ordered capture points,
//! one per block output plus the pooled pre-classifier features, and a
//! two-layer projection head used by contrastive training.

mod cnn;
mod init;
mod mlp;
mod spec;
mod vit;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cka::ActivationMatrix;
use crate::error::{Error, Result};
use crate::graph::{Graph, Precision, Var};
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub use spec::{ArchSpec, ModelSpec};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const LN_EPS: f64 = 1e-6;
const BN_MOMENTUM: f64 = 0.1;

/// Batch norm uses batch statistics in `Train` and running statistics in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapturePosition {
    AfterBlockOutput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturePoint {
    pub layer_name: String,
    pub position: CapturePosition,
    pub ordering_index: usize,
}

/// A pending running-statistics update from one training-mode batch norm.
#[derive(Debug, Clone)]
pub(crate) struct BnUpdate {
    node: Var,
    mean_idx: usize,
    var_idx: usize,
}

/// Everything recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Pooled pre-classifier features.
    pub features: Var,
    /// One node per capture point, in capture order.
    pub blocks: Vec<Var>,
    /// Attention weights `[B * heads, T, T]`, one per transformer block.
    pub attention: Vec<Var>,
    pub(crate) bn_updates: Vec<BnUpdate>,
}

/// Stateless description of a network: spec, parameter index, capture points.
#[derive(Debug, Clone)]
pub struct Architecture {
    spec: ModelSpec,
    index: HashMap<String, usize>,
    capture_points: Vec<CapturePoint>,
    num_layers: usize,
}

/// An architecture together with one parameter set.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Architecture,
    pub params: ModelParams,
}

/// Builds a model with deterministic seeded initialization.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = init::ParamBuilder::new();
    let (names, num_layers) = match &spec.arch {
        ArchSpec::TinyVit { .. } => vit::build(spec, &mut b, &mut rng),
        ArchSpec::TinyCnn { .. } => cnn::build(spec, &mut b, &mut rng),
        ArchSpec::TinyMlp { .. } => mlp::build(spec, &mut b, &mut rng),
    };
    let params = ModelParams::new(b.params)?;
    let index = params
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.clone(), i))
        .collect();
    let capture_points = names
        .into_iter()
        .enumerate()
        .map(|(i, layer_name)| CapturePoint {
            layer_name,
            position: CapturePosition::AfterBlockOutput,
            ordering_index: i,
        })
        .collect();
    Ok(Model {
        arch: Architecture {
            spec: spec.clone(),
            index,
            capture_points,
            num_layers,
        },
        params,
    })
}

pub(crate) struct Ctx<'a> {
    pub arch: &'a Architecture,
    pub vars: &'a [Var],
    pub mode: Mode,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn p(&self, name: &str) -> Var {
        self.vars[self.arch.index[name]]
    }

    pub fn linear(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        g.linear(x, w, Some(b))
    }

    pub fn layer_norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"));
        let beta = self.p(&format!("{prefix}.beta"));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    pub fn batch_norm(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"));
        let beta = self.p(&format!("{prefix}.beta"));
        let mean_idx = self.arch.index[&format!("{prefix}.running_mean")];
        let var_idx = self.arch.index[&format!("{prefix}.running_var")];
        match self.mode {
            Mode::Train => {
                let node = g.batch_norm(x, gamma, beta, BN_EPS)?;
                self.bn_updates.push(BnUpdate {
                    node,
                    mean_idx,
                    var_idx,
                });
                Ok(node)
            }
            Mode::Eval => {
                let rm = g.value(self.vars[mean_idx]).data().to_vec();
                let rv = g.value(self.vars[var_idx]).data().to_vec();
                g.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
            }
        }
    }
}

impl Architecture {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn capture_points(&self) -> &[CapturePoint] {
        &self.capture_points
    }

    pub fn capture_index(&self, name: &str) -> Result<usize> {
        self.capture_points
            .iter()
            .position(|c| c.layer_name == name)
            .ok_or_else(|| Error::UnknownCapturePoint(name.to_string()))
    }

    /// Number of block-level layers (the ordering indices used by parameters).
    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Records a forward pass of `x: [m, C, H, W]`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, mode: Mode) -> Result<ForwardOutput> {
        let [c, h, w] = self.spec.input_shape;
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1..] != [c, h, w] || xs[0] == 0 {
            return Err(Error::shape(
                "model input",
                format!("expected [m, {c}, {h}, {w}], got {xs:?}"),
            ));
        }
        let mut ctx = Ctx {
            arch: self,
            vars,
            mode,
            bn_updates: Vec::new(),
        };
        let mut out = match &self.spec.arch {
            ArchSpec::TinyVit { .. } => vit::forward(&mut ctx, g, x)?,
            ArchSpec::TinyCnn { .. } => cnn::forward(&mut ctx, g, x)?,
            ArchSpec::TinyMlp { .. } => mlp::forward(&mut ctx, g, x)?,
        };
        out.bn_updates = ctx.bn_updates;
        g.check()?;
        Ok(out)
    }

    /// Projection head applied to pooled features.
    pub fn project(&self, g: &mut Graph, vars: &[Var], features: Var) -> Result<Var> {
        let ctx = Ctx {
            arch: self,
            vars,
            mode: Mode::Eval,
            bn_updates: Vec::new(),
        };
        let h = ctx.linear(g, features, "proj.fc1")?;
        let h = g.relu(h);
        ctx.linear(g, h, "proj.fc2")
    }

    /// Self-attention sub-layer of transformer block `block` on tokens `[B, T, D]`.
    /// Returns the attention output (before the residual add) and the weights.
    pub fn self_attention(&self, g: &mut Graph, vars: &[Var], block: usize, x: Var) -> Result<(Var, Var)> {
        let ctx = Ctx {
            arch: self,
            vars,
            mode: Mode::Eval,
            bn_updates: Vec::new(),
        };
        vit::attention(&ctx, g, x, block)
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub(crate) fn apply_bn_updates(&self, g: &Graph, out: &ForwardOutput, params: &mut ModelParams) {
        let slice: Vec<_> = params.iter_mut().collect();
        let mut slice = slice;
        for u in &out.bn_updates {
            let (mean, var) = g.batch_stats(u.node).expect("batch norm node");
            let count = {
                let s = g.shape(u.node);
                (s[0] * s[2..].iter().product::<usize>()) as f64
            };
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for (i, &m) in mean.iter().enumerate() {
                let rm = &mut slice[u.mean_idx].value.data_mut()[i];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
            }
            for (i, &v) in var.iter().enumerate() {
                let rv = &mut slice[u.var_idx].value.data_mut()[i];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v * unbias;
            }
        }
    }
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        self.arch.spec()
    }

    /// Same architecture, different parameters.
    pub fn with_params(&self, params: ModelParams) -> Result<Model> {
        self.params.check_same_layout(&params)?;
        Ok(Model {
            arch: self.arch.clone(),
            params,
        })
    }

    /// Eval-mode logits.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_capture(batch, &[])?.0)
    }

    /// Eval-mode logits plus flattened activations at the named capture points.
    pub fn forward_with_capture(&self, batch: &Tensor, points: &[&str]) -> Result<(Tensor, Vec<ActivationMatrix>)> {
        let idx = points
            .iter()
            .map(|p| self.arch.capture_index(p))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::with_precision(Precision::F64);
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let out = self.arch.forward(&mut g, &vars, x, Mode::Eval)?;
        let acts = idx
            .iter()
            .zip(points)
            .map(|(&i, name)| ActivationMatrix::new(name, g.value(out.blocks[i]).clone().flatten_rows(), 0))
            .collect::<Result<Vec<_>>>()?;
        Ok((g.value(out.logits).clone(), acts))
    }

    /// Eval-mode projected representation `[m, proj_dim]`.
    pub fn representation(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let out = self.arch.forward(&mut g, &vars, x, Mode::Eval)?;
        let z = self.arch.project(&mut g, &vars, out.features)?;
        Ok(g.value(z).clone())
    }
}
