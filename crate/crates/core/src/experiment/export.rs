use std::fmt::Write as _;
use std::path::Path;

use super::{DatasetSource, ExperimentConfig};
use crate::cka::CkaMatrix;
use crate::data::{dump_synthetic, generate_synthetic};
use crate::error::{Error, Result};
use crate::params::{write_atomic, ModelParams, ParamKind};

/// Re-renders a CKA CSV as a PGM heatmap.
pub fn render_heatmap(csv: &Path, pgm: &Path, cell: usize) -> Result<CkaMatrix> {
    let m = CkaMatrix::read_csv(csv)?;
    m.write_pgm(pgm, cell)?;
    Ok(m)
}

/// Text dump of a checkpoint, one tensor per line:
/// `name kind layer d0xd1x.. v0 v1 ..` with values in round-trip form.
pub fn export_checkpoint_text(ckpt: &Path, out: &Path) -> Result<usize> {
    let params = ModelParams::load(ckpt)?;
    let mut s = String::new();
    for p in params.iter() {
        let kind = match p.kind {
            ParamKind::Trainable => "trainable",
            ParamKind::Buffer => "buffer",
        };
        let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        let _ = write!(s, "{} {kind} {} {}", p.name, p.layer, dims.join("x"));
        for v in p.value.data() {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    write_atomic(out, s.as_bytes())?;
    Ok(params.len())
}

/// Writes the configured synthetic dataset in its binary dump format.
pub fn export_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<usize> {
    match &cfg.dataset.source {
        DatasetSource::Synthetic(spec) => {
            let data = generate_synthetic(spec)?;
            dump_synthetic(spec, &data, out)?;
            Ok(data.len())
        }
        DatasetSource::Cifar10 { .. } => Err(Error::config("dataset.kind", "only synthetic datasets can be exported")),
    }
}
