//! Plain-text model checkpoints.
//!
//! ```text
//! relaykd-checkpoint v1
//! tensors 4
//! hidden.0.weight 2 84 784
//! <values, space separated, shortest round-trip decimal>
//! hidden.0.bias 1 84
//! ...
//! ```
//!
//! Tensors appear in [`ModelParams::tensors`] order; values round-trip exactly.

use std::fmt::Write as _;
use std::path::Path;

use super::model::{Dense, ModelParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "relaykd-checkpoint v1";

pub fn to_string(params: &ModelParams) -> String {
    let mut out = String::new();
    let tensors = params.tensors();
    writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
    writeln!(out, "tensors {}", tensors.len()).unwrap();
    for (name, t) in params.tensor_names().iter().zip(tensors) {
        write!(out, "{name} {}", t.shape().len()).unwrap();
        for d in t.shape() {
            write!(out, " {d}").unwrap();
        }
        out.push('\n');
        let values: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&values.join(" "));
        out.push('\n');
    }
    out
}

pub fn from_str(text: &str) -> Result<ModelParams> {
    let bad = |line: usize, msg: String| Error::Format {
        path: "<checkpoint>".into(),
        offset: line as u64,
        message: msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
        _ => return Err(bad(0, format!("missing magic line `{CHECKPOINT_MAGIC}`"))),
    }
    let (ln, count_line) = lines.next().ok_or_else(|| bad(1, "missing tensor count".into()))?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| bad(ln, format!("bad tensor count line `{count_line}`")))?;
    if count < 2 || !count.is_multiple_of(2) {
        return Err(bad(ln, format!("expected an even tensor count >= 2, got {count}")));
    }

    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, header) = lines.next().ok_or_else(|| bad(ln, "truncated checkpoint".into()))?;
        let mut parts = header.split_whitespace();
        let _name = parts.next().ok_or_else(|| bad(ln, "empty tensor header".into()))?;
        let rank: usize = parts
            .next()
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| bad(ln, "bad rank".into()))?;
        let shape: Vec<usize> = parts.map(|d| d.parse().map_err(|_| bad(ln, format!("bad dim `{d}`")))).collect::<Result<_>>()?;
        if shape.len() != rank {
            return Err(bad(ln, format!("rank {rank} but {} dims", shape.len())));
        }
        let (vln, body) = lines.next().ok_or_else(|| bad(ln + 1, "missing tensor values".into()))?;
        let data: Vec<f64> = body
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad(vln, format!("bad value `{v}`"))))
            .collect::<Result<_>>()?;
        tensors.push(Tensor::new(shape, data).map_err(|e| bad(vln, e.to_string()))?);
    }

    let mut layers: Vec<Dense> = tensors
        .chunks_exact(2)
        .map(|pair| Dense {
            weight: pair[0].clone(),
            bias: pair[1].clone(),
        })
        .collect();
    let head = layers.pop().expect("count >= 2");
    let params = ModelParams { hidden: layers, head };
    params.validate()?;
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    from_str(&std::fs::read_to_string(path)?)
}
