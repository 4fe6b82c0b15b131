//! Versioned text checkpoints.
//!
//! ```text
//! DGA-CHECKPOINT 1
//! input_dim = 1433
//! mode = DGA
//! ...                      (every training key, one per line)
//! tensors = 12
//! param layer0.w 1433 64
//! 0.0123 -0.004 ...        (rows * cols values, row-major, one line)
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip formatting, so a save and load
//! reproduces every parameter bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;
use crate::train::{TrainConfig, TRAIN_KEYS};

pub const MAGIC: &str = "DGA-CHECKPOINT";
pub const VERSION: u32 = 1;

pub fn to_string(params: &ModelParams, cfg: &TrainConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "input_dim = {}", params.config.input_dim);
    for (k, _) in TRAIN_KEYS {
        let _ = writeln!(out, "{k} = {}", cfg.get(k).expect("listed key"));
    }
    let _ = writeln!(out, "tensors = {}", params.tensors.len());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        let _ = writeln!(out, "param {name} {} {}", t.rows(), t.cols());
        let mut first = true;
        for v in t.data() {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

pub fn save(path: &Path, params: &ModelParams, cfg: &TrainConfig) -> Result<()> {
    fs::write(path, to_string(params, cfg)).map_err(|e| Error::io(path, e))
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("line {line}: {msg}"))
}

pub fn from_str(text: &str) -> Result<(ModelParams, TrainConfig)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(bad(1, "not a checkpoint"));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(1, "missing version"))?;
    if version != VERSION {
        return Err(bad(1, format!("unsupported version {version}")));
    }

    let mut cfg = TrainConfig::default();
    let mut input_dim = None;
    let count: usize;
    loop {
        let (ln, line) = lines.next().ok_or_else(|| bad(0, "truncated header"))?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(ln, "expected key = value"))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "input_dim" => input_dim = Some(v.parse().map_err(|e| bad(ln, e))?),
            "tensors" => {
                count = v.parse().map_err(|e| bad(ln, e))?;
                break;
            }
            _ => cfg.set(k, v).map_err(|e| bad(ln, e))?,
        }
    }
    let input_dim = input_dim.ok_or_else(|| bad(0, "missing input_dim"))?;

    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, head) = lines
            .next()
            .ok_or_else(|| bad(0, "missing tensor header"))?;
        let f: Vec<&str> = head.split_whitespace().collect();
        if f.len() != 4 || f[0] != "param" {
            return Err(bad(ln, "expected 'param name rows cols'"));
        }
        let rows: usize = f[2].parse().map_err(|e| bad(ln, e))?;
        let cols: usize = f[3].parse().map_err(|e| bad(ln, e))?;
        let (vln, body) = lines.next().unwrap_or((ln + 1, ""));
        let data = body
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(vln, e))?;
        let t = Tensor::from_vec(rows, cols, data).map_err(|e| bad(vln, e))?;
        named.push((f[1].to_string(), t));
    }
    let params = ModelParams::from_named(cfg.model_config(input_dim), named)?;
    Ok((params, cfg))
}

pub fn load(path: &Path) -> Result<(ModelParams, TrainConfig)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text)
}
