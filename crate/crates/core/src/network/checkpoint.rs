//! Checkpoint files: a text manifest (magic line, hyperparameters, one
//! `param <name> <dims..>` line per tensor in canonical order), a blank
//! line, then every tensor's values as little-endian `f32`.

use std::fs;
use std::path::Path;

use super::params::{ModelParams, CANONICAL_NAMES};
use super::{HyperParams, NetworkError};
use crate::numerics::Tensor;

const MAGIC: &str = "seqsleep-checkpoint 1";

fn malformed(msg: impl Into<String>) -> NetworkError {
    NetworkError::MalformedCheckpoint(msg.into())
}

pub fn encode_checkpoint(hp: &HyperParams, params: &ModelParams<f32>) -> Vec<u8> {
    let mut head = String::new();
    head.push_str(MAGIC);
    head.push('\n');
    for (k, v) in [
        ("n_freq", hp.n_freq.to_string()),
        ("n_filters", hp.n_filters.to_string()),
        ("ernn_hidden", hp.ernn_hidden.to_string()),
        ("attention_size", hp.attention_size.to_string()),
        ("seqrnn_hidden", hp.seqrnn_hidden.to_string()),
        ("seq_len", hp.seq_len.to_string()),
        ("dropout", format!("{:?}", hp.dropout)),
        ("l2", format!("{:?}", hp.l2)),
    ] {
        head.push_str(&format!("{k} {v}\n"));
    }
    for (name, t) in params.named() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        head.push_str(&format!("param {name} {}\n", dims.join(" ")));
    }
    head.push('\n');
    let mut out = head.into_bytes();
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(HyperParams, ModelParams<f32>), NetworkError> {
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| malformed("missing header terminator"))?;
    let head = std::str::from_utf8(&bytes[..split]).map_err(|_| malformed("header is not UTF-8"))?;
    let mut blob = &bytes[split + 2..];
    let mut lines = head.lines();
    if lines.next() != Some(MAGIC) {
        return Err(malformed("bad magic line"));
    }
    let mut hp = HyperParams::default();
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        let key = parts.next().ok_or_else(|| malformed("empty header line"))?;
        let rest: Vec<&str> = parts.collect();
        let one = || -> Result<&str, NetworkError> {
            match rest.as_slice() {
                [v] => Ok(v),
                _ => Err(malformed(format!("field {key} needs one value"))),
            }
        };
        let int = |s: &str| s.parse::<usize>().map_err(|_| malformed(format!("bad integer {s:?} for {key}")));
        let float = |s: &str| s.parse::<f64>().map_err(|_| malformed(format!("bad number {s:?} for {key}")));
        match key {
            "n_freq" => hp.n_freq = int(one()?)?,
            "n_filters" => hp.n_filters = int(one()?)?,
            "ernn_hidden" => hp.ernn_hidden = int(one()?)?,
            "attention_size" => hp.attention_size = int(one()?)?,
            "seqrnn_hidden" => hp.seqrnn_hidden = int(one()?)?,
            "seq_len" => hp.seq_len = int(one()?)?,
            "dropout" => hp.dropout = float(one()?)?,
            "l2" => hp.l2 = float(one()?)?,
            "param" => {
                let (name, dims) = rest.split_first().ok_or_else(|| malformed("param line without name"))?;
                let dims = dims.iter().map(|d| int(d)).collect::<Result<Vec<_>, _>>()?;
                shapes.push((name.to_string(), dims));
            }
            other => return Err(malformed(format!("unknown field {other:?}"))),
        }
    }
    hp.validate()?;
    if shapes.len() != CANONICAL_NAMES.len() {
        return Err(malformed(format!(
            "expected {} tensors, found {}",
            CANONICAL_NAMES.len(),
            shapes.len()
        )));
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    for ((name, dims), expected) in shapes.into_iter().zip(CANONICAL_NAMES) {
        if name != expected {
            return Err(malformed(format!("expected tensor {expected}, found {name}")));
        }
        let n: usize = dims.iter().product();
        if blob.len() < 4 * n {
            return Err(malformed(format!("data ends inside tensor {name}")));
        }
        let (chunk, rest) = blob.split_at(4 * n);
        blob = rest;
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(Tensor::new(dims, data)?);
    }
    if !blob.is_empty() {
        return Err(malformed(format!("{} trailing bytes", blob.len())));
    }
    let params = ModelParams::from_tensors(&hp, tensors)?;
    Ok((hp, params))
}

pub fn save_checkpoint(path: &Path, hp: &HyperParams, params: &ModelParams<f32>) -> Result<(), NetworkError> {
    fs::write(path, encode_checkpoint(hp, params)).map_err(|source| NetworkError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(HyperParams, ModelParams<f32>), NetworkError> {
    let bytes = fs::read(path).map_err(|source| NetworkError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
