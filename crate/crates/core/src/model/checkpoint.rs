//! Plain-text checkpoints.
//!
//! ```text
//! lsepool-checkpoint v1
//! config input_size=64
//! …
//! param stem.w 8 1 3 3
//! 3fb99999a0000000 bfd3333340000000 …
//! ```
//!
//! Values are stored as the hex bit pattern of their `f64` widening, so a
//! save/load round trip is exact for both `f32` and `f64` models.

use std::fmt::Write as _;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "lsepool-checkpoint v1";

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    for (k, v) in model.config().to_pairs() {
        let _ = writeln!(out, "config {k}={v}");
    }
    for (name, t) in model.params().iter() {
        let [n, c, h, w] = t.shape();
        let _ = writeln!(out, "param {name} {n} {c} {h} {w}");
        let words: Vec<String> = t.data().iter().map(|v| format!("{:016x}", v.f64().to_bits())).collect();
        for chunk in words.chunks(8) {
            let _ = writeln!(out, "{}", chunk.join(" "));
        }
    }
    out
}

/// Rebuilds a model from [`encode_checkpoint`] output. `origin` only labels
/// error messages.
pub fn decode_checkpoint<T: Scalar>(text: &str, origin: &Path) -> Result<Model<T>> {
    let err = |line: usize, detail: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        detail,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).peekable();
    match lines.next() {
        Some((_, CHECKPOINT_MAGIC)) => {}
        Some((n, other)) => return Err(err(n, format!("expected `{CHECKPOINT_MAGIC}`, found `{other}`"))),
        None => return Err(err(1, "empty checkpoint".into())),
    }

    let mut config = ModelConfig::default();
    while let Some(&(n, line)) = lines.peek() {
        let Some(rest) = line.strip_prefix("config ") else {
            break;
        };
        let (k, v) = rest
            .split_once('=')
            .ok_or_else(|| err(n, format!("malformed config line `{line}`")))?;
        if !config.set(k, v).map_err(|e| err(n, e.to_string()))? {
            return Err(err(n, format!("unknown config key `{k}`")));
        }
        lines.next();
    }
    let mut model = Model::<T>::build(config).map_err(|e| err(1, e.to_string()))?;

    let mut seen = vec![false; model.params().len()];
    while let Some((n, line)) = lines.next() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != "param" {
            return Err(err(n, format!("expected `param <name> n c h w`, found `{line}`")));
        }
        let name = fields[1];
        let mut shape = [0usize; 4];
        for (d, f) in shape.iter_mut().zip(&fields[2..]) {
            *d = f.parse().map_err(|_| err(n, format!("bad dimension `{f}`")))?;
        }
        let idx = model
            .params()
            .index_of(name)
            .ok_or_else(|| err(n, format!("parameter `{name}` does not exist in this architecture")))?;
        if model.params().get(idx).shape() != shape {
            return Err(err(
                n,
                format!(
                    "parameter `{name}` has shape {shape:?}, architecture expects {:?}",
                    model.params().get(idx).shape()
                ),
            ));
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        while data.len() < len {
            let (m, row) = lines
                .next()
                .ok_or_else(|| err(n, format!("parameter `{name}` truncated")))?;
            for word in row.split_whitespace() {
                let bits = u64::from_str_radix(word, 16).map_err(|_| err(m, format!("bad value `{word}`")))?;
                data.push(T::of(f64::from_bits(bits)));
            }
        }
        if data.len() != len {
            return Err(err(
                n,
                format!("parameter `{name}` has {} values, expected {len}", data.len()),
            ));
        }
        *model.params_mut().get_mut(idx) = Tensor::from_vec(shape, data)?;
        seen[idx] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(err(
            text.lines().count(),
            format!("parameter `{}` missing", model.params().name(i)),
        ));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&text, path)
}
