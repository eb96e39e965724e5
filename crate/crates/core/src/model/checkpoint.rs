//! Checkpoint files.
//!
//! ```text
//! tsbnet-checkpoint 1
//! model.channel_multiplier = 1
//! ...
//! provenance.phase = pretrain
//! momentum_buffers = false
//! tensor shared.conv0 weight 32x2x5x5 f32 0
//! tensor shared.conv0 bias 32 f32 6400
//! ...
//! end
//! <raw little-endian f32 data, concatenated in header order>
//! ```
//!
//! Offsets are byte offsets into the data section. Momentum buffers, when
//! present, follow the same layout with the `momentum` record keyword.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::{Model, ModelConfig, ModelError};
use crate::config::{ConfigError, KeyValues};
use crate::tensor::Scalar;

const MAGIC: &str = "tsbnet-checkpoint 1";
const END: &str = "end";
const BYTES: usize = 4;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint header (line {line}): {reason}")]
    MalformedHeader { line: usize, reason: String },
    #[error("tensor `{name}` has shape {got:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint data truncated: header needs {expected} bytes, file has {got}")]
    Truncated { expected: usize, got: usize },
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A loaded checkpoint: the model plus the free-form provenance block.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub provenance: KeyValues,
    pub has_momentum: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SaveOptions {
    pub momentum: bool,
    /// Stored under `provenance.` in the header (rig, phase, iteration, ...).
    pub provenance: KeyValues,
}

fn split_name(full: &str) -> (&str, &str) {
    full.rsplit_once('.').unwrap_or((full, ""))
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Writes `model` with its parameters rounded to f32.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<(), CheckpointError> {
    save_checkpoint_with(model, path, &SaveOptions::default())
}

pub fn save_checkpoint_with<T: Scalar>(
    model: &Model<T>,
    path: &Path,
    opts: &SaveOptions,
) -> Result<(), CheckpointError> {
    let params = model.named_params();
    let mut header = format!("{MAGIC}\n");
    header.push_str(&model.config().to_kv().with_prefix("model").to_text());
    header.push_str(&opts.provenance.with_prefix("provenance").to_text());
    header.push_str(&format!("momentum_buffers = {}\n", opts.momentum));

    let mut data: Vec<u8> = Vec::new();
    let records = |keyword: &str, header: &mut String, data: &mut Vec<u8>, momentum: bool| {
        for (name, p) in &params {
            let (layer, role) = split_name(name);
            let t = if momentum { &p.velocity } else { &p.value };
            header.push_str(&format!(
                "{keyword} {layer} {role} {} f32 {}\n",
                shape_text(t.shape()),
                data.len()
            ));
            for v in t.data() {
                data.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    };
    records("tensor", &mut header, &mut data, false);
    if opts.momentum {
        records("momentum", &mut header, &mut data, true);
    }
    header.push_str(END);
    header.push('\n');

    let mut file = fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    file.write_all(&data)?;
    file.sync_all()?;
    Ok(())
}

struct Record {
    momentum: bool,
    name: String,
    shape: Vec<usize>,
    offset: usize,
    line: usize,
}

struct Parsed {
    kv: KeyValues,
    records: Vec<Record>,
    data_start: usize,
}

fn malformed(line: usize, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::MalformedHeader {
        line,
        reason: reason.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Parsed, CheckpointError> {
    let mut kv = KeyValues::new();
    let mut records = Vec::new();
    let mut pos = 0;
    let mut line_no = 0;
    let mut next_offset = 0usize;
    loop {
        let rest = &bytes[pos..];
        let eol = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| malformed(line_no + 1, "header ends before `end`"))?;
        let line = std::str::from_utf8(&rest[..eol]).map_err(|_| malformed(line_no + 1, "header is not UTF-8"))?;
        pos += eol + 1;
        line_no += 1;
        if line_no == 1 {
            if line != MAGIC {
                return Err(malformed(1, format!("expected `{MAGIC}`, got {line:?}")));
            }
            continue;
        }
        if line == END {
            break;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.first().copied() {
            Some(kw @ ("tensor" | "momentum")) => {
                let [_, layer, role, shape, dtype, offset] = words[..] else {
                    return Err(malformed(line_no, "expected `<kind> <layer> <role> <shape> f32 <offset>`"));
                };
                if dtype != "f32" {
                    return Err(malformed(line_no, format!("unsupported numeric type `{dtype}`")));
                }
                let shape = shape
                    .split('x')
                    .map(str::parse)
                    .collect::<Result<Vec<usize>, _>>()
                    .map_err(|_| malformed(line_no, format!("bad shape `{shape}`")))?;
                let offset: usize = offset
                    .parse()
                    .map_err(|_| malformed(line_no, format!("bad offset `{offset}`")))?;
                if offset != next_offset {
                    return Err(malformed(
                        line_no,
                        format!("offset {offset} breaks the monotone layout (expected {next_offset})"),
                    ));
                }
                next_offset += shape.iter().product::<usize>() * BYTES;
                records.push(Record {
                    momentum: kw == "momentum",
                    name: format!("{layer}.{role}"),
                    shape,
                    offset,
                    line: line_no,
                });
            }
            _ => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| malformed(line_no, format!("unrecognized line {line:?}")))?;
                kv.set(k.trim(), v.trim());
            }
        }
    }
    Ok(Parsed {
        kv,
        records,
        data_start: pos,
    })
}

/// Loads a checkpoint, rebuilding the model from its embedded config.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    load_inner(path, None)
}

/// Loads a checkpoint into a model built from `config`; shapes must agree.
pub fn load_checkpoint_with_config(path: &Path, config: &ModelConfig) -> Result<Checkpoint, CheckpointError> {
    load_inner(path, Some(config))
}

fn load_inner(path: &Path, config: Option<&ModelConfig>) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    let parsed = parse_header(&bytes)?;
    let stored = {
        let mut cfg = ModelConfig::default();
        cfg.apply_kv(&parsed.kv.section("model"))?;
        cfg
    };
    let has_momentum = match parsed.kv.get("momentum_buffers") {
        Some("true") => true,
        Some("false") | None => false,
        Some(other) => return Err(malformed(0, format!("momentum flag must be true or false, got {other:?}"))),
    };
    let mut model = Model::<f32>::build(config.unwrap_or(&stored), 0)?;

    let data = &bytes[parsed.data_start..];
    let needed: usize = parsed
        .records
        .iter()
        .map(|r| r.shape.iter().product::<usize>() * BYTES)
        .sum();
    if data.len() < needed {
        return Err(CheckpointError::Truncated {
            expected: needed,
            got: data.len(),
        });
    }
    if data.len() > needed {
        return Err(malformed(0, format!("{} bytes of data beyond the last tensor", data.len() - needed)));
    }

    let mut params = model.named_params_mut();
    let expected_records = params.len() * if has_momentum { 2 } else { 1 };
    let mut seen = vec![[false; 2]; params.len()];
    for r in &parsed.records {
        if r.momentum && !has_momentum {
            return Err(malformed(r.line, "momentum record without the momentum flag"));
        }
        let idx = params
            .iter()
            .position(|(n, _)| *n == r.name)
            .ok_or_else(|| malformed(r.line, format!("unknown tensor `{}`", r.name)))?;
        let slot = &mut seen[idx][usize::from(r.momentum)];
        if *slot {
            return Err(malformed(r.line, format!("duplicate tensor `{}`", r.name)));
        }
        *slot = true;
        let p = &mut params[idx].1;
        if p.shape() != r.shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: r.name.clone(),
                expected: p.shape().to_vec(),
                got: r.shape.clone(),
            });
        }
        let target = if r.momentum { &mut p.velocity } else { &mut p.value };
        let raw = &data[r.offset..r.offset + target.len() * BYTES];
        for (dst, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(BYTES)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("chunk of four bytes"));
        }
    }
    if parsed.records.len() != expected_records {
        let missing = params
            .iter()
            .zip(&seen)
            .find(|(_, s)| !s[0] || (has_momentum && !s[1]))
            .map(|((n, _), _)| n.clone())
            .unwrap_or_default();
        return Err(malformed(0, format!("missing tensor `{missing}`")));
    }
    drop(params);
    Ok(Checkpoint {
        model,
        provenance: parsed.kv.section("provenance"),
        has_momentum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn small() -> ModelConfig {
        ModelConfig {
            channel_multiplier: 0.125,
            input_size: 16,
            zero_init_head: false,
            ..ModelConfig::full()
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = Model::<f32>::build(&small(), 3).unwrap();
        for (_, p) in model.named_params_mut() {
            p.velocity.fill(0.5);
        }
        let mut prov = KeyValues::new();
        prov.set("phase", "pretrain");
        save_checkpoint_with(&model, &path, &SaveOptions { momentum: true, provenance: prov }).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.has_momentum);
        assert_eq!(back.provenance.get("phase"), Some("pretrain"));
        assert_eq!(back.model, model);

        let shape = model.input_shape(2);
        let x = Tensor::<f32>::from_fn(&shape, |i| ((i * 37) % 101) as f32 / 101.0);
        let a = model.forward_pixels(&x, &x).unwrap();
        let b = back.model.forward_pixels(&x, &x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn wrong_multiplier_is_a_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let half = ModelConfig {
            channel_multiplier: 0.5,
            ..ModelConfig::full()
        };
        save_checkpoint(&Model::<f32>::build(&half, 0).unwrap(), &path).unwrap();
        assert!(matches!(
            load_checkpoint_with_config(&path, &ModelConfig::full()),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    fn corrupt(edit: impl Fn(&mut Vec<u8>)) -> CheckpointError {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Model::<f32>::build(&small(), 0).unwrap(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        edit(&mut bytes);
        fs::write(&path, bytes).unwrap();
        load_checkpoint(&path).unwrap_err()
    }

    fn replace(bytes: &mut Vec<u8>, from: &str, to: &str) {
        let text = String::from_utf8_lossy(bytes).into_owned();
        let at = text.find(from).expect("pattern present");
        bytes.splice(at..at + from.len(), to.bytes());
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(
            corrupt(|b| {
                let n = b.len();
                b.truncate(n - 10)
            }),
            CheckpointError::Truncated { .. }
        ));
        // The second record's offset swapped for zero: no longer increasing.
        assert!(matches!(
            corrupt(|b| replace(b, "bias 4 f32 800", "bias 4 f32 0")),
            CheckpointError::MalformedHeader { .. }
        ));
        assert!(matches!(
            corrupt(|b| replace(b, "tsbnet-checkpoint 1", "not-a-checkpoint")),
            CheckpointError::MalformedHeader { line: 1, .. }
        ));
        assert!(matches!(
            corrupt(|b| replace(b, "f32 0", "f64 0")),
            CheckpointError::MalformedHeader { .. }
        ));
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/x.ckpt")),
            Err(CheckpointError::Io(_))
        ));
    }
}
