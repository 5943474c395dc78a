//! Weight file format.
//!
//! ```text
//! NAMSEG01                 8 magic bytes
//! input_size=64x64\n       config as key=value lines, UTF-8
//! stage_channels=16,32,64\n
//! gap_taps=2\n
//! head_channels=32\n
//! num_classes=2\n
//! head_lr_multiplier=10\n
//! \n                       blank line ends the header
//! <f64 LE>...              every parameter in declaration order
//! ```
//!
//! The body length is fixed by the config; short or long bodies are rejected.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NAMSEG01";

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn header(cfg: &ModelConfig) -> String {
    format!(
        "input_size={}x{}\nstage_channels={}\ngap_taps={}\nhead_channels={}\nnum_classes={}\nhead_lr_multiplier={}\n\n",
        cfg.input_size.0,
        cfg.input_size.1,
        join(&cfg.stage_channels),
        join(&cfg.gap_taps),
        cfg.head_channels,
        cfg.num_classes,
        cfg.head_lr_multiplier,
    )
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(header(model.config()).as_bytes());
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Format(format!("bad {key} entry {s:?}"))))
        .collect()
}

fn parse_header(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    let mut seen = Vec::new();
    for line in text.lines() {
        let (key, value) =
            line.split_once('=').ok_or_else(|| Error::Format(format!("header line {line:?} is not key=value")))?;
        let bad = || Error::Format(format!("bad value for {key}: {value:?}"));
        match key {
            "input_size" => {
                let (h, w) = value.split_once('x').ok_or_else(bad)?;
                cfg.input_size = (h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?);
            }
            "stage_channels" => cfg.stage_channels = parse_list(key, value)?,
            "gap_taps" => cfg.gap_taps = parse_list(key, value)?,
            "head_channels" => cfg.head_channels = value.parse().map_err(|_| bad())?,
            "num_classes" => cfg.num_classes = value.parse().map_err(|_| bad())?,
            "head_lr_multiplier" => cfg.head_lr_multiplier = value.parse().map_err(|_| bad())?,
            other => return Err(Error::Format(format!("unknown header key {other:?}"))),
        }
        seen.push(key);
    }
    for required in ["input_size", "stage_channels", "gap_taps", "head_channels", "num_classes"] {
        if !seen.contains(&required) {
            return Err(Error::Format(format!("header is missing {required}")));
        }
    }
    cfg.validate().map_err(|e| Error::Format(format!("header describes an invalid model: {e}")))?;
    Ok(cfg)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format(format!(
            "not a weight file: expected magic {:?}",
            std::str::from_utf8(MAGIC).expect("ascii magic")
        )));
    }
    let rest = &bytes[MAGIC.len()..];
    let end = rest
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Format("header is not terminated by a blank line".into()))?;
    let text = std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let cfg = parse_header(text)?;
    let body = &rest[end + 2..];

    let mut model = Model::zeros(cfg)?;
    let expected: usize = model.params().iter().map(|p| p.len() * 8).sum();
    if body.len() != expected {
        return Err(Error::Format(format!(
            "parameter block has {} bytes, the declared config needs {expected}",
            body.len()
        )));
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(model)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}
