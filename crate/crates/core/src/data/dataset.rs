//! Dataset directories and mask files.
//!
//! ```text
//! <dir>/images/NNNNNN.pgm    16-bit raw PGM, one per sample
//! <dir>/labels.csv           id,label    (label: nodule | no_nodule)
//! <dir>/splits.csv           id,split    (split: train | val | test), optional
//! <dir>/truth/NNNNNN.masks   nodule masks, positives only
//! <dir>/manifest.txt         key=value echo of the generating run
//! ```
//!
//! Mask files are run-length text: a `masks H W N` line, then one line per
//! mask listing `row,col,len` runs separated by spaces. An empty mask is an
//! empty line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{read_pgm, write_pgm, Sample, Split};
use crate::error::{Error, Result};
use crate::model::Label;
use crate::region::{Pixel, PixelSet};

#[derive(Clone, Debug, PartialEq)]
pub struct MaskFile {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<PixelSet>,
}

fn runs(mask: &PixelSet) -> String {
    let mut out = String::new();
    let mut px = mask.iter().peekable();
    while let Some(start) = px.next() {
        let mut len = 1;
        while px.peek() == Some(&Pixel::new(start.row, start.col + len)) {
            px.next();
            len += 1;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        write!(out, "{},{},{}", start.row, start.col, len).expect("string write");
    }
    out
}

pub fn write_masks(file: &MaskFile, path: impl AsRef<Path>) -> Result<()> {
    let mut text = format!("masks {} {} {}\n", file.height, file.width, file.masks.len());
    for m in &file.masks {
        if !m.all_within(file.height, file.width) {
            return Err(Error::Geometry(format!("mask leaves the {}x{} frame", file.height, file.width)));
        }
        text.push_str(&runs(m));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn parse_masks(text: &str) -> Result<MaskFile> {
    let bad = |m: &str| Error::Format(format!("mask file: {m}"));
    let mut lines = text.split('\n');
    let head: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    let [tag, h, w, n] = head.as_slice() else { return Err(bad("expected `masks H W N` header")) };
    if *tag != "masks" {
        return Err(bad("expected `masks H W N` header"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number {s:?}")));
    let (height, width, n) = (num(h)?, num(w)?, num(n)?);
    let mut masks = Vec::with_capacity(n);
    for _ in 0..n {
        let line = lines.next().ok_or_else(|| bad("fewer mask lines than declared"))?;
        let mut px = Vec::new();
        for run in line.split_whitespace() {
            let parts: Vec<&str> = run.split(',').collect();
            let [r, c, len] = parts.as_slice() else { return Err(bad(&format!("bad run {run:?}"))) };
            let (r, c, len) = (num(r)?, num(c)?, num(len)?);
            if r >= height || len == 0 || c + len > width {
                return Err(bad(&format!("run {run:?} leaves the {height}x{width} frame")));
            }
            px.extend((c..c + len).map(|c| Pixel::new(r, c)));
        }
        masks.push(px.into_iter().collect());
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(bad("more mask lines than declared"));
    }
    Ok(MaskFile { height, width, masks })
}

pub fn read_masks(path: impl AsRef<Path>) -> Result<MaskFile> {
    parse_masks(&fs::read_to_string(path)?)
}

pub fn image_name(id: usize) -> String {
    format!("{id:06}.pgm")
}

pub fn mask_name(id: usize) -> String {
    format!("{id:06}.masks")
}

/// A dataset read back from disk. Images carry 16-bit quantization.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: Option<Split>,
}

impl Dataset {
    pub fn subset(&self, which: &[usize]) -> Vec<&Sample> {
        which.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn position_of(&self, id: usize) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }
}

/// Writes images, labels, truth and (if given) the split. `split` holds
/// positions into `samples`. The manifest is the caller's business.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample], split: Option<&Split>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("truth"))?;
    let mut labels = String::from("id,label\n");
    for s in samples {
        write_pgm(&s.image, dir.join("images").join(image_name(s.id)))?;
        writeln!(labels, "{},{}", s.id, s.label).expect("string write");
        if !s.truth_masks.is_empty() {
            let [_, h, w] = *s.image.shape() else {
                return Err(Error::Dimension("sample image must be [1,H,W]".into()));
            };
            let file = MaskFile { height: h, width: w, masks: s.truth_masks.clone() };
            write_masks(&file, dir.join("truth").join(mask_name(s.id)))?;
        }
    }
    fs::write(dir.join("labels.csv"), labels)?;
    if let Some(split) = split {
        let names = split.names(samples.len());
        let mut text = String::from("id,split\n");
        for (s, name) in samples.iter().zip(names) {
            let name = name.ok_or_else(|| Error::Data(format!("sample {} is in no split", s.id)))?;
            writeln!(text, "{},{name}", s.id).expect("string write");
        }
        fs::write(dir.join("splits.csv"), text)?;
    }
    Ok(())
}

fn read_csv(path: &Path, header: &str) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(Error::Format(format!("{} must start with `{header}`", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (id, v) = l
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("{}: bad row {l:?}", path.display())))?;
            let id = id.trim().parse().map_err(|_| Error::Format(format!("{}: bad id {id:?}", path.display())))?;
            Ok((id, v.trim().to_string()))
        })
        .collect()
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let rows = read_csv(&dir.join("labels.csv"), "id,label")?;
    let mut samples = Vec::with_capacity(rows.len());
    for (id, label) in rows {
        let label: Label = label.parse()?;
        let image = read_pgm(dir.join("images").join(image_name(id)))?;
        let truth_path = dir.join("truth").join(mask_name(id));
        let truth_masks = if truth_path.exists() { read_masks(truth_path)?.masks } else { Vec::new() };
        if (label == Label::Nodule) != !truth_masks.is_empty() {
            return Err(Error::Data(format!("sample {id}: label {label} disagrees with its truth file")));
        }
        samples.push(Sample { id, image, label, truth_masks });
    }
    let split_path = dir.join("splits.csv");
    let split = if split_path.exists() {
        let pos: BTreeMap<usize, usize> = samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
        let mut split = Split::default();
        for (id, name) in read_csv(&split_path, "id,split")? {
            let &i = pos.get(&id).ok_or_else(|| Error::Data(format!("splits.csv names unknown id {id}")))?;
            match name.as_str() {
                "train" => split.train.push(i),
                "val" => split.val.push(i),
                "test" => split.test.push(i),
                other => return Err(Error::Format(format!("unknown split {other:?}"))),
            }
        }
        Some(split)
    } else {
        None
    };
    Ok(Dataset { samples, split })
}

/// `key=value` lines, in the given order.
pub fn manifest_text(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, split_indices, SyntheticConfig};

    #[test]
    fn mask_runs_round_trip() {
        let a: PixelSet = [(1, 2), (1, 3), (1, 4), (2, 0), (3, 4)].iter().map(|&(r, c)| Pixel::new(r, c)).collect();
        assert_eq!(runs(&a), "1,2,3 2,0,1 3,4,1");
        let file = MaskFile { height: 5, width: 5, masks: vec![a, PixelSet::new()] };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.masks");
        write_masks(&file, &p).unwrap();
        assert_eq!(read_masks(&p).unwrap(), file);
    }

    #[test]
    fn bad_mask_files() {
        for text in ["", "masks 4 4\n", "masks 4 4 1\n0,3,2\n", "masks 4 4 2\n0,0,1", "masks 4 4 1\n0,0\n", "masks 4 4 0\n1,1,1\n"] {
            assert!(matches!(parse_masks(text), Err(Error::Format(_))), "{text:?}");
        }
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = SyntheticConfig { seed: 2, two_nodule_rate: 0.5, ..SyntheticConfig::default() };
        let samples = generate(&cfg, 6, 6).unwrap();
        let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
        let split = split_indices(&labels, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &samples, Some(&split)).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.split.as_ref(), Some(&split));
        for (a, b) in samples.iter().zip(&back.samples) {
            assert_eq!((a.id, a.label, &a.truth_masks), (b.id, b.label, &b.truth_masks));
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 65535.0 + 1e-15);
            }
        }
    }

    #[test]
    fn label_truth_disagreement_is_a_data_error() {
        let samples = generate(&SyntheticConfig::default(), 1, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &samples, None).unwrap();
        fs::write(dir.path().join("labels.csv"), "id,label\n0,no_nodule\n").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Data(_))));
    }
}
