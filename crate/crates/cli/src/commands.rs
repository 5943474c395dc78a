use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use namseg::data::{self, manifest_text, mask_name, read_dataset, read_masks, write_masks, Dataset, MaskFile, SyntheticConfig};
use namseg::eval::{self, DetectionRule, DEFAULT_BIN_EDGES};
use namseg::model::{self, deepest_taps, train_with, LabeledImage, TrainConfig};
use namseg::nam::write_matrix;
use namseg::segment::{
    segment_slice, segment_two_nodules, IcmConfig, ScopeConfig, SegmentConfig, SliceOutcome, TwoNoduleOutcome,
};
use namseg::{Label, Model, ModelConfig, PixelSet};

use crate::args::{EvalArgs, SegmentArgs, SynthArgs, TrainArgs};

type Manifest = Vec<(String, String)>;

fn entry(m: &mut Manifest, key: &str, value: impl ToString) {
    m.push((key.to_string(), value.to_string()));
}

fn write_manifest(dir: &Path, command: &str, m: &Manifest) -> Result<()> {
    let mut all = vec![("command".to_string(), command.to_string()), ("version".into(), env!("CARGO_PKG_VERSION").into())];
    all.extend(m.iter().cloned());
    fs::write(dir.join("manifest.txt"), manifest_text(&all)).context("writing manifest")?;
    Ok(())
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "default".to_string(), ToString::to_string)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        image_size: (a.size, a.size),
        background_level: a.background_level,
        noise_sigma: a.noise_sigma,
        lung_texture: a.lung_texture,
        nodule_radius_range: (a.radius_min, a.radius_max),
        nodule_contrast_range: (a.contrast_min, a.contrast_max),
        decoy_rate: a.decoy_rate,
        two_nodule_rate: a.two_nodule_rate,
        seed: a.seed,
    };
    let split_seed = a.split_seed.unwrap_or(a.seed);
    let samples = data::generate(&cfg, a.pos, a.neg)?;
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let split = data::split_indices(&labels, split_seed)?;
    let out = &a.common.out;
    data::write_dataset(out, &samples, Some(&split))?;

    let mut m = Manifest::new();
    entry(&mut m, "seed", a.seed);
    entry(&mut m, "split_seed", split_seed);
    entry(&mut m, "split_ratio", "4:1:1");
    entry(&mut m, "pos", a.pos);
    entry(&mut m, "neg", a.neg);
    entry(&mut m, "image_size", format!("{}x{}", a.size, a.size));
    entry(&mut m, "background_level", cfg.background_level);
    entry(&mut m, "noise_sigma", cfg.noise_sigma);
    entry(&mut m, "lung_texture", cfg.lung_texture);
    entry(&mut m, "nodule_radius_range", format!("{},{}", a.radius_min, a.radius_max));
    entry(&mut m, "nodule_contrast_range", format!("{},{}", a.contrast_min, a.contrast_max));
    entry(&mut m, "decoy_rate", cfg.decoy_rate);
    entry(&mut m, "two_nodule_rate", cfg.two_nodule_rate);
    entry(&mut m, "train", split.train.len());
    entry(&mut m, "val", split.val.len());
    entry(&mut m, "test", split.test.len());
    write_manifest(out, "synth", &m)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn split_part<'a>(ds: &'a Dataset, name: &str) -> Result<&'a [usize]> {
    let split = ds.split.as_ref().context("dataset has no splits.csv")?;
    Ok(match name {
        "train" => &split.train,
        "val" => &split.val,
        "test" => &split.test,
        other => bail!("unknown split {other:?}; expected train, val or test"),
    })
}

/// Reads a `key=value` manifest into a map.
fn read_manifest(path: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let gaps = usize::from(a.gap_taps);
    let mcfg = ModelConfig {
        stage_channels: a.channels.clone(),
        gap_taps: deepest_taps(a.channels.len(), gaps)?,
        head_channels: a.head_channels,
        head_lr_multiplier: a.head_lr_multiplier,
        input_size: match ds.samples.first() {
            Some(s) => (s.image.shape()[1], s.image.shape()[2]),
            None => bail!("dataset is empty"),
        },
        ..ModelConfig::default()
    };
    let defaults = TrainConfig::for_gap_count(gaps);
    let tcfg = TrainConfig {
        initial_lr: a.lr.unwrap_or(defaults.initial_lr),
        lr_decay_per_epoch: a.lr_decay.unwrap_or(defaults.lr_decay_per_epoch),
        momentum: a.momentum.unwrap_or(defaults.momentum),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        seed: a.seed,
    };
    let pairs = |idx: &[usize]| -> Vec<LabeledImage<'_>> {
        idx.iter().map(|&i| LabeledImage { image: &ds.samples[i].image, label: ds.samples[i].label }).collect()
    };
    let train_set = pairs(split_part(&ds, "train")?);
    let val_set = pairs(split_part(&ds, "val")?);

    let out = &a.common.out;
    fs::create_dir_all(out)?;
    let start = Model::build(mcfg.clone(), a.seed)?;
    let mut log = String::from("epoch,lr,train_loss,train_accuracy,val_accuracy\n");
    let outcome = train_with(&start, &train_set, &val_set, &tcfg, |e| {
        writeln!(log, "{},{:e},{:.6},{:.6},{:.6}", e.epoch, e.lr, e.train_loss, e.train_accuracy, e.val_accuracy)
            .expect("string write");
        eprintln!("epoch {:>3}  loss {:.4}  train {:.3}  val {:.3}", e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy);
    })?;
    fs::write(out.join("train_log.csv"), log)?;
    model::save(&outcome.model, out.join("model.nsw"))?;

    let mut m = Manifest::new();
    entry(&mut m, "seed", a.seed);
    entry(&mut m, "data", a.data.display());
    entry(&mut m, "gap_count", gaps);
    entry(&mut m, "gap_taps", join(&mcfg.gap_taps));
    entry(&mut m, "stage_channels", join(&mcfg.stage_channels));
    entry(&mut m, "head_channels", mcfg.head_channels);
    entry(&mut m, "head_lr_multiplier", mcfg.head_lr_multiplier);
    entry(&mut m, "initial_lr", format!("{:e}", tcfg.initial_lr));
    entry(&mut m, "lr_decay_per_epoch", tcfg.lr_decay_per_epoch);
    entry(&mut m, "momentum", tcfg.momentum);
    entry(&mut m, "batch_size", tcfg.batch_size);
    entry(&mut m, "epochs", tcfg.epochs);
    entry(&mut m, "best_epoch", outcome.best_epoch);
    entry(&mut m, "best_val_accuracy", outcome.log[outcome.best_epoch].val_accuracy);
    write_manifest(out, "train", &m)?;
    println!("best epoch {} (val accuracy {:.4})", outcome.best_epoch, outcome.log[outcome.best_epoch].val_accuracy);
    Ok(())
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn load_model(path: &Path) -> Result<Model> {
    model::load(path).with_context(|| format!("loading weights {}", path.display()))
}

fn mask_file(image: &namseg::Tensor, masks: Vec<PixelSet>) -> MaskFile {
    MaskFile { height: image.shape()[1], width: image.shape()[2], masks }
}

pub fn segment(a: &SegmentArgs) -> Result<()> {
    let one = load_model(&a.model)?;
    let multi = a.multi_model.as_deref().map(load_model).transpose()?;
    let ds = load_dataset(&a.data)?;
    let which = split_part(&ds, &a.split)?;
    let fill_value = match a.fill_value {
        Some(v) => v,
        None => read_manifest(&a.data.join("manifest.txt"))
            .get("background_level")
            .and_then(|v| v.parse().ok())
            .unwrap_or(SyntheticConfig::default().background_level),
    };
    let default_icm = IcmConfig::default();
    let cfg = SegmentConfig {
        scope: ScopeConfig { tau: a.tau },
        icm: IcmConfig {
            phases: a.phases,
            beta: a.beta,
            beta_cap: a.beta_cap.unwrap_or(default_icm.beta_cap),
            max_iters: a.max_iters,
            window_margin: a.window_margin,
        },
        min_area: a.min_area,
        fill_value,
        coarse_only: a.coarse_only,
    };
    cfg.validate()?;

    let out = &a.common.out;
    let pred_dir = out.join("pred");
    fs::create_dir_all(&pred_dir)?;
    if a.dump_nam {
        fs::create_dir_all(out.join("nam"))?;
    }
    if a.dump_phases {
        fs::create_dir_all(out.join("phases"))?;
    }
    let mut log = String::new();
    let (mut n_masks, mut n_failed) = (0, 0);
    for &i in which {
        let s = &ds.samples[i];
        write!(log, "id={:06}", s.id).expect("string write");
        if a.two_nodule {
            let outcome = segment_two_nodules(&one, multi.as_ref(), &s.image, &cfg)?;
            match &outcome {
                TwoNoduleOutcome::NoNodule(c) => {
                    write!(log, " label={} p={:.6} outcome=no_nodule", c.label, c.nodule_probability)
                }
                TwoNoduleOutcome::DetectionFailed { classification: c, reason } => {
                    n_failed += 1;
                    write!(log, " label={} p={:.6} outcome=failed reason={:?}", c.label, c.nodule_probability, reason)
                }
                TwoNoduleOutcome::Segmented { classification: c, blobs } => {
                    let parts: Vec<String> = blobs
                        .iter()
                        .map(|b| format!("{}:{}/{}", b.scope.origin.as_str(), b.selected, b.candidates.len()))
                        .collect();
                    write!(
                        log,
                        " label={} p={:.6} outcome=segmented blobs={} scopes={}",
                        c.label,
                        c.nodule_probability,
                        blobs.len(),
                        parts.join(",")
                    )
                }
            }
            .expect("string write");
            let masks: Vec<PixelSet> = outcome.masks().into_iter().cloned().collect();
            if !masks.is_empty() {
                n_masks += 1;
                write_masks(&mask_file(&s.image, masks), pred_dir.join(mask_name(s.id)))?;
            }
        } else {
            let outcome = segment_slice(&one, multi.as_ref(), &s.image, &cfg)?;
            let c = outcome.classification();
            write!(log, " label={} p={:.6}", c.label, c.nodule_probability).expect("string write");
            match &outcome {
                SliceOutcome::NoNodule(_) => log.push_str(" outcome=no_nodule"),
                SliceOutcome::DetectionFailed { reason, .. } => {
                    n_failed += 1;
                    write!(log, " outcome=failed reason={reason:?}").expect("string write");
                }
                SliceOutcome::Segmented(seg) => {
                    let selected = seg.selected.map_or_else(|| "coarse".to_string(), |k| k.to_string());
                    write!(
                        log,
                        " outcome=segmented scope={} candidates={} selected={} area={}",
                        seg.scope.origin.as_str(),
                        seg.candidates.len(),
                        selected,
                        seg.mask.len()
                    )
                    .expect("string write");
                    n_masks += 1;
                    write_masks(&mask_file(&s.image, vec![seg.mask.clone()]), pred_dir.join(mask_name(s.id)))?;
                    if a.dump_nam {
                        seg.nam.dump(out.join("nam").join(format!("{:06}.txt", s.id)))?;
                    }
                    if a.dump_phases {
                        write_matrix(&seg.phase_map.to_tensor(), out.join("phases").join(format!("{:06}.txt", s.id)))?;
                    }
                }
            }
        }
        log.push('\n');
    }
    fs::write(out.join("decisions.log"), log)?;

    let mut m = Manifest::new();
    entry(&mut m, "seed", opt(&a.seed));
    entry(&mut m, "data", a.data.display());
    entry(&mut m, "split", &a.split);
    entry(&mut m, "model", a.model.display());
    entry(&mut m, "multi_model", opt(&a.multi_model.as_ref().map(|p| p.display().to_string())));
    entry(&mut m, "mode", if a.two_nodule { "two_nodule" } else { "single" });
    entry(&mut m, "coarse_only", a.coarse_only);
    entry(&mut m, "tau", cfg.scope.tau);
    entry(&mut m, "phases", cfg.icm.phases);
    entry(&mut m, "beta", opt(&cfg.icm.beta));
    entry(&mut m, "beta_cap", cfg.icm.beta_cap);
    entry(&mut m, "max_iters", cfg.icm.max_iters);
    entry(&mut m, "window_margin", cfg.icm.window_margin);
    entry(&mut m, "min_area", cfg.min_area);
    entry(&mut m, "fill_value", cfg.fill_value);
    entry(&mut m, "slices", which.len());
    entry(&mut m, "masks", n_masks);
    entry(&mut m, "failed", n_failed);
    write_manifest(out, "segment", &m)?;
    println!("{} slices, {n_masks} masks, {n_failed} detection failures", which.len());
    Ok(())
}

pub fn evaluate(a: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let which = split_part(&ds, &a.split)?;
    let pred_dir = a.pred.join("pred");
    let mut preds = BTreeMap::new();
    if pred_dir.is_dir() {
        for e in fs::read_dir(&pred_dir)? {
            let path = e?.path();
            if path.extension().and_then(|x| x.to_str()) != Some("masks") {
                continue;
            }
            let id: usize = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
                .with_context(|| format!("prediction file name {} is not an id", path.display()))?;
            preds.insert(id, read_masks(&path)?.masks);
        }
    }
    let truth = which.iter().map(|&i| {
        let s = &ds.samples[i];
        (s.id, s.label, s.truth_masks.clone())
    });
    let results = eval::join_predictions(truth, preds)?;
    let rule = DetectionRule { bbox_margin: a.bbox_margin };
    let (metrics, bins) = eval::report(&results, a.px_to_mm2, rule, &DEFAULT_BIN_EDGES)?;

    let out = &a.common.out;
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.csv"), eval::metrics_csv(&[(a.name.clone(), metrics.clone())]))?;
    fs::write(out.join("size_bins.csv"), eval::size_bins_csv(&bins))?;
    let mut m = Manifest::new();
    entry(&mut m, "seed", opt(&a.seed));
    entry(&mut m, "data", a.data.display());
    entry(&mut m, "pred", a.pred.display());
    entry(&mut m, "split", &a.split);
    entry(&mut m, "name", &a.name);
    entry(&mut m, "px_to_mm2", a.px_to_mm2);
    entry(&mut m, "bbox_margin", a.bbox_margin);
    write_manifest(out, "eval", &m)?;
    println!(
        "TPR {:.4}  FPR {:.4}  FPR_nodule {:.4}  Dice {}",
        metrics.tpr,
        metrics.fpr,
        metrics.fpr_nodule,
        metrics.dice.map_or("NA".to_string(), |d| format!("{:.4}", d.mean))
    );
    Ok(())
}
