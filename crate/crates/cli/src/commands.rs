use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use tapm_core::checkpoint::{self, Checkpoint};
use tapm_core::config::RunConfig;
use tapm_core::data::{load_gray, load_pair, make_dataset, read_manifest, save_gray, save_sample, write_manifest, ManifestEntry, Sample, Split};
use tapm_core::network::Model;
use tapm_core::ops::sigmoid;
use tapm_core::trajectory::format_trajectories;
use tapm_core::training::{evaluate, predict, predict_probabilities, roc_curve, roc_thresholds, BinaryMask, Trainer};
use tapm_core::{Error, Result, Tensor};

use crate::{EvalArgs, GenArgs, InferArgs, TrainArgs};

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn hash_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Provenance line written at the top of every text output.
fn header(config_text: &str) -> String {
    format!("# tapm {VERSION} config={}", hash_hex(config_text))
}

fn write_text(path: &Path, header: &str, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, format!("{header}\n{body}")).map_err(|e| Error::io(path, e))
}

/// `dir/name.ckpt` → `dir/name.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn gen(a: &GenArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::config("--count must be at least 1"));
    }
    let desc = format!("gen count={} size={} difficulty={} seed={}", a.count, a.size, a.difficulty, a.seed);
    let data = make_dataset(a.count, a.size, a.difficulty, a.seed)?;
    let (n_train, n_test) = (data.train.len(), data.test.len());
    let mut entries = Vec::with_capacity(a.count);
    let tagged = data.train.iter().map(|s| (s, Split::Train)).chain(data.test.iter().map(|s| (s, Split::Test)));
    for (i, (sample, split)) in tagged.enumerate() {
        let image = a.out_dir.join("images").join(format!("{i:05}.png"));
        let mask = a.out_dir.join("masks").join(format!("{i:05}.png"));
        save_sample(sample, &image, &mask)?;
        entries.push(ManifestEntry { image, mask, split });
    }
    let manifest = a.out_dir.join("manifest.tsv");
    write_manifest(&manifest, &entries, Some(&header(&desc)[2..]))?;
    println!("wrote {} samples ({n_train} train, {n_test} test) to {}", a.count, a.out_dir.display());
    Ok(())
}

fn load_split(manifest: &Path, split: Option<Split>) -> Result<Vec<Sample>> {
    let entries = read_manifest(manifest)?;
    let chosen: Vec<&ManifestEntry> = entries.iter().filter(|e| split.is_none_or(|s| e.split == s)).collect();
    if chosen.is_empty() {
        return Err(Error::Data(format!("manifest {} has no entries for the requested split", manifest.display())));
    }
    chosen.iter().map(|e| load_pair(&e.image, &e.mask)).collect()
}

fn check_size(model: &Model<f32>, data: &[Sample]) -> Result<()> {
    let (h, w) = (model.config.height, model.config.width);
    if let Some(s) = data.iter().find(|s| (s.height(), s.width()) != (h, w)) {
        return Err(Error::Data(format!(
            "image is {}×{} but the model expects {w}×{h} (set model.height / model.width)",
            s.width(),
            s.height()
        )));
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let data = load_split(&a.manifest, Some(Split::Train))?;
    let apply = |cfg: &mut RunConfig| -> Result<()> {
        for kv in &a.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(e) = a.epochs {
            cfg.loss.epochs = e;
        }
        if let Some(s) = a.seed {
            cfg.loss.seed = s;
        }
        cfg.validate()
    };
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            let state = ck
                .state
                .ok_or_else(|| Error::Data(format!("checkpoint {} has no training state to resume", path.display())))?;
            let mut cfg = ck.config;
            apply(&mut cfg)?;
            Trainer::resume(ck.model, cfg.loss, state)?
        }
        None => {
            let mut cfg = RunConfig::default();
            if let Some(p) = &a.config {
                cfg.apply_text(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?;
            }
            apply(&mut cfg)?;
            Trainer::new(Model::new(cfg.model.clone(), cfg.loss.seed)?, cfg.loss)?
        }
    };
    check_size(&trainer.model, &data)?;
    let run = RunConfig {
        model: trainer.model.config.clone(),
        loss: trainer.config,
    };
    let head = header(&run.to_text());
    let loss_path = sibling(&a.out, "loss.tsv");
    let epoch_path = sibling(&a.out, "epochs.tsv");
    println!("{head}");
    trainer.fit(&data, |t, r| {
        println!("epoch {:>3}  loss {:.5}  {}", r.epoch + 1, r.mean_loss, r.report);
        let per_epoch = t.config.steps_per_epoch(data.len());
        let curve: String = t
            .state
            .losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{i}\t{}\t{l}\n", i / per_epoch))
            .collect();
        write_text(&loss_path, &head, &format!("step\tepoch\tloss\n{curve}"))?;
        let table: String = t
            .state
            .history
            .iter()
            .map(|h| format!("{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.8}\n", h.epoch, h.mean_loss, h.report.iou, h.report.niou, h.report.pd, h.report.fa))
            .collect();
        write_text(&epoch_path, &head, &format!("epoch\tmean_loss\tiou\tniou\tpd\tfa\n{table}"))?;
        checkpoint::save(
            &a.out,
            &Checkpoint {
                config: run.clone(),
                model: t.model.clone(),
                state: Some(t.state.clone()),
            },
        )
    })?;
    println!("saved {}", a.out.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let split = match a.split.as_str() {
        "all" => None,
        s => Some(s.parse::<Split>().map_err(|_| Error::config(format!("--split must be train, test or all, got `{s}`")))?),
    };
    if !(0.0..1.0).contains(&a.threshold) {
        return Err(Error::config("--threshold must lie in [0, 1)"));
    }
    let ck = checkpoint::load(&a.checkpoint)?;
    let data = load_split(&a.manifest, split)?;
    check_size(&ck.model, &data)?;
    let head = header(&ck.config.to_text());
    let report = evaluate(&ck.model, &data, a.threshold)?;
    println!("{report}");
    if let Some(p) = &a.report {
        write_text(p, &head, &format!("threshold={}\n{}", a.threshold, report.to_kv()))?;
    }
    if let Some(p) = &a.roc {
        let probs = predict_probabilities(&ck.model, &data, 8)?;
        let pairs = probs
            .into_iter()
            .zip(&data)
            .map(|(p, s)| Ok((p, BinaryMask::threshold(&s.mask, 0.5)?)))
            .collect::<Result<Vec<_>>>()?;
        let rows: String = roc_curve(&pairs, &roc_thresholds())?
            .iter()
            .map(|r| format!("{:.8}\t{:.8}\n", r.fpr, r.tpr))
            .collect();
        write_text(p, &format!("{head}\n# thresholds 0.05 to 0.95 in steps of 0.05, one row each"), &format!("fpr\ttpr\n{rows}"))?;
    }
    Ok(())
}

fn normalized(t: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = t.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    t.map(|v| (v - lo) / span)
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let gray = load_gray(&a.image)?;
    let (_, h, w) = gray.dims3()?;
    let sample = Sample::from_gray(&gray, Tensor::zeros(&[1, h, w]))?;
    check_size(&ck.model, std::slice::from_ref(&sample))?;
    let pred = predict(&ck.model, &[&sample])?;
    let prob = sigmoid(&pred.logits).select(0);
    let mask = prob.map(|v| if v > a.threshold { 1.0 } else { 0.0 });
    save_gray(&a.out_mask, &mask)?;
    println!("{} foreground pixels written to {}", mask.sum(), a.out_mask.display());
    if let Some(dir) = &a.dump_diagnostics {
        let head = header(&ck.config.to_text());
        save_gray(&dir.join("probability.png"), &prob)?;
        if let Some(r) = &pred.response {
            save_gray(&dir.join("response.png"), &r.select(0))?;
        }
        for s in &pred.diagnostics.stages {
            save_gray(&dir.join("energy").join(format!("stage{}.png", s.stage)), &normalized(&s.energy[0].values))?;
            write_text(&dir.join("traj").join(format!("stage{}.txt", s.stage)), &head, &format_trajectories(&s.trajectories[0]))?;
        }
        println!("diagnostics written to {}", dir.display());
    }
    Ok(())
}
