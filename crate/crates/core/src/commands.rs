//! The five pipeline commands. Each reads its inputs from the run
//! configuration, writes under `out`, and returns a short summary for the
//! terminal.
//!
//! Layout of `out`:
//!
//! ```text
//! train/*.omf  train.manifest  test/*.omf  test.manifest  gt/   synth
//! model.ckpt  history.txt                                         train
//! scores/<video>.objects.txt  scores/<video>.frames.txt           score
//! report.txt  curves/{frame_roc,rbdc,tbdc}.csv                    eval
//! gradcheck.txt                                                   gradcheck
//! <command>.meta                                                  all
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::{load_manifest, write_features, write_manifest, VideoFeatureSet};
use crate::ground_truth::GroundTruth;
use crate::metrics::{evaluate, Detection};
use crate::network::{load_checkpoint, save_checkpoint};
use crate::postprocess::{frame_max, frame_scores, scale_adjust, smooth_object_scores};
use crate::scoring::{parse_object_scores, score_video_with};
use crate::synth::generate_synthetic;
use crate::training::{gradient_check, train};

/// Fraction of gradient-check seeds that must pass.
pub const GRADCHECK_PASS_RATE: f64 = 0.99;

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "not found")))
    }
}

fn write_meta(cfg: &RunConfig, command: &str) -> Result<()> {
    let mut text = format!("command = {command}\n");
    text.push_str(&cfg.to_text());
    write(&cfg.out.join(format!("{command}.meta")), &text)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    cfg.synth.validate()?;
    let ds = generate_synthetic(&cfg.synth, cfg.seed)?;
    let out = &cfg.out;
    let gt_dir = out.join("gt");
    for dir in [out.join("train"), out.join("test"), gt_dir.clone()] {
        create_dir(&dir)?;
    }
    let save = |split: &str, sets: &[VideoFeatureSet]| -> Result<()> {
        let mut entries = Vec::with_capacity(sets.len());
        for s in sets {
            let rel = PathBuf::from(split).join(format!("{}.omf", s.video_id));
            write_features(s, &out.join(&rel))?;
            entries.push(rel);
        }
        write_manifest(&out.join(format!("{split}.manifest")), &entries)
    };
    save("train", &ds.train)?;
    save("test", &ds.test)?;
    for gt in &ds.ground_truth {
        gt.write(&gt_dir)?;
    }
    write_meta(cfg, "synth")?;
    let r = &ds.report;
    Ok(format!(
        "synth: {} train / {} test videos, {} anomalous of {} test objects in {} events ({} direction, {} held-out)",
        ds.train.len(),
        ds.test.len(),
        r.anomalous_objects,
        r.test_objects,
        r.events,
        r.direction_events,
        r.held_out_events
    ))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    cfg.train.validate()?;
    let manifest = cfg.train_manifest();
    require(&manifest)?;
    let sets = load_manifest(&manifest)?;
    let tcfg = crate::training::TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let outcome = train(&sets, &tcfg)?;
    create_dir(&cfg.out)?;
    save_checkpoint(&outcome.best_params, outcome.best_loss(), &cfg.checkpoint())?;
    outcome.write_history(&cfg.out.join("history.txt"))?;
    write_meta(cfg, "train")?;
    let mut s = String::new();
    for e in &outcome.history {
        let _ = writeln!(s, "epoch {:>3}  loss {:.6}", e.epoch, e.loss);
    }
    let _ = write!(s, "best epoch {} loss {:.6}", outcome.best_epoch, outcome.best_loss());
    Ok(s)
}

pub fn cmd_score(cfg: &RunConfig) -> Result<String> {
    cfg.smoothing.validate()?;
    let mask = cfg.mask()?;
    let (ckpt, manifest) = (cfg.checkpoint(), cfg.test_manifest());
    require(&ckpt)?;
    require(&manifest)?;
    let (params, _) = load_checkpoint(&ckpt)?;
    let sets = load_manifest(&manifest)?;
    let dir = cfg.scores_dir();
    create_dir(&dir)?;
    create_dir(&cfg.out)?;
    let mut objects = 0;
    for set in &sets {
        let mut table = score_video_with(&params, set, mask)?;
        if cfg.smoothing_enabled {
            table = smooth_object_scores(&table, &cfg.smoothing);
        }
        if cfg.smoothing.scale_adjust {
            table = scale_adjust(&table);
        }
        let frames = set.frame_count as usize;
        let per_frame = if cfg.smoothing_enabled {
            frame_scores(&table, frames, &cfg.smoothing)
        } else {
            frame_max(&table, frames)
        };
        table.write(&dir.join(format!("{}.objects.txt", set.video_id)))?;
        let mut text = String::with_capacity(per_frame.len() * 9);
        for v in per_frame {
            let _ = writeln!(text, "{v:.6}");
        }
        write(&dir.join(format!("{}.frames.txt", set.video_id)), &text)?;
        objects += table.entries.len();
        info!("scored {} ({} objects)", set.video_id, table.entries.len());
    }
    write_meta(cfg, "score")?;
    Ok(format!("score: {} videos, {} objects -> {}", sets.len(), objects, dir.display()))
}

/// Video ids with a labels file in the ground-truth directory, sorted.
pub fn ground_truth_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".labels.txt") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn parse_frame_scores(text: &str, path: &Path) -> Result<Vec<f64>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<f64>()
                .map_err(|_| Error::Format(format!("{}: line {}: {l:?}", path.display(), i + 1)))
        })
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    cfg.metrics.validate()?;
    let (gt_dir, scores_dir) = (cfg.gt_dir(), cfg.scores_dir());
    require(&gt_dir)?;
    require(&scores_dir)?;
    let ids = ground_truth_ids(&gt_dir)?;
    if ids.is_empty() {
        return Err(Error::UndefinedMetric(format!("no ground truth in {}", gt_dir.display())));
    }
    let mut gts = Vec::with_capacity(ids.len());
    let mut frames = Vec::with_capacity(ids.len());
    let mut detections = Vec::new();
    for id in &ids {
        let gt = GroundTruth::read(&gt_dir, id)?;
        let fpath = scores_dir.join(format!("{id}.frames.txt"));
        let text = fs::read_to_string(&fpath).map_err(|e| Error::io(&fpath, e))?;
        let f = parse_frame_scores(&text, &fpath)?;
        if f.len() != gt.frame_count() {
            return Err(Error::dim(format!("frame scores of {id}"), gt.frame_count(), f.len()));
        }
        let opath = scores_dir.join(format!("{id}.objects.txt"));
        let text = fs::read_to_string(&opath).map_err(|e| Error::io(&opath, e))?;
        for o in parse_object_scores(&text)? {
            if o.video_id != *id {
                return Err(Error::Validation(format!("{}: entry for video {}", opath.display(), o.video_id)));
            }
            detections.push(Detection {
                video_id: o.video_id,
                frame_index: o.frame_index,
                bbox: o.bbox,
                score: o.score,
            });
        }
        frames.push(f);
        gts.push(gt);
    }
    let mut report = evaluate(&frames, &detections, &gts, &cfg.metrics)?;
    report.seed = Some(cfg.seed);
    create_dir(&cfg.out)?;
    let curves = cfg.out.join("curves");
    create_dir(&curves)?;
    write(&curves.join("frame_roc.csv"), &report.frame_roc.to_csv())?;
    write(&curves.join("rbdc.csv"), &report.rbdc.to_csv())?;
    write(&curves.join("tbdc.csv"), &report.tbdc.to_csv())?;
    let text = report.to_text();
    write(&cfg.out.join("report.txt"), &text)?;
    write_meta(cfg, "eval")?;
    Ok(text.trim_end().to_string())
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<String> {
    if cfg.gradcheck_seeds == 0 {
        return Err(Error::Config("gradcheck_seeds must be >= 1".into()));
    }
    let mut text = String::new();
    let mut passed = 0u64;
    for seed in cfg.seed..cfg.seed + cfg.gradcheck_seeds {
        let report = gradient_check(&cfg.gradcheck, seed)?;
        passed += report.passed() as u64;
        let _ = writeln!(text, "{}", report.summary());
    }
    let rate = passed as f64 / cfg.gradcheck_seeds as f64;
    let verdict = format!("passed {passed}/{} seeds ({:.1}%)", cfg.gradcheck_seeds, 100.0 * rate);
    let _ = writeln!(text, "{verdict}");
    create_dir(&cfg.out)?;
    write(&cfg.out.join("gradcheck.txt"), &text)?;
    write_meta(cfg, "gradcheck")?;
    if rate < GRADCHECK_PASS_RATE {
        return Err(Error::Numeric(format!("gradient check {verdict}")));
    }
    Ok(format!("gradcheck: {verdict}"))
}
