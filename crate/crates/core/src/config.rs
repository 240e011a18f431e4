//! Run configuration: a flat `key = value` file merged with command-line
//! overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::{Averaging, MetricConfig, OverlapMode};
use crate::postprocess::SmoothingConfig;
use crate::scoring::ComponentMask;
use crate::synth::SynthConfig;
use crate::training::{GradCheckConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub gt_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub scores_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub smoothing_enabled: bool,
    pub smoothing: SmoothingConfig,
    /// Comma-separated score components to drop.
    pub ablate: String,
    pub metrics: MetricConfig,
    pub gradcheck_seeds: u64,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            train_manifest: None,
            test_manifest: None,
            gt_dir: None,
            checkpoint: None,
            scores_dir: None,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            smoothing_enabled: true,
            smoothing: SmoothingConfig::default(),
            ablate: String::new(),
            metrics: MetricConfig::default(),
            gradcheck_seeds: 100,
            gradcheck: GradCheckConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Applies a single `key`, `value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let path = || Some(PathBuf::from(v));
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "train_manifest" => self.train_manifest = path(),
            "test_manifest" => self.test_manifest = path(),
            "gt_dir" => self.gt_dir = path(),
            "checkpoint" => self.checkpoint = path(),
            "scores_dir" => self.scores_dir = path(),

            "clusters" => self.synth.clusters = parse(key, v)?,
            "d_app" => self.synth.d_app = parse(key, v)?,
            "d_mo" => self.synth.d_mo = parse(key, v)?,
            "train_videos" => self.synth.train_videos = parse(key, v)?,
            "test_videos" => self.synth.test_videos = parse(key, v)?,
            "frames" => self.synth.frames = parse(key, v)?,
            "objects" => self.synth.objects = parse(key, v)?,
            "anomaly_rate" => self.synth.anomaly_rate = parse(key, v)?,
            "event_len" => self.synth.event_len = parse(key, v)?,
            "direction_fraction" => self.synth.direction_fraction = parse(key, v)?,
            "app_noise" => self.synth.app_noise = parse(key, v)?,
            "motion_noise" => self.synth.motion_noise = parse(key, v)?,
            "frame_width" => self.synth.frame_width = parse(key, v)?,
            "frame_height" => self.synth.frame_height = parse(key, v)?,

            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "beta1" => self.train.beta1 = parse(key, v)?,
            "beta2" => self.train.beta2 = parse(key, v)?,
            "adam_epsilon" => self.train.epsilon = parse(key, v)?,
            "hidden_dim" => self.train.hidden_dim = parse(key, v)?,
            "memory_items" => self.train.memory_items = parse(key, v)?,
            "lambda_cos" => self.train.weights.lambda_cos = parse(key, v)?,
            "lambda_comp" => self.train.weights.lambda_comp = parse(key, v)?,
            "lambda_tr" => self.train.weights.lambda_tr = parse(key, v)?,
            "lambda_ole" => self.train.weights.lambda_ole = parse(key, v)?,
            "ole_delta" => self.train.weights.delta = parse(key, v)?,
            "triplet_margin" => self.train.weights.margin = parse(key, v)?,

            "smoothing" => self.smoothing_enabled = parse_bool(key, v)?,
            "temporal_radius" => self.smoothing.temporal_radius = parse(key, v)?,
            "association_min_iou" => self.smoothing.association_min_iou = parse(key, v)?,
            "gaussian_sigma" => self.smoothing.gaussian_sigma = parse(key, v)?,
            "scale_adjust" => self.smoothing.scale_adjust = parse_bool(key, v)?,
            "ablate" => self.ablate = v.to_string(),

            "overlap_threshold" => self.metrics.overlap_threshold = parse(key, v)?,
            "track_fraction" => self.metrics.track_fraction = parse(key, v)?,
            "max_fp_rate" => self.metrics.max_fp_rate = parse(key, v)?,
            "overlap_mode" => {
                self.metrics.overlap = match v {
                    "gt_area" => OverlapMode::GtArea,
                    "iou" => OverlapMode::Iou,
                    _ => return Err(Error::Config(format!("overlap_mode must be gt_area or iou, got {v:?}"))),
                }
            }
            "auc_averaging" => {
                self.metrics.averaging = match v {
                    "micro" => Averaging::Micro,
                    "macro" => Averaging::Macro,
                    _ => return Err(Error::Config(format!("auc_averaging must be micro or macro, got {v:?}"))),
                }
            }

            "gradcheck_seeds" => self.gradcheck_seeds = parse(key, v)?,
            "gradcheck_tolerance" => self.gradcheck.tolerance = parse(key, v)?,
            "gradcheck_step" => self.gradcheck.step = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.smoothing.validate()?;
        self.metrics.validate()?;
        self.mask()?;
        Ok(())
    }

    pub fn mask(&self) -> Result<ComponentMask> {
        ComponentMask::without(&self.ablate)
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.train_manifest.clone().unwrap_or_else(|| self.out.join("train.manifest"))
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.test_manifest.clone().unwrap_or_else(|| self.out.join("test.manifest"))
    }

    pub fn gt_dir(&self) -> PathBuf {
        self.gt_dir.clone().unwrap_or_else(|| self.out.join("gt"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    pub fn scores_dir(&self) -> PathBuf {
        self.scores_dir.clone().unwrap_or_else(|| self.out.join("scores"))
    }

    /// Every effective setting, in the same syntax the file parser reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        for (k, v) in [
            ("train_manifest", p(&self.train_manifest)),
            ("test_manifest", p(&self.test_manifest)),
            ("gt_dir", p(&self.gt_dir)),
            ("checkpoint", p(&self.checkpoint)),
            ("scores_dir", p(&self.scores_dir)),
        ] {
            if let Some(v) = v {
                kv(k, v);
            }
        }
        let sy = &self.synth;
        kv("clusters", sy.clusters.to_string());
        kv("d_app", sy.d_app.to_string());
        kv("d_mo", sy.d_mo.to_string());
        kv("train_videos", sy.train_videos.to_string());
        kv("test_videos", sy.test_videos.to_string());
        kv("frames", sy.frames.to_string());
        kv("objects", sy.objects.to_string());
        kv("anomaly_rate", sy.anomaly_rate.to_string());
        kv("event_len", sy.event_len.to_string());
        kv("direction_fraction", sy.direction_fraction.to_string());
        kv("app_noise", sy.app_noise.to_string());
        kv("motion_noise", sy.motion_noise.to_string());
        kv("frame_width", sy.frame_width.to_string());
        kv("frame_height", sy.frame_height.to_string());
        let t = &self.train;
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("adam_epsilon", t.epsilon.to_string());
        kv("hidden_dim", t.hidden_dim.to_string());
        kv("memory_items", t.memory_items.to_string());
        kv("lambda_cos", t.weights.lambda_cos.to_string());
        kv("lambda_comp", t.weights.lambda_comp.to_string());
        kv("lambda_tr", t.weights.lambda_tr.to_string());
        kv("lambda_ole", t.weights.lambda_ole.to_string());
        kv("ole_delta", t.weights.delta.to_string());
        kv("triplet_margin", t.weights.margin.to_string());
        kv("smoothing", self.smoothing_enabled.to_string());
        kv("temporal_radius", self.smoothing.temporal_radius.to_string());
        kv("association_min_iou", self.smoothing.association_min_iou.to_string());
        kv("gaussian_sigma", self.smoothing.gaussian_sigma.to_string());
        kv("scale_adjust", self.smoothing.scale_adjust.to_string());
        kv("ablate", if self.ablate.is_empty() { "none".into() } else { self.ablate.clone() });
        let m = &self.metrics;
        kv("overlap_threshold", m.overlap_threshold.to_string());
        kv("track_fraction", m.track_fraction.to_string());
        kv("max_fp_rate", m.max_fp_rate.to_string());
        kv(
            "overlap_mode",
            match m.overlap {
                OverlapMode::GtArea => "gt_area",
                OverlapMode::Iou => "iou",
            }
            .into(),
        );
        kv(
            "auc_averaging",
            match m.averaging {
                Averaging::Micro => "micro",
                Averaging::Macro => "macro",
            }
            .into(),
        );
        kv("gradcheck_seeds", self.gradcheck_seeds.to_string());
        kv("gradcheck_tolerance", self.gradcheck.tolerance.to_string());
        kv("gradcheck_step", self.gradcheck.step.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_apply() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nseed = 9\n\nepochs=3  # trailing\nsmoothing = off\noverlap_mode = iou\n")
            .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.epochs, 3);
        assert!(!c.smoothing_enabled);
        assert_eq!(c.metrics.overlap, OverlapMode::Iou);
    }

    #[test]
    fn bad_lines_are_config_errors() {
        for text in ["nonsense", "epochs = many", "mystery = 1", "smoothing = maybe"] {
            let err = RunConfig::default().apply_text(text).unwrap_err();
            assert_eq!(err.class(), "config", "{text}");
        }
    }

    #[test]
    fn dump_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("seed=4\nablate=rec_cos\nd_app=12\nlambda_ole=0.5\ngt_dir=/tmp/x\nauc_averaging=macro").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn default_paths_follow_out() {
        let mut c = RunConfig::default();
        c.set("out", "/data/run").unwrap();
        assert_eq!(c.checkpoint(), PathBuf::from("/data/run/model.ckpt"));
        c.set("checkpoint", "/models/m.ckpt").unwrap();
        assert_eq!(c.checkpoint(), PathBuf::from("/models/m.ckpt"));
    }
}
