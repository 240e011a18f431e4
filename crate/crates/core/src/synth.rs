//! Synthetic object-level datasets with known anomalies.
//!
//! Normal objects belong to one of `clusters` action patterns (an appearance
//! direction plus a motion map). Test videos additionally carry anomalous
//! segments on some tracks, either drawn from a pattern never seen in
//! training or produced by flipping the sign of a normal appearance vector.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::features::{BBox, FeatureRecord, VideoFeatureSet};
use crate::ground_truth::{GroundTruth, Region};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub clusters: usize,
    pub d_app: usize,
    pub d_mo: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    pub frames: usize,
    /// Concurrent tracks per video; each persists for the whole video.
    pub objects: usize,
    pub anomaly_rate: f64,
    /// Frames per injected anomalous segment.
    pub event_len: usize,
    /// Probability that an injected event is a sign-flipped appearance
    /// rather than a held-out action pattern.
    pub direction_fraction: f64,
    /// Relative norm of the appearance perturbation before renormalisation.
    pub app_noise: f64,
    /// Per-entry standard deviation of the motion maps.
    pub motion_noise: f64,
    pub frame_width: u32,
    pub frame_height: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clusters: 3,
            d_app: 512,
            d_mo: 256,
            train_videos: 40,
            test_videos: 20,
            frames: 40,
            objects: 3,
            anomaly_rate: 0.1,
            event_len: 8,
            direction_fraction: 0.5,
            app_noise: 0.5,
            motion_noise: 0.1,
            frame_width: 640,
            frame_height: 360,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 1 {
            return Err(Error::Config("synthetic data needs at least one cluster".into()));
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return Err(Error::Config(format!("anomaly rate {} outside [0, 1]", self.anomaly_rate)));
        }
        if !(0.0..=1.0).contains(&self.direction_fraction) {
            return Err(Error::Config("direction fraction outside [0, 1]".into()));
        }
        if self.d_app == 0 || self.d_mo == 0 || self.frames == 0 || self.event_len == 0 {
            return Err(Error::Config("dimensions, frames and event length must be positive".into()));
        }
        if self.frame_width < 100 || self.frame_height < 100 {
            return Err(Error::Config("synthetic frames must be at least 100x100 pixels".into()));
        }
        if !(self.app_noise >= 0.0 && self.motion_noise >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    HeldOut,
    Direction,
}

/// Counters kept while injecting, independent of the ground-truth files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthReport {
    pub test_objects: usize,
    pub anomalous_objects: usize,
    pub events: usize,
    pub direction_events: usize,
    pub held_out_events: usize,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: Vec<VideoFeatureSet>,
    pub test: Vec<VideoFeatureSet>,
    pub ground_truth: Vec<GroundTruth>,
    pub report: SynthReport,
}

struct Pattern {
    app: Vec<f64>,
    mag: Vec<f64>,
    angle: f64,
    speed: f64,
}

struct Track {
    pattern: usize,
    bbox: BBox,
    vx: f64,
    vy: f64,
    gain: f64,
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    /// `clusters` normal patterns followed by one held-out pattern.
    patterns: Vec<Pattern>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a SynthConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = (cfg.d_mo as f64).sqrt().ceil().max(1.0) as usize;
        let patterns = (0..=cfg.clusters)
            .map(|c| {
                let mut app: Vec<f64> = (0..cfg.d_app).map(|_| gaussian(&mut rng)).collect();
                unit(&mut app);
                let held_out = c == cfg.clusters;
                // Smooth blob centred somewhere in the map.
                let (cx, cy) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
                let speed = if held_out { rng.gen_range(3.0..4.0) } else { rng.gen_range(0.6..1.6) };
                let mag = (0..cfg.d_mo)
                    .map(|i| {
                        let (px, py) = ((i % side) as f64 / side as f64, (i / side) as f64 / side as f64);
                        let d2 = (px - cx).powi(2) + (py - cy).powi(2);
                        0.4 + (-d2 / 0.08).exp()
                    })
                    .collect();
                let angle = rng.gen_range(0.15..0.85);
                Pattern { app, mag, angle, speed }
            })
            .collect();
        Self { cfg, rng, patterns }
    }

    fn new_track(&mut self) -> Track {
        let pattern = self.rng.gen_range(0..self.cfg.clusters);
        self.track_for(pattern)
    }

    fn track_for(&mut self, pattern: usize) -> Track {
        let (fw, fh) = (self.cfg.frame_width as f64, self.cfg.frame_height as f64);
        let w = self.rng.gen_range(0.05..0.1) * fw;
        let h = (w * self.rng.gen_range(1.5..2.5)).min(0.5 * fh);
        let x = self.rng.gen_range(0.0..fw - w);
        let y = self.rng.gen_range(0.0..fh - h);
        let p = &self.patterns[pattern];
        let theta = p.angle * std::f64::consts::TAU;
        let px_per_frame = 2.0 * p.speed;
        let gain = self.rng.gen_range(0.9..1.1);
        Track {
            pattern,
            bbox: BBox::new(x as f32, y as f32, w as f32, h as f32),
            vx: px_per_frame * theta.cos(),
            vy: px_per_frame * theta.sin(),
            gain,
        }
    }

    fn advance(&self, t: &mut Track) {
        let (fw, fh) = (self.cfg.frame_width as f64, self.cfg.frame_height as f64);
        let (w, h) = (t.bbox.w as f64, t.bbox.h as f64);
        let mut x = t.bbox.x as f64 + t.vx;
        let mut y = t.bbox.y as f64 + t.vy;
        if x < 0.0 || x > fw - w {
            t.vx = -t.vx;
            x = x.clamp(0.0, fw - w);
        }
        if y < 0.0 || y > fh - h {
            t.vy = -t.vy;
            y = y.clamp(0.0, fh - h);
        }
        t.bbox.x = x as f32;
        t.bbox.y = y as f32;
    }

    fn sample(&mut self, pattern: usize, gain: f64, flip: bool) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let cfg = self.cfg;
        let scale = cfg.app_noise / (cfg.d_app as f64).sqrt();
        let mut app: Vec<f64> = self.patterns[pattern].app.clone();
        for v in app.iter_mut() {
            *v += scale * gaussian(&mut self.rng);
        }
        unit(&mut app);
        if flip {
            app.iter_mut().for_each(|v| *v = -*v);
        }
        let p = &self.patterns[pattern];
        let (speed, angle) = (p.speed * gain, p.angle);
        let base: Vec<f64> = p.mag.clone();
        let mag: Vec<f32> = base
            .iter()
            .map(|&m| (speed * m + cfg.motion_noise * gaussian(&mut self.rng)).max(0.0) as f32)
            .collect();
        let ang: Vec<f32> = (0..cfg.d_mo)
            .map(|_| (angle + 0.5 * cfg.motion_noise * gaussian(&mut self.rng)).clamp(0.0, 1.0) as f32)
            .collect();
        (app.into_iter().map(|v| v as f32).collect(), mag, ang)
    }

    fn video(&mut self, video_id: String, events: &[(usize, usize, AnomalyKind)]) -> (VideoFeatureSet, GroundTruth) {
        let cfg = self.cfg;
        let mut tracks: Vec<Track> = (0..cfg.objects).map(|_| self.new_track()).collect();
        let mut records = Vec::with_capacity(cfg.frames * cfg.objects);
        let mut gt = GroundTruth::normal(video_id.clone(), cfg.frames);
        for frame in 0..cfg.frames {
            for (obj, track) in tracks.iter().enumerate() {
                let active = events
                    .iter()
                    .find(|(o, start, _)| *o == obj && frame >= *start && frame < start + cfg.event_len);
                let (x_app, x_mag, x_ang) = match active {
                    None => self.sample(track.pattern, track.gain, false),
                    Some((_, _, AnomalyKind::Direction)) => self.sample(track.pattern, track.gain, true),
                    Some((_, _, AnomalyKind::HeldOut)) => self.sample(cfg.clusters, track.gain, false),
                };
                if active.is_some() {
                    gt.frame_labels[frame] = true;
                    gt.regions.push(Region {
                        frame_index: frame as u32,
                        track_id: obj as u32,
                        bbox: track.bbox,
                    });
                }
                records.push(FeatureRecord {
                    frame_index: frame as u32,
                    object_id: obj as u32,
                    bbox: track.bbox,
                    x_app,
                    x_mag,
                    x_ang,
                });
            }
            for track in tracks.iter_mut() {
                self.advance(track);
            }
        }
        let set = VideoFeatureSet {
            video_id,
            frame_count: cfg.frames as u32,
            frame_width: cfg.frame_width,
            frame_height: cfg.frame_height,
            d_app: cfg.d_app,
            d_mo: cfg.d_mo,
            records,
        };
        (set, gt)
    }

    /// Anomalous segments for one test video: `(track, start_frame, kind)`.
    /// The event count is the expected count, stochastically rounded, so the
    /// anomalous-object fraction matches the configured rate on average.
    fn plan_events(&mut self, report: &mut SynthReport) -> Vec<(usize, usize, AnomalyKind)> {
        let cfg = self.cfg;
        let len = cfg.event_len.min(cfg.frames);
        let expected = cfg.anomaly_rate * (cfg.frames * cfg.objects) as f64 / len as f64;
        let mut count = expected.floor() as usize;
        if self.rng.gen::<f64>() < expected - expected.floor() {
            count += 1;
        }
        let mut order: Vec<usize> = (0..cfg.objects).collect();
        order.shuffle(&mut self.rng);
        let mut events = Vec::new();
        for &track in order.iter().take(count.min(cfg.objects)) {
            let start = self.rng.gen_range(0..=cfg.frames - len);
            let kind = if self.rng.gen::<f64>() < cfg.direction_fraction {
                report.direction_events += 1;
                AnomalyKind::Direction
            } else {
                report.held_out_events += 1;
                AnomalyKind::HeldOut
            };
            report.events += 1;
            report.anomalous_objects += len;
            events.push((track, start, kind));
        }
        events
    }
}

pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut generator = Generator::new(cfg, seed);
    let mut report = SynthReport::default();
    let train = (0..cfg.train_videos)
        .map(|v| generator.video(format!("train_{v:03}"), &[]).0)
        .collect();
    let mut test = Vec::with_capacity(cfg.test_videos);
    let mut ground_truth = Vec::with_capacity(cfg.test_videos);
    for v in 0..cfg.test_videos {
        let events = generator.plan_events(&mut report);
        let (set, gt) = generator.video(format!("test_{v:03}"), &events);
        report.test_objects += set.records.len();
        test.push(set);
        ground_truth.push(gt);
    }
    Ok(SynthDataset {
        train,
        test,
        ground_truth,
        report,
    })
}
