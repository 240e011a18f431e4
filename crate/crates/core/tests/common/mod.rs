#![allow(dead_code)]

use omae::features::{BBox, FeatureRecord, VideoFeatureSet};
use omae::ground_truth::{GroundTruth, Region};
use omae::losses::{loss_comp, loss_ole, loss_rec, loss_triplet, BatchAssignment};
use omae::metrics::{self, brute_force, Detection, MetricConfig};
use omae::nalgebra::DMatrix;
use omae::network::{memory_read, ForwardTrace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_set(rng: &mut ChaCha8Rng, video_id: &str, d_app: usize, d_mo: usize) -> VideoFeatureSet {
    let frames = rng.gen_range(1..6u32);
    let mut records = Vec::new();
    for f in 0..frames {
        for o in 0..rng.gen_range(0..4u32) {
            records.push(FeatureRecord {
                frame_index: f,
                object_id: o,
                bbox: BBox::new(rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0), rng.gen_range(1.0..9.0), rng.gen_range(1.0..9.0)),
                x_app: (0..d_app).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                x_mag: (0..d_mo).map(|_| rng.gen_range(0.0..3.0)).collect(),
                x_ang: (0..d_mo).map(|_| rng.gen_range(0.0..1.0)).collect(),
            });
        }
    }
    VideoFeatureSet {
        video_id: video_id.into(),
        frame_count: frames,
        frame_width: 64,
        frame_height: 64,
        d_app,
        d_mo,
        records,
    }
}

pub fn record(app: &[f32], mag: &[f32], ang: &[f32]) -> FeatureRecord {
    FeatureRecord {
        frame_index: 0,
        object_id: 0,
        bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
        x_app: app.to_vec(),
        x_mag: mag.to_vec(),
        x_ang: ang.to_vec(),
    }
}

pub fn trace(app: &[f64], mag: &[f64], ang: &[f64]) -> ForwardTrace {
    ForwardTrace {
        h: vec![],
        w: vec![],
        k: 0,
        c: vec![],
        z: vec![],
        xhat_app: app.to_vec(),
        xhat_mag: mag.to_vec(),
        xhat_ang: ang.to_vec(),
    }
}

fn close(name: &str, got: f64, want: f64) -> Result<(), String> {
    if (got - want).abs() <= 1e-9 {
        Ok(())
    } else {
        Err(format!("{name}: got {got}, expected {want}"))
    }
}

/// The closed-form zero and extreme cases of each loss term.
pub fn loss_zero_cases() -> Vec<(&'static str, Result<(), String>)> {
    let m = |r, c, v: &[f64]| DMatrix::from_row_slice(r, c, v);
    let mut out = Vec::new();

    let app = [0.6f32, -0.8, 1.5];
    let (mag, ang) = ([2.0f32, 0.5], [0.1f32, 0.9]);
    let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let rec = record(&app, &mag, &ang);
    out.push(("rec: exact reconstruction is 0", close("rec", loss_rec(&rec, &trace(&f(&app), &f(&mag), &f(&ang)), 0.1), 0.0)));
    let flipped: Vec<f64> = f(&app).iter().map(|v| -v).collect();
    let n = f(&app).iter().map(|v| v * v).sum::<f64>().sqrt();
    out.push((
        "rec: flipped appearance is 2|x| + 0.2",
        close("rec", loss_rec(&rec, &trace(&flipped, &f(&mag), &f(&ang)), 0.1), 2.0 * n + 0.2),
    ));

    let mem = m(2, 2, &[3.0, -1.0, -4.0, 7.0]);
    let a = BatchAssignment::new(vec![0, 1], vec![Some(1), Some(0)]);
    out.push(("comp: h on its nearest item is 0", close("comp", loss_comp(&mem, &mem, &a), 0.0)));
    let zero = m(2, 2, &[0.0, 0.0, 9.0, 9.0]);
    let a1 = BatchAssignment::new(vec![0], vec![Some(1)]);
    out.push(("comp: h=[3,4], m=[0,0] is 5", close("comp", loss_comp(&m(1, 2, &[3.0, 4.0]), &zero, &a1), 5.0)));

    let far = m(2, 2, &[1.0, 1.0, 20.0, 20.0]);
    let t = loss_triplet(&m(1, 2, &[1.0, 1.0]), &far, &a1, 1.0).map_err(|e| e.to_string());
    out.push(("triplet: inactive hinge is 0", t.and_then(|v| close("triplet", v, 0.0))));
    let eq = m(2, 2, &[2.0, 0.0, -2.0, 0.0]);
    let t = loss_triplet(&m(1, 2, &[0.0, 5.0]), &eq, &a1, 1.0).map_err(|e| e.to_string());
    out.push(("triplet: equidistant items give the margin", t.and_then(|v| close("triplet", v, 1.0))));

    let h = m(1, 3, &[0.2, -0.4, 0.4]);
    let o = loss_ole(&h, &BatchAssignment::new(vec![1], vec![Some(0)]), 1.0).map_err(|e| e.to_string());
    out.push(("ole: single sample is 1 - |h|", o.and_then(|v| close("ole", v, 1.0 - 0.6))));
    let h = m(2, 2, &[0.1, 0.0, 0.0, 0.2]);
    let o = loss_ole(&h, &BatchAssignment::new(vec![0, 0], vec![Some(1); 2]), 1.0).map_err(|e| e.to_string());
    out.push(("ole: single class is max(0, delta - |H|*)", o.and_then(|v| close("ole", v, 0.7))));

    // Memory fixed point: each h sits on its own item, items far apart and
    // pairwise orthogonal with norm >= delta.
    let mem = m(3, 3, &[5.0, 0.0, 0.0, 0.0, 6.0, 0.0, 0.0, 0.0, 7.0]);
    let h = m(4, 3, &[5.0, 0.0, 0.0, 0.0, 6.0, 0.0, 0.0, 0.0, 7.0, 0.0, 6.0, 0.0]);
    let fixed = BatchAssignment::from_attention(&h, &mem).map_err(|e| e.to_string());
    let result = fixed.and_then(|a| {
        close("comp", loss_comp(&h, &mem, &a), 0.0)?;
        close("triplet", loss_triplet(&h, &mem, &a, 1.0).map_err(|e| e.to_string())?, 0.0)?;
        close("ole", loss_ole(&h, &a, 1.0).map_err(|e| e.to_string())?, 0.0)
    });
    out.push(("total: memory fixed point has zero memory loss", result));
    out
}

/// Random `(h, M)` pairs: weights sum to one, are invariant to a constant
/// added to every dot product, and the readout is the weighted item sum.
pub fn softmax_trials(trials: usize, seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    for t in 0..trials {
        let d = rng.gen_range(1..9);
        let n = rng.gen_range(1..12);
        let scale = [0.1, 1.0, 10.0, 100.0][rng.gen_range(0..4)];
        let mem = DMatrix::from_fn(n, d, |_, _| scale * rng.gen_range(-1.0..1.0));
        let h: Vec<f64> = (0..d).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let r = memory_read(&mem, &h).map_err(|e| e.to_string())?;
        let sum: f64 = r.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || r.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(format!("trial {t}: weights sum to {sum}"));
        }
        let scores: Vec<f64> = mem.row_iter().map(|m| m.iter().zip(&h).map(|(a, b)| a * b).sum()).collect();
        let offset = rng.gen_range(-50.0..50.0);
        let shifted: Vec<f64> = scores.iter().map(|s| s + offset).collect();
        let w2 = omae::network::softmax_scores(&shifted);
        for (a, b) in r.weights.iter().zip(&w2) {
            if (a - b).abs() > 1e-9 {
                return Err(format!("trial {t}: shift by {offset} moved a weight from {a} to {b}"));
            }
        }
        for j in 0..d {
            let c: f64 = (0..n).map(|i| r.weights[i] * mem[(i, j)]).sum();
            if (c - r.readout[j]).abs() > 1e-9 * (1.0 + c.abs()) {
                return Err(format!("trial {t}: readout mismatch"));
            }
        }
        let best = r.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if r.weights[r.nearest] != best {
            return Err(format!("trial {t}: nearest is not the argmax"));
        }
    }
    Ok(())
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0), rng.gen_range(2.0..20.0), rng.gen_range(2.0..20.0))
}

/// Up to `max_tracks` tracks over one or two videos.
pub fn random_ground_truth(rng: &mut ChaCha8Rng, max_tracks: u32) -> Vec<GroundTruth> {
    let videos = rng.gen_range(1..=2);
    let mut gts: Vec<GroundTruth> = (0..videos).map(|v| GroundTruth::normal(format!("v{v}"), rng.gen_range(8..16))).collect();
    for track in 0..rng.gen_range(1..=max_tracks) {
        let g = &mut gts[rng.gen_range(0..videos)];
        let frames = g.frame_count() as u32;
        let start = rng.gen_range(0..frames);
        let end = (start + rng.gen_range(1..6)).min(frames);
        for f in start..end {
            g.frame_labels[f as usize] = true;
            g.regions.push(Region {
                frame_index: f,
                track_id: track,
                bbox: random_box(rng),
            });
        }
    }
    gts
}

pub fn random_detections(rng: &mut ChaCha8Rng, gts: &[GroundTruth], max: usize) -> Vec<Detection> {
    let all: Vec<(String, Region)> = gts.iter().flat_map(|g| g.regions.iter().map(|r| (g.video_id.clone(), *r))).collect();
    (0..rng.gen_range(0..=max))
        .map(|_| {
            let score = rng.gen_range(0..10) as f64 / 9.0;
            if rng.gen_bool(0.5) {
                let (vid, r) = &all[rng.gen_range(0..all.len())];
                let b = r.bbox;
                let jitter = BBox::new(b.x + rng.gen_range(-3.0..3.0), b.y + rng.gen_range(-3.0..3.0), b.w, b.h);
                Detection {
                    video_id: vid.clone(),
                    frame_index: r.frame_index,
                    bbox: jitter,
                    score,
                }
            } else {
                let g = &gts[rng.gen_range(0..gts.len())];
                Detection {
                    video_id: g.video_id.clone(),
                    frame_index: rng.gen_range(0..g.frame_count() as u32),
                    bbox: random_box(rng),
                    score,
                }
            }
        })
        .collect()
}

/// Fast RBDC/TBDC against per-threshold recomputation, and frame AUC
/// against the pairwise rank statistic.
pub fn metric_oracle_trials(trials: usize, seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    for t in 0..trials {
        let gts = random_ground_truth(&mut rng, 5);
        let dets = random_detections(&mut rng, &gts, 20);
        let cfg = MetricConfig {
            overlap: if rng.gen_bool(0.5) { metrics::OverlapMode::GtArea } else { metrics::OverlapMode::Iou },
            ..MetricConfig::default()
        };
        let fast = metrics::rbdc(&dets, &gts, &cfg).map_err(|e| e.to_string())?;
        if fast != brute_force::rbdc(&dets, &gts, &cfg) {
            return Err(format!("trial {t}: rbdc differs from brute force"));
        }
        let fast = metrics::tbdc(&dets, &gts, &cfg).map_err(|e| e.to_string())?;
        if fast != brute_force::tbdc(&dets, &gts, &cfg) {
            return Err(format!("trial {t}: tbdc differs from brute force"));
        }
        let n = rng.gen_range(2..60);
        let levels = rng.gen_range(2..12);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[n - 1] = false;
        let auc = metrics::frame_auc(std::slice::from_ref(&scores), std::slice::from_ref(&labels), metrics::Averaging::Micro).map_err(|e| e.to_string())?;
        let pairs = brute_force::pairwise_auc(&scores, &labels);
        if (auc - pairs).abs() > 1e-12 {
            return Err(format!("trial {t}: frame auc {auc} vs pairwise {pairs}"));
        }
    }
    Ok(())
}
