//! Adam training loop, lowest-loss checkpoint selection, and a
//! finite-difference gradient checker.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{BBox, FeatureRecord, VideoFeatureSet};
use crate::losses::{evaluate, total_loss_and_grads, LossWeights};
use crate::network::{BatchInput, ModelParams, NetworkSpec, PARAM_GROUPS};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub hidden_dim: usize,
    pub memory_items: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 256,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            hidden_dim: 128,
            memory_items: 40,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("invalid Adam constants".into()));
        }
        if self.hidden_dim < 1 || self.memory_items < 1 {
            return Err(Error::Config("hidden dimension and memory size must be >= 1".into()));
        }
        self.weights.validate()
    }

    pub fn spec_for(&self, d_app: usize, d_mo: usize) -> NetworkSpec {
        NetworkSpec::new(d_app, d_mo, self.hidden_dim, self.memory_items)
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

/// Bias-corrected Adam update of one tensor. `step` is the 1-based step count.
pub fn adam_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, hp: &AdamHyper) {
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, hp: &AdamHyper) -> Result<()> {
    for (group, g) in grads.tensors() {
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("Adam step {}: gradient of {group} is {bad}", state.step + 1)));
        }
    }
    state.step += 1;
    let step = state.step;
    let grads = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((_, theta), (_, g)), (_, m)), (_, v)) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        adam_update(theta, g, m, v, step, hp);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss of the end-of-epoch parameters over that epoch's batches.
    pub loss: f64,
    /// Mean of the per-batch losses seen while updating.
    pub running_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

impl TrainOutcome {
    pub fn best_loss(&self) -> f64 {
        self.history[self.best_epoch - 1].loss
    }

    /// `epoch,loss` per line.
    pub fn history_text(&self) -> String {
        let mut s = String::new();
        for e in &self.history {
            let _ = writeln!(s, "{},{:.9}", e.epoch, e.loss);
        }
        s
    }

    pub fn write_history(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.history_text()).map_err(|e| Error::io(path, e))
    }
}

/// Batch-size-weighted mean loss over a fixed batch sequence.
pub fn mean_loss_over(params: &ModelParams, batches: &[BatchInput], weights: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in batches {
        total += evaluate(params, b, weights)?.0.total * b.len() as f64;
        count += b.len();
    }
    Ok(total / count as f64)
}

/// The epoch's batches in shuffled order; the last batch may be short.
pub fn epoch_batches(
    spec: &NetworkSpec,
    records: &[&FeatureRecord],
    order: &[usize],
    batch_size: usize,
) -> Result<Vec<BatchInput>> {
    order
        .chunks(batch_size)
        .map(|idx| {
            let recs: Vec<&FeatureRecord> = idx.iter().map(|&i| records[i]).collect();
            BatchInput::from_records(spec, &recs)
        })
        .collect()
}

/// Trains from a seeded initialisation and returns the parameters of the
/// epoch with the lowest mean loss (earliest on ties).
pub fn train(datasets: &[VideoFeatureSet], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let records: Vec<&FeatureRecord> = datasets.iter().flat_map(|d| d.records.iter()).collect();
    if records.is_empty() {
        return Err(Error::Config("training set has no records".into()));
    }
    let first = &datasets.iter().find(|d| !d.records.is_empty()).expect("non-empty");
    let spec = config.spec_for(first.d_app, first.d_mo);
    spec.validate()?;
    let params = ModelParams::init(&spec, config.seed)?;
    train_from(params, &records, config)
}

/// Same as [`train`] but starting from the given parameters.
pub fn train_from(mut params: ModelParams, records: &[&FeatureRecord], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::Config("training set has no records".into()));
    }
    let spec = params.spec.clone();
    let hp = AdamHyper::from(config);
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let batches = epoch_batches(&spec, records, &order, config.batch_size)?;
        let mut running = 0.0;
        let mut guarded = 0;
        for batch in &batches {
            let (loss, grads) = total_loss_and_grads(&params, batch, &config.weights)?;
            running += loss.total * batch.len() as f64;
            guarded += loss.cosine_guarded;
            adam_step(&mut params, &grads, &mut state, &hp)?;
        }
        if guarded > 0 {
            warn!("epoch {epoch}: cosine term skipped for {guarded} zero-norm samples");
        }
        let loss = mean_loss_over(&params, &batches, &config.weights)?;
        let stats = EpochStats {
            epoch,
            loss,
            running_loss: running / records.len() as f64,
        };
        info!("epoch {epoch}: loss {loss:.6} (running {:.6})", stats.running_loss);
        history.push(stats);
        if best.as_ref().is_none_or(|(_, l, _)| loss < *l) {
            best = Some((epoch, loss, params.clone()));
        }
    }
    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best_params,
        best_epoch,
        history,
    })
}

/// Finite-difference check settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub d_app: usize,
    pub d_mo: usize,
    pub hidden_dim: usize,
    pub memory_items: usize,
    pub width: usize,
    pub batch: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
    pub weights: LossWeights,
    /// Use all-zero parameters instead of a random initialisation.
    pub zero_params: bool,
    /// Multiplier on the initial weights of the random instance.
    pub weight_gain: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            d_app: 6,
            d_mo: 4,
            hidden_dim: 5,
            memory_items: 4,
            width: 7,
            batch: 8,
            step: 1e-4,
            tolerance: 1e-3,
            floor: 1e-6,
            weights: LossWeights::default(),
            zero_params: false,
            weight_gain: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    /// Max relative error per parameter group.
    pub max_rel_error: BTreeMap<&'static str, f64>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU, argmax, hinge or
    /// `max(delta, .)` switch and were therefore skipped.
    pub excluded: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn overall(&self) -> f64 {
        self.max_rel_error.values().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.overall() < self.tolerance
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "seed {}: checked {} excluded {} max_rel {:.3e} {}",
            self.seed,
            self.checked,
            self.excluded,
            self.overall(),
            if self.passed() { "ok" } else { "FAIL" }
        );
        for (g, e) in &self.max_rel_error {
            let _ = write!(s, " {g}={e:.2e}");
        }
        s
    }
}

/// Discrete state of every non-smooth operation in the loss.
#[derive(Debug, Clone, PartialEq)]
struct SwitchState {
    relu: Vec<bool>,
    nearest: Vec<usize>,
    second: Vec<Option<usize>>,
    hinge: Vec<bool>,
    ole: Vec<bool>,
    cells: Vec<usize>,
}

fn loss_and_switches(params: &ModelParams, input: &BatchInput, w: &LossWeights) -> Result<(f64, SwitchState)> {
    let (loss, fwd, mem) = evaluate(params, input, w)?;
    let mut relu = fwd.cache_app.relu_pattern(&params.enc_app);
    relu.extend(fwd.cache_mag.relu_pattern(&params.enc_mag));
    relu.extend(fwd.cache_ang.relu_pattern(&params.enc_ang));
    relu.extend(fwd.cache_fusion.relu_pattern(&params.fusion));
    relu.extend(fwd.cache_decoder.relu_pattern(&params.decoder));
    let state = SwitchState {
        relu,
        cells: fwd.nearest.clone(),
        nearest: fwd.nearest,
        second: fwd.second,
        hinge: mem.hinge_active,
        ole: mem.ole_active,
    };
    Ok((loss.total, state))
}

pub fn random_records(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Vec<FeatureRecord> {
    (0..cfg.batch)
        .map(|i| FeatureRecord {
            frame_index: 0,
            object_id: i as u32,
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
            x_app: (0..cfg.d_app).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            x_mag: (0..cfg.d_mo).map(|_| rng.gen_range(0.0..2.0)).collect(),
            x_ang: (0..cfg.d_mo).map(|_| rng.gen_range(0.0..1.0)).collect(),
        })
        .collect()
}

/// Compares analytic gradients with central differences on a random
/// instance. Failures are reported, not raised.
pub fn gradient_check(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let spec = NetworkSpec::uniform(cfg.d_app, cfg.d_mo, cfg.hidden_dim, cfg.memory_items, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = if cfg.zero_params {
        ModelParams::zeros(&spec)?
    } else {
        ModelParams::init(&spec, rng.gen())?
    };
    if !cfg.zero_params {
        // The default init shrinks activations layer by layer, which maps the
        // whole batch onto nearly one embedding and leaves H with singular
        // values of the order of the step. Variance-preserving weights keep
        // the embeddings spread; the memory is rescaled to the same range.
        for stack in [&mut params.enc_app, &mut params.enc_mag, &mut params.enc_ang, &mut params.fusion, &mut params.decoder] {
            for l in stack.layers.iter_mut() {
                l.weight.iter_mut().for_each(|w| *w *= cfg.weight_gain);
                l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
            }
        }
        let spread = rng.gen_range(1.0..3.0);
        params.memory.iter_mut().for_each(|m| *m *= spread);
    }
    let records = random_records(cfg, &mut rng);
    let refs: Vec<&FeatureRecord> = records.iter().collect();
    let input = BatchInput::from_records(&spec, &refs)?;
    let (_, grads) = total_loss_and_grads(&params, &input, &cfg.weights)?;
    let (_, base_state) = loss_and_switches(&params, &input, &cfg.weights)?;

    let mut max_rel: BTreeMap<&'static str, f64> = PARAM_GROUPS.iter().map(|&g| (g, 0.0)).collect();
    let mut checked = 0;
    let mut excluded = 0;
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
    let groups: Vec<&'static str> = params.tensors().into_iter().map(|(g, _)| g).collect();
    for (ti, group) in groups.iter().enumerate() {
        for ci in 0..analytic[ti].len() {
            let orig = params.tensors()[ti].1[ci];
            let mut eval_at = |value: f64| -> Result<(f64, SwitchState)> {
                params.tensors_mut()[ti].1[ci] = value;
                loss_and_switches(&params, &input, &cfg.weights)
            };
            let (plus, s_plus) = eval_at(orig + cfg.step)?;
            let (minus, s_minus) = eval_at(orig - cfg.step)?;
            params.tensors_mut()[ti].1[ci] = orig;
            if s_plus != base_state || s_minus != base_state {
                excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[ti][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            let slot = max_rel.get_mut(group).expect("known group");
            *slot = slot.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        seed,
        max_rel_error: max_rel,
        checked,
        excluded,
        tolerance: cfg.tolerance,
    })
}
