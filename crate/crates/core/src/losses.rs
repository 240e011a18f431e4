//! Training objectives and their exact reverse-mode gradients.
//!
//! The total batch loss is
//!
//! ```text
//! L = mean_j L_rec(j)
//!   + lambda_comp * mean_j ||h_j - m_k(j)||
//!   + lambda_tr   * mean_j max(0, ||h_j - m_p(j)||^2 - ||h_j - m_n(j)||^2 + margin)
//!   + lambda_ole  * (sum_c max(delta, ||H_c||_*) - ||H||_*)
//! ```
//!
//! where `k = p` is the attention argmax, `n` the runner-up, and `H_c` the
//! rows of the batch embedding matrix assigned to item `c`. Index selection is
//! treated as constant when differentiating.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::features::FeatureRecord;
use crate::linalg::jacobi_svd;
use crate::network::{forward_batch, BatchForward, BatchInput, ForwardTrace, ModelParams};

/// Squared-norm offset used when differentiating `||v||` near zero.
pub const NORM_GUARD: f64 = 1e-12;
/// Singular values below this are dropped from the nuclear-norm subgradient.
pub const SV_CUTOFF: f64 = 1e-6;
/// Vectors shorter than this make the cosine term undefined; it is then 0.
pub const COS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cos: f64,
    pub lambda_comp: f64,
    pub lambda_tr: f64,
    pub lambda_ole: f64,
    pub delta: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cos: 0.1,
            lambda_comp: 1.6,
            lambda_tr: 0.2,
            lambda_ole: 0.3,
            delta: 1.0,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn reconstruction_only(lambda_cos: f64) -> Self {
        Self {
            lambda_cos,
            lambda_comp: 0.0,
            lambda_tr: 0.0,
            lambda_ole: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cos, self.lambda_comp, self.lambda_tr, self.lambda_ole, self.delta, self.margin];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if self.delta <= 0.0 {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Nearest and second-nearest memory items per sample, and the induced
/// partition of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchAssignment {
    pub nearest: Vec<usize>,
    pub second: Vec<Option<usize>>,
    /// Batch row indices per memory item; only non-empty cells are present.
    pub cells: BTreeMap<usize, Vec<usize>>,
}

impl BatchAssignment {
    pub fn new(nearest: Vec<usize>, second: Vec<Option<usize>>) -> Self {
        let mut cells: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (j, &k) in nearest.iter().enumerate() {
            cells.entry(k).or_default().push(j);
        }
        Self { nearest, second, cells }
    }

    pub fn from_forward(fwd: &BatchForward) -> Self {
        Self::new(fwd.nearest.clone(), fwd.second.clone())
    }

    /// Assignment by attention weights, `softmax(h M^T)`, for an arbitrary
    /// embedding matrix.
    pub fn from_attention(h: &DMatrix<f64>, memory: &DMatrix<f64>) -> Result<Self> {
        let mut nearest = Vec::with_capacity(h.nrows());
        let mut second = Vec::with_capacity(h.nrows());
        for row in h.row_iter() {
            let q: Vec<f64> = row.iter().copied().collect();
            let r = crate::network::memory_read(memory, &q)?;
            nearest.push(r.nearest);
            second.push(r.second);
        }
        Ok(Self::new(nearest, second))
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Cosine similarity, `None` when either vector is (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na < COS_EPS || nb < COS_EPS {
        None
    } else {
        Some(dot(a, b) / (na * nb))
    }
}

/// `1 - cos(a, b)`, zero when the cosine is undefined.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b).map_or(0.0, |c| 1.0 - c)
}

fn record_vectors(rec: &FeatureRecord) -> (Vec<f64>, Vec<f64>) {
    let app = rec.x_app.iter().map(|&v| v as f64).collect();
    let mo = rec.x_mag.iter().chain(&rec.x_ang).map(|&v| v as f64).collect();
    (app, mo)
}

/// Per-object reconstruction loss: unsquared L2 on appearance and motion plus
/// the appearance cosine term.
pub fn loss_rec(rec: &FeatureRecord, trace: &ForwardTrace, lambda_cos: f64) -> f64 {
    let (app, mo) = record_vectors(rec);
    let mo_hat: Vec<f64> = trace.xhat_mag.iter().chain(&trace.xhat_ang).copied().collect();
    dist(&app, &trace.xhat_app) + dist(&mo, &mo_hat) + lambda_cos * cosine_distance(&app, &trace.xhat_app)
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Sum over samples of `||h_j - m_k(j)||`.
pub fn loss_comp(h: &DMatrix<f64>, memory: &DMatrix<f64>, assign: &BatchAssignment) -> f64 {
    let mut total = 0.0;
    for (&k, members) in &assign.cells {
        let m = row(memory, k);
        for &j in members {
            total += dist(&row(h, j), &m);
        }
    }
    total
}

/// Sum over samples of the hinge on squared distances to the first and
/// second nearest items.
pub fn loss_triplet(h: &DMatrix<f64>, memory: &DMatrix<f64>, assign: &BatchAssignment, margin: f64) -> Result<f64> {
    if memory.nrows() < 2 {
        return Err(Error::Config("triplet loss needs at least two memory items".into()));
    }
    let mut total = 0.0;
    for j in 0..h.nrows() {
        let (p, n) = (assign.nearest[j], assign.second[j].expect("N >= 2 gives a runner-up"));
        let hj = row(h, j);
        let dp = dist(&hj, &row(memory, p)).powi(2);
        let dn = dist(&hj, &row(memory, n)).powi(2);
        total += (dp - dn + margin).max(0.0);
    }
    Ok(total)
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    Ok(jacobi_svd(m)?.s.iter().sum())
}

/// Nuclear norm and the subgradient `U V^T` over singular values above
/// [`SV_CUTOFF`].
pub fn nuclear_norm_with_subgradient(m: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    if m.is_empty() {
        return Ok((0.0, m.clone()));
    }
    let svd = jacobi_svd(m)?;
    let mut g = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, &sv) in svd.s.iter().enumerate() {
        if sv > SV_CUTOFF {
            g += svd.u.column(i) * svd.v.column(i).transpose();
        }
    }
    Ok((svd.s.iter().sum(), g))
}

fn gather_rows(h: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), h.ncols(), |i, j| h[(rows[i], j)])
}

/// `sum_c max(delta, ||H_c||_*) - ||H||_*` over the non-empty cells.
pub fn loss_ole(h: &DMatrix<f64>, assign: &BatchAssignment, delta: f64) -> Result<f64> {
    if h.nrows() == 0 {
        return Err(Error::Config("OLE loss needs a non-empty batch".into()));
    }
    let mut total = 0.0;
    for members in assign.cells.values() {
        total += nuclear_norm(&gather_rows(h, members))?.max(delta);
    }
    Ok(total - nuclear_norm(h)?)
}

/// Batch loss and its terms. `rec`, `comp` and `triplet` are batch means;
/// `total` already includes the lambda weights.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub rec: f64,
    pub comp: f64,
    pub triplet: f64,
    pub ole: f64,
    /// Samples whose cosine term was dropped because a vector had zero norm.
    pub cosine_guarded: usize,
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{name} loss (value {v})")))
    }
}

/// Reconstruction loss values and the gradient with respect to the decoder
/// output, both already divided by the batch size.
fn rec_terms(input: &BatchInput, xhat: &DMatrix<f64>, lambda_cos: f64, want_grad: bool) -> (f64, usize, DMatrix<f64>) {
    let b = input.len();
    let scale = 1.0 / b as f64;
    let target = input.target();
    let da = input.app.ncols();
    let width = target.ncols();
    let mut total = 0.0;
    let mut guarded = 0;
    let mut grad = if want_grad { DMatrix::zeros(b, width) } else { DMatrix::zeros(0, 0) };
    for i in 0..b {
        let x = row(&target, i);
        let y = row(xhat, i);
        let (xa, ya) = (&x[..da], &y[..da]);
        let (xm, ym) = (&x[da..], &y[da..]);
        let ra: Vec<f64> = ya.iter().zip(xa).map(|(p, q)| p - q).collect();
        let rm: Vec<f64> = ym.iter().zip(xm).map(|(p, q)| p - q).collect();
        let (na, nm) = (norm(&ra), norm(&rm));
        total += na + nm;
        let cos = cosine(xa, ya);
        match cos {
            Some(c) => total += lambda_cos * (1.0 - c),
            None => guarded += 1,
        }
        if want_grad {
            let ga = (na * na + NORM_GUARD).sqrt();
            let gm = (nm * nm + NORM_GUARD).sqrt();
            for j in 0..da {
                grad[(i, j)] = scale * ra[j] / ga;
            }
            for j in 0..rm.len() {
                grad[(i, da + j)] = scale * rm[j] / gm;
            }
            if let Some(c) = cos {
                let (nx, ny) = (norm(xa), norm(ya));
                for j in 0..da {
                    let dcos = xa[j] / (nx * ny) - c * ya[j] / (ny * ny);
                    grad[(i, j)] -= scale * lambda_cos * dcos;
                }
            }
        }
    }
    (total * scale, guarded, grad)
}

/// Gradients of the weighted memory losses with respect to `h` and the
/// memory matrix.
#[derive(Debug, Clone)]
pub struct MemoryLossGrads {
    pub comp: f64,
    pub triplet: f64,
    pub ole: f64,
    pub d_h: DMatrix<f64>,
    pub d_memory: DMatrix<f64>,
    /// Per sample: whether the triplet hinge is active.
    pub hinge_active: Vec<bool>,
    /// Signed distance of each hinge argument from its switching point.
    pub hinge_margin: Vec<f64>,
    /// Per cell, in `cells` order: whether `||H_c||_* > delta`.
    pub ole_active: Vec<bool>,
    pub ole_margin: Vec<f64>,
}

pub fn memory_losses(
    h: &DMatrix<f64>,
    memory: &DMatrix<f64>,
    assign: &BatchAssignment,
    weights: &LossWeights,
) -> Result<MemoryLossGrads> {
    let b = h.nrows();
    let scale = 1.0 / b as f64;
    let mut d_h = DMatrix::zeros(b, h.ncols());
    let mut d_memory = DMatrix::zeros(memory.nrows(), memory.ncols());

    let mut comp = 0.0;
    for j in 0..b {
        let k = assign.nearest[j];
        let diff = h.row(j) - memory.row(k);
        let n = diff.norm();
        comp += n;
        let g = diff / (n * n + NORM_GUARD).sqrt() * (weights.lambda_comp * scale);
        let mut hr = d_h.row_mut(j);
        hr += &g;
        let mut mr = d_memory.row_mut(k);
        mr -= &g;
    }

    let mut triplet = 0.0;
    let mut hinge_active = vec![false; b];
    let mut hinge_margin = vec![f64::INFINITY; b];
    if memory.nrows() >= 2 {
        for j in 0..b {
            let p = assign.nearest[j];
            let n = assign.second[j].expect("N >= 2 gives a runner-up");
            let dp = h.row(j) - memory.row(p);
            let dn = h.row(j) - memory.row(n);
            let arg = dp.norm_squared() - dn.norm_squared() + weights.margin;
            hinge_margin[j] = arg;
            if arg > 0.0 {
                triplet += arg;
                hinge_active[j] = true;
                let s = 2.0 * weights.lambda_tr * scale;
                let mut hr = d_h.row_mut(j);
                hr += (&dp - &dn) * s;
                let mut pr = d_memory.row_mut(p);
                pr -= &dp * s;
                let mut nr = d_memory.row_mut(n);
                nr += &dn * s;
            }
        }
    } else if weights.lambda_tr != 0.0 {
        return Err(Error::Config("triplet loss needs at least two memory items".into()));
    }

    let mut ole = 0.0;
    let mut ole_active = Vec::with_capacity(assign.cells.len());
    let mut ole_margin = Vec::with_capacity(assign.cells.len());
    for members in assign.cells.values() {
        let hc = gather_rows(h, members);
        let (nuc, g) = nuclear_norm_with_subgradient(&hc)?;
        ole_margin.push(nuc - weights.delta);
        if nuc > weights.delta {
            ole += nuc;
            ole_active.push(true);
            for (r, &j) in members.iter().enumerate() {
                let mut hr = d_h.row_mut(j);
                hr += g.row(r) * weights.lambda_ole;
            }
        } else {
            ole += weights.delta;
            ole_active.push(false);
        }
    }
    if b > 0 {
        let (nuc, g) = nuclear_norm_with_subgradient(h)?;
        ole -= nuc;
        d_h -= g * weights.lambda_ole;
    }

    Ok(MemoryLossGrads {
        comp: comp * scale,
        triplet: triplet * scale,
        ole,
        d_h,
        d_memory,
        hinge_active,
        hinge_margin,
        ole_active,
        ole_margin,
    })
}

fn breakdown(rec: f64, guarded: usize, mem: &MemoryLossGrads, w: &LossWeights) -> Result<LossBreakdown> {
    let rec = check_finite("reconstruction", rec)?;
    let comp = check_finite("compactness", mem.comp)?;
    let triplet = check_finite("triplet", mem.triplet)?;
    let ole = check_finite("OLE", mem.ole)?;
    let total = rec + w.lambda_comp * comp + w.lambda_tr * triplet + w.lambda_ole * ole;
    Ok(LossBreakdown {
        total: check_finite("total", total)?,
        rec,
        comp,
        triplet,
        ole,
        cosine_guarded: guarded,
    })
}

/// Loss value only (one forward pass).
pub fn total_loss(params: &ModelParams, input: &BatchInput, weights: &LossWeights) -> Result<LossBreakdown> {
    Ok(evaluate(params, input, weights)?.0)
}

/// Loss plus the forward pass and memory-loss details it was computed from.
pub fn evaluate(
    params: &ModelParams,
    input: &BatchInput,
    weights: &LossWeights,
) -> Result<(LossBreakdown, BatchForward, MemoryLossGrads)> {
    if input.is_empty() {
        return Err(Error::Config("loss of an empty batch".into()));
    }
    weights.validate()?;
    let fwd = forward_batch(params, input)?;
    let (rec, guarded, _) = rec_terms(input, &fwd.xhat, weights.lambda_cos, false);
    let assign = BatchAssignment::from_forward(&fwd);
    let mem = memory_losses(&fwd.h, &params.memory, &assign, weights)?;
    Ok((breakdown(rec, guarded, &mem, weights)?, fwd, mem))
}

pub fn total_loss_and_grads(
    params: &ModelParams,
    input: &BatchInput,
    weights: &LossWeights,
) -> Result<(LossBreakdown, ModelParams)> {
    if input.is_empty() {
        return Err(Error::Config("loss of an empty batch".into()));
    }
    weights.validate()?;
    let fwd = forward_batch(params, input)?;
    let (rec, guarded, d_xhat) = rec_terms(input, &fwd.xhat, weights.lambda_cos, true);
    let assign = BatchAssignment::from_forward(&fwd);
    let mem = memory_losses(&fwd.h, &params.memory, &assign, weights)?;
    let loss = breakdown(rec, guarded, &mem, weights)?;

    let mut grads = params.zeros_like();
    let d_h_dim = params.spec.hidden_dim();

    // decoder, then split dz = (dc || dh)
    let d_z = params.decoder.backward(&fwd.cache_decoder, d_xhat, &mut grads.decoder);
    let d_c = d_z.columns(0, d_h_dim).into_owned();
    let mut d_h = d_z.columns(d_h_dim, d_h_dim).into_owned();

    // readout c = A M
    let d_attn = &d_c * params.memory.transpose();
    grads.memory += fwd.attn.tr_mul(&d_c);

    // softmax over scores S = H M^T
    let mut d_scores = DMatrix::zeros(d_attn.nrows(), d_attn.ncols());
    for i in 0..d_attn.nrows() {
        let inner: f64 = (0..d_attn.ncols()).map(|j| fwd.attn[(i, j)] * d_attn[(i, j)]).sum();
        for j in 0..d_attn.ncols() {
            d_scores[(i, j)] = fwd.attn[(i, j)] * (d_attn[(i, j)] - inner);
        }
    }
    d_h += &d_scores * &params.memory;
    grads.memory += d_scores.tr_mul(&fwd.h);

    d_h += &mem.d_h;
    grads.memory += &mem.d_memory;

    let d_fused = params.fusion.backward(&fwd.cache_fusion, d_h, &mut grads.fusion);
    let wa = *params.spec.enc_app.last().unwrap();
    let wm = *params.spec.enc_mag.last().unwrap();
    let wg = *params.spec.enc_ang.last().unwrap();
    params
        .enc_app
        .backward(&fwd.cache_app, d_fused.columns(0, wa).into_owned(), &mut grads.enc_app);
    params
        .enc_mag
        .backward(&fwd.cache_mag, d_fused.columns(wa, wm).into_owned(), &mut grads.enc_mag);
    params
        .enc_ang
        .backward(&fwd.cache_ang, d_fused.columns(wa + wm, wg).into_owned(), &mut grads.enc_ang);

    for (group, t) in grads.tensors() {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("gradient of {group}")));
        }
    }
    Ok((loss, grads))
}
