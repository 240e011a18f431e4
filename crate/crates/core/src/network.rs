//! The autoencoder: three modality encoders, a fusion block producing the
//! action embedding `h`, a memory of `N` prototype items read by softmax
//! attention, and a decoder fed with `z = (c || h)`.
//!
//! All arithmetic is batched, one object per matrix row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Layer widths of every sub-network, input width first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub d_app: usize,
    pub d_mo: usize,
    pub enc_app: Vec<usize>,
    pub enc_mag: Vec<usize>,
    pub enc_ang: Vec<usize>,
    pub fusion: Vec<usize>,
    pub decoder: Vec<usize>,
    pub memory_items: usize,
}

impl NetworkSpec {
    /// Default widths: two two-layer blocks per encoder, a two-layer fusion
    /// block, and a three-layer decoder.
    pub fn new(d_app: usize, d_mo: usize, hidden_dim: usize, memory_items: usize) -> Self {
        Self {
            d_app,
            d_mo,
            enc_app: vec![d_app, 256, 128, 128, 64],
            enc_mag: vec![d_mo, 128, 64, 64, 32],
            enc_ang: vec![d_mo, 128, 64, 64, 32],
            fusion: vec![128, 128, hidden_dim],
            decoder: vec![2 * hidden_dim, 256, 512, d_app + 2 * d_mo],
            memory_items,
        }
    }

    /// Same topology with every hidden width set to `width`; used for
    /// gradient checks and small experiments.
    pub fn uniform(d_app: usize, d_mo: usize, hidden_dim: usize, memory_items: usize, width: usize) -> Self {
        Self {
            d_app,
            d_mo,
            enc_app: vec![d_app, width, width, width, width],
            enc_mag: vec![d_mo, width, width, width, width],
            enc_ang: vec![d_mo, width, width, width, width],
            fusion: vec![3 * width, width, hidden_dim],
            decoder: vec![2 * hidden_dim, width, width, d_app + 2 * d_mo],
            memory_items,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        *self.fusion.last().unwrap_or(&0)
    }

    pub fn output_dim(&self) -> usize {
        self.d_app + 2 * self.d_mo
    }

    pub fn validate(&self) -> Result<()> {
        let chains = [
            ("enc_app", &self.enc_app),
            ("enc_mag", &self.enc_mag),
            ("enc_ang", &self.enc_ang),
            ("fusion", &self.fusion),
            ("decoder", &self.decoder),
        ];
        for (name, c) in chains {
            if c.len() < 2 || c.contains(&0) {
                return Err(Error::Config(format!("{name}: need at least one layer and widths >= 1")));
            }
        }
        let check = |ctx: &str, expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::dim(ctx, expected, actual))
            }
        };
        check("enc_app input", self.d_app, self.enc_app[0])?;
        check("enc_mag input", self.d_mo, self.enc_mag[0])?;
        check("enc_ang input", self.d_mo, self.enc_ang[0])?;
        let bottleneck = self.enc_app.last().unwrap() + self.enc_mag.last().unwrap() + self.enc_ang.last().unwrap();
        check("fusion input", bottleneck, self.fusion[0])?;
        check("decoder input", 2 * self.hidden_dim(), self.decoder[0])?;
        check("decoder output", self.output_dim(), *self.decoder.last().unwrap())?;
        if self.memory_items == 0 {
            return Err(Error::Config("memory needs at least one item".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Dense {
    fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weight: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
            activation,
        }
    }
}

/// Intermediate values of one stack, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StackCache {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl StackCache {
    /// `true` for every pre-activation feeding a ReLU that is strictly positive.
    pub fn relu_pattern(&self, stack: &Stack) -> Vec<bool> {
        stack
            .layers
            .iter()
            .zip(&self.pre)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, p)| p.iter().map(|&v| v > 0.0).collect::<Vec<_>>())
            .collect()
    }

    /// Smallest |pre-activation| over all ReLU inputs.
    pub fn relu_margin(&self, stack: &Stack) -> f64 {
        stack
            .layers
            .iter()
            .zip(&self.pre)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, p)| p.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub layers: Vec<Dense>,
}

impl Stack {
    /// ReLU on every layer but the last.
    fn zeros(widths: &[usize]) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Identity } else { Activation::Relu };
                Dense::zeros(widths[i], widths[i + 1], act)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, x: &DMatrix<f64>, name: &str) -> Result<(DMatrix<f64>, StackCache)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = &cur * layer.weight.transpose();
            for mut row in y.row_iter_mut() {
                row += layer.bias.transpose();
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("{name} layer {i} (non-finite pre-activation)")));
            }
            let out = match layer.activation {
                Activation::Relu => y.map(|v| v.max(0.0)),
                Activation::Identity => y.clone(),
            };
            inputs.push(cur);
            pre.push(y);
            cur = out;
        }
        Ok((cur, StackCache { inputs, pre }))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the stack input.
    pub fn backward(&self, cache: &StackCache, d_out: DMatrix<f64>, grads: &mut Stack) -> DMatrix<f64> {
        let mut d = d_out;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if layer.activation == Activation::Relu {
                d.zip_apply(&cache.pre[i], |g, p| {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let g = &mut grads.layers[i];
            g.weight += d.tr_mul(&cache.inputs[i]);
            for row in d.row_iter() {
                g.bias += row.transpose();
            }
            d = &d * &layer.weight;
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: NetworkSpec,
    pub enc_app: Stack,
    pub enc_mag: Stack,
    pub enc_ang: Stack,
    pub fusion: Stack,
    /// `N x d_h`, one memory item per row.
    pub memory: DMatrix<f64>,
    pub decoder: Stack,
}

pub const PARAM_GROUPS: [&str; 6] = ["enc_app", "enc_mag", "enc_ang", "fusion", "memory", "decoder"];

impl ModelParams {
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            enc_app: Stack::zeros(&spec.enc_app),
            enc_mag: Stack::zeros(&spec.enc_mag),
            enc_ang: Stack::zeros(&spec.enc_ang),
            fusion: Stack::zeros(&spec.fusion),
            memory: DMatrix::zeros(spec.memory_items, spec.hidden_dim()),
            decoder: Stack::zeros(&spec.decoder),
        })
    }

    /// Uniform weights in +-1/sqrt(fan_in), zero biases, memory uniform in
    /// +-1/sqrt(d_h).
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for stack in [&mut p.enc_app, &mut p.enc_mag, &mut p.enc_ang, &mut p.fusion, &mut p.decoder] {
            for layer in stack.layers.iter_mut() {
                let bound = 1.0 / (layer.weight.ncols() as f64).sqrt();
                layer.weight.iter_mut().for_each(|w| *w = rng.gen_range(-bound..=bound));
            }
        }
        let bound = 1.0 / (spec.hidden_dim() as f64).sqrt();
        p.memory.iter_mut().for_each(|m| *m = rng.gen_range(-bound..=bound));
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.spec).expect("spec already validated")
    }

    /// Every parameter tensor in canonical order, tagged with its group.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> = Vec::new();
        fn push<'a>(name: &'static str, s: &'a Stack, out: &mut Vec<(&'static str, &'a [f64])>) {
            for l in &s.layers {
                out.push((name, l.weight.as_slice()));
                out.push((name, l.bias.as_slice()));
            }
        }
        push("enc_app", &self.enc_app, &mut out);
        push("enc_mag", &self.enc_mag, &mut out);
        push("enc_ang", &self.enc_ang, &mut out);
        push("fusion", &self.fusion, &mut out);
        out.push(("memory", self.memory.as_slice()));
        push("decoder", &self.decoder, &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = Vec::new();
        fn push<'a>(name: &'static str, s: &'a mut Stack, out: &mut Vec<(&'static str, &'a mut [f64])>) {
            for l in s.layers.iter_mut() {
                out.push((name, l.weight.as_mut_slice()));
                out.push((name, l.bias.as_mut_slice()));
            }
        }
        push("enc_app", &mut self.enc_app, &mut out);
        push("enc_mag", &mut self.enc_mag, &mut out);
        push("enc_ang", &mut self.enc_ang, &mut out);
        push("fusion", &mut self.fusion, &mut out);
        out.push(("memory", self.memory.as_mut_slice()));
        push("decoder", &mut self.decoder, &mut out);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Row-stacked inputs for a batch of records.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub app: DMatrix<f64>,
    pub mag: DMatrix<f64>,
    pub ang: DMatrix<f64>,
}

impl BatchInput {
    pub fn from_records(spec: &NetworkSpec, records: &[&FeatureRecord]) -> Result<Self> {
        let b = records.len();
        let mut app = DMatrix::zeros(b, spec.d_app);
        let mut mag = DMatrix::zeros(b, spec.d_mo);
        let mut ang = DMatrix::zeros(b, spec.d_mo);
        for (i, r) in records.iter().enumerate() {
            let at = || format!("frame {} object {}", r.frame_index, r.object_id);
            if r.x_app.len() != spec.d_app {
                return Err(Error::dim(format!("x_app ({})", at()), spec.d_app, r.x_app.len()));
            }
            if r.x_mag.len() != spec.d_mo || r.x_ang.len() != spec.d_mo {
                let got = if r.x_mag.len() != spec.d_mo { r.x_mag.len() } else { r.x_ang.len() };
                return Err(Error::dim(format!("motion maps ({})", at()), spec.d_mo, got));
            }
            for (j, &v) in r.x_app.iter().enumerate() {
                app[(i, j)] = v as f64;
            }
            for j in 0..spec.d_mo {
                mag[(i, j)] = r.x_mag[j] as f64;
                ang[(i, j)] = r.x_ang[j] as f64;
            }
        }
        Ok(Self { app, mag, ang })
    }

    pub fn len(&self) -> usize {
        self.app.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The reconstruction target `(x_app || x_mag || x_ang)` as one matrix.
    pub fn target(&self) -> DMatrix<f64> {
        let (b, da, dm) = (self.len(), self.app.ncols(), self.mag.ncols());
        let mut t = DMatrix::zeros(b, da + 2 * dm);
        t.columns_mut(0, da).copy_from(&self.app);
        t.columns_mut(da, dm).copy_from(&self.mag);
        t.columns_mut(da + dm, dm).copy_from(&self.ang);
        t
    }
}

/// Attention readout for a single query.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReadout {
    pub weights: Vec<f64>,
    pub nearest: usize,
    pub second: Option<usize>,
    pub readout: Vec<f64>,
}

/// Index of the largest value, lowest index on ties, optionally skipping one.
fn argmax_excluding(v: impl Iterator<Item = f64>, skip: Option<usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in v.enumerate() {
        if Some(i) == skip {
            continue;
        }
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Softmax of `M h` with max-subtraction.
pub fn softmax_scores(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

pub fn memory_read(memory: &DMatrix<f64>, h: &[f64]) -> Result<MemoryReadout> {
    if h.len() != memory.ncols() {
        return Err(Error::dim("memory query", memory.ncols(), h.len()));
    }
    let scores: Vec<f64> = memory.row_iter().map(|m| m.iter().zip(h).map(|(a, b)| a * b).sum()).collect();
    let weights = softmax_scores(&scores);
    let nearest = argmax_excluding(weights.iter().copied(), None).unwrap_or(0);
    let second = argmax_excluding(weights.iter().copied(), Some(nearest));
    let mut readout = vec![0.0; memory.ncols()];
    for (i, w) in weights.iter().enumerate() {
        for (j, r) in readout.iter_mut().enumerate() {
            *r += w * memory[(i, j)];
        }
    }
    Ok(MemoryReadout {
        weights,
        nearest,
        second,
        readout,
    })
}

/// Everything computed by a batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub h: DMatrix<f64>,
    /// Attention weights, `B x N`.
    pub attn: DMatrix<f64>,
    pub nearest: Vec<usize>,
    pub second: Vec<Option<usize>>,
    pub readout: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// Decoder output `(xhat_app || xhat_mag || xhat_ang)`.
    pub xhat: DMatrix<f64>,
    pub cache_app: StackCache,
    pub cache_mag: StackCache,
    pub cache_ang: StackCache,
    pub cache_fusion: StackCache,
    pub cache_decoder: StackCache,
}

/// Per-object view of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub h: Vec<f64>,
    pub w: Vec<f64>,
    pub k: usize,
    pub c: Vec<f64>,
    pub z: Vec<f64>,
    pub xhat_app: Vec<f64>,
    pub xhat_mag: Vec<f64>,
    pub xhat_ang: Vec<f64>,
}

fn hcat(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = parts[0].nrows();
    let cols = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.columns_mut(at, p.ncols()).copy_from(*p);
        at += p.ncols();
    }
    out
}

/// Encoders followed by the fusion block. Returns `h` plus the caches.
pub fn encode_fuse_batch(
    params: &ModelParams,
    input: &BatchInput,
) -> Result<(DMatrix<f64>, [StackCache; 4])> {
    let (ea, ca) = params.enc_app.forward(&input.app, "enc_app")?;
    let (em, cm) = params.enc_mag.forward(&input.mag, "enc_mag")?;
    let (eg, cg) = params.enc_ang.forward(&input.ang, "enc_ang")?;
    let fused_in = hcat(&[&ea, &em, &eg]);
    let (h, cf) = params.fusion.forward(&fused_in, "fusion")?;
    Ok((h, [ca, cm, cg, cf]))
}

pub fn encode_fuse(params: &ModelParams, rec: &FeatureRecord) -> Result<Vec<f64>> {
    let input = BatchInput::from_records(&params.spec, &[rec])?;
    let (h, _) = encode_fuse_batch(params, &input)?;
    Ok(h.row(0).iter().copied().collect())
}

pub fn forward_batch(params: &ModelParams, input: &BatchInput) -> Result<BatchForward> {
    let (h, [cache_app, cache_mag, cache_ang, cache_fusion]) = encode_fuse_batch(params, input)?;
    let b = h.nrows();
    let n = params.memory.nrows();
    let scores = &h * params.memory.transpose();
    let mut attn = DMatrix::zeros(b, n);
    let mut nearest = Vec::with_capacity(b);
    let mut second = Vec::with_capacity(b);
    for i in 0..b {
        let row: Vec<f64> = scores.row(i).iter().copied().collect();
        let w = softmax_scores(&row);
        let k = argmax_excluding(w.iter().copied(), None).unwrap_or(0);
        nearest.push(k);
        second.push(argmax_excluding(w.iter().copied(), Some(k)));
        for (j, v) in w.into_iter().enumerate() {
            attn[(i, j)] = v;
        }
    }
    let readout = &attn * &params.memory;
    let z = hcat(&[&readout, &h]);
    let (xhat, cache_decoder) = params.decoder.forward(&z, "decoder")?;
    Ok(BatchForward {
        h,
        attn,
        nearest,
        second,
        readout,
        z,
        xhat,
        cache_app,
        cache_mag,
        cache_ang,
        cache_fusion,
        cache_decoder,
    })
}

impl BatchForward {
    pub fn trace(&self, i: usize, spec: &NetworkSpec) -> ForwardTrace {
        let row = |m: &DMatrix<f64>| m.row(i).iter().copied().collect::<Vec<_>>();
        let xhat = row(&self.xhat);
        let (da, dm) = (spec.d_app, spec.d_mo);
        ForwardTrace {
            h: row(&self.h),
            w: row(&self.attn),
            k: self.nearest[i],
            c: row(&self.readout),
            z: row(&self.z),
            xhat_app: xhat[..da].to_vec(),
            xhat_mag: xhat[da..da + dm].to_vec(),
            xhat_ang: xhat[da + dm..].to_vec(),
        }
    }
}

pub fn forward(params: &ModelParams, rec: &FeatureRecord) -> Result<ForwardTrace> {
    let input = BatchInput::from_records(&params.spec, &[rec])?;
    Ok(forward_batch(params, &input)?.trace(0, &params.spec))
}

const CKPT_MAGIC: &[u8; 4] = b"OMCK";
const CKPT_VERSION: u32 = 1;

/// Writes spec, stored training loss and every tensor (little-endian f64, in
/// `ModelParams::tensors` order).
pub fn save_checkpoint(params: &ModelParams, loss: f64, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        let s = &params.spec;
        w.write_all(CKPT_MAGIC)?;
        w.write_u32::<LittleEndian>(CKPT_VERSION)?;
        w.write_u32::<LittleEndian>(s.d_app as u32)?;
        w.write_u32::<LittleEndian>(s.d_mo as u32)?;
        w.write_u32::<LittleEndian>(s.memory_items as u32)?;
        for chain in [&s.enc_app, &s.enc_mag, &s.enc_ang, &s.fusion, &s.decoder] {
            w.write_u32::<LittleEndian>(chain.len() as u32)?;
            for &width in chain.iter() {
                w.write_u32::<LittleEndian>(width as u32)?;
            }
        }
        w.write_f64::<LittleEndian>(loss)?;
        for (_, t) in params.tensors() {
            for &v in t {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, f64)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let corrupt = |_| Error::Corruption(format!("{}: truncated checkpoint", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(corrupt)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint file", path.display())));
    }
    let version = r.read_u32::<LittleEndian>().map_err(corrupt)?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("{}: unsupported checkpoint version {version}", path.display())));
    }
    let d_app = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
    let d_mo = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
    let memory_items = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
    let mut chains = Vec::with_capacity(5);
    for _ in 0..5 {
        let n = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        if n > 1024 {
            return Err(Error::Corruption(format!("{}: implausible layer count {n}", path.display())));
        }
        let mut c = Vec::with_capacity(n);
        for _ in 0..n {
            c.push(r.read_u32::<LittleEndian>().map_err(corrupt)? as usize);
        }
        chains.push(c);
    }
    let mut it = chains.into_iter();
    let spec = NetworkSpec {
        d_app,
        d_mo,
        enc_app: it.next().unwrap(),
        enc_mag: it.next().unwrap(),
        enc_ang: it.next().unwrap(),
        fusion: it.next().unwrap(),
        decoder: it.next().unwrap(),
        memory_items,
    };
    let loss = r.read_f64::<LittleEndian>().map_err(corrupt)?;
    let mut params = ModelParams::zeros(&spec)?;
    for (_, t) in params.tensors_mut() {
        r.read_f64_into::<LittleEndian>(t).map_err(corrupt)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Corruption(format!("{}: trailing bytes after tensors", path.display())));
    }
    if !params.is_finite() {
        return Err(Error::Validation(format!("{}: non-finite parameter", path.display())));
    }
    Ok((params, loss))
}
