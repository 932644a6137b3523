//! Convolutional + recurrent acoustic encoder.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::nn::{prefixed, uniform_init, GruCell, GruStepCache, Parameterized, SeqBatch};
use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvStageConfig {
    pub channels: usize,
    /// Odd kernel width; inputs are zero-padded to keep the length.
    pub kernel: usize,
    /// Max-pooling factor over time (1 disables pooling).
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnStageConfig {
    pub hidden: usize,
    pub bidirectional: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub conv: Vec<ConvStageConfig>,
    pub rnn: Vec<RnnStageConfig>,
}

impl EncoderConfig {
    /// Two pooled conv stages and one bidirectional GRU, 128 outputs.
    pub fn default_for(input_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            conv: vec![
                ConvStageConfig {
                    channels: 64,
                    kernel: 3,
                    pool: 2,
                },
                ConvStageConfig {
                    channels: 64,
                    kernel: 3,
                    pool: 2,
                },
            ],
            rnn: vec![RnnStageConfig {
                hidden: 64,
                bidirectional: true,
            }],
        }
    }

    pub fn downsampling(&self) -> usize {
        self.conv.iter().map(|c| c.pool.max(1)).product()
    }

    pub fn output_dim(&self) -> usize {
        match (self.rnn.last(), self.conv.last()) {
            (Some(r), _) => r.hidden * if r.bidirectional { 2 } else { 1 },
            (None, Some(c)) => c.channels,
            (None, None) => self.input_dim,
        }
    }

    /// `ceil(T / downsampling)`.
    pub fn output_len(&self, t: usize) -> usize {
        t.div_ceil(self.downsampling())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("encoder input_dim must be positive".into()));
        }
        for c in &self.conv {
            if c.channels == 0 || c.kernel % 2 == 0 || c.pool == 0 {
                return Err(Error::Config(format!(
                    "conv stage needs channels > 0, an odd kernel and pool >= 1: {c:?}"
                )));
            }
        }
        if self.rnn.iter().any(|r| r.hidden == 0) {
            return Err(Error::Config("recurrent hidden size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage<T> {
    /// `(kernel · in) × out`
    pub w: Array2<T>,
    pub b: Array2<T>,
    pub kernel: usize,
    pub pool: usize,
}

#[derive(Debug, Clone)]
pub struct ConvTrace<T> {
    cols: Array2<T>,
    act: Array2<T>,
    /// Source row in `act` for every pooled output element.
    argmax: Vec<usize>,
    in_lengths: Vec<usize>,
    in_dim: usize,
}

impl<T: Scalar> ConvStage<T> {
    fn new<R: Rng>(rng: &mut R, d_in: usize, cfg: &ConvStageConfig) -> Self {
        let fan_in = cfg.kernel * d_in;
        let bound = 1.0 / (fan_in as f64).sqrt();
        ConvStage {
            w: uniform_init(rng, (fan_in, cfg.channels), bound),
            b: uniform_init(rng, (1, cfg.channels), bound),
            kernel: cfg.kernel,
            pool: cfg.pool,
        }
    }

    fn forward(&self, x: &SeqBatch<T>) -> (SeqBatch<T>, ConvTrace<T>) {
        let (steps, batch, d) = (x.steps(), x.batch(), x.dim());
        let half = self.kernel / 2;
        let mut cols = Array2::zeros((steps * batch, self.kernel * d));
        for t in 0..steps {
            for b in 0..batch {
                let len = x.lengths[b];
                if t >= len {
                    continue;
                }
                let mut row = cols.row_mut(t * batch + b);
                for k in 0..self.kernel {
                    let src = t + k;
                    if src < half || src - half >= len {
                        continue;
                    }
                    row.slice_mut(s![k * d..(k + 1) * d])
                        .assign(&x.data.row((src - half) * batch + b));
                }
            }
        }
        let mut act = cols.dot(&self.w) + &self.b;
        for (i, mut row) in act.rows_mut().into_iter().enumerate() {
            if i / batch >= x.lengths[i % batch] {
                row.fill(T::zero());
            } else {
                row.mapv_inplace(|v| v.max(T::zero()));
            }
        }
        let channels = act.ncols();
        let out_steps = steps.div_ceil(self.pool);
        let out_lengths: Vec<usize> = x.lengths.iter().map(|l| l.div_ceil(self.pool)).collect();
        let mut out = Array2::zeros((out_steps * batch, channels));
        let mut argmax = vec![usize::MAX; out_steps * batch * channels];
        for b in 0..batch {
            let len = x.lengths[b];
            for u in 0..out_lengths[b] {
                let lo = u * self.pool;
                let hi = (lo + self.pool).min(len);
                let orow = u * batch + b;
                for c in 0..channels {
                    let mut best = lo * batch + b;
                    for t in lo + 1..hi {
                        let r = t * batch + b;
                        if act[[r, c]] > act[[best, c]] {
                            best = r;
                        }
                    }
                    out[[orow, c]] = act[[best, c]];
                    argmax[orow * channels + c] = best;
                }
            }
        }
        (
            SeqBatch {
                data: out,
                lengths: out_lengths,
            },
            ConvTrace {
                cols,
                act,
                argmax,
                in_lengths: x.lengths.clone(),
                in_dim: d,
            },
        )
    }

    fn backward(&self, trace: &ConvTrace<T>, d_out: &Array2<T>, grad: &mut ConvStage<T>) -> Array2<T> {
        let channels = trace.act.ncols();
        let mut dact = Array2::zeros(trace.act.raw_dim());
        for (i, &src) in trace.argmax.iter().enumerate() {
            if src != usize::MAX {
                let (row, c) = (i / channels, i % channels);
                dact[[src, c]] += d_out[[row, c]];
            }
        }
        Zip::from(&mut dact).and(&trace.act).for_each(|g, &a| {
            if a <= T::zero() {
                *g = T::zero();
            }
        });
        grad.w += &trace.cols.t().dot(&dact);
        grad.b += &dact.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dcols = dact.dot(&self.w.t());
        let batch = trace.in_lengths.len();
        let d = trace.in_dim;
        let half = self.kernel / 2;
        let steps = trace.cols.nrows() / batch;
        let mut dx = Array2::zeros((steps * batch, d));
        for t in 0..steps {
            for b in 0..batch {
                let len = trace.in_lengths[b];
                if t >= len {
                    continue;
                }
                let row = dcols.row(t * batch + b);
                for k in 0..self.kernel {
                    let src = t + k;
                    if src < half || src - half >= len {
                        continue;
                    }
                    let mut dst = dx.row_mut((src - half) * batch + b);
                    dst += &row.slice(s![k * d..(k + 1) * d]);
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for ConvStage<T> {
    fn params(&self) -> Vec<(String, &Array2<T>)> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnStage<T> {
    pub fwd: GruCell<T>,
    pub bwd: Option<GruCell<T>>,
}

#[derive(Debug, Clone)]
pub struct RnnTrace<T> {
    input: Array2<T>,
    lengths: Vec<usize>,
    fwd: Vec<GruStepCache<T>>,
    bwd: Vec<GruStepCache<T>>,
}

/// Runs `cell` over a padded batch in the given direction. Padded steps
/// leave the state unchanged; their outputs are zero.
fn run_direction<T: Scalar>(
    cell: &GruCell<T>,
    gi_all: &Array2<T>,
    lengths: &[usize],
    reverse: bool,
) -> (Array2<T>, Vec<GruStepCache<T>>) {
    let batch = lengths.len();
    let steps = gi_all.nrows() / batch;
    let hid = cell.hidden();
    let mut h = Array2::zeros((batch, hid));
    let mut out = Array2::zeros((steps * batch, hid));
    let mut caches: Vec<Option<GruStepCache<T>>> = vec![None; steps];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let gi = gi_all.slice(s![t * batch..(t + 1) * batch, ..]);
        let (h_new, cache) = cell.step(&gi, &h.view());
        for b in 0..batch {
            if t < lengths[b] {
                h.row_mut(b).assign(&h_new.row(b));
                out.row_mut(t * batch + b).assign(&h_new.row(b));
            }
        }
        caches[t] = Some(cache);
    }
    (out, caches.into_iter().map(|c| c.expect("every step visited")).collect())
}

fn backward_direction<T: Scalar>(
    cell: &GruCell<T>,
    caches: &[GruStepCache<T>],
    d_out: ArrayView2<T>,
    lengths: &[usize],
    reverse: bool,
    grad: &mut GruCell<T>,
) -> Array2<T> {
    let batch = lengths.len();
    let steps = caches.len();
    let hid = cell.hidden();
    let mut carry = Array2::<T>::zeros((batch, hid));
    let mut dgi_all = Array2::zeros((steps * batch, 3 * hid));
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new(0..steps)
    } else {
        Box::new((0..steps).rev())
    };
    for t in order {
        let mut dh_cell = Array2::zeros((batch, hid));
        let mut pass = Array2::zeros((batch, hid));
        for b in 0..batch {
            if t < lengths[b] {
                let mut row = dh_cell.row_mut(b);
                row.assign(&carry.row(b));
                row += &d_out.row(t * batch + b);
            } else {
                pass.row_mut(b).assign(&carry.row(b));
            }
        }
        let (dgi, dh_prev) = cell.step_backward(&caches[t], &dh_cell.view(), grad);
        dgi_all.slice_mut(s![t * batch..(t + 1) * batch, ..]).assign(&dgi);
        carry = dh_prev + pass;
    }
    dgi_all
}

impl<T: Scalar> RnnStage<T> {
    fn new<R: Rng>(rng: &mut R, d_in: usize, cfg: &RnnStageConfig) -> Self {
        RnnStage {
            fwd: GruCell::new(rng, d_in, cfg.hidden),
            bwd: cfg.bidirectional.then(|| GruCell::new(rng, d_in, cfg.hidden)),
        }
    }

    fn forward(&self, x: &SeqBatch<T>) -> (SeqBatch<T>, RnnTrace<T>) {
        let hid = self.fwd.hidden();
        let gi_f = self.fwd.input_gates(&x.data.view());
        let (out_f, fwd) = run_direction(&self.fwd, &gi_f, &x.lengths, false);
        let (data, bwd) = match &self.bwd {
            Some(cell) => {
                let gi_b = cell.input_gates(&x.data.view());
                let (out_b, bwd) = run_direction(cell, &gi_b, &x.lengths, true);
                let mut data = Array2::zeros((out_f.nrows(), 2 * hid));
                data.slice_mut(s![.., ..hid]).assign(&out_f);
                data.slice_mut(s![.., hid..]).assign(&out_b);
                (data, bwd)
            }
            None => (out_f, Vec::new()),
        };
        (
            SeqBatch {
                data,
                lengths: x.lengths.clone(),
            },
            RnnTrace {
                input: x.data.clone(),
                lengths: x.lengths.clone(),
                fwd,
                bwd,
            },
        )
    }

    fn backward(&self, trace: &RnnTrace<T>, d_out: &Array2<T>, grad: &mut RnnStage<T>) -> Array2<T> {
        let hid = self.fwd.hidden();
        let dgi_f = backward_direction(
            &self.fwd,
            &trace.fwd,
            d_out.slice(s![.., ..hid]),
            &trace.lengths,
            false,
            &mut grad.fwd,
        );
        let mut dx = self.fwd.input_backward(&trace.input.view(), &dgi_f.view(), &mut grad.fwd);
        if let (Some(cell), Some(g)) = (&self.bwd, grad.bwd.as_mut()) {
            let dgi_b = backward_direction(cell, &trace.bwd, d_out.slice(s![.., hid..]), &trace.lengths, true, g);
            dx += &cell.input_backward(&trace.input.view(), &dgi_b.view(), g);
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for RnnStage<T> {
    fn params(&self) -> Vec<(String, &Array2<T>)> {
        let mut out: Vec<_> = prefixed("fwd", self.fwd.params()).collect();
        if let Some(b) = &self.bwd {
            out.extend(prefixed("bwd", b.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        let mut out: Vec<_> = prefixed("fwd", self.fwd.params_mut()).collect();
        if let Some(b) = &mut self.bwd {
            out.extend(prefixed("bwd", b.params_mut()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub conv: Vec<ConvStage<T>>,
    pub rnn: Vec<RnnStage<T>>,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    conv: Vec<ConvTrace<T>>,
    rnn: Vec<RnnTrace<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng>(rng: &mut R, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut d = config.input_dim;
        let mut conv = Vec::new();
        for c in &config.conv {
            conv.push(ConvStage::new(rng, d, c));
            d = c.channels;
        }
        let mut rnn = Vec::new();
        for r in &config.rnn {
            rnn.push(RnnStage::new(rng, d, r));
            d = r.hidden * if r.bidirectional { 2 } else { 1 };
        }
        Ok(Encoder { config, conv, rnn })
    }

    /// [`Encoder::new`] with a seeded ChaCha8 generator.
    pub fn from_seed(config: EncoderConfig, seed: u64) -> Result<Self> {
        Self::new(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed), config)
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    fn check(&self, x: &SeqBatch<T>) -> Result<()> {
        if x.dim() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "feature dimension {} does not match encoder input {}",
                x.dim(),
                self.config.input_dim
            )));
        }
        if x.lengths.iter().any(|&l| l == 0) {
            return Err(Error::Shape("empty feature sequence".into()));
        }
        Ok(())
    }

    /// Encodes a padded batch, keeping what the backward pass needs.
    pub fn forward_batch(&self, x: &SeqBatch<T>) -> Result<(SeqBatch<T>, EncoderTrace<T>)> {
        self.check(x)?;
        let mut h = x.clone();
        let mut trace = EncoderTrace {
            conv: Vec::with_capacity(self.conv.len()),
            rnn: Vec::with_capacity(self.rnn.len()),
        };
        for stage in &self.conv {
            let (next, t) = stage.forward(&h);
            trace.conv.push(t);
            h = next;
        }
        for stage in &self.rnn {
            let (next, t) = stage.forward(&h);
            trace.rnn.push(t);
            h = next;
        }
        Ok((h, trace))
    }

    /// Hidden sequence `T' × d_enc` of one utterance.
    pub fn encode(&self, f: &FeatureSequence<T>) -> Result<Array2<T>> {
        let batch = SeqBatch::from_items([f.frames.view()]);
        Ok(self.forward_batch(&batch)?.0.item(0))
    }

    /// Accumulates parameter gradients for `d_out` (same layout as the
    /// forward output).
    pub fn backward(&self, trace: &EncoderTrace<T>, d_out: &Array2<T>, grad: &mut Encoder<T>) {
        let mut d = d_out.clone();
        for (i, stage) in self.rnn.iter().enumerate().rev() {
            d = stage.backward(&trace.rnn[i], &d, &mut grad.rnn[i]);
        }
        for (i, stage) in self.conv.iter().enumerate().rev() {
            d = stage.backward(&trace.conv[i], &d, &mut grad.conv[i]);
        }
    }
}

impl<T: Scalar> Parameterized<T> for Encoder<T> {
    fn params(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            out.extend(prefixed(&format!("conv{i}"), c.params()));
        }
        for (i, r) in self.rnn.iter().enumerate() {
            out.extend(prefixed(&format!("rnn{i}"), r.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter_mut().enumerate() {
            out.extend(prefixed(&format!("conv{i}"), c.params_mut()));
        }
        for (i, r) in self.rnn.iter_mut().enumerate() {
            out.extend(prefixed(&format!("rnn{i}"), r.params_mut()));
        }
        out
    }
}
