//! Character-level autoregressive decoder with key-value attention.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{log_softmax_rows, prefixed, softmax, uniform_init, GruCell, GruStepCache, Linear, Parameterized, SeqBatch};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::semantics::LabelAlphabet;

const BOS_INDEX: usize = LabelAlphabet::BOS_INDEX;

/// Which recurrent layer's state forms the attention query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    #[default]
    FirstLayer,
    SecondLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDecoderConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub att_dim: usize,
    pub value_dim: usize,
    #[serde(default)]
    pub query: QuerySource,
}

impl Default for AttentionDecoderConfig {
    fn default() -> Self {
        AttentionDecoderConfig {
            embed_dim: 32,
            hidden: 256,
            att_dim: 128,
            value_dim: 128,
            query: QuerySource::FirstLayer,
        }
    }
}

impl AttentionDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.embed_dim, self.hidden, self.att_dim, self.value_dim].contains(&0) {
            return Err(Error::Config(format!("decoder dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

fn scores_scale<T: Scalar>(d_att: usize) -> T {
    T::one() / T::from_usize(d_att).expect("dimension fits").sqrt()
}

/// Scaled dot-product attention for one query. Returns `(context, weights)`.
pub fn attend<T: Scalar>(
    query: &ArrayView1<T>,
    keys: &ArrayView2<T>,
    values: &ArrayView2<T>,
) -> Result<(Array1<T>, Array1<T>)> {
    if keys.nrows() == 0 {
        return Err(Error::Shape("attention over an empty sequence".into()));
    }
    if keys.nrows() != values.nrows() || keys.ncols() != query.len() {
        return Err(Error::Shape(format!(
            "attention shapes disagree: query {}, keys {:?}, values {:?}",
            query.len(),
            keys.dim(),
            values.dim()
        )));
    }
    Ok(attend_unchecked(query, keys, values))
}

fn attend_unchecked<T: Scalar>(q: &ArrayView1<T>, keys: &ArrayView2<T>, values: &ArrayView2<T>) -> (Array1<T>, Array1<T>) {
    let scale: T = scores_scale(keys.ncols());
    let e: Vec<T> = keys.dot(q).iter().map(|&v| v * scale).collect();
    let w = Array1::from(softmax(&e));
    (values.t().dot(&w), w)
}

/// Gradient of the context w.r.t. query, keys and values. Key and value
/// gradients are added into `dk` / `dv`; the query gradient is returned.
fn attend_backward<T: Scalar>(
    q: &ArrayView1<T>,
    keys: &ArrayView2<T>,
    values: &ArrayView2<T>,
    w: &Array1<T>,
    dc: &ArrayView1<T>,
    mut dk: ndarray::ArrayViewMut2<T>,
    mut dv: ndarray::ArrayViewMut2<T>,
) -> Array1<T> {
    let scale: T = scores_scale(keys.ncols());
    let dw = values.dot(dc);
    let inner: T = w.iter().zip(dw.iter()).map(|(&a, &b)| a * b).sum();
    let de: Array1<T> = (&dw - inner) * w * scale;
    for t in 0..keys.nrows() {
        dk.row_mut(t).scaled_add(de[t], q);
        dv.row_mut(t).scaled_add(w[t], dc);
    }
    keys.t().dot(&de)
}

/// Keys and values projected from one utterance's encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMemory<T> {
    pub keys: Array2<T>,
    pub values: Array2<T>,
}

impl<T> AttentionMemory<T> {
    pub fn len(&self) -> usize {
        self.keys.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.nrows() == 0
    }
}

/// Recurrent state for `N` parallel hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<T> {
    pub s1: Array2<T>,
    pub s2: Array2<T>,
    /// Previous attention context.
    pub c: Array2<T>,
}

impl<T: Scalar> DecoderState<T> {
    pub fn rows(&self) -> usize {
        self.s1.nrows()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        DecoderState {
            s1: self.s1.select(Axis(0), rows),
            s2: self.s2.select(Axis(0), rows),
            c: self.c.select(Axis(0), rows),
        }
    }
}

#[derive(Debug, Clone)]
struct StepCache<T> {
    tokens: Vec<usize>,
    x1: Array2<T>,
    g1: GruStepCache<T>,
    s1: Array2<T>,
    x2: Array2<T>,
    g2: GruStepCache<T>,
    s2: Array2<T>,
    q: Array2<T>,
    w: Vec<Array1<T>>,
    o: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoregressiveDecoder<T> {
    pub config: AttentionDecoderConfig,
    pub embed: Array2<T>,
    pub gru1: GruCell<T>,
    pub gru2: GruCell<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub query: Linear<T>,
    pub out: Linear<T>,
}

/// Saved forward pass of a teacher-forced batch.
#[derive(Debug, Clone)]
pub struct TeacherForcedTrace<T> {
    keys: Array2<T>,
    values: Array2<T>,
    enc_lengths: Vec<usize>,
    steps: Vec<StepCache<T>>,
    logp: Vec<Array2<T>>,
    targets: Vec<Vec<usize>>,
}

impl<T: Scalar> TeacherForcedTrace<T> {
    /// Per-item sums of `-log p(target)` over its tokens.
    pub fn item_nll(&self) -> Vec<T> {
        self.targets
            .iter()
            .enumerate()
            .map(|(b, tgt)| {
                tgt.iter()
                    .enumerate()
                    .map(|(i, &y)| -self.logp[i][[b, y]])
                    .sum()
            })
            .collect()
    }
}

impl<T: Scalar> AutoregressiveDecoder<T> {
    pub fn new<R: Rng>(rng: &mut R, d_enc: usize, alphabet: usize, config: AttentionDecoderConfig) -> Result<Self> {
        config.validate()?;
        let (e, h, a, v) = (config.embed_dim, config.hidden, config.att_dim, config.value_dim);
        Ok(AutoregressiveDecoder {
            embed: uniform_init(rng, (alphabet, e), 1.0),
            gru1: GruCell::new(rng, e + v, h),
            gru2: GruCell::new(rng, h + v, h),
            key: Linear::new(rng, d_enc, a),
            value: Linear::new(rng, d_enc, v),
            query: Linear::new(rng, h, a),
            out: Linear::new(rng, h + v, alphabet),
            config,
        })
    }

    pub fn alphabet_size(&self) -> usize {
        self.embed.nrows()
    }

    pub fn memory(&self, h: &ArrayView2<T>) -> Result<AttentionMemory<T>> {
        if h.nrows() == 0 {
            return Err(Error::Shape("empty encoder output".into()));
        }
        if h.ncols() != self.key.d_in() {
            return Err(Error::Shape(format!(
                "encoder width {} does not match decoder input {}",
                h.ncols(),
                self.key.d_in()
            )));
        }
        Ok(AttentionMemory {
            keys: self.key.forward(h),
            values: self.value.forward(h),
        })
    }

    pub fn initial_state(&self, n: usize) -> DecoderState<T> {
        DecoderState {
            s1: Array2::zeros((n, self.config.hidden)),
            s2: Array2::zeros((n, self.config.hidden)),
            c: Array2::zeros((n, self.config.value_dim)),
        }
    }

    fn step(
        &self,
        tokens: &[usize],
        st: &DecoderState<T>,
        attn: &dyn Fn(usize, ArrayView1<T>) -> (Array1<T>, Array1<T>),
    ) -> (Array2<T>, DecoderState<T>, StepCache<T>) {
        let e = self.embed.select(Axis(0), tokens);
        let x1 = concatenate![Axis(1), e, st.c];
        let (s1, g1) = self.gru1.step(&self.gru1.input_gates(&x1.view()).view(), &st.s1.view());
        let attend_rows = |q: &Array2<T>| {
            let mut c = Array2::zeros((tokens.len(), self.config.value_dim));
            let mut w = Vec::with_capacity(tokens.len());
            for (i, row) in q.rows().into_iter().enumerate() {
                let (ci, wi) = attn(i, row);
                c.row_mut(i).assign(&ci);
                w.push(wi);
            }
            (c, w)
        };
        let (x2, s2, g2, q, c, w) = match self.config.query {
            QuerySource::FirstLayer => {
                let q = self.query.forward(&s1.view());
                let (c, w) = attend_rows(&q);
                let x2 = concatenate![Axis(1), s1, c];
                let (s2, g2) = self.gru2.step(&self.gru2.input_gates(&x2.view()).view(), &st.s2.view());
                (x2, s2, g2, q, c, w)
            }
            QuerySource::SecondLayer => {
                let x2 = concatenate![Axis(1), s1, st.c];
                let (s2, g2) = self.gru2.step(&self.gru2.input_gates(&x2.view()).view(), &st.s2.view());
                let q = self.query.forward(&s2.view());
                let (c, w) = attend_rows(&q);
                (x2, s2, g2, q, c, w)
            }
        };
        let o = concatenate![Axis(1), s2, c];
        let logits = self.out.forward(&o.view());
        let next = DecoderState {
            s1: s1.clone(),
            s2: s2.clone(),
            c,
        };
        (
            logits,
            next,
            StepCache {
                tokens: tokens.to_vec(),
                x1,
                g1,
                s1,
                x2,
                g2,
                s2,
                q,
                w,
                o,
            },
        )
    }

    /// Backward through one step. Carries are the gradients flowing into
    /// this step's outputs from later steps; returns the carries for the
    /// previous step.
    fn step_backward(
        &self,
        cache: &StepCache<T>,
        dlogits: &Array2<T>,
        carry: DecoderState<T>,
        attn_back: &mut dyn FnMut(usize, ArrayView1<T>, &Array1<T>, ArrayView1<T>) -> Array1<T>,
        grad: &mut AutoregressiveDecoder<T>,
    ) -> DecoderState<T> {
        let h = self.config.hidden;
        let e_dim = self.config.embed_dim;
        let mut attn_rows = |dc: &Array2<T>, q: &Array2<T>| {
            let mut dq = Array2::zeros(q.raw_dim());
            for i in 0..dc.nrows() {
                dq.row_mut(i).assign(&attn_back(i, q.row(i), &cache.w[i], dc.row(i)));
            }
            dq
        };
        let d_o = self.out.backward(&cache.o.view(), &dlogits.view(), &mut grad.out);
        let mut ds2 = d_o.slice(s![.., ..h]).to_owned() + &carry.s2;
        let mut dc = d_o.slice(s![.., h..]).to_owned();
        let (ds1, dc_prev) = match self.config.query {
            QuerySource::FirstLayer => {
                let (dgi2, ds2_prev) = self.gru2.step_backward(&cache.g2, &ds2.view(), &mut grad.gru2);
                let dx2 = self.gru2.input_backward(&cache.x2.view(), &dgi2.view(), &mut grad.gru2);
                ds2 = ds2_prev;
                dc += &dx2.slice(s![.., h..]);
                dc += &carry.c;
                let dq = attn_rows(&dc, &cache.q);
                let ds1 = dx2.slice(s![.., ..h]).to_owned()
                    + &carry.s1
                    + self.query.backward(&cache.s1.view(), &dq.view(), &mut grad.query);
                (ds1, Array2::zeros(dc.raw_dim()))
            }
            QuerySource::SecondLayer => {
                dc += &carry.c;
                let dq = attn_rows(&dc, &cache.q);
                ds2 += &self.query.backward(&cache.s2.view(), &dq.view(), &mut grad.query);
                let (dgi2, ds2_prev) = self.gru2.step_backward(&cache.g2, &ds2.view(), &mut grad.gru2);
                let dx2 = self.gru2.input_backward(&cache.x2.view(), &dgi2.view(), &mut grad.gru2);
                ds2 = ds2_prev;
                let ds1 = dx2.slice(s![.., ..h]).to_owned() + &carry.s1;
                (ds1, dx2.slice(s![.., h..]).to_owned())
            }
        };
        let (dgi1, ds1_prev) = self.gru1.step_backward(&cache.g1, &ds1.view(), &mut grad.gru1);
        let dx1 = self.gru1.input_backward(&cache.x1.view(), &dgi1.view(), &mut grad.gru1);
        for (i, &tok) in cache.tokens.iter().enumerate() {
            let mut row = grad.embed.row_mut(tok);
            row += &dx1.slice(s![i, ..e_dim]);
        }
        DecoderState {
            s1: ds1_prev,
            s2: ds2,
            c: dc_prev + &dx1.slice(s![.., e_dim..]),
        }
    }

    /// One decoding step for `N` hypotheses sharing `memory`: returns
    /// log-probabilities (`N × |alphabet|`) and the next state.
    pub fn decode_step(
        &self,
        memory: &AttentionMemory<T>,
        prev: &[usize],
        state: &DecoderState<T>,
    ) -> Result<(Array2<T>, DecoderState<T>)> {
        if let Some(&bad) = prev.iter().find(|&&t| t >= self.alphabet_size()) {
            return Err(Error::Input(format!(
                "token {bad} outside alphabet of size {}",
                self.alphabet_size()
            )));
        }
        if state.rows() != prev.len() {
            return Err(Error::Shape(format!(
                "{} tokens for {} decoder states",
                prev.len(),
                state.rows()
            )));
        }
        if memory.is_empty() {
            return Err(Error::Shape("attention over an empty sequence".into()));
        }
        let attn = |_: usize, q: ArrayView1<T>| attend_unchecked(&q, &memory.keys.view(), &memory.values.view());
        let (logits, next, _) = self.step(prev, state, &attn);
        Ok((log_softmax_rows(&logits.view()), next))
    }

    /// Teacher-forced forward pass over a padded batch. Each target is a
    /// non-empty token sequence ending in EOS; the input at step `i` is BOS
    /// for `i = 0` and `target[i - 1]` afterwards.
    pub fn forward_teacher(&self, enc: &SeqBatch<T>, targets: &[Vec<usize>]) -> Result<TeacherForcedTrace<T>> {
        let batch = enc.batch();
        if targets.len() != batch {
            return Err(Error::Shape(format!("{} targets for batch of {batch}", targets.len())));
        }
        if targets.iter().any(|t| t.is_empty()) {
            return Err(Error::Input("empty target sequence".into()));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= self.alphabet_size()) {
            return Err(Error::Input(format!("target token {bad} outside alphabet")));
        }
        let steps_enc = enc.steps();
        let keys = self.key.forward(&enc.data.view());
        let values = self.value.forward(&enc.data.view());
        let k3 = keys.view().into_shape((steps_enc, batch, self.config.att_dim)).expect("time-major");
        let v3 = values.view().into_shape((steps_enc, batch, self.config.value_dim)).expect("time-major");
        let attn = |b: usize, q: ArrayView1<T>| {
            let len = enc.lengths[b];
            attend_unchecked(&q, &k3.slice(s![..len, b, ..]), &v3.slice(s![..len, b, ..]))
        };
        let n_steps = targets.iter().map(Vec::len).max().unwrap_or(0);
        let mut state = self.initial_state(batch);
        let mut caches = Vec::with_capacity(n_steps);
        let mut logp = Vec::with_capacity(n_steps);
        for i in 0..n_steps {
            let tokens: Vec<usize> = targets
                .iter()
                .map(|t| if i == 0 { BOS_INDEX } else { t.get(i - 1).copied().unwrap_or(BOS_INDEX) })
                .collect();
            let (logits, next, cache) = self.step(&tokens, &state, &attn);
            logp.push(log_softmax_rows(&logits.view()));
            caches.push(cache);
            state = next;
        }
        Ok(TeacherForcedTrace {
            keys,
            values,
            enc_lengths: enc.lengths.clone(),
            steps: caches,
            logp,
            targets: targets.to_vec(),
        })
    }

    /// Gradient of `Σ_b weights[b] · Σ_i -log p(target_b[i])`. Returns
    /// `dL/d enc.data`.
    pub fn backward_teacher(
        &self,
        enc: &SeqBatch<T>,
        trace: &TeacherForcedTrace<T>,
        weights: &[T],
        grad: &mut AutoregressiveDecoder<T>,
    ) -> Array2<T> {
        let batch = trace.targets.len();
        let steps_enc = trace.keys.nrows() / batch.max(1);
        let (a, v) = (self.config.att_dim, self.config.value_dim);
        let k3 = trace.keys.view().into_shape((steps_enc, batch, a)).expect("time-major");
        let v3 = trace.values.view().into_shape((steps_enc, batch, v)).expect("time-major");
        let mut dkeys = Array2::<T>::zeros(trace.keys.raw_dim());
        let mut dvalues = Array2::<T>::zeros(trace.values.raw_dim());
        {
            let mut dk3 = dkeys.view_mut().into_shape((steps_enc, batch, a)).expect("time-major");
            let mut dv3 = dvalues.view_mut().into_shape((steps_enc, batch, v)).expect("time-major");
            let lengths = &trace.enc_lengths;
            let mut attn_back = |b: usize, q: ArrayView1<T>, w: &Array1<T>, dc: ArrayView1<T>| {
                let len = lengths[b];
                attend_backward(
                    &q,
                    &k3.slice(s![..len, b, ..]),
                    &v3.slice(s![..len, b, ..]),
                    w,
                    &dc,
                    dk3.slice_mut(s![..len, b, ..]),
                    dv3.slice_mut(s![..len, b, ..]),
                )
            };
            let mut carry = DecoderState {
                s1: Array2::zeros((batch, self.config.hidden)),
                s2: Array2::zeros((batch, self.config.hidden)),
                c: Array2::zeros((batch, v)),
            };
            for i in (0..trace.steps.len()).rev() {
                let mut dlogits = trace.logp[i].mapv(|x| x.exp());
                for (b, tgt) in trace.targets.iter().enumerate() {
                    let mut row = dlogits.row_mut(b);
                    match tgt.get(i) {
                        Some(&y) => {
                            row[y] -= T::one();
                            row.mapv_inplace(|x| x * weights[b]);
                        }
                        None => row.fill(T::zero()),
                    }
                }
                carry = self.step_backward(&trace.steps[i], &dlogits, carry, &mut attn_back, grad);
            }
        }
        self.key.backward(&enc.data.view(), &dkeys.view(), &mut grad.key)
            + self.value.backward(&enc.data.view(), &dvalues.view(), &mut grad.value)
    }
}

impl<T: Scalar> Parameterized<T> for AutoregressiveDecoder<T> {
    fn params(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        out.extend(prefixed("gru1", self.gru1.params()));
        out.extend(prefixed("gru2", self.gru2.params()));
        out.extend(prefixed("key", self.key.params()));
        out.extend(prefixed("value", self.value.params()));
        out.extend(prefixed("query", self.query.params()));
        out.extend(prefixed("out", self.out.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        out.extend(prefixed("gru1", self.gru1.params_mut()));
        out.extend(prefixed("gru2", self.gru2.params_mut()));
        out.extend(prefixed("key", self.key.params_mut()));
        out.extend(prefixed("value", self.value.params_mut()));
        out.extend(prefixed("query", self.query.params_mut()));
        out.extend(prefixed("out", self.out.params_mut()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    const EOS_INDEX: usize = LabelAlphabet::EOS_INDEX;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(query: QuerySource) -> AttentionDecoderConfig {
        AttentionDecoderConfig {
            embed_dim: 3,
            hidden: 4,
            att_dim: 3,
            value_dim: 2,
            query,
        }
    }

    #[test]
    fn attention_weights_form_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let keys: Array2<f64> = Array2::ones((5, 4));
        let values: Array2<f64> = uniform_init(&mut rng, (5, 3), 1.0);
        let q: Array1<f64> = uniform_init(&mut rng, (1, 4), 1.0).row(0).to_owned();
        let (_, w) = attend(&q.view(), &keys.view(), &values.view()).unwrap();
        assert!(w.iter().all(|&x| (x - 0.2).abs() < 1e-12));

        let mut keys = Array2::<f64>::zeros((4, 1));
        keys[[2, 0]] = 100.0;
        let q = ndarray::array![1.0f64];
        let values: Array2<f64> = uniform_init(&mut rng, (4, 2), 1.0);
        let (_, w) = attend(&q.view(), &keys.view(), &values.view()).unwrap();
        assert!(w[2] > 1.0 - 1e-6);

        for _ in 0..50 {
            let keys: Array2<f64> = uniform_init(&mut rng, (7, 3), 3.0);
            let values: Array2<f64> = uniform_init(&mut rng, (7, 2), 3.0);
            let q: Array1<f64> = uniform_init(&mut rng, (1, 3), 3.0).row(0).to_owned();
            let (c, w) = attend(&q.view(), &keys.view(), &values.view()).unwrap();
            assert!(((w.sum()) - 1.0).abs() < 1e-6);
            assert!(w.iter().all(|&x| x >= 0.0));
            let mut direct = [0.0; 2];
            for t in 0..7 {
                for j in 0..2 {
                    direct[j] += w[t] * values[[t, j]];
                }
            }
            assert!((c[0] - direct[0]).abs() < 1e-6 && (c[1] - direct[1]).abs() < 1e-6);
        }
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(matches!(
            attend(&ndarray::array![1.0, 2.0, 3.0].view(), &empty.view(), &Array2::zeros((0, 2)).view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn decode_step_is_a_deterministic_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let dec = AutoregressiveDecoder::<f64>::new(&mut rng, 5, 6, small(QuerySource::FirstLayer)).unwrap();
        let h: Array2<f64> = uniform_init(&mut rng, (4, 5), 1.0);
        let mem = dec.memory(&h.view()).unwrap();
        let st = dec.initial_state(2);
        let (lp, next) = dec.decode_step(&mem, &[BOS_INDEX, 3], &st).unwrap();
        for row in lp.rows() {
            assert!((row.mapv(f64::exp).sum() - 1.0).abs() < 1e-6);
        }
        let (lp2, next2) = dec.decode_step(&mem, &[BOS_INDEX, 3], &st).unwrap();
        assert_eq!(lp, lp2);
        assert_eq!(next, next2);
        assert!(matches!(dec.decode_step(&mem, &[6, 0], &st), Err(Error::Input(_))));
    }

    #[test]
    fn chained_steps_match_teacher_forcing() {
        for query in [QuerySource::FirstLayer, QuerySource::SecondLayer] {
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let dec = AutoregressiveDecoder::<f64>::new(&mut rng, 5, 7, small(query)).unwrap();
            let hs: Vec<Array2<f64>> = [4, 6].iter().map(|&t| uniform_init(&mut rng, (t, 5), 1.0)).collect();
            let targets = vec![vec![3, 4, 2, EOS_INDEX], vec![5, EOS_INDEX]];
            let enc = SeqBatch::from_items(hs.iter().map(|h| h.view()));
            let trace = dec.forward_teacher(&enc, &targets).unwrap();
            let nll = trace.item_nll();
            for (b, h) in hs.iter().enumerate() {
                let mem = dec.memory(&h.view()).unwrap();
                let mut st = dec.initial_state(1);
                let mut prev = BOS_INDEX;
                let mut ll = 0.0;
                for &y in &targets[b] {
                    let (lp, next) = dec.decode_step(&mem, &[prev], &st).unwrap();
                    ll += lp[[0, y]];
                    st = next;
                    prev = y;
                }
                assert!((ll + nll[b]).abs() < 1e-9, "{query:?} item {b}: {ll} vs {}", nll[b]);
            }
        }
    }
}
