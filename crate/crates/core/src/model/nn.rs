//! Dense layers with explicit backward passes.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::scalar::{s, Scalar};

/// Named access to trainable tensors. Gradients are stored in a value of the
/// same type, so parameters and their gradients line up by position.
pub trait Parameterized<T: Scalar> {
    fn params(&self) -> Vec<(String, &Array2<T>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Array2<T>)>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn prefixed<'a, X>(prefix: &str, items: Vec<(String, X)>) -> impl Iterator<Item = (String, X)> + 'a
where
    X: 'a,
{
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, p)| (format!("{prefix}.{n}"), p))
}

/// Copy of `m` with every parameter set to zero.
pub fn zeros_like<T: Scalar, M: Parameterized<T> + Clone>(m: &M) -> M {
    let mut z = m.clone();
    for (_, p) in z.params_mut() {
        p.fill(T::zero());
    }
    z
}

pub(crate) fn uniform_init<T: Scalar, R: Rng>(rng: &mut R, shape: (usize, usize), bound: f64) -> Array2<T> {
    let dist = Uniform::new_inclusive(-bound, bound);
    Array2::from_shape_simple_fn(shape, || s(dist.sample(rng)))
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<T: Scalar>(x: &ArrayView2<T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Softmax of a vector, ignoring entries at `-inf`.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let m = x.iter().cloned().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: T = e.iter().cloned().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in × out`
    pub w: Array2<T>,
    /// `1 × out`
    pub b: Array2<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        Linear {
            w: uniform_init(rng, (d_in, d_out), bound),
            b: uniform_init(rng, (1, d_out), bound),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<T>) -> Array2<T> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &ArrayView2<T>, dy: &ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        self.accumulate(x, dy, grad);
        dy.dot(&self.w.t())
    }

    /// Parameter gradients only.
    pub fn accumulate(&self, x: &ArrayView2<T>, dy: &ArrayView2<T>, grad: &mut Linear<T>) {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn params(&self) -> Vec<(String, &Array2<T>)> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }
}

/// Gated recurrent unit with gates ordered `[reset | update | candidate]`:
///
/// ```text
/// r  = σ(x·Wr + br + h·Ur + cr)
/// z  = σ(x·Wz + bz + h·Uz + cz)
/// n  = tanh(x·Wn + bn + r ⊙ (h·Un + cn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell<T> {
    /// `in × 3H`
    pub w_ih: Array2<T>,
    /// `H × 3H`
    pub w_hh: Array2<T>,
    pub b_ih: Array2<T>,
    pub b_hh: Array2<T>,
}

/// Values kept from one GRU step for its backward pass.
#[derive(Debug, Clone)]
pub struct GruStepCache<T> {
    pub h_prev: Array2<T>,
    pub r: Array2<T>,
    pub z: Array2<T>,
    pub n: Array2<T>,
    /// `h·Un + cn`
    pub hn: Array2<T>,
}

impl<T: Scalar> GruCell<T> {
    pub fn new<R: Rng>(rng: &mut R, d_in: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        GruCell {
            w_ih: uniform_init(rng, (d_in, 3 * hidden), bound),
            w_hh: uniform_init(rng, (hidden, 3 * hidden), bound),
            b_ih: uniform_init(rng, (1, 3 * hidden), bound),
            b_hh: uniform_init(rng, (1, 3 * hidden), bound),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.w_ih.nrows()
    }

    /// Input projection `x·W + b` for any number of rows.
    pub fn input_gates(&self, x: &ArrayView2<T>) -> Array2<T> {
        x.dot(&self.w_ih) + &self.b_ih
    }

    /// One step from precomputed input gates `gi` (`B × 3H`).
    pub fn step(&self, gi: &ArrayView2<T>, h: &ArrayView2<T>) -> (Array2<T>, GruStepCache<T>) {
        let hid = self.hidden();
        let gh = h.dot(&self.w_hh) + &self.b_hh;
        let rows = h.nrows();
        let mut r = Array2::zeros((rows, hid));
        let mut z = Array2::zeros((rows, hid));
        let mut n = Array2::zeros((rows, hid));
        let hn = gh.slice(s![.., 2 * hid..]).to_owned();
        Zip::from(&mut r)
            .and(gi.slice(s![.., ..hid]))
            .and(gh.slice(s![.., ..hid]))
            .for_each(|r, &a, &b| *r = sigmoid(a + b));
        Zip::from(&mut z)
            .and(gi.slice(s![.., hid..2 * hid]))
            .and(gh.slice(s![.., hid..2 * hid]))
            .for_each(|z, &a, &b| *z = sigmoid(a + b));
        Zip::from(&mut n)
            .and(gi.slice(s![.., 2 * hid..]))
            .and(&r)
            .and(&hn)
            .for_each(|n, &a, &r, &c| *n = (a + r * c).tanh());
        let mut h_new = Array2::zeros((rows, hid));
        Zip::from(&mut h_new)
            .and(&z)
            .and(&n)
            .and(h)
            .for_each(|o, &z, &n, &h| *o = (T::one() - z) * n + z * h);
        (
            h_new,
            GruStepCache {
                h_prev: h.to_owned(),
                r,
                z,
                n,
                hn,
            },
        )
    }

    /// Backward through one step. Returns `(dL/d gi, dL/d h_prev)` and
    /// accumulates the recurrent-weight gradients; the caller owns the
    /// input-weight gradient since `gi` may have been computed in bulk.
    pub fn step_backward(
        &self,
        cache: &GruStepCache<T>,
        dh: &ArrayView2<T>,
        grad: &mut GruCell<T>,
    ) -> (Array2<T>, Array2<T>) {
        let hid = self.hidden();
        let rows = dh.nrows();
        let mut dgi = Array2::zeros((rows, 3 * hid));
        let mut dgh = Array2::zeros((rows, 3 * hid));
        let one = T::one();
        for b in 0..rows {
            for j in 0..hid {
                let (r, z, n, hn, hp) = (
                    cache.r[[b, j]],
                    cache.z[[b, j]],
                    cache.n[[b, j]],
                    cache.hn[[b, j]],
                    cache.h_prev[[b, j]],
                );
                let g = dh[[b, j]];
                let dn = g * (one - z);
                let dz = g * (hp - n);
                let dan = dn * (one - n * n);
                let dr = dan * hn;
                let dar = dr * r * (one - r);
                let daz = dz * z * (one - z);
                dgi[[b, j]] = dar;
                dgi[[b, hid + j]] = daz;
                dgi[[b, 2 * hid + j]] = dan;
                dgh[[b, j]] = dar;
                dgh[[b, hid + j]] = daz;
                dgh[[b, 2 * hid + j]] = dan * r;
            }
        }
        grad.w_hh += &cache.h_prev.t().dot(&dgh);
        grad.b_hh += &dgh.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut dh_prev = dgh.dot(&self.w_hh.t());
        Zip::from(&mut dh_prev)
            .and(dh)
            .and(&cache.z)
            .for_each(|d, &g, &z| *d += g * z);
        (dgi, dh_prev)
    }

    /// Input-weight gradients for inputs `x` and gate gradients `dgi`;
    /// returns `dL/dx`.
    pub fn input_backward(&self, x: &ArrayView2<T>, dgi: &ArrayView2<T>, grad: &mut GruCell<T>) -> Array2<T> {
        grad.w_ih += &x.t().dot(dgi);
        grad.b_ih += &dgi.sum_axis(Axis(0)).insert_axis(Axis(0));
        dgi.dot(&self.w_ih.t())
    }
}

impl<T: Scalar> Parameterized<T> for GruCell<T> {
    fn params(&self) -> Vec<(String, &Array2<T>)> {
        vec![
            ("w_ih".into(), &self.w_ih),
            ("w_hh".into(), &self.w_hh),
            ("b_ih".into(), &self.b_ih),
            ("b_hh".into(), &self.b_hh),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        vec![
            ("w_ih".into(), &mut self.w_ih),
            ("w_hh".into(), &mut self.w_hh),
            ("b_ih".into(), &mut self.b_ih),
            ("b_hh".into(), &mut self.b_hh),
        ]
    }
}

/// A padded batch of sequences stored time-major: row `t * batch + b` holds
/// step `t` of item `b`. Rows past an item's length are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch<T> {
    pub data: Array2<T>,
    pub lengths: Vec<usize>,
}

impl<T: Scalar> SeqBatch<T> {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn steps(&self) -> usize {
        if self.lengths.is_empty() {
            0
        } else {
            self.data.nrows() / self.lengths.len()
        }
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Pads `items` (each `T_b × d`) into one batch.
    pub fn from_items<'a>(items: impl IntoIterator<Item = ArrayView2<'a, T>>) -> Self {
        let items: Vec<ArrayView2<'a, T>> = items.into_iter().collect();
        let batch = items.len();
        let steps = items.iter().map(|x| x.nrows()).max().unwrap_or(0);
        let dim = items.first().map_or(0, |x| x.ncols());
        let mut data = Array2::zeros((steps * batch, dim));
        for (b, x) in items.iter().enumerate() {
            for t in 0..x.nrows() {
                data.row_mut(t * batch + b).assign(&x.row(t));
            }
        }
        SeqBatch {
            data,
            lengths: items.iter().map(|x| x.nrows()).collect(),
        }
    }

    pub fn step(&self, t: usize) -> ArrayView2<'_, T> {
        let b = self.batch();
        self.data.slice(s![t * b..(t + 1) * b, ..])
    }

    /// Unpadded rows of item `b`.
    pub fn item(&self, b: usize) -> Array2<T> {
        let batch = self.batch();
        let len = self.lengths[b];
        let mut out = Array2::zeros((len, self.dim()));
        for t in 0..len {
            out.row_mut(t).assign(&self.data.row(t * batch + b));
        }
        out
    }

    /// 1 for valid rows and 0 for padding, per row of `data`.
    pub fn mask(&self) -> Array1<T> {
        let batch = self.batch();
        Array1::from_shape_fn(self.data.nrows(), |i| {
            if i / batch < self.lengths[i % batch] {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn is_valid(&self, t: usize, b: usize) -> bool {
        t < self.lengths[b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_softmax_normalizes() {
        let x = ndarray::array![[1.0f64, 2.0, 3.0], [-50.0, 0.0, 50.0]];
        let l = log_softmax_rows(&x.view());
        for row in l.rows() {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_step_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cell = GruCell::<f64>::new(&mut rng, 3, 4);
        let x: Array2<f64> = uniform_init(&mut rng, (2, 3), 1.0);
        let h: Array2<f64> = uniform_init(&mut rng, (2, 4), 1.0);
        let wsum: Array2<f64> = uniform_init(&mut rng, (2, 4), 1.0);
        let loss = |c: &GruCell<f64>, x: &Array2<f64>, h: &Array2<f64>| {
            let gi = c.input_gates(&x.view());
            let (o, _) = c.step(&gi.view(), &h.view());
            (&o * &wsum).sum()
        };
        let gi = cell.input_gates(&x.view());
        let (_, cache) = cell.step(&gi.view(), &h.view());
        let mut grad = zeros_like(&cell);
        let (dgi, dh) = cell.step_backward(&cache, &wsum.view(), &mut grad);
        let dx = cell.input_backward(&x.view(), &dgi.view(), &mut grad);
        let eps = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut hp = h.clone();
                hp[[i, j]] += eps;
                let mut hm = h.clone();
                hm[[i, j]] -= eps;
                let fd = (loss(&cell, &x, &hp) - loss(&cell, &x, &hm)) / (2.0 * eps);
                assert!((fd - dh[[i, j]]).abs() < 1e-8);
            }
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let fd = (loss(&cell, &xp, &h) - loss(&cell, &xm, &h)) / (2.0 * eps);
                assert!((fd - dx[[i, j]]).abs() < 1e-8);
            }
        }
        let names: Vec<String> = grad.params().into_iter().map(|(n, _)| n).collect();
        for (k, name) in names.iter().enumerate() {
            let shape = cell.params()[k].1.dim();
            for idx in [(0, 0), (shape.0 - 1, shape.1 - 1)] {
                let mut c = cell.clone();
                c.params_mut()[k].1[idx] += eps;
                let lp = loss(&c, &x, &h);
                c.params_mut()[k].1[idx] -= 2.0 * eps;
                let lm = loss(&c, &x, &h);
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - grad.params()[k].1[idx]).abs() < 1e-8, "{name}");
            }
        }
    }

    #[test]
    fn seq_batch_layout() {
        let a = ndarray::array![[1.0f32, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let b = ndarray::array![[7.0f32, 8.0]];
        let batch = SeqBatch::from_items([a.view(), b.view()]);
        assert_eq!((batch.steps(), batch.batch(), batch.dim()), (3, 2, 2));
        assert_eq!(batch.item(0), a);
        assert_eq!(batch.item(1), b);
        assert_eq!(batch.mask().to_vec(), vec![1.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(batch.step(1).to_owned(), ndarray::array![[3.0, 4.0], [0.0, 0.0]]);
    }
}
