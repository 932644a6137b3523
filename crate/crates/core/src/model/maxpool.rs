//! Per-timestep slot classifiers followed by global max-pooling.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use super::nn::{log_softmax_rows, prefixed, Linear, Parameterized, SeqBatch};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPoolDecoder<T> {
    pub heads: Vec<Linear<T>>,
}

/// Pooled scores plus, for every class, the row that produced the maximum.
#[derive(Debug, Clone)]
pub struct PooledBatch<T> {
    /// One `B × C_s` matrix per slot.
    pub scores: Vec<Array2<T>>,
    argmax: Vec<Vec<usize>>,
}

impl<T: Scalar> MaxPoolDecoder<T> {
    pub fn new<R: Rng>(rng: &mut R, d_enc: usize, sizes: &[usize]) -> Self {
        MaxPoolDecoder {
            heads: sizes.iter().map(|&c| Linear::new(rng, d_enc, c)).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.d_out()).collect()
    }

    /// `score[s][c] = max_t linear_s(h_t)[c]` for one hidden sequence.
    pub fn decode(&self, h: &ArrayView2<T>) -> Result<Vec<Array1<T>>> {
        if h.nrows() == 0 {
            return Err(Error::Shape("max-pool decoder needs at least one timestep".into()));
        }
        Ok(self
            .heads
            .iter()
            .map(|head| {
                let s = head.forward(h);
                let mut m = s.row(0).to_owned();
                for row in s.rows() {
                    ndarray::Zip::from(&mut m).and(&row).for_each(|a, &b| {
                        if b > *a {
                            *a = b
                        }
                    });
                }
                m
            })
            .collect())
    }

    pub fn forward_batch(&self, enc: &SeqBatch<T>) -> PooledBatch<T> {
        let batch = enc.batch();
        let mut scores = Vec::new();
        let mut argmax = Vec::new();
        for head in &self.heads {
            let s = head.forward(&enc.data.view());
            let c = s.ncols();
            let mut pooled = Array2::zeros((batch, c));
            let mut arg = vec![0; batch * c];
            for b in 0..batch {
                for k in 0..c {
                    let mut best = b;
                    for t in 1..enc.lengths[b] {
                        let r = t * batch + b;
                        if s[[r, k]] > s[[best, k]] {
                            best = r;
                        }
                    }
                    pooled[[b, k]] = s[[best, k]];
                    arg[b * c + k] = best;
                }
            }
            scores.push(pooled);
            argmax.push(arg);
        }
        PooledBatch { scores, argmax }
    }

    /// Sum of per-slot cross-entropies for each item.
    pub fn item_losses(pooled: &PooledBatch<T>, targets: &[[usize; 3]]) -> Vec<T> {
        let mut out = vec![T::zero(); targets.len()];
        for (s, scores) in pooled.scores.iter().enumerate() {
            let lp = log_softmax_rows(&scores.view());
            for (b, t) in targets.iter().enumerate() {
                out[b] -= lp[[b, t[s]]];
            }
        }
        out
    }

    /// Gradient of `Σ_b weight_b · loss_b`. Returns `dL/d enc.data`.
    pub fn backward(
        &self,
        enc: &SeqBatch<T>,
        pooled: &PooledBatch<T>,
        targets: &[[usize; 3]],
        weights: &[T],
        grad: &mut MaxPoolDecoder<T>,
    ) -> Array2<T> {
        let mut d_enc = Array2::zeros(enc.data.raw_dim());
        for (s, head) in self.heads.iter().enumerate() {
            let scores = &pooled.scores[s];
            let c = scores.ncols();
            let mut p = log_softmax_rows(&scores.view()).mapv(|v| v.exp());
            let mut ds = Array2::zeros((enc.data.nrows(), c));
            for (b, t) in targets.iter().enumerate() {
                p[[b, t[s]]] -= T::one();
                for k in 0..c {
                    ds[[pooled.argmax[s][b * c + k], k]] += p[[b, k]] * weights[b];
                }
            }
            d_enc += &head.backward(&enc.data.view(), &ds.view(), &mut grad.heads[s]);
        }
        d_enc
    }
}

impl<T: Scalar> Parameterized<T> for MaxPoolDecoder<T> {
    fn params(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = Vec::new();
        for (i, h) in self.heads.iter().enumerate() {
            out.extend(prefixed(&format!("head{i}"), h.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        let mut out = Vec::new();
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.extend(prefixed(&format!("head{i}"), h.params_mut()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::nn::uniform_init;
    use ndarray::concatenate;
    use ndarray::Axis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pooled_scores_are_brute_force_maxima() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dec = MaxPoolDecoder::<f64>::new(&mut rng, 6, &[3, 4, 5]);
        let h: Array2<f64> = uniform_init(&mut rng, (5, 6), 1.0);
        let pooled = dec.decode(&h.view()).unwrap();
        for (s, head) in dec.heads.iter().enumerate() {
            for c in 0..head.d_out() {
                let mut best = f64::NEG_INFINITY;
                for t in 0..5 {
                    let mut v = head.b[[0, c]];
                    for i in 0..6 {
                        v += h[[t, i]] * head.w[[i, c]];
                    }
                    best = best.max(v);
                }
                assert!((pooled[s][c] - best).abs() < 1e-12);
            }
        }
        let one = h.slice(ndarray::s![2..3, ..]);
        let single = dec.decode(&one).unwrap();
        for (s, head) in dec.heads.iter().enumerate() {
            assert_eq!(single[s], head.forward(&one).row(0));
        }
        let doubled = concatenate(Axis(0), &[h.view(), h.view()]).unwrap();
        assert_eq!(dec.decode(&doubled.view()).unwrap(), pooled);
        assert!(matches!(dec.decode(&Array2::zeros((0, 6)).view()), Err(Error::Shape(_))));
    }

    #[test]
    fn batched_pooling_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dec = MaxPoolDecoder::<f64>::new(&mut rng, 3, &[2, 3, 2]);
        let xs: Vec<Array2<f64>> = [4, 1, 3].iter().map(|&t| uniform_init(&mut rng, (t, 3), 1.0)).collect();
        let batch = SeqBatch::from_items(xs.iter().map(|x| x.view()));
        let pooled = dec.forward_batch(&batch);
        for (b, x) in xs.iter().enumerate() {
            let single = dec.decode(&x.view()).unwrap();
            for s in 0..3 {
                assert_eq!(pooled.scores[s].row(b), single[s]);
            }
        }
    }
}
