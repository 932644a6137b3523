//! Beam search over the autoregressive decoder.

use serde::{Deserialize, Serialize};

use super::decoder::{AttentionMemory, AutoregressiveDecoder, DecoderState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::semantics::LabelAlphabet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
}

impl BeamConfig {
    /// Width 8 and room for twice the longest training label.
    pub fn for_longest_label(chars: usize) -> Self {
        BeamConfig {
            width: 8,
            max_len: 2 * (chars + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis<T> {
    /// Emitted tokens, ending in EOS unless cut off at `max_len`.
    pub tokens: Vec<usize>,
    /// Sum of the per-token log-probabilities.
    pub log_prob: T,
    pub state: DecoderState<T>,
}

impl<T> Hypothesis<T> {
    pub fn ended(&self) -> bool {
        self.tokens.last() == Some(&LabelAlphabet::EOS_INDEX)
    }
}

/// Keeps the `width` best extensions of all live hypotheses at every step.
/// A hypothesis completes on EOS or when it reaches `max_len` tokens; search
/// stops once no live hypothesis can beat the best completed one.
pub fn beam_search<T: Scalar>(
    dec: &AutoregressiveDecoder<T>,
    memory: &AttentionMemory<T>,
    width: usize,
    max_len: usize,
) -> Result<Hypothesis<T>> {
    if width == 0 || max_len == 0 {
        return Err(Error::Config("beam width and max_len must be at least 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: T::zero(),
        state: dec.initial_state(1),
    }];
    let mut best: Option<Hypothesis<T>> = None;
    for _ in 0..max_len {
        let prev: Vec<usize> = live
            .iter()
            .map(|h| h.tokens.last().copied().unwrap_or(LabelAlphabet::BOS_INDEX))
            .collect();
        let stacked = DecoderState {
            s1: ndarray::concatenate(ndarray::Axis(0), &live.iter().map(|h| h.state.s1.view()).collect::<Vec<_>>())
                .expect("same width"),
            s2: ndarray::concatenate(ndarray::Axis(0), &live.iter().map(|h| h.state.s2.view()).collect::<Vec<_>>())
                .expect("same width"),
            c: ndarray::concatenate(ndarray::Axis(0), &live.iter().map(|h| h.state.c.view()).collect::<Vec<_>>())
                .expect("same width"),
        };
        let (logp, next) = dec.decode_step(memory, &prev, &stacked)?;
        let mut cands: Vec<(T, usize, usize)> = Vec::with_capacity(live.len() * logp.ncols());
        for (i, h) in live.iter().enumerate() {
            for (a, &lp) in logp.row(i).iter().enumerate() {
                cands.push((h.log_prob + lp, i, a));
            }
        }
        cands.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(std::cmp::Ordering::Equal));
        cands.truncate(width);
        let mut next_live = Vec::with_capacity(width);
        for (score, i, a) in cands {
            let mut tokens = live[i].tokens.clone();
            tokens.push(a);
            let h = Hypothesis {
                tokens,
                log_prob: score,
                state: next.select(&[i]),
            };
            if a == LabelAlphabet::EOS_INDEX || h.tokens.len() >= max_len {
                if best.as_ref().is_none_or(|b| h.log_prob > b.log_prob) {
                    best = Some(h);
                }
            } else {
                next_live.push(h);
            }
        }
        live = next_live;
        let top_live = live.iter().map(|h| h.log_prob).fold(T::neg_infinity(), T::max);
        if live.is_empty() || best.as_ref().is_some_and(|b| b.log_prob >= top_live) {
            break;
        }
    }
    Ok(best.expect("every hypothesis completes by max_len"))
}

/// Most likely token at every step.
pub fn greedy_decode<T: Scalar>(
    dec: &AutoregressiveDecoder<T>,
    memory: &AttentionMemory<T>,
    max_len: usize,
) -> Result<Hypothesis<T>> {
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: T::zero(),
        state: dec.initial_state(1),
    };
    while h.tokens.len() < max_len && !h.ended() {
        let prev = h.tokens.last().copied().unwrap_or(LabelAlphabet::BOS_INDEX);
        let (logp, next) = dec.decode_step(memory, &[prev], &h.state)?;
        let (a, &lp) = logp
            .row(0)
            .iter()
            .enumerate()
            .fold((0, &T::neg_infinity()), |m, x| if *x.1 > *m.1 { x } else { m });
        h.tokens.push(a);
        h.log_prob += lp;
        h.state = next;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::decoder::{AttentionDecoderConfig, QuerySource};
    use crate::model::nn::uniform_init;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64, alphabet: usize, scale: f64) -> (AutoregressiveDecoder<f64>, AttentionMemory<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AttentionDecoderConfig {
            embed_dim: 3,
            hidden: 4,
            att_dim: 3,
            value_dim: 3,
            query: QuerySource::FirstLayer,
        };
        let mut dec = AutoregressiveDecoder::new(&mut rng, 4, alphabet, cfg).unwrap();
        dec.out.w.mapv_inplace(|v| v * scale);
        let h: Array2<f64> = uniform_init(&mut rng, (3, 4), 1.0);
        let mem = dec.memory(&h.view()).unwrap();
        (dec, mem)
    }

    /// Scores every token sequence that ends in EOS or has length `max_len`.
    fn exhaustive(dec: &AutoregressiveDecoder<f64>, mem: &AttentionMemory<f64>, max_len: usize) -> (Vec<usize>, f64) {
        let a = dec.alphabet_size();
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut stack = vec![(Vec::<usize>::new(), 0.0f64, dec.initial_state(1))];
        while let Some((toks, lp, st)) = stack.pop() {
            let prev = toks.last().copied().unwrap_or(LabelAlphabet::BOS_INDEX);
            let (logp, next) = dec.decode_step(mem, &[prev], &st).unwrap();
            for y in 0..a {
                let mut t = toks.clone();
                t.push(y);
                let score = lp + logp[[0, y]];
                if y == LabelAlphabet::EOS_INDEX || t.len() == max_len {
                    if score > best.1 {
                        best = (t, score);
                    }
                } else {
                    stack.push((t, score, next.clone()));
                }
            }
        }
        best
    }

    #[test]
    fn width_one_is_greedy() {
        for seed in 0..50 {
            let (dec, mem) = random_model(seed, 6, 3.0);
            let b = beam_search(&dec, &mem, 1, 12).unwrap();
            let g = greedy_decode(&dec, &mem, 12).unwrap();
            assert_eq!(b.tokens, g.tokens, "seed {seed}");
            assert!((b.log_prob - g.log_prob).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_beam_equals_exhaustive_search() {
        for seed in 0..100 {
            let (dec, mem) = random_model(1000 + seed, 4, 2.0);
            let (tokens, score) = exhaustive(&dec, &mem, 5);
            let b = beam_search(&dec, &mem, 4usize.pow(5), 5).unwrap();
            assert_eq!(b.tokens, tokens, "seed {seed}");
            assert!((b.log_prob - score).abs() < 1e-9);
        }
    }

    #[test]
    fn wider_beam_never_scores_lower_on_random_models() {
        for seed in 0..100 {
            let (dec, mem) = random_model(2000 + seed, 8, 2.0);
            let narrow = beam_search(&dec, &mem, 1, 10).unwrap();
            let wide = beam_search(&dec, &mem, 8, 10).unwrap();
            assert!(wide.log_prob >= narrow.log_prob - 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn score_is_sum_of_step_log_probs() {
        let (dec, mem) = random_model(7, 6, 2.0);
        let h = beam_search(&dec, &mem, 4, 8).unwrap();
        let mut st = dec.initial_state(1);
        let mut prev = LabelAlphabet::BOS_INDEX;
        let mut total = 0.0;
        for &y in &h.tokens {
            let (lp, next) = dec.decode_step(&mem, &[prev], &st).unwrap();
            total += lp[[0, y]];
            st = next;
            prev = y;
        }
        assert!((total - h.log_prob).abs() < 1e-12);
        assert!(h.ended() || h.tokens.len() == 8);
    }
}
