//! Encoder plus decoder head, with losses and prediction.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::beam::{beam_search, BeamConfig};
use super::decoder::{AttentionDecoderConfig, AutoregressiveDecoder};
use super::encoder::{Encoder, EncoderConfig};
use super::maxpool::MaxPoolDecoder;
use super::nn::{prefixed, zeros_like, Parameterized, SeqBatch};
use crate::error::{Error, Result};
use crate::frontend::{FeatureConfig, FeatureSequence};
use crate::scalar::Scalar;
use crate::semantics::{parse_label, serialize_label, LabelVariant, LabelVocabulary, SemanticLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecoderConfig {
    MaxPool,
    Autoregressive(AttentionDecoderConfig),
}

/// How a sequence's negative log-likelihood is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    #[default]
    PerToken,
    PerSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Defaults to width 8 and twice the longest training label.
    #[serde(default)]
    pub beam: Option<BeamConfig>,
    #[serde(default)]
    pub loss_normalization: LossNormalization,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoder<T> {
    MaxPool(MaxPoolDecoder<T>),
    Autoregressive(AutoregressiveDecoder<T>),
}

/// All trainable weights. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> Parameterized<T> for Network<T> {
    fn params(&self) -> Vec<(String, &Array2<T>)> {
        let mut out: Vec<_> = prefixed("encoder", self.encoder.params()).collect();
        match &self.decoder {
            Decoder::MaxPool(d) => out.extend(prefixed("decoder", d.params())),
            Decoder::Autoregressive(d) => out.extend(prefixed("decoder", d.params())),
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        let mut out: Vec<_> = prefixed("encoder", self.encoder.params_mut()).collect();
        match &mut self.decoder {
            Decoder::MaxPool(d) => out.extend(prefixed("decoder", d.params_mut())),
            Decoder::Autoregressive(d) => out.extend(prefixed("decoder", d.params_mut())),
        }
        out
    }
}

/// Training target in the form the decoder consumes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Slots([usize; 3]),
    /// EOS-terminated character indices.
    Chars(Vec<usize>),
}

impl Target {
    fn tokens(&self) -> usize {
        match self {
            Target::Slots(_) => 1,
            Target::Chars(c) => c.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    /// Decoded label string.
    pub text: String,
    /// `None` when the string does not parse as a label.
    pub label: Option<SemanticLabel>,
    pub score: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SluModel<T> {
    pub config: ModelConfig,
    pub features: FeatureConfig,
    pub vocab: LabelVocabulary,
    pub net: Network<T>,
}

impl<T: Scalar> SluModel<T> {
    pub fn new(config: ModelConfig, features: FeatureConfig, vocab: LabelVocabulary, seed: u64) -> Result<Self> {
        if features.dim() != config.encoder.input_dim {
            return Err(Error::Config(format!(
                "feature dimension {} does not match encoder input {}",
                features.dim(),
                config.encoder.input_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&mut rng, config.encoder.clone())?;
        let d_enc = encoder.output_dim();
        let decoder = match &config.decoder {
            DecoderConfig::MaxPool => {
                let fixed = vocab.fixed.as_ref().ok_or_else(|| {
                    Error::Config("the max-pool decoder needs fixed-slot labels".into())
                })?;
                Decoder::MaxPool(MaxPoolDecoder::new(&mut rng, d_enc, &fixed.sizes()))
            }
            DecoderConfig::Autoregressive(c) => {
                Decoder::Autoregressive(AutoregressiveDecoder::new(&mut rng, d_enc, vocab.alphabet.len(), c.clone())?)
            }
        };
        Ok(SluModel {
            config,
            features,
            vocab,
            net: Network { encoder, decoder },
        })
    }

    pub fn beam(&self) -> BeamConfig {
        self.config
            .beam
            .unwrap_or_else(|| BeamConfig::for_longest_label(self.vocab.max_label_chars))
    }

    pub fn target(&self, label: &SemanticLabel) -> Result<Target> {
        match &self.net.decoder {
            Decoder::MaxPool(_) => {
                let fixed = label
                    .as_fixed()
                    .ok_or_else(|| Error::Input("max-pool decoder needs a fixed-slot label".into()))?;
                let vocab = self.vocab.fixed.as_ref().expect("checked at construction");
                Ok(Target::Slots(vocab.encode(fixed)?))
            }
            Decoder::Autoregressive(_) => Ok(Target::Chars(self.vocab.alphabet.encode(&serialize_label(label)?)?)),
        }
    }

    pub fn encode(&self, f: &FeatureSequence<T>) -> Result<Array2<T>> {
        self.net.encoder.encode(f)
    }

    pub fn predict(&self, f: &FeatureSequence<T>) -> Result<Prediction<T>> {
        self.predict_with(f, self.beam())
    }

    pub fn predict_with(&self, f: &FeatureSequence<T>, beam: BeamConfig) -> Result<Prediction<T>> {
        let h = self.encode(f)?;
        match &self.net.decoder {
            Decoder::MaxPool(d) => {
                let scores = d.decode(&h.view())?;
                let mut classes = [0; 3];
                let mut score = T::zero();
                for (s, row) in scores.iter().enumerate() {
                    let (c, &v) = row
                        .iter()
                        .enumerate()
                        .fold((0, &T::neg_infinity()), |m, x| if *x.1 > *m.1 { x } else { m });
                    classes[s] = c;
                    score += v;
                }
                let label: SemanticLabel = self.vocab.fixed.as_ref().expect("fixed vocab").decode(classes).into();
                Ok(Prediction {
                    text: serialize_label(&label)?,
                    label: Some(label),
                    score,
                })
            }
            Decoder::Autoregressive(d) => {
                let mem = d.memory(&h.view())?;
                let hyp = beam_search(d, &mem, beam.width, beam.max_len)?;
                let text = self.vocab.alphabet.decode(&hyp.tokens);
                let label = parse_label(&text, self.vocab.variant).ok().map(|mut l| {
                    self.vocab.reattach_entities(&mut l);
                    l
                });
                Ok(Prediction {
                    text,
                    label,
                    score: hyp.log_prob,
                })
            }
        }
    }

    pub fn variant(&self) -> LabelVariant {
        self.vocab.variant
    }

    fn item_weights(&self, targets: &[&Target]) -> Vec<T> {
        let n = T::from_usize(targets.len()).expect("batch size");
        targets
            .iter()
            .map(|t| match self.config.loss_normalization {
                LossNormalization::PerToken => T::one() / (n * T::from_usize(t.tokens()).expect("length")),
                LossNormalization::PerSequence => T::one() / n,
            })
            .collect()
    }

    fn batch_forward(
        &self,
        items: &[(&FeatureSequence<T>, &Target)],
        want_grad: bool,
    ) -> Result<(T, Option<Network<T>>)> {
        if items.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let x = SeqBatch::from_items(items.iter().map(|(f, _)| f.frames.view()));
        let (enc, trace) = self.net.encoder.forward_batch(&x)?;
        let targets: Vec<&Target> = items.iter().map(|(_, t)| *t).collect();
        let weights = self.item_weights(&targets);
        let mut grad = want_grad.then(|| zeros_like(&self.net));
        let (per_item, d_enc) = match &self.net.decoder {
            Decoder::MaxPool(d) => {
                let slots: Vec<[usize; 3]> = targets
                    .iter()
                    .map(|t| match t {
                        Target::Slots(s) => Ok(*s),
                        Target::Chars(_) => Err(Error::Input("character target for max-pool decoder".into())),
                    })
                    .collect::<Result<_>>()?;
                let pooled = d.forward_batch(&enc);
                let losses = MaxPoolDecoder::item_losses(&pooled, &slots);
                let d_enc = grad.as_mut().map(|g| match &mut g.decoder {
                    Decoder::MaxPool(gd) => d.backward(&enc, &pooled, &slots, &weights, gd),
                    Decoder::Autoregressive(_) => unreachable!("gradient mirrors the model"),
                });
                (losses, d_enc)
            }
            Decoder::Autoregressive(d) => {
                let chars: Vec<Vec<usize>> = targets
                    .iter()
                    .map(|t| match t {
                        Target::Chars(c) => Ok(c.clone()),
                        Target::Slots(_) => Err(Error::Input("slot target for autoregressive decoder".into())),
                    })
                    .collect::<Result<_>>()?;
                let tf = d.forward_teacher(&enc, &chars)?;
                let losses = tf.item_nll();
                let d_enc = grad.as_mut().map(|g| match &mut g.decoder {
                    Decoder::Autoregressive(gd) => d.backward_teacher(&enc, &tf, &weights, gd),
                    Decoder::MaxPool(_) => unreachable!("gradient mirrors the model"),
                });
                (losses, d_enc)
            }
        };
        if let (Some(g), Some(d)) = (grad.as_mut(), d_enc) {
            self.net.encoder.backward(&trace, &d, &mut g.encoder);
        }
        let loss = per_item.iter().zip(&weights).map(|(&l, &w)| l * w).sum();
        Ok((loss, grad))
    }

    /// Mean item loss over the batch.
    pub fn batch_loss(&self, items: &[(&FeatureSequence<T>, &Target)]) -> Result<T> {
        Ok(self.batch_forward(items, false)?.0)
    }

    pub fn loss_and_grad(&self, items: &[(&FeatureSequence<T>, &Target)]) -> Result<(T, Network<T>)> {
        let (loss, grad) = self.batch_forward(items, true)?;
        Ok((loss, grad.expect("requested")))
    }

    /// Loss of a single utterance: summed slot cross-entropy, or the
    /// teacher-forced NLL under the configured normalization.
    pub fn item_loss(&self, f: &FeatureSequence<T>, target: &Target) -> Result<T> {
        self.batch_loss(&[(f, target)])
    }
}

/// Teacher-forced negative log-likelihood of `target` (EOS-terminated).
pub fn teacher_forced_nll<T: Scalar>(model: &SluModel<T>, f: &FeatureSequence<T>, target: &[usize]) -> Result<T> {
    if target.is_empty() {
        return Err(Error::Input("empty target sequence".into()));
    }
    if !matches!(model.net.decoder, Decoder::Autoregressive(_)) {
        return Err(Error::Config("teacher forcing needs the autoregressive decoder".into()));
    }
    model.item_loss(f, &Target::Chars(target.to_vec()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::decoder::QuerySource;
    use crate::model::encoder::{ConvStageConfig, RnnStageConfig};
    use crate::model::nn::uniform_init;
    use crate::semantics::{FixedSlotLabel, LabelAlphabet, OpenSlotLabel, Slot};

    pub(crate) fn fixed_labels() -> Vec<SemanticLabel> {
        vec![
            FixedSlotLabel::new("activate", "lights", "kitchen").into(),
            FixedSlotLabel::new("increase", "heat", "none").into(),
            FixedSlotLabel::new("bring", "shoes", "none").into(),
        ]
    }

    pub(crate) fn tiny_encoder(input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            conv: vec![ConvStageConfig {
                channels: 3,
                kernel: 3,
                pool: 2,
            }],
            rnn: vec![RnnStageConfig {
                hidden: 3,
                bidirectional: true,
            }],
        }
    }

    pub(crate) fn tiny_features() -> FeatureConfig {
        FeatureConfig {
            mode: crate::frontend::FeatureMode::LogMel { n_mels: 4 },
            ..FeatureConfig::default()
        }
    }

    pub(crate) fn tiny_model(decoder: DecoderConfig, labels: &[SemanticLabel], seed: u64) -> SluModel<f64> {
        let vocab = LabelVocabulary::from_labels(labels).unwrap();
        let cfg = ModelConfig {
            encoder: tiny_encoder(4),
            decoder,
            beam: None,
            loss_normalization: LossNormalization::PerToken,
        };
        SluModel::new(cfg, tiny_features(), vocab, seed).unwrap()
    }

    pub(crate) fn tiny_ar() -> DecoderConfig {
        DecoderConfig::Autoregressive(AttentionDecoderConfig {
            embed_dim: 3,
            hidden: 4,
            att_dim: 3,
            value_dim: 3,
            query: QuerySource::FirstLayer,
        })
    }

    fn feats(seed: u64, t: usize) -> FeatureSequence<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence::new(uniform_init(&mut rng, (t, 4), 1.0), 0.01)
    }

    /// Largest per-group relative error between analytic and central
    /// finite-difference gradients.
    fn check_gradients(model: &SluModel<f64>, items: &[(&FeatureSequence<f64>, &Target)]) {
        let (_, grad) = model.loss_and_grad(items).unwrap();
        let eps = 1e-5;
        let names: Vec<String> = model.net.params().into_iter().map(|(n, _)| n).collect();
        for (k, name) in names.iter().enumerate() {
            let shape = model.net.params()[k].1.dim();
            let mut num = Vec::new();
            let mut ana = Vec::new();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let mut m = model.clone();
                    m.net.params_mut()[k].1[[i, j]] += eps;
                    let lp = m.batch_loss(items).unwrap();
                    m.net.params_mut()[k].1[[i, j]] -= 2.0 * eps;
                    let lm = m.batch_loss(items).unwrap();
                    num.push((lp - lm) / (2.0 * eps));
                    ana.push(grad.params()[k].1[[i, j]]);
                }
            }
            let diff = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = num.iter().map(|a| a * a).sum::<f64>().sqrt() + ana.iter().map(|a| a * a).sum::<f64>().sqrt();
            let rel = if norm < 1e-10 { diff } else { diff / norm };
            assert!(rel < 1e-4, "{name}: relative error {rel}");
        }
    }

    #[test]
    fn maxpool_gradients_match_finite_differences() {
        let labels = fixed_labels();
        let model = tiny_model(DecoderConfig::MaxPool, &labels, 3);
        let f = [feats(1, 6), feats(2, 5)];
        let t: Vec<Target> = labels[..2].iter().map(|l| model.target(l).unwrap()).collect();
        check_gradients(&model, &[(&f[0], &t[0]), (&f[1], &t[1])]);
    }

    #[test]
    fn teacher_forced_gradients_match_finite_differences() {
        let labels: Vec<SemanticLabel> = vec![
            OpenSlotLabel::new("on", vec![Slot::new("r", "room", "hall")]).into(),
            OpenSlotLabel::new("off", vec![]).into(),
        ];
        for query in [QuerySource::FirstLayer, QuerySource::SecondLayer] {
            for norm in [LossNormalization::PerToken, LossNormalization::PerSequence] {
                let mut model = tiny_model(tiny_ar(), &labels, 4);
                if let Decoder::Autoregressive(d) = &mut model.net.decoder {
                    d.config.query = query;
                }
                model.config.loss_normalization = norm;
                let f = [feats(5, 6), feats(6, 3)];
                let t: Vec<Target> = labels.iter().map(|l| model.target(l).unwrap()).collect();
                check_gradients(&model, &[(&f[0], &t[0]), (&f[1], &t[1])]);
            }
        }
    }

    #[test]
    fn nll_matches_hand_rolled_accumulation() {
        let labels = fixed_labels();
        let model = tiny_model(tiny_ar(), &labels, 9);
        let Decoder::Autoregressive(dec) = &model.net.decoder else {
            unreachable!()
        };
        let f = feats(10, 7);
        let target = model.vocab.alphabet.encode("increase|heat|none").unwrap();
        let nll = teacher_forced_nll(&model, &f, &target).unwrap();
        let h = model.encode(&f).unwrap();
        let mem = dec.memory(&h.view()).unwrap();
        let mut state = dec.initial_state(1);
        let mut prev = LabelAlphabet::BOS_INDEX;
        let mut total = 0.0;
        for &y in &target {
            let (lp, next) = dec.decode_step(&mem, &[prev], &state).unwrap();
            total -= lp[[0, y]];
            state = next;
            prev = y;
        }
        assert!(nll >= 0.0);
        assert!((nll - total / target.len() as f64).abs() < 1e-6);
        assert!(matches!(teacher_forced_nll(&model, &f, &[]), Err(Error::Input(_))));
    }

    #[test]
    fn uniform_decoder_gives_log_alphabet_loss() {
        let labels = fixed_labels();
        let mut model = tiny_model(tiny_ar(), &labels, 1);
        let a = model.vocab.alphabet.len();
        if let Decoder::Autoregressive(d) = &mut model.net.decoder {
            d.out.w.fill(0.0);
            d.out.b.fill(0.0);
        }
        let f = feats(3, 9);
        let target = model.vocab.alphabet.encode("bring|shoes|none").unwrap();
        let nll = teacher_forced_nll(&model, &f, &target).unwrap();
        assert!((nll - (a as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn predictions_are_labels_of_the_right_variant() {
        let labels = fixed_labels();
        let mp = tiny_model(DecoderConfig::MaxPool, &labels, 2);
        let p = mp.predict(&feats(1, 8)).unwrap();
        assert!(matches!(p.label, Some(SemanticLabel::FixedSlot(_))));
        let ar = tiny_model(tiny_ar(), &labels, 2);
        let p = ar.predict(&feats(1, 8)).unwrap();
        assert!(p.text.chars().count() <= ar.beam().max_len);
        assert_eq!(ar.beam().width, 8);
    }

    #[test]
    fn maxpool_rejects_open_slot_vocabularies() {
        let labels: Vec<SemanticLabel> = vec![OpenSlotLabel::new("on", vec![]).into()];
        let vocab = LabelVocabulary::from_labels(&labels).unwrap();
        let cfg = ModelConfig {
            encoder: tiny_encoder(4),
            decoder: DecoderConfig::MaxPool,
            beam: None,
            loss_normalization: LossNormalization::PerToken,
        };
        assert!(matches!(
            SluModel::<f64>::new(cfg, tiny_features(), vocab, 0),
            Err(Error::Config(_))
        ));
    }
}
