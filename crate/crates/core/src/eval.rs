//! Exact-match accuracy, loss evaluation and multi-run statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Manifest;
use crate::error::{Error, Result};
use crate::frontend::{FeatureSequence, FeatureStore};
use crate::model::{BeamConfig, SluModel, Target};
use crate::scalar::Scalar;
use crate::semantics::{labels_equal, parse_label, SemanticLabel};
use crate::train::{load_examples, Example};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub accuracy: f64,
    /// Mean per-utterance loss over utterances whose label the model can
    /// score; `None` if there are none.
    pub loss: Option<f64>,
    pub n_utterances: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Ids of utterances whose audio could not be read; counted as wrong.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unreadable: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (`n - 1` divisor); 0 for a single value.
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub accuracy: Aggregate,
    pub loss: Option<Aggregate>,
    pub n_runs: usize,
}

/// Fraction of predictions that parse and equal their reference.
pub fn exact_match_accuracy<S: AsRef<str>>(predictions: &[S], references: &[SemanticLabel]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Input("no utterances to score".into()));
    }
    let correct = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| parse_label(p.as_ref(), r.variant()).is_ok_and(|l| labels_equal(&l, r)))
        .count();
    Ok(correct as f64 / references.len() as f64)
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Input("cannot aggregate an empty list".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Aggregate { mean, std, n })
}

pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<AggregateMetrics> {
    let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let losses: Vec<f64> = runs.iter().filter_map(|r| r.loss).collect();
    Ok(AggregateMetrics {
        accuracy: aggregate(&acc)?,
        loss: (!losses.is_empty()).then(|| aggregate(&losses)).transpose()?,
        n_runs: runs.len(),
    })
}

const LOSS_BATCH: usize = 32;

/// Decodes every example and averages the loss of those with targets.
pub fn evaluate_examples<T: Scalar>(model: &SluModel<T>, examples: &[Example<T>], beam: BeamConfig) -> Result<RunMetrics> {
    if examples.is_empty() {
        return Err(Error::Input("no utterances to evaluate".into()));
    }
    let texts: Vec<String> = examples
        .par_iter()
        .map(|e| model.predict_with(&e.features, beam).map(|p| p.text))
        .collect::<Result<_>>()?;
    let refs: Vec<SemanticLabel> = examples.iter().map(|e| e.label.clone()).collect();
    let accuracy = exact_match_accuracy(&texts, &refs)?;
    let scored: Vec<(&FeatureSequence<T>, &Target)> = examples
        .iter()
        .filter_map(|e| e.target.as_ref().map(|t| (&*e.features, t)))
        .collect();
    let sums: Vec<f64> = scored
        .par_chunks(LOSS_BATCH)
        .map(|c| model.batch_loss(c).map(|l| l.to_f64_lossy() * c.len() as f64))
        .collect::<Result<_>>()?;
    let loss = (!scored.is_empty()).then(|| sums.iter().sum::<f64>() / scored.len() as f64);
    Ok(RunMetrics {
        accuracy,
        loss,
        n_utterances: examples.len(),
        seed: None,
        unreadable: Vec::new(),
    })
}

/// Exact-match accuracy by beam search and mean teacher-forced loss over a
/// manifest. Unreadable audio counts as incorrect; more than 1% aborts.
pub fn evaluate<T: Scalar>(
    model: &SluModel<T>,
    manifest: &Manifest,
    beam: Option<BeamConfig>,
    store: &FeatureStore<T>,
) -> Result<RunMetrics> {
    let set = load_examples(model, manifest, store, 0.01)?;
    let n = manifest.records.len();
    let mut m = evaluate_examples(model, &set.examples, beam.unwrap_or_else(|| model.beam()))?;
    m.accuracy = m.accuracy * set.examples.len() as f64 / n as f64;
    m.n_utterances = n;
    m.unreadable = set.unreadable.into_iter().map(|(id, _)| id).collect();
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::{serialize_label, FixedSlotLabel};
    use proptest::prelude::*;

    fn fixed(a: &str, o: &str, l: &str) -> SemanticLabel {
        FixedSlotLabel::new(a, o, l).into()
    }

    #[test]
    fn exact_match_rule() {
        let refs = vec![fixed("a", "b", "c"), fixed("d", "e", "f")];
        assert_eq!(exact_match_accuracy(&["a|b|c", "d|e|f"], &refs).unwrap(), 1.0);
        assert_eq!(exact_match_accuracy(&["a|b|c", "d|e|x"], &refs).unwrap(), 0.5);
        assert_eq!(exact_match_accuracy(&["a|b", "\u{3}|||"], &refs).unwrap(), 0.0);
        assert!(matches!(exact_match_accuracy(&["a|b|c"], &refs), Err(Error::Input(_))));
    }

    #[test]
    fn aggregate_uses_sample_std() {
        let a = aggregate(&[0.9, 0.9, 0.9]).unwrap();
        assert!((a.mean - 0.9).abs() < 1e-12 && a.std == 0.0);
        let b = aggregate(&[0.8, 1.0]).unwrap();
        assert!((b.mean - 0.9).abs() < 1e-12);
        assert!((b.std - 0.02f64.sqrt()).abs() < 1e-12);
        let c = aggregate(&[0.5]).unwrap();
        assert_eq!((c.std, c.n), (0.0, 1));
        assert!(aggregate(&[]).is_err());
        assert!(aggregate_runs(&[]).is_err());
    }

    proptest! {
        #[test]
        fn random_strings_never_crash_scoring(strings in proptest::collection::vec(".{0,20}", 1..20)) {
            let refs: Vec<SemanticLabel> = strings.iter().map(|_| fixed("a", "b", "c")).collect();
            let acc = exact_match_accuracy(&strings, &refs).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
        }

        #[test]
        fn accuracy_is_fraction_of_equal_pairs(flags in proptest::collection::vec(any::<bool>(), 1..50)) {
            let refs: Vec<SemanticLabel> = (0..flags.len()).map(|i| fixed("x", &format!("o{i}"), "none")).collect();
            let preds: Vec<String> = refs
                .iter()
                .zip(&flags)
                .map(|(r, &ok)| if ok { serialize_label(r).unwrap() } else { "x|wrong|none".into() })
                .collect();
            let expected = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
            prop_assert_eq!(exact_match_accuracy(&preds, &refs).unwrap(), expected);
        }

        #[test]
        fn mean_lies_within_range(values in proptest::collection::vec(-1e3f64..1e3, 1..30)) {
            let a = aggregate(&values).unwrap();
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a.mean >= lo - 1e-9 && a.mean <= hi + 1e-9);
            prop_assert!(a.std >= 0.0);
        }
    }
}
