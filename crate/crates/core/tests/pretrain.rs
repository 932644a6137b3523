use slu_core::frontend::{FeatureConfig, FeatureMode, FeatureStore};
use slu_core::model::{ConvStageConfig, Encoder, EncoderConfig, Parameterized, RnnStageConfig};
use slu_core::pretrain::{load_asr_manifest, pretrain_encoder, save_asr_manifest, PretrainConfig};
use slu_core::toy::build_asr_corpus;
use slu_core::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn features() -> FeatureConfig {
    FeatureConfig {
        mode: FeatureMode::LogMel { n_mels: 16 },
        sample_rate: 8000,
        hop_s: 0.02,
        cmvn: true,
        ..FeatureConfig::default()
    }
}

fn encoder() -> Encoder<f32> {
    let cfg = EncoderConfig {
        input_dim: 16,
        conv: vec![ConvStageConfig {
            channels: 24,
            kernel: 3,
            pool: 2,
        }],
        rnn: vec![RnnStageConfig {
            hidden: 16,
            bidirectional: true,
        }],
    };
    Encoder::new(&mut ChaCha8Rng::seed_from_u64(3), cfg).unwrap()
}

#[test]
fn pretraining_learns_phones() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_asr_corpus(120, 7, 8000, dir.path()).unwrap();
    let csv = dir.path().join("asr.csv");
    save_asr_manifest(&m, &csv).unwrap();
    let m = load_asr_manifest(&csv).unwrap();
    let store = FeatureStore::new(features());
    let mut enc = encoder();
    let cfg = PretrainConfig {
        epochs: 15,
        lr: 0.01,
        ..PretrainConfig::default()
    };
    let r = pretrain_encoder(&mut enc, &m, &cfg, &store).unwrap();
    println!("{r:?}");
    assert!(r.final_loss <= 0.5 * r.initial_loss);
    assert!(r.final_accuracy > 0.2);
}

#[test]
fn zero_epochs_leave_weights_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_asr_corpus(6, 1, 8000, dir.path()).unwrap();
    let store = FeatureStore::new(features());
    let mut enc = encoder();
    let before = enc.clone();
    let cfg = PretrainConfig {
        epochs: 0,
        ..PretrainConfig::default()
    };
    pretrain_encoder(&mut enc, &m, &cfg, &store).unwrap();
    for ((_, a), (_, b)) in before.params().iter().zip(enc.params().iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn missing_alignment_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = build_asr_corpus(3, 1, 8000, dir.path()).unwrap();
    m.records[1].alignment.clear();
    let store = FeatureStore::new(features());
    let err = pretrain_encoder(&mut encoder(), &m, &PretrainConfig::default(), &store).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
}
