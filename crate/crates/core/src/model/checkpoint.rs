//! Binary checkpoints: magic, format version, JSON header, raw tensors.
//!
//! ```text
//! b"SLUCKPT\0" | u32 version | u64 header_len | header (JSON) | f64 LE data
//! ```
//!
//! Tensors are stored as f64 in header order regardless of the model's
//! scalar type.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderConfig};
use super::nn::Parameterized;
use super::slu::{ModelConfig, SluModel};
use crate::error::{Error, Result};
use crate::frontend::FeatureConfig;
use crate::scalar::Scalar;
use crate::semantics::LabelVocabulary;

pub const MAGIC: &[u8; 8] = b"SLUCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Payload {
    Model {
        model: ModelConfig,
        features: FeatureConfig,
        vocab: LabelVocabulary,
    },
    Encoder {
        encoder: EncoderConfig,
        features: FeatureConfig,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: String,
    payload: Payload,
    tensors: Vec<TensorInfo>,
    #[serde(default)]
    extra: serde_json::Value,
}

fn write_container<T: Scalar>(
    path: &Path,
    payload: Payload,
    params: Vec<(String, &Array2<T>)>,
    extra: serde_json::Value,
) -> Result<()> {
    let header = Header {
        dtype: T::DTYPE.to_string(),
        payload,
        tensors: params
            .iter()
            .map(|(n, p)| TensorInfo {
                name: n.clone(),
                rows: p.nrows(),
                cols: p.ncols(),
            })
            .collect(),
        extra,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(json.len() + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, p) in &params {
        for &v in p.iter() {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_container(path: &Path) -> Result<(Header, Vec<Array2<f64>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
    let mut pos = 20 + len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Array2::from_shape_vec((t.rows, t.cols), data).expect("sized above"));
        pos += 8 * n;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((header, tensors))
}

fn fill<T: Scalar>(path: &Path, dst: Vec<(String, &mut Array2<T>)>, header: &Header, src: Vec<Array2<f64>>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} tensors stored, model has {}",
            path.display(),
            src.len(),
            dst.len()
        )));
    }
    for ((name, p), (info, data)) in dst.into_iter().zip(header.tensors.iter().zip(src)) {
        if name != info.name || p.dim() != data.dim() {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {} {:?} does not match model tensor {name} {:?}",
                path.display(),
                info.name,
                data.dim(),
                p.dim()
            )));
        }
        p.zip_mut_with(&data, |a, &b| *a = T::from_f64_lossy(b));
    }
    Ok(())
}

pub fn save_model<T: Scalar>(model: &SluModel<T>, path: impl AsRef<Path>) -> Result<()> {
    save_model_with(model, path, serde_json::Value::Null)
}

/// Like [`save_model`], also storing free-form metadata.
pub fn save_model_with<T: Scalar>(model: &SluModel<T>, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
    let payload = Payload::Model {
        model: model.config.clone(),
        features: model.features.clone(),
        vocab: model.vocab.clone(),
    };
    write_container(path.as_ref(), payload, model.net.params(), extra)
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<SluModel<T>> {
    let path = path.as_ref();
    let (header, tensors) = read_container(path)?;
    let Payload::Model { model, features, vocab } = header.payload.clone() else {
        return Err(Error::Checkpoint(format!("{}: holds encoder weights only", path.display())));
    };
    let mut m = SluModel::new(model, features, vocab, 0)?;
    fill(path, m.net.params_mut(), &header, tensors)?;
    Ok(m)
}

/// Free-form metadata stored with a checkpoint.
pub fn checkpoint_extra(path: impl AsRef<Path>) -> Result<serde_json::Value> {
    Ok(read_container(path.as_ref())?.0.extra)
}

pub fn save_encoder<T: Scalar>(enc: &Encoder<T>, features: &FeatureConfig, path: impl AsRef<Path>) -> Result<()> {
    let payload = Payload::Encoder {
        encoder: enc.config.clone(),
        features: features.clone(),
    };
    write_container(path.as_ref(), payload, enc.params(), serde_json::Value::Null)
}

/// Loads an encoder and the feature configuration it was trained with.
pub fn load_encoder<T: Scalar>(path: impl AsRef<Path>) -> Result<(Encoder<T>, FeatureConfig)> {
    let path = path.as_ref();
    let (header, tensors) = read_container(path)?;
    let (cfg, features) = match header.payload.clone() {
        Payload::Encoder { encoder, features } => (encoder, features),
        Payload::Model { model, features, .. } => (model.encoder, features),
    };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut enc = Encoder::new(&mut rng, cfg)?;
    let prefix = matches!(header.payload, Payload::Model { .. });
    let (info, data): (Vec<TensorInfo>, Vec<Array2<f64>>) = header
        .tensors
        .iter()
        .cloned()
        .zip(tensors)
        .filter(|(t, _)| !prefix || t.name.starts_with("encoder."))
        .map(|(mut t, d)| {
            if prefix {
                t.name = t.name["encoder.".len()..].to_string();
            }
            (t, d)
        })
        .unzip();
    let header = Header { tensors: info, ..header };
    fill(path, enc.params_mut(), &header, data)?;
    Ok((enc, features))
}

/// Replaces the model's encoder weights with pretrained ones. Architecture
/// and feature configuration must match.
pub fn load_pretrained_encoder<T: Scalar>(model: &mut SluModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (enc, features) = load_encoder::<T>(path)?;
    if enc.config != model.config.encoder || features != model.features {
        return Err(Error::Checkpoint(format!(
            "{}: pretrained encoder or feature configuration differs from the model's",
            path.display()
        )));
    }
    model.net.encoder = enc;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::FeatureSequence;
    use crate::model::nn::uniform_init;
    use crate::model::slu::tests::{fixed_labels, tiny_ar, tiny_model};
    use crate::model::slu::DecoderConfig;
    use rand::SeedableRng;

    #[test]
    fn round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let f = FeatureSequence::new(uniform_init(&mut rng, (11, 4), 1.0), 0.01);
        for dec in [DecoderConfig::MaxPool, tiny_ar()] {
            let m = tiny_model(dec, &fixed_labels(), 5);
            let p = dir.path().join("m.ckpt");
            save_model(&m, &p).unwrap();
            let back: SluModel<f64> = load_model(&p).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.predict(&f).unwrap(), m.predict(&f).unwrap());
            let as_f32: SluModel<f32> = load_model(&p).unwrap();
            let f32_feats = FeatureSequence::new(f.frames.mapv(|v| v as f32), 0.01);
            let h32 = as_f32.encode(&f32_feats).unwrap();
            let h64 = m.encode(&f).unwrap();
            for (a, b) in h32.iter().zip(h64.iter()) {
                assert!((*a as f64 - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn corrupt_or_mismatched_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_model(DecoderConfig::MaxPool, &fixed_labels(), 5);
        let p = dir.path().join("m.ckpt");
        save_model(&m, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[8] = 9;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_model::<f64>(&p), Err(Error::Checkpoint(_))));
        bytes[8] = 1;
        bytes.truncate(bytes.len() - 8);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_model::<f64>(&p), Err(Error::Checkpoint(_))));
        fs::write(&p, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_model::<f64>(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn pretrained_encoder_must_match_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let a = tiny_model(DecoderConfig::MaxPool, &fixed_labels(), 5);
        let p = dir.path().join("enc.ckpt");
        save_encoder(&a.net.encoder, &a.features, &p).unwrap();
        let mut b = tiny_model(tiny_ar(), &fixed_labels(), 6);
        load_pretrained_encoder(&mut b, &p).unwrap();
        assert_eq!(b.net.encoder, a.net.encoder);
        let mut c = b.clone();
        c.config.encoder.rnn[0].hidden = 5;
        c.net.encoder.config.rnn[0].hidden = 5;
        assert!(matches!(load_pretrained_encoder(&mut c, &p), Err(Error::Checkpoint(_))));
        let full = dir.path().join("full.ckpt");
        save_model(&b, &full).unwrap();
        let (enc, _) = load_encoder::<f64>(&full).unwrap();
        assert_eq!(enc, b.net.encoder);
    }
}
