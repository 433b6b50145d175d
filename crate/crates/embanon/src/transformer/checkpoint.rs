//! `.ptck` model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "PTCK" | u16 version=1 | u16 reserved=0
//! config: u32 l, d, d_spk, d_layer, n_layers, n_heads, d_ff, n_speakers
//!         f64 dropout | u64 seed
//! u32 pool_len | pool_len x u32 speaker_id
//! u32 n_params
//! per parameter:
//!   u16 name_len | name utf-8 | u8 ndim | ndim x u32 dims | f32 values
//! ```
//!
//! Parameters are stored float32; loading lifts them back to float64, so a
//! save/load round trip perturbs eval outputs by at most float32 rounding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::datamodel::corpus::DataError;
use crate::datamodel::io::ByteReader;

use super::config::{ModelError, PrivacyTransformerConfig};
use super::model::PrivacyTransformer;

pub const PTCK_MAGIC: &[u8; 4] = b"PTCK";
pub const PTCK_VERSION: u16 = 1;

pub fn save(model: &PrivacyTransformer, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(PTCK_MAGIC);
    out.extend_from_slice(&PTCK_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in [
        cfg.l,
        cfg.d,
        cfg.d_spk,
        cfg.d_layer,
        cfg.n_layers,
        cfg.n_heads,
        cfg.d_ff,
        cfg.n_speakers,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&cfg.dropout.to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());

    out.extend_from_slice(&(model.pool.len() as u32).to_le_bytes());
    for &s in &model.pool {
        out.extend_from_slice(&s.to_le_bytes());
    }

    let params = model.parameters();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in &params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.tensor.shape();
        out.push(shape.len() as u8);
        for &dim in &shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        p.tensor.with_values(|values| {
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        });
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<PrivacyTransformer, ModelError> {
    let buf = fs::read(path)?;
    load_bytes(&buf)
}

pub fn load_bytes(buf: &[u8]) -> Result<PrivacyTransformer, ModelError> {
    let mut r = ByteReader::new(buf);
    let magic = r.take(4)?;
    if magic != PTCK_MAGIC {
        return Err(ModelError::Data(DataError::BadMagic {
            offset: 0,
            expected: String::from_utf8_lossy(PTCK_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        }));
    }
    let version_offset = r.offset();
    let version = r.u16()?;
    if version != PTCK_VERSION {
        return Err(ModelError::Data(DataError::UnsupportedVersion {
            offset: version_offset,
            version,
        }));
    }
    let _reserved = r.u16()?;

    let mut fields = [0u32; 8];
    for f in fields.iter_mut() {
        *f = r.u32()?;
    }
    let dropout = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let seed = r.u64()?;
    let config = PrivacyTransformerConfig {
        l: fields[0],
        d: fields[1],
        d_spk: fields[2],
        d_layer: fields[3],
        n_layers: fields[4],
        n_heads: fields[5],
        d_ff: fields[6],
        n_speakers: fields[7],
        dropout,
        seed,
    };

    let pool_len = r.u32()? as usize;
    let mut pool = Vec::with_capacity(pool_len);
    for _ in 0..pool_len {
        pool.push(r.u32()?);
    }

    let model = PrivacyTransformer::init(config, &pool)?;
    let params: BTreeMap<String, crate::numerics::Parameter> = model
        .parameters()
        .into_iter()
        .map(|p| (p.name.clone(), p))
        .collect();
    let mut filled = std::collections::BTreeSet::new();

    let n_params = r.u32()? as usize;
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?)
            .into_owned();
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let values = r.f32_slice(numel)?;
        let param = params.get(&name).ok_or_else(|| ModelError::CheckpointParam {
            name: name.clone(),
            problem: "not a parameter of this architecture".into(),
        })?;
        if param.tensor.shape() != shape {
            return Err(ModelError::CheckpointParam {
                name,
                problem: format!(
                    "shape {:?} does not match expected {:?}",
                    shape,
                    param.tensor.shape()
                ),
            });
        }
        let lifted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        param.tensor.set_values(&lifted);
        filled.insert(name);
    }
    if filled.len() != params.len() {
        let missing: Vec<&String> = params.keys().filter(|k| !filled.contains(*k)).collect();
        return Err(ModelError::CheckpointParam {
            name: missing
                .first()
                .map(|s| s.to_string())
                .unwrap_or_default(),
            problem: format!("{} parameters missing from checkpoint", missing.len()),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_synthetic, SyntheticConfig};
    use crate::numerics::Tensor;
    use crate::transformer::model::{ForwardMode, TargetAssignment};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> PrivacyTransformer {
        let cfg = PrivacyTransformerConfig {
            l: 3,
            d: 6,
            d_spk: 4,
            d_layer: 2,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            n_speakers: 4,
            dropout: 0.1,
            seed: 21,
        };
        PrivacyTransformer::init(cfg, &[5, 6, 7, 8]).unwrap()
    }

    #[test]
    fn round_trip_outputs_agree_to_f32_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ptck");
        let m = model();
        save(&m, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.config, m.config);
        assert_eq!(loaded.pool, m.pool);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::new(
            &[2, 3, 6],
            (0..36).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        );
        let targets = TargetAssignment::uniform(3, &[1, 3]);
        let a = m.forward(&z, &targets, ForwardMode::Eval).unwrap().values();
        let b = loaded.forward(&z, &targets, ForwardMode::Eval).unwrap().values();
        let max_diff = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-6, "round trip changed outputs by {max_diff}");
    }

    #[test]
    fn two_loads_are_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ptck");
        save(&model(), &path).unwrap();
        let a = load(&path).unwrap();
        let b = load(&path).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ptck");
        save(&model(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(
            load_bytes(cut),
            Err(ModelError::Data(DataError::Truncated { .. }))
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        assert!(matches!(
            load_bytes(b"NOPE0000000000000000"),
            Err(ModelError::Data(DataError::BadMagic { offset: 0, .. }))
        ));
    }

    #[test]
    fn loaded_model_rejects_mismatched_corpus_at_anonymize() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ptck");
        save(&model(), &path).unwrap();
        let loaded = load(&path).unwrap();
        // corpus with a different layer count than the checkpoint config
        let corpus = generate_synthetic(&SyntheticConfig {
            n_speakers: 4,
            n_contents: 3,
            l: 5,
            d: 6,
            speaker_latent: 2,
            content_latent: 2,
            noise_sigma: 0.0,
            seed: 9,
        })
        .unwrap();
        assert!(matches!(
            loaded.anonymize_corpus(&corpus, 0),
            Err(ModelError::CorpusDims { .. })
        ));
    }
}
