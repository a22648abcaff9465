//! Versioned binary persistence for parameter bundles.
//!
//! File layout: 4-byte magic `"S2ST"`, format version (u32 LE), manifest
//! length (u64 LE), a JSON manifest (named arrays with shape, element type,
//! and byte offset, plus free-form metadata), then the payload: contiguous
//! little-endian IEEE-754 arrays in manifest order. Parameters are stored in
//! single precision — every trainable value lives on the f32 grid in memory,
//! so the round trip is bit-identical.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::DiscriminatorParams;
use crate::error::{Error, Result};
use crate::generator::GeneratorParams;
use crate::nhsmm::HsmmParams;
use crate::templates::TemplatePool;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"S2ST";
pub const VERSION: u32 = 1;

/// One named array: name, shape, row-major data.
pub type NamedArray = (String, Vec<usize>, Vec<f64>);

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct ManifestDoc {
    arrays: Vec<ArrayMeta>,
    meta: serde_json::Value,
}

/// Write a named-array collection plus free-form metadata. Two saves of the
/// same input produce byte-identical files.
pub fn save_arrays(path: &Path, arrays: &[NamedArray], meta: &serde_json::Value) -> Result<()> {
    let mut metas = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for (name, shape, data) in arrays {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::InvalidConfig(format!(
                "array {name}: shape {shape:?} does not describe {} values",
                data.len()
            )));
        }
        metas.push(ArrayMeta {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f32".into(),
            offset,
        });
        offset += (count * 4) as u64;
    }
    let manifest = serde_json::to_vec(&ManifestDoc { arrays: metas, meta: meta.clone() })
        .map_err(|e| Error::CorruptCheckpoint(format!("manifest encoding failed: {e}")))?;

    let mut bytes = Vec::with_capacity(16 + manifest.len() + offset as usize);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest);
    for (_, _, data) in arrays {
        for &x in data {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a named-array collection and its metadata, validating the magic,
/// version, manifest offsets, and payload bounds.
pub fn load_arrays(path: &Path) -> Result<(Vec<NamedArray>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(Error::Format);
    }
    if bytes.len() < 16 {
        return Err(Error::CorruptCheckpoint("truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version { found: version, supported: VERSION });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::CorruptCheckpoint("manifest extends past end of file".into()))?;
    let manifest: ManifestDoc = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::CorruptCheckpoint(format!("bad manifest: {e}")))?;
    let payload = &bytes[payload_start..];

    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    let mut expected = 0u64;
    for meta in &manifest.arrays {
        if meta.dtype != "f32" {
            return Err(Error::CorruptCheckpoint(format!(
                "array {}: unsupported dtype {}",
                meta.name, meta.dtype
            )));
        }
        if meta.offset != expected {
            return Err(Error::CorruptCheckpoint(format!(
                "array {}: offset {} where {} was expected",
                meta.name, meta.offset, expected
            )));
        }
        let count: usize = meta.shape.iter().product();
        let nbytes = count * 4;
        let start = meta.offset as usize;
        let end = start
            .checked_add(nbytes)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| {
                Error::CorruptCheckpoint(format!("array {} extends past payload", meta.name))
            })?;
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        arrays.push((meta.name.clone(), meta.shape.clone(), data));
        expected += nbytes as u64;
    }
    if expected as usize != payload.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "payload holds {} bytes but the manifest describes {expected}",
            payload.len()
        )));
    }
    Ok((arrays, manifest.meta))
}

/// Everything one training stage produces: the segment model, optionally the
/// generator and discriminator, the template pool, and the run provenance
/// (config, vocabulary token list, seed).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub hsmm: HsmmParams,
    pub generator: Option<GeneratorParams>,
    pub discriminator: Option<DiscriminatorParams>,
    pub pool: Option<TemplatePool>,
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub seed: u64,
}

/// Serialize a bundle to the checkpoint format.
pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let mut arrays: Vec<NamedArray> = Vec::new();
    for (name, shape, data) in bundle.hsmm.arrays() {
        arrays.push((name.to_string(), shape, data.to_vec()));
    }
    if let Some(gen) = &bundle.generator {
        for (name, shape, data) in gen.arrays() {
            arrays.push((name.to_string(), shape, data.to_vec()));
        }
    }
    if let Some(disc) = &bundle.discriminator {
        for (name, shape, data) in disc.arrays() {
            arrays.push((name, shape, data.to_vec()));
        }
    }
    let meta = serde_json::json!({
        "config": bundle.config,
        "vocab": bundle.vocab,
        "seed": bundle.seed,
        "pool": bundle.pool,
    });
    save_arrays(path, &arrays, &meta)
}

fn fill(slots: Vec<(String, &mut [f64])>, stored: &[NamedArray], what: &str) -> Result<()> {
    use std::collections::HashMap;
    let by_name: HashMap<&str, &NamedArray> =
        stored.iter().map(|entry| (entry.0.as_str(), entry)).collect();
    for (name, slot) in slots {
        let (_, _, data) = by_name.get(name.as_str()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("{what}: missing array {name}"))
        })?;
        if data.len() != slot.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{what}: array {name} holds {} values where {} fit",
                data.len(),
                slot.len()
            )));
        }
        slot.copy_from_slice(data);
    }
    Ok(())
}

/// Load a bundle, reconstructing parameter structures from the stored config
/// and vocabulary and overwriting every array from the payload.
pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let (arrays, meta) = load_arrays(path)?;
    let config: TrainConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| Error::CorruptCheckpoint(format!("bad config: {e}")))?;
    let vocab: Vec<String> = serde_json::from_value(meta["vocab"].clone())
        .map_err(|e| Error::CorruptCheckpoint(format!("bad vocab: {e}")))?;
    let seed: u64 = serde_json::from_value(meta["seed"].clone())
        .map_err(|e| Error::CorruptCheckpoint(format!("bad seed: {e}")))?;
    let pool: Option<TemplatePool> = serde_json::from_value(meta["pool"].clone())
        .map_err(|e| Error::CorruptCheckpoint(format!("bad pool: {e}")))?;
    for (i, reserved) in crate::corpus::RESERVED.iter().enumerate() {
        if vocab.get(i).map(String::as_str) != Some(*reserved) {
            return Err(Error::CorruptCheckpoint(format!(
                "vocabulary entry {i} should be the reserved token {reserved}"
            )));
        }
    }
    let vocab_size = vocab.len();

    // Structure comes from the config; values come from the payload. The
    // seeding rng below is a placeholder that is fully overwritten.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut hsmm = HsmmParams::new_seeded(
        config.k, config.d_max, config.d1, config.d2, config.d3, vocab_size, &mut rng,
    );
    let hsmm_slots: Vec<(String, &mut [f64])> =
        hsmm.arrays_mut().into_iter().map(|(n, s)| (n.to_string(), s)).collect();
    fill(hsmm_slots, &arrays, "segment model")?;

    let has_gen = arrays.iter().any(|(n, _, _)| n.starts_with("gen."));
    let generator = if has_gen {
        let mut gen = GeneratorParams::from_hsmm(&hsmm, &mut rng)?;
        let slots: Vec<(String, &mut [f64])> =
            gen.arrays_mut().into_iter().map(|(n, s)| (n.to_string(), s)).collect();
        fill(slots, &arrays, "generator")?;
        Some(gen)
    } else {
        None
    };

    let has_disc = arrays.iter().any(|(n, _, _)| n.starts_with("disc."));
    let discriminator = if has_disc {
        let mut disc = DiscriminatorParams::new_seeded(
            vocab_size,
            config.d3,
            config.h_d,
            &config.conv_windows,
            config.n_filters,
            &mut rng,
        )?;
        fill(disc.arrays_mut(), &arrays, "discriminator")?;
        Some(disc)
    } else {
        None
    };

    Ok(ModelBundle { hsmm, generator, discriminator, pool, config, vocab, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{generate_beam, sample_rollout};
    use crate::templates::Template;
    use rand::Rng;

    fn tiny_bundle(seed: u64) -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = TrainConfig {
            k: 2,
            d_max: 2,
            d1: 3,
            d2: 3,
            d3: 3,
            conv_windows: vec![1, 2],
            n_filters: 3,
            h_d: 4,
            ..TrainConfig::default()
        };
        let vocab: Vec<String> = ["<pad>", "<unk>", "<bos>", "<seg>", "red", "green", "blue"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let hsmm = HsmmParams::new_seeded(
            config.k, config.d_max, config.d1, config.d2, config.d3, vocab.len(), &mut rng,
        );
        let mut gen = GeneratorParams::from_hsmm(&hsmm, &mut rng).unwrap();
        for (_, slot) in gen.arrays_mut() {
            for x in slot.iter_mut() {
                *x = (rng.gen_range(-0.5..=0.5) as f32) as f64;
            }
        }
        let disc = DiscriminatorParams::new_seeded(
            vocab.len(), config.d3, config.h_d, &config.conv_windows, config.n_filters, &mut rng,
        )
        .unwrap();
        let mut counts = std::collections::BTreeMap::new();
        counts.insert(vec![0usize, 1], 3);
        counts.insert(vec![1usize, 0, 1], 1);
        let pool = TemplatePool::from_counts(counts).unwrap();
        ModelBundle {
            hsmm,
            generator: Some(gen),
            discriminator: Some(disc),
            pool: Some(pool),
            config,
            vocab,
            seed,
        }
    }

    #[test]
    fn named_arrays_round_trip_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arrays.ckpt");
        // Values on the f32 grid, including negative infinity and exact zero.
        let arrays: Vec<NamedArray> = vec![
            ("a.w".into(), vec![2, 2], vec![1.5, -0.25, f64::NEG_INFINITY, 0.0]),
            ("b".into(), vec![3], vec![(0.1f32) as f64, 2.0, -3.5]),
        ];
        let meta = serde_json::json!({"note": 7});
        save_arrays(&path, &arrays, &meta).unwrap();
        let (back, meta_back) = load_arrays(&path).unwrap();
        assert_eq!(arrays, back);
        assert_eq!(meta, meta_back);
    }

    #[test]
    fn two_saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.ckpt");
        let p2 = dir.path().join("two.ckpt");
        let bundle = tiny_bundle(5);
        save_checkpoint(&bundle, &p1).unwrap();
        save_checkpoint(&bundle, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn empty_collection_is_a_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ckpt");
        save_arrays(&path, &[], &serde_json::Value::Null).unwrap();
        let (arrays, meta) = load_arrays(&path).unwrap();
        assert!(arrays.is_empty());
        assert_eq!(meta, serde_json::Value::Null);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"XXXX rest of file").unwrap();
        assert!(matches!(load_arrays(&path), Err(Error::Format)));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v999.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&999u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_arrays(&path),
            Err(Error::Version { found: 999, supported: VERSION })
        ));
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        let arrays: Vec<NamedArray> = vec![("a".into(), vec![4], vec![1.0, 2.0, 3.0, 4.0])];
        save_arrays(&path, &arrays, &serde_json::Value::Null).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_arrays(&path), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn misaligned_manifest_offset_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("offset.ckpt");
        let manifest = serde_json::to_vec(&ManifestDoc {
            arrays: vec![ArrayMeta {
                name: "a".into(),
                shape: vec![1],
                dtype: "f32".into(),
                offset: 4,
            }],
            meta: serde_json::Value::Null,
        })
        .unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&manifest);
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_arrays(&path), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn full_bundle_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.ckpt");
        let bundle = tiny_bundle(9);
        save_checkpoint(&bundle, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.hsmm, bundle.hsmm);
        assert_eq!(back.generator, bundle.generator);
        assert_eq!(back.discriminator, bundle.discriminator);
        assert_eq!(back.pool, bundle.pool);
        assert_eq!(back.config, bundle.config);
        assert_eq!(back.vocab, bundle.vocab);
        assert_eq!(back.seed, bundle.seed);
    }

    #[test]
    fn segment_model_only_bundle_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hsmm.ckpt");
        let mut bundle = tiny_bundle(11);
        bundle.generator = None;
        bundle.discriminator = None;
        bundle.pool = None;
        save_checkpoint(&bundle, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, bundle);
    }

    #[test]
    fn generation_from_a_loaded_checkpoint_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        let bundle = tiny_bundle(13);
        save_checkpoint(&bundle, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();

        let template = Template { entries: vec![(0, 2), (1, 1)] };
        let message = vec![4u32, 5];
        let original = bundle.generator.as_ref().unwrap();
        let loaded = back.generator.as_ref().unwrap();
        assert_eq!(
            generate_beam(original, &message, &template, 3).unwrap(),
            generate_beam(loaded, &message, &template, 3).unwrap()
        );
        let mut r1 = ChaCha8Rng::seed_from_u64(21);
        let mut r2 = ChaCha8Rng::seed_from_u64(21);
        assert_eq!(
            sample_rollout(original, &message, &template, &Vec::new(), 3, &mut r1).unwrap(),
            sample_rollout(loaded, &message, &template, &Vec::new(), 3, &mut r2).unwrap()
        );
    }
}
