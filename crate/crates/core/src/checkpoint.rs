//! Single-file model container.
//!
//! Layout: the magic bytes `TABCFCKP`, a little-endian `u64` header length,
//! the UTF-8 JSON header, then every parameter tensor as little-endian
//! binary32 values in header order. The header names each block, records
//! its shape and SHA-256, and carries the table schema and its digest.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::diffusion::{cosine_schedule, DiffusionModel};
use crate::error::{Error, Result};
use crate::nn::{
    ArPlausibilityModel, ArVariant, ClassifierNet, DenoiserNet, EmbeddingDictionary, Module,
    TabularVae,
};
use crate::tabular::{schema_digest, Dataset, Schema, Vocabulary};

pub const MAGIC: &[u8; 8] = b"TABCFCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Diffusion,
    Classifier,
    Plausibility,
    Vae,
}

/// Table description shared by every model trained on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub schema: Schema,
    pub vocab: Vocabulary,
    pub label_name: String,
    pub classes: Vec<String>,
}

impl TableMeta {
    pub fn of(dataset: &Dataset) -> Self {
        Self {
            schema: dataset.schema.clone(),
            vocab: dataset.vocab.clone(),
            label_name: dataset.label_name.clone(),
            classes: dataset.classes.clone(),
        }
    }

    pub fn digest(&self) -> String {
        schema_digest(&self.schema, &self.vocab)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    pub table: TableMeta,
    pub schema_digest: String,
    pub architecture: Value,
    pub metadata: BTreeMap<String, Value>,
    pub blocks: Vec<BlockEntry>,
}

/// Models that can be rebuilt from an architecture description.
pub trait Persist: Module + Sized {
    const KIND: ModelKind;

    fn architecture(&self) -> Value;

    /// A model of the described shape; its parameter values are overwritten.
    fn skeleton(architecture: &Value, table: &TableMeta) -> Result<Self>;
}

fn field<T: serde::de::DeserializeOwned>(arch: &Value, key: &str) -> Result<T> {
    let v = arch
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("architecture lacks `{key}`")))?;
    Ok(serde_json::from_value(v.clone())?)
}

fn skeleton_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl Persist for DiffusionModel {
    const KIND: ModelKind = ModelKind::Diffusion;

    fn architecture(&self) -> Value {
        json!({
            "steps": self.schedule.steps(),
            "cosine_offset": self.schedule.offset(),
            "embedding_width": self.dict.width(),
            "time_width": self.denoiser.time_width,
            "hidden": self.denoiser.hidden(),
        })
    }

    fn skeleton(arch: &Value, table: &TableMeta) -> Result<Self> {
        let mut rng = skeleton_rng();
        let schedule = cosine_schedule(field(arch, "steps")?, field(arch, "cosine_offset")?)?;
        let dict = EmbeddingDictionary::new(
            &table.vocab.cardinalities(),
            field(arch, "embedding_width")?,
            &mut rng,
        );
        let denoiser = DenoiserNet::new(
            dict.row_width(),
            field(arch, "time_width")?,
            field(arch, "hidden")?,
            &mut rng,
        );
        DiffusionModel::new(schedule, denoiser, dict, table.schema.clone(), table.vocab.clone())
    }
}

impl Persist for ClassifierNet {
    const KIND: ModelKind = ModelKind::Classifier;

    fn architecture(&self) -> Value {
        json!({
            "input_width": self.input_width(),
            "hidden": self.mlp.layers[0].fan_out(),
            "classes": self.classes(),
        })
    }

    fn skeleton(arch: &Value, _: &TableMeta) -> Result<Self> {
        Ok(ClassifierNet::new(
            field(arch, "input_width")?,
            field(arch, "hidden")?,
            field(arch, "classes")?,
            &mut skeleton_rng(),
        ))
    }
}

impl Persist for ArPlausibilityModel {
    const KIND: ModelKind = ModelKind::Plausibility;

    fn architecture(&self) -> Value {
        json!({
            "variant": self.variant(),
            "hidden": self.hidden(),
            "layers": self.layers(),
            "heads": self.heads(),
        })
    }

    fn skeleton(arch: &Value, table: &TableMeta) -> Result<Self> {
        let variant: ArVariant = field(arch, "variant")?;
        ArPlausibilityModel::new(
            variant,
            &table.vocab.cardinalities(),
            field(arch, "hidden")?,
            field(arch, "layers")?,
            field(arch, "heads")?,
            &mut skeleton_rng(),
        )
    }
}

impl Persist for TabularVae {
    const KIND: ModelKind = ModelKind::Vae;

    fn architecture(&self) -> Value {
        json!({
            "row_width": self.row_width(),
            "hidden": self.hidden(),
            "latent": self.latent(),
        })
    }

    fn skeleton(arch: &Value, _: &TableMeta) -> Result<Self> {
        Ok(TabularVae::new(
            field(arch, "row_width")?,
            field(arch, "hidden")?,
            field(arch, "latent")?,
            &mut skeleton_rng(),
        ))
    }
}

/// A loaded model with its header.
#[derive(Clone, Debug)]
pub struct Loaded<M> {
    pub model: M,
    pub header: CheckpointHeader,
}

fn block_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn to_bytes<M: Persist>(
    model: &M,
    table: &TableMeta,
    metadata: BTreeMap<String, Value>,
) -> Result<Vec<u8>> {
    let params = model.params();
    let payloads: Vec<Vec<u8>> = params.iter().map(|(_, t)| block_bytes(t.data())).collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: M::KIND,
        table: table.clone(),
        schema_digest: table.digest(),
        architecture: model.architecture(),
        metadata,
        blocks: params
            .iter()
            .zip(&payloads)
            .map(|((name, t), bytes)| BlockEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                sha256: hex::encode(Sha256::digest(bytes)),
            })
            .collect(),
    };
    let head = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + head.len() + payloads.iter().map(Vec::len).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for p in payloads {
        out.extend_from_slice(&p);
    }
    Ok(out)
}

pub fn save<M: Persist>(
    model: &M,
    table: &TableMeta,
    metadata: BTreeMap<String, Value>,
    mut out: impl Write,
) -> Result<()> {
    out.write_all(&to_bytes(model, table, metadata)?)?;
    Ok(())
}

pub fn save_path<M: Persist>(
    model: &M,
    table: &TableMeta,
    metadata: BTreeMap<String, Value>,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, to_bytes(model, table, metadata)?)?;
    Ok(())
}

/// Parses only the header.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let mut header: CheckpointHeader = serde_json::from_slice(&bytes[16..end])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    header.table.vocab = header.table.vocab.clone().reindexed()?;
    Ok((header, end))
}

/// Decodes a checkpoint, verifying kind, digests and, when given, the
/// expected schema digest.
pub fn from_bytes<M: Persist>(bytes: &[u8], expected_digest: Option<&str>) -> Result<Loaded<M>> {
    let (header, mut offset) = read_header(bytes)?;
    if header.kind != M::KIND {
        return Err(Error::Checkpoint(format!(
            "expected a {:?} checkpoint, found {:?}",
            M::KIND,
            header.kind
        )));
    }
    let actual = header.table.digest();
    if actual != header.schema_digest {
        return Err(Error::Checkpoint("schema digest does not match the stored schema".into()));
    }
    if let Some(expected) = expected_digest {
        if expected != header.schema_digest {
            return Err(Error::SchemaMismatch {
                expected: expected.to_string(),
                found: header.schema_digest.clone(),
            });
        }
    }
    let mut model = M::skeleton(&header.architecture, &header.table)?;
    {
        let mut params = model.params_mut();
        if params.len() != header.blocks.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameter blocks stored, model has {}",
                header.blocks.len(),
                params.len()
            )));
        }
        for ((name, tensor), entry) in params.iter_mut().zip(&header.blocks) {
            if *name != entry.name || tensor.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "block `{}` {:?} does not fit parameter `{name}` {:?}",
                    entry.name,
                    entry.shape,
                    tensor.shape()
                )));
            }
            let size = tensor.len() * 4;
            let payload = bytes
                .get(offset..offset + size)
                .ok_or_else(|| Error::Checkpoint(format!("block `{name}` truncated")))?;
            if hex::encode(Sha256::digest(payload)) != entry.sha256 {
                return Err(Error::Checkpoint(format!("block `{name}` digest mismatch")));
            }
            for (v, chunk) in tensor.data_mut().iter_mut().zip(payload.chunks_exact(4)) {
                *v = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
            }
            offset += size;
        }
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last block".into()));
    }
    Ok(Loaded { model, header })
}

pub fn load<M: Persist>(mut input: impl Read, expected_digest: Option<&str>) -> Result<Loaded<M>> {
    let mut bytes = vec![];
    input.read_to_end(&mut bytes)?;
    from_bytes(&bytes, expected_digest)
}

pub fn load_path<M: Persist>(path: impl AsRef<Path>, expected_digest: Option<&str>) -> Result<Loaded<M>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes, expected_digest)
}

impl<M: Persist> Loaded<M> {
    /// Re-encodes with the same header metadata.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        to_bytes(&self.model, &self.header.table, self.header.metadata.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DiffusionConfig;
    use crate::synthetic;

    fn table() -> (Dataset, TableMeta) {
        let ds = synthetic::dataset(60, 4, 0).unwrap();
        let meta = TableMeta::of(&ds);
        (ds, meta)
    }

    fn meta() -> BTreeMap<String, Value> {
        BTreeMap::from([("note".to_string(), json!("unit test"))])
    }

    fn round_trip<M: Persist + PartialEq + std::fmt::Debug>(model: M, table: &TableMeta) {
        let first = to_bytes(&model, table, meta()).unwrap();
        let loaded: Loaded<M> = from_bytes(&first, Some(&table.digest())).unwrap();
        assert_eq!(loaded.to_bytes().unwrap(), first);
        let mut rounded = model;
        rounded.round_to_f32();
        assert_eq!(loaded.model, rounded);
    }

    #[test]
    fn every_kind_round_trips() {
        let (ds, table) = table();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DiffusionConfig {
            steps: 10,
            embedding_width: 4,
            ..Default::default()
        };
        let diffusion = DiffusionModel::init(&ds, &cfg, &mut rng).unwrap();
        let w = diffusion.dict.row_width();
        round_trip(diffusion, &table);
        round_trip(ClassifierNet::new(w, 8, 2, &mut rng), &table);
        round_trip(TabularVae::new(w, 8, 3, &mut rng), &table);
        for variant in [ArVariant::Recurrent, ArVariant::CausalTransformer] {
            let m = ArPlausibilityModel::new(variant, &ds.vocab.cardinalities(), 8, 2, 2, &mut rng)
                .unwrap();
            round_trip(m, &table);
        }
    }

    #[test]
    fn schedule_is_recomputed_not_stored() {
        let (ds, table) = table();
        let cfg = DiffusionConfig {
            steps: 10,
            embedding_width: 4,
            ..Default::default()
        };
        let m = DiffusionModel::init(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bytes = to_bytes(&m, &table, BTreeMap::new()).unwrap();
        let (header, _) = read_header(&bytes).unwrap();
        assert!(header.blocks.iter().all(|b| !b.name.contains("beta")));
        let loaded: Loaded<DiffusionModel> = from_bytes(&bytes, None).unwrap();
        assert_eq!(loaded.model.schedule, m.schedule);
    }

    #[test]
    fn mismatched_digest_fails() {
        let (_, table) = table();
        let f = ClassifierNet::new(4, 4, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let bytes = to_bytes(&f, &table, BTreeMap::new()).unwrap();
        let err = from_bytes::<ClassifierNet>(&bytes, Some("00ff")).unwrap_err();
        match err {
            Error::SchemaMismatch { expected, found } => {
                assert_eq!(expected, "00ff");
                assert_eq!(found, table.digest());
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn corruption_is_detected() {
        let (_, table) = table();
        let f = ClassifierNet::new(4, 4, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let mut bytes = to_bytes(&f, &table, BTreeMap::new()).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(from_bytes::<ClassifierNet>(&bytes, None).is_err());
        assert!(from_bytes::<ClassifierNet>(&bytes[..bytes.len() - 3], None).is_err());
        assert!(from_bytes::<ClassifierNet>(b"nope", None).is_err());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let (_, table) = table();
        let f = ClassifierNet::new(4, 4, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let bytes = to_bytes(&f, &table, BTreeMap::new()).unwrap();
        assert!(from_bytes::<TabularVae>(&bytes, None).is_err());
    }
}
