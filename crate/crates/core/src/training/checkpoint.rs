//! Checkpoint directory: `manifest.json`, `weights.bin` (little-endian f64
//! in registry order) and `vocab.txt`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{Detector, DetectorWeights, ModelConfig};
use crate::nn::ParamTree;
use crate::tokenizer::Vocab;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.bin";
const VOCAB: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub step: usize,
    pub metrics: Option<MetricsReport>,
    pub tensors: Vec<TensorEntry>,
    /// Total f64 elements in the weight blob.
    pub blob_len: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub step: usize,
    pub metrics: Option<MetricsReport>,
    pub weights: DetectorWeights,
    pub vocab: Vocab,
}

impl Checkpoint {
    pub fn into_detector(self) -> Result<Detector> {
        Detector::new(self.config, self.weights, self.vocab)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut offset = 0;
    let mut blob = BufWriter::new(File::create(dir.join(WEIGHTS))?);
    for (name, t) in ckpt.weights.named_leaves() {
        for v in t.data() {
            blob.write_all(&v.to_le_bytes())?;
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    blob.flush()?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: ckpt.config.clone(),
        train_config: ckpt.train_config.clone(),
        step: ckpt.step,
        metrics: ckpt.metrics.clone(),
        tensors,
        blob_len: offset,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    ckpt.vocab.write_to(BufWriter::new(File::create(dir.join(VOCAB))?))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = {
        let raw: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST))?))?;
        let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found,
                expected: FORMAT_VERSION,
            });
        }
        serde_json::from_value(raw)?
    };
    let bytes = fs::read(dir.join(WEIGHTS))?;
    if bytes.len() != manifest.blob_len * 8 {
        return Err(Error::Integrity(format!(
            "weight blob has {} bytes, manifest expects {}",
            bytes.len(),
            manifest.blob_len * 8
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();

    let mut weights = DetectorWeights::init(&manifest.config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = weights
        .named_leaves()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let listed: Vec<(String, Vec<usize>)> = manifest.tensors.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
    if expected != listed {
        return Err(Error::Integrity("tensor registry does not match the model config".into()));
    }
    let mut entries = manifest.tensors.iter();
    let mut bad = None;
    weights.visit_mut(&mut |t| {
        let e = entries.next().expect("registry length checked");
        if e.len != t.len() || e.offset + e.len > values.len() {
            bad = Some(e.name.clone());
            return;
        }
        t.data_mut().copy_from_slice(&values[e.offset..e.offset + e.len]);
    });
    if let Some(name) = bad {
        return Err(Error::Integrity(format!("tensor {name} has an inconsistent registry entry")));
    }
    if weights.leaves().iter().any(|t| !t.is_finite()) {
        return Err(Error::Integrity("non-finite weights".into()));
    }
    let vocab = Vocab::read_from(BufReader::new(File::open(dir.join(VOCAB))?))?;
    Ok(Checkpoint {
        config: manifest.config,
        train_config: manifest.train_config,
        step: manifest.step,
        metrics: manifest.metrics,
        weights,
        vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::AggregatorConfig;
    use crate::chunker::ChunkPlan;
    use crate::encoder::EncoderConfig;

    fn ckpt() -> Checkpoint {
        let vocab = Vocab::build(&["the army is weak ."], 30).unwrap();
        let config = ModelConfig {
            encoder: EncoderConfig {
                layers: 1,
                heads: 2,
                dim: 4,
                ffn_dim: 8,
                max_positions: 8,
                vocab_size: vocab.len(),
                dropout: 0.1,
            },
            plan: ChunkPlan::new(8, 2, 1).unwrap(),
            aggregator: AggregatorConfig {
                heads: 2,
                ffn: true,
                ffn_dim: 8,
                ..Default::default()
            },
        };
        Checkpoint {
            weights: DetectorWeights::init(&config, 4).unwrap(),
            config,
            train_config: None,
            step: 12,
            metrics: None,
            vocab,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let c = ckpt();
        save_checkpoint(&c, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded.weights, c.weights);
        assert_eq!(loaded.step, 12);
        save_checkpoint(&loaded, &b).unwrap();
        for f in [MANIFEST, WEIGHTS, VOCAB] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn truncated_blob_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ckpt(), dir.path()).unwrap();
        let path = dir.path().join(WEIGHTS);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_bump_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ckpt(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
    }
}
