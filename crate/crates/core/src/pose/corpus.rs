//! On-disk corpus: `index.json`, `embeddings.a2vk` and one pose file per
//! sample under `poses/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{SynthParams, EMBED_DIM};
use super::{load_pose, save_pose, PoseError, PoseSequence};
use crate::tensor::{load_checkpoint, save_checkpoint, Checkpoint, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSample {
    pub id: String,
    pub tokens: Vec<usize>,
    pub pose: PoseSequence,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub vocab_size: usize,
    pub max_tokens: usize,
    /// Unit-norm pseudo text embedding per token.
    pub embeddings: Vec<Vec<f64>>,
    pub samples: Vec<CorpusSample>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub tokens: Vec<usize>,
    pub file: String,
    pub length: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorpusIndex {
    pub seed: u64,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub embedding_dim: usize,
    pub t_max: usize,
    pub samples: Vec<IndexEntry>,
}

impl SyntheticCorpus {
    pub(crate) fn new(
        params: SynthParams,
        embeddings: Vec<Vec<f64>>,
        samples: Vec<CorpusSample>,
    ) -> Self {
        SyntheticCorpus {
            seed: params.seed,
            vocab_size: params.vocab_size,
            max_tokens: params.max_tokens,
            embeddings,
            samples,
        }
    }

    /// Longest sample, in frames.
    pub fn t_max(&self) -> usize {
        self.samples.iter().map(|s| s.pose.len()).max().unwrap_or(1)
    }

    /// `S x 768` embedding matrix for a token sequence.
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor, PoseError> {
        if tokens.is_empty() {
            return Err(PoseError::InvalidArgs("empty token sequence".into()));
        }
        let mut data = Vec::with_capacity(tokens.len() * EMBED_DIM);
        for &t in tokens {
            let e = self
                .embeddings
                .get(t)
                .ok_or_else(|| PoseError::InvalidArgs(format!("unknown token id {t}")))?;
            data.extend_from_slice(e);
        }
        Ok(Tensor::new(vec![tokens.len(), EMBED_DIM], data).expect("consistent shape"))
    }

    pub fn index(&self) -> CorpusIndex {
        CorpusIndex {
            seed: self.seed,
            vocab_size: self.vocab_size,
            max_tokens: self.max_tokens,
            embedding_dim: EMBED_DIM,
            t_max: self.t_max(),
            samples: self
                .samples
                .iter()
                .map(|s| IndexEntry {
                    id: s.id.clone(),
                    tokens: s.tokens.clone(),
                    file: format!("poses/{}.a2vp", s.id),
                    length: s.pose.len(),
                })
                .collect(),
        }
    }

    pub fn sample(&self, id: &str) -> Option<&CorpusSample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PoseError + '_ {
    move |source| PoseError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_corpus(dir: &Path, corpus: &SyntheticCorpus) -> Result<(), PoseError> {
    let poses = dir.join("poses");
    fs::create_dir_all(&poses).map_err(io_err(&poses))?;
    let index = corpus.index();
    for (entry, sample) in index.samples.iter().zip(&corpus.samples) {
        save_pose(&dir.join(&entry.file), &sample.pose)?;
    }
    let mut json =
        serde_json::to_string_pretty(&index).map_err(|e| PoseError::Index(e.to_string()))?;
    json.push('\n');
    let index_path = dir.join("index.json");
    fs::write(&index_path, json).map_err(io_err(&index_path))?;

    let mut ckpt = Checkpoint::new(serde_json::json!({ "kind": "embeddings" }));
    let flat: Vec<f64> = corpus.embeddings.concat();
    ckpt.push(
        "embeddings",
        Tensor::new(vec![corpus.vocab_size, EMBED_DIM], flat)
            .map_err(|e| PoseError::Index(e.to_string()))?,
    );
    save_checkpoint(&dir.join("embeddings.a2vk"), &ckpt)
        .map_err(|e| PoseError::Index(e.to_string()))
}

pub fn load_corpus(dir: &Path) -> Result<SyntheticCorpus, PoseError> {
    let index_path = dir.join("index.json");
    let text = fs::read_to_string(&index_path).map_err(io_err(&index_path))?;
    let index: CorpusIndex =
        serde_json::from_str(&text).map_err(|e| PoseError::Index(e.to_string()))?;
    let ckpt = load_checkpoint(&dir.join("embeddings.a2vk"))
        .map_err(|e| PoseError::Index(e.to_string()))?;
    let table = ckpt
        .get("embeddings")
        .ok_or_else(|| PoseError::Index("embeddings tensor missing".into()))?;
    if table.shape() != [index.vocab_size, EMBED_DIM] {
        return Err(PoseError::Index(format!(
            "embedding table shape {:?} does not match vocab {}",
            table.shape(),
            index.vocab_size
        )));
    }
    let embeddings = table
        .data()
        .chunks(EMBED_DIM)
        .map(<[f64]>::to_vec)
        .collect();
    let mut samples = Vec::with_capacity(index.samples.len());
    for e in &index.samples {
        let pose = load_pose(&dir.join(&e.file))?;
        if pose.len() != e.length {
            return Err(PoseError::Index(format!(
                "{}: index says {} frames, file has {}",
                e.id,
                e.length,
                pose.len()
            )));
        }
        samples.push(CorpusSample {
            id: e.id.clone(),
            tokens: e.tokens.clone(),
            pose,
        });
    }
    Ok(SyntheticCorpus {
        seed: index.seed,
        vocab_size: index.vocab_size,
        max_tokens: index.max_tokens,
        embeddings,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::generate_synthetic_corpus;

    #[test]
    fn directory_round_trip() {
        let corpus = generate_synthetic_corpus(SynthParams {
            vocab_size: 4,
            n_samples: 3,
            max_tokens: 2,
            seed: 5,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &corpus).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.samples, corpus.samples);
        assert_eq!(back.embeddings, corpus.embeddings);
        assert_eq!(back.index(), corpus.index());
    }

    #[test]
    fn unknown_token_is_rejected() {
        let corpus = generate_synthetic_corpus(SynthParams {
            vocab_size: 3,
            n_samples: 1,
            max_tokens: 1,
            seed: 1,
        })
        .unwrap();
        let err = corpus.embed(&[0, 3]).unwrap_err();
        assert!(err.to_string().contains("unknown token id 3"));
    }
}
