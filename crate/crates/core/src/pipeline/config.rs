use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentor::AugmentConfig;
use crate::bm25::Bm25Params;
use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::lm::{GenerationConfig, LmConfig, PretrainConfig};
use crate::prompt_filter::SelectMode;
use crate::prompt_tuning::TuningConfig;
use crate::retriever::{DrTrainConfig, EncoderConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    /// A BEIR-layout directory.
    Beir { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Distinct training queries, X.
    pub train_queries: usize,
    /// Distinct evaluation queries, Y.
    pub eval_queries: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptFilterConfig {
    pub num_groups: usize,
    pub mode: SelectMode,
    pub seed: u64,
}

/// Retrieval conditions compared in the final report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    /// Labeled pairs only.
    NoAug,
    /// Labeled pairs plus every generated weak pair.
    Unfiltered,
    /// Labeled pairs plus `F_k(W_large)`, k picked on the dev split.
    Filtered,
    /// As `Filtered`, but queries come from the untuned initial prompt.
    HardPrompt,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::NoAug => "no-aug",
            Condition::Unfiltered => "unfiltered",
            Condition::Filtered => "filtered",
            Condition::HardPrompt => "hard-prompt",
        }
    }

    fn uses_weak_data(self) -> bool {
        self != Condition::NoAug
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetSource,
    pub splits: SplitConfig,
    /// Minimum token count kept in the shared vocabulary.
    #[serde(default = "one")]
    pub vocab_min_freq: usize,
    pub lm: LmConfig,
    pub lm_seed: u64,
    pub pretrain: PretrainConfig,
    pub tuning: TuningConfig,
    pub prompt_filter: PromptFilterConfig,
    pub generation: GenerationConfig,
    pub augment: AugmentConfig,
    pub bm25: Bm25Params,
    /// Candidate BM25 depths for the weak-data filter.
    pub filter_depths: Vec<usize>,
    pub encoder: EncoderConfig,
    pub encoder_seed: u64,
    pub dr: DrTrainConfig,
    pub conditions: Vec<Condition>,
    /// Ranked list length written per query.
    pub retrieval_depth: usize,
}

fn one() -> usize {
    1
}

impl PipelineConfig {
    /// Desk-scale defaults over the synthetic benchmark.
    pub fn synthetic() -> Self {
        Self {
            dataset: DatasetSource::Synthetic(SyntheticConfig::default()),
            splits: SplitConfig {
                train_queries: 50,
                eval_queries: 100,
                seed: 1,
            },
            vocab_min_freq: 1,
            lm: LmConfig {
                num_layers: 2,
                d_model: 64,
                num_heads: 4,
                context_length: 256,
                vocab_size: 0,
                tie_embeddings: false,
            },
            lm_seed: 2,
            pretrain: PretrainConfig {
                seed: 3,
                ..PretrainConfig::default()
            },
            tuning: TuningConfig {
                max_epochs: 30,
                seed: 4,
                ..TuningConfig::default()
            },
            prompt_filter: PromptFilterConfig {
                num_groups: 10,
                mode: SelectMode::Best,
                seed: 5,
            },
            generation: GenerationConfig {
                max_new_tokens: 16,
                seed: 6,
                ..GenerationConfig::default()
            },
            augment: AugmentConfig {
                seed: 7,
                ..AugmentConfig::default()
            },
            bm25: Bm25Params::default(),
            filter_depths: vec![10, 30, 50, 70],
            encoder: EncoderConfig {
                num_layers: 1,
                d_model: 64,
                num_heads: 4,
                max_length: 64,
                shared_towers: false,
            },
            encoder_seed: 8,
            dr: DrTrainConfig {
                seed: 9,
                ..DrTrainConfig::default()
            },
            conditions: vec![Condition::NoAug, Condition::Unfiltered, Condition::Filtered],
            retrieval_depth: 1000,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every knob before any stage runs.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.splits.train_queries == 0 || self.splits.eval_queries == 0 {
            return bad("train_queries and eval_queries must be positive".into());
        }
        if self.tuning.examples_per_instance == 0 {
            return bad("examples_per_instance must be at least 1".into());
        }
        if self.tuning.prompt_length >= self.lm.context_length {
            return bad("prompt_length must be shorter than the LM context".into());
        }
        if self.tuning.batch_size == 0 || self.dr.batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.prompt_filter.num_groups == 0 {
            return bad("num_groups must be at least 1".into());
        }
        if self.filter_depths.is_empty() || self.filter_depths.contains(&0) {
            return bad("filter_depths must be non-empty and positive".into());
        }
        if self.conditions.is_empty() {
            return bad("at least one condition is required".into());
        }
        if self.retrieval_depth == 0 {
            return bad("retrieval_depth must be positive".into());
        }
        if self.generation.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive".into());
        }
        self.generation.validate()?;
        self.bm25.validate()?;
        if let DatasetSource::Synthetic(s) = &self.dataset {
            if s.n_docs < 200 {
                return bad("synthetic n_docs must be at least 200".into());
            }
        }
        Ok(())
    }

    pub fn needs_weak_data(&self) -> bool {
        self.conditions.iter().any(|c| c.uses_weak_data())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

pub(crate) fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = PipelineConfig::synthetic();
        cfg.validate().unwrap();
        let back = PipelineConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_fields_and_bad_values_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&PipelineConfig::synthetic().to_json()).unwrap();
        v["surprise"] = 1.into();
        assert!(PipelineConfig::from_json(&v.to_string()).is_err());
        let cfg = PipelineConfig {
            filter_depths: vec![],
            ..PipelineConfig::synthetic()
        };
        assert!(matches!(PipelineConfig::from_json(&cfg.to_json()), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_every_knob() {
        let a = PipelineConfig::synthetic();
        let mut b = a.clone();
        b.dr.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
