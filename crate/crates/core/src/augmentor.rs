//! Weak query generation for unlabeled documents with the tuned soft prompt
//! and the selected example group.

use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{continue_from, DecodeMode, DecoderLm, DecoderState, GenerationConfig};
use crate::metrics::{read_file, write_file};
use crate::numerics::Scalar;
use crate::prompt_filter::ExampleGroup;
use crate::prompt_tuning::{build_generation_prompt, SoftPrompt};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attempt {
    Greedy,
    SampledRetry,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakMeta {
    pub seed: u64,
    pub attempt: Attempt,
    pub soft_prompt: String,
    pub group: String,
}

/// A generated query attached to an unlabeled document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakPair {
    pub doc_id: String,
    #[serde(skip)]
    pub document: String,
    pub query: String,
    pub meta: WeakMeta,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub soft_prompt: String,
    pub group: String,
    pub generation: Option<GenerationConfig>,
    pub sampled_documents: usize,
    pub failures: usize,
    pub size: usize,
    /// Free-form lineage, e.g. the filter that produced this set.
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Weak pairs with unique doc ids, ordered by doc id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeakDataset {
    pub pairs: Vec<WeakPair>,
    pub provenance: Provenance,
}

impl WeakDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// One `{doc_id, query, meta}` object per line, plus a provenance sidecar
    /// next to `path`.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&serde_json::to_string(p)?);
            out.push('\n');
        }
        write_file(path, out.as_bytes())?;
        write_file(&sidecar(path), serde_json::to_string_pretty(&self.provenance)?.as_bytes())
    }

    /// Reads a file written by [`Self::write_jsonl`]; document texts are
    /// restored through `doc_text`.
    pub fn read_jsonl(path: &Path, doc_text: impl Fn(&str) -> Result<String>) -> Result<Self> {
        let text = read_file(path)?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut p: WeakPair = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            p.document = doc_text(&p.doc_id)?;
            pairs.push(p);
        }
        let provenance = serde_json::from_str(&read_file(&sidecar(path))?)?;
        Ok(Self { pairs, provenance })
    }
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    path.with_file_name(name)
}

pub fn group_id(group: &ExampleGroup) -> String {
    format!("group-{}[{}]", group.index, group.pair_ids().join(","))
}

/// Shares the soft prompt and example blocks across documents by caching
/// their keys and values once.
pub struct WeakQueryGenerator<'a, S: Scalar> {
    lm: &'a DecoderLm<S>,
    sp: &'a SoftPrompt<S>,
    group: &'a ExampleGroup,
    cfg: GenerationConfig,
    head_ids: Vec<usize>,
    head: DecoderState<S>,
    soft_prompt_id: String,
    group_id: String,
}

impl<'a, S: Scalar> WeakQueryGenerator<'a, S> {
    pub fn new(lm: &'a DecoderLm<S>, sp: &'a SoftPrompt<S>, group: &'a ExampleGroup, cfg: &GenerationConfig) -> Result<Self> {
        cfg.validate()?;
        sp.check_lm(lm)?;
        let head_ids = build_generation_prompt(&group.pairs, "", lm.vocab(), usize::MAX, 0)?;
        // drop the empty target block
        let tail = build_generation_prompt(&[], "", lm.vocab(), usize::MAX, 0)?.len();
        let head_ids = head_ids[..head_ids.len() - tail].to_vec();
        let mut head = lm.start_state();
        if sp.len() + head_ids.len() > 0 {
            lm.extend(&mut head, Some(&sp.theta), &head_ids)?;
        }
        Ok(Self {
            lm,
            sp,
            group,
            cfg: cfg.clone(),
            head_ids,
            head,
            soft_prompt_id: sp.fingerprint(),
            group_id: group_id(group),
        })
    }

    fn decode(&self, document: &str, cfg: &GenerationConfig) -> Result<String> {
        let budget = self.lm.config().context_length.saturating_sub(self.sp.len());
        let prompt = build_generation_prompt(&self.group.pairs, document, self.lm.vocab(), budget, cfg.max_new_tokens.min(budget / 2))?;
        let (state, logits) = if prompt.starts_with(&self.head_ids) {
            let mut state = self.head.clone();
            let logits = self.lm.extend(&mut state, None, &prompt[self.head_ids.len()..])?;
            (state, logits)
        } else {
            let mut state = self.lm.start_state();
            let logits = self.lm.extend(&mut state, Some(&self.sp.theta), &prompt)?;
            (state, logits)
        };
        let ids = continue_from(self.lm, state, logits, cfg)?;
        let text = self.lm.vocab().decode(&ids);
        Ok(text.split('\n').next().unwrap_or_default().trim().to_string())
    }

    /// The weak query for one document, or `None` when both the configured
    /// decode and one seeded sampling retry come back empty.
    pub fn generate(&self, doc_id: &str, document: &str) -> Result<Option<WeakPair>> {
        let mut attempt = Attempt::Greedy;
        let mut seed = self.cfg.seed;
        let mut query = self.decode(document, &self.cfg)?;
        if query.is_empty() {
            seed = seed::derive(self.cfg.seed, doc_id, 1);
            let retry = GenerationConfig {
                mode: DecodeMode::Sample,
                seed,
                ..self.cfg.clone()
            };
            attempt = Attempt::SampledRetry;
            query = self.decode(document, &retry)?;
        }
        if query.is_empty() {
            log::debug!("generation failed for {doc_id}");
            return Ok(None);
        }
        Ok(Some(WeakPair {
            doc_id: doc_id.to_string(),
            document: document.to_string(),
            query,
            meta: WeakMeta {
                seed,
                attempt,
                soft_prompt: self.soft_prompt_id.clone(),
                group: self.group_id.clone(),
            },
        }))
    }
}

/// One-off form of [`WeakQueryGenerator::generate`].
pub fn generate_weak_query<S: Scalar>(
    doc_id: &str,
    document: &str,
    sp: &SoftPrompt<S>,
    group: &ExampleGroup,
    cfg: &GenerationConfig,
    lm: &DecoderLm<S>,
) -> Result<Option<WeakPair>> {
    WeakQueryGenerator::new(lm, sp, group, cfg)?.generate(doc_id, document)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub large_cap: usize,
    pub small_size: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            large_cap: 100_000,
            small_size: 5000,
            seed: 0,
        }
    }
}

/// Generates `W_large` over a uniform sample of at most `large_cap`
/// unlabeled documents, and draws `W_small` uniformly from it.
///
/// `pool` holds `(doc_id, text)` pairs; outputs are ordered by doc id.
pub fn build_weak_dataset<S: Scalar>(
    pool: &[(String, String)],
    sp: &SoftPrompt<S>,
    group: &ExampleGroup,
    gen: &GenerationConfig,
    lm: &DecoderLm<S>,
    cfg: &AugmentConfig,
) -> Result<(WeakDataset, WeakDataset)> {
    if pool.is_empty() {
        return Err(Error::Config("unlabeled pool is empty".into()));
    }
    let take = cfg.large_cap.min(pool.len());
    let mut chosen: Vec<&(String, String)> = if take == pool.len() {
        pool.iter().collect()
    } else {
        index::sample(&mut seed::rng(cfg.seed, "weak-large", 0), pool.len(), take)
            .into_iter()
            .map(|i| &pool[i])
            .collect()
    };
    chosen.sort_by(|a, b| a.0.cmp(&b.0));
    let generator = WeakQueryGenerator::new(lm, sp, group, gen)?;
    let results: Vec<Option<WeakPair>> = chosen
        .par_iter()
        .map(|(id, text)| generator.generate(id, text))
        .collect::<Result<_>>()?;
    let pairs: Vec<WeakPair> = results.into_iter().flatten().collect();
    let failures = take - pairs.len();
    if pairs.is_empty() {
        return Err(Error::Contract(format!("all {take} weak query generations failed")));
    }
    if failures > 0 {
        log::warn!("{failures} of {take} generations produced no query");
    }
    let provenance = Provenance {
        soft_prompt: generator.soft_prompt_id.clone(),
        group: generator.group_id.clone(),
        generation: Some(gen.clone()),
        sampled_documents: take,
        failures,
        size: pairs.len(),
        notes: vec!["W_large".into()],
    };
    let n_small = cfg.small_size.min(pairs.len());
    let mut small_idx = index::sample(&mut seed::rng(cfg.seed, "weak-small", 0), pairs.len(), n_small).into_vec();
    small_idx.sort_unstable();
    let small = WeakDataset {
        pairs: small_idx.iter().map(|&i| pairs[i].clone()).collect(),
        provenance: Provenance {
            size: n_small,
            notes: vec![format!("W_small: uniform {n_small} of W_large")],
            ..provenance.clone()
        },
    };
    Ok((WeakDataset { pairs, provenance }, small))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{LmConfig, EOS};
    use crate::prompt_filter::sample_groups;
    use crate::prompt_tuning::{init_soft_prompt, DEFAULT_HARD_PROMPT};
    use crate::testutil::{sample, tiny_lm};

    fn setup() -> (DecoderLm<f32>, ExampleGroup) {
        let mut lm = tiny_lm::<f32>(1, 8, 200);
        lm.freeze();
        let group = sample_groups(&sample(0..5), 2, 1, 0).unwrap().remove(0);
        (lm, group)
    }

    fn pool(n: usize) -> Vec<(String, String)> {
        (0..n).map(|i| (format!("u{i:03}"), crate::testutil::pair(i).document)).collect()
    }

    fn force_token(lm: &mut DecoderLm<f32>, id: usize) {
        for p in lm.params_mut().iter_mut() {
            if p.name == "lm_head.w" {
                p.tensor = p.tensor.map(|_| 0.0);
            }
            if p.name == "lm_head.b" {
                p.tensor = p.tensor.map(|_| 0.0);
                p.tensor.data_mut()[id] = 50.0;
            }
        }
    }

    #[test]
    fn eos_only_model_fails_after_retry() {
        let (mut lm, group) = setup();
        force_token(&mut lm, EOS);
        let sp = init_soft_prompt(DEFAULT_HARD_PROMPT, 4, &lm).unwrap();
        let cfg = GenerationConfig::default();
        assert_eq!(generate_weak_query("u1", "red fish", &sp, &group, &cfg, &lm).unwrap(), None);
        let err = build_weak_dataset(&pool(3), &sp, &group, &cfg, &lm, &AugmentConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn greedy_is_repeatable_and_one_line() {
        let (lm, group) = setup();
        let sp = init_soft_prompt(DEFAULT_HARD_PROMPT, 4, &lm).unwrap();
        let cfg = GenerationConfig {
            max_new_tokens: 8,
            ..Default::default()
        };
        let a = generate_weak_query("u1", "red fish tree", &sp, &group, &cfg, &lm).unwrap();
        let b = generate_weak_query("u1", "red fish tree", &sp, &group, &cfg, &lm).unwrap();
        assert_eq!(a, b);
        if let Some(p) = a {
            assert!(!p.query.contains('\n') && !p.query.is_empty());
        }
    }

    #[test]
    fn newline_ends_the_query() {
        let (mut lm, group) = setup();
        let nl = lm.vocab().id("\n").unwrap();
        force_token(&mut lm, nl);
        let sp = init_soft_prompt(DEFAULT_HARD_PROMPT, 4, &lm).unwrap();
        let cfg = GenerationConfig::default();
        // greedy emits only a newline; the sampled retry at weight 50 does too
        assert_eq!(generate_weak_query("u1", "red", &sp, &group, &cfg, &lm).unwrap(), None);
    }

    #[test]
    fn cached_head_matches_uncached_generation() {
        let (lm, group) = setup();
        let sp = init_soft_prompt(DEFAULT_HARD_PROMPT, 4, &lm).unwrap();
        let cfg = GenerationConfig {
            max_new_tokens: 6,
            stop_ids: vec![],
            ..Default::default()
        };
        let gen = WeakQueryGenerator::new(&lm, &sp, &group, &cfg).unwrap();
        let doc = "blue stone near river";
        let prompt = build_generation_prompt(&group.pairs, doc, lm.vocab(), 196, 6).unwrap();
        let direct = crate::lm::generate(&lm, Some(&sp.theta), &prompt, &cfg).unwrap();
        let direct = lm.vocab().decode(&direct).split('\n').next().unwrap().trim().to_string();
        assert_eq!(gen.decode(doc, &cfg).unwrap(), direct);
    }

    #[test]
    fn sizes_and_subset_relations() {
        let (mut lm, group) = setup();
        let red = lm.vocab().id("red").unwrap();
        force_token(&mut lm, red);
        let sp = init_soft_prompt(DEFAULT_HARD_PROMPT, 4, &lm).unwrap();
        let cfg = GenerationConfig {
            max_new_tokens: 3,
            ..Default::default()
        };
        let aug = AugmentConfig {
            large_cap: 100_000,
            small_size: 4,
            seed: 1,
        };
        let (large, small) = build_weak_dataset(&pool(10), &sp, &group, &cfg, &lm, &aug).unwrap();
        assert_eq!(large.len(), 10);
        assert_eq!(small.len(), 4);
        assert!(small.pairs.iter().all(|p| large.pairs.contains(p)));
        assert!(large.pairs.windows(2).all(|w| w[0].doc_id < w[1].doc_id));
        assert_eq!(large.pairs[0].query, "red red red");
        assert_eq!(large.provenance.failures, 0);
        assert_eq!(large.provenance.sampled_documents - large.len(), large.provenance.failures);

        let capped = AugmentConfig { large_cap: 6, ..aug.clone() };
        let (l6, s6) = build_weak_dataset(&pool(10), &sp, &group, &cfg, &lm, &capped).unwrap();
        assert_eq!((l6.len(), s6.len()), (6, 4));
        let big = AugmentConfig { small_size: 5000, ..aug };
        let (_, s_all) = build_weak_dataset(&pool(10), &sp, &group, &cfg, &lm, &big).unwrap();
        assert_eq!(s_all.len(), 10);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weak.jsonl");
        large.write_jsonl(&path).unwrap();
        let texts: std::collections::HashMap<String, String> = pool(10).into_iter().collect();
        let back = WeakDataset::read_jsonl(&path, |d| Ok(texts[d].clone())).unwrap();
        assert_eq!(back, large);
    }

    #[test]
    fn stale_prompt_rejected() {
        let (lm, group) = setup();
        let sp = init_soft_prompt(DEFAULT_HARD_PROMPT, 4, &lm).unwrap();
        let other = DecoderLm::<f32>::new(LmConfig { num_layers: 1, d_model: 8, num_heads: 2, context_length: 200, ..Default::default() }, lm.vocab().clone(), 99).unwrap();
        assert!(matches!(
            generate_weak_query("u", "red", &sp, &group, &GenerationConfig::default(), &other),
            Err(Error::Stale(_))
        ));
    }
}
