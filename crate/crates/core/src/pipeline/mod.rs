//! Stage orchestration: every stage's outputs live in a content-addressed
//! cache directory, so reruns and sweeps reuse whatever is unchanged.

mod config;
mod report;
mod stage;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{Condition, DatasetSource, PipelineConfig, PromptFilterConfig, SplitConfig};
pub use report::{ConditionRow, DepthRow, PipelineReport, TuningSummary, WeakSummary};
pub use stage::{Stage, StageManifest};

use config::hash_json;
use stage::StageDir;

use crate::augmentor::{build_weak_dataset, group_id, WeakDataset};
use crate::bm25::{filter_weak, FilterStats, InvertedIndex};
use crate::data::{load_beir, make_synthetic, sample_splits, save_beir, DatasetBundle, SplitSample};
use crate::error::{Error, Result};
use crate::lm::{pretrain, DecoderLm, Vocabulary};
use crate::metrics::{ndcg_at_k, read_file, write_file, MetricsReport, Qrels, Run};
use crate::prompt_filter::{sample_groups, score_groups, ExampleGroup, FilterReport};
use crate::prompt_tuning::{export_prompt_embeddings, init_soft_prompt, tune, SoftPrompt, TuningReport, TEMPLATE_VERSION};
use crate::retriever::{retrieve_all, train_dr, BiEncoder, CorpusEmbeddings, DrReport, EvalProbe};

/// Environment variable naming the shared cache directory.
pub const CACHE_ENV: &str = "PROMPTAUG_CACHE";

type Model = f32;
type Pairs = Vec<(String, String)>;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_file(path)?)?)
}

/// Token inventory shared by the LM and the retrieval towers: corpus text,
/// train-split queries, and the prompt template.
pub fn build_vocabulary(bundle: &DatasetBundle, cfg: &PipelineConfig) -> Result<Vocabulary> {
    let template = format!("Document: Query: \n {}", cfg.tuning.hard_prompt);
    let docs: Vec<String> = bundle.corpus.values().map(|d| d.full_text()).collect();
    let queries = bundle.train.queries().filter_map(|q| bundle.queries.get(q));
    Vocabulary::build(
        docs.iter()
            .map(String::as_str)
            .chain(queries.map(String::as_str))
            .chain(std::iter::once(template.as_str())),
        cfg.vocab_min_freq,
    )
}

/// The language-model pretraining text of one document.
pub fn pretraining_text(document: &str) -> String {
    format!("Document: {document}\n")
}

struct Keys {
    corpus: String,
    prepare: String,
    pretrain: String,
    tune: String,
    filter: String,
    generate: String,
    filter_weak: String,
    train_dr: String,
    eval: String,
}

impl Keys {
    fn new(c: &PipelineConfig) -> Self {
        let corpus = hash_json(&("corpus", &c.dataset, c.vocab_min_freq, &c.tuning.hard_prompt));
        let prepare = hash_json(&("prepare", &corpus, &c.splits));
        let pretrain = hash_json(&("pretrain", &corpus, &c.lm, c.lm_seed, &c.pretrain));
        let tune = hash_json(&("tune", &prepare, &pretrain, &c.tuning, TEMPLATE_VERSION));
        let filter = hash_json(&("filter", &tune, &c.prompt_filter));
        let hard = c.conditions.contains(&Condition::HardPrompt);
        let generate = hash_json(&("generate", &filter, &c.generation, &c.augment, hard));
        let filter_weak = hash_json(&("filter-weak", &generate, &c.bm25, &c.filter_depths));
        let train_dr = hash_json(&(
            "train-dr",
            &filter_weak,
            &prepare,
            &c.encoder,
            c.encoder_seed,
            &c.dr,
            &c.conditions,
        ));
        let eval = hash_json(&("eval", &train_dr, c.retrieval_depth));
        Self {
            corpus,
            prepare,
            pretrain,
            tune,
            filter,
            generate,
            filter_weak,
            train_dr,
            eval,
        }
    }

    fn of(&self, stage: Stage) -> &str {
        match stage {
            Stage::Prepare => &self.prepare,
            Stage::PretrainLm => &self.pretrain,
            Stage::TunePrompt => &self.tune,
            Stage::FilterPrompt => &self.filter,
            Stage::Generate => &self.generate,
            Stage::FilterWeak => &self.filter_weak,
            Stage::TrainDr => &self.train_dr,
            Stage::Eval => &self.eval,
        }
    }
}

/// Output of the prepare stage.
struct Prepared {
    bundle: DatasetBundle,
    vocab: Vocabulary,
    s_train: SplitSample,
    s_eval: SplitSample,
}

impl Prepared {
    fn corpus(&self) -> Vec<(String, String)> {
        self.bundle.corpus.iter().map(|(id, d)| (id.clone(), d.full_text())).collect()
    }

    fn queries(&self, qrels: &Qrels) -> Vec<(String, String)> {
        qrels
            .queries()
            .filter_map(|q| self.bundle.queries.get(q).map(|t| (q.to_string(), t.clone())))
            .collect()
    }

    fn labeled_pairs(&self) -> Vec<(String, String)> {
        self.s_train
            .pairs
            .iter()
            .chain(&self.s_eval.pairs)
            .map(|p| (p.query.clone(), p.document.clone()))
            .collect()
    }
}

/// One trained retriever and the data it saw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelEntry {
    variant: String,
    model_key: String,
    training_pairs: usize,
}

/// Runs stages against a cache and writes final outputs to `out_dir`.
pub struct Pipeline {
    config: PipelineConfig,
    config_hash: String,
    cache: PathBuf,
    out_dir: PathBuf,
    keys: Keys,
}

impl Pipeline {
    /// `cache` defaults to `$PROMPTAUG_CACHE`, then `<out_dir>/cache`.
    pub fn new(config: PipelineConfig, out_dir: &Path, cache: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let cache = cache
            .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
            .unwrap_or_else(|| out_dir.join("cache"));
        Ok(Self {
            config_hash: config.hash(),
            keys: Keys::new(&config),
            config,
            cache,
            out_dir: out_dir.to_path_buf(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn cache_dir(&self) -> &Path {
        &self.cache
    }

    /// Cache directory of a stage under the current config.
    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        StageDir::new(&self.cache, stage, self.keys.of(stage).to_string()).path
    }

    /// Runs every stage up to `until`, recomputing `from` and everything
    /// after it even when cached. Returns the report when `until` is eval.
    pub fn run(&self, from: Option<Stage>, until: Stage) -> Result<Option<PipelineReport>> {
        write_file(&self.out_dir.join("config.json"), self.config.to_json().as_bytes())?;
        let forced = |s: Stage| from.is_some_and(|f| s >= f);
        let weak = self.config.needs_weak_data();
        for stage in Stage::ALL.into_iter().filter(|&s| s <= until) {
            if !weak && matches!(stage, Stage::PretrainLm | Stage::TunePrompt | Stage::FilterPrompt | Stage::Generate | Stage::FilterWeak) {
                log::info!("{stage}: skipped, no condition uses weak data");
                continue;
            }
            self.ensure(stage, forced(stage))?;
        }
        if until < Stage::Eval {
            return Ok(None);
        }
        let dir = self.dir(Stage::Eval);
        let report: PipelineReport = read_json(&dir.file("report.json"))?;
        self.publish(&dir)?;
        Ok(Some(report))
    }

    fn dir(&self, stage: Stage) -> StageDir {
        StageDir::new(&self.cache, stage, self.keys.of(stage).to_string())
    }

    fn ensure(&self, stage: Stage, force: bool) -> Result<()> {
        let dir = self.dir(stage);
        if !force && dir.finished().is_some() {
            log::info!("{stage}: cached at {}", dir.path.display());
            return Ok(());
        }
        log::info!("{stage}: running");
        let wrap = |cause: Error| Error::Stage {
            stage: stage.name().to_string(),
            cause: Box::new(cause),
        };
        dir.reset().map_err(wrap)?;
        let result = match stage {
            Stage::Prepare => self.prepare(&dir),
            Stage::PretrainLm => self.pretrain_lm(&dir),
            Stage::TunePrompt => self.tune_prompt(&dir),
            Stage::FilterPrompt => self.filter_prompt(&dir),
            Stage::Generate => self.generate(&dir),
            Stage::FilterWeak => self.filter_weak(&dir),
            Stage::TrainDr => self.train_dr(&dir, force),
            Stage::Eval => self.eval(&dir),
        };
        result.and_then(|()| dir.seal(&self.config_hash).map(|_| ())).map_err(wrap)
    }

    fn publish(&self, eval: &StageDir) -> Result<()> {
        let copy = |name: &str| -> Result<()> {
            let bytes = std::fs::read(eval.file(name)).map_err(|e| Error::io(format!("reading {name}"), e))?;
            write_file(&self.out_dir.join(name), &bytes)
        };
        copy("report.json")?;
        copy("report.txt")?;
        let runs = eval.file("runs");
        let entries = std::fs::read_dir(&runs).map_err(|e| Error::io(format!("listing {}", runs.display()), e))?;
        for entry in entries {
            let name = entry.map_err(|e| Error::io("listing runs", e))?.file_name();
            copy(&format!("runs/{}", name.to_string_lossy()))?;
        }
        Ok(())
    }

    // ---- prepare

    fn load_bundle(&self) -> Result<DatasetBundle> {
        match &self.config.dataset {
            DatasetSource::Synthetic(s) => make_synthetic(s),
            DatasetSource::Beir { path } => load_beir(path),
        }
    }

    fn prepare(&self, dir: &StageDir) -> Result<()> {
        let bundle = self.load_bundle()?;
        bundle.check_unlabeled()?;
        let s = &self.config.splits;
        let (s_train, s_eval) = sample_splits(&bundle, s.train_queries, s.eval_queries, s.seed)?;
        let vocab = build_vocabulary(&bundle, &self.config)?;
        save_beir(&bundle, &dir.file("bundle"))?;
        write_json(&dir.file("vocab.json"), &vocab)?;
        write_json(&dir.file("s_train.json"), &s_train)?;
        write_json(&dir.file("s_eval.json"), &s_eval)?;
        write_json(&dir.file("stats.json"), &bundle.stats())?;
        write_json(&dir.file("notes.json"), &bundle.notes)?;
        Ok(())
    }

    fn prepared(&self) -> Result<Prepared> {
        let dir = self.dir(Stage::Prepare);
        let bundle = load_beir(&dir.file("bundle"))?;
        bundle.check_unlabeled()?;
        Ok(Prepared {
            bundle,
            vocab: read_json(&dir.file("vocab.json"))?,
            s_train: read_json(&dir.file("s_train.json"))?,
            s_eval: read_json(&dir.file("s_eval.json"))?,
        })
    }

    // ---- language model and prompts

    fn pretrain_lm(&self, dir: &StageDir) -> Result<()> {
        let bundle = self.load_bundle()?;
        let vocab = build_vocabulary(&bundle, &self.config)?;
        let docs: Vec<Vec<usize>> = bundle
            .corpus
            .values()
            .map(|d| vocab.encode(&pretraining_text(&d.full_text())))
            .collect();
        let mut lm = DecoderLm::<Model>::new(self.config.lm, vocab, self.config.lm_seed)?;
        let report = pretrain(&mut lm, &docs, &self.config.pretrain)?;
        lm.freeze();
        lm.save(&dir.file("lm.ckpt"))?;
        write_json(&dir.file("report.json"), &report)
    }

    fn lm(&self) -> Result<DecoderLm<Model>> {
        let mut lm = DecoderLm::load(&self.dir(Stage::PretrainLm).file("lm.ckpt"))?;
        lm.freeze();
        Ok(lm)
    }

    fn tune_prompt(&self, dir: &StageDir) -> Result<()> {
        let p = self.prepared()?;
        let lm = self.lm()?;
        let (sp, report) = tune(&lm, &p.s_train, &p.s_eval, &self.config.tuning)?;
        sp.save(&dir.file("soft_prompt.ckpt"))?;
        export_prompt_embeddings(&sp, &dir.file("prompt_embeddings.csv"))?;
        write_json(&dir.file("report.json"), &report)
    }

    fn soft_prompt(&self) -> Result<SoftPrompt<Model>> {
        SoftPrompt::load(&self.dir(Stage::TunePrompt).file("soft_prompt.ckpt"))
    }

    fn filter_prompt(&self, dir: &StageDir) -> Result<()> {
        let p = self.prepared()?;
        let lm = self.lm()?;
        let sp = self.soft_prompt()?;
        let f = &self.config.prompt_filter;
        let groups = sample_groups(&p.s_train, self.config.tuning.examples_per_instance, f.num_groups, f.seed)?;
        let scores = score_groups(&groups, &p.s_eval, &sp, &lm)?;
        let report = FilterReport::new(&groups, &scores, f.mode, sp.fingerprint())?;
        let chosen = groups
            .iter()
            .find(|g| g.index == report.chosen)
            .ok_or_else(|| Error::Contract("chosen group missing".into()))?;
        write_json(&dir.file("report.json"), &report)?;
        write_json(&dir.file("group.json"), chosen)
    }

    // ---- weak data

    fn generate(&self, dir: &StageDir) -> Result<()> {
        let p = self.prepared()?;
        let lm = self.lm()?;
        let sp = self.soft_prompt()?;
        let group: ExampleGroup = read_json(&self.dir(Stage::FilterPrompt).file("group.json"))?;
        let pool: Vec<(String, String)> = p
            .bundle
            .unlabeled
            .iter()
            .map(|id| Ok((id.clone(), p.bundle.doc_text(id)?)))
            .collect::<Result<_>>()?;
        let mut prompts = vec![("", sp)];
        if self.config.conditions.contains(&Condition::HardPrompt) {
            let hard = init_soft_prompt(&self.config.tuning.hard_prompt, self.config.tuning.prompt_length, &lm)?;
            prompts.push(("hard_", hard));
        }
        for (prefix, sp) in &prompts {
            let (mut large, mut small) = build_weak_dataset(&pool, sp, &group, &self.config.generation, &lm, &self.config.augment)?;
            for w in [&mut large, &mut small] {
                w.provenance.notes.push(format!("config {}", self.config_hash));
            }
            large.write_jsonl(&dir.file(&format!("{prefix}w_large.jsonl")))?;
            small.write_jsonl(&dir.file(&format!("{prefix}w_small.jsonl")))?;
        }
        Ok(())
    }

    fn weak(&self, stage: Stage, name: &str, p: &Prepared) -> Result<WeakDataset> {
        WeakDataset::read_jsonl(&self.dir(stage).file(name), |id| p.bundle.doc_text(id))
    }

    fn filter_weak(&self, dir: &StageDir) -> Result<()> {
        let p = self.prepared()?;
        let corpus = p.corpus();
        let index = InvertedIndex::build(corpus.iter().map(|(a, b)| (a.as_str(), b.as_str())), self.config.bm25)?;
        index.save(&dir.file("bm25.json"))?;
        let mut stats: BTreeMap<String, Vec<FilterStats>> = BTreeMap::new();
        for prefix in self.weak_prefixes() {
            let large = self.weak(Stage::Generate, &format!("{prefix}w_large.jsonl"), &p)?;
            for &k in &self.config.filter_depths {
                let (kept, s) = filter_weak(&large, &index, k)?;
                kept.write_jsonl(&dir.file(&format!("{prefix}f_{k}.jsonl")))?;
                stats.entry(format!("{prefix}w_large")).or_default().push(s);
            }
        }
        write_json(&dir.file("stats.json"), &stats)
    }

    fn weak_prefixes(&self) -> Vec<&'static str> {
        let mut out = vec![""];
        if self.config.conditions.contains(&Condition::HardPrompt) {
            out.push("hard_");
        }
        out
    }

    // ---- dense retrieval

    /// Training sets for every variant the conditions need, as
    /// `(variant, weak pairs)`; labeled pairs are added by the caller.
    fn variants(&self, p: &Prepared) -> Result<Vec<(String, Pairs)>> {
        let pairs = |w: WeakDataset| w.pairs.into_iter().map(|x| (x.query, x.document)).collect::<Vec<_>>();
        let mut out = Vec::new();
        for c in &self.config.conditions {
            match c {
                Condition::NoAug => out.push(("no-aug".to_string(), Vec::new())),
                Condition::Unfiltered => out.push(("unfiltered".to_string(), pairs(self.weak(Stage::Generate, "w_large.jsonl", p)?))),
                Condition::Filtered | Condition::HardPrompt => {
                    let prefix = if *c == Condition::HardPrompt { "hard_" } else { "" };
                    for &k in &self.config.filter_depths {
                        let w = self.weak(Stage::FilterWeak, &format!("{prefix}f_{k}.jsonl"), p)?;
                        out.push((format!("{}-k{k}", c.name()), pairs(w)));
                    }
                }
            }
        }
        Ok(out)
    }

    fn model_dir(&self, key: &str) -> StageDir {
        StageDir::new(&self.cache.join("models"), Stage::TrainDr, key.to_string())
    }

    fn train_dr(&self, dir: &StageDir, force: bool) -> Result<()> {
        let p = self.prepared()?;
        let corpus = p.corpus();
        let dev = p.queries(&p.bundle.dev);
        let probe = (!dev.is_empty()).then_some(EvalProbe {
            queries: &dev,
            corpus: &corpus,
            qrels: &p.bundle.dev,
        });
        let labeled = p.labeled_pairs();
        let mut entries = Vec::new();
        for (variant, weak) in self.variants(&p)? {
            let mut pairs = labeled.clone();
            pairs.extend(weak);
            let model_key = hash_json(&(
                &self.keys.corpus,
                &self.config.encoder,
                self.config.encoder_seed,
                &self.config.dr,
                &pairs,
            ));
            let mdir = self.model_dir(&model_key);
            if force || mdir.finished().is_none() {
                log::info!("train-dr: {variant} on {} pairs", pairs.len());
                mdir.reset()?;
                let enc = BiEncoder::<Model>::new(self.config.encoder, p.vocab.clone(), self.config.encoder_seed)?;
                let (enc, report): (_, DrReport) = train_dr(enc, &pairs, probe, &self.config.dr)?;
                enc.save(&mdir.file("encoder.ckpt"))?;
                write_json(&mdir.file("report.json"), &report)?;
                mdir.seal(&self.config_hash)?;
            } else {
                log::info!("train-dr: {variant} reuses model {}", &model_key[..16]);
            }
            entries.push(ModelEntry {
                variant,
                model_key,
                training_pairs: pairs.len(),
            });
        }
        write_json(&dir.file("models.json"), &entries)
    }

    // ---- evaluation

    fn eval(&self, dir: &StageDir) -> Result<()> {
        let p = self.prepared()?;
        let corpus = p.corpus();
        let dev = p.queries(&p.bundle.dev);
        let test = p.queries(&p.bundle.test);
        if test.is_empty() {
            return Err(Error::Dataset("no test queries".into()));
        }
        let depth = self.config.retrieval_depth;
        let entries: Vec<ModelEntry> = read_json(&self.dir(Stage::TrainDr).file("models.json"))?;

        let index = InvertedIndex::build(corpus.iter().map(|(a, b)| (a.as_str(), b.as_str())), self.config.bm25)?;
        let bm25_run = index.search_all(&test, depth)?;
        bm25_run.write_trec(&dir.file("runs/bm25.trec"), "bm25")?;

        let mut scored: BTreeMap<String, (f64, MetricsReport, Run, usize)> = BTreeMap::new();
        for e in &entries {
            let enc = BiEncoder::<Model>::load(&self.model_dir(&e.model_key).file("encoder.ckpt"))?;
            let emb = CorpusEmbeddings::build(&enc, &corpus)?;
            let dev_ndcg = if dev.is_empty() {
                0.0
            } else {
                ndcg_at_k(&retrieve_all(&enc, &emb, &dev, depth)?, &p.bundle.dev, 10)?.mean
            };
            let run = retrieve_all(&enc, &emb, &test, depth)?;
            let metrics = MetricsReport::compute(&run, &p.bundle.test)?;
            scored.insert(e.variant.clone(), (dev_ndcg, metrics, run, e.training_pairs));
        }

        let filter_stats: BTreeMap<String, Vec<FilterStats>> = if self.config.needs_weak_data() {
            read_json(&self.dir(Stage::FilterWeak).file("stats.json"))?
        } else {
            BTreeMap::new()
        };
        let depth_rows = |c: Condition, stats_key: &str| -> Vec<DepthRow> {
            let kept: BTreeMap<usize, usize> = filter_stats
                .get(stats_key)
                .map(|v| v.iter().map(|s| (s.k, s.kept)).collect())
                .unwrap_or_default();
            self.config
                .filter_depths
                .iter()
                .filter_map(|&k| {
                    let (dev_ndcg10, test, _, _) = scored.get(&format!("{}-k{k}", c.name()))?;
                    Some(DepthRow {
                        k,
                        kept: kept.get(&k).copied().unwrap_or(0),
                        dev_ndcg10: *dev_ndcg10,
                        test: test.clone(),
                    })
                })
                .collect()
        };
        let depths = depth_rows(Condition::Filtered, "w_large");
        let hard_prompt_depths = depth_rows(Condition::HardPrompt, "hard_w_large");

        let mut rows = Vec::new();
        for &c in &self.config.conditions {
            let (variant, k) = match c {
                Condition::NoAug | Condition::Unfiltered => (c.name().to_string(), None),
                Condition::Filtered | Condition::HardPrompt => {
                    let k = self.select_depth(c, &scored)?;
                    (format!("{}-k{k}", c.name()), Some(k))
                }
            };
            let (dev_ndcg10, test_metrics, run, training_pairs) = &scored[&variant];
            run.write_trec(&dir.file(&format!("runs/{}.trec", c.name())), c.name())?;
            rows.push(ConditionRow {
                condition: c,
                training_pairs: *training_pairs,
                k,
                dev_ndcg10: *dev_ndcg10,
                test: test_metrics.clone(),
            });
        }

        let mut notes = p.bundle.notes.clone();
        if self.config.conditions.contains(&Condition::HardPrompt) {
            notes.push("hard-prompt: untuned initial prompt embeddings through the same pipeline; approximates a hard-prompt baseline".into());
        }
        let report = PipelineReport {
            config_hash: self.config_hash.clone(),
            corpus: p.bundle.stats(),
            train_pairs: p.s_train.num_pairs(),
            eval_pairs: p.s_eval.num_pairs(),
            tuning: self.tuning_summary()?,
            weak: self.weak_summary(&p)?,
            bm25: MetricsReport::compute(&bm25_run, &p.bundle.test)?,
            depths,
            hard_prompt_depths,
            conditions: rows,
            notes,
        };
        write_json(&dir.file("report.json"), &report)?;
        write_file(&dir.file("report.txt"), report.table().as_bytes())
    }

    fn select_depth(&self, c: Condition, scored: &BTreeMap<String, (f64, MetricsReport, Run, usize)>) -> Result<usize> {
        select_depth(&self.config.filter_depths, |k| scored.get(&format!("{}-k{k}", c.name())).map(|s| s.0))
            .ok_or_else(|| Error::Contract(format!("no filtered model for {}", c.name())))
    }

    fn tuning_summary(&self) -> Result<Option<TuningSummary>> {
        if !self.config.needs_weak_data() {
            return Ok(None);
        }
        let r: TuningReport = read_json(&self.dir(Stage::TunePrompt).file("report.json"))?;
        Ok(Some(TuningSummary {
            initial_perplexity: r.initial_perplexity(),
            best_perplexity: r.best_perplexity,
            best_epoch: r.best_epoch,
            epochs_run: r.epochs.len() - 1,
        }))
    }

    fn weak_summary(&self, p: &Prepared) -> Result<Option<WeakSummary>> {
        if !self.config.needs_weak_data() {
            return Ok(None);
        }
        let w = self.weak(Stage::Generate, "w_large.jsonl", p)?;
        let group: ExampleGroup = read_json(&self.dir(Stage::FilterPrompt).file("group.json"))?;
        Ok(Some(WeakSummary {
            generated: w.len(),
            failures: w.provenance.failures,
            group: group_id(&group),
        }))
    }
}

/// Filter depth with the best dev score; ties go to the smaller k.
fn select_depth(depths: &[usize], dev: impl Fn(usize) -> Option<f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &k in depths {
        let Some(score) = dev(k) else { continue };
        let better = match best {
            None => true,
            Some((bk, bs)) => score > bs || (score == bs && k < bk),
        };
        if better {
            best = Some((k, score));
        }
    }
    best.map(|(k, _)| k)
}

/// One cell of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub train_queries: usize,
    pub examples_per_instance: usize,
    pub report: PipelineReport,
}

/// Runs the pipeline for every (X, M) combination, sharing one cache.
pub fn sweep(base: &PipelineConfig, xs: &[usize], ms: &[usize], out_dir: &Path, cache: Option<PathBuf>) -> Result<Vec<SweepRow>> {
    let cache = cache
        .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
        .unwrap_or_else(|| out_dir.join("cache"));
    let mut rows = Vec::new();
    for &x in xs {
        for &m in ms {
            let mut cfg = base.clone();
            cfg.splits.train_queries = x;
            cfg.tuning.examples_per_instance = m;
            let pipe = Pipeline::new(cfg, &out_dir.join(format!("x{x}-m{m}")), Some(cache.clone()))?;
            let report = pipe.run(None, Stage::Eval)?.expect("eval yields a report");
            rows.push(SweepRow {
                train_queries: x,
                examples_per_instance: m,
                report,
            });
        }
    }
    write_json(&out_dir.join("sweep.json"), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests;
