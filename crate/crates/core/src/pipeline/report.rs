use serde::{Deserialize, Serialize};

use super::config::Condition;
use crate::data::CorpusStats;
use crate::metrics::MetricsReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningSummary {
    pub initial_perplexity: f64,
    pub best_perplexity: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakSummary {
    pub generated: usize,
    pub failures: usize,
    pub group: String,
}

/// One weak-data filter depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub k: usize,
    pub kept: usize,
    pub dev_ndcg10: f64,
    pub test: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: Condition,
    pub training_pairs: usize,
    /// Filter depth, for filtered conditions.
    pub k: Option<usize>,
    pub dev_ndcg10: f64,
    pub test: MetricsReport,
}

/// Final comparison of every condition on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub corpus: CorpusStats,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub tuning: Option<TuningSummary>,
    pub weak: Option<WeakSummary>,
    pub bm25: MetricsReport,
    pub depths: Vec<DepthRow>,
    pub hard_prompt_depths: Vec<DepthRow>,
    pub conditions: Vec<ConditionRow>,
    pub notes: Vec<String>,
}

impl PipelineReport {
    pub fn condition(&self, c: Condition) -> Option<&ConditionRow> {
        self.conditions.iter().find(|r| r.condition == c)
    }

    /// Plain-text table of the test metrics.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>7} {:>6} {:>8} {:>8} {:>10} {:>8}\n",
            "condition", "pairs", "k", "nDCG@10", "MRR@10", "R@100", "MAP"
        );
        let mut line = |name: &str, pairs: String, k: String, m: &MetricsReport| {
            out.push_str(&format!(
                "{name:<14} {pairs:>7} {k:>6} {:>8.4} {:>8.4} {:>10.4} {:>8.4}\n",
                m.ndcg_10, m.mrr_10, m.recall_100, m.map
            ));
        };
        line("bm25", "-".into(), "-".into(), &self.bm25);
        for r in &self.conditions {
            let k = r.k.map_or("-".to_string(), |k| k.to_string());
            line(r.condition.name(), r.training_pairs.to_string(), k, &r.test);
        }
        out
    }
}
