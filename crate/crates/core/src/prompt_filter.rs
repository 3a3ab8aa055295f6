//! Choosing the in-prompt example group: sample candidate groups of M
//! training pairs and keep the one with the lowest evaluation loss under the
//! tuned soft prompt.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledPair, SplitSample};
use crate::error::{Error, Result};
use crate::lm::DecoderLm;
use crate::numerics::Scalar;
use crate::prompt_tuning::{build_instance, SoftPrompt};
use crate::seed;

/// Largest candidate space that is enumerated rather than rejection-sampled.
const ENUMERATE_LIMIT: u128 = 10_000;

/// Groups with more than this fraction of skipped instances are disqualified.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

/// M training pairs used together as in-prompt examples.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleGroup {
    /// Position in the sampling order; the tie-break key.
    pub index: usize,
    /// Indices into the training sample, in prompt order.
    pub members: Vec<usize>,
    pub pairs: Vec<LabeledPair>,
}

impl ExampleGroup {
    pub fn pair_ids(&self) -> Vec<String> {
        self.pairs.iter().map(|p| format!("{}/{}", p.query_id, p.doc_id)).collect()
    }
}

/// n choose k, saturating.
pub fn num_combinations(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..k).rev().find(|&i| cur[i] < n - k + i) else {
            return out;
        };
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Draws `num_groups` distinct groups (as sets) of `m` distinct pairs.
pub fn sample_groups(s_train: &SplitSample, m: usize, num_groups: usize, seed: u64) -> Result<Vec<ExampleGroup>> {
    let n = s_train.num_pairs();
    if m == 0 || m > n {
        return Err(Error::Config(format!("cannot form groups of {m} from {n} pairs")));
    }
    if num_groups == 0 {
        return Err(Error::Config("num_groups must be at least 1".into()));
    }
    let total = num_combinations(n, m);
    if num_groups as u128 > total {
        return Err(Error::Config(format!("{num_groups} distinct groups requested but only {total} exist")));
    }
    let mut rng = seed::rng(seed, "example-groups", 0);
    let members: Vec<Vec<usize>> = if total <= ENUMERATE_LIMIT {
        let mut all = combinations(n, m);
        all.shuffle(&mut rng);
        all.truncate(num_groups);
        all
    } else {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(num_groups);
        let mut tries = 0usize;
        while out.len() < num_groups {
            tries += 1;
            if tries > 100 * num_groups {
                return Err(Error::Config("could not draw enough distinct example groups".into()));
            }
            let g = index::sample(&mut rng, n, m).into_vec();
            let mut key = g.clone();
            key.sort_unstable();
            if seen.insert(key) {
                out.push(g);
            }
        }
        out
    };
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(index, members)| ExampleGroup {
            index,
            pairs: members.iter().map(|&i| s_train.pairs[i].clone()).collect(),
            members,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group_index: usize,
    pub mean_loss: f64,
    /// Instances actually scored.
    pub num_eval_instances: usize,
    /// Instances that could not fit the context.
    pub skipped: usize,
    pub disqualified: bool,
}

/// Mean masked loss of every evaluation pair with `group` as the examples.
pub fn score_group<S: Scalar>(group: &ExampleGroup, s_eval: &SplitSample, sp: &SoftPrompt<S>, lm: &DecoderLm<S>) -> Result<GroupScore> {
    let budget = lm.config().context_length.saturating_sub(sp.len());
    let mut instances = Vec::with_capacity(s_eval.num_pairs());
    let mut skipped = 0;
    for target in &s_eval.pairs {
        match build_instance(&group.pairs, target, lm.vocab(), budget) {
            Ok(inst) => instances.push(inst),
            Err(Error::Length { .. }) => {
                log::warn!("group {} skips {}/{}: does not fit", group.index, target.query_id, target.doc_id);
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if instances.is_empty() {
        return Err(Error::Contract(format!("no evaluation instance fits with group {}", group.index)));
    }
    let losses: Vec<f64> = instances
        .par_iter()
        .map(|inst| lm.lm_loss(Some(&sp.theta), &inst.ids, &inst.loss_mask).map(|l| l.as_f64()))
        .collect::<Result<_>>()?;
    let total = s_eval.num_pairs();
    Ok(GroupScore {
        group_index: group.index,
        mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
        num_eval_instances: losses.len(),
        skipped,
        disqualified: skipped as f64 > MAX_SKIPPED_FRACTION * total as f64,
    })
}

/// Scores every group; output order follows `groups`.
pub fn score_groups<S: Scalar>(groups: &[ExampleGroup], s_eval: &SplitSample, sp: &SoftPrompt<S>, lm: &DecoderLm<S>) -> Result<Vec<GroupScore>> {
    sp.check_lm(lm)?;
    groups.par_iter().map(|g| score_group(g, s_eval, sp, lm)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectMode {
    #[default]
    Best,
    Worst,
}

fn select(scores: &[GroupScore], worst: bool) -> Result<&GroupScore> {
    let eligible = scores.iter().filter(|s| !s.disqualified);
    let pick = eligible.min_by(|a, b| {
        let by_loss = if worst {
            b.mean_loss.total_cmp(&a.mean_loss)
        } else {
            a.mean_loss.total_cmp(&b.mean_loss)
        };
        by_loss.then(a.group_index.cmp(&b.group_index))
    });
    pick.ok_or_else(|| Error::Contract("no eligible group scores to select from".into()))
}

/// Lowest mean loss; ties go to the lowest sampling index.
pub fn select_best(scores: &[GroupScore]) -> Result<&GroupScore> {
    select(scores, false)
}

/// Highest mean loss; ties go to the lowest sampling index.
pub fn select_worst(scores: &[GroupScore]) -> Result<&GroupScore> {
    select(scores, true)
}

pub fn select_group(scores: &[GroupScore], mode: SelectMode) -> Result<&GroupScore> {
    select(scores, mode == SelectMode::Worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub index: usize,
    pub pairs: Vec<String>,
    pub score: GroupScore,
}

/// Every candidate with its score and the chosen index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub mode: SelectMode,
    pub examples_per_group: usize,
    pub groups: Vec<GroupEntry>,
    pub chosen: usize,
    pub soft_prompt: String,
}

impl FilterReport {
    pub fn new(groups: &[ExampleGroup], scores: &[GroupScore], mode: SelectMode, soft_prompt: String) -> Result<Self> {
        let chosen = select_group(scores, mode)?.group_index;
        Ok(Self {
            mode,
            examples_per_group: groups.first().map_or(0, |g| g.pairs.len()),
            groups: groups
                .iter()
                .zip(scores)
                .map(|(g, s)| GroupEntry {
                    index: g.index,
                    pairs: g.pair_ids(),
                    score: s.clone(),
                })
                .collect(),
            chosen,
            soft_prompt,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt_tuning::{init_soft_prompt, DEFAULT_HARD_PROMPT};
    use crate::testutil::{sample, tiny_lm};
    use std::collections::BTreeSet;

    fn score(i: usize, loss: f64) -> GroupScore {
        GroupScore {
            group_index: i,
            mean_loss: loss,
            num_eval_instances: 1,
            skipped: 0,
            disqualified: false,
        }
    }

    #[test]
    fn combination_counts() {
        assert_eq!(num_combinations(50, 2), 1225);
        assert_eq!(num_combinations(3, 1), 3);
        assert_eq!(num_combinations(2, 3), 0);
        assert_eq!(combinations(5, 3).len(), 10);
    }

    #[test]
    fn fifty_distinct_groups() {
        let s = sample(0..50);
        let groups = sample_groups(&s, 2, 50, 1).unwrap();
        assert_eq!(groups.len(), 50);
        let sets: BTreeSet<BTreeSet<usize>> = groups.iter().map(|g| g.members.iter().copied().collect()).collect();
        assert_eq!(sets.len(), 50);
        assert!(groups.iter().all(|g| g.members[0] != g.members[1]));
        assert_eq!(groups, sample_groups(&s, 2, 50, 1).unwrap());
    }

    #[test]
    fn exhaustive_small_case() {
        let groups = sample_groups(&sample(0..3), 1, 3, 5).unwrap();
        let got: BTreeSet<usize> = groups.iter().map(|g| g.members[0]).collect();
        assert_eq!(got, BTreeSet::from([0, 1, 2]));
        assert!(matches!(sample_groups(&sample(0..3), 1, 4, 5), Err(Error::Config(_))));
        assert!(sample_groups(&sample(0..3), 4, 1, 5).is_err());
    }

    #[test]
    fn rejection_sampling_for_large_spaces() {
        let s = sample(0..60);
        let groups = sample_groups(&s, 4, 30, 2).unwrap();
        let sets: BTreeSet<BTreeSet<usize>> = groups.iter().map(|g| g.members.iter().copied().collect()).collect();
        assert_eq!(sets.len(), 30);
        assert!(groups.iter().all(|g| g.members.iter().collect::<BTreeSet<_>>().len() == 4));
    }

    #[test]
    fn argmin_argmax_and_ties() {
        let s = [score(0, 2.0), score(1, 1.5), score(2, 3.0)];
        assert_eq!(select_best(&s).unwrap().group_index, 1);
        assert_eq!(select_worst(&s).unwrap().group_index, 2);
        let tie = [score(0, 1.0), score(1, 1.0)];
        assert_eq!(select_best(&tie).unwrap().group_index, 0);
        assert_eq!(select_worst(&tie).unwrap().group_index, 0);
        let mut rev = tie.clone();
        rev.reverse();
        assert_eq!(select_best(&rev).unwrap().group_index, 0);
        assert!(select_best(&[]).is_err());
        let mut dq = s.clone();
        dq[1].disqualified = true;
        assert_eq!(select_best(&dq).unwrap().group_index, 0);
    }

    #[test]
    fn scores_match_direct_losses() {
        let mut lm = tiny_lm::<f64>(1, 8, 120);
        lm.freeze();
        let sp = init_soft_prompt(DEFAULT_HARD_PROMPT, 3, &lm).unwrap();
        let train = sample(0..6);
        let eval = sample(6..9);
        let groups = sample_groups(&train, 2, 2, 0).unwrap();
        let before = (lm.params().clone(), sp.clone());
        let scores = score_groups(&groups, &eval, &sp, &lm).unwrap();
        assert_eq!((lm.params().clone(), sp.clone()), before);
        for (g, s) in groups.iter().zip(&scores) {
            let direct: f64 = eval
                .pairs
                .iter()
                .map(|t| {
                    let inst = build_instance(&g.pairs, t, lm.vocab(), 117).unwrap();
                    lm.lm_loss(Some(&sp.theta), &inst.ids, &inst.loss_mask).unwrap()
                })
                .sum();
            assert!((s.mean_loss - direct / 3.0).abs() < 1e-12);
            assert_eq!(s.num_eval_instances, 3);
        }
        let single = score_group(&groups[0], &sample(6..7), &sp, &lm).unwrap();
        let inst = build_instance(&groups[0].pairs, &eval.pairs[0], lm.vocab(), 117).unwrap();
        assert_eq!(single.mean_loss, lm.lm_loss(Some(&sp.theta), &inst.ids, &inst.loss_mask).unwrap());
        let twin = ExampleGroup { index: 9, ..groups[0].clone() };
        assert_eq!(score_group(&twin, &eval, &sp, &lm).unwrap().mean_loss, scores[0].mean_loss);

        let report = FilterReport::new(&groups, &scores, SelectMode::Best, sp.fingerprint()).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<FilterReport>(&json).unwrap(), report);
    }

    #[test]
    fn overflowing_instances_are_skipped_and_counted() {
        let mut lm = tiny_lm::<f32>(1, 8, 40);
        lm.freeze();
        let sp = init_soft_prompt(DEFAULT_HARD_PROMPT, 3, &lm).unwrap();
        let groups = sample_groups(&sample(0..6), 2, 1, 0).unwrap();
        let mut eval = sample(6..10);
        eval.pairs[0].query = "red ".repeat(30);
        let s = score_group(&groups[0], &eval, &sp, &lm).unwrap();
        assert_eq!((s.skipped, s.num_eval_instances), (1, 3));
        assert!(s.disqualified);
    }
}
