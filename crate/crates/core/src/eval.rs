//! Candidate ranking, MRR / Hits@K and k-shot score fusion.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TaskSource;
use crate::embeddings::KgModel;
use crate::error::{Error, Result};
use crate::graph::{BackgroundGraph, EntityId, RelationId, Triple, Vocab};
use crate::matcher::{EncodingCache, Matcher};

/// Rank of the truth among `scores` with pessimistic ties: every other
/// candidate scoring at least as high as the truth ranks above it.
pub fn rank_of(truth_index: usize, scores: &[f64]) -> usize {
    let t = scores[truth_index];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != truth_index && s >= t)
        .count()
}

/// Rank of `truth` given one score per candidate.
pub fn rank_candidates(truth: EntityId, candidates: &[EntityId], scores: &[f64]) -> Result<usize> {
    if scores.len() != candidates.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} candidates",
            scores.len(),
            candidates.len()
        )));
    }
    let idx = candidates
        .iter()
        .position(|&c| c == truth)
        .ok_or_else(|| Error::Contract(format!("ground truth {truth} is not among the candidates")))?;
    Ok(rank_of(idx, scores))
}

/// Element-wise maximum over the score rows of several references.
pub fn aggregate_kshot(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Contract("k-shot fusion needs at least one reference".into()))?;
    let mut fused = first.clone();
    for row in &rows[1..] {
        if row.len() != fused.len() {
            return Err(Error::Shape {
                op: "aggregate_kshot",
                shapes: format!("[{}] vs [{}]", fused.len(), row.len()),
            });
        }
        fused.iter_mut().zip(row).for_each(|(a, &b)| *a = a.max(b));
    }
    Ok(fused)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits5: f64,
    pub hits10: f64,
    pub count: usize,
}

impl Metrics {
    pub fn hits(ranks: &[usize], k: usize) -> f64 {
        ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
    }
}

/// MRR and inclusive Hits@{1,5,10} over `ranks`.
pub fn compute_metrics(ranks: &[usize]) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::Data("no ranks to summarize".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Contract("ranks start at 1".into()));
    }
    Ok(Metrics {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64,
        hits1: Metrics::hits(ranks, 1),
        hits5: Metrics::hits(ranks, 5),
        hits10: Metrics::hits(ranks, 10),
        count: ranks.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub relation: RelationId,
    pub head: EntityId,
    pub truth: EntityId,
    pub rank: usize,
    pub candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSummary {
    pub relation: String,
    /// Mean candidate-set size over the relation's queries (rounded).
    pub candidates: usize,
    pub metrics: Metrics,
}

/// Per-query ranks plus micro-averaged and per-relation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub overall: Metrics,
    pub per_relation: Vec<RelationSummary>,
    pub queries: Vec<QueryResult>,
}

impl RankingReport {
    pub fn new(queries: Vec<QueryResult>, vocab: &Vocab) -> Result<RankingReport> {
        let ranks: Vec<usize> = queries.iter().map(|q| q.rank).collect();
        let overall = compute_metrics(&ranks)?;
        let mut groups: BTreeMap<RelationId, Vec<&QueryResult>> = BTreeMap::new();
        for q in &queries {
            groups.entry(q.relation).or_default().push(q);
        }
        let per_relation = groups
            .into_iter()
            .map(|(r, qs)| {
                let ranks: Vec<usize> = qs.iter().map(|q| q.rank).collect();
                let mean_c = qs.iter().map(|q| q.candidates).sum::<usize>() as f64 / qs.len() as f64;
                Ok(RelationSummary {
                    relation: vocab.relation_name(r).to_string(),
                    candidates: mean_c.round() as usize,
                    metrics: compute_metrics(&ranks)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RankingReport {
            overall,
            per_relation,
            queries,
        })
    }

    /// Unweighted mean of per-relation metrics.
    pub fn macro_average(&self) -> Metrics {
        let n = self.per_relation.len().max(1) as f64;
        let mut m = Metrics::default();
        for r in &self.per_relation {
            m.mrr += r.metrics.mrr / n;
            m.hits1 += r.metrics.hits1 / n;
            m.hits5 += r.metrics.hits5 / n;
            m.hits10 += r.metrics.hits10 / n;
            m.count += r.metrics.count;
        }
        m
    }

    /// Per-relation table: relation, candidates, MRR, Hits@1/5/10.
    pub fn relation_table(&self) -> String {
        let width = self
            .per_relation
            .iter()
            .map(|r| r.relation.len())
            .max()
            .unwrap_or(0)
            .max("Relation".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>12}  {:>6}  {:>6}  {:>6}  {:>7}",
            "Relation", "# Candidates", "MRR", "Hits@1", "Hits@5", "Hits@10"
        );
        for r in &self.per_relation {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{:<width$}  {:>12}  {:>6.3}  {:>6.3}  {:>6.3}  {:>7.3}",
                r.relation, r.candidates, m.mrr, m.hits1, m.hits5, m.hits10
            );
        }
        let m = &self.overall;
        let _ = writeln!(
            out,
            "{:<width$}  {:>12}  {:>6.3}  {:>6.3}  {:>6.3}  {:>7.3}",
            "(all queries)", "", m.mrr, m.hits1, m.hits5, m.hits10
        );
        out
    }
}

fn cell(v: f64) -> String {
    let s = format!("{v:.3}");
    s.strip_prefix('0').map(str::to_string).unwrap_or(s)
}

/// One row per model with paired `validation/test` cells.
pub fn paired_table(rows: &[(String, Metrics, Metrics)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("Model".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}",
        "Model", "MRR", "Hits@10", "Hits@5", "Hits@1"
    );
    for (name, v, t) in rows {
        let pair = |a: f64, b: f64| format!("{}/{}", cell(a), cell(b));
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}",
            name,
            pair(v.mrr, t.mrr),
            pair(v.hits10, t.hits10),
            pair(v.hits5, t.hits5),
            pair(v.hits1, t.hits1)
        );
    }
    out
}

/// Produces candidate scores for a query; one row per reference.
pub trait CandidateScorer: Sync {
    type Cache: Default + Send;

    fn score(
        &self,
        cache: &mut Self::Cache,
        references: &[Triple],
        head: EntityId,
        relation: RelationId,
        candidates: &[EntityId],
    ) -> Result<Vec<Vec<f64>>>;
}

/// Scores candidates with the matcher against each reference pair.
pub struct MatcherScorer<'a> {
    pub matcher: &'a Matcher,
    pub graph: &'a BackgroundGraph,
}

impl CandidateScorer for MatcherScorer<'_> {
    type Cache = EncodingCache;

    fn score(
        &self,
        cache: &mut EncodingCache,
        references: &[Triple],
        head: EntityId,
        _relation: RelationId,
        candidates: &[EntityId],
    ) -> Result<Vec<Vec<f64>>> {
        let refs: Vec<(EntityId, EntityId)> = references.iter().map(|t| (t.head, t.tail)).collect();
        self.matcher.score_candidates(self.graph, &refs, head, candidates, cache)
    }
}

/// Scores candidates with an embedding model's own triple score; references are
/// already folded into the model's training data.
pub struct BaselineScorer<'a> {
    pub model: &'a KgModel,
}

impl CandidateScorer for BaselineScorer<'_> {
    type Cache = ();

    fn score(
        &self,
        _cache: &mut (),
        _references: &[Triple],
        head: EntityId,
        relation: RelationId,
        candidates: &[EntityId],
    ) -> Result<Vec<Vec<f64>>> {
        Ok(vec![candidates.iter().map(|&c| self.model.score(head, relation, c)).collect()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// References per task; more than one are fused by element-wise max.
    pub shots: usize,
    /// Drop other known-true tails of the same head from the candidates.
    pub filtered: bool,
    /// Worker threads for query scoring (0 = rayon default).
    pub workers: usize,
    /// Seed choosing the extra k-shot references.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            shots: 1,
            filtered: false,
            workers: 1,
            seed: 0,
        }
    }
}

/// Ranks every query of `relations` and returns per-query results in task order.
pub fn evaluate<S: TaskSource + ?Sized, C: CandidateScorer>(
    source: &S,
    relations: &[RelationId],
    scorer: &C,
    opts: &EvalOptions,
) -> Result<Vec<QueryResult>> {
    let run = || -> Result<Vec<QueryResult>> {
        let mut all = Vec::new();
        for &r in relations {
            let task = source
                .task(r)
                .ok_or_else(|| Error::Data(format!("no task file for relation {r}")))?;
            let (references, queries) = task.k_shot(opts.shots, opts.seed);
            let mut known: HashMap<EntityId, HashSet<EntityId>> = HashMap::new();
            for t in task.triples() {
                known.entry(t.head).or_default().insert(t.tail);
            }
            let results: Vec<Result<QueryResult>> = queries
                .par_iter()
                .map_init(C::Cache::default, |cache, q| {
                    let candidates: Vec<EntityId> = if opts.filtered {
                        let tails = &known[&q.head];
                        q.candidates
                            .iter()
                            .copied()
                            .filter(|&c| c == q.truth || !tails.contains(&c))
                            .collect()
                    } else {
                        q.candidates.clone()
                    };
                    let rows = scorer.score(cache, &references, q.head, r, &candidates)?;
                    let fused = aggregate_kshot(&rows)?;
                    let rank = rank_candidates(q.truth, &candidates, &fused)?;
                    Ok(QueryResult {
                        relation: r,
                        head: q.head,
                        truth: q.truth,
                        rank,
                        candidates: candidates.len(),
                    })
                })
                .collect();
            for res in results {
                all.push(res?);
            }
        }
        Ok(all)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(run)
}
