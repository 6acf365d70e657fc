//! Synthetic KG with a planted one-hop signature.
//!
//! Entities are class hubs, items and attributes. Every item has one
//! `member_of` edge to its class hub and possibly a noise edge to an attribute;
//! attributes point at random items through the noise relations, which
//! perturbs item embeddings without touching item neighbor lists. Task
//! relation `j` maps random items to items of class `j`, so the correct
//! tail of a query is the one candidate whose hub matches the reference tail.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_dataset, BuildConfig, Dataset, Split, SplitPlan};
use crate::embeddings::{export_vectors, regime_triples, train_embeddings, EmbeddingConfig, Regime};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, evaluate, BaselineScorer, CandidateScorer, EvalOptions, MatcherScorer, Metrics};
use crate::graph::{BackgroundGraph, EntityId, RelationId, Triple, Vocab};
use crate::matcher::{Matcher, MatcherConfig};
use crate::rng;
use crate::trainer::{train, TrainConfig, TrainContext, TrainOutcome};

pub const MEMBER_OF: &str = "concept:member_of";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub items_per_class: usize,
    pub attributes: usize,
    pub noise_relations: usize,
    /// Probability that an item also has a noise edge to an attribute.
    pub item_noise_rate: f64,
    /// Attribute-to-item edges per noise relation.
    pub attr_edges_per_relation: usize,
    pub task_relations: usize,
    /// Inclusive range of triples per task relation.
    pub task_size: (usize, usize),
    /// Wrong candidates per query.
    pub distractors: usize,
    pub split: [usize; 3],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 30,
            items_per_class: 60,
            attributes: 170,
            noise_relations: 19,
            item_noise_rate: 0.0,
            attr_edges_per_relation: 500,
            task_relations: 10,
            task_size: (60, 150),
            distractors: 29,
            split: [6, 2, 2],
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn num_entities(&self) -> usize {
        self.classes + self.classes * self.items_per_class + self.attributes
    }

    fn validate(&self) -> Result<()> {
        if self.task_relations > self.classes {
            return Err(Error::Config("need one class per task relation".into()));
        }
        if self.task_size.0 <= 50 || self.task_size.1 >= 500 || self.task_size.0 > self.task_size.1 {
            return Err(Error::Config("task sizes must lie strictly inside (50, 500)".into()));
        }
        if self.noise_relations == 0 || self.attr_edges_per_relation < 500 {
            return Err(Error::Config("noise relations need at least 500 triples each".into()));
        }
        if self.attr_edges_per_relation > self.attributes * self.classes * self.items_per_class {
            return Err(Error::Config("more attribute edges than attribute-item pairs".into()));
        }
        if !(0.0..=1.0).contains(&self.item_noise_rate) {
            return Err(Error::Config("item_noise_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn hub_name(class: usize) -> String {
    format!("concept:class:hub_{class:02}")
}

pub fn item_name(class: usize, index: usize) -> String {
    format!("concept:item:c{class:02}_i{index:03}")
}

/// Raw triples of the synthetic KG, in generation order.
pub fn generate(spec: &SyntheticSpec) -> Result<(Vec<Triple>, Vocab)> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, rng::DATASET);
    let mut vocab = Vocab::default();
    let hubs: Vec<EntityId> = (0..spec.classes).map(|c| vocab.intern_entity(&hub_name(c))).collect();
    let items: Vec<Vec<EntityId>> = (0..spec.classes)
        .map(|c| (0..spec.items_per_class).map(|i| vocab.intern_entity(&item_name(c, i))).collect())
        .collect();
    let attrs: Vec<EntityId> = (0..spec.attributes)
        .map(|a| vocab.intern_entity(&format!("concept:attr:a_{a:03}")))
        .collect();
    let member = vocab.intern_relation(MEMBER_OF);
    let noise: Vec<RelationId> = (0..spec.noise_relations)
        .map(|k| vocab.intern_relation(&format!("concept:noise_{k:02}")))
        .collect();
    let tasks: Vec<RelationId> = (0..spec.task_relations)
        .map(|j| vocab.intern_relation(&format!("concept:task_{j:02}")))
        .collect();

    let mut triples = Vec::new();
    let all_items: Vec<EntityId> = items.iter().flatten().copied().collect();
    for (c, members) in items.iter().enumerate() {
        for &e in members {
            triples.push(Triple::new(e, member, hubs[c]));
        }
    }
    for (i, &e) in all_items.iter().enumerate() {
        let a = attrs[r.gen_range(0..attrs.len())];
        if r.gen_bool(spec.item_noise_rate) {
            triples.push(Triple::new(e, noise[i % noise.len()], a));
        }
    }
    for &rel in &noise {
        let mut edges = BTreeSet::new();
        while edges.len() < spec.attr_edges_per_relation {
            let a = attrs[r.gen_range(0..attrs.len())];
            let e = all_items[r.gen_range(0..all_items.len())];
            edges.insert((a, e));
        }
        triples.extend(edges.into_iter().map(|(a, e)| Triple::new(a, rel, e)));
    }
    for (j, &rel) in tasks.iter().enumerate() {
        let n = r.gen_range(spec.task_size.0..=spec.task_size.1);
        let mut pairs = BTreeSet::new();
        while pairs.len() < n {
            let h = all_items[r.gen_range(0..all_items.len())];
            let t = items[j][r.gen_range(0..spec.items_per_class)];
            if h != t {
                pairs.insert((h, t));
            }
        }
        triples.extend(pairs.into_iter().map(|(h, t)| Triple::new(h, rel, t)));
    }
    Ok((triples, vocab))
}

/// Hub each item belongs to, read from the background graph.
pub fn signatures(ds: &Dataset) -> Result<HashMap<EntityId, EntityId>> {
    let member = ds
        .vocab
        .relation(MEMBER_OF)
        .ok_or_else(|| Error::Data(format!("dataset has no {MEMBER_OF} relation")))?;
    Ok(ds
        .background
        .iter()
        .filter(|t| t.relation == member)
        .map(|t| (t.head, t.tail))
        .collect())
}

/// Replaces every query's candidates with its truth plus `distractors` items
/// drawn from the tail classes of the meta-train relations, excluding the
/// truth's own class. Each training class is then a positive for one task and
/// a negative for the others, so a class prior carries no signal.
pub fn plant_candidates(ds: &mut Dataset, distractors: usize, seed: u64) -> Result<()> {
    let sig = signatures(ds)?;
    let mut by_hub: BTreeMap<EntityId, Vec<EntityId>> = BTreeMap::new();
    for (&e, &hub) in &sig {
        by_hub.entry(hub).or_default().push(e);
    }
    for v in by_hub.values_mut() {
        v.sort_unstable();
    }
    let class_of = |e: EntityId| {
        sig.get(&e)
            .copied()
            .ok_or_else(|| Error::Data(format!("tail {e} has no class")))
    };
    let mut train_hubs = BTreeSet::new();
    for task in ds.tasks_in(Split::Train) {
        for t in task.triples() {
            train_hubs.insert(class_of(t.tail)?);
        }
    }
    let stream = rng::derive_seed(seed, "candidates");
    let mut planted = BTreeMap::new();
    for (&rel, task) in &ds.tasks {
        let mut r = rng::seeded(rng::indexed_seed(stream, u64::from(rel.0)));
        let mut lists = Vec::with_capacity(task.queries.len());
        for q in &task.queries {
            let hub = class_of(q.truth)?;
            let pool: Vec<EntityId> = train_hubs
                .iter()
                .filter(|&&h| h != hub)
                .flat_map(|h| by_hub[h].iter().copied())
                .collect();
            if pool.len() < distractors {
                return Err(Error::Config(format!(
                    "{} distractors requested but only {} items qualify",
                    distractors,
                    pool.len()
                )));
            }
            let mut c: Vec<EntityId> = sample(&mut r, pool.len(), distractors)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            c.push(q.truth);
            c.sort_unstable();
            lists.push(c);
        }
        planted.insert(rel, lists);
    }
    for (rel, lists) in planted {
        let task = ds.tasks.get_mut(&rel).expect("planted for an existing task");
        for (q, c) in task.queries.iter_mut().zip(lists) {
            q.candidates = c;
        }
        task.validate()?;
    }
    Ok(())
}

pub fn build_config(spec: &SyntheticSpec) -> BuildConfig {
    BuildConfig {
        split: SplitPlan::Counts(spec.split),
        seed: rng::derive_seed(spec.seed, rng::DATASET),
        ..BuildConfig::default()
    }
}

/// Generates, builds and plants candidates.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let (triples, vocab) = generate(spec)?;
    let mut ds = build_dataset(&triples, &vocab, &build_config(spec))?;
    plant_candidates(&mut ds, spec.distractors, spec.seed)?;
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub queries: usize,
    /// Queries where the truth is the only candidate sharing the reference tail's signature.
    pub unique: usize,
}

impl OracleReport {
    pub fn hits1(&self) -> f64 {
        self.unique as f64 / self.queries.max(1) as f64
    }
}

/// Brute-force signature matcher: the signature of an entity is the set of
/// `member_of` targets among its one-hop neighbors.
pub fn signature_oracle(ds: &Dataset, graph: &BackgroundGraph, split: Split) -> Result<OracleReport> {
    let member = ds
        .vocab
        .relation(MEMBER_OF)
        .ok_or_else(|| Error::Data(format!("dataset has no {MEMBER_OF} relation")))?;
    let signature = |e: EntityId| -> BTreeSet<EntityId> {
        graph
            .neighbors(e)
            .iter()
            .filter(|(r, _)| *r == member)
            .map(|&(_, t)| t)
            .collect()
    };
    let mut report = OracleReport { queries: 0, unique: 0 };
    for task in ds.tasks_in(split) {
        let want = signature(task.reference.tail);
        for q in &task.queries {
            report.queries += 1;
            let matching: Vec<EntityId> = q
                .candidates
                .iter()
                .copied()
                .filter(|&c| !want.is_empty() && signature(c) == want)
                .collect();
            if matching == [q.truth] {
                report.unique += 1;
            }
        }
    }
    Ok(report)
}

/// Settings of the three-arm synthetic comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub spec: SyntheticSpec,
    pub embedding: EmbeddingConfig,
    pub matcher: MatcherConfig,
    pub train: TrainConfig,
    pub max_neighbors: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dim = 32;
        ExperimentConfig {
            spec: SyntheticSpec::default(),
            embedding: EmbeddingConfig {
                dim,
                epochs: 100,
                ..EmbeddingConfig::default()
            },
            matcher: MatcherConfig {
                dim,
                hidden: 64,
                ..MatcherConfig::default()
            },
            train: TrainConfig {
                max_episodes: 5000,
                batch_size: 32,
                eval_interval: 250,
                ..TrainConfig::default()
            },
            max_neighbors: 50,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub oracle: OracleReport,
    /// Full matcher over the background-only TransE table.
    pub gmatching: Metrics,
    pub gmatching_run: TrainOutcome,
    /// TransE trained with the one-shot references, scoring directly.
    pub baseline: Metrics,
    /// Matcher with all three ablation flags off.
    pub ablated: Metrics,
    pub ablated_run: TrainOutcome,
}

fn test_metrics<C: CandidateScorer>(ds: &Dataset, scorer: &C) -> Result<Metrics> {
    let opts = EvalOptions {
        seed: ds.seed,
        ..EvalOptions::default()
    };
    let results = evaluate(ds, ds.manifest.split(Split::Test), scorer, &opts)?;
    compute_metrics(&results.iter().map(|q| q.rank).collect::<Vec<_>>())
}

fn train_arm(
    ds: &Dataset,
    graph: &BackgroundGraph,
    table: &crate::embeddings::EmbeddingTable,
    matcher_cfg: MatcherConfig,
    cfg: &ExperimentConfig,
) -> Result<(Metrics, TrainOutcome)> {
    let mut init = rng::stream(cfg.seed, rng::MATCHER);
    let mut matcher = Matcher::new(matcher_cfg, table, &mut init)?;
    let ctx = TrainContext {
        source: ds,
        vocab: &ds.vocab,
        graph,
        train_relations: ds.manifest.split(Split::Train),
        valid_relations: ds.manifest.split(Split::Validation),
        out_dir: None,
    };
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let outcome = train(&ctx, &mut matcher, &train_cfg, None)?;
    let m = test_metrics(ds, &MatcherScorer { matcher: &matcher, graph })?;
    Ok((m, outcome))
}

/// Builds the synthetic dataset and compares GMatching, the raw TransE ranking
/// and the fully ablated matcher on the meta-test relations.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let ds = synthetic_dataset(&cfg.spec)?;
    let graph = ds.background_graph(cfg.max_neighbors, rng::derive_seed(cfg.seed, rng::NEIGHBORS))?;
    let oracle = signature_oracle(&ds, &graph, Split::Test)?;
    let n_ent = ds.vocab.num_entities();
    let n_rel = ds.vocab.num_relations();
    let mut emb_cfg = cfg.embedding.clone();
    emb_cfg.seed = rng::derive_seed(cfg.seed, rng::EMBEDDING);

    let bg = regime_triples(&ds, Regime::Matcher, 1);
    let (model, _) = train_embeddings(&bg, n_ent, n_rel, &emb_cfg, Some(Regime::Matcher))?;
    let table = export_vectors(&model)?;
    let (gmatching, gmatching_run) = train_arm(&ds, &graph, &table, cfg.matcher.clone(), cfg)?;
    let ablated_cfg = MatcherConfig {
        use_neighbor_encoder: false,
        use_matching_processor: false,
        use_scaling_factor: false,
        ..cfg.matcher.clone()
    };
    let (ablated, ablated_run) = train_arm(&ds, &graph, &table, ablated_cfg, cfg)?;

    let with_refs = regime_triples(&ds, Regime::Baseline, 1);
    let (base_model, _) = train_embeddings(&with_refs, n_ent, n_rel, &emb_cfg, Some(Regime::Baseline))?;
    let baseline = test_metrics(&ds, &BaselineScorer { model: &base_model })?;
    Ok(ExperimentReport {
        oracle,
        gmatching,
        gmatching_run,
        baseline,
        ablated,
        ablated_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_match_spec() {
        let spec = SyntheticSpec::default();
        let (triples, vocab) = generate(&spec).unwrap();
        assert_eq!(vocab.num_entities(), 2000);
        assert_eq!(vocab.num_relations(), 30);
        let mut counts: BTreeMap<RelationId, usize> = BTreeMap::new();
        for t in &triples {
            *counts.entry(t.relation).or_default() += 1;
        }
        let in_band = counts.values().filter(|&&n| n > 50 && n < 500).count();
        assert_eq!(in_band, 10);
        assert!(counts.values().all(|&n| (n > 50 && n < 500) || n >= 500));
    }

    #[test]
    fn oracle_is_perfect_on_planted_candidates() {
        let spec = SyntheticSpec::default();
        let ds = synthetic_dataset(&spec).unwrap();
        assert_eq!(ds.manifest.meta_train.len(), 6);
        let graph = ds.background_graph(50, 0).unwrap();
        for split in [Split::Train, Split::Validation, Split::Test] {
            let rep = signature_oracle(&ds, &graph, split).unwrap();
            assert!(rep.queries > 0);
            assert_eq!(rep.unique, rep.queries);
        }
        for task in ds.tasks.values() {
            assert!(task.queries.iter().all(|q| q.candidates.len() == spec.distractors + 1));
        }
    }
}
