//! One-shot task construction: choose long-tail task relations, split them into
//! meta-train / meta-validation / meta-test, and persist background and task files.
//!
//! Directory layout written by [`Dataset::write`]:
//!
//! ```text
//! entities.tsv      entity name <TAB> type tag, in id order
//! relations.txt     relation names, in id order
//! background.tsv    background triples (no task relation)
//! manifest.json     split lists, seed, dropped inverse relations
//! tasks/NNN_<rel>.json
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, build_candidates, check_candidates, EntityId, RelationId, Triple, Vocab};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub head: EntityId,
    pub truth: EntityId,
    pub candidates: Vec<EntityId>,
}

/// One task relation: a single reference triple plus held-out queries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSet {
    pub relation: RelationId,
    pub reference: Triple,
    pub queries: Vec<Query>,
}

impl TaskSet {
    /// All known triples of the task (reference first).
    pub fn triples(&self) -> Vec<Triple> {
        std::iter::once(self.reference)
            .chain(
                self.queries
                    .iter()
                    .map(|q| Triple::new(q.head, self.relation, q.truth)),
            )
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.reference.relation != self.relation {
            return Err(Error::Data(format!("task {}: reference has another relation", self.relation)));
        }
        for q in &self.queries {
            if q.head == self.reference.head && q.truth == self.reference.tail {
                return Err(Error::Data(format!("task {}: reference repeated as query", self.relation)));
            }
            check_candidates(q.truth, &q.candidates)?;
        }
        Ok(())
    }

    /// `k` references for k-shot evaluation and the queries left to rank.
    ///
    /// The stored reference is always first; the remaining `k - 1` are queries
    /// picked by a shuffle seeded from `seed` and the relation id.
    pub fn k_shot(&self, k: usize, seed: u64) -> (Vec<Triple>, Vec<&Query>) {
        let k = k.max(1);
        let mut order: Vec<usize> = (0..self.queries.len()).collect();
        let extra = (k - 1).min(order.len());
        if extra > 0 {
            let mut r = rng::seeded(rng::indexed_seed(seed, u64::from(self.relation.0)));
            order.shuffle(&mut r);
        }
        let chosen: BTreeSet<usize> = order[..extra].iter().copied().collect();
        let mut refs = vec![self.reference];
        refs.extend(
            order[..extra]
                .iter()
                .map(|&i| Triple::new(self.queries[i].head, self.relation, self.queries[i].truth)),
        );
        let rest = self
            .queries
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(i))
            .map(|(_, q)| q)
            .collect();
        (refs, rest)
    }
}

/// Relation ids of each meta split plus the background relations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub meta_train: Vec<RelationId>,
    pub meta_valid: Vec<RelationId>,
    pub meta_test: Vec<RelationId>,
    pub background: Vec<RelationId>,
}

impl SplitManifest {
    pub fn split(&self, split: Split) -> &[RelationId] {
        match split {
            Split::Train => &self.meta_train,
            Split::Validation => &self.meta_valid,
            Split::Test => &self.meta_test,
        }
    }

    pub fn tasks(&self) -> impl Iterator<Item = RelationId> + '_ {
        self.meta_train
            .iter()
            .chain(&self.meta_valid)
            .chain(&self.meta_test)
            .copied()
    }

    pub fn split_of(&self, r: RelationId) -> Option<Split> {
        [Split::Train, Split::Validation, Split::Test]
            .into_iter()
            .find(|&s| self.split(s).contains(&r))
    }

    /// The three task lists and the background list are pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in self.tasks().chain(self.background.iter().copied()) {
            if !seen.insert(r) {
                return Err(Error::Data(format!("relation {r} appears in more than one manifest bucket")));
            }
        }
        Ok(())
    }
}

/// Relations whose triple count lies strictly inside `(lo, hi)`, in id order.
pub fn select_task_relations(triples: &[Triple], lo: usize, hi: usize) -> Result<Vec<RelationId>> {
    if lo >= hi {
        return Err(Error::Config(format!("frequency band ({lo}, {hi}) is empty")));
    }
    let mut counts: BTreeMap<RelationId, usize> = BTreeMap::new();
    for t in triples {
        *counts.entry(t.relation).or_insert(0) += 1;
    }
    let selected: Vec<_> = counts
        .into_iter()
        .filter(|&(_, c)| lo < c && c < hi)
        .map(|(r, _)| r)
        .collect();
    if selected.is_empty() {
        return Err(Error::Data(format!(
            "no relation has strictly between {lo} and {hi} triples; adjust the frequency band"
        )));
    }
    Ok(selected)
}

/// Relations to drop as inverses of another relation.
///
/// `(r, r')` is an inverse pair when at least `threshold` of r's `(h, t)` pairs
/// occur reversed under `r' != r`; the lexicographically larger name is dropped.
pub fn find_inverse_relations(triples: &[Triple], vocab: &Vocab, threshold: f64) -> BTreeSet<RelationId> {
    let mut pair_rels: HashMap<(EntityId, EntityId), BTreeSet<RelationId>> = HashMap::new();
    let mut pairs_of: BTreeMap<RelationId, BTreeSet<(EntityId, EntityId)>> = BTreeMap::new();
    for t in triples {
        pair_rels.entry((t.head, t.tail)).or_default().insert(t.relation);
        pairs_of.entry(t.relation).or_default().insert((t.head, t.tail));
    }
    let mut dropped = BTreeSet::new();
    for (&r, pairs) in &pairs_of {
        let mut reversed: BTreeMap<RelationId, usize> = BTreeMap::new();
        for &(h, t) in pairs {
            if let Some(rels) = pair_rels.get(&(t, h)) {
                for &other in rels.iter().filter(|&&o| o != r) {
                    *reversed.entry(other).or_insert(0) += 1;
                }
            }
        }
        for (other, n) in reversed {
            if n as f64 >= threshold * pairs.len() as f64 {
                let larger = if vocab.relation_name(r) > vocab.relation_name(other) { r } else { other };
                dropped.insert(larger);
            }
        }
    }
    dropped
}

/// How task relations are divided between the meta splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SplitPlan {
    /// Seeded shuffle, then sizes `[train, valid, test]`.
    Counts([usize; 3]),
    /// Seeded shuffle, then sizes proportional to the ratios (test takes the rest).
    Ratios([f64; 3]),
    /// Curated relation names per split.
    Explicit {
        train: Vec<String>,
        valid: Vec<String>,
        test: Vec<String>,
    },
}

/// Splits task relations under `plan`. Background relations are left empty.
pub fn partition_tasks(tasks: &[RelationId], plan: &SplitPlan, vocab: &Vocab, rng: &mut Rng) -> Result<SplitManifest> {
    let mut sorted = tasks.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let n = sorted.len();
    let counts = match plan {
        SplitPlan::Counts(c) => *c,
        SplitPlan::Ratios(r) => {
            if r.iter().any(|x| *x < 0.0) || r.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("split ratios must be non-negative and not all zero".into()));
            }
            let total: f64 = r.iter().sum();
            let train = (n as f64 * r[0] / total).round() as usize;
            let valid = ((n as f64 * r[1] / total).round() as usize).min(n - train.min(n));
            [train.min(n), valid, n - train.min(n) - valid]
        }
        SplitPlan::Explicit { train, valid, test } => {
            let lookup = |names: &[String]| -> Result<Vec<RelationId>> {
                names
                    .iter()
                    .map(|name| {
                        vocab
                            .relation(name)
                            .filter(|r| sorted.binary_search(r).is_ok())
                            .ok_or_else(|| Error::Data(format!("{name:?} is not a task relation")))
                    })
                    .collect()
            };
            let m = SplitManifest {
                meta_train: lookup(train)?,
                meta_valid: lookup(valid)?,
                meta_test: lookup(test)?,
                background: Vec::new(),
            };
            m.validate()?;
            if m.tasks().count() != n {
                return Err(Error::Data(format!(
                    "explicit split lists {} relations but there are {n} task relations",
                    m.tasks().count()
                )));
            }
            return Ok(m);
        }
    };
    if counts.iter().sum::<usize>() != n {
        return Err(Error::Config(format!(
            "split counts {counts:?} sum to {} but there are {n} task relations",
            counts.iter().sum::<usize>()
        )));
    }
    sorted.shuffle(rng);
    let (train, rest) = sorted.split_at(counts[0]);
    let (valid, test) = rest.split_at(counts[1]);
    Ok(SplitManifest {
        meta_train: train.to_vec(),
        meta_valid: valid.to_vec(),
        meta_test: test.to_vec(),
        background: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub band_lo: usize,
    pub band_hi: usize,
    pub split: SplitPlan,
    /// Derived from the run's master seed.
    #[serde(skip)]
    pub seed: u64,
    pub inverse_threshold: f64,
    pub candidate_floor: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            band_lo: 50,
            band_hi: 500,
            split: SplitPlan::Counts([51, 5, 11]),
            seed: 0,
            inverse_threshold: 0.95,
            candidate_floor: graph::DEFAULT_CANDIDATE_FLOOR,
        }
    }
}

/// Partitioned knowledge graph: background triples plus one-shot task sets.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub background: Vec<Triple>,
    pub manifest: SplitManifest,
    pub tasks: BTreeMap<RelationId, TaskSet>,
    pub seed: u64,
    pub dropped_inverse: Vec<RelationId>,
}

/// Read access to task sets, so callers can be audited.
pub trait TaskSource: Sync {
    fn task(&self, relation: RelationId) -> Option<&TaskSet>;
}

impl TaskSource for Dataset {
    fn task(&self, relation: RelationId) -> Option<&TaskSet> {
        self.tasks.get(&relation)
    }
}

/// Wraps a [`TaskSource`] and records every relation read through it.
pub struct AccessLog<'a, S: TaskSource> {
    inner: &'a S,
    log: Mutex<Vec<RelationId>>,
}

impl<'a, S: TaskSource> AccessLog<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        AccessLog {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn accessed(&self) -> BTreeSet<RelationId> {
        self.log.lock().expect("log lock").iter().copied().collect()
    }
}

impl<S: TaskSource> TaskSource for AccessLog<'_, S> {
    fn task(&self, relation: RelationId) -> Option<&TaskSet> {
        self.log.lock().expect("log lock").push(relation);
        self.inner.task(relation)
    }
}

/// Builds a dataset from raw triples.
///
/// Steps: drop exact duplicate triples, drop inverse relations, select task
/// relations by frequency band, split them, pick one reference per task and
/// attach type-constrained candidates to every remaining triple.
pub fn build_dataset(triples: &[Triple], vocab: &Vocab, config: &BuildConfig) -> Result<Dataset> {
    let mut seen = HashSet::new();
    let unique: Vec<Triple> = triples.iter().copied().filter(|t| seen.insert(*t)).collect();
    let dropped = find_inverse_relations(&unique, vocab, config.inverse_threshold);
    let kept: Vec<Triple> = unique.into_iter().filter(|t| !dropped.contains(&t.relation)).collect();

    let task_relations = select_task_relations(&kept, config.band_lo, config.band_hi)?;
    let mut rng = rng::seeded(config.seed);
    let mut manifest = partition_tasks(&task_relations, &config.split, vocab, &mut rng)?;
    let task_set: HashSet<RelationId> = manifest.tasks().collect();
    let present: BTreeSet<RelationId> = kept.iter().map(|t| t.relation).collect();
    manifest.background = present.into_iter().filter(|r| !task_set.contains(r)).collect();

    let mut by_relation: HashMap<RelationId, Vec<Triple>> = HashMap::new();
    for t in kept.iter().filter(|t| task_set.contains(&t.relation)) {
        by_relation.entry(t.relation).or_default().push(*t);
    }
    let mut tasks = BTreeMap::new();
    for r in manifest.tasks().collect::<Vec<_>>() {
        let rel_triples = &by_relation[&r];
        let observed: BTreeSet<EntityId> = rel_triples.iter().map(|t| t.tail).collect();
        let ref_idx = rng.gen_range(0..rel_triples.len());
        let mut queries = Vec::with_capacity(rel_triples.len() - 1);
        for (i, t) in rel_triples.iter().enumerate() {
            if i == ref_idx {
                continue;
            }
            let candidates = build_candidates(t.tail, vocab, &observed, config.candidate_floor, &mut rng);
            queries.push(Query {
                head: t.head,
                truth: t.tail,
                candidates,
            });
        }
        let task = TaskSet {
            relation: r,
            reference: rel_triples[ref_idx],
            queries,
        };
        task.validate()?;
        tasks.insert(r, task);
    }
    let background = kept.into_iter().filter(|t| !task_set.contains(&t.relation)).collect();
    Ok(Dataset {
        vocab: vocab.clone(),
        background,
        manifest,
        tasks,
        seed: config.seed,
        dropped_inverse: dropped.into_iter().collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    seed: u64,
    meta_train: Vec<String>,
    meta_validation: Vec<String>,
    meta_test: Vec<String>,
    background: Vec<String>,
    #[serde(default)]
    dropped_inverse: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct QueryRecord {
    head: String,
    truth: String,
    candidates: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TaskFile {
    relation: String,
    reference: [String; 3],
    queries: Vec<QueryRecord>,
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn to_json<T: Serialize>(value: &T, context: &str) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(context, e))?;
    s.push('\n');
    Ok(s)
}

impl Dataset {
    /// Neighbor index over the background triples.
    pub fn background_graph(&self, max_neighbors: usize, seed: u64) -> Result<graph::BackgroundGraph> {
        graph::build_neighbor_index(&self.background, self.vocab.num_entities(), max_neighbors, seed)
    }

    pub fn tasks_in(&self, split: Split) -> impl Iterator<Item = &TaskSet> {
        self.manifest.split(split).iter().filter_map(|r| self.tasks.get(r))
    }

    /// Total number of triples held by the task sets.
    pub fn task_triple_count(&self) -> usize {
        self.tasks.values().map(|t| 1 + t.queries.len()).sum()
    }

    /// Checks manifest disjointness, task validity and background purity.
    pub fn check_invariants(&self) -> Result<()> {
        self.manifest.validate()?;
        let task_rels: HashSet<RelationId> = self.manifest.tasks().collect();
        for r in &task_rels {
            let task = self
                .tasks
                .get(r)
                .ok_or_else(|| Error::Data(format!("manifest lists {r} without a task file")))?;
            task.validate()?;
        }
        if self.tasks.len() != task_rels.len() {
            return Err(Error::Data("task file for a relation missing from the manifest".into()));
        }
        if let Some(t) = self.background.iter().find(|t| task_rels.contains(&t.relation)) {
            return Err(Error::Data(format!("background contains task relation {}", t.relation)));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let tasks_dir = dir.join("tasks");
        fs::create_dir_all(&tasks_dir).map_err(|e| Error::io(tasks_dir.display().to_string(), e))?;
        let v = &self.vocab;

        let mut entities = String::new();
        for (i, name) in v.entity_names().enumerate() {
            entities.push_str(name);
            entities.push('\t');
            entities.push_str(v.entity_type(EntityId(i as u32)));
            entities.push('\n');
        }
        write_file(&dir.join("entities.tsv"), entities)?;
        let mut relations = String::new();
        for name in v.relation_names() {
            relations.push_str(name);
            relations.push('\n');
        }
        write_file(&dir.join("relations.txt"), relations)?;
        graph::write_triples(&dir.join("background.tsv"), &self.background, v)?;

        let names = |rs: &[RelationId]| rs.iter().map(|&r| v.relation_name(r).to_string()).collect();
        let manifest = ManifestFile {
            seed: self.seed,
            meta_train: names(&self.manifest.meta_train),
            meta_validation: names(&self.manifest.meta_valid),
            meta_test: names(&self.manifest.meta_test),
            background: names(&self.manifest.background),
            dropped_inverse: names(&self.dropped_inverse),
        };
        write_file(&dir.join("manifest.json"), to_json(&manifest, "manifest")?)?;

        for (i, r) in self.manifest.tasks().enumerate() {
            let task = &self.tasks[&r];
            let ename = |e: EntityId| v.entity_name(e).to_string();
            let file = TaskFile {
                relation: v.relation_name(r).to_string(),
                reference: [
                    ename(task.reference.head),
                    v.relation_name(r).to_string(),
                    ename(task.reference.tail),
                ],
                queries: task
                    .queries
                    .iter()
                    .map(|q| QueryRecord {
                        head: ename(q.head),
                        truth: ename(q.truth),
                        candidates: q.candidates.iter().map(|&c| ename(c)).collect(),
                    })
                    .collect(),
            };
            let path = tasks_dir.join(format!("{i:03}_{}.json", sanitize(v.relation_name(r))));
            write_file(&path, to_json(&file, "task file")?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let mut vocab = Vocab::new();
        let entities_path = dir.join("entities.tsv");
        for (i, line) in read_file(&entities_path)?.lines().enumerate() {
            let mut parts = line.split('\t');
            let (Some(name), Some(tag), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse {
                    path: entities_path.clone(),
                    line: i + 1,
                    message: "expected entity name and type tag".into(),
                });
            };
            let id = vocab.intern_entity(name);
            if id.index() != i {
                return Err(Error::Parse {
                    path: entities_path.clone(),
                    line: i + 1,
                    message: format!("duplicate entity {name:?}"),
                });
            }
            if vocab.entity_type(id) != tag {
                vocab.set_entity_type(id, tag);
            }
        }
        for name in read_file(&dir.join("relations.txt"))?.lines() {
            vocab.intern_relation(name);
        }
        let (n_ent, n_rel) = (vocab.num_entities(), vocab.num_relations());
        let background = graph::load_triples_into(&dir.join("background.tsv"), &mut vocab)?;
        if vocab.num_entities() != n_ent || vocab.num_relations() != n_rel {
            return Err(Error::Data("background.tsv names symbols missing from the vocabulary".into()));
        }

        let manifest_path = dir.join("manifest.json");
        let mf: ManifestFile = serde_json::from_str(&read_file(&manifest_path)?)
            .map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
        let rel = |name: &str| {
            vocab
                .relation(name)
                .ok_or_else(|| Error::Data(format!("unknown relation {name:?}")))
        };
        let ent = |name: &str| {
            vocab
                .entity(name)
                .ok_or_else(|| Error::Data(format!("unknown entity {name:?}")))
        };
        let rels = |names: &[String]| names.iter().map(|n| rel(n)).collect::<Result<Vec<_>>>();
        let manifest = SplitManifest {
            meta_train: rels(&mf.meta_train)?,
            meta_valid: rels(&mf.meta_validation)?,
            meta_test: rels(&mf.meta_test)?,
            background: rels(&mf.background)?,
        };

        let mut tasks = BTreeMap::new();
        let tasks_dir = dir.join("tasks");
        let mut files: Vec<_> = fs::read_dir(&tasks_dir)
            .map_err(|e| Error::io(tasks_dir.display().to_string(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for path in files {
            let tf: TaskFile = serde_json::from_str(&read_file(&path)?)
                .map_err(|e| Error::json(path.display().to_string(), e))?;
            let r = rel(&tf.relation)?;
            if rel(&tf.reference[1])? != r {
                return Err(Error::Data(format!("{}: reference relation differs from task", path.display())));
            }
            let queries = tf
                .queries
                .iter()
                .map(|q| {
                    Ok(Query {
                        head: ent(&q.head)?,
                        truth: ent(&q.truth)?,
                        candidates: q.candidates.iter().map(|c| ent(c)).collect::<Result<_>>()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let task = TaskSet {
                relation: r,
                reference: Triple::new(ent(&tf.reference[0])?, r, ent(&tf.reference[2])?),
                queries,
            };
            if tasks.insert(r, task).is_some() {
                return Err(Error::Data(format!("two task files for relation {:?}", tf.relation)));
            }
        }
        let dropped_inverse = rels(&mf.dropped_inverse)?;
        let ds = Dataset {
            vocab,
            background,
            manifest,
            tasks,
            seed: mf.seed,
            dropped_inverse,
        };
        ds.check_invariants()?;
        Ok(ds)
    }
}
