//! Triples, vocabularies, the background graph and type-constrained candidates.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Dense entity index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub u32);

/// Dense relation index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

/// Default type tag of an entity name: the second `:`-separated segment
/// (`concept:sport:tennis` has type `sport`). Names with fewer than two
/// segments share the empty tag.
pub fn default_type_tag(name: &str) -> &str {
    let mut parts = name.split(':');
    match (parts.next(), parts.next()) {
        (Some(_), Some(tag)) => tag,
        _ => "",
    }
}

/// Bijective name/id maps for entities and relations plus per-entity type tags.
#[derive(Clone, Debug, Default)]
pub struct Vocab {
    entities: Vec<String>,
    entity_ids: HashMap<String, EntityId>,
    relations: Vec<String>,
    relation_ids: HashMap<String, RelationId>,
    types: Vec<String>,
    by_type: BTreeMap<String, Vec<EntityId>>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Id of `name`, assigning the next dense id on first appearance.
    pub fn intern_entity(&mut self, name: &str) -> EntityId {
        if let Some(&id) = self.entity_ids.get(name) {
            return id;
        }
        let id = EntityId(self.entities.len() as u32);
        self.entities.push(name.to_string());
        self.entity_ids.insert(name.to_string(), id);
        let tag = default_type_tag(name).to_string();
        self.by_type.entry(tag.clone()).or_default().push(id);
        self.types.push(tag);
        id
    }

    pub fn intern_relation(&mut self, name: &str) -> RelationId {
        if let Some(&id) = self.relation_ids.get(name) {
            return id;
        }
        let id = RelationId(self.relations.len() as u32);
        self.relations.push(name.to_string());
        self.relation_ids.insert(name.to_string(), id);
        id
    }

    pub fn entity(&self, name: &str) -> Option<EntityId> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation(&self, name: &str) -> Option<RelationId> {
        self.relation_ids.get(name).copied()
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities[id.index()]
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        &self.relations[id.index()]
    }

    pub fn entity_type(&self, id: EntityId) -> &str {
        &self.types[id.index()]
    }

    pub fn entities_of_type(&self, tag: &str) -> &[EntityId] {
        self.by_type.get(tag).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn entity_names(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().map(String::as_str)
    }

    pub fn relation_names(&self) -> impl Iterator<Item = &str> {
        self.relations.iter().map(String::as_str)
    }

    /// Overrides the type tag of one entity.
    pub fn set_entity_type(&mut self, id: EntityId, tag: &str) {
        let old = std::mem::replace(&mut self.types[id.index()], tag.to_string());
        if let Some(list) = self.by_type.get_mut(&old) {
            list.retain(|&e| e != id);
            if list.is_empty() {
                self.by_type.remove(&old);
            }
        }
        let list = self.by_type.entry(tag.to_string()).or_default();
        let pos = list.partition_point(|&e| e < id);
        list.insert(pos, id);
    }

    /// Applies an entity-type sidecar: `entity<TAB>type` per line. Entities the
    /// vocabulary does not know are ignored.
    pub fn apply_type_sidecar(&mut self, path: &Path) -> Result<usize> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut applied = 0;
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected 2 tab-separated fields, found {}", fields.len()),
                });
            }
            if let Some(id) = self.entity(fields[0]) {
                self.set_entity_type(id, fields[1]);
                applied += 1;
            }
        }
        Ok(applied)
    }
}

fn parse_triple_line(line: &str, vocab: &mut Vocab) -> std::result::Result<Triple, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(format!(
            "expected 3 tab-separated fields (head, relation, tail), found {}",
            fields.len()
        ));
    }
    if fields.iter().any(|f| f.is_empty()) {
        return Err("empty field".to_string());
    }
    let head = vocab.intern_entity(fields[0]);
    let relation = vocab.intern_relation(fields[1]);
    let tail = vocab.intern_entity(fields[2]);
    Ok(Triple::new(head, relation, tail))
}

/// Reads a tab-separated triple file, assigning ids in first-appearance order.
pub fn load_triples(path: &Path) -> Result<(Vec<Triple>, Vocab)> {
    let mut vocab = Vocab::new();
    let triples = load_triples_into(path, &mut vocab)?;
    Ok((triples, vocab))
}

/// Like [`load_triples`] but extends an existing vocabulary.
pub fn load_triples_into(path: &Path, vocab: &mut Vocab) -> Result<Vec<Triple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut triples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let triple = parse_triple_line(line, vocab).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        triples.push(triple);
    }
    if triples.is_empty() {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    Ok(triples)
}

/// Writes triples in the tab-separated text format.
pub fn write_triples(path: &Path, triples: &[Triple], vocab: &Vocab) -> Result<()> {
    let mut out = String::new();
    for t in triples {
        out.push_str(vocab.entity_name(t.head));
        out.push('\t');
        out.push_str(vocab.relation_name(t.relation));
        out.push('\t');
        out.push_str(vocab.entity_name(t.tail));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// One-hop `(relation, entity)` lists over the background relations.
#[derive(Clone, Debug)]
pub struct BackgroundGraph {
    neighbors: Vec<Vec<(RelationId, EntityId)>>,
    raw_degree: Vec<usize>,
    max_neighbors: usize,
}

impl BackgroundGraph {
    pub fn num_entities(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        &self.neighbors[e.index()]
    }

    /// Number of stored neighbors (after capping).
    pub fn degree(&self, e: EntityId) -> usize {
        self.neighbors[e.index()].len()
    }

    /// Out-degree in the background triples before capping.
    pub fn raw_degree(&self, e: EntityId) -> usize {
        self.raw_degree[e.index()]
    }

    pub fn max_neighbors(&self) -> usize {
        self.max_neighbors
    }

    /// `degree -> number of entities` over uncapped out-degrees.
    pub fn degree_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for &d in &self.raw_degree {
            *hist.entry(d).or_insert(0) += 1;
        }
        hist
    }

    /// True when any stored neighbor uses `relation`.
    pub fn uses_relation(&self, relation: RelationId) -> bool {
        self.neighbors
            .iter()
            .any(|list| list.iter().any(|&(r, _)| r == relation))
    }

    /// Builds the graph from an already loaded adjacency (used by tests and
    /// checkpoints); lists longer than `max_neighbors` are rejected.
    pub fn from_lists(lists: Vec<Vec<(RelationId, EntityId)>>, max_neighbors: usize) -> Result<Self> {
        if let Some(l) = lists.iter().find(|l| l.len() > max_neighbors) {
            return Err(Error::Contract(format!(
                "neighbor list of length {} exceeds cap {max_neighbors}",
                l.len()
            )));
        }
        let raw_degree = lists.iter().map(Vec::len).collect();
        Ok(BackgroundGraph {
            neighbors: lists,
            raw_degree,
            max_neighbors,
        })
    }
}

/// Builds capped one-hop neighbor lists `N_e = {(r, e') | (e, r, e') in G'}`.
///
/// Entities over the cap keep a uniform sample without replacement, drawn once
/// here under `seed`; kept entries retain their file order.
pub fn build_neighbor_index(
    triples: &[Triple],
    num_entities: usize,
    max_neighbors: usize,
    seed: u64,
) -> Result<BackgroundGraph> {
    if max_neighbors == 0 {
        return Err(Error::Config("max_neighbors must be positive".into()));
    }
    let mut full: Vec<Vec<(RelationId, EntityId)>> = vec![Vec::new(); num_entities];
    for t in triples {
        if t.head.index() >= num_entities || t.tail.index() >= num_entities {
            return Err(Error::Contract(format!(
                "triple ({}, {}, {}) references an entity outside 0..{num_entities}",
                t.head, t.relation, t.tail
            )));
        }
        full[t.head.index()].push((t.relation, t.tail));
    }
    let raw_degree: Vec<usize> = full.iter().map(Vec::len).collect();
    let mut rng = rng::seeded(seed);
    let neighbors = full
        .into_iter()
        .map(|list| {
            if list.len() <= max_neighbors {
                list
            } else {
                let mut keep = sample(&mut rng, list.len(), max_neighbors).into_vec();
                keep.sort_unstable();
                keep.into_iter().map(|i| list[i]).collect()
            }
        })
        .collect();
    Ok(BackgroundGraph {
        neighbors,
        raw_degree,
        max_neighbors,
    })
}

/// Minimum candidate-set size; smaller type matches are padded with random entities.
pub const DEFAULT_CANDIDATE_FLOOR: usize = 20;

/// Type-constrained candidate tails for `(head, relation, ?)`.
///
/// Candidates are every entity sharing a type tag with some observed tail of the
/// relation, plus `truth`, sorted by id. When that yields fewer than `floor`
/// entities (including the no-observed-tails case), uniformly sampled entities
/// are added until the floor or the vocabulary size is reached.
pub fn build_candidates(
    truth: EntityId,
    vocab: &Vocab,
    observed_tails: &BTreeSet<EntityId>,
    floor: usize,
    rng: &mut Rng,
) -> Vec<EntityId> {
    let tags: BTreeSet<&str> = observed_tails.iter().map(|&t| vocab.entity_type(t)).collect();
    let mut set: BTreeSet<EntityId> = tags
        .into_iter()
        .flat_map(|tag| vocab.entities_of_type(tag).iter().copied())
        .collect();
    set.insert(truth);
    let target = floor.min(vocab.num_entities());
    while set.len() < target {
        set.insert(EntityId(rng.gen_range(0..vocab.num_entities() as u32)));
    }
    set.into_iter().collect()
}

/// Candidate lists keyed by `(head, relation)`.
#[derive(Clone, Debug, Default)]
pub struct CandidateIndex {
    lists: HashMap<(EntityId, RelationId), Vec<EntityId>>,
}

impl CandidateIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a candidate list after checking truth membership, uniqueness and size.
    pub fn insert(
        &mut self,
        head: EntityId,
        relation: RelationId,
        truth: EntityId,
        candidates: Vec<EntityId>,
    ) -> Result<()> {
        check_candidates(truth, &candidates)?;
        self.lists.insert((head, relation), candidates);
        Ok(())
    }

    pub fn get(&self, head: EntityId, relation: RelationId) -> Option<&[EntityId]> {
        self.lists.get(&(head, relation)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }
}

pub(crate) fn check_candidates(truth: EntityId, candidates: &[EntityId]) -> Result<()> {
    if !candidates.contains(&truth) {
        return Err(Error::Contract(format!("ground truth {truth} missing from candidates")));
    }
    if candidates.len() < 2 {
        return Err(Error::Contract("a query needs at least 2 candidates".into()));
    }
    let unique: HashSet<_> = candidates.iter().collect();
    if unique.len() != candidates.len() {
        return Err(Error::Contract("duplicate candidate entities".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_two_triples() {
        let f = write_tmp("a\tr1\tb\nb\tr1\tc\n");
        let (triples, vocab) = load_triples(f.path()).unwrap();
        assert_eq!(triples.len(), 2);
        assert_eq!(vocab.num_entities(), 3);
        assert_eq!(vocab.num_relations(), 1);
        assert_eq!(vocab.entity("a"), Some(EntityId(0)));
        assert_eq!(vocab.entity("c"), Some(EntityId(2)));
    }

    #[test]
    fn arity_violation_names_line() {
        let f = write_tmp("a\tr1\n");
        match load_triples(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write_tmp("a\tr\tb\nx\ty\tz\tw\n");
        match load_triples(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_tmp("");
        assert!(matches!(load_triples(f.path()), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn type_tags() {
        assert_eq!(default_type_tag("concept:sport:tennis"), "sport");
        assert_eq!(default_type_tag("Q42"), "");
        let mut v = Vocab::new();
        let a = v.intern_entity("concept:sport:tennis");
        let b = v.intern_entity("concept:city:paris");
        v.set_entity_type(b, "sport");
        assert_eq!(v.entities_of_type("sport"), &[a, b]);
        assert!(v.entities_of_type("city").is_empty());
    }

    fn star(center: u32, n: u32) -> Vec<Triple> {
        (0..n)
            .map(|i| Triple::new(EntityId(center), RelationId(i % 3), EntityId(center + 1 + i)))
            .collect()
    }

    #[test]
    fn neighbor_cap() {
        let mut triples = star(0, 3);
        triples.extend(star(10, 80));
        let g = build_neighbor_index(&triples, 100, 50, 9).unwrap();
        assert_eq!(g.degree(EntityId(0)), 3);
        assert_eq!(g.degree(EntityId(10)), 50);
        assert_eq!(g.raw_degree(EntityId(10)), 80);
        let all: HashSet<_> = star(10, 80).iter().map(|t| (t.relation, t.tail)).collect();
        let kept: HashSet<_> = g.neighbors(EntityId(10)).iter().copied().collect();
        assert_eq!(kept.len(), 50);
        assert!(kept.is_subset(&all));
        assert_eq!(g.degree(EntityId(99)), 0);

        let again = build_neighbor_index(&triples, 100, 50, 9).unwrap();
        assert_eq!(g.neighbors(EntityId(10)), again.neighbors(EntityId(10)));
    }

    fn typed_vocab() -> Vocab {
        let mut v = Vocab::new();
        for i in 0..123 {
            v.intern_entity(&format!("concept:sport:s{i}"));
        }
        for i in 0..40 {
            v.intern_entity(&format!("concept:city:c{i}"));
        }
        v
    }

    #[test]
    fn candidates_follow_type_constraint() {
        let v = typed_vocab();
        let mut rng = rng::seeded(1);
        let observed: BTreeSet<_> = [EntityId(0), EntityId(5)].into_iter().collect();
        let c = build_candidates(EntityId(5), &v, &observed, 20, &mut rng);
        assert_eq!(c.len(), 123);
        assert!(c.windows(2).all(|w| w[0] < w[1]));

        // truth of a non-matching type is still present
        let truth = v.entity("concept:city:c3").unwrap();
        let c = build_candidates(truth, &v, &observed, 20, &mut rng);
        assert_eq!(c.len(), 124);
        assert!(c.contains(&truth));
    }

    #[test]
    fn candidates_single_type_cover_vocab() {
        let mut v = Vocab::new();
        for i in 0..30 {
            v.intern_entity(&format!("Q{i}"));
        }
        let observed: BTreeSet<_> = [EntityId(3)].into_iter().collect();
        let c = build_candidates(EntityId(3), &v, &observed, 20, &mut rng::seeded(0));
        assert_eq!(c.len(), 30);
    }

    #[test]
    fn candidate_floor_padding() {
        let mut v = typed_vocab();
        let lone = v.intern_entity("concept:planet:earth");
        let observed: BTreeSet<_> = [lone].into_iter().collect();
        let c = build_candidates(lone, &v, &observed, 20, &mut rng::seeded(3));
        assert_eq!(c.len(), 20);
        assert!(c.contains(&lone));

        let c = build_candidates(lone, &v, &BTreeSet::new(), 20, &mut rng::seeded(3));
        assert_eq!(c.len(), 20);
        assert!(c.contains(&lone));
    }

    #[test]
    fn candidate_index_contract() {
        let mut idx = CandidateIndex::new();
        let (h, r) = (EntityId(0), RelationId(0));
        assert!(idx.insert(h, r, EntityId(1), vec![EntityId(2), EntityId(3)]).is_err());
        assert!(idx.insert(h, r, EntityId(1), vec![EntityId(1)]).is_err());
        assert!(idx
            .insert(h, r, EntityId(1), vec![EntityId(1), EntityId(2), EntityId(2)])
            .is_err());
        idx.insert(h, r, EntityId(1), vec![EntityId(1), EntityId(2)]).unwrap();
        assert_eq!(idx.get(h, r).unwrap().len(), 2);
    }
}
