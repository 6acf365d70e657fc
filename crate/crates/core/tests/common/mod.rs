//! Checks shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use gmatch::dataset::{Dataset, Split};
use gmatch::diff::{Shape, Tape, Tensor};
use gmatch::embeddings::random_table;
use gmatch::eval::{compute_metrics, rank_candidates};
use gmatch::graph::{BackgroundGraph, EntityId, RelationId, Triple};
use gmatch::matcher::{hinge_loss, Matcher, MatcherConfig, LSTM_BIAS, LSTM_W_INPUT, LSTM_W_RECURRENT};
use gmatch::rng::{self, Rng};
use gmatch::trainer::{episode_loss, Episode};
use rand::seq::SliceRandom;
use rand::Rng as _;
use sha2::{Digest, Sha256};

pub const N_ENT: usize = 30;
pub const N_REL: usize = 6;

/// Matcher over a random table plus a random background graph.
pub fn small_setup(config: MatcherConfig, seed: u64) -> (Matcher, BackgroundGraph) {
    let table = random_table(N_ENT, N_REL, config.dim, seed).unwrap();
    let mut r = rng::seeded(seed ^ 0x5eed);
    let matcher = Matcher::new(config, &table, &mut r).unwrap();
    let lists = (0..N_ENT)
        .map(|e| {
            let n = if e % 7 == 0 { 0 } else { r.gen_range(1..6) };
            (0..n)
                .map(|_| {
                    (
                        RelationId(r.gen_range(0..N_REL as u32)),
                        EntityId(r.gen_range(0..N_ENT as u32)),
                    )
                })
                .collect()
        })
        .collect();
    (matcher, BackgroundGraph::from_lists(lists, 50).unwrap())
}

pub fn cfg(dim: usize, hidden: usize, steps: usize) -> MatcherConfig {
    MatcherConfig {
        dim,
        hidden,
        steps,
        ..MatcherConfig::default()
    }
}

fn random_tuples(r: &mut Rng, len: usize) -> Vec<(RelationId, EntityId)> {
    (0..len)
        .map(|_| {
            (
                RelationId(r.gen_range(0..N_REL as u32)),
                EntityId(r.gen_range(0..N_ENT as u32)),
            )
        })
        .collect()
}

fn encode(m: &Matcher, graph: &BackgroundGraph, tuples: &[(RelationId, EntityId)]) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut r = rng::seeded(0);
    let mut f = m.forward(&mut tape, graph, false, &mut r);
    let v = f.encode_neighbor_list(tuples).unwrap();
    f.tape.value(v).data().to_vec()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_vec(r: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn score(m: &Matcher, s: &[f64], q: &[f64]) -> f64 {
    m.score_vectors(s, q).unwrap()
}

/// Largest deviation of the encoder output under neighbor permutation.
pub fn permutation_deviation(cases: usize, seed: u64) -> f64 {
    let (m, g) = small_setup(cfg(8, 8, 2), seed);
    let mut r = rng::seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let len = r.gen_range(1..20);
        let tuples = random_tuples(&mut r, len);
        let mut shuffled = tuples.clone();
        shuffled.shuffle(&mut r);
        worst = worst.max(max_abs_diff(&encode(&m, &g, &tuples), &encode(&m, &g, &shuffled)));
    }
    worst
}

/// (max deviation with scaling on, min deviation with scaling off) when every
/// neighbor is listed twice.
pub fn duplication_deviation(cases: usize, seed: u64) -> (f64, f64) {
    let (on, g) = small_setup(cfg(8, 8, 2), seed);
    let mut off_cfg = cfg(8, 8, 2);
    off_cfg.use_scaling_factor = false;
    let (off, _) = small_setup(off_cfg, seed);
    let mut r = rng::seeded(seed);
    let (mut worst_on, mut least_off) = (0.0f64, f64::INFINITY);
    for _ in 0..cases {
        let len = r.gen_range(1..10);
        let tuples = random_tuples(&mut r, len);
        let doubled: Vec<_> = tuples.iter().chain(&tuples).copied().collect();
        worst_on = worst_on.max(max_abs_diff(&encode(&on, &g, &tuples), &encode(&on, &g, &doubled)));
        least_off = least_off.min(max_abs_diff(&encode(&off, &g, &tuples), &encode(&off, &g, &doubled)));
    }
    (worst_on, least_off)
}

/// Range of match scores over random pairs, processor on and off.
pub fn score_range(cases: usize, seed: u64) -> (f64, f64) {
    let (m, _) = small_setup(cfg(8, 12, 3), seed);
    let mut plain = cfg(8, 12, 3);
    plain.use_matching_processor = false;
    let (p, _) = small_setup(plain, seed);
    let mut r = rng::seeded(seed);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..cases {
        let scale = 10f64.powi(r.gen_range(-3..4));
        let s: Vec<f64> = random_vec(&mut r, 16).iter().map(|x| x * scale).collect();
        let q = random_vec(&mut r, 16);
        for v in [score(&m, &s, &q), score(&p, &s, &q)] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

/// Max |match_score - cos(q, s)| when every cell weight and bias is zero.
pub fn zero_cell_deviation(cases: usize, seed: u64) -> f64 {
    let (mut m, _) = small_setup(cfg(8, 8, 2), seed);
    for name in [LSTM_W_INPUT, LSTM_W_RECURRENT, LSTM_BIAS] {
        let shape = m.params.get(m.param_id(name).unwrap()).value.shape();
        m.set_param(name, Tensor::zeros(shape)).unwrap();
    }
    let mut r = rng::seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let s = random_vec(&mut r, 16);
        let q = random_vec(&mut r, 16);
        let expect = gmatch::diff::cosine(&q, &s).unwrap();
        worst = worst.max((score(&m, &s, &q) - expect).abs());
    }
    worst
}

/// Hinge is nonnegative on random scores and zero once the margin is met.
pub fn hinge_ok(cases: usize, seed: u64) -> bool {
    let mut r = rng::seeded(seed);
    let random_ok = (0..cases).all(|_| {
        let (p, n) = (r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
        hinge_loss(p, n, 5.0) >= 0.0
    });
    let satisfied = [(1.0, -1.0, 2.0), (0.9, -0.2, 1.0), (6.0, 0.5, 5.0), (0.5, 0.5, 0.0)]
        .iter()
        .all(|&(p, n, g)| hinge_loss(p, n, g) == 0.0);
    let active = (hinge_loss(0.2, 0.1, 5.0) - 4.9).abs() < 1e-12;
    random_ok && satisfied && active
}

/// Position of the truth in a full descending sort where ties sort ahead of it.
pub fn brute_force_rank(truth: usize, scores: &[f64]) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| (a == truth).cmp(&(b == truth)))
    });
    order.iter().position(|&i| i == truth).unwrap() + 1
}

fn tied_scores(r: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| f64::from(r.gen_range(0..5u8)) * 0.25 - 0.5).collect()
}

/// Queries (≤ 12 candidates, heavy ties) where the rank disagrees with sorting.
pub fn rank_oracle_mismatches(cases: usize, seed: u64) -> usize {
    let mut r = rng::seeded(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let n = r.gen_range(2..=12);
        let scores = tied_scores(&mut r, n);
        let cands: Vec<EntityId> = (0..n as u32).map(EntityId).collect();
        let t = r.gen_range(0..n);
        if rank_candidates(cands[t], &cands, &scores).unwrap() != brute_force_rank(t, &scores) {
            bad += 1;
        }
    }
    bad
}

/// Queries whose rank changes under strictly increasing score transforms.
pub fn monotone_mismatches(cases: usize, seed: u64) -> usize {
    let transforms: [fn(f64) -> f64; 3] = [|x| x.exp(), |x| x * x * x + x, |x| 3.0 * x - 7.0];
    let mut r = rng::seeded(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let n = r.gen_range(2..=30);
        let scores = tied_scores(&mut r, n);
        let cands: Vec<EntityId> = (0..n as u32).map(EntityId).collect();
        let t = r.gen_range(0..n);
        let base = rank_candidates(cands[t], &cands, &scores).unwrap();
        for f in transforms {
            let mapped: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            if rank_candidates(cands[t], &cands, &mapped).unwrap() != base {
                bad += 1;
            }
        }
    }
    bad
}

pub fn mrr_fixture() -> f64 {
    compute_metrics(&[1, 2, 4]).unwrap().mrr
}

/// Max relative error per parameter group between backprop and central differences.
#[derive(Debug, Default)]
pub struct GradReport {
    pub max_rel: BTreeMap<&'static str, f64>,
    pub coords: usize,
}

// Five-point central stencil: truncation O(h^4), rounding ~eps*|L|/h.
const FD_STEP: f64 = 1e-3;

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        // both effectively zero; compare absolutely
        if (a - n).abs() < 1e-9 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (a - n).abs() / scale
    }
}

fn random_episode(r: &mut Rng) -> Episode {
    let rel = RelationId(0);
    let mut t = || Triple::new(EntityId(r.gen_range(1..N_ENT as u32)), rel, EntityId(r.gen_range(1..N_ENT as u32)));
    let reference = t();
    let positives: Vec<Triple> = (0..3).map(|_| t()).collect();
    let negatives: Vec<Triple> = (0..3).map(|_| t()).collect();
    Episode {
        relation: rel,
        reference,
        positives,
        negatives,
    }
}

/// Finite-difference check of every parameter group (d=8, H=8, K=2).
pub fn gradient_check(instances: usize, seed: u64) -> GradReport {
    let mut report = GradReport::default();
    let groups: [(&'static str, &str); 7] = [
        ("W_c", gmatch::matcher::W_C),
        ("b_c", gmatch::matcher::B_C),
        ("lstm.w_input", LSTM_W_INPUT),
        ("lstm.w_recurrent", LSTM_W_RECURRENT),
        ("lstm.bias", LSTM_BIAS),
        ("entity rows", gmatch::matcher::ENTITY_EMB),
        ("relation rows", gmatch::matcher::RELATION_EMB),
    ];
    let mut r = rng::seeded(seed);
    for inst in 0..instances {
        let (mut m, g) = small_setup(cfg(8, 8, 2), seed.wrapping_add(inst as u64));
        let ep = random_episode(&mut r);
        let dropout_seed = r.gen::<u64>();
        m.params.zero_grads();
        episode_loss(&mut m, &g, &ep, 5.0, &mut rng::seeded(dropout_seed), true).unwrap();
        for (label, name) in groups {
            let id = m.param_id(name).unwrap();
            let analytic = m.params.get(id).grad.clone();
            let shape = m.params.get(id).value.shape();
            let coords: Vec<usize> = match shape {
                Shape::Matrix(_, cols) if label.ends_with("rows") => {
                    let touched: BTreeSet<usize> = (0..analytic.len())
                        .filter(|&i| analytic[i] != 0.0)
                        .map(|i| i / cols)
                        .collect();
                    touched.iter().flat_map(|&row| row * cols..(row + 1) * cols).collect()
                }
                _ => (0..analytic.len()).collect(),
            };
            let worst = report.max_rel.entry(label).or_insert(0.0);
            for i in coords {
                let orig = m.params.get(id).value.data()[i];
                let mut eval = |x: f64| {
                    m.params.get_mut(id).value.data_mut()[i] = x;
                    episode_loss(&mut m, &g, &ep, 5.0, &mut rng::seeded(dropout_seed), false).unwrap()
                };
                let h = FD_STEP;
                let numeric = (-eval(orig + 2.0 * h) + 8.0 * eval(orig + h) - 8.0 * eval(orig - h) + eval(orig - 2.0 * h)) / (12.0 * h);
                m.params.get_mut(id).value.data_mut()[i] = orig;
                *worst = worst.max(rel_err(analytic[i], numeric));
                report.coords += 1;
            }
        }
    }
    report
}

/// Relation counts over a triple list.
pub fn relation_counts(triples: &[Triple]) -> HashMap<RelationId, usize> {
    let mut c = HashMap::new();
    for t in triples {
        *c.entry(t.relation).or_insert(0) += 1;
    }
    c
}

pub struct Invariant {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// Builder invariants checked by brute force against the raw input.
pub fn dataset_invariants(raw: &[Triple], ds: &Dataset, lo: usize, hi: usize, max_neighbors: usize) -> Vec<Invariant> {
    let unique: BTreeSet<Triple> = raw.iter().copied().collect();
    let dropped: HashSet<RelationId> = ds.dropped_inverse.iter().copied().collect();
    let kept: Vec<Triple> = unique.iter().copied().filter(|t| !dropped.contains(&t.relation)).collect();
    let counts = relation_counts(&kept);
    let tasks: HashSet<RelationId> = ds.manifest.tasks().collect();

    let band_ok = counts.iter().all(|(r, &n)| (lo < n && n < hi) == tasks.contains(r));
    let task_sizes: Vec<usize> = tasks.iter().map(|r| counts.get(r).copied().unwrap_or(0)).collect();

    let lists = [
        &ds.manifest.meta_train,
        &ds.manifest.meta_valid,
        &ds.manifest.meta_test,
        &ds.manifest.background,
    ];
    let mut disjoint = true;
    for i in 0..lists.len() {
        for j in i + 1..lists.len() {
            disjoint &= lists[i].iter().all(|r| !lists[j].contains(r));
        }
    }
    disjoint &= ds.tasks.keys().all(|r| ds.manifest.split_of(*r).is_some());

    let task_total: usize = ds.tasks.values().map(|t| t.triples().len()).sum();
    let conserved = ds.background.len() + task_total == kept.len();

    let bg: HashSet<Triple> = ds.background.iter().copied().collect();
    let task_triples: Vec<Triple> = ds.tasks.values().flat_map(|t| t.triples()).collect();
    let graph = ds.background_graph(max_neighbors, 0).unwrap();
    let graph_clean = (0..ds.vocab.num_entities())
        .all(|e| graph.neighbors(EntityId(e as u32)).iter().all(|(r, _)| !tasks.contains(r)));
    let separated = task_triples.iter().all(|t| !bg.contains(t))
        && ds.background.iter().all(|t| !tasks.contains(&t.relation))
        && graph_clean;

    vec![
        Invariant {
            name: "strict frequency band",
            pass: band_ok && !tasks.is_empty(),
            detail: format!(
                "{} task relations, sizes {}..{} in ({lo},{hi})",
                tasks.len(),
                task_sizes.iter().min().unwrap_or(&0),
                task_sizes.iter().max().unwrap_or(&0)
            ),
        },
        Invariant {
            name: "disjoint splits",
            pass: disjoint,
            detail: format!(
                "{}/{}/{} tasks, {} background relations",
                lists[0].len(),
                lists[1].len(),
                lists[2].len(),
                lists[3].len()
            ),
        },
        Invariant {
            name: "triple conservation",
            pass: conserved,
            detail: format!("{} background + {} task = {} kept", ds.background.len(), task_total, kept.len()),
        },
        Invariant {
            name: "background/task disjointness",
            pass: separated,
            detail: format!("{} task triples scanned against background and neighbor index", task_triples.len()),
        },
    ]
}

/// SHA-256 over every file under `dir`, keyed by relative path.
pub fn hash_tree(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = Sha256::digest(fs::read(&p).unwrap());
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, format!("{digest:x}"));
            }
        }
    }
    out
}

pub fn split_sizes(ds: &Dataset) -> [usize; 3] {
    [Split::Train, Split::Validation, Split::Test].map(|s| ds.manifest.split(s).len())
}
