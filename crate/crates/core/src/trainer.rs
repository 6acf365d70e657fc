//! Episodic one-shot meta-training.
//!
//! Each epoch shuffles the meta-train tasks and runs one episode per task: pick a
//! reference triple, a batch of other triples as positives, pollute each
//! positive's tail to get a negative, sum the hinge losses and take one Adam
//! step. Every `eval_interval` steps the matcher is ranked on the validation
//! tasks and the parameters with the best Hits@10 are kept.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{TaskSet, TaskSource};
use crate::diff::{Adam, AdamConfig, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, evaluate, EvalOptions, MatcherScorer, Metrics};
use crate::graph::{BackgroundGraph, EntityId, RelationId, Triple, Vocab};
use crate::matcher::Matcher;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Upper bound on passes over the meta-train tasks.
    pub epochs: usize,
    /// Upper bound on optimizer steps (one per episode).
    pub max_episodes: u64,
    pub batch_size: usize,
    pub margin: f64,
    pub adam: AdamConfig,
    /// Master seed; episodes and task order use streams derived from it.
    #[serde(skip)]
    pub seed: u64,
    pub eval_interval: u64,
    /// Stop after this many evaluations without a new best Hits@10.
    pub patience: usize,
    pub eval_workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100_000,
            max_episodes: 50_000,
            batch_size: 128,
            margin: 5.0,
            adam: AdamConfig::default(),
            seed: 0,
            eval_interval: 500,
            patience: 10,
            eval_workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.max_episodes == 0 || self.batch_size == 0 || self.eval_interval == 0 || self.patience == 0 {
            return Err(Error::Config("training counts must all be positive".into()));
        }
        if self.margin <= 0.0 || self.adam.lr <= 0.0 {
            return Err(Error::Config("margin and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Triples and negative-sampling pool of one meta-train relation.
#[derive(Clone, Debug)]
pub struct TrainingPool {
    pub relation: RelationId,
    pub triples: Vec<Triple>,
    /// Type-consistent tails to draw negatives from.
    pub candidates: Vec<EntityId>,
    true_tails: HashMap<EntityId, HashSet<EntityId>>,
}

impl TrainingPool {
    pub fn from_task(task: &TaskSet) -> Self {
        let triples = task.triples();
        let mut true_tails: HashMap<EntityId, HashSet<EntityId>> = HashMap::new();
        for t in &triples {
            true_tails.entry(t.head).or_default().insert(t.tail);
        }
        let candidates: BTreeSet<EntityId> = task
            .queries
            .iter()
            .flat_map(|q| q.candidates.iter().copied())
            .chain(std::iter::once(task.reference.tail))
            .collect();
        TrainingPool {
            relation: task.relation,
            triples,
            candidates: candidates.into_iter().collect(),
            true_tails,
        }
    }

    pub fn is_true(&self, t: &Triple) -> bool {
        self.true_tails.get(&t.head).is_some_and(|s| s.contains(&t.tail))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub relation: RelationId,
    pub reference: Triple,
    pub positives: Vec<Triple>,
    pub negatives: Vec<Triple>,
}

/// Samples an episode; `None` when the task has fewer than two triples or no
/// false tail exists for some positive.
pub fn sample_episode(pool: &TrainingPool, batch_size: usize, num_entities: usize, rng: &mut Rng) -> Option<Episode> {
    let n = pool.triples.len();
    if n < 2 {
        return None;
    }
    let ref_idx = rng.gen_range(0..n);
    let others: Vec<usize> = (0..n).filter(|&i| i != ref_idx).collect();
    let take = batch_size.min(others.len());
    let mut picked = sample(rng, others.len(), take).into_vec();
    picked.sort_unstable();
    let positives: Vec<Triple> = picked.into_iter().map(|i| pool.triples[others[i]]).collect();
    let mut negatives = Vec::with_capacity(positives.len());
    for p in &positives {
        let truths = &pool.true_tails[&p.head];
        let allowed: Vec<EntityId> = pool.candidates.iter().copied().filter(|c| !truths.contains(c)).collect();
        let tail = if let Some(&t) = allowed.choose(rng) {
            t
        } else {
            let fallback: Vec<EntityId> = (0..num_entities as u32)
                .map(EntityId)
                .filter(|c| !truths.contains(c))
                .collect();
            *fallback.choose(rng)?
        };
        negatives.push(Triple::new(p.head, p.relation, tail));
    }
    Some(Episode {
        relation: pool.relation,
        reference: pool.triples[ref_idx],
        positives,
        negatives,
    })
}

/// Keeps the step with the highest validation Hits@10. Equal Hits@10 is
/// broken by MRR; exact ties keep the earlier step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BestTracker {
    pub best_step: Option<u64>,
    pub best_hits10: f64,
    pub best_mrr: f64,
    pub since_best: usize,
}

impl BestTracker {
    /// Records an evaluation; returns true when it is a new best.
    pub fn observe(&mut self, step: u64, hits10: f64, mrr: f64) -> bool {
        let better = hits10 > self.best_hits10 || (hits10 == self.best_hits10 && mrr > self.best_mrr);
        if self.best_step.is_none() || better {
            self.best_step = Some(step);
            self.best_hits10 = hits10;
            self.best_mrr = mrr;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }
}

/// Loss of one episode on a fresh tape; gradients are accumulated into the
/// matcher's parameters when `backprop` is set.
pub fn episode_loss(
    matcher: &mut Matcher,
    graph: &BackgroundGraph,
    episode: &Episode,
    margin: f64,
    rng: &mut Rng,
    backprop: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = {
        let mut f = matcher.forward(&mut tape, graph, true, rng);
        let s = f.pair(episode.reference.head, episode.reference.tail)?;
        let mut terms = Vec::with_capacity(episode.positives.len());
        for (p, n) in episode.positives.iter().zip(&episode.negatives) {
            let qp = f.pair(p.head, p.tail)?;
            let qn = f.pair(n.head, n.tail)?;
            let sp = f.match_score(s, qp)?;
            let sn = f.match_score(s, qn)?;
            terms.push(f.hinge(sp, sn, margin)?);
        }
        f.tape.sum(&terms)?
    };
    let value = tape.scalar(loss);
    if backprop {
        tape.backward(loss, &mut matcher.params)?;
    }
    Ok(value)
}

/// Everything training reads besides the matcher itself.
pub struct TrainContext<'a, S: TaskSource + ?Sized> {
    pub source: &'a S,
    pub vocab: &'a Vocab,
    pub graph: &'a BackgroundGraph,
    pub train_relations: &'a [RelationId],
    pub valid_relations: &'a [RelationId],
    /// Directory for `train_log.jsonl` and the `last` / `best` checkpoints.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: u64,
    pub best_step: Option<u64>,
    pub best_validation: Option<Metrics>,
    /// Loss of every episode run by this call, in order.
    pub loss_trace: Vec<f64>,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Progress {
    step: u64,
    epoch: usize,
    position: usize,
    tracker: BestTracker,
    best_validation: Option<Metrics>,
}

/// Validation metrics of `matcher` on `relations` (dropout off).
pub fn validate<S: TaskSource + ?Sized>(
    matcher: &Matcher,
    source: &S,
    graph: &BackgroundGraph,
    relations: &[RelationId],
    workers: usize,
) -> Result<Metrics> {
    let scorer = MatcherScorer { matcher, graph };
    let opts = EvalOptions {
        workers,
        ..EvalOptions::default()
    };
    let results = evaluate(source, relations, &scorer, &opts)?;
    let ranks: Vec<usize> = results.iter().map(|q| q.rank).collect();
    compute_metrics(&ranks)
}

fn open_log(dir: &Path, resume_step: Option<u64>) -> Result<BufWriter<File>> {
    let path = dir.join("train_log.jsonl");
    // lines written after the resumed checkpoint are replayed, so drop them
    let kept = match resume_step {
        Some(step) if path.exists() => fs::read_to_string(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .lines()
            .filter(|line| {
                serde_json::from_str::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| v["step"].as_u64())
                    .is_some_and(|s| s <= step)
            })
            .map(|line| format!("{line}\n"))
            .collect(),
        _ => String::new(),
    };
    fs::write(&path, kept).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file = OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(BufWriter::new(file))
}

fn write_line(log: &mut Option<BufWriter<File>>, value: serde_json::Value) -> Result<()> {
    if let Some(w) = log {
        writeln!(w, "{value}").map_err(|e| Error::io("training log", e))?;
    }
    Ok(())
}

fn snapshot(params: &ParamSet) -> Vec<Tensor> {
    params.iter().map(|(_, p)| p.value.clone()).collect()
}

fn restore(params: &mut ParamSet, values: &[Tensor]) {
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for (id, v) in ids.into_iter().zip(values) {
        params.get_mut(id).value = v.clone();
    }
}

fn save_state(
    base: &Path,
    matcher: &Matcher,
    adam: &Adam,
    best: Option<&Vec<Tensor>>,
    progress: &Progress,
) -> Result<()> {
    let mut extra = adam.state_tensors(&matcher.params);
    if let Some(best) = best {
        for ((_, p), v) in matcher.params.iter().zip(best) {
            extra.push((format!("best.{}", p.name), v.clone()));
        }
    }
    let meta = json!({
        "progress": progress,
        "adam_steps": adam.steps_taken(),
    });
    matcher.save(base, extra, meta)
}

/// Runs meta-training. With `resume`, state is restored from a `last`
/// checkpoint written by an earlier call with the same configuration.
pub fn train<S: TaskSource + ?Sized>(
    ctx: &TrainContext<'_, S>,
    matcher: &mut Matcher,
    config: &TrainConfig,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let pools: Vec<TrainingPool> = ctx
        .train_relations
        .iter()
        .map(|&r| {
            ctx.source
                .task(r)
                .map(TrainingPool::from_task)
                .ok_or_else(|| Error::Data(format!("no task file for meta-train relation {r}")))
        })
        .collect::<Result<_>>()?;
    if pools.iter().all(|p| p.triples.len() < 2) {
        return Err(Error::Data("no meta-train task has two or more triples".into()));
    }

    let mut adam = Adam::new(config.adam.clone(), &matcher.params);
    let mut progress = Progress {
        step: 0,
        epoch: 0,
        position: 0,
        tracker: BestTracker::default(),
        best_validation: None,
    };
    let mut best_params: Option<Vec<Tensor>> = None;
    if let Some(base) = resume {
        let (loaded, ck) = Matcher::load(base)?;
        if loaded.config != matcher.config {
            return Err(Error::Config("resume checkpoint was trained with another matcher config".into()));
        }
        let ids: Vec<_> = loaded.params.iter().map(|(id, p)| (id, p.value.clone())).collect();
        for (id, v) in ids {
            matcher.params.get_mut(id).value = v;
        }
        progress = serde_json::from_value(ck.metadata["run"]["progress"].clone())
            .map_err(|e| Error::json("resume progress", e))?;
        let steps = ck.metadata["run"]["adam_steps"].as_u64().unwrap_or(progress.step);
        adam.restore(&matcher.params, steps, |name| ck.get(name).cloned())?;
        if progress.tracker.best_step.is_some() {
            let mut best = Vec::new();
            for (_, p) in matcher.params.iter() {
                let name = format!("best.{}", p.name);
                best.push(ck.get(&name).cloned().ok_or_else(|| Error::Data(format!("checkpoint lacks {name}")))?);
            }
            best_params = Some(best);
        }
    }

    let mut log = match &ctx.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            Some(open_log(dir, resume.map(|_| progress.step))?)
        }
        None => None,
    };
    let episode_stream = rng::derive_seed(config.seed, rng::EPISODES);
    let order_stream = rng::derive_seed(config.seed, "task-order");
    let num_entities = matcher.num_entities();
    let mut trace = Vec::new();
    let mut stopped_early = false;

    'epochs: while progress.epoch < config.epochs && progress.step < config.max_episodes {
        let mut order: Vec<usize> = (0..pools.len()).collect();
        order.shuffle(&mut rng::seeded(rng::indexed_seed(order_stream, progress.epoch as u64)));
        while progress.position < order.len() {
            let pool = &pools[order[progress.position]];
            progress.position += 1;
            let mut ep_rng = rng::seeded(rng::indexed_seed(episode_stream, progress.step));
            let Some(episode) = sample_episode(pool, config.batch_size, num_entities, &mut ep_rng) else {
                continue;
            };
            matcher.params.zero_grads();
            let loss = episode_loss(matcher, ctx.graph, &episode, config.margin, &mut ep_rng, true).map_err(|e| {
                let msg = format!(
                    "step {} relation {}: {e}",
                    progress.step + 1,
                    ctx.vocab.relation_name(pool.relation)
                );
                if let Some(dir) = &ctx.out_dir {
                    let dump = json!({
                        "step": progress.step + 1,
                        "relation": ctx.vocab.relation_name(pool.relation),
                        "error": e.to_string(),
                        "reference": [episode.reference.head.0, episode.reference.tail.0],
                    });
                    let _ = fs::write(dir.join("diagnostic.json"), dump.to_string());
                }
                Error::NonFinite(msg)
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("episode loss at step {}", progress.step + 1)));
            }
            let lr = adam.step(&mut matcher.params);
            progress.step += 1;
            trace.push(loss);
            write_line(
                &mut log,
                json!({"step": progress.step, "relation": ctx.vocab.relation_name(pool.relation), "loss": loss, "lr": lr}),
            )?;

            if progress.step.is_multiple_of(config.eval_interval) {
                let m = validate(matcher, ctx.source, ctx.graph, ctx.valid_relations, config.eval_workers)?;
                write_line(
                    &mut log,
                    json!({"step": progress.step, "mrr": m.mrr, "hits1": m.hits1, "hits5": m.hits5, "hits10": m.hits10}),
                )?;
                if progress.tracker.observe(progress.step, m.hits10, m.mrr) {
                    best_params = Some(snapshot(&matcher.params));
                    progress.best_validation = Some(m);
                    if let Some(dir) = &ctx.out_dir {
                        matcher.save(&dir.join("best"), Vec::new(), json!({"step": progress.step, "validation": m}))?;
                    }
                }
                if let Some(dir) = &ctx.out_dir {
                    save_state(&dir.join("last"), matcher, &adam, best_params.as_ref(), &progress)?;
                }
                if progress.tracker.since_best >= config.patience {
                    stopped_early = true;
                    break 'epochs;
                }
            }
            if progress.step >= config.max_episodes {
                break 'epochs;
            }
        }
        progress.epoch += 1;
        progress.position = 0;
    }
    if let Some(w) = &mut log {
        w.flush().map_err(|e| Error::io("training log", e))?;
    }
    if let Some(best) = &best_params {
        restore(&mut matcher.params, best);
    }
    Ok(TrainOutcome {
        steps: progress.step,
        best_step: progress.tracker.best_step,
        best_validation: progress.best_validation,
        loss_trace: trace,
        stopped_early,
    })
}
