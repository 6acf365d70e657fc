//! Neighbor encoder and recurrent matching processor.
//!
//! An entity `e` is represented by its one-hop neighbors `N_e`:
//!
//! ```text
//! f(N_e) = tanh( 1/|N_e| * sum_{(r, e') in N_e} (W_c [v_r ; v_e'] + b_c) )
//! ```
//!
//! A pair `(h, t)` becomes `[f(N_h) ; f(N_t)]`. The query pair `q` is compared
//! with the reference pair `s` over `K` steps of an LSTM cell:
//!
//! ```text
//! h'_{k+1}, c_{k+1} = LSTM(q, [h_k ; s], c_k)
//! h_{k+1}           = h'_{k+1} + q
//! score_{k+1}       = cos(h_{k+1}, s)
//! ```
//!
//! and `score_K` is the similarity. The cell's hidden width `H` may differ from
//! `2d`; its output is truncated or zero-padded to `2d` before the residual.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::{glorot_uniform, lstm_cell, Checkpoint, LstmVars, ParamId, ParamSet, Shape, Tape, Tensor, Var};
use crate::embeddings::{EmbeddingTable, TableMeta};
use crate::error::{Error, Result};
use crate::graph::{BackgroundGraph, EntityId, RelationId};
use crate::rng::Rng;

/// Matcher hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    /// Embedding width `d`.
    pub dim: usize,
    /// LSTM hidden width `H`.
    pub hidden: usize,
    /// Processing steps `K`.
    pub steps: usize,
    pub dropout: f64,
    pub use_neighbor_encoder: bool,
    pub use_matching_processor: bool,
    pub use_scaling_factor: bool,
    /// Keep embedding rows fixed during matcher training.
    pub freeze_embeddings: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            dim: 100,
            hidden: 200,
            steps: 2,
            dropout: 0.3,
            use_neighbor_encoder: true,
            use_matching_processor: true,
            use_scaling_factor: true,
            freeze_embeddings: false,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::Config("dim and hidden must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("at least one processing step is required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Length of a pair representation.
    pub fn pair_dim(&self) -> usize {
        2 * self.dim
    }
}

#[derive(Clone, Copy, Debug)]
struct Ids {
    w_c: ParamId,
    b_c: ParamId,
    w_input: ParamId,
    w_recurrent: ParamId,
    bias: ParamId,
    entity: ParamId,
    relation: ParamId,
}

pub const W_C: &str = "encoder.w_c";
pub const B_C: &str = "encoder.b_c";
pub const LSTM_W_INPUT: &str = "lstm.w_input";
pub const LSTM_W_RECURRENT: &str = "lstm.w_recurrent";
pub const LSTM_BIAS: &str = "lstm.bias";
pub const ENTITY_EMB: &str = "emb.entity";
pub const RELATION_EMB: &str = "emb.relation";

/// Parameters of the metric model together with its embedding table.
#[derive(Clone, Debug)]
pub struct Matcher {
    pub config: MatcherConfig,
    pub params: ParamSet,
    pub table_meta: TableMeta,
    ids: Ids,
}

/// Hinge loss `max(0, margin + score_neg - score_pos)`.
pub fn hinge_loss(score_pos: f64, score_neg: f64, margin: f64) -> f64 {
    (margin + score_neg - score_pos).max(0.0)
}

impl Matcher {
    /// Fresh parameters: Glorot-uniform matrices, zero biases, forget-gate bias 1.
    pub fn new(config: MatcherConfig, table: &EmbeddingTable, rng: &mut Rng) -> Result<Matcher> {
        config.validate()?;
        if table.dim() != config.dim {
            return Err(Error::Shape {
                op: "matcher",
                shapes: format!("table dimension {} vs configured {}", table.dim(), config.dim),
            });
        }
        let (d, h) = (config.dim, config.hidden);
        let mut params = ParamSet::new();
        let w_c = params.add(W_C, glorot_uniform(d, 2 * d, rng), true)?;
        let b_c = params.add(B_C, Tensor::zeros(Shape::Vector(d)), true)?;
        let w_input = params.add(LSTM_W_INPUT, glorot_uniform(4 * h, 2 * d, rng), true)?;
        let w_recurrent = params.add(LSTM_W_RECURRENT, glorot_uniform(4 * h, 4 * d, rng), true)?;
        let mut b = vec![0.0; 4 * h];
        b[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
        let bias = params.add(LSTM_BIAS, Tensor::vector(b), true)?;
        let trainable = !config.freeze_embeddings;
        let entity = params.add(ENTITY_EMB, table.entity.clone(), trainable)?;
        let relation = params.add(RELATION_EMB, table.relation.clone(), trainable)?;
        Ok(Matcher {
            config,
            params,
            table_meta: table.meta.clone(),
            ids: Ids {
                w_c,
                b_c,
                w_input,
                w_recurrent,
                bias,
                entity,
                relation,
            },
        })
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    /// Replaces a parameter value (same shape required).
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        let p = self.params.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                shapes: format!("{} vs {}", p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn num_entities(&self) -> usize {
        self.params.get(self.ids.entity).value.shape().rows()
    }

    /// Starts a forward pass on `tape`.
    pub fn forward<'a>(&'a self, tape: &'a mut Tape, graph: &'a BackgroundGraph, train: bool, rng: &'a mut Rng) -> Forward<'a> {
        Forward {
            matcher: self,
            tape,
            graph,
            train,
            rng,
            cache: HashMap::new(),
        }
    }

    /// Saves parameters and metadata; `extra` tensors (e.g. optimizer state) are appended.
    pub fn save(&self, base: &Path, extra: Vec<(String, Tensor)>, metadata: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "table": self.table_meta,
            "run": metadata,
        });
        let mut ck = Checkpoint::new(meta);
        for (_, p) in self.params.iter() {
            ck.push(p.name.clone(), p.value.clone());
        }
        for (name, t) in extra {
            ck.push(name, t);
        }
        ck.save(base)
    }

    /// Loads a matcher checkpoint; returns the matcher and the full checkpoint.
    pub fn load(base: &Path) -> Result<(Matcher, Checkpoint)> {
        let ck = Checkpoint::load(base)?;
        let config: MatcherConfig = serde_json::from_value(ck.metadata["config"].clone())
            .map_err(|e| Error::json("matcher config", e))?;
        let table_meta: TableMeta =
            serde_json::from_value(ck.metadata["table"].clone()).map_err(|e| Error::json("table metadata", e))?;
        let take = |name: &str| {
            ck.get(name)
                .cloned()
                .ok_or_else(|| Error::Data(format!("matcher checkpoint lacks {name}")))
        };
        let table = EmbeddingTable {
            entity: take(ENTITY_EMB)?,
            relation: take(RELATION_EMB)?,
            meta: table_meta,
        };
        let mut m = Matcher::new(config, &table, &mut crate::rng::seeded(0))?;
        for name in [W_C, B_C, LSTM_W_INPUT, LSTM_W_RECURRENT, LSTM_BIAS] {
            m.set_param(name, take(name)?)?;
        }
        Ok((m, ck))
    }
}

/// Cache of inference-time entity encodings keyed by entity id.
pub type EncodingCache = HashMap<EntityId, Vec<f64>>;

/// One forward computation over a tape, caching entity encodings per pass.
pub struct Forward<'a> {
    matcher: &'a Matcher,
    pub tape: &'a mut Tape,
    graph: &'a BackgroundGraph,
    train: bool,
    rng: &'a mut Rng,
    cache: HashMap<EntityId, Var>,
}

impl Forward<'_> {
    fn check_entity(&self, e: EntityId) -> Result<()> {
        if e.index() >= self.matcher.num_entities() || e.index() >= self.graph.num_entities() {
            return Err(Error::Contract(format!("entity {e} outside the vocabulary")));
        }
        Ok(())
    }

    /// `f(N_e)`, or the raw embedding when the neighbor encoder is disabled.
    pub fn encode(&mut self, e: EntityId) -> Result<Var> {
        self.check_entity(e)?;
        if let Some(&v) = self.cache.get(&e) {
            return Ok(v);
        }
        let m = self.matcher;
        let cfg = &m.config;
        let v = if !cfg.use_neighbor_encoder {
            let row = self.tape.gather(m.ids.entity, &m.params, &[e.index()])?;
            self.tape.sum_rows(row)?
        } else {
            let neighbors = self.graph.neighbors(e);
            if neighbors.is_empty() {
                self.tape.constant(Tensor::zeros(Shape::Vector(cfg.dim)))?
            } else {
                let rels: Vec<usize> = neighbors.iter().map(|(r, _)| r.index()).collect();
                let ents: Vec<usize> = neighbors.iter().map(|(_, x)| x.index()).collect();
                self.encode_tuples(&rels, &ents)?
            }
        };
        self.cache.insert(e, v);
        Ok(v)
    }

    /// Encodes an explicit list of `(relation, entity)` tuples, bypassing the graph.
    pub fn encode_neighbor_list(&mut self, tuples: &[(RelationId, EntityId)]) -> Result<Var> {
        if tuples.is_empty() {
            return self.tape.constant(Tensor::zeros(Shape::Vector(self.matcher.config.dim)));
        }
        let rels: Vec<usize> = tuples.iter().map(|(r, _)| r.index()).collect();
        let ents: Vec<usize> = tuples.iter().map(|(_, x)| x.index()).collect();
        self.encode_tuples(&rels, &ents)
    }

    fn encode_tuples(&mut self, rels: &[usize], ents: &[usize]) -> Result<Var> {
        let m = self.matcher;
        let cfg = &m.config;
        let vr = self.tape.gather(m.ids.relation, &m.params, rels)?;
        let ve = self.tape.gather(m.ids.entity, &m.params, ents)?;
        let vr = self.tape.dropout(vr, cfg.dropout, self.train, self.rng)?;
        let ve = self.tape.dropout(ve, cfg.dropout, self.train, self.rng)?;
        let x = self.tape.concat(vr, ve)?;
        let w = self.tape.param(m.ids.w_c, &m.params)?;
        let b = self.tape.param(m.ids.b_c, &m.params)?;
        let c = self.tape.affine(w, x, Some(b))?;
        let pooled = if cfg.use_scaling_factor {
            self.tape.mean_rows(c)?
        } else {
            self.tape.sum_rows(c)?
        };
        self.tape.tanh(pooled)
    }

    /// `[f(N_h) ; f(N_t)]`.
    pub fn pair(&mut self, h: EntityId, t: EntityId) -> Result<Var> {
        let a = self.encode(h)?;
        let b = self.encode(t)?;
        self.tape.concat(a, b)
    }

    /// Similarity of query pair `q` to support pair `s`.
    pub fn match_score(&mut self, support: Var, query: Var) -> Result<Var> {
        let m = self.matcher;
        let cfg = &m.config;
        let n = cfg.pair_dim();
        for v in [support, query] {
            if self.tape.shape(v) != Shape::Vector(n) {
                return Err(Error::Shape {
                    op: "match_score",
                    shapes: format!("{} vs expected [{n}]", self.tape.shape(v)),
                });
            }
        }
        if !cfg.use_matching_processor {
            return self.tape.cosine(query, support);
        }
        let lstm = LstmVars {
            w_input: self.tape.param(m.ids.w_input, &m.params)?,
            w_recurrent: self.tape.param(m.ids.w_recurrent, &m.params)?,
            bias: self.tape.param(m.ids.bias, &m.params)?,
        };
        let mut h = self.tape.constant(Tensor::zeros(Shape::Vector(n)))?;
        let mut c = self.tape.constant(Tensor::zeros(Shape::Vector(cfg.hidden)))?;
        let mut score = None;
        for _ in 0..cfg.steps {
            let rec = self.tape.concat(h, support)?;
            let (h_out, c_next) = lstm_cell(self.tape, query, rec, c, &lstm)?;
            let h_fit = if cfg.hidden == n { h_out } else { self.tape.fit(h_out, n)? };
            h = self.tape.add(h_fit, query)?;
            c = c_next;
            score = Some(self.tape.cosine(h, support)?);
        }
        Ok(score.expect("steps >= 1"))
    }

    /// `max(0, margin + score_neg - score_pos)` on the tape.
    pub fn hinge(&mut self, score_pos: Var, score_neg: Var, margin: f64) -> Result<Var> {
        let diff = self.tape.sub(score_neg, score_pos)?;
        let shifted = self.tape.add_scalar(diff, margin)?;
        self.tape.relu(shifted)
    }
}

impl Matcher {
    fn encoding(&self, e: EntityId, graph: &BackgroundGraph, cache: &mut EncodingCache) -> Result<Vec<f64>> {
        if let Some(v) = cache.get(&e) {
            return Ok(v.clone());
        }
        let mut tape = Tape::new();
        let mut rng = crate::rng::seeded(0);
        let v = {
            let mut fwd = self.forward(&mut tape, graph, false, &mut rng);
            let v = fwd.encode(e)?;
            fwd.tape.value(v).data().to_vec()
        };
        cache.insert(e, v.clone());
        Ok(v)
    }

    /// Inference-time pair representation using a shared encoding cache.
    pub fn pair_vector(&self, h: EntityId, t: EntityId, graph: &BackgroundGraph, cache: &mut EncodingCache) -> Result<Vec<f64>> {
        let mut v = self.encoding(h, graph, cache)?;
        v.extend(self.encoding(t, graph, cache)?);
        Ok(v)
    }

    /// Inference-time match score between precomputed pair vectors.
    pub fn score_vectors(&self, support: &[f64], query: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let graph = BackgroundGraph::from_lists(Vec::new(), 1)?;
        let mut rng = crate::rng::seeded(0);
        let mut fwd = self.forward(&mut tape, &graph, false, &mut rng);
        let s = fwd.tape.constant(Tensor::vector(support.to_vec()))?;
        let q = fwd.tape.constant(Tensor::vector(query.to_vec()))?;
        let score = fwd.match_score(s, q)?;
        Ok(fwd.tape.scalar(score))
    }

    /// Scores of `(head, c)` for every candidate `c`, one row per reference pair.
    pub fn score_candidates(
        &self,
        graph: &BackgroundGraph,
        references: &[(EntityId, EntityId)],
        head: EntityId,
        candidates: &[EntityId],
        cache: &mut EncodingCache,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(references.len());
        for &(h0, t0) in references {
            let s = self.pair_vector(h0, t0, graph, cache)?;
            let row = candidates
                .iter()
                .map(|&c| {
                    let q = self.pair_vector(head, c, graph, cache)?;
                    self.score_vectors(&s, &q)
                })
                .collect::<Result<Vec<f64>>>()?;
            out.push(row);
        }
        Ok(out)
    }
}
