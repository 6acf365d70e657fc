//! Baseline knowledge-graph embedding models and export to per-symbol vectors.
//!
//! The matcher consumes an [`EmbeddingTable`]: one `d`-vector per entity and per
//! relation. Models whose native relation form is not a vector are flattened by
//! [`export_vectors`]: RESCAL relation matrices are mean-pooled row-wise and
//! ComplEx vectors are the concatenation of real and imaginary parts.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::diff::{dot, glorot_uniform, sigmoid, Checkpoint, Shape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{EntityId, RelationId, Triple};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    TransE,
    DistMult,
    ComplEx,
    Rescal,
    /// Untrained, seeded random vectors.
    Random,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Ok(ModelKind::TransE),
            "distmult" => Ok(ModelKind::DistMult),
            "complex" => Ok(ModelKind::ComplEx),
            "rescal" => Ok(ModelKind::Rescal),
            "random" => Ok(ModelKind::Random),
            other => Err(Error::Config(format!("unknown embedding model {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::TransE => "transe",
            ModelKind::DistMult => "distmult",
            ModelKind::ComplEx => "complex",
            ModelKind::Rescal => "rescal",
            ModelKind::Random => "random",
        })
    }
}

/// Which triples an embedding table was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Background relations only; input for the matcher.
    Matcher,
    /// Background, all meta-train task triples and the evaluation references.
    Baseline,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matcher" => Ok(Regime::Matcher),
            "baseline" => Ok(Regime::Baseline),
            other => Err(Error::Config(format!("unknown training regime {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    Tail,
    Head,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegSampleSpec {
    pub per_positive: usize,
    pub mode: Corruption,
}

impl Default for NegSampleSpec {
    fn default() -> Self {
        NegSampleSpec {
            per_positive: 2,
            mode: Corruption::Tail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub model: ModelKind,
    pub dim: usize,
    pub epochs: usize,
    pub negatives: NegSampleSpec,
    /// Margin of the ranking loss (TransE, RESCAL).
    pub margin: f64,
    /// L2 weight on the vectors touched by each update.
    pub l2: f64,
    /// Adagrad step size.
    pub lr: f64,
    /// Derived from the run's master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            model: ModelKind::TransE,
            dim: 100,
            epochs: 1000,
            negatives: NegSampleSpec::default(),
            margin: 1.0,
            l2: 1e-4,
            lr: 0.05,
            seed: 0,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if self.epochs == 0 && self.model != ModelKind::Random {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.negatives.per_positive == 0 {
            return Err(Error::Config("need at least one negative per positive".into()));
        }
        if self.model == ModelKind::ComplEx && !self.dim.is_multiple_of(2) {
            return Err(Error::Config("ComplEx needs an even dimension (real and imaginary halves)".into()));
        }
        Ok(())
    }
}

/// Provenance recorded alongside every table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub model: ModelKind,
    pub dim: usize,
    pub regime: Option<Regime>,
    pub seed: u64,
    pub epochs: usize,
    /// Set for RESCAL exports.
    pub pooling_axis: Option<String>,
}

/// Native parameters of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub enum NativeParams {
    TransE { entity: Tensor, relation: Tensor },
    DistMult { entity: Tensor, relation: Tensor },
    /// Real and imaginary parts, each of rank `d / 2`.
    ComplEx {
        entity_re: Tensor,
        entity_im: Tensor,
        relation_re: Tensor,
        relation_im: Tensor,
    },
    /// Relation row `r` holds the `d x d` matrix `M_r` row-major.
    Rescal { entity: Tensor, relation: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct KgModel {
    pub params: NativeParams,
    pub meta: TableMeta,
}

/// Unified per-symbol vectors consumed by the matcher.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub entity: Tensor,
    pub relation: Tensor,
    pub meta: TableMeta,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn entity_vec(&self, e: EntityId) -> &[f64] {
        self.entity.row(e.index())
    }

    pub fn relation_vec(&self, r: RelationId) -> &[f64] {
        self.relation.row(r.index())
    }

    pub fn num_entities(&self) -> usize {
        self.entity.shape().rows()
    }

    pub fn num_relations(&self) -> usize {
        self.relation.shape().rows()
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(meta_json(&self.meta)?);
        ck.push("export.entity", self.entity.clone());
        ck.push("export.relation", self.relation.clone());
        ck.save(base)
    }

    /// Loads the exported vectors from a table checkpoint (written by
    /// [`EmbeddingTable::save`] or [`KgModel::save`]).
    pub fn load(base: &Path) -> Result<EmbeddingTable> {
        let ck = Checkpoint::load(base)?;
        let meta: TableMeta = serde_json::from_value(ck.metadata.clone())
            .map_err(|e| Error::json("embedding table metadata", e))?;
        let take = |name: &str| {
            ck.get(name)
                .cloned()
                .ok_or_else(|| Error::Data(format!("table checkpoint lacks {name}")))
        };
        let table = EmbeddingTable {
            entity: take("export.entity")?,
            relation: take("export.relation")?,
            meta,
        };
        if table.entity.shape().cols() != table.meta.dim || table.relation.shape().cols() != table.meta.dim {
            return Err(Error::Data("table dimension disagrees with metadata".into()));
        }
        Ok(table)
    }
}

fn meta_json(meta: &TableMeta) -> Result<serde_json::Value> {
    serde_json::to_value(meta).map_err(|e| Error::json("embedding table metadata", e))
}

fn init_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    glorot_uniform(rows, cols, rng)
}

fn normalize_row(row: &mut [f64]) {
    let n = dot(row, row).sqrt();
    if n > 0.0 {
        row.iter_mut().for_each(|x| *x /= n);
    }
}

/// Seeded random table with Glorot-uniform entries.
pub fn random_table(num_entities: usize, num_relations: usize, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let mut r = rng::seeded(seed);
    Ok(EmbeddingTable {
        entity: init_matrix(num_entities, dim, &mut r),
        relation: init_matrix(num_relations, dim, &mut r),
        meta: TableMeta {
            model: ModelKind::Random,
            dim,
            regime: None,
            seed,
            epochs: 0,
            pooling_axis: None,
        },
    })
}

impl KgModel {
    pub fn kind(&self) -> ModelKind {
        self.meta.model
    }

    fn init(kind: ModelKind, n_ent: usize, n_rel: usize, dim: usize, rng: &mut Rng) -> Result<NativeParams> {
        Ok(match kind {
            ModelKind::TransE => {
                let mut entity = init_matrix(n_ent, dim, rng);
                for i in 0..n_ent {
                    normalize_row(entity.row_mut(i));
                }
                let mut relation = init_matrix(n_rel, dim, rng);
                for i in 0..n_rel {
                    normalize_row(relation.row_mut(i));
                }
                NativeParams::TransE { entity, relation }
            }
            ModelKind::DistMult => NativeParams::DistMult {
                entity: init_matrix(n_ent, dim, rng),
                relation: init_matrix(n_rel, dim, rng),
            },
            ModelKind::ComplEx => {
                let half = dim / 2;
                NativeParams::ComplEx {
                    entity_re: init_matrix(n_ent, half, rng),
                    entity_im: init_matrix(n_ent, half, rng),
                    relation_re: init_matrix(n_rel, half, rng),
                    relation_im: init_matrix(n_rel, half, rng),
                }
            }
            ModelKind::Rescal => {
                let entity = init_matrix(n_ent, dim, rng);
                let bound = (6.0 / (2 * dim) as f64).sqrt();
                let data = (0..n_rel * dim * dim).map(|_| rng.gen_range(-bound..=bound)).collect();
                NativeParams::Rescal {
                    entity,
                    relation: Tensor::matrix(n_rel, dim * dim, data)?,
                }
            }
            ModelKind::Random => {
                return Err(Error::Config("the random table is not a trainable model".into()))
            }
        })
    }

    /// Plausibility of `(h, r, t)`; higher is more plausible.
    pub fn score(&self, h: EntityId, r: RelationId, t: EntityId) -> f64 {
        let (h, r, t) = (h.index(), r.index(), t.index());
        match &self.params {
            NativeParams::TransE { entity, relation } => transe_score(entity.row(h), relation.row(r), entity.row(t)),
            NativeParams::DistMult { entity, relation } => {
                distmult_score(entity.row(h), relation.row(r), entity.row(t))
            }
            NativeParams::ComplEx {
                entity_re,
                entity_im,
                relation_re,
                relation_im,
            } => complex_score(
                (entity_re.row(h), entity_im.row(h)),
                (relation_re.row(r), relation_im.row(r)),
                (entity_re.row(t), entity_im.row(t)),
            ),
            NativeParams::Rescal { entity, relation } => rescal_score(entity.row(h), relation.row(r), entity.row(t)),
        }
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        let table = export_vectors(self)?;
        let mut ck = Checkpoint::new(meta_json(&table.meta)?);
        match &self.params {
            NativeParams::TransE { entity, relation }
            | NativeParams::DistMult { entity, relation }
            | NativeParams::Rescal { entity, relation } => {
                ck.push("native.entity", entity.clone());
                ck.push("native.relation", relation.clone());
            }
            NativeParams::ComplEx {
                entity_re,
                entity_im,
                relation_re,
                relation_im,
            } => {
                ck.push("native.entity_re", entity_re.clone());
                ck.push("native.entity_im", entity_im.clone());
                ck.push("native.relation_re", relation_re.clone());
                ck.push("native.relation_im", relation_im.clone());
            }
        }
        ck.push("export.entity", table.entity);
        ck.push("export.relation", table.relation);
        ck.save(base)
    }

    pub fn load(base: &Path) -> Result<KgModel> {
        let ck = Checkpoint::load(base)?;
        let mut meta: TableMeta =
            serde_json::from_value(ck.metadata.clone()).map_err(|e| Error::json("embedding metadata", e))?;
        // the stored metadata describes the export; pooling applies only there
        meta.pooling_axis = None;
        let take = |name: &str| {
            ck.get(name)
                .cloned()
                .ok_or_else(|| Error::Data(format!("{} is not a trained model checkpoint (missing {name})", base.display())))
        };
        let params = match meta.model {
            ModelKind::TransE => NativeParams::TransE {
                entity: take("native.entity")?,
                relation: take("native.relation")?,
            },
            ModelKind::DistMult => NativeParams::DistMult {
                entity: take("native.entity")?,
                relation: take("native.relation")?,
            },
            ModelKind::Rescal => NativeParams::Rescal {
                entity: take("native.entity")?,
                relation: take("native.relation")?,
            },
            ModelKind::ComplEx => NativeParams::ComplEx {
                entity_re: take("native.entity_re")?,
                entity_im: take("native.entity_im")?,
                relation_re: take("native.relation_re")?,
                relation_im: take("native.relation_im")?,
            },
            ModelKind::Random => {
                return Err(Error::Data("a random table has no scoring model".into()));
            }
        };
        Ok(KgModel { params, meta })
    }
}

pub fn transe_score(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    -h.iter()
        .zip(r)
        .zip(t)
        .map(|((h, r), t)| (h + r - t).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn distmult_score(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    h.iter().zip(r).zip(t).map(|((h, r), t)| h * r * t).sum()
}

/// `Re(<h, r, conj(t)>)` with each argument split as `(re, im)`.
pub fn complex_score(h: (&[f64], &[f64]), r: (&[f64], &[f64]), t: (&[f64], &[f64])) -> f64 {
    (0..h.0.len())
        .map(|k| {
            let (hr, hi, rr, ri, tr, ti) = (h.0[k], h.1[k], r.0[k], r.1[k], t.0[k], t.1[k]);
            hr * rr * tr + hi * rr * ti + hr * ri * ti - hi * ri * tr
        })
        .sum()
}

/// `hᵀ M t` with `m` the row-major `d x d` matrix.
pub fn rescal_score(h: &[f64], m: &[f64], t: &[f64]) -> f64 {
    let d = h.len();
    (0..d).map(|i| h[i] * dot(&m[i * d..(i + 1) * d], t)).sum()
}

/// Flattens native parameters into one `d`-vector per symbol.
pub fn export_vectors(model: &KgModel) -> Result<EmbeddingTable> {
    let mut meta = model.meta.clone();
    let (entity, relation) = match &model.params {
        NativeParams::TransE { entity, relation } | NativeParams::DistMult { entity, relation } => {
            (entity.clone(), relation.clone())
        }
        NativeParams::ComplEx {
            entity_re,
            entity_im,
            relation_re,
            relation_im,
        } => (concat_cols(entity_re, entity_im)?, concat_cols(relation_re, relation_im)?),
        NativeParams::Rescal { entity, relation } => {
            let d = entity.shape().cols();
            let rows = relation.shape().rows();
            let mut pooled = Vec::with_capacity(rows * d);
            for r in 0..rows {
                let m = relation.row(r);
                pooled.extend((0..d).map(|i| m[i * d..(i + 1) * d].iter().sum::<f64>() / d as f64));
            }
            meta.pooling_axis = Some("row".into());
            (entity.clone(), Tensor::matrix(rows, d, pooled)?)
        }
    };
    meta.dim = entity.shape().cols();
    Ok(EmbeddingTable { entity, relation, meta })
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let rows = a.shape().rows();
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    for i in 0..rows {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Tensor::new(Shape::Matrix(rows, a.shape().cols() + b.shape().cols()), data)
}

/// Triples an embedding table is trained on under `regime`.
///
/// `shots` references per validation/test task are included in the baseline
/// regime (chosen as in [`crate::dataset::TaskSet::k_shot`]).
pub fn regime_triples(ds: &Dataset, regime: Regime, shots: usize) -> Vec<Triple> {
    let mut out = ds.background.clone();
    if regime == Regime::Baseline {
        for task in ds.tasks_in(Split::Train) {
            out.extend(task.triples());
        }
        for split in [Split::Validation, Split::Test] {
            for task in ds.tasks_in(split) {
                out.extend(task.k_shot(shots, ds.seed).0);
            }
        }
    }
    out
}

/// Adagrad accumulators mirroring the parameter layout.
struct Adagrad {
    lr: f64,
    acc: Vec<Vec<f64>>,
}

impl Adagrad {
    fn new(lr: f64, sizes: &[usize]) -> Self {
        Adagrad {
            lr,
            acc: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn apply(&mut self, slot: usize, offset: usize, param: &mut [f64], grad: &[f64]) {
        let acc = &mut self.acc[slot][offset..offset + grad.len()];
        for ((p, g), a) in param.iter_mut().zip(grad).zip(acc) {
            *a += g * g;
            *p -= self.lr * g / (a.sqrt() + 1e-10);
        }
    }
}

fn corrupt(t: &Triple, mode: Corruption, n_ent: usize, rng: &mut Rng) -> Triple {
    let replace_tail = match mode {
        Corruption::Tail => true,
        Corruption::Head => false,
        Corruption::Both => rng.gen_bool(0.5),
    };
    let mut e = EntityId(rng.gen_range(0..n_ent as u32));
    let original = if replace_tail { t.tail } else { t.head };
    if e == original && n_ent > 1 {
        e = EntityId((e.0 + 1 + rng.gen_range(0..n_ent as u32 - 1)) % n_ent as u32);
    }
    if replace_tail {
        Triple::new(t.head, t.relation, e)
    } else {
        Triple::new(e, t.relation, t.tail)
    }
}

/// Per-vector gradient of one triple's score; slots are model specific.
struct TripleGrad {
    /// `(slot, row, gradient)` triples to apply.
    parts: Vec<(usize, usize, Vec<f64>)>,
}

fn scale(v: &[f64], c: f64) -> Vec<f64> {
    v.iter().map(|x| x * c).collect()
}

impl KgModel {
    fn sizes(&self) -> Vec<usize> {
        match &self.params {
            NativeParams::TransE { entity, relation }
            | NativeParams::DistMult { entity, relation }
            | NativeParams::Rescal { entity, relation } => vec![entity.data().len(), relation.data().len()],
            NativeParams::ComplEx {
                entity_re,
                entity_im,
                relation_re,
                relation_im,
            } => vec![
                entity_re.data().len(),
                entity_im.data().len(),
                relation_re.data().len(),
                relation_im.data().len(),
            ],
        }
    }

    /// Gradient of the score of `t`, multiplied by `coef`, plus `l2 * 2x` on
    /// every touched vector.
    fn score_grad(&self, t: &Triple, coef: f64, l2: f64) -> TripleGrad {
        let (h, r, tl) = (t.head.index(), t.relation.index(), t.tail.index());
        let reg = |v: &[f64], g: Vec<f64>| -> Vec<f64> { g.iter().zip(v).map(|(g, x)| g + 2.0 * l2 * x).collect() };
        let parts = match &self.params {
            NativeParams::TransE { entity, relation } => {
                let (hv, rv, tv) = (entity.row(h), relation.row(r), entity.row(tl));
                let diff: Vec<f64> = hv.iter().zip(rv).zip(tv).map(|((h, r), t)| h + r - t).collect();
                let n = dot(&diff, &diff).sqrt();
                // score = -||diff||
                let u = if n > 0.0 { scale(&diff, -coef / n) } else { vec![0.0; diff.len()] };
                vec![(0, h, u.clone()), (1, r, u.clone()), (0, tl, scale(&u, -1.0))]
            }
            NativeParams::DistMult { entity, relation } => {
                let (hv, rv, tv) = (entity.row(h), relation.row(r), entity.row(tl));
                let gh: Vec<f64> = rv.iter().zip(tv).map(|(r, t)| coef * r * t).collect();
                let gr: Vec<f64> = hv.iter().zip(tv).map(|(h, t)| coef * h * t).collect();
                let gt: Vec<f64> = hv.iter().zip(rv).map(|(h, r)| coef * h * r).collect();
                vec![(0, h, reg(hv, gh)), (1, r, reg(rv, gr)), (0, tl, reg(tv, gt))]
            }
            NativeParams::ComplEx {
                entity_re,
                entity_im,
                relation_re,
                relation_im,
            } => {
                let (hr, hi) = (entity_re.row(h), entity_im.row(h));
                let (rr, ri) = (relation_re.row(r), relation_im.row(r));
                let (tr, ti) = (entity_re.row(tl), entity_im.row(tl));
                let k = hr.len();
                let f = |g: &dyn Fn(usize) -> f64| (0..k).map(|i| coef * g(i)).collect::<Vec<f64>>();
                vec![
                    (0, h, reg(hr, f(&|i| rr[i] * tr[i] + ri[i] * ti[i]))),
                    (1, h, reg(hi, f(&|i| rr[i] * ti[i] - ri[i] * tr[i]))),
                    (2, r, reg(rr, f(&|i| hr[i] * tr[i] + hi[i] * ti[i]))),
                    (3, r, reg(ri, f(&|i| hr[i] * ti[i] - hi[i] * tr[i]))),
                    (0, tl, reg(tr, f(&|i| hr[i] * rr[i] - hi[i] * ri[i]))),
                    (1, tl, reg(ti, f(&|i| hr[i] * ri[i] + hi[i] * rr[i]))),
                ]
            }
            NativeParams::Rescal { entity, relation } => {
                let (hv, m, tv) = (entity.row(h), relation.row(r), entity.row(tl));
                let d = hv.len();
                let gh: Vec<f64> = (0..d).map(|i| coef * dot(&m[i * d..(i + 1) * d], tv)).collect();
                let gt: Vec<f64> = (0..d)
                    .map(|j| coef * (0..d).map(|i| hv[i] * m[i * d + j]).sum::<f64>())
                    .collect();
                let mut gm = Vec::with_capacity(d * d);
                for &hi in hv {
                    gm.extend(tv.iter().map(|t| coef * hi * t));
                }
                vec![(0, h, reg(hv, gh)), (1, r, reg(m, gm)), (0, tl, reg(tv, gt))]
            }
        };
        TripleGrad { parts }
    }

    fn apply(&mut self, grad: TripleGrad, opt: &mut Adagrad) {
        let is_transe = matches!(self.params, NativeParams::TransE { .. });
        let mut touched_entities = Vec::new();
        for (slot, row, g) in grad.parts {
            let tensor = match (&mut self.params, slot) {
                (NativeParams::TransE { entity, .. }, 0)
                | (NativeParams::DistMult { entity, .. }, 0)
                | (NativeParams::Rescal { entity, .. }, 0) => entity,
                (NativeParams::TransE { relation, .. }, 1)
                | (NativeParams::DistMult { relation, .. }, 1)
                | (NativeParams::Rescal { relation, .. }, 1) => relation,
                (NativeParams::ComplEx { entity_re, .. }, 0) => entity_re,
                (NativeParams::ComplEx { entity_im, .. }, 1) => entity_im,
                (NativeParams::ComplEx { relation_re, .. }, 2) => relation_re,
                (NativeParams::ComplEx { relation_im, .. }, 3) => relation_im,
                _ => unreachable!("slot layout is fixed per model"),
            };
            let width = tensor.shape().cols();
            opt.apply(slot, row * width, tensor.row_mut(row), &g);
            if is_transe && slot == 0 {
                touched_entities.push(row);
            }
        }
        if let NativeParams::TransE { entity, .. } = &mut self.params {
            for row in touched_entities {
                normalize_row(entity.row_mut(row));
            }
        }
    }

    /// Loss of one positive/negative pair, applying its gradient when positive.
    fn pair_step(&mut self, pos: &Triple, neg: &Triple, cfg: &EmbeddingConfig, opt: &mut Adagrad) -> f64 {
        match self.kind() {
            ModelKind::TransE | ModelKind::Rescal => {
                let (sp, sn) = (self.score(pos.head, pos.relation, pos.tail), self.score(neg.head, neg.relation, neg.tail));
                let loss = (cfg.margin - sp + sn).max(0.0);
                if loss > 0.0 {
                    let l2 = if self.kind() == ModelKind::Rescal { cfg.l2 } else { 0.0 };
                    let gp = self.score_grad(pos, -1.0, l2);
                    let gn = self.score_grad(neg, 1.0, l2);
                    self.apply(gp, opt);
                    self.apply(gn, opt);
                }
                loss
            }
            _ => {
                let mut loss = 0.0;
                for (t, y) in [(pos, 1.0), (neg, -1.0)] {
                    let s = self.score(t.head, t.relation, t.tail);
                    // softplus(-y s), d/ds = -y * sigmoid(-y s)
                    let z = -y * s;
                    loss += if z > 30.0 { z } else { z.exp().ln_1p() };
                    let g = self.score_grad(t, -y * sigmoid(z), cfg.l2);
                    self.apply(g, opt);
                }
                loss
            }
        }
    }
}

/// Trains a model and returns it with the per-epoch mean loss history.
pub fn train_embeddings(
    triples: &[Triple],
    num_entities: usize,
    num_relations: usize,
    config: &EmbeddingConfig,
    regime: Option<Regime>,
) -> Result<(KgModel, Vec<f64>)> {
    config.validate()?;
    if config.model == ModelKind::Random {
        return Err(Error::Config("use random_table for the random model".into()));
    }
    if triples.is_empty() {
        return Err(Error::Data("no training triples".into()));
    }
    let mut rng = rng::seeded(config.seed);
    let params = KgModel::init(config.model, num_entities, num_relations, config.dim, &mut rng)?;
    let mut model = KgModel {
        params,
        meta: TableMeta {
            model: config.model,
            dim: config.dim,
            regime,
            seed: config.seed,
            epochs: config.epochs,
            pooling_axis: None,
        },
    };
    let mut opt = Adagrad::new(config.lr, &model.sizes());
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for &i in &order {
            let pos = triples[i];
            for _ in 0..config.negatives.per_positive {
                let neg = corrupt(&pos, config.negatives.mode, num_entities, &mut rng);
                total += model.pair_step(&pos, &neg, config, &mut opt);
                count += 1;
            }
        }
        let mean = total / count as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("{} training loss", config.model)));
        }
        history.push(mean);
    }
    Ok((model, history))
}

/// Asserts that none of `triples` uses a relation in `forbidden`.
pub fn assert_disjoint(triples: &[Triple], forbidden: &[RelationId]) -> Result<()> {
    let set: HashSet<_> = forbidden.iter().collect();
    match triples.iter().find(|t| set.contains(&t.relation)) {
        Some(t) => Err(Error::Contract(format!("training triple uses task relation {}", t.relation))),
        None => Ok(()),
    }
}
