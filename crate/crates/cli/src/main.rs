//! `gmatch`: command-line driver for dataset building, embedding training,
//! matcher training and evaluation.
//!
//! Every subcommand accepts `--config run.toml`; flags given on the command
//! line override the file. The merged configuration is written as
//! `run_config.toml` into each output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use gmatch::config::RunConfig;
use gmatch::dataset::{build_dataset, Dataset, Split, SplitPlan};
use gmatch::embeddings::{
    assert_disjoint, random_table, regime_triples, train_embeddings, EmbeddingTable, KgModel, ModelKind, Regime,
};
use gmatch::eval::{evaluate, paired_table, BaselineScorer, CandidateScorer, EvalOptions, MatcherScorer, Metrics, RankingReport};
use gmatch::graph::{load_triples, write_triples};
use gmatch::matcher::Matcher;
use gmatch::synthetic::{self, SyntheticSpec};
use gmatch::trainer::{train, TrainContext};
use gmatch::{rng, Error, Result};

#[derive(Parser)]
#[command(name = "gmatch", version, about = "One-shot relational matching for knowledge-graph link prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the planted-signature toy knowledge graph as a triple file.
    Synthetic(SyntheticArgs),
    /// Select task relations, split them and write task files.
    BuildDataset(BuildArgs),
    /// Train (or draw at random) an embedding table.
    TrainEmbeddings(EmbeddingArgs),
    /// Meta-train the matcher on the meta-train relations.
    TrainMatcher(MatcherArgs),
    /// Rank candidates for validation and/or test relations.
    Evaluate(EvalArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SyntheticArgs {
    /// Output triple file (tab separated).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    common: Common,
    /// Triple file `head<TAB>relation<TAB>tail`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Optional `entity<TAB>type` sidecar overriding name-derived types.
    #[arg(long)]
    types: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exclusive lower frequency bound for task relations.
    #[arg(long)]
    band_lo: Option<usize>,
    /// Exclusive upper frequency bound for task relations.
    #[arg(long)]
    band_hi: Option<usize>,
    /// Relations per split as `train,valid,test`.
    #[arg(long, value_delimiter = ',', conflicts_with = "split_ratios")]
    split_counts: Option<Vec<usize>>,
    /// Split proportions as `train,valid,test`.
    #[arg(long, value_delimiter = ',')]
    split_ratios: Option<Vec<f64>>,
    #[arg(long)]
    candidate_floor: Option<usize>,
}

#[derive(Args)]
struct EmbeddingArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// transe, distmult, complex, rescal or random.
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long, value_enum, default_value_t = RegimeArg::Matcher)]
    regime: RegimeArg,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    /// References per validation/test task included in the baseline regime.
    #[arg(long)]
    shots: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Matcher,
    Baseline,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Regime {
        match r {
            RegimeArg::Matcher => Regime::Matcher,
            RegimeArg::Baseline => Regime::Baseline,
        }
    }
}

#[derive(Args)]
struct MatcherArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Embedding table checkpoint base path (without `.bin` / `.json`).
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from `<out>/last`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    no_neighbor_encoder: bool,
    #[arg(long)]
    no_matching_processor: bool,
    #[arg(long)]
    no_scaling_factor: bool,
    #[arg(long)]
    freeze_embeddings: bool,
    #[arg(long)]
    hidden: Option<usize>,
    /// Matching-processor steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_neighbors: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_episodes: Option<u64>,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Worker threads for validation.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Validation,
    Test,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Matcher checkpoint base path.
    #[arg(long, conflicts_with = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Embedding model checkpoint scored directly, without the matcher.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// References per relation; scores are max-fused.
    #[arg(long)]
    shots: Option<usize>,
    /// Remove other known tails of the query head from the candidates.
    #[arg(long)]
    filtered: bool,
    #[arg(long)]
    workers: Option<usize>,
    /// Neighbor cap; defaults to the value stored in the checkpoint.
    #[arg(long)]
    max_neighbors: Option<usize>,
    /// Directory for `report.json` and the frozen configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

/// Applies the master seed override, re-derives component seeds and validates.
fn finish_config(mut cfg: RunConfig, common: &Common) -> Result<RunConfig> {
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn required(value: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    value
        .clone()
        .ok_or_else(|| Error::Config(format!("--{flag} is required (or set it under [paths])")))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn triple<T: Copy>(values: &[T], flag: &str) -> Result<[T; 3]> {
    match values {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::Config(format!("{flag} takes exactly three values: train,valid,test"))),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn synthetic_cmd(args: SyntheticArgs) -> Result<()> {
    let spec = SyntheticSpec {
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    let (triples, vocab) = synthetic::generate(&spec)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    write_triples(&args.out, &triples, &vocab)?;
    println!(
        "wrote {} triples ({} entities, {} relations) to {}",
        triples.len(),
        vocab.num_entities(),
        vocab.num_relations(),
        args.out.display()
    );
    Ok(())
}

fn build_cmd(args: BuildArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    set(&mut cfg.paths.input, args.input.map(Some));
    set(&mut cfg.paths.dataset, args.out.map(Some));
    set(&mut cfg.dataset.band_lo, args.band_lo);
    set(&mut cfg.dataset.band_hi, args.band_hi);
    set(&mut cfg.dataset.candidate_floor, args.candidate_floor);
    if let Some(c) = args.split_counts {
        cfg.dataset.split = SplitPlan::Counts(triple(&c, "--split-counts")?);
    }
    if let Some(r) = args.split_ratios {
        cfg.dataset.split = SplitPlan::Ratios(triple(&r, "--split-ratios")?);
    }
    let cfg = finish_config(cfg, &args.common)?;
    let input = required(&cfg.paths.input, "input")?;
    let out = required(&cfg.paths.dataset, "out")?;

    let (triples, mut vocab) = load_triples(&input)?;
    if let Some(types) = &args.types {
        vocab.apply_type_sidecar(types)?;
    }
    let ds = build_dataset(&triples, &vocab, &cfg.dataset)?;
    ds.write(&out)?;
    cfg.write_frozen(&out)?;
    println!(
        "{} task relations ({} train / {} validation / {} test), {} background triples, {} inverse relations dropped",
        ds.tasks.len(),
        ds.manifest.meta_train.len(),
        ds.manifest.meta_valid.len(),
        ds.manifest.meta_test.len(),
        ds.background.len(),
        ds.dropped_inverse.len()
    );
    Ok(())
}

fn embeddings_cmd(args: EmbeddingArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    set(&mut cfg.paths.dataset, args.dataset.map(Some));
    set(&mut cfg.paths.out, args.out.map(Some));
    set(&mut cfg.embedding.model, args.model);
    set(&mut cfg.embedding.dim, args.dim);
    set(&mut cfg.embedding.epochs, args.epochs);
    set(&mut cfg.embedding.lr, args.lr);
    set(&mut cfg.embedding.margin, args.margin);
    set(&mut cfg.eval.shots, args.shots);
    let cfg = finish_config(cfg, &args.common)?;
    let ds = Dataset::load(&required(&cfg.paths.dataset, "dataset")?)?;
    let out = required(&cfg.paths.out, "out")?;
    fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;

    let regime = Regime::from(args.regime);
    let (n_ent, n_rel) = (ds.vocab.num_entities(), ds.vocab.num_relations());
    let base = out.join("table");
    if cfg.embedding.model == ModelKind::Random {
        random_table(n_ent, n_rel, cfg.embedding.dim, cfg.embedding.seed)?.save(&base)?;
        println!("random {n_ent} x {} table written to {}", cfg.embedding.dim, base.display());
    } else {
        let triples = regime_triples(&ds, regime, cfg.eval.shots);
        if regime == Regime::Matcher {
            let tasks: Vec<_> = ds.manifest.tasks().collect();
            assert_disjoint(&triples, &tasks)?;
        }
        let (model, history) = train_embeddings(&triples, n_ent, n_rel, &cfg.embedding, Some(regime))?;
        model.save(&base)?;
        write_json(&out.join("loss.json"), &json!(history))?;
        println!(
            "{} trained on {} triples for {} epochs, final loss {:.4}; table written to {}",
            cfg.embedding.model,
            triples.len(),
            history.len(),
            history.last().copied().unwrap_or(f64::NAN),
            base.display()
        );
    }
    cfg.write_frozen(&out)?;
    Ok(())
}

fn matcher_cmd(args: MatcherArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    set(&mut cfg.paths.dataset, args.dataset.map(Some));
    set(&mut cfg.paths.table, args.table.map(Some));
    set(&mut cfg.paths.out, args.out.map(Some));
    let m = &mut cfg.matcher;
    m.use_neighbor_encoder &= !args.no_neighbor_encoder;
    m.use_matching_processor &= !args.no_matching_processor;
    m.use_scaling_factor &= !args.no_scaling_factor;
    m.freeze_embeddings |= args.freeze_embeddings;
    set(&mut m.hidden, args.hidden);
    set(&mut m.steps, args.steps);
    set(&mut m.dropout, args.dropout);
    set(&mut cfg.max_neighbors, args.max_neighbors);
    let t = &mut cfg.train;
    set(&mut t.margin, args.margin);
    set(&mut t.adam.lr, args.lr);
    set(&mut t.batch_size, args.batch_size);
    set(&mut t.epochs, args.epochs);
    set(&mut t.max_episodes, args.max_episodes);
    set(&mut t.eval_interval, args.eval_interval);
    set(&mut t.patience, args.patience);
    set(&mut t.eval_workers, args.workers);

    let table_path = required(&cfg.paths.table, "table")?;
    let table = EmbeddingTable::load(&table_path)?;
    // the matcher width always follows the table it is built on
    cfg.matcher.dim = table.dim();
    let cfg = finish_config(cfg, &args.common)?;
    let ds = Dataset::load(&required(&cfg.paths.dataset, "dataset")?)?;
    let out = required(&cfg.paths.out, "out")?;
    if table.num_entities() != ds.vocab.num_entities() || table.num_relations() != ds.vocab.num_relations() {
        return Err(Error::Data(format!(
            "table covers {} entities / {} relations but the dataset has {} / {}",
            table.num_entities(),
            table.num_relations(),
            ds.vocab.num_entities(),
            ds.vocab.num_relations()
        )));
    }
    let neighbor_seed = rng::derive_seed(cfg.seed, rng::NEIGHBORS);
    let graph = ds.background_graph(cfg.max_neighbors, neighbor_seed)?;
    let mut matcher = Matcher::new(cfg.matcher.clone(), &table, &mut rng::seeded(cfg.matcher_seed()))?;
    cfg.write_frozen(&out)?;

    let ctx = TrainContext {
        source: &ds,
        vocab: &ds.vocab,
        graph: &graph,
        train_relations: ds.manifest.split(Split::Train),
        valid_relations: ds.manifest.split(Split::Validation),
        out_dir: Some(out.clone()),
    };
    let last = out.join("last");
    let resume = args.resume.then_some(last.as_path());
    if resume.is_some() && !out.join("last.json").exists() {
        return Err(Error::Config(format!("--resume given but {}.json does not exist", last.display())));
    }
    let outcome = train(&ctx, &mut matcher, &cfg.train, resume)?;
    let summary = json!({
        "steps": outcome.steps,
        "best_step": outcome.best_step,
        "best_validation": outcome.best_validation,
        "stopped_early": outcome.stopped_early,
        "max_neighbors": cfg.max_neighbors,
        "neighbor_seed": neighbor_seed,
    });
    matcher.save(&out.join("model"), Vec::new(), summary.clone())?;
    write_json(&out.join("outcome.json"), &summary)?;
    match outcome.best_validation {
        Some(m) => println!(
            "{} episodes; best validation at step {}: MRR {:.3} Hits@10 {:.3}",
            outcome.steps,
            outcome.best_step.unwrap_or(0),
            m.mrr,
            m.hits10
        ),
        None => println!("{} episodes; no validation pass ran", outcome.steps),
    }
    println!("model written to {}", out.join("model").display());
    Ok(())
}

fn run_split<C: CandidateScorer>(ds: &Dataset, split: Split, scorer: &C, opts: &EvalOptions) -> Result<RankingReport> {
    let results = evaluate(ds, ds.manifest.split(split), scorer, opts)?;
    RankingReport::new(results, &ds.vocab)
}

fn evaluate_cmd(args: EvalArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    set(&mut cfg.paths.dataset, args.dataset.map(Some));
    set(&mut cfg.paths.checkpoint, args.checkpoint.clone().map(Some));
    set(&mut cfg.paths.out, args.out.map(Some));
    set(&mut cfg.eval.shots, args.shots);
    set(&mut cfg.eval.workers, args.workers);
    cfg.eval.filtered |= args.filtered;
    let cfg = finish_config(cfg, &args.common)?;
    let ds = Dataset::load(&required(&cfg.paths.dataset, "dataset")?)?;
    let opts = EvalOptions {
        shots: cfg.eval.shots,
        filtered: cfg.eval.filtered,
        workers: cfg.eval.workers,
        seed: ds.seed,
    };
    let splits: Vec<Split> = match args.split {
        SplitArg::Validation => vec![Split::Validation],
        SplitArg::Test => vec![Split::Test],
        SplitArg::Both => vec![Split::Validation, Split::Test],
    };

    let (label, reports) = if let Some(base) = &args.baseline {
        let model = KgModel::load(base)?;
        if model.meta.regime != Some(Regime::Baseline) {
            return Err(Error::Config(format!(
                "{} was not trained with --regime baseline; it has never seen the evaluation references",
                base.display()
            )));
        }
        let scorer = BaselineScorer { model: &model };
        let reports = splits
            .iter()
            .map(|&s| run_split(&ds, s, &scorer, &opts))
            .collect::<Result<Vec<_>>>()?;
        (model.meta.model.to_string(), reports)
    } else {
        let base = required(&cfg.paths.checkpoint, "checkpoint")?;
        let (matcher, ck) = Matcher::load(&base)?;
        let run = &ck.metadata["run"];
        let max_neighbors = args
            .max_neighbors
            .or(run["max_neighbors"].as_u64().map(|n| n as usize))
            .unwrap_or(cfg.max_neighbors);
        let neighbor_seed = run["neighbor_seed"]
            .as_u64()
            .unwrap_or_else(|| rng::derive_seed(cfg.seed, rng::NEIGHBORS));
        let graph = ds.background_graph(max_neighbors, neighbor_seed)?;
        let scorer = MatcherScorer {
            matcher: &matcher,
            graph: &graph,
        };
        let reports = splits
            .iter()
            .map(|&s| run_split(&ds, s, &scorer, &opts))
            .collect::<Result<Vec<_>>>()?;
        (format!("GMatching ({})", matcher.table_meta.model), reports)
    };

    for (split, report) in splits.iter().zip(&reports) {
        let m = report.overall;
        println!("== {split} ({} relations, {} queries)", report.per_relation.len(), m.count);
        print!("{}", report.relation_table());
        println!(
            "overall: MRR {:.3}  Hits@10 {:.3}  Hits@5 {:.3}  Hits@1 {:.3}\n",
            m.mrr, m.hits10, m.hits5, m.hits1
        );
    }
    let pick = |s: Split| -> Option<Metrics> { splits.iter().position(|&x| x == s).map(|i| reports[i].overall) };
    if let (Some(v), Some(t)) = (pick(Split::Validation), pick(Split::Test)) {
        print!("{}", paired_table(&[(label.clone(), v, t)]));
    }
    if let Some(out) = &cfg.paths.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
        let by_split: serde_json::Map<String, serde_json::Value> = splits
            .iter()
            .zip(&reports)
            .map(|(s, r)| (s.to_string(), json!(r)))
            .collect();
        let report = json!({
            "model": label,
            "shots": opts.shots,
            "filtered": opts.filtered,
            "splits": by_split,
        });
        write_json(&out.join("report.json"), &report)?;
        cfg.write_frozen(out)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synthetic(a) => synthetic_cmd(a),
        Command::BuildDataset(a) => build_cmd(a),
        Command::TrainEmbeddings(a) => embeddings_cmd(a),
        Command::TrainMatcher(a) => matcher_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
