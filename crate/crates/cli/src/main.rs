use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latte_core::data::{
    import_pubtator, load_dataset, save_dataset, synth_generate, Dataset, DatasetStats,
    MentionRecord, PubtatorOptions, Split, SynthConfig,
};
use latte_core::matchnet::Variant;
use latte_core::metrics::{Metrics, MetricsReport};
use latte_core::train::{
    build_index, evaluate, fit, load_checkpoint, predict, prepare_split, save_checkpoint,
    Checkpoint, RunConfig,
};
use latte_core::Error;

#[derive(Parser)]
#[command(name = "latte", version, about = "Latent-type entity linking")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Report P@1 and MAP of a checkpoint on one split.
    Eval(EvalArgs),
    /// Rank knowledge-base candidates for a single mention.
    Predict(PredictArgs),
    /// Write a seeded synthetic dataset.
    GenData(GenDataArgs),
    /// Convert a PubTator corpus into dataset files.
    ImportPubtator(ImportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Pretrained word vectors (text format, one word per line).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// base, base-lt, base-kt, full or nkt.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    word_dim: Option<usize>,
    #[arg(long)]
    char_cnn_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lstm_layers: Option<usize>,
    #[arg(long)]
    latent_types: Option<usize>,
    #[arg(long)]
    known_types: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    /// Evaluate the training split after every epoch as well.
    #[arg(long)]
    eval_train: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "dev")]
    split: Split,
    /// Write per-mention rankings as JSON lines.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    mention: String,
    /// Left context, whitespace separated.
    #[arg(long, default_value = "")]
    left: String,
    #[arg(long, default_value = "")]
    right: String,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    entities: Option<usize>,
    #[arg(long)]
    types: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    dev: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train_pmids: Option<PathBuf>,
    #[arg(long)]
    dev_pmids: Option<PathBuf>,
    #[arg(long)]
    test_pmids: Option<PathBuf>,
    /// `entity_id<TAB>name` lines naming the knowledge-base entities.
    #[arg(long)]
    entity_names: Option<PathBuf>,
    /// `type_code<TAB>name` lines.
    #[arg(long)]
    type_names: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::ImportPubtator(a) => cmd_import(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Integrity { .. } | Error::Format { .. } | Error::Label(_) | Error::Io { .. } => 3,
        Error::Divergence(_) | Error::NonFinite(_) => 4,
        _ => 1,
    }
}

type Result<T> = latte_core::Result<T>;

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { cfg.$($field).+ = v; })*
        };
    }
    set!(
        seed => seed,
        variant => model.variant,
        epochs => epochs,
        lr => optimizer.lr,
        batch_size => batch_size,
        patience => patience,
        max_len => model.max_len,
        word_dim => model.embedding.word_dim,
        char_cnn_dim => model.embedding.char_cnn_dim,
        hidden => model.hidden,
        lstm_layers => model.lstm_layers,
        latent_types => model.latent_types,
        known_types => model.known_types,
        margin => loss.margin,
        lambda => loss.lambda,
        negatives => negatives,
    );
    if a.data.is_some() {
        cfg.paths.data = a.data.clone();
    }
    if a.checkpoint.is_some() {
        cfg.paths.checkpoint = a.checkpoint.clone();
    }
    if a.embeddings.is_some() {
        cfg.paths.embeddings = a.embeddings.clone();
    }
    cfg.eval_train |= a.eval_train;
    cfg.validate()?;
    Ok(cfg)
}

fn data_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.paths.data.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set paths.data".into()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = run_config(&a)?;
    let dir = data_dir(None, &cfg)?;
    let ds = load_dataset(&dir)?;
    let types = ds.num_types();
    if types > 0 && a.known_types.is_none() && types != cfg.model.known_types {
        log::info!("dataset defines {types} known types");
        cfg.model.known_types = types;
    }
    println!("seed\t{}", cfg.seed);
    let outcome = fit(&cfg, &ds)?;
    println!("epoch\ttrain_loss\tdev_p1\tdev_map\ttrain_p1\ttrain_map");
    for r in &outcome.history {
        let m = |x: Option<Metrics>| {
            x.map_or(("-".to_string(), "-".to_string()), |m| {
                (format!("{:.4}", m.p_at_1), format!("{:.4}", m.map))
            })
        };
        let (dp, dm) = m(r.dev);
        let (tp, tm) = m(r.train);
        let loss = r.train_loss.map_or("-".to_string(), |l| format!("{l:.6}"));
        println!("{}\t{loss}\t{dp}\t{dm}\t{tp}\t{tm}", r.epoch);
    }
    println!("best_epoch\t{}", outcome.best_epoch);
    cfg.model = outcome.model.config.clone();
    if let Some(path) = cfg.paths.checkpoint.clone() {
        let epoch = outcome.history.last().map_or(0, |r| r.epoch);
        save_checkpoint(
            &path,
            &Checkpoint {
                config: cfg,
                model: outcome.model,
                optimizer: Some(outcome.optimizer),
                epoch,
                best_epoch: outcome.best_epoch,
                history: outcome.history,
            },
        )?;
        log::info!("checkpoint written to {}", path.display());
    }
    Ok(())
}

fn load_for(checkpoint: &Path, data: Option<PathBuf>) -> Result<(Checkpoint, Dataset)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let dir = data_dir(data, &ckpt.config)?;
    let ds = load_dataset(&dir)?;
    Ok((ckpt, ds))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (ckpt, ds) = load_for(&a.checkpoint, a.data)?;
    if ds.split(a.split).next().is_none() {
        return Err(Error::Config(format!("split {} has no mentions", a.split)));
    }
    let index = build_index(&ds.kb)?;
    let instances = prepare_split(&ckpt.model, &ds, &index, a.split, ckpt.config.negatives)?;
    let results = evaluate(&ckpt.model, &instances)?;
    let report = MetricsReport {
        rows: vec![(a.split.to_string(), Metrics::compute(&results)?)],
    };
    print!("{report}");
    if let Some(path) = a.dump {
        let file = File::create(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let mut w = BufWriter::new(file);
        for r in &results {
            let line = serde_json::to_string(r).map_err(|e| Error::Contract(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
        }
    }
    Ok(())
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    if a.mention.trim().is_empty() {
        return Err(Error::Config("--mention must not be empty".into()));
    }
    let (ckpt, ds) = load_for(&a.checkpoint, a.data)?;
    let index = build_index(&ds.kb)?;
    let mention = MentionRecord {
        mention_id: "query".into(),
        doc_id: "query".into(),
        split: Split::Test,
        text: a.mention.clone(),
        left_context: words(&a.left),
        right_context: words(&a.right),
        gold_entity_id: String::new(),
        known_type_ids: Default::default(),
    };
    let ranked = predict(&ckpt.model, &ds.kb, &index, &mention, ckpt.config.negatives, a.top_k)?;
    println!("rank\tentity_id\tname\tf\tg\tr\tknown_type");
    for (i, s) in ranked.iter().enumerate() {
        let name = ds.kb.get(&s.entity_id).map_or("", |e| e.name.as_str());
        let g = s.g.map_or("-".to_string(), |g| format!("{g:.4}"));
        let ty = s
            .type_distribution
            .as_ref()
            .and_then(|d| {
                d.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(t, _)| ds.type_name(t).map_or(t.to_string(), str::to_string))
            })
            .unwrap_or_else(|| "-".to_string());
        println!(
            "{}\t{}\t{name}\t{:.4}\t{g}\t{:.4}\t{ty}",
            i + 1,
            s.entity_id,
            s.f,
            s.r
        );
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        seed: a.seed,
        num_entities: a.entities.unwrap_or(d.num_entities),
        num_types: a.types.unwrap_or(d.num_types),
        train_mentions: a.train.unwrap_or(d.train_mentions),
        dev_mentions: a.dev.unwrap_or(d.dev_mentions),
        test_mentions: a.test.unwrap_or(d.test_mentions),
        ..d
    };
    let ds = synth_generate(&cfg)?;
    save_dataset(&a.out, &ds)?;
    println!("{}", DatasetStats::compute(&ds));
    Ok(())
}

fn cmd_import(a: ImportArgs) -> Result<()> {
    let ds = import_pubtator(&PubtatorOptions {
        corpus: a.corpus,
        train_pmids: a.train_pmids,
        dev_pmids: a.dev_pmids,
        test_pmids: a.test_pmids,
        entity_names: a.entity_names,
        type_names: a.type_names,
    })?;
    save_dataset(&a.out, &ds)?;
    println!("{}", DatasetStats::compute(&ds));
    Ok(())
}
