use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use glance_focus::episodes::{Dataset, Generator, GeneratorConfig};
use glance_focus::focus::{AttentionExport, AttentionVariant};
use glance_focus::numerics::Tape;
use glance_focus::params::{Forward, Mode};
use glance_focus::trainer::{check_compatible, evaluate_model, Checkpoint, Metrics, TrainConfig, TrainMode};
use glance_focus::{Error, Model, ModelTrainer};

#[derive(Parser)]
#[command(name = "glance-focus", version, about = "Event-memory question answering on feature sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic episode corpus.
    Gen(GenArgs),
    /// Train a model and write a checkpoint.
    Train(Box<TrainArgs>),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Export the focus attention maps of one question.
    Attn(AttnArgs),
}

#[derive(Args, Serialize)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    episodes: u64,
    #[arg(long, default_value_t = 40)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    events_min: usize,
    #[arg(long, default_value_t = 4)]
    events_max: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    width_min: f64,
    #[arg(long, default_value_t = 0.2)]
    width_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Omit event labels from the annotations.
    #[arg(long)]
    unlabeled: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Uns,
    Sup,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Cascade,
    Direct,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
    /// Continue an interrupted run from this checkpoint.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// JSON file with a full or partial training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    memories: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long = "model-dim")]
    model_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lambda_cert: Option<f64>,
    #[arg(long)]
    lambda_cls: Option<f64>,
    #[arg(long)]
    lambda_iou: Option<f64>,
    #[arg(long)]
    lambda_l1: Option<f64>,
    #[arg(long)]
    eos_weight: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Gradient-norm cap; 0 disables clipping.
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Questions per episode per epoch; 0 uses all.
    #[arg(long)]
    questions_per_episode: Option<usize>,
}

#[derive(Clone, Copy, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum Split {
    Heldout,
    Train,
    All,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    per_type: bool,
    #[arg(long, value_enum, default_value = "heldout")]
    split: Split,
}

#[derive(Args, Serialize)]
struct AttnArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    episode: u64,
    #[arg(long)]
    question: usize,
    #[arg(long)]
    out: PathBuf,
}

fn print_config(command: &str, value: &impl Serialize) {
    let mut json = serde_json::to_value(value).expect("config serializes");
    if let Some(map) = json.as_object_mut() {
        map.insert("command".into(), command.into());
    }
    println!("config\t{json}");
}

fn gen(args: GenArgs) -> anyhow::Result<()> {
    print_config("gen", &args);
    let generator = Generator::new(GeneratorConfig {
        frames: args.frames,
        dim: args.dim,
        classes: args.classes,
        events_min: args.events_min,
        events_max: args.events_max,
        noise: args.noise,
        seed: args.seed,
        width_min: args.width_min,
        width_max: args.width_max,
    })?;
    let mut data = Dataset::generate(&generator, 0..args.episodes)?;
    if args.unlabeled {
        data = data.unlabeled();
    }
    data.write(&args.out)?;
    let mut per_type = BTreeMap::new();
    for q in data.episodes.iter().flat_map(|e| &e.qas) {
        *per_type.entry(q.kind.tag()).or_insert(0usize) += 1;
    }
    println!("episodes\t{}", data.episodes.len());
    println!("questions\t{}", data.qa_count());
    for (tag, n) in per_type {
        println!("questions/{tag}\t{n}");
    }
    Ok(())
}

fn train_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                line: e.line(),
                msg: e.to_string(),
            })?
        }
        None => TrainConfig::default(),
    };
    cfg.mode = match args.mode {
        ModeArg::Uns => TrainMode::Unsupervised,
        ModeArg::Sup => TrainMode::Supervised,
    };
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = args.$field { cfg.$field = v; })*};
    }
    set!(memories, model_dim, layers, heads, dropout, lambda_cert, lambda_cls, lambda_iou, lambda_l1);
    set!(eos_weight, lr, epochs, batch_size, seed, questions_per_episode);
    if args.classes.is_some() {
        cfg.classes = args.classes;
    }
    if let Some(c) = args.grad_clip {
        cfg.grad_clip = (c > 0.0).then_some(c);
    }
    if let Some(v) = args.variant {
        cfg.variant = match v {
            VariantArg::Cascade => AttentionVariant::Cascade,
            VariantArg::Direct => AttentionVariant::Direct,
        };
    }
    cfg.data = Some(args.data.clone());
    cfg.checkpoint = Some(args.out.clone());
    Ok(cfg)
}

fn record_line(epoch: usize, r: &glance_focus::trainer::LossRecord, heldout: Option<&Metrics>) -> String {
    let mut line = format!(
        "epoch\t{epoch}\ttotal\t{}\tqa\t{}\tcert\t{}\tcls\t{}\tiou\t{}\tl1\t{}",
        r.total, r.qa, r.cert, r.cls, r.iou, r.l1
    );
    if let Some(m) = heldout {
        line += &format!("\theldout_accuracy\t{}", m.accuracy());
    }
    line
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let (mut trainer, data) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::read(path)?;
            let mut t = ModelTrainer::from_checkpoint(&ckpt)?;
            if let Some(e) = args.epochs {
                t.config.epochs = e;
            }
            t.config.checkpoint = Some(args.out.clone());
            print_config("train", &t.config);
            let data = Dataset::read(&args.data)?;
            check_compatible(&t.model.config, &data)?;
            (t, data)
        }
        None => {
            let cfg = train_config(&args)?;
            print_config("train", &cfg);
            cfg.validate()?;
            let data = Dataset::read(&args.data)?;
            if cfg.mode == TrainMode::Supervised && !data.is_labeled() {
                return Err(Error::Contract("--mode sup requires event labels in the annotations".into()).into());
            }
            let (train, _) = data.split();
            if train.episodes.is_empty() {
                return Err(Error::Contract("training split is empty".into()).into());
            }
            (ModelTrainer::new(cfg, &train)?, data)
        }
    };
    let (train, heldout) = data.split();
    let heldout = (!heldout.episodes.is_empty()).then_some(heldout);
    let mut last = None;
    while !trainer.is_finished() {
        let record = trainer.train_epoch(&train)?;
        let metrics = match &heldout {
            Some(h) => Some(evaluate_model(h, &trainer.model, &trainer.config)?),
            None => None,
        };
        println!("{}", record_line(trainer.progress.epoch, &record, metrics.as_ref()));
        trainer.checkpoint().write(&args.out)?;
        last = metrics;
    }
    trainer.checkpoint().write(&args.out)?;
    if let Some(m) = last {
        for line in m.lines(true) {
            println!("{line}");
        }
    }
    Ok(())
}

fn load_model(ckpt: &Path, data: &Dataset) -> anyhow::Result<(Model, TrainConfig)> {
    let ckpt = Checkpoint::read(ckpt)?;
    let trainer = ModelTrainer::from_checkpoint(&ckpt)?;
    check_compatible(&trainer.model.config, data)?;
    Ok((trainer.model, trainer.config))
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    print_config("eval", &args);
    let data = Dataset::read(&args.data)?;
    let (model, cfg) = load_model(&args.ckpt, &data)?;
    let (train, heldout) = data.split();
    let subset = match args.split {
        Split::Heldout => heldout,
        Split::Train => train,
        Split::All => data,
    };
    let metrics = evaluate_model(&subset, &model, &cfg)?;
    for line in metrics.lines(args.per_type) {
        println!("{line}");
    }
    Ok(())
}

fn attn(args: AttnArgs) -> anyhow::Result<()> {
    print_config("attn", &args);
    let data = Dataset::read(&args.data)?;
    let (model, _) = load_model(&args.ckpt, &data)?;
    let Some(episode) = data.episodes.iter().find(|e| e.id == args.episode) else {
        return Err(Error::Contract(format!("no episode with id {}", args.episode)).into());
    };
    let Some(qa) = episode.qas.get(args.question) else {
        return Err(Error::Contract(format!(
            "episode {} has {} questions, index {} requested",
            episode.id,
            episode.qas.len(),
            args.question
        ))
        .into());
    };
    let tape = Tape::new();
    let fwd = Forward::new(&tape, &model.store, Mode::Eval);
    let glimpse = model.glimpse(&fwd, &episode.features)?;
    let out = model.answer(&fwd, &glimpse, &qa.question)?;
    let export = AttentionExport::from_output(&out, &glimpse.bank, &glimpse.prompt.order)?;
    export.write(&args.out)?;
    let words: Vec<&str> = qa.question.iter().map(|&t| data.vocab.tokens[t].as_str()).collect();
    let join = |v: Vec<String>| v.join(" ");
    println!("question\t{}", words.join(" "));
    println!("predicted\t{}", data.vocab.answers[out.answer()]);
    println!("oracle\t{}", data.vocab.answers[qa.answer]);
    println!("order\t{}", join(export.order.iter().map(|i| i.to_string()).collect()));
    println!(
        "spans\t{}",
        join(
            export
                .order
                .iter()
                .map(|&i| {
                    let (c, w) = export.spans[i];
                    format!("{c:.4}:{w:.4}")
                })
                .collect()
        )
    );
    Ok(())
}

/// 2 for usage and contract errors, 1 for internal failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite(_) | Error::Numerics(_)) => 1,
        Some(_) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(*a),
        Command::Eval(a) => eval(a),
        Command::Attn(a) => attn(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
