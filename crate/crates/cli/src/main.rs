mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use a2d_core::checkpoint;
use a2d_core::data::ParallelCorpus;
use a2d_core::distill::AamShape;
use a2d_core::eval;
use a2d_core::train::{self, EpochMetrics};
use a2d_core::{AttentionKind, Error, Result};
use clap::{Args, Parser, Subcommand};

use config::{build_vocab, load_corpora, DataConfig, DataSource, FileConfig};

#[derive(Parser)]
#[command(name = "a2d", version, about = "Attention-map distillation for encoder-decoder Transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on cross-entropy alone.
    TrainTeacher(TrainArgs),
    /// Distill a trained teacher into a fresh student.
    Distill(DistillArgs),
    /// Greedy-decode a corpus and print BLEU and token accuracy as JSON.
    Eval(EvalArgs),
    /// Write the learned alignment weights of a distilled checkpoint as CSV.
    ExportAam(ExportArgs),
}

#[derive(Args)]
struct Common {
    /// TOML file with [model], [train], [distill] and [data] sections.
    #[arg(long)]
    config: PathBuf,
    /// Training data: a TSV file or `synth:<copy|reverse|digit_map>`.
    #[arg(long)]
    data: String,
    /// Validation TSV (defaults to a hold-out of the training file).
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    common: Common,
    /// Teacher checkpoint.
    #[arg(long)]
    teacher: PathBuf,
    /// Attention stacks to align, e.g. `enc,dec-self,dec-cross`.
    #[arg(long, value_delimiter = ',')]
    parts: Option<Vec<String>>,
    /// Align head-averaged per-layer maps instead of individual heads.
    #[arg(long)]
    layerwise: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    lambda_decay: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Renormalize intermediate maps onto the simplex before the KL.
    #[arg(long)]
    renormalize: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test data: a TSV file or `synth:<kind>` (uses the test split).
    #[arg(long)]
    data: String,
    /// Config whose [data] section generated a synthetic corpus.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainTeacher(a) => train_teacher(a),
        Command::Distill(a) => distill(a),
        Command::Eval(a) => evaluate(a),
        Command::ExportAam(a) => export_aam(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn apply_common(cfg: &mut FileConfig, c: &Common) {
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = c.epochs {
        cfg.train.epochs = epochs;
    }
}

/// Writes each epoch record to `metrics.ndjson` as it is produced.
fn metrics_sink(path: &Path) -> Result<impl FnMut(&EpochMetrics) -> Result<()>> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let path = path.to_path_buf();
    Ok(move |m: &EpochMetrics| writeln!(file, "{}", m.to_json_line()).map_err(|e| Error::io(&path, e)))
}

fn write_config(out: &Path, cfg: &FileConfig) -> Result<()> {
    let path = out.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))
}

fn train_teacher(args: TrainArgs) -> Result<()> {
    let c = &args.common;
    let mut cfg = FileConfig::load(&c.config)?;
    apply_common(&mut cfg, c);
    let model_cfg = cfg.model()?.clone();
    model_cfg.validate()?;
    cfg.train.validate()?;
    let source = DataSource::parse(&c.data)?;
    let corpora = load_corpora(&source, c.valid.as_deref(), &cfg.data, model_cfg.vocab_size)?;
    let vocab = build_vocab(&source, &corpora.train, model_cfg.vocab_size);
    if vocab.len() > model_cfg.vocab_size {
        return Err(Error::Config(format!(
            "training data has {} vocabulary entries but model.vocab_size is {}",
            vocab.len(),
            model_cfg.vocab_size
        )));
    }
    prepare_out(&c.out)?;
    write_config(&c.out, &cfg)?;
    let mut sink = metrics_sink(&c.out.join("metrics.ndjson"))?;
    let data = train::Corpora {
        train: &corpora.train,
        valid: &corpora.valid,
        vocab: &vocab,
    };
    let outcome = train::train_teacher(&model_cfg, &cfg.train, &data, Some(&mut sink))?;
    checkpoint::save(&c.out.join("model.ckpt"), &outcome.model, &vocab, None, None)?;
    log::info!(
        "best epoch {} (val_acc {:.4}); checkpoint written to {}",
        outcome.best_epoch,
        outcome.log[outcome.best_epoch].val_acc,
        c.out.join("model.ckpt").display()
    );
    Ok(())
}

fn parse_parts(parts: &[String]) -> Result<Vec<AttentionKind>> {
    parts
        .iter()
        .map(|p| match p.trim() {
            "enc" | "enc-self" | "enc_self" => Ok(AttentionKind::EncSelf),
            "dec-self" | "dec_self" => Ok(AttentionKind::DecSelf),
            "dec-cross" | "dec_cross" => Ok(AttentionKind::DecCross),
            other => Err(Error::Usage(format!(
                "unknown attention stack `{other}` (expected enc, dec-self or dec-cross)"
            ))),
        })
        .collect()
}

fn distill(args: DistillArgs) -> Result<()> {
    let c = &args.common;
    let mut cfg = FileConfig::load(&c.config)?;
    apply_common(&mut cfg, c);
    let d = &mut cfg.distill;
    if let Some(parts) = &args.parts {
        d.set_parts(&parse_parts(parts)?);
    }
    d.layerwise_variant |= args.layerwise;
    d.renormalize_intermediate |= args.renormalize;
    if let Some(v) = args.lambda {
        d.lambda_att = v;
    }
    if let Some(v) = args.mu {
        d.mu_kd = v;
    }
    if let Some(v) = args.lambda_decay {
        d.lambda_decay = v;
    }
    if let Some(v) = args.temperature {
        d.kd_temperature = v;
    }
    d.validate()?;
    d.stack_weights()?;
    cfg.train.validate()?;
    let student_cfg = cfg.model()?.clone();
    student_cfg.validate()?;

    let teacher = checkpoint::load(&args.teacher)?;
    if teacher.model.config().vocab_size != student_cfg.vocab_size {
        return Err(Error::Config(format!(
            "student model.vocab_size {} differs from the teacher's {}",
            student_cfg.vocab_size,
            teacher.model.config().vocab_size
        )));
    }
    let source = DataSource::parse(&c.data)?;
    let corpora = load_corpora(&source, c.valid.as_deref(), &cfg.data, student_cfg.vocab_size)?;
    prepare_out(&c.out)?;
    write_config(&c.out, &cfg)?;
    let mut sink = metrics_sink(&c.out.join("metrics.ndjson"))?;
    let data = train::Corpora {
        train: &corpora.train,
        valid: &corpora.valid,
        vocab: &teacher.vocab,
    };
    let outcome = train::distill_run(&teacher.model, &student_cfg, &cfg.distill, &cfg.train, &data, Some(&mut sink))?;
    let path = c.out.join("model.ckpt");
    checkpoint::save(&path, &outcome.model, &teacher.vocab, outcome.aams.as_ref(), Some(&cfg.distill))?;
    log::info!(
        "best epoch {} (val_acc {:.4}); checkpoint written to {}",
        outcome.best_epoch,
        outcome.log[outcome.best_epoch].val_acc,
        path.display()
    );
    Ok(())
}

fn evaluate(args: EvalArgs) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let data_cfg = match &args.config {
        Some(p) => FileConfig::load(p)?.data,
        None => DataConfig::default(),
    };
    let source = DataSource::parse(&args.data)?;
    let corpus: ParallelCorpus = match &source {
        DataSource::Synth(_) => load_corpora(&source, None, &data_cfg, ck.model.config().vocab_size)?.test,
        DataSource::Tsv(path) => a2d_core::data::load_parallel_tsv(path, a2d_core::data::Split::Test)?,
    };
    if let Some((i, tok)) = corpus
        .pairs
        .iter()
        .enumerate()
        .find_map(|(i, (s, t))| s.iter().chain(t).find(|w| ck.vocab.id(w) == a2d_core::data::UNK).map(|w| (i, w)))
    {
        log::warn!("pair {i}: token `{tok}` is not in the checkpoint vocabulary");
    }
    let report = eval::evaluate(&ck.model, &corpus, &ck.vocab, args.batch_size.max(1))?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn export_aam(args: ExportArgs) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let aams = ck.aams.ok_or_else(|| {
        Error::Input(format!(
            "{} has no alignment modules (not a distilled checkpoint)",
            args.checkpoint.display()
        ))
    })?;
    prepare_out(&args.out)?;
    for kind in AttentionKind::ALL {
        let file = args.out.join(format!("{}.csv", kind.name()));
        let (Some(module), Some(w)) = (aams.module(kind), aams.weight(kind)) else {
            eprintln!("notice: {} was not distilled; {} omitted", kind.name(), file.display());
            continue;
        };
        write_weights_csv(&file, &module.shape, w.data())?;
        log::info!("wrote {}", file.display());
    }
    Ok(())
}

/// One row per teacher map, one column per student map, cells `|w|`.
fn write_weights_csv(path: &Path, shape: &AamShape, w: &[f64]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut wtr = csv::Writer::from_path(path).map_err(csv_err)?;
    let students = shape.student_labels();
    let mut header = vec![String::new()];
    header.extend(students.iter().cloned());
    wtr.write_record(&header).map_err(csv_err)?;
    for (c, label) in shape.teacher_labels().into_iter().enumerate() {
        let mut row = vec![label];
        row.extend(w[c * students.len()..(c + 1) * students.len()].iter().map(|v| v.abs().to_string()));
        wtr.write_record(&row).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}
