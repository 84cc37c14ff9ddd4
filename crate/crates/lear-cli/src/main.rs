//! Single executable exposing every workflow: training, prediction,
//! evaluation, the paradigm benchmark, gradient checking, synthetic corpus
//! generation and attention inspection.
//!
//! Exit codes: 0 success, 1 validation/usage errors, 2 runtime failures.
//! All randomness is governed by explicit seeds; no environment variables
//! are read.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lear_core::config::Config;
use lear_core::data::{
    load_corpus, save_corpus, synth_corpus, LabelFile, Split, SynthSpec,
};
use lear_core::decoding::DecodeStrategy;
use lear_core::encoder::Vocab;
use lear_core::error::{Error, Result};
use lear_core::loss::SpanMode;
use lear_core::metrics::{evaluate, SpanKey};
use lear_core::model::{LearModel, Predictor};
use lear_core::paradigm::{run_sweep, BenchConfig, Paradigm};
use lear_core::train::{few_shot_sample, gradcheck_default, train};

#[derive(Parser)]
#[command(
    name = "lear",
    about = "Span extraction with label-knowledge fusion: train, predict, evaluate, benchmark",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and save the best-F1 checkpoint
    Train(TrainArgs),
    /// Predict spans for a JSONL input file
    Predict(PredictArgs),
    /// Score predictions against gold spans
    Eval(EvalArgs),
    /// Compare paradigm op counts across category sweeps
    Bench(BenchArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic corpus and label file
    Synth(SynthArgs),
    /// Dump fusion attention weights as TSV
    InspectAttention(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (key = value lines); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path (default: <out>.metrics.csv)
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Vocab file path (default: <out>.vocab)
    #[arg(long)]
    vocab_out: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Train on a k-per-category subsample of the training corpus
    #[arg(long)]
    few_shot: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    labels: PathBuf,
    /// Vocab file (default: <model>.vocab)
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    /// Decode strategy: heuristic | nearest | nested (default: from config)
    #[arg(long)]
    decode: Option<String>,
    /// Output JSONL path (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include boundary score arrays in the output
    #[arg(long, default_value_t = false)]
    dump_scores: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Emit the report as JSON instead of aligned text
    #[arg(long, default_value_t = false)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated: traditional,qa,lear
    #[arg(long, default_value = "traditional,qa,lear")]
    paradigms: String,
    /// Comma-separated category counts
    #[arg(long, default_value = "3,7,33")]
    categories: String,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    m: usize,
    /// Texts per measurement
    #[arg(long, default_value_t = 3)]
    texts: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// CSV output path (table always goes to stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    categories: usize,
    #[arg(long, default_value_t = 30)]
    sentences: usize,
    /// Generate overlapping same-category spans (nested mode)
    #[arg(long, default_value_t = false)]
    nested: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.9)]
    span_rate: f64,
    #[arg(long, default_value_t = 20)]
    filler_vocab: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Text to inspect
    #[arg(long)]
    text: String,
    /// TSV output path (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Synth(args) => cmd_synth(args),
        Command::InspectAttention(args) => cmd_inspect(args),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::from_file(p),
        None => Ok(Config::default()),
    }
}

fn with_extension_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let labels = LabelFile::load(&args.labels)?;
    let mut train_corpus = load_corpus(&args.train, &labels, Split::Train)?;
    let dev_corpus = load_corpus(&args.dev, &labels, Split::Dev)?;
    if let Some(k) = args.few_shot {
        train_corpus = few_shot_sample(&train_corpus, &labels, k, cfg.train.seed)?;
        eprintln!(
            "few-shot sampling: {} sentences ({k} per category)",
            train_corpus.len()
        );
    }

    let stdout = std::io::stdout();
    let mut log = stdout.lock();
    let (_, vocab, outcome) = train(&cfg, &train_corpus, &dev_corpus, &labels, None, &mut log)?;

    std::fs::write(&args.out, &outcome.best_checkpoint)?;
    let vocab_path = args
        .vocab_out
        .unwrap_or_else(|| with_extension_suffix(&args.out, ".vocab"));
    vocab.save(&vocab_path)?;
    let metrics_path = args
        .metrics_out
        .unwrap_or_else(|| with_extension_suffix(&args.out, ".metrics.csv"));
    std::fs::write(&metrics_path, outcome.metrics_csv())?;
    eprintln!(
        "best dev F1 {:.4} at epoch {}; checkpoint {}, vocab {}, metrics {}",
        outcome.best_f1,
        outcome.best_epoch,
        args.out.display(),
        vocab_path.display(),
        metrics_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_predictor(
    model_path: &Path,
    config: &Option<PathBuf>,
    labels_path: &Path,
    vocab_path: &Option<PathBuf>,
) -> Result<(Predictor, Config)> {
    let cfg = load_config(config)?;
    let labels = LabelFile::load(labels_path)?;
    let vocab_path = vocab_path
        .clone()
        .unwrap_or_else(|| with_extension_suffix(model_path, ".vocab"));
    let vocab = Vocab::load(&vocab_path)?;
    let mut mc = cfg.model.clone();
    mc.encoder.vocab_size = vocab.len();
    let model = LearModel::from_checkpoint(mc, labels.categories(), model_path)?;
    Ok((Predictor::new(model, vocab, labels)?, cfg))
}

fn cmd_predict(args: PredictArgs) -> Result<ExitCode> {
    let (predictor, cfg) = load_predictor(&args.model, &args.config, &args.labels, &args.vocab)?;
    let strategy = match &args.decode {
        Some(s) => s.parse::<DecodeStrategy>()?,
        None => cfg.train.decode,
    };
    let input = load_corpus(&args.input, &predictor.labels, Split::Test)?;

    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for record in &input.records {
        let pred = predictor.predict(&record.text, strategy, cfg.train.threshold)?;
        let mut line = serde_json::json!({
            "text_id": record.text_id,
            "spans": pred.spans,
        });
        if args.dump_scores {
            let dump = |t: &lear_core::tensor::Tensor| -> Vec<Vec<f64>> {
                let (n, c) = (t.shape()[0], t.shape()[1]);
                (0..n)
                    .map(|i| (0..c).map(|j| t.at2(i, j)).collect())
                    .collect()
            };
            line["scores"] = serde_json::json!({
                "start": dump(&pred.boundary.start),
                "end": dump(&pred.boundary.end),
            });
        }
        writeln!(out, "{line}")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn read_predictions(path: &Path) -> Result<Vec<(usize, Vec<SpanKey>)>> {
    let raw = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::data_at(lineno + 1, format!("malformed JSON: {e}")))?;
        let text_id = v["text_id"]
            .as_u64()
            .ok_or_else(|| Error::data_at(lineno + 1, "missing text_id".to_string()))?
            as usize;
        let mut spans = Vec::new();
        for s in v["spans"].as_array().into_iter().flatten() {
            let field = |k: &str| -> Result<u64> {
                s[k].as_u64()
                    .ok_or_else(|| Error::data_at(lineno + 1, format!("span missing '{k}'")))
            };
            let category = s["category"].as_str().ok_or_else(|| {
                Error::data_at(lineno + 1, "span missing 'category'".to_string())
            })?;
            spans.push((
                field("start")? as usize,
                field("end")? as usize,
                category.to_string(),
            ));
        }
        out.push((text_id, spans));
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let labels = LabelFile::load(&args.labels)?;
    let gold_corpus = load_corpus(&args.gold, &labels, Split::Test)?;
    let pred = read_predictions(&args.pred)?;
    let report = evaluate(&pred, &gold_corpus.gold_keys())?;
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| Error::data(e.to_string()))?
        );
    } else {
        print!("{}", report.render_text());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    let paradigms: Vec<Paradigm> = args
        .paradigms
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_>>()?;
    let category_counts: Vec<usize> = args
        .categories
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad category count '{s}'")))
        })
        .collect::<Result<_>>()?;
    let bc = BenchConfig {
        paradigms,
        category_counts,
        n: args.n,
        m: args.m,
        texts: args.texts,
        seed: args.seed,
        ..BenchConfig::default()
    };
    let report = run_sweep(&bc)?;
    print!("{}", report.render_text());
    if let Some(path) = &args.out {
        std::fs::write(path, report.to_csv())?;
        eprintln!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let report = gradcheck_default(args.seed, args.h, args.tol)?;
    print!("{}", report.render_text());
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let spec = SynthSpec {
        categories: args.categories,
        sentences: args.sentences,
        filler_vocab: args.filler_vocab,
        span_rate: args.span_rate,
        mode: if args.nested {
            SpanMode::Nested
        } else {
            SpanMode::Flat
        },
        nested_spans: args.nested,
    };
    let (train_c, dev_c, test_c, labels) = synth_corpus(&spec, args.seed)?;
    std::fs::create_dir_all(&args.out_dir)?;
    save_corpus(&train_c, &args.out_dir.join("train.jsonl"))?;
    save_corpus(&dev_c, &args.out_dir.join("dev.jsonl"))?;
    save_corpus(&test_c, &args.out_dir.join("test.jsonl"))?;
    labels.save(&args.out_dir.join("labels.json"))?;
    eprintln!(
        "wrote {} train / {} dev / {} test sentences and {} labels to {}",
        train_c.len(),
        dev_c.len(),
        test_c.len(),
        labels.categories(),
        args.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_inspect(args: InspectArgs) -> Result<ExitCode> {
    let (predictor, _) = load_predictor(&args.model, &args.config, &args.labels, &args.vocab)?;
    let rows = predictor.inspect_attention(&args.text)?;
    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for (token, category, ann_token, weight) in rows {
        writeln!(out, "{token}\t{category}\t{ann_token}\t{weight:.6}")?;
    }
    Ok(ExitCode::SUCCESS)
}
