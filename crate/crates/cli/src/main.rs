//! `tdm`: train, query, sample and verify trace-density language models.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation or I/O error,
//! 3 numerical failure.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use tdm_core::channels::{apply_right_channel, isometry_residual, DEFAULT_FP_MAX_ITER, DEFAULT_FP_TOL};
use tdm_core::io::{read_model, write_model, write_report};
use tdm_core::linalg;
use tdm_core::training::{enumeration_size, evaluate_ids, MAX_ENUMERATION};
use tdm_core::{
    build_vocab, random_isometric_dictionary, solve_right_density, tokenize, train,
    Corpus, Density, IngestConfig, TdmError, TraceDensityModel, TrainConfig, Vocabulary,
};

use report::Report;

#[derive(Parser)]
#[command(name = "tdm", version, about = "Trace-density language models")]
struct Cli {
    /// Emit a single JSON object instead of key=value lines.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a trivial or random isometric model.
    Init(InitArgs),
    /// Train a model on a text corpus.
    Train(TrainArgs),
    /// Held-out cross-entropy, perplexity and KL divergence.
    Eval(EvalArgs),
    /// Probability of a phrase and the next-word table.
    Prob(ProbArgs),
    /// Sample a phrase.
    Sample(SampleArgs),
    /// Check constraints, the fixed point and normalization.
    Verify(VerifyArgs),
    /// Summarize a model file.
    Inspect(ModelArg),
}

#[derive(Args)]
struct IngestArgs {
    /// Keep the corpus case as is.
    #[arg(long, alias = "no_lowercase")]
    no_lowercase: bool,
    /// Keep punctuation attached to words.
    #[arg(long, alias = "no_split_punct")]
    no_split_punct: bool,
}

impl IngestArgs {
    fn config(&self, min_count: usize) -> IngestConfig {
        IngestConfig {
            lowercase: !self.no_lowercase,
            split_punct: !self.no_split_punct,
            min_count,
        }
    }
}

#[derive(Args)]
#[group(id = "source", required = true, multiple = false)]
struct VocabSource {
    /// Comma-separated vocabulary.
    #[arg(long, value_delimiter = ',', group = "source")]
    vocab: Option<Vec<String>>,
    /// Vocabulary w1..wN.
    #[arg(long, alias = "vocab_size", group = "source")]
    vocab_size: Option<usize>,
    /// Build the vocabulary from a corpus file.
    #[arg(long, group = "source")]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    source: VocabSource,
    #[command(flatten)]
    ingest: IngestArgs,
    /// Identity dictionary, uniform over all phrases.
    #[arg(long)]
    trivial: bool,
    #[arg(long, short = 'd', default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, alias = "min_count", default_value_t = 1)]
    min_count: usize,
    #[arg(long, short = 'o')]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, short = 'o')]
    out: PathBuf,
    /// Training report path; defaults to `<out>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// JSON file with training configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    ingest: IngestArgs,
    #[arg(long, alias = "dim")]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, alias = "learning_rate")]
    learning_rate: Option<f64>,
    #[arg(long, alias = "batch_size")]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, alias = "fp_tol")]
    fp_tol: Option<f64>,
    #[arg(long, alias = "fp_max_iter")]
    fp_max_iter: Option<usize>,
    #[arg(long, alias = "min_count")]
    min_count: Option<usize>,
}

#[derive(Args)]
struct ModelArg {
    #[arg(long, short = 'm')]
    model: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    corpus: PathBuf,
    /// Window length; defaults to the whole corpus as one phrase.
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Args)]
struct ProbArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Space-separated tokens.
    #[arg(long, allow_hyphen_values = true)]
    phrase: String,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Enumerate normalization sums for phrase lengths 1..=max-k.
    #[arg(long, alias = "max_k", default_value_t = 3)]
    max_k: usize,
    /// Largest acceptable constraint residual.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

enum Failure {
    Usage(String),
    Validation(String),
    Numerical(String),
    /// Validation failed after a full report was produced.
    Rejected(Report, String),
}

impl From<TdmError> for Failure {
    fn from(e: TdmError) -> Self {
        let msg = e.to_string();
        if e.is_numerical() {
            Failure::Numerical(msg)
        } else if matches!(e, TdmError::Argument(_)) {
            Failure::Usage(msg)
        } else {
            Failure::Validation(msg)
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

type Outcome = Result<Report, Failure>;

fn read_text(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    String::from_utf8(bytes).map_err(|_| Failure::Validation(format!("{}: not valid UTF-8", path.display())))
}

fn load(arg: &ModelArg) -> Result<TraceDensityModel, Failure> {
    read_model(&arg.model).map_err(|e| match e {
        TdmError::Io(io) => Failure::Validation(format!("{}: {io}", arg.model.display())),
        other => other.into(),
    })
}

fn push_residuals(r: &mut Report, model: &TraceDensityModel) {
    let res = model.residuals();
    r.float("left_residual", res.left);
    r.float("right_residual", res.right);
    r.float("trace_residual", res.trace);
}

fn init(args: &InitArgs) -> Outcome {
    let vocab = if let Some(words) = &args.source.vocab {
        Vocabulary::new(words.iter().map(|w| w.trim().to_string()).collect())?
    } else if let Some(n) = args.source.vocab_size {
        Vocabulary::numbered(n)?
    } else {
        let path = args.source.corpus.as_ref().expect("clap enforces one source");
        let tokens = tokenize(&read_text(path)?, &args.ingest.config(args.min_count));
        build_vocab(&tokens, args.min_count)?
    };
    if args.dim == 0 {
        return Err(Failure::Usage("--dim must be positive".into()));
    }
    let vocab = Arc::new(vocab);
    let model = if args.trivial {
        TraceDensityModel::trivial(vocab, args.dim)?
    } else {
        let dict = random_isometric_dictionary(vocab.len(), args.dim, args.seed)?;
        let p_left = Density::identity(args.dim);
        let fp = solve_right_density(&dict, &p_left, DEFAULT_FP_TOL, DEFAULT_FP_MAX_ITER)?;
        TraceDensityModel::new(vocab, dict, p_left, fp.density)?
    };
    write_model(&model, &args.out)?;
    let mut r = Report::default();
    r.push("model", args.out.display().to_string());
    r.push("n", model.n());
    r.push("d", model.d());
    r.push("trivial", args.trivial);
    push_residuals(&mut r, &model);
    Ok(r)
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => serde_json::from_str(&read_text(path)?)
            .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?,
        None => TrainConfig::default(),
    };
    macro_rules! overlay {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field { config.$field = v; })*
        };
    }
    overlay!(d, k, epochs, learning_rate, batch_size, seed, fp_tol, fp_max_iter, min_count);
    config.validate()?;
    Ok(config)
}

fn train_cmd(args: &TrainArgs) -> Outcome {
    let config = train_config(args)?;
    let corpus = Corpus::ingest(&read_text(&args.corpus)?, &args.ingest.config(config.min_count))?;
    let (model, report) = train(&corpus, &config)?;
    let report_path = args.report.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".report.json");
        PathBuf::from(p)
    });
    write_model(&model, &args.out)?;
    write_report(&report, &config, &report_path)?;

    let mut r = Report::default();
    r.push("model", args.out.display().to_string());
    r.push("report", report_path.display().to_string());
    r.push("n", model.n());
    r.push("d", model.d());
    r.push("k", config.k);
    r.push("epochs", report.records.len());
    r.push("best_epoch", report.best_epoch.map_or(Value::Null, Value::from));
    if let Some(best) = report.best_epoch.and_then(|e| report.records.iter().find(|x| x.epoch == e)) {
        r.float("nll", best.nll);
        r.float("perplexity", best.perplexity);
    }
    r.push("flagged_epochs", report.records.iter().filter(|e| e.flagged).count());
    push_residuals(&mut r, &model);
    Ok(r)
}

fn eval(args: &EvalArgs) -> Outcome {
    let model = load(&args.model)?;
    let tokens = tokenize(&read_text(&args.corpus)?, &args.ingest.config(1));
    let corpus = Corpus::from_tokens(&tokens, Arc::clone(model.vocab()))?;
    let k = args.k.unwrap_or(corpus.len());
    let e = evaluate_ids(&model, corpus.ids(), k)?;
    let mut r = Report::default();
    r.push("k", e.k);
    r.push("windows", e.windows);
    r.float("cross_entropy", e.cross_entropy);
    r.float("perplexity", e.perplexity);
    match e.kl {
        Some(kl) => r.float("kl", kl),
        None => r.push("kl", Value::Null),
    }
    Ok(r)
}

fn prob(args: &ProbArgs) -> Outcome {
    let model = load(&args.model)?;
    let tokens: Vec<&str> = args.phrase.split_whitespace().collect();
    let ids = model.vocab().encode(&tokens)?;
    let q = model.trace_density(&ids)?;
    let mut r = Report::default();
    r.push("phrase", tokens.join(" "));
    r.float("q", q.value());
    r.float("log_q", if q.is_zero() { f64::NEG_INFINITY } else { q.ln() });
    let next = model.conditional_next(&ids)?;
    for (w, p) in model.vocab().words().iter().zip(next) {
        r.float(format!("next.{w}"), p);
    }
    Ok(r)
}

fn sample(args: &SampleArgs) -> Outcome {
    let model = load(&args.model)?;
    let ids = model.sample_phrase(args.length, args.seed)?;
    let mut r = Report::default();
    r.push("seed", args.seed);
    r.push("length", args.length);
    r.push("phrase", model.vocab().decode(&ids).join(" "));
    Ok(r)
}

/// Sum of `q` over all `n^k` phrases of length `k`.
fn normalization_sum(model: &TraceDensityModel, k: usize) -> Result<f64, TdmError> {
    let n = model.n();
    let mut x = vec![0usize; k];
    let mut total = 0.0;
    loop {
        total += model.prob(&x)?;
        let mut pos = k;
        loop {
            if pos == 0 {
                return Ok(total);
            }
            pos -= 1;
            x[pos] += 1;
            if x[pos] < n {
                break;
            }
            x[pos] = 0;
        }
    }
}

fn verify(args: &VerifyArgs) -> Outcome {
    let model = load(&args.model)?;
    let n = model.n();
    if let Some(k) = (1..=args.max_k).find(|&k| enumeration_size(n, k).map_or(true, |s| s > MAX_ENUMERATION)) {
        return Err(Failure::Usage(format!(
            "--max-k {}: enumerating {n}^{k} phrases exceeds {MAX_ENUMERATION}",
            args.max_k
        )));
    }
    let mut r = Report::default();
    r.push("n", n);
    r.push("d", model.d());
    push_residuals(&mut r, &model);
    r.float("isometry_defect", isometry_residual(model.dict()));

    let fixed = apply_right_channel(model.dict(), model.p_right().matrix())?;
    r.float("fp_stored_residual", linalg::frobenius(&(fixed - model.p_right().matrix())));
    let fp = solve_right_density(
        model.dict(),
        model.p_left(),
        DEFAULT_FP_TOL,
        DEFAULT_FP_MAX_ITER,
    );
    match fp {
        Ok(fp) => {
            r.push("fp_iterations", fp.iterations);
            r.float("fp_residual", fp.residual);
            r.float("fp_eigvalue", fp.eigvalue_estimate);
            r.float(
                "fp_distance",
                linalg::max_abs_diff(fp.density.matrix(), model.p_right().matrix()),
            );
        }
        Err(TdmError::NonConvergence { best }) => {
            r.push("fp_iterations", best.iterations);
            r.float("fp_residual", best.residual);
            r.push("fp_converged", false);
        }
        Err(e) => return Err(e.into()),
    }

    let mut worst: f64 = 0.0;
    for k in 1..=args.max_k {
        let total = normalization_sum(&model, k)?;
        worst = worst.max((total - 1.0).abs());
        r.float(format!("sum_k{k}"), total);
    }
    r.float("max_sum_deviation", worst);
    let ok = model.residuals().max() <= args.tol;
    r.push("ok", ok);
    if !ok {
        let msg = format!("constraint residual {:e} exceeds {:e}", model.residuals().max(), args.tol);
        return Err(Failure::Rejected(r, msg));
    }
    Ok(r)
}

fn inspect(args: &ModelArg) -> Outcome {
    let model = load(args)?;
    let mut r = Report::default();
    r.push("n", model.n());
    r.push("d", model.d());
    push_residuals(&mut r, &model);
    let image = apply_right_channel(model.dict(), model.p_right().matrix())?;
    r.float(
        "eigvalue_estimate",
        linalg::trace_of_product(model.p_left().matrix(), &image).re,
    );
    r.push(
        "unknown_token",
        model.vocab().unknown_token().map_or(Value::Null, Value::from),
    );
    let head: Vec<&str> = model.vocab().words().iter().take(10).map(String::as_str).collect();
    r.push("vocabulary_head", head);
    Ok(r)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match &cli.command {
        Command::Init(a) => init(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Prob(a) => prob(a),
        Command::Sample(a) => sample(a),
        Command::Verify(a) => verify(a),
        Command::Inspect(a) => inspect(a),
    };
    match outcome {
        Ok(report) => {
            print!("{}", report.render(cli.json));
            ExitCode::SUCCESS
        }
        Err(failure) => {
            let (code, msg) = match failure {
                Failure::Usage(m) => (1, m),
                Failure::Validation(m) => (2, m),
                Failure::Numerical(m) => (3, m),
                Failure::Rejected(report, m) => {
                    print!("{}", report.render(cli.json));
                    (2, m)
                }
            };
            eprintln!("tdm: {msg}");
            ExitCode::from(code)
        }
    }
}
