//! `blindspot`: audit the gap between on-policy and corpus-based risk.
//!
//! Exit codes: 0 on success, 1 when inputs or flags are invalid, 2 when a
//! file cannot be read or written.

use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use blindspot::corpus_io::{self, CorpusError, CorpusMode};
use blindspot::discretion::{self, DiscretionError, JudgeSet, RuleJudge};
use blindspot::estimation::{self, EstimationError};
use blindspot::measure::{self, MeasureError, IDENTITY_TOL};
use blindspot::report::{self, ClassifyReport, PairOutcome, Provenance, Report, ReportBody, ReportFormat};
use blindspot::risk::{self, RiskError};
use blindspot::scenario::{DemoConfig, ScenarioError};
use blindspot::{Distribution, JointLaw, Regime};

#[derive(Debug, Error)]
enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Input { path: PathBuf, source: CorpusError },
    #[error("{}: {source}", path.display())]
    Config { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Discretion(#[from] DiscretionError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } => 2,
            CliError::Input {
                source: CorpusError::Io(_),
                ..
            } => 2,
            CliError::Corpus(CorpusError::Io(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "blindspot", version, about = "Audit on-policy versus corpus-based risk")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare a policy's risk with the risk a preference corpus reports.
    Audit(AuditArgs),
    /// Run a synthetic scenario where the corpus hides risky behavior.
    Demo(DemoArgs),
    /// Partition corpus pairs into consensus, conflict and indifference.
    Classify(ClassifyArgs),
    /// Draw a seeded sample set from a policy or a corpus.
    Sample(SampleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Both candidates of every pair, equally weighted.
    Both,
    /// Only the chosen candidate of every pair.
    Chosen,
}

impl From<ModeArg> for CorpusMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Both => CorpusMode::BothCandidates,
            ModeArg::Chosen => CorpusMode::ChosenOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Structured,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Text => ReportFormat::Text,
            FormatArg::Structured => ReportFormat::Structured,
        }
    }
}

#[derive(Args)]
struct Output {
    #[arg(long, value_enum, default_value = "text")]
    format: FormatArg,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// Policy kernel (JSON Lines of prompt, response, weight).
    #[arg(long)]
    policy: PathBuf,
    /// Preference corpus (JSON Lines).
    #[arg(long)]
    corpus: PathBuf,
    /// Prompt marginal (JSON Lines of label, weight). Defaults to uniform
    /// over the policy's prompts.
    #[arg(long)]
    rho: Option<PathBuf>,
    /// Loss table with a bounds header.
    #[arg(long)]
    loss: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    /// Exact computation (the default).
    #[arg(long, conflicts_with = "samples")]
    exact: bool,
    /// Estimate from this many draws per law instead of computing exactly.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct DemoArgs {
    /// Demo configuration (JSON). Defaults to the built-in scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the sampled section.
    #[arg(long, conflicts_with = "samples")]
    exact: bool,
    /// Draws per law for the sampled section.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated judge names. Defaults to every available judge.
    #[arg(long, value_delimiter = ',')]
    judges: Vec<String>,
    /// JSON array of extra rule judges.
    #[arg(long)]
    judge_rules: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct SampleArgs {
    /// Sample from this policy kernel.
    #[arg(long, required_unless_present = "corpus", conflicts_with = "corpus")]
    policy: Option<PathBuf>,
    /// Sample from the kernel this corpus induces.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Prompt marginal; defaults to uniform over the kernel's prompts.
    #[arg(long)]
    rho: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    #[arg(long)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn read_with<T>(path: &Path, f: impl FnOnce(BufReader<File>) -> Result<T, CorpusError>) -> Result<T, CliError> {
    f(open(path)?).map_err(|source| CliError::Input {
        path: path.to_owned(),
        source,
    })
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| CliError::Io {
            path: path.to_owned(),
            source,
        }),
        None => {
            let mut stdout = io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|source| CliError::Io {
                    path: "<stdout>".into(),
                    source,
                })
        }
    }
}

fn check_confidence(c: f64) -> Result<(), CliError> {
    if c > 0.0 && c < 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "--confidence must lie strictly between 0 and 1, got {c}"
        )))
    }
}

fn rho_or_uniform(
    path: Option<&Path>,
    prompts: impl Iterator<Item = blindspot::Label>,
) -> Result<Distribution, CliError> {
    match path {
        Some(p) => read_with(p, corpus_io::read_distribution),
        None => {
            log::info!("no --rho given; using a uniform prompt marginal");
            Ok(Distribution::uniform(prompts.collect())?)
        }
    }
}

/// Policy and corpus joints over a shared response alphabet.
fn audit_laws(args: &AuditArgs) -> Result<(JointLaw, JointLaw), CliError> {
    let kernel = read_with(&args.policy, corpus_io::read_kernel)?;
    let corpus = read_with(&args.corpus, corpus_io::parse_corpus)?;
    let rho = rho_or_uniform(args.rho.as_deref(), kernel.prompts().cloned())?;
    let p = blindspot::measure::joint(rho.clone(), kernel, Regime::OnPolicy)?;
    let q = corpus_io::corpus_to_offpolicy(&corpus, &rho, args.mode.into())?.joint;
    Ok(measure::align_response_alphabets(&p, &q)?)
}

fn cmd_audit(args: AuditArgs) -> Result<(), CliError> {
    check_confidence(args.confidence)?;
    let loss = read_with(&args.loss, corpus_io::read_loss)?;
    let (p, q) = audit_laws(&args)?;
    let mut prov = Provenance::new("audit", IDENTITY_TOL);
    prov.q_mode = Some(CorpusMode::from(args.mode).to_string());
    prov.loss_class = Some(loss.class());
    let body = match args.samples {
        Some(n) => {
            prov.seed = Some(args.seed);
            ReportBody::SampledAudit(estimation::sampled_audit(&p, &q, &loss, n, args.seed, args.confidence)?)
        }
        None => ReportBody::ExactAudit(risk::audit(&p, &q, &loss)?),
    };
    let report = Report::new(prov, body);
    write_output(args.output.out.as_deref(), &report.render(args.output.format.into()))
}

fn cmd_demo(args: DemoArgs) -> Result<(), CliError> {
    check_confidence(args.confidence)?;
    let mut config = match &args.config {
        Some(path) => serde_json::from_reader(open(path)?).map_err(|source| CliError::Config {
            path: path.clone(),
            source,
        })?,
        None => DemoConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.scenario.seed = seed;
    }
    if args.exact {
        config.samples = None;
    } else if args.samples.is_some() {
        config.samples = args.samples;
    }
    let report = report::demo_report(config, args.confidence)?;
    write_output(args.output.out.as_deref(), &report.render(args.output.format.into()))
}

fn cmd_classify(args: ClassifyArgs) -> Result<(), CliError> {
    let mut library: Vec<RuleJudge> = discretion::builtin_judges();
    if let Some(path) = &args.judge_rules {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        library.extend(discretion::parse_rule_judges(&text)?);
    }
    let chosen = if args.judges.is_empty() {
        library
    } else {
        let names: Vec<&str> = args.judges.iter().map(|s| s.trim()).collect();
        discretion::select_judges(&library, &names)?
    };
    let judges = JudgeSet::from_rules(chosen)?;
    let corpus = read_with(&args.corpus, corpus_io::parse_corpus)?;
    let records = corpus.records();
    let pairs = records
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let verdicts = judges.verdicts(pair);
            PairOutcome {
                line: corpus.line_of(i),
                prompt: pair.prompt.to_string(),
                category: discretion::classify_verdicts(&verdicts).category,
                verdicts,
            }
        })
        .collect();
    let body = ClassifyReport {
        judges: judges.names().map(str::to_owned).collect(),
        summary: discretion::category_summary(records, &judges),
        supremacy: discretion::supremacy_matrix(records, &judges),
        pairs,
    };
    let report = Report::new(Provenance::new("classify", IDENTITY_TOL), ReportBody::Classify(body));
    write_output(args.output.out.as_deref(), &report.render(args.output.format.into()))
}

fn cmd_sample(args: SampleArgs) -> Result<(), CliError> {
    let law = match (&args.policy, &args.corpus) {
        (Some(policy), _) => {
            let kernel = read_with(policy, corpus_io::read_kernel)?;
            let rho = rho_or_uniform(args.rho.as_deref(), kernel.prompts().cloned())?;
            measure::joint(rho, kernel, Regime::OnPolicy)?
        }
        (None, Some(path)) => {
            let corpus = read_with(path, corpus_io::parse_corpus)?;
            let rho = rho_or_uniform(args.rho.as_deref(), corpus.prompts().cloned())?;
            corpus_io::corpus_to_offpolicy(&corpus, &rho, args.mode.into())?.joint
        }
        (None, None) => return Err(CliError::Usage("one of --policy or --corpus is required".into())),
    };
    let samples = estimation::sample_joint(&law, args.samples, args.seed)?;
    let mut buf = Vec::new();
    corpus_io::write_sample_set(&mut buf, &samples).expect("writing to memory");
    write_output(args.out.as_deref(), std::str::from_utf8(&buf).expect("JSON is UTF-8"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Audit(a) => cmd_audit(a),
        Command::Demo(a) => cmd_demo(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Sample(a) => cmd_sample(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
