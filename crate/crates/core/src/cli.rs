//! Command-line front end: `decode`, `ingest`, `learn`, `generate` and
//! `evaluate`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::codec::{self, DEFAULT_MAX_PASSES};
use crate::gauntlet;
use crate::generator::{self, GenerationMode, GenerationRequest, Obfuscation, DEFAULT_BODY};
use crate::learner::{self, LearnerConfig, LikelihoodMode};
use crate::locator::{Locator, Weights};
use crate::profile::{self, AttackVectorProfile, Provenance};
use crate::tokenizer::{tokenize, RawCorpus, TokenSymbol};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutcome {
    pub exit_code: i32,
    pub summary: String,
    pub diagnostics: String,
}

#[derive(Debug, Parser)]
#[command(
    name = "vectormorph",
    version,
    about = "Learn XSS attack vector structure and generate mutated attacks"
)]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Suppress diagnostics on standard error.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode an obfuscated string to its canonical form.
    Decode(DecodeArgs),
    /// Locate and tokenize the attacks in a file of XSS URLs.
    Ingest(IngestArgs),
    /// Learn an attack vector profile from token sequences.
    Learn(LearnArgs),
    /// Generate mutated attacks from a profile.
    Generate(GenerateArgs),
    /// Evaluate payloads against a sink suite.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long = "in")]
    input: String,
    #[arg(long, default_value_t = DEFAULT_MAX_PASSES)]
    max_passes: usize,
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// One URL per line; `#` starts a comment line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    sequences: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Six comma-separated locator feature weights.
    #[arg(long)]
    weights: Option<Weights>,
    /// Ingestion time to record, in Unix seconds (defaults to now).
    #[arg(long)]
    timestamp: Option<u64>,
}

#[derive(Debug, Args)]
struct LearnArgs {
    #[arg(long)]
    sequences: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// `viterbi` or `forward`.
    #[arg(long, default_value = "viterbi")]
    mode: LikelihoodMode,
    #[arg(long)]
    max_merges: Option<usize>,
    /// Merge after every incorporated sequence.
    #[arg(long)]
    interleave: bool,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    profile: PathBuf,
    /// Referred attack whose structure is mutated.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value = DEFAULT_BODY)]
    body: String,
    /// `path` or `walk`.
    #[arg(long, default_value = "path")]
    mode: GenerationMode,
    /// `none`, `percent` or `entity`.
    #[arg(long, default_value = "none")]
    obfuscate: Obfuscation,
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    payloads: PathBuf,
    /// Sink suite file; the built-in suite when omitted.
    #[arg(long)]
    sinks: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_BODY)]
    body: String,
    #[arg(long)]
    report: Option<PathBuf>,
}

enum Failure {
    Data(String),
    Internal(String),
}

type Outcome = Result<String, Failure>;

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

/// Escape line breaks so every payload fits on one line.
pub fn escape_payload(p: &str) -> String {
    p.replace('\n', "%0A").replace('\r', "%0D")
}

/// Parse and execute `argv` (including the program name).
pub fn run<I, T>(argv: I) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => CommandOutcome {
                    exit_code: if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        EXIT_USAGE
                    } else {
                        EXIT_OK
                    },
                    summary: text,
                    diagnostics: String::new(),
                },
                _ => CommandOutcome {
                    exit_code: EXIT_USAGE,
                    summary: String::new(),
                    diagnostics: text,
                },
            };
        }
    };
    let mut diag = String::new();
    if !cli.quiet {
        let _ = writeln!(diag, "config: jobs={:?} {:?}", cli.jobs, cli.command);
    }
    let result = match cli.jobs {
        Some(0) => Err(Failure::Data("--jobs must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli.command, &mut diag)),
            Err(e) => Err(Failure::Internal(e.to_string())),
        },
        None => dispatch(&cli.command, &mut diag),
    };
    if cli.quiet {
        diag.clear();
    }
    match result {
        Ok(summary) => CommandOutcome {
            exit_code: EXIT_OK,
            summary,
            diagnostics: diag,
        },
        Err(f) => {
            let (code, msg) = match f {
                Failure::Data(m) => (EXIT_DATA, m),
                Failure::Internal(m) => (EXIT_INTERNAL, m),
            };
            let _ = writeln!(diag, "error: {msg}");
            CommandOutcome {
                exit_code: code,
                summary: String::new(),
                diagnostics: diag,
            }
        }
    }
}

fn dispatch(cmd: &Command, diag: &mut String) -> Outcome {
    match cmd {
        Command::Decode(a) => decode(a),
        Command::Ingest(a) => ingest(a, diag),
        Command::Learn(a) => learn(a, diag),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn decode(a: &DecodeArgs) -> Outcome {
    let trace = codec::decode_fixpoint(a.input.as_bytes(), a.max_passes).map_err(data)?;
    let layers: Vec<String> = trace.layers.iter().map(ToString::to_string).collect();
    Ok(format!(
        "{}\npasses: {}\nlayers: {}\n",
        trace.output,
        trace.passes,
        if layers.is_empty() {
            "-".into()
        } else {
            layers.join(",")
        }
    ))
}

fn ingest(a: &IngestArgs, diag: &mut String) -> Outcome {
    let text = read(&a.input)?;
    let locator = Locator::new(a.weights.unwrap_or_default());
    let mut urls = 0;
    let mut skipped = 0;
    let mut seqs: Vec<Vec<TokenSymbol>> = Vec::new();
    let mut corpus = RawCorpus::new();
    for (n, line) in text.lines().enumerate() {
        let url = line.trim();
        if url.is_empty() || url.starts_with('#') {
            continue;
        }
        urls += 1;
        let attack = match locator.locate_attack(url) {
            Ok(found) => found.candidate.decoded,
            Err(e) => {
                skipped += 1;
                let _ = writeln!(diag, "line {}: skipped: {e}", n + 1);
                continue;
            }
        };
        let seq = tokenize(&attack);
        if seq.is_empty() {
            skipped += 1;
            let _ = writeln!(diag, "line {}: skipped: located value is empty", n + 1);
            continue;
        }
        corpus.absorb(&seq);
        seqs.push(seq.symbols());
    }
    let stamp = a.timestamp.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    });
    profile::save_sequences(&seqs, &a.sequences).map_err(data)?;
    profile::save_corpus(&corpus, stamp, &a.corpus).map_err(data)?;
    Ok(format!(
        "{urls} urls, {} sequences, {skipped} skipped\n",
        seqs.len()
    ))
}

fn learn(a: &LearnArgs, diag: &mut String) -> Outcome {
    let seqs = profile::load_sequences(&a.sequences).map_err(data)?;
    let (corpus, stamp) = profile::load_corpus(&a.corpus).map_err(data)?;
    if seqs.is_empty() {
        return Err(Failure::Data(format!(
            "{}: no sequences",
            a.sequences.display()
        )));
    }
    let cfg = LearnerConfig {
        dirichlet_alpha: a.alpha,
        dirichlet_beta: a.beta,
        structure_lambda: a.lambda,
        likelihood_mode: a.mode,
        max_merges: a.max_merges,
        interleave: a.interleave,
    };
    let outcome = learner::learn_with_observer(&seqs, &cfg, |_, _| {}).map_err(data)?;
    let _ = writeln!(
        diag,
        "merged {} -> {} states in {} merges ({} rejected)",
        outcome.chain_states,
        outcome.model.num_states(),
        outcome.merges,
        outcome.rejected
    );
    let p = AttackVectorProfile {
        model: outcome.model,
        corpus,
        config: cfg,
        provenance: Provenance {
            sequence_count: seqs.len() as u64,
            ingest_unix_seconds: stamp,
        },
    };
    p.validate().map_err(data)?;
    profile::save(&p, &a.out).map_err(data)?;
    Ok(format!(
        "states: {}\nalphabet: {}\nsequences: {}\nlog posterior: {:.6}\n",
        p.model.num_states(),
        p.alphabet().len(),
        seqs.len(),
        outcome.final_log_posterior
    ))
}

fn generate(a: &GenerateArgs) -> Outcome {
    let p = profile::load(&a.profile).map_err(data)?;
    let seed = match (&a.seed, a.mode) {
        (Some(s), _) => s.clone(),
        (None, GenerationMode::FreeWalk) => String::new(),
        (None, GenerationMode::PathResample) => {
            return Err(Failure::Data("--seed is required in path mode".into()))
        }
    };
    let req = GenerationRequest {
        seed_attack: seed,
        body: a.body.clone(),
        count: a.count,
        mode: a.mode,
        obfuscation: a.obfuscate,
        rng_seed: a.rng_seed,
        max_attempts: generator::DEFAULT_MAX_ATTEMPTS,
    };
    let attacks = generator::generate(&p, &req).map_err(data)?;
    let mut out = String::new();
    for m in &attacks {
        out.push_str(&escape_payload(&m.text));
        out.push('\n');
    }
    profile::write_atomic(&a.out, out.as_bytes()).map_err(data)?;
    Ok(format!(
        "{} payloads written to {}\n",
        attacks.len(),
        a.out.display()
    ))
}

fn evaluate(a: &EvaluateArgs) -> Outcome {
    let payloads: Vec<String> = read(&a.payloads)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    let sinks = match &a.sinks {
        Some(path) => gauntlet::load_suite(path).map_err(data)?,
        None => gauntlet::default_suite(),
    };
    let report = gauntlet::evaluate(&payloads, &sinks, &a.body).map_err(data)?;
    let text = format!(
        "payloads: {}\nsinks: {}\n{report}",
        payloads.len(),
        sinks.len()
    );
    if let Some(path) = &a.report {
        profile::write_atomic(path, text.as_bytes())
            .map_err(|e| Failure::Internal(e.to_string()))?;
    }
    Ok(text)
}
