//! Command-line entry point.
//!
//! Exit codes: 0 on success (and for `--help`/`--version`), 1 on usage
//! errors, 2 when the inputs cannot be read or processed.

pub mod serve;

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::corpus::{
    filter_by_language, length_ratio_filter, mix_and_shuffle, split, Language, Manifest, ParallelCorpus,
    DEFAULT_DEV_SIZE, DEFAULT_MAX_LEN, DEFAULT_MAX_RATIO, DEFAULT_TEST_SIZE,
};
use crate::metrics::{pairs_from_lines, render_table, Metric, MetricReport};
use crate::subword::{apply_bpe, count_words, train_bpe, vocabulary, BpeModel};
use crate::textnorm::{tokenize, Script, TokenizedSentence};
use crate::trainer::{run_experiment, run_pipeline, PipelineConfig};
use crate::translate::Translator;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tigmt", version, about = "Tigrinya to English machine translation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize raw sentences, one per line
    Tokenize(TokenizeArgs),
    /// Learn BPE merges from tokenized text
    TrainBpe(TrainBpeArgs),
    /// Segment tokenized text with a BPE model
    ApplyBpe(ApplyBpeArgs),
    /// Concatenate and shuffle the datasets of one or more manifests
    Mix(MixArgs),
    /// Carve train/dev/test partitions out of a corpus
    Split(SplitArgs),
    /// Keep pairs by language and length limits
    Filter(FilterArgs),
    /// Run a staged training pipeline from a TOML config
    Train(TrainArgs),
    /// Score hypotheses against references
    Evaluate(EvaluateArgs),
    /// Translate Tigrinya text with a trained checkpoint
    Translate(TranslateArgs),
    /// Serve translations over HTTP
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    /// Script rules to apply
    #[arg(long, default_value = "geez")]
    pub script: Script,
    /// Input file (default: stdin)
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Output file (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainBpeArgs {
    /// Number of merge operations
    #[arg(long)]
    pub merges: usize,
    /// Training text, one sentence per line
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Model file to write
    #[arg(long)]
    pub out: PathBuf,
    /// Tokenize raw input with this script's rules first (default: split on whitespace)
    #[arg(long)]
    pub script: Option<Script>,
    /// Also write the symbol vocabulary, one per line
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ApplyBpeArgs {
    /// BPE model file
    #[arg(long)]
    pub model: PathBuf,
    /// Input file (default: stdin)
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Output file (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Tokenize raw input with this script's rules first (default: split on whitespace)
    #[arg(long)]
    pub script: Option<Script>,
}

#[derive(Debug, Args)]
pub struct OutputPair {
    /// Source-side output file
    #[arg(long)]
    pub out_src: PathBuf,
    /// Target-side output file
    #[arg(long)]
    pub out_tgt: PathBuf,
    /// Optional `dataset<TAB>language` provenance file
    #[arg(long)]
    pub out_tags: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    /// Corpus manifest (TOML `[[dataset]]` entries); repeatable
    #[arg(long, required = true)]
    pub manifest: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputPair,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Corpus manifest
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TEST_SIZE)]
    pub test: usize,
    #[arg(long, default_value_t = DEFAULT_DEV_SIZE)]
    pub dev: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving `{train,dev,test}.{src,tgt,tags}` and a manifest per part
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Corpus manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Keep only pairs tagged with this language
    #[arg(long)]
    pub language: Option<Language>,
    /// Longest side in whitespace tokens
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
    /// Largest allowed token-count ratio between the sides
    #[arg(long, default_value_t = DEFAULT_MAX_RATIO)]
    pub max_ratio: f64,
    #[command(flatten)]
    pub output: OutputPair,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Pipeline config (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Skip the first (multilingual) stage
    #[arg(long)]
    pub baseline: bool,
    /// Run the baseline and the staged pipeline and print both
    #[arg(long, conflicts_with = "baseline")]
    pub experiment: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Hypotheses, one tokenized sentence per line
    #[arg(long)]
    pub hyp: PathBuf,
    /// References, aligned with the hypotheses
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Metrics to compute
    #[arg(long, value_delimiter = ',', default_value = "bleu,chrf,meteor")]
    pub metrics: Vec<Metric>,
    /// System name shown in the table
    #[arg(long, default_value = "system")]
    pub name: String,
    /// Apply the Latin tokenizer to both files first
    #[arg(long)]
    pub tokenize: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Checkpoint file
    #[arg(long, env = "TIGMT_MODEL")]
    pub model: PathBuf,
    /// Source BPE model (default: src.bpe beside the checkpoint)
    #[arg(long)]
    pub src_bpe: Option<PathBuf>,
    /// Target BPE model (default: tgt.bpe beside the checkpoint)
    #[arg(long)]
    pub tgt_bpe: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Text to translate; without it, lines are read from --in or stdin
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long = "in", conflicts_with = "text")]
    pub input: Option<PathBuf>,
    /// Cap on output subword tokens
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = serve::DEFAULT_HOST)]
    pub host: IpAddr,
    #[arg(long, env = "TIGMT_PORT", default_value_t = serve::DEFAULT_PORT)]
    pub port: u16,
    /// Directory with the web client's files (default: built-in page)
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Concurrent decodes (default: number of CPUs)
    #[arg(long)]
    pub workers: Option<usize>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let default_level = match cli.command {
        Command::Train(_) | Command::Serve(_) => "info",
        _ => "warn",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level)).try_init();
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_DATA
        }
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Tokenize(a) => cmd_tokenize(a),
        Command::TrainBpe(a) => cmd_train_bpe(a),
        Command::ApplyBpe(a) => cmd_apply_bpe(a),
        Command::Mix(a) => cmd_mix(a),
        Command::Split(a) => cmd_split(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn read_input_lines(path: Option<&Path>) -> Result<Vec<String>> {
    let reader: Box<dyn Read> = match path {
        Some(p) => Box::new(fs::File::open(p).with_context(|| format!("opening {}", p.display()))?),
        None => Box::new(io::stdin()),
    };
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.with_context(|| format!("reading line {}", i + 1))?;
        lines.push(line.strip_suffix('\r').map(str::to_owned).unwrap_or(line));
    }
    Ok(lines)
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn to_sentence(line: &str, script: Option<Script>) -> TokenizedSentence {
    match script {
        Some(s) => tokenize(line, s),
        None => TokenizedSentence::from_joined(line, Script::Latin),
    }
}

fn cmd_tokenize(a: TokenizeArgs) -> Result<()> {
    let lines = read_input_lines(a.input.as_deref())?;
    let mut out = open_output(a.out.as_deref())?;
    for line in &lines {
        writeln!(out, "{}", tokenize(line, a.script).joined())?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_train_bpe(a: TrainBpeArgs) -> Result<()> {
    let lines = read_input_lines(Some(&a.input))?;
    let sentences: Vec<TokenizedSentence> = lines.iter().map(|l| to_sentence(l, a.script)).collect();
    let counts = count_words(&sentences);
    let model = train_bpe(&counts, a.merges);
    model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("learned {} merges from {} word types", model.merges().len(), counts.len());
    if let Some(v) = a.vocab {
        let symbols = vocabulary(&model, &counts);
        fs::write(&v, symbols.join("\n") + "\n").with_context(|| format!("writing {}", v.display()))?;
    }
    Ok(())
}

fn cmd_apply_bpe(a: ApplyBpeArgs) -> Result<()> {
    let model = BpeModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let lines = read_input_lines(a.input.as_deref())?;
    let mut out = open_output(a.out.as_deref())?;
    for line in &lines {
        writeln!(out, "{}", apply_bpe(&to_sentence(line, a.script), &model).join(" "))?;
    }
    out.flush()?;
    Ok(())
}

fn load_manifest_corpus(path: &Path) -> Result<ParallelCorpus> {
    let manifest = Manifest::load(path)?;
    let parts = manifest.load_all()?;
    Ok(parts.into_iter().flat_map(|c| c.pairs).collect())
}

fn write_pair(corpus: &ParallelCorpus, out: &OutputPair) -> Result<()> {
    corpus.write_aligned(&out.out_src, &out.out_tgt, out.out_tags.as_deref())?;
    Ok(())
}

fn cmd_mix(a: MixArgs) -> Result<()> {
    let mut corpora = Vec::new();
    for m in &a.manifest {
        let manifest = Manifest::load(m)?;
        corpora.extend(manifest.load_all()?);
    }
    let mixed = mix_and_shuffle(&corpora, a.seed);
    write_pair(&mixed, &a.output)?;
    eprintln!("mixed {} pairs from {} datasets", mixed.len(), corpora.len());
    Ok(())
}

/// Writes one part as `{part}.{src,tgt,tags}` plus a `{part}.toml` manifest
/// listing one dataset per (dataset, language) group.
fn write_part(dir: &Path, part: &str, corpus: &ParallelCorpus) -> Result<()> {
    corpus.write_aligned(
        &dir.join(format!("{part}.src")),
        &dir.join(format!("{part}.tgt")),
        Some(&dir.join(format!("{part}.tags"))),
    )?;
    let mut groups: Vec<(String, Language)> = Vec::new();
    for p in corpus.iter() {
        let key = (p.dataset.to_string(), p.language);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    let mut manifest = String::new();
    for (i, (dataset, language)) in groups.iter().enumerate() {
        let stem = format!("{part}.{i}");
        let sub: ParallelCorpus = corpus
            .iter()
            .filter(|p| &*p.dataset == dataset && p.language == *language)
            .cloned()
            .collect();
        sub.write_aligned(&dir.join(format!("{stem}.src")), &dir.join(format!("{stem}.tgt")), None)?;
        manifest.push_str(&format!(
            "[[dataset]]\nname = {}\nlanguage = \"{language}\"\nsource_path = \"{stem}.src\"\ntarget_path = \"{stem}.tgt\"\nexpected_count = {}\n\n",
            toml::Value::String(dataset.clone()),
            sub.len()
        ));
    }
    fs::write(dir.join(format!("{part}.toml")), manifest)?;
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let corpus = load_manifest_corpus(&a.manifest)?;
    let parts = split(&corpus, a.test, a.dev, a.seed)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_part(&a.out_dir, "train", &parts.train)?;
    write_part(&a.out_dir, "dev", &parts.dev)?;
    write_part(&a.out_dir, "test", &parts.test)?;
    eprintln!("train {} / dev {} / test {}", parts.train.len(), parts.dev.len(), parts.test.len());
    Ok(())
}

fn cmd_filter(a: FilterArgs) -> Result<()> {
    if a.max_len == 0 || a.max_ratio < 1.0 {
        bail!("--max-len must be positive and --max-ratio at least 1");
    }
    let mut corpus = load_manifest_corpus(&a.manifest)?;
    let before = corpus.len();
    if let Some(lang) = a.language {
        corpus = filter_by_language(&corpus, lang);
    }
    let kept = length_ratio_filter(&corpus, a.max_len, a.max_ratio);
    write_pair(&kept, &a.output)?;
    eprintln!("kept {} of {before} pairs", kept.len());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut config = PipelineConfig::load(&a.config)?;
    if a.experiment {
        let (_, _, rows) = run_experiment(&config)?;
        print!("{}", render_table(&rows));
        return Ok(());
    }
    config.baseline_mode |= a.baseline;
    let outcomes = run_pipeline(&config)?;
    for o in &outcomes {
        println!("# {}", o.name);
        print!("{}", o.log.lines());
    }
    let reports: Vec<MetricReport> = outcomes.into_iter().map(|o| o.report).collect();
    print!("{}", render_table(&reports));
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let mut hyps = read_input_lines(Some(&a.hyp))?;
    let mut refs = read_input_lines(Some(&a.reference))?;
    if a.tokenize {
        hyps = hyps.iter().map(|l| tokenize(l, Script::Latin).joined()).collect();
        refs = refs.iter().map(|l| tokenize(l, Script::Latin).joined()).collect();
    }
    let pairs = pairs_from_lines(&hyps, &refs)?;
    let report = MetricReport::evaluate(&a.name, &pairs, &a.metrics)?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    println!();
    print!("{}", report.key_values());
    Ok(())
}

fn load_translator(m: &ModelArgs) -> Result<Translator> {
    Translator::load(&m.model, m.src_bpe.as_deref(), m.tgt_bpe.as_deref())
        .with_context(|| format!("loading model {}", m.model.display()))
}

fn cmd_translate(a: TranslateArgs) -> Result<()> {
    let translator = load_translator(&a.model)?;
    let inputs = match a.text {
        Some(t) => vec![t],
        None => read_input_lines(a.input.as_deref())?,
    };
    let mut out = open_output(None)?;
    for line in &inputs {
        if line.trim().is_empty() {
            writeln!(out)?;
            continue;
        }
        writeln!(out, "{}", translator.translate(line, a.max_len)?.translation)?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let workers = a
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let config = serve::ServeConfig {
        model: a.model.model,
        src_bpe: a.model.src_bpe,
        tgt_bpe: a.model.tgt_bpe,
        addr: SocketAddr::new(a.host, a.port),
        static_dir: a.static_dir,
        workers,
    };
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(serve::serve(config))
}
