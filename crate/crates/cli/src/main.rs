mod data;
mod repl;

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use codesuggest::checkpoint::{CheckpointError, ModelCheckpoint};
use codesuggest::config::RunConfig;
use codesuggest::corpus::{split_projects, Part, ProjectSplit, SymbolFile, Vocabulary};
use codesuggest::eval::{tally, MetricsReport, MetricsRow};
use codesuggest::neural::{self, IntroTracker, Model, NeuralError, Session};
use codesuggest::ngram::{train_mkn, NgramModel};
use codesuggest::par::{self, Execution};
use codesuggest::pylex::{read_tokens, tokenize};
use codesuggest::pynorm::{normalize, Numbering};
use codesuggest::synth::{generate, SynthConfig};

use crate::data::CorpusFile;

#[derive(Parser)]
#[command(name = "codesuggest", version, about = "Code suggestion language models for Python")]
struct Cli {
    /// Single-threaded execution with bit-reproducible results.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize and anonymize every .py file under a directory.
    Normalize(NormalizeArgs),
    /// Split projects and build the vocabulary over the training part.
    BuildVocab(BuildVocabArgs),
    /// Train an interpolated Modified Kneser-Ney n-gram model.
    TrainNgram(TrainNgramArgs),
    /// Train a neural model (lstm, attention or pointer).
    TrainNeural(TrainNeuralArgs),
    /// Perplexity and accuracy of trained models on one corpus part.
    Evaluate(EvaluateArgs),
    /// Suggest the next tokens after a context, or run an interactive session.
    Suggest(SuggestArgs),
    /// Per-token pointer diagnostics of a sparse pointer model.
    Trace(TraceArgs),
    /// Generate the planted long-range re-use corpus.
    SynthCorpus(SynthArgs),
}

#[derive(Args)]
struct NormalizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Number identifiers randomly from this seed instead of sequentially.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CorpusArgs {
    /// Root of a normalized corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Project split file; without it every file is used.
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 5)]
    min_count: u64,
    /// Largest vocabulary size, special tokens included.
    #[arg(long)]
    cap: Option<usize>,
    /// Train/dev/test project ratios, used when writing a new split.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    ratios: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TrainNgramArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 6)]
    order: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainNeuralArgs {
    /// `key = value` configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-epoch report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    /// Attention window or pointer memory size.
    #[arg(long)]
    memory: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    unroll: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    sample_size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Any other configuration key, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value = "test")]
    part: Part,
    #[arg(long)]
    ngram: Vec<PathBuf>,
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Metrics report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the vocabulary path recorded in the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct SuggestArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Normalized token file; a `.sym` file next to it supplies introductions.
    #[arg(long)]
    context: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long)]
    interactive: bool,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    context: PathBuf,
    /// One JSON record per line.
    #[arg(long)]
    output: PathBuf,
    /// Attention matrix: one row per step, one column per memory slot.
    #[arg(long)]
    heatmap: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 200)]
    num_files: usize,
    #[arg(long, default_value_t = 10)]
    files_per_project: usize,
    #[arg(long, default_value_t = 60)]
    min_distance: usize,
    #[arg(long, default_value_t = 100)]
    max_distance: usize,
    /// Live identifiers per file.
    #[arg(long, default_value_t = 1)]
    identifiers: usize,
    /// Largest number of distractor identifiers per file.
    #[arg(long, default_value_t = 2)]
    distractors: usize,
    #[arg(long, default_value_t = 4)]
    reuses: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// A failure with its exit code: 1 usage, 2 data, 3 numerical divergence.
struct Fail {
    code: u8,
    err: anyhow::Error,
}

type Outcome = Result<(), Fail>;

fn usage(err: impl Into<anyhow::Error>) -> Fail {
    Fail { code: 1, err: err.into() }
}

impl From<anyhow::Error> for Fail {
    fn from(err: anyhow::Error) -> Self {
        Fail { code: 2, err }
    }
}

impl From<io::Error> for Fail {
    fn from(err: io::Error) -> Self {
        Fail { code: 2, err: err.into() }
    }
}

impl From<NeuralError> for Fail {
    fn from(err: NeuralError) -> Self {
        let code = match err {
            NeuralError::DivergedLoss { .. } => 3,
            NeuralError::BadConfig(_) => 1,
            _ => 2,
        };
        Fail { code, err: err.into() }
    }
}

impl From<CheckpointError> for Fail {
    fn from(err: CheckpointError) -> Self {
        match err {
            CheckpointError::Model(e) => e.into(),
            e => Fail { code: 2, err: e.into() },
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let exec = if cli.deterministic { Execution::Sequential } else { Execution::Parallel };
    let result = match cli.command {
        Command::Normalize(a) => cmd_normalize(a, exec),
        Command::BuildVocab(a) => cmd_build_vocab(a, exec),
        Command::TrainNgram(a) => cmd_train_ngram(a, exec),
        Command::TrainNeural(a) => cmd_train_neural(a, cli.deterministic),
        Command::Evaluate(a) => cmd_evaluate(a, exec),
        Command::Suggest(a) => cmd_suggest(a),
        Command::Trace(a) => cmd_trace(a),
        Command::SynthCorpus(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = format!("{:#}", f.err).replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(f.code)
        }
    }
}

fn cmd_normalize(a: NormalizeArgs, exec: Execution) -> Outcome {
    let files = data::list_files(&a.input, "py")?;
    if files.is_empty() {
        return Err(anyhow!("no .py files under {}", a.input.display()).into());
    }
    let numbering = a.seed.map_or(Numbering::Sequential, Numbering::SeededRandom);
    let results = par::map(exec, &files, |(path, rel)| -> anyhow::Result<()> {
        let bytes = fs::read(path)?;
        let src = String::from_utf8_lossy(&bytes);
        let tokens = tokenize(&src, false).with_context(|| format!("{}", rel.display()))?;
        let nf = normalize(&tokens, numbering);
        data::write_normalized(&a.output.join(rel), &nf)
    });
    let mut skipped = 0;
    for r in &results {
        if let Err(e) = r {
            log::warn!("skipped {e:#}");
            skipped += 1;
        }
    }
    if skipped == files.len() {
        return Err(anyhow!("every input file failed to tokenize").into());
    }
    println!("normalized {} files, skipped {skipped}", files.len() - skipped);
    Ok(())
}

fn parse_ratios(s: &str) -> Result<[f64; 3], Fail> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(anyhow!("bad ratios {s:?}")))?;
    <[f64; 3]>::try_from(v).map_err(|_| usage(anyhow!("expected three ratios, got {s:?}")))
}

fn cmd_build_vocab(a: BuildVocabArgs, exec: Execution) -> Outcome {
    let ratios = parse_ratios(&a.ratios)?;
    let files = data::load_corpus(&a.corpus.corpus, exec)?;
    let split = match &a.corpus.split {
        Some(path) if path.exists() => Some(data::read_split(path)?),
        Some(path) => {
            let s = split_projects(&data::projects(&files), ratios, a.seed).map_err(anyhow::Error::from)?;
            data::write_with(path, |w| s.write(w))?;
            Some(s)
        }
        None => None,
    };
    let train = data::select(&files, split.as_ref(), Part::Train);
    let symbols: Vec<Vec<String>> = train.iter().map(|f| f.symbols.symbols.clone()).collect();
    let vocab = Vocabulary::build_capped(&symbols, a.min_count, a.cap, exec).map_err(anyhow::Error::from)?;
    data::write_with(&a.output, |w| vocab.write(w))?;
    println!("vocabulary of {} tokens from {} files", vocab.len(), train.len());
    Ok(())
}

fn load_split(corpus: &CorpusArgs, exec: Execution) -> Result<(Vec<CorpusFile>, Option<ProjectSplit>), Fail> {
    let files = data::load_corpus(&corpus.corpus, exec)?;
    let split = corpus.split.as_deref().map(data::read_split).transpose()?;
    Ok((files, split))
}

fn cmd_train_ngram(a: TrainNgramArgs, exec: Execution) -> Outcome {
    let (files, split) = load_split(&a.corpus, exec)?;
    let vocab = data::read_vocab(&a.vocab)?;
    let train: Vec<Vec<u32>> =
        data::encode(&vocab, &data::select(&files, split.as_ref(), Part::Train)).into_iter().map(|f| f.ids).collect();
    let model = train_mkn(&train, a.order, vocab.len(), exec).map_err(|e| match e {
        codesuggest::ngram::NgramError::BadOrder(_) => usage(e),
        e => anyhow::Error::from(e).into(),
    })?;
    data::write_with(&a.output, |w| model.write(w))?;
    println!("trained {}-gram model on {} files", a.order, train.len());
    Ok(())
}

fn run_config(a: &TrainNeuralArgs, deterministic: bool) -> Result<RunConfig, Fail> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    let named = [
        ("arch", &a.arch),
        ("memory", &a.memory),
        ("hidden", &a.hidden),
        ("epochs", &a.epochs),
        ("lr", &a.lr),
        ("batch_size", &a.batch_size),
        ("unroll", &a.unroll),
        ("dropout", &a.dropout),
        ("sample_size", &a.sample_size),
        ("seed", &a.seed),
    ];
    for (k, v) in named {
        if let Some(v) = v {
            cfg.set(k, v).map_err(usage)?;
        }
    }
    for kv in &a.sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(anyhow!("expected KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v).map_err(usage)?;
    }
    let paths = [("corpus", &a.corpus), ("vocab", &a.vocab), ("checkpoint", &a.output), ("report", &a.report)];
    for (k, v) in paths {
        if let Some(p) = v {
            cfg.set(k, &p.to_string_lossy()).map_err(usage)?;
        }
    }
    if deterministic {
        cfg.deterministic = true;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn cmd_train_neural(a: TrainNeuralArgs, deterministic: bool) -> Outcome {
    let cfg = run_config(&a, deterministic)?;
    let need = |p: &Option<PathBuf>, what: &str| p.clone().ok_or_else(|| usage(anyhow!("missing {what} path")));
    let corpus = need(&cfg.corpus, "corpus")?;
    let vocab_path = need(&cfg.vocab, "vocab")?;
    let out = need(&cfg.checkpoint, "checkpoint (--output)")?;
    let tc = cfg.train_config().map_err(usage)?;
    let files = data::load_corpus(&corpus, tc.exec)?;
    let split = a.split.as_deref().map(data::read_split).transpose()?;
    let vocab = data::read_vocab(&vocab_path)?;
    let train = data::encode(&vocab, &data::select(&files, split.as_ref(), Part::Train));
    let dev = match &split {
        Some(s) => data::encode(&vocab, &data::select(&files, Some(s), Part::Dev)),
        None => Vec::new(),
    };
    let mc = cfg.model_config(vocab.len()).map_err(usage)?;
    let mut model = Model::<f32>::init(mc, cfg.seed)?;
    let reports = neural::train(&mut model, &train, &dev, &tc, |r| {
        let dev = r.dev_perplexity.map_or_else(String::new, |p| format!(" dev_pp {p:.3}"));
        println!("epoch {} lr {:.4} loss {:.4}{dev}", r.epoch, r.lr, r.train_loss);
    })?;
    let ck = ModelCheckpoint::new(cfg.clone(), &model, &vocab);
    ck.save(&out)?;
    if let Some(p) = &cfg.report {
        let json = serde_json::to_string_pretty(&reports).map_err(anyhow::Error::from)?;
        data::write_with(p, |w| writeln!(w, "{json}"))?;
    }
    println!("saved {} model to {}", mc.arch, out.display());
    Ok(())
}

fn load_model(a: &ModelArgs) -> Result<(Model<f32>, Vocabulary, ModelCheckpoint), Fail> {
    let ck = ModelCheckpoint::load(&a.checkpoint).map_err(|e| {
        let f = Fail::from(e);
        Fail { code: f.code, err: f.err.context(format!("loading {}", a.checkpoint.display())) }
    })?;
    let vpath = a
        .vocab
        .clone()
        .or_else(|| ck.header.config.vocab.clone())
        .ok_or_else(|| usage(anyhow!("no --vocab given and none recorded in the checkpoint")))?;
    let vocab = data::read_vocab(&vpath)?;
    ck.check_vocab(&vocab)?;
    Ok((ck.model()?, vocab, ck))
}

fn cmd_evaluate(a: EvaluateArgs, exec: Execution) -> Outcome {
    if a.ngram.is_empty() && a.checkpoint.is_empty() {
        return Err(usage(anyhow!("give at least one --ngram or --checkpoint")));
    }
    let (files, split) = load_split(&a.corpus, exec)?;
    let vocab = data::read_vocab(&a.vocab)?;
    let part = data::encode(&vocab, &data::select(&files, split.as_ref(), a.part));
    if part.is_empty() {
        return Err(anyhow!("no files in the {} part", a.part).into());
    }
    let mut report = MetricsReport::default();
    for p in &a.ngram {
        let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
        let m = NgramModel::read(BufReader::new(f)).map_err(anyhow::Error::from)?;
        if m.vocab_size() != vocab.len() {
            return Err(anyhow!("{} was trained with a different vocabulary", p.display()).into());
        }
        let name = format!("{}-gram", m.order());
        report.rows.push(MetricsRow::from_tally(&name, a.part.as_str(), &tally(&m, &part, exec)));
    }
    for p in &a.checkpoint {
        let (m, _, _) = load_model(&ModelArgs { checkpoint: p.clone(), vocab: Some(a.vocab.clone()) })?;
        let name = m.config.arch.to_string();
        report.rows.push(MetricsRow::from_tally(&name, a.part.as_str(), &tally(&m, &part, exec)));
    }
    print!("{}", report.render_table());
    if let Some(p) = &a.report {
        let json = report.to_json();
        data::write_with(p, |w| writeln!(w, "{json}"))?;
    }
    Ok(())
}

/// Context ids and introduction flags from a normalized token file. Flags
/// come from the `.sym` file when present, else from first occurrences of
/// anonymous names.
fn read_context(path: &Path, vocab: &Vocabulary) -> Result<(Vec<u32>, Vec<bool>), Fail> {
    let sym = path.with_extension(data::SYMBOL_EXT);
    if sym.exists() {
        let nf = data::read_normalized(path)?;
        let enc = vocab.encode(&SymbolFile::from_normalized(&nf));
        return Ok((enc.ids, enc.intro));
    }
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let tokens = read_tokens(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    let symbols: Vec<String> =
        tokens.iter().filter_map(codesuggest::corpus::model_symbol).map(String::from).collect();
    let ids: Vec<u32> = symbols.iter().map(|s| vocab.id(s)).collect();
    let mut tracker = IntroTracker::new(vocab);
    let intro = ids.iter().map(|&i| tracker.observe(i)).collect();
    Ok((ids, intro))
}

fn cmd_suggest(a: SuggestArgs) -> Outcome {
    if a.beam == 0 || a.m == 0 {
        return Err(usage(anyhow!("--m and --beam must be positive")));
    }
    let (model, vocab, _) = load_model(&a.model)?;
    let mut session = Session::new(&model, IntroTracker::new(&vocab));
    if let Some(ctx) = &a.context {
        let (ids, intro) = read_context(ctx, &vocab)?;
        for (&id, &fl) in ids.iter().zip(&intro) {
            session.feed_with_intro(id, fl);
        }
    }
    if a.interactive {
        let stdin = io::stdin();
        let stdout = io::stdout();
        repl::run(&mut session, &vocab, stdin.lock(), stdout.lock(), a.m, a.beam)?;
        return Ok(());
    }
    if a.context.is_none() {
        return Err(usage(anyhow!("give --context or --interactive")));
    }
    let s = session.suggest(a.m, a.beam)?;
    println!("{}", vocab.decode(&s.tokens).join(" "));
    log::info!("joint log-probability {:.6}", s.logprob);
    Ok(())
}

fn cmd_trace(a: TraceArgs) -> Outcome {
    let (model, vocab, _) = load_model(&a.model)?;
    let (ids, intro) = read_context(&a.context, &vocab)?;
    let records = neural::trace(&model, &vocab, &ids, &intro).map_err(|e| match e {
        NeuralError::NotPointer => usage(e),
        e => e.into(),
    })?;
    data::write_with(&a.output, |w| {
        for r in &records {
            writeln!(w, "{}", serde_json::to_string(r).expect("serializable record"))?;
        }
        Ok(())
    })?;
    if let Some(path) = &a.heatmap {
        let k = model.config.arch.capacity();
        data::write_with(path, |w| {
            writeln!(w, "# rows: steps; columns: memory slots, oldest first; values: attention weight")?;
            for r in &records {
                let row: Vec<String> = (0..k)
                    .map(|j| format!("{:.6}", r.memory.get(j).map_or(0.0, |m| m.alpha)))
                    .collect();
                writeln!(w, "{}", row.join(" "))?;
            }
            Ok(())
        })?;
    }
    println!("wrote {} trace records", records.len());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Outcome {
    let cfg = SynthConfig {
        num_files: a.num_files,
        files_per_project: a.files_per_project,
        min_distance: a.min_distance,
        max_distance: a.max_distance,
        identifiers: (a.identifiers, a.identifiers),
        distractors: (a.distractors.min(1), a.distractors),
        reuses: a.reuses,
        seed: a.seed,
    };
    let files = generate(&cfg).map_err(usage)?;
    for f in &files {
        data::write_normalized(&a.output.join(&f.project).join(&f.name), &f.file)?;
    }
    println!("generated {} files", files.len());
    Ok(())
}
