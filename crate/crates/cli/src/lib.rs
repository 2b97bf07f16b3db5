//! Command implementations behind the `multiattn` binary.
//!
//! Every command is a plain function so tests can drive them without
//! spawning processes. Errors carry the exit code class: configuration and
//! usage problems exit with 2, failures while doing the work with 1.

pub mod config;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use multiattn::checkpoint;
use multiattn::combination::{CombinationConfig, Strategy};
use multiattn::gradcheck::{self, FdReport, DEFAULT_EPS};
use multiattn::metrics;
use multiattn::model::{EncodedExample, ModelConfig, MultiSourceModel, SourceKind};
use multiattn::recurrent::DecoderKind;
use multiattn::rng::SeededRng;
use multiattn::tasks::{self, apply_edits_lenient, EditOp, ParallelExample, Source, Vocab};
use multiattn::train::{self, CurvePoint, StopReason, TrainReport};

pub use config::{DataConfig, ExperimentConfig, ModelSection, Task};

/// Gradient-check tolerance on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config files, missing inputs or mismatched artifacts.
    Config(anyhow::Error),
    /// Anything that went wrong while doing the work.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (CliError::Config(e) | CliError::Runtime(e)) = self;
        write!(f, "{e:#}")
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

trait Classify<T> {
    fn config_err(self) -> CliResult<T>;
    fn runtime_err(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config_err(self) -> CliResult<T> {
        self.map_err(|e| CliError::Config(e.into()))
    }

    fn runtime_err(self) -> CliResult<T> {
        self.map_err(|e| CliError::Runtime(e.into()))
    }
}

/// Train/valid/test examples plus the vocabulary covering them.
#[derive(Debug, Clone)]
pub struct Splits {
    pub task: Task,
    pub train: Vec<ParallelExample>,
    pub valid: Vec<ParallelExample>,
    pub test: Vec<ParallelExample>,
    pub vocab: Vocab,
}

/// Generates all three splits from one seed; each split gets its own
/// derived generator seed.
pub fn generate_splits(data: &DataConfig, seed: u64) -> multiattn::Result<Splits> {
    let mut rng = SeededRng::new(seed);
    let seeds = [rng.next_u64(), rng.next_u64(), rng.next_u64()];
    let sizes = [data.train_size, data.valid_size, data.test_size];
    let mut out = Vec::with_capacity(3);
    for (&s, &n) in seeds.iter().zip(&sizes) {
        out.push(match data.task {
            Task::MaskedCopy => tasks::gen_masked_copy(s, &data.masked_copy(n))?,
            Task::ToyApe => tasks::gen_toy_ape(s, &data.toy_ape(n))?,
        });
    }
    let vocab = match data.task {
        Task::MaskedCopy => tasks::masked_copy_vocab(data.vocab_size, data.max_len),
        Task::ToyApe => tasks::toy_ape_vocab(data.vocab_size),
    };
    let test = out.pop().unwrap();
    let valid = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok(Splits {
        task: data.task,
        train,
        valid,
        test,
        vocab,
    })
}

/// Vocabulary of every token in the given examples, in order of first
/// appearance.
pub fn collect_vocab<'a>(examples: impl IntoIterator<Item = &'a ParallelExample>) -> Vocab {
    let mut tokens = Vec::new();
    for ex in examples {
        for src in &ex.sources {
            if let Source::Tokens(t) = src {
                tokens.extend(t.iter().cloned());
            }
        }
        tokens.extend(ex.target.iter().cloned());
    }
    Vocab::new(tokens)
}

/// Source kinds of a model that reads examples shaped like `ex`.
pub fn source_kinds(ex: &ParallelExample) -> Vec<SourceKind> {
    ex.sources
        .iter()
        .map(|s| match s {
            Source::Tokens(_) => SourceKind::Text,
            Source::Grid(rows) => SourceKind::Grid {
                dim: rows.first().map_or(0, Vec::len),
            },
        })
        .collect()
}

fn read_split(path: &Path) -> CliResult<(Task, Vec<ParallelExample>)> {
    let ds = tasks::read_dataset(path)
        .with_context(|| format!("reading dataset {}", path.display()))
        .config_err()?;
    let task = Task::from_name(&ds.task)
        .ok_or_else(|| anyhow!("{}: unknown task {:?}", path.display(), ds.task))
        .config_err()?;
    Ok((task, ds.examples))
}

fn read_vocab(path: &Path) -> CliResult<Vocab> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading vocabulary {}", path.display()))
        .config_err()?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing vocabulary {}", path.display()))
        .config_err()
}

/// Loads the configured dataset files, or generates data from the seed.
pub fn load_splits(config: &ExperimentConfig) -> CliResult<Splits> {
    let d = &config.data;
    match (&d.train, &d.valid) {
        (Some(train_path), Some(valid_path)) => {
            let (task, train) = read_split(train_path)?;
            let (valid_task, valid) = read_split(valid_path)?;
            if task != valid_task {
                return Err(CliError::Config(anyhow!(
                    "train data is {} but valid data is {}",
                    task.name(),
                    valid_task.name()
                )));
            }
            let sibling = train_path.with_file_name("vocab.json");
            let vocab = if sibling.exists() {
                read_vocab(&sibling)?
            } else {
                collect_vocab(train.iter().chain(&valid))
            };
            Ok(Splits {
                task,
                train,
                valid,
                test: Vec::new(),
                vocab,
            })
        }
        _ => generate_splits(d, config.seed).config_err(),
    }
}

#[derive(Debug, Clone)]
pub struct GenDataArgs {
    pub config: Option<PathBuf>,
    pub task: Option<Task>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

/// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl` and `vocab.json`.
pub fn cmd_gen_data(args: &GenDataArgs) -> CliResult<Vec<PathBuf>> {
    let mut config = match &args.config {
        Some(p) => ExperimentConfig::load(p).config_err()?,
        None => ExperimentConfig::default(),
    };
    if let Some(t) = args.task {
        config.data.task = t;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.data.train = None;
    config.data.valid = None;
    config.validate().config_err()?;
    let splits = generate_splits(&config.data, config.seed).config_err()?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .config_err()?;
    let mut written = Vec::new();
    for (name, examples) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        let path = args.out.join(format!("{name}.jsonl"));
        tasks::write_dataset(&path, splits.task.name(), examples)
            .with_context(|| format!("writing {}", path.display()))
            .runtime_err()?;
        written.push(path);
    }
    let vocab_path = args.out.join("vocab.json");
    let text = serde_json::to_string(&splits.vocab).runtime_err()?;
    fs::write(&vocab_path, text + "\n").runtime_err()?;
    written.push(vocab_path);
    Ok(written)
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
    pub share: bool,
    pub sentinel: bool,
    pub decoder: Option<DecoderKind>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(s) = self.strategy {
            config.model.strategy = s;
        }
        config.model.share |= self.share;
        config.model.sentinel |= self.sentinel;
        if let Some(d) = self.decoder {
            config.model.decoder = d;
        }
        if let Some(o) = &self.out {
            config.out = Some(o.clone());
        }
    }
}

pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> CliResult<ExperimentConfig> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p).config_err()?,
        None => ExperimentConfig::default(),
    };
    overrides.apply(&mut config);
    config.validate().config_err()?;
    Ok(config)
}

pub fn build_model(config: &ExperimentConfig, splits: &Splits) -> CliResult<MultiSourceModel> {
    let first = splits
        .train
        .first()
        .ok_or_else(|| anyhow!("training set is empty"))
        .config_err()?;
    let model_config = config.model.model_config(source_kinds(first));
    MultiSourceModel::new(model_config, splits.vocab.clone(), config.seed).config_err()
}

pub fn encode_all(model: &MultiSourceModel, examples: &[ParallelExample]) -> CliResult<Vec<EncodedExample>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| model.encode_example(ex).with_context(|| format!("example {i}")))
        .collect::<anyhow::Result<_>>()
        .config_err()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub task: Task,
    pub label: String,
    pub parameters: usize,
    pub steps: usize,
    pub stop: StopReason,
    pub best_step: usize,
    pub best_valid_loss: f64,
    pub valid: Scores,
}

pub const CURVES_FILE: &str = "curves.tsv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

/// Trains one model and writes the curves, best checkpoint, resolved config
/// and a summary into the output directory.
pub fn cmd_train(config: &ExperimentConfig, mut progress: impl FnMut(&CurvePoint)) -> CliResult<TrainSummary> {
    config.validate().config_err()?;
    let out = config
        .out
        .clone()
        .ok_or_else(|| anyhow!("no output directory (use --out or set `out` in the config)"))
        .config_err()?;
    let splits = load_splits(config)?;
    let mut model = build_model(config, &splits)?;
    let train_set = encode_all(&model, &splits.train)?;
    let valid_set = encode_all(&model, &splits.valid)?;
    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .config_err()?;

    let mut train_config = config.train.clone();
    train_config.seed = config.seed;
    let report: TrainReport =
        train::train(&mut model, &train_set, &valid_set, &train_config, |p| progress(p)).runtime_err()?;

    let mut curves = Vec::new();
    train::write_curve(&mut curves, &report.curve).runtime_err()?;
    fs::write(out.join(CURVES_FILE), curves).runtime_err()?;
    checkpoint::save(&model, out.join(CHECKPOINT_FILE)).runtime_err()?;
    fs::write(out.join(RESOLVED_CONFIG_FILE), config.to_toml().runtime_err()?).runtime_err()?;

    let valid = scores(&model, splits.task, &splits.valid, None)?;
    let summary = TrainSummary {
        task: splits.task,
        label: model.config().combination.label(),
        parameters: model.num_parameters(),
        steps: report.steps,
        stop: report.stop,
        best_step: report.best_step,
        best_valid_loss: report.best_valid_loss,
        valid,
    };
    let text = serde_json::to_string_pretty(&summary).runtime_err()?;
    fs::write(out.join(SUMMARY_FILE), text + "\n").runtime_err()?;
    Ok(summary)
}

/// Evaluation record printed by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub examples: usize,
    /// Mean per-token cross-entropy under teacher forcing.
    pub loss: f64,
    /// Position-wise accuracy of the output sequences (edit ops for toy APE).
    pub token_accuracy: f64,
    /// BLEU of the output text (the post-edited MT output for toy APE).
    pub bleu: f64,
    /// Shift-free TER of the output text.
    pub ter: f64,
    /// Toy APE only: TER of the unedited MT output.
    pub do_nothing_ter: Option<f64>,
}

/// Replays edit-op tokens on an MT output, tolerating malformed scripts.
pub fn post_edit(mt: &[String], ops: &[String]) -> Vec<String> {
    let ops: Vec<EditOp<String>> = ops.iter().map(|t| EditOp::from_token(t)).collect();
    apply_edits_lenient(mt, &ops)
}

fn mt_output(ex: &ParallelExample) -> CliResult<&[String]> {
    match ex.sources.get(1) {
        Some(Source::Tokens(t)) => Ok(t),
        _ => Err(CliError::Config(anyhow!("toy APE examples need the MT output as source 1"))),
    }
}

/// Scores `hypotheses` (greedy decodes when `None`) against the targets.
pub fn scores(
    model: &MultiSourceModel,
    task: Task,
    examples: &[ParallelExample],
    hypotheses: Option<&[Vec<String>]>,
) -> CliResult<Scores> {
    let encoded = encode_all(model, examples)?;
    let (loss, _) = model.forward_loss(&encoded).runtime_err()?;
    let hyps: Vec<Vec<String>> = match hypotheses {
        Some(h) => {
            if h.len() != examples.len() {
                return Err(CliError::Config(anyhow!(
                    "{} hypotheses for {} examples",
                    h.len(),
                    examples.len()
                )));
            }
            h.to_vec()
        }
        None => train::decode_all(model, &encoded)
            .runtime_err()?
            .iter()
            .map(|ids| model.vocab().decode(ids))
            .collect(),
    };
    let targets: Vec<Vec<String>> = examples.iter().map(|e| e.target.clone()).collect();
    let token_accuracy = metrics::token_accuracy(&hyps, &targets).runtime_err()?;
    let (texts, refs, do_nothing_ter) = match task {
        Task::MaskedCopy => (hyps, targets, None),
        Task::ToyApe => {
            let mut texts = Vec::with_capacity(examples.len());
            let mut refs = Vec::with_capacity(examples.len());
            let mut mts = Vec::with_capacity(examples.len());
            for (ex, h) in examples.iter().zip(&hyps) {
                let mt = mt_output(ex)?;
                texts.push(post_edit(mt, h));
                refs.push(post_edit(mt, &ex.target));
                mts.push(mt.to_vec());
            }
            let baseline = metrics::corpus_ter(&mts, &refs).runtime_err()?;
            (texts, refs, Some(baseline))
        }
    };
    Ok(Scores {
        examples: examples.len(),
        loss,
        token_accuracy,
        bleu: metrics::bleu(&texts, &refs).runtime_err()?,
        ter: metrics::corpus_ter(&texts, &refs).runtime_err()?,
        do_nothing_ter,
    })
}

fn load_checkpoint(path: &Path) -> CliResult<MultiSourceModel> {
    if !path.exists() {
        return Err(CliError::Config(anyhow!("checkpoint {} does not exist", path.display())));
    }
    checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .runtime_err()
}

/// Fails when `vocab_path` is given and its vocabulary differs from the
/// checkpoint's.
fn check_vocab(model: &MultiSourceModel, vocab_path: Option<&Path>) -> CliResult<()> {
    if let Some(p) = vocab_path {
        let vocab = read_vocab(p)?;
        if vocab.fingerprint() != model.vocab().fingerprint() {
            return Err(CliError::Config(anyhow!(
                "vocabulary {} (fingerprint {}) does not match the checkpoint's ({})",
                p.display(),
                vocab.fingerprint(),
                model.vocab().fingerprint()
            )));
        }
    }
    Ok(())
}

/// Reads one whitespace-tokenized hypothesis per line.
pub fn read_hypotheses(path: &Path) -> CliResult<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading hypotheses {}", path.display()))
        .config_err()?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub vocab: Option<PathBuf>,
    pub hypotheses: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<Scores> {
    let model = load_checkpoint(&args.checkpoint)?;
    check_vocab(&model, args.vocab.as_deref())?;
    let (task, examples) = read_split(&args.data)?;
    let hyps = args.hypotheses.as_deref().map(read_hypotheses).transpose()?;
    scores(&model, task, &examples, hyps.as_deref())
}

#[derive(Debug, Clone)]
pub struct DecodeArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: Option<PathBuf>,
}

/// Greedy outputs, one whitespace-joined line per example.
pub fn cmd_decode(args: &DecodeArgs, mut sink: impl Write) -> CliResult<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let (_, examples) = read_split(&args.data)?;
    let encoded = encode_all(&model, &examples)?;
    let outputs = train::decode_all(&model, &encoded).runtime_err()?;
    let mut text = String::new();
    for ids in outputs {
        text.push_str(&model.vocab().decode(&ids).join(" "));
        text.push('\n');
    }
    match &args.out {
        Some(p) => fs::write(p, text).runtime_err(),
        None => sink.write_all(text.as_bytes()).runtime_err(),
    }
}

#[derive(Debug, Clone)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub example: usize,
    pub out: PathBuf,
    /// Pixels per heat-map cell.
    pub cell: usize,
}

pub const TRACE_FILE: &str = "attention.tsv";
pub const HEATMAP_FILE: &str = "attention.pgm";

/// Greedy-decodes one example and writes its attention trace and heat map.
pub fn cmd_inspect_attention(args: &InspectArgs) -> CliResult<multiattn::trace::AttentionTrace> {
    let model = load_checkpoint(&args.checkpoint)?;
    let (_, examples) = read_split(&args.data)?;
    let ex = examples
        .get(args.example)
        .ok_or_else(|| anyhow!("example {} out of range ({} examples)", args.example, examples.len()))
        .config_err()?;
    let sources = model.encode_sources(&ex.sources).config_err()?;
    let (_, trace) = model
        .greedy_decode(&sources, train::decode_limit(&sources))
        .runtime_err()?;
    fs::create_dir_all(&args.out).config_err()?;
    let mut tsv = Vec::new();
    trace
        .write_tsv(&mut tsv, |t| model.vocab().token(t).to_string())
        .runtime_err()?;
    fs::write(args.out.join(TRACE_FILE), tsv).runtime_err()?;
    if !trace.rows.is_empty() {
        let mut pgm = Vec::new();
        trace.write_pgm(&mut pgm, args.cell).runtime_err()?;
        fs::write(args.out.join(HEATMAP_FILE), pgm).runtime_err()?;
    }
    Ok(trace)
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckArgs {
    /// Only this strategy; all valid configurations when `None`.
    pub strategy: Option<Strategy>,
    pub share: bool,
    pub sentinel: bool,
    pub decoder: Option<DecoderKind>,
    pub seed: u64,
    /// Test hook: corrupt this graph op's adjoint.
    pub corrupt_adjoint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GradcheckResult {
    pub label: String,
    pub report: FdReport,
}

/// The tiny model used by `gradcheck`: embeddings 3, hidden 4, attention 5,
/// a 7-token vocabulary and two sources of lengths 3 and 2.
pub fn gradcheck_fixture(
    combination: CombinationConfig,
    decoder: DecoderKind,
    seed: u64,
) -> multiattn::Result<(MultiSourceModel, Vec<EncodedExample>)> {
    let mut config = ModelConfig::new(vec![SourceKind::Text, SourceKind::Text], combination, decoder);
    config.embed_dim = 3;
    config.hidden_dim = 4;
    config.attn_dim = 5;
    let vocab = Vocab::new(["a", "b", "c", "d"]);
    let mut model = MultiSourceModel::new(config, vocab, seed)?;
    // Move biases away from zero so their gradients are exercised too.
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        for x in model.store_mut().get_mut(id).data_mut() {
            *x += rng.uniform(-0.3, 0.3);
        }
    }
    let words = |w: &[&str]| w.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let ex = ParallelExample {
        sources: vec![Source::Tokens(words(&["a", "b", "c"])), Source::Tokens(words(&["d", "a"]))],
        target: words(&["c", "a"]),
        annotation: None,
    };
    let encoded = model.encode_example(&ex)?;
    Ok((model, vec![encoded]))
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<Vec<GradcheckResult>> {
    let faulty = match &args.corrupt_adjoint {
        Some(name) => Some(
            gradcheck::op_name(name)
                .ok_or_else(|| anyhow!("unknown graph op {name:?}"))
                .config_err()?,
        ),
        None => None,
    };
    let configs = match args.strategy {
        Some(s) => {
            let c = CombinationConfig::new(s, args.share, args.sentinel);
            c.validate(5).config_err()?;
            vec![c]
        }
        None => CombinationConfig::all_valid(),
    };
    let decoder = args.decoder.unwrap_or(DecoderKind::Cgru);
    configs
        .into_iter()
        .map(|c| {
            let (model, examples) = gradcheck_fixture(c, decoder, args.seed).config_err()?;
            let report = gradcheck::check_model(&model, &examples, DEFAULT_EPS, faulty).runtime_err()?;
            Ok(GradcheckResult {
                label: format!("{}/{}", c.label(), decoder.name()),
                report,
            })
        })
        .collect()
}

/// Human-readable gradient-check report listing every parameter.
pub fn format_gradcheck(results: &[GradcheckResult]) -> String {
    let mut out = String::new();
    for r in results {
        let status = if r.report.passes(GRADCHECK_TOL) { "ok" } else { "FAIL" };
        out.push_str(&format!(
            "{} {}: max rel error {:.3e} over {} coordinates\n",
            status, r.label, r.report.max_rel_error, r.report.coordinates
        ));
        for (name, err) in &r.report.per_param {
            out.push_str(&format!("    {name:<28} {err:.3e}\n"));
        }
    }
    out
}
