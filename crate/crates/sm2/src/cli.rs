//! Operator surface: one binary, five subcommands.
//!
//! ```text
//! sm2 gen-data  --out data [--config gen.toml] [--seed N] [--vocab V] ...
//! sm2 train     --config train.toml [--mode sm2] [--lambda L]
//!               [--prohibition k1:k2] [--init ckpt] [--out ckpt]
//! sm2 eval      --init ckpt --data dir --policy conf:0.3,0.5 [--policy waitk:1,3]
//!               [--min-len A] [--max-len B] --out dir
//! sm2 analyze   --init ckpt --data dir --out dir
//! sm2 audit     --log train.log.jsonl [--min-p 0.01]
//! ```
//!
//! Config files are TOML with unknown keys rejected; command-line flags win
//! over file values. Every run writes its fully-resolved configuration next
//! to its outputs. Exit codes: 0 success, 1 configuration error, 2 runtime
//! or numeric error; failures print one JSON line on stderr.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, Corpus, SynthConfig, Vocab};
use crate::inference::{self, Policy, SessionTrace};
use crate::metrics::{self, SentenceOutcome};
use crate::model::ModelConfig;
use crate::training::{self, TrainConfig, TrainError, TrainMode};
use crate::verify;

// ── Errors and exit codes ────────────────────────────────────────────

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation, config file, or input artifact: exit code 1.
    Config(String),
    /// Failure while executing a well-formed request: exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// The machine-parseable stderr line.
    pub fn stderr_line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Config(m) => ("config", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        serde_json::json!({"error": {"kind": kind, "msg": msg}}).to_string()
    }
}

fn cfg_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

impl From<checkpoint::CkptError> for CliError {
    fn from(e: checkpoint::CkptError) -> Self {
        use checkpoint::CkptError::*;
        match &e {
            // Wrong paths, architectures, or manifests are fixable by the
            // caller; corrupted or inconsistent payloads are runtime faults.
            Io { .. } | Manifest { .. } | Version { .. } | ShapeDiff { .. }
            | ConfigMismatch(_) => CliError::Config(e.to_string()),
            Integrity { .. } | Blob { .. } | Optimizer(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Config(m) => CliError::Config(m.clone()),
            TrainError::NonFinite { .. } | TrainError::Log(_) => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}

impl From<data::IngestError> for CliError {
    fn from(e: data::IngestError) -> Self {
        CliError::Config(e.to_string())
    }
}

// ── Argument grammar ─────────────────────────────────────────────────

#[derive(Parser, Debug)]
#[command(name = "sm2", version, about = "Simultaneous-translation laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic block-reversal corpus (train/valid/test).
    GenData(GenArgs),
    /// Train a model; emits a checkpoint and a JSONL step log.
    Train(TrainArgs),
    /// Sweep streaming policies over a test set; emits curve CSV + traces.
    Eval(EvalArgs),
    /// Teacher-forced confidence study; emits scatter CSV + correlations.
    Analyze(AnalyzeArgs),
    /// Check a training log's prefix-coverage guarantees.
    Audit(AuditArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long = "min-len")]
    min_len: Option<usize>,
    #[arg(long = "max-len")]
    max_len: Option<usize>,
    #[arg(long)]
    max_block: Option<usize>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    valid_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// sm2 | waitk:<k> | multipath_waitk | omt_only
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Band k1:k2 restricting which prefix states the streaming loss trains.
    #[arg(long)]
    prohibition: Option<String>,
    /// Warm-start checkpoint (fine-tuning).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Policy grid, e.g. `conf:0.3,0.5,0.7` or `waitk:1,3,5`; repeatable.
    #[arg(long)]
    policy: Vec<String>,
    #[arg(long = "min-len")]
    min_len: Option<usize>,
    #[arg(long = "max-len")]
    max_len: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// Training log (JSONL) to audit.
    #[arg(long)]
    log: PathBuf,
    /// Minimum acceptable chi-square p-value.
    #[arg(long, default_value_t = 0.01)]
    min_p: f64,
}

// ── Config files ─────────────────────────────────────────────────────

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("config `{}`: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("config `{}`: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Runtime(format!("create `{}`: {e}", parent.display())))?;
    }
    fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("write `{}`: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenConfig {
    out: PathBuf,
    seed: u64,
    vocab_size: usize,
    min_len: usize,
    max_len: usize,
    max_block: usize,
    train_count: usize,
    valid_count: usize,
    test_count: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            out: PathBuf::from("data"),
            seed: 0,
            vocab_size: 50,
            min_len: 6,
            max_len: 12,
            max_block: 3,
            train_count: 4000,
            valid_count: 500,
            test_count: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainFile {
    data: PathBuf,
    out: PathBuf,
    init: Option<PathBuf>,
    model: ModelConfig,
    train: TrainConfig,
}

impl Default for TrainFile {
    fn default() -> Self {
        TrainFile {
            data: PathBuf::from("data"),
            out: PathBuf::from("runs/model.ckpt"),
            init: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalFile {
    init: PathBuf,
    data: PathBuf,
    out: PathBuf,
    policy: Vec<String>,
    min_len: Option<usize>,
    max_len: Option<usize>,
}

impl Default for EvalFile {
    fn default() -> Self {
        EvalFile {
            init: PathBuf::from("runs/model.ckpt"),
            data: PathBuf::from("data/test"),
            out: PathBuf::from("eval"),
            policy: Vec::new(),
            min_len: None,
            max_len: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AnalyzeFile {
    init: PathBuf,
    data: PathBuf,
    out: PathBuf,
}

impl Default for AnalyzeFile {
    fn default() -> Self {
        AnalyzeFile {
            init: PathBuf::from("runs/model.ckpt"),
            data: PathBuf::from("data/valid"),
            out: PathBuf::from("analysis"),
        }
    }
}

// ── Entry points ─────────────────────────────────────────────────────

/// Parse argv and run. The binary maps the result onto exit codes.
pub fn run<I, T>(argv: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if e.use_stderr() => return Err(CliError::Config(e.to_string())),
        Err(e) => {
            // --help / --version: print and succeed.
            print!("{e}");
            return Ok(());
        }
    };
    match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::Audit(a) => cmd_audit(a),
    }
}

/// Worker-thread cap: `SM2_THREADS` wins, else the machine's parallelism.
fn worker_threads() -> Result<usize, CliError> {
    match std::env::var("SM2_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!(
                "SM2_THREADS must be a positive integer, got `{s}`"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

// ── gen-data ─────────────────────────────────────────────────────────

fn cmd_gen_data(a: GenArgs) -> Result<(), CliError> {
    let mut cfg: GenConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => GenConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    if let Some(v) = a.vocab {
        cfg.vocab_size = v;
    }
    if let Some(v) = a.min_len {
        cfg.min_len = v;
    }
    if let Some(v) = a.max_len {
        cfg.max_len = v;
    }
    if let Some(v) = a.max_block {
        cfg.max_block = v;
    }
    if let Some(v) = a.train_count {
        cfg.train_count = v;
    }
    if let Some(v) = a.valid_count {
        cfg.valid_count = v;
    }
    if let Some(v) = a.test_count {
        cfg.test_count = v;
    }

    // All validation happens before anything touches the filesystem.
    if cfg.min_len < 1 {
        return Err(CliError::Config("min_len must be at least 1".into()));
    }
    if cfg.max_len < cfg.min_len {
        return Err(CliError::Config(format!(
            "max_len {} below min_len {}",
            cfg.max_len, cfg.min_len
        )));
    }
    if cfg.max_block < 1 || cfg.vocab_size < cfg.max_block {
        return Err(CliError::Config(format!(
            "need vocab_size >= max_block >= 1, got {} and {}",
            cfg.vocab_size, cfg.max_block
        )));
    }
    if cfg.train_count == 0 || cfg.valid_count == 0 || cfg.test_count == 0 {
        return Err(CliError::Config("split counts must be positive".into()));
    }

    for (split, count, salt) in [
        ("train", cfg.train_count, 0u64),
        ("valid", cfg.valid_count, 1),
        ("test", cfg.test_count, 2),
    ] {
        let sc = SynthConfig {
            vocab_size: cfg.vocab_size,
            min_len: cfg.min_len,
            max_len: cfg.max_len,
            max_block: cfg.max_block,
            count,
            seed: cfg.seed.wrapping_add(salt),
        };
        let corpus = data::generate_synthetic(&sc);
        let dir = cfg.out.join(split);
        data::save_parallel(&corpus, &dir)
            .map_err(|e| CliError::Runtime(format!("writing {split}: {e}")))?;
    }
    let resolved = toml::to_string_pretty(&cfg).expect("gen config serializes");
    write_text(&cfg.out.join("config.resolved.toml"), &resolved)?;
    println!(
        "{}",
        serde_json::json!({
            "out": cfg.out, "seed": cfg.seed,
            "sentences": {"train": cfg.train_count, "valid": cfg.valid_count, "test": cfg.test_count},
        })
    );
    Ok(())
}

// ── Shared loading ───────────────────────────────────────────────────

/// A split directory as written by gen-data: src/tgt/align + vocab files.
/// `vocabs` (when given) replaces the files so every split shares one
/// numbering; alignments are optional.
fn load_split(dir: &Path, vocabs: Option<(Vocab, Vocab)>) -> Result<Corpus, CliError> {
    let vocabs = match vocabs {
        Some(v) => Some(v),
        None => {
            let sv = dir.join(data::SRC_VOCAB_FILE);
            let tv = dir.join(data::TGT_VOCAB_FILE);
            if sv.exists() && tv.exists() {
                Some((Vocab::load(&sv)?, Vocab::load(&tv)?))
            } else {
                None
            }
        }
    };
    let align = dir.join(data::ALIGN_FILE);
    let corpus = data::load_parallel(
        &dir.join(data::SRC_FILE),
        &dir.join(data::TGT_FILE),
        align.exists().then_some(align.as_path()),
        vocabs,
    )?;
    if corpus.examples.is_empty() {
        return Err(CliError::Config(format!("`{}` holds no sentences", dir.display())));
    }
    Ok(corpus)
}

/// Reject evaluating a checkpoint against vocabularies it was not trained
/// on, whenever the manifest recorded their digests.
fn check_vocab_hashes(
    manifest: &checkpoint::Manifest,
    corpus: &Corpus,
) -> Result<(), CliError> {
    let pairs = [
        ("source", &manifest.src_vocab_sha256, &corpus.src_vocab),
        ("target", &manifest.tgt_vocab_sha256, &corpus.tgt_vocab),
    ];
    for (side, want, vocab) in pairs {
        if let Some(want) = want {
            let got = checkpoint::vocab_sha256(vocab);
            if got != *want {
                return Err(CliError::Config(format!(
                    "{side} vocabulary differs from the checkpoint's (digest {got} vs {want})"
                )));
            }
        }
    }
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

fn parse_prohibition(s: &str) -> Result<(u32, u32), CliError> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| CliError::Config(format!("prohibition `{s}` is not k1:k2")))?;
    let k1 = a
        .trim()
        .parse::<u32>()
        .map_err(|_| CliError::Config(format!("prohibition k1 `{a}` is not an integer")))?;
    let k2 = b
        .trim()
        .parse::<u32>()
        .map_err(|_| CliError::Config(format!("prohibition k2 `{b}` is not an integer")))?;
    Ok((k1, k2))
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut file: TrainFile = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainFile::default(),
    };
    if let Some(v) = a.seed {
        file.train.seed = v;
    }
    if let Some(v) = &a.mode {
        file.train.mode = TrainMode::parse(v).map_err(CliError::Config)?;
    }
    if let Some(v) = a.lambda {
        file.train.lambda = v;
    }
    if let Some(v) = &a.prohibition {
        file.train.prohibition = Some(parse_prohibition(v)?);
    }
    if let Some(v) = a.init {
        file.init = Some(v);
    }
    if let Some(v) = a.data {
        file.data = v;
    }
    if let Some(v) = a.out {
        file.out = v;
    }
    if let Some(v) = a.max_steps {
        file.train.max_steps = v;
    }
    file.train.validate()?;

    let train_corpus = load_split(&file.data.join("train"), None)?;
    let shared = (train_corpus.src_vocab.clone(), train_corpus.tgt_vocab.clone());
    let valid_corpus = load_split(&file.data.join("valid"), Some(shared))?;
    for (side, have, want) in [
        ("src_vocab", train_corpus.src_vocab.len(), file.model.src_vocab),
        ("tgt_vocab", train_corpus.tgt_vocab.len(), file.model.tgt_vocab),
    ] {
        if have != want {
            return Err(CliError::Config(format!(
                "model.{side} is {want} but the data's vocabulary has {have} entries"
            )));
        }
    }
    file.model.check().map_err(CliError::Config)?;

    let init = match &file.init {
        Some(dir) => {
            let allow_fresh = matches!(file.train.mode, TrainMode::Sm2);
            let loaded = checkpoint::load(dir, Some(&file.model), allow_fresh)?;
            if loaded.conf_head_reset {
                eprintln!(
                    "{}",
                    serde_json::json!({"note": "confidence head freshly initialized",
                                       "init": dir})
                );
            }
            Some(loaded.params)
        }
        None => None,
    };

    let resolved = toml::to_string_pretty(&file).expect("train config serializes");
    write_text(&path_with_suffix(&file.out, ".resolved.toml"), &resolved)?;
    let log_path = path_with_suffix(&file.out, ".log.jsonl");
    let log_file = fs::File::create(&log_path)
        .map_err(|e| CliError::Runtime(format!("log `{}`: {e}", log_path.display())))?;
    let mut log = BufWriter::new(log_file);

    let outcome = training::train(
        &file.model,
        &file.train,
        &train_corpus,
        &valid_corpus,
        init,
        Some(&mut log),
    );
    // Flush whatever was written: a diverged run keeps its partial log.
    log.flush()
        .map_err(|e| CliError::Runtime(format!("log `{}`: {e}", log_path.display())))?;
    let outcome = outcome?;

    let meta = checkpoint::SaveMeta {
        step: outcome.steps_run,
        mode: file.train.mode.as_string(),
        seed: file.train.seed,
        src_vocab_sha256: Some(checkpoint::vocab_sha256(&train_corpus.src_vocab)),
        tgt_vocab_sha256: Some(checkpoint::vocab_sha256(&train_corpus.tgt_vocab)),
    };
    checkpoint::save(&file.out, &outcome.params, None, &meta)?;
    checkpoint::save(
        &path_with_suffix(&file.out, ".final"),
        &outcome.final_params,
        None,
        &meta,
    )?;
    println!(
        "{}",
        serde_json::json!({
            "out": file.out, "steps": outcome.steps_run,
            "best_val": outcome.best_val, "log": log_path,
        })
    );
    Ok(())
}

/// `runs/a.ckpt` → `runs/a.ckpt<suffix>` (checkpoints are directories, so
/// companion files sit next to them rather than inside).
fn path_with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut os = p.as_os_str().to_os_string();
    os.push(suffix);
    PathBuf::from(os)
}

// ── eval ─────────────────────────────────────────────────────────────

fn parse_policy_grid(specs: &[String]) -> Result<Vec<Policy>, CliError> {
    let mut grid = Vec::new();
    let mut seen = BTreeSet::new();
    for spec in specs {
        let (kind, list) = spec
            .split_once(':')
            .ok_or_else(|| CliError::Config(format!("policy `{spec}` is not kind:values")))?;
        for v in list.split(',') {
            let p = Policy::parse(&format!("{kind}:{}", v.trim())).map_err(CliError::Config)?;
            if seen.insert(p.label()) {
                grid.push(p);
            }
        }
    }
    if grid.is_empty() {
        return Err(CliError::Config(
            "no policies given; use --policy conf:<g,...> or --policy waitk:<k,...>".into(),
        ));
    }
    Ok(grid)
}

/// Run one policy over the corpus on `threads` workers. Sentences are
/// distributed round-robin and reassembled by index, so the result order
/// never depends on the thread count.
fn run_policy(
    params: &crate::model::Parameters<f32>,
    policy: &Policy,
    examples: &[data::ParallelExample],
    threads: usize,
) -> Vec<SessionTrace> {
    let threads = threads.min(examples.len()).max(1);
    if threads == 1 {
        return examples
            .iter()
            .map(|ex| inference::run_session(params, policy, &ex.src))
            .collect();
    }
    let mut slots: Vec<Option<SessionTrace>> = vec![None; examples.len()];
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(threads);
        for t in 0..threads {
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                let mut i = t;
                while i < examples.len() {
                    out.push((i, inference::run_session(params, policy, &examples[i].src)));
                    i += threads;
                }
                out
            }));
        }
        for h in handles {
            for (i, trace) in h.join().expect("worker panicked") {
                slots[i] = Some(trace);
            }
        }
    });
    slots.into_iter().map(|s| s.unwrap()).collect()
}

fn outcome_of(trace: &SessionTrace, m: usize) -> SentenceOutcome {
    let mut hyp = trace.hypothesis.clone();
    if hyp.last() == Some(&data::EOS) {
        hyp.pop();
    }
    SentenceOutcome {
        g: trace.g.clone(),
        m,
        hyp,
    }
}

fn sanitize_label(label: &str) -> String {
    label.replace(':', "_")
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let mut file: EvalFile = match &a.config {
        Some(p) => read_toml(p)?,
        None => EvalFile::default(),
    };
    if let Some(v) = a.init {
        file.init = v;
    }
    if let Some(v) = a.data {
        file.data = v;
    }
    if let Some(v) = a.out {
        file.out = v;
    }
    if !a.policy.is_empty() {
        file.policy = a.policy.clone();
    }
    if a.min_len.is_some() {
        file.min_len = a.min_len;
    }
    if a.max_len.is_some() {
        file.max_len = a.max_len;
    }
    let grid = parse_policy_grid(&file.policy)?;
    let threads = worker_threads()?;

    let loaded = checkpoint::load(&file.init, None, false)?;
    let corpus = load_split(&file.data, None)?;
    check_vocab_hashes(&loaded.manifest, &corpus)?;

    let lo = file.min_len.unwrap_or(0);
    let hi = file.max_len.unwrap_or(usize::MAX);
    if lo > hi {
        return Err(CliError::Config(format!("min-len {lo} above max-len {hi}")));
    }
    let examples: Vec<_> = corpus
        .examples
        .iter()
        .filter(|ex| (lo..=hi).contains(&ex.m()))
        .cloned()
        .collect();
    if examples.is_empty() {
        return Err(CliError::Config(format!(
            "length filter [{lo}, {hi}] leaves no sentences"
        )));
    }

    let refs: Vec<Vec<u32>> = examples
        .iter()
        .map(|ex| ex.tgt[..ex.n() - 1].to_vec())
        .collect();
    let aligns: Option<Vec<Vec<Option<u32>>>> = examples
        .iter()
        .map(|ex| ex.align.clone())
        .collect();

    fs::create_dir_all(file.out.join("traces"))
        .map_err(|e| CliError::Runtime(format!("create `{}`: {e}", file.out.display())))?;
    let mut by_kind: Vec<(&'static str, Vec<(f64, Vec<SentenceOutcome>)>)> =
        vec![("conf", Vec::new()), ("waitk", Vec::new())];
    for policy in &grid {
        let traces = run_policy(&loaded.params, policy, &examples, threads);
        let tpath = file
            .out
            .join("traces")
            .join(format!("{}.jsonl", sanitize_label(&policy.label())));
        let mut w = BufWriter::new(fs::File::create(&tpath).map_err(|e| {
            CliError::Runtime(format!("traces `{}`: {e}", tpath.display()))
        })?);
        inference::dump_traces(&mut w, &traces)
            .and_then(|_| w.flush())
            .map_err(|e| CliError::Runtime(format!("traces `{}`: {e}", tpath.display())))?;
        let outcomes: Vec<SentenceOutcome> = traces
            .iter()
            .zip(&examples)
            .map(|(t, ex)| outcome_of(t, ex.m()))
            .collect();
        let kind = match policy {
            Policy::Confidence { .. } => "conf",
            Policy::Waitk { .. } => "waitk",
        };
        by_kind
            .iter_mut()
            .find(|(k, _)| *k == kind)
            .unwrap()
            .1
            .push((policy.param(), outcomes));
    }

    let resolved = toml::to_string_pretty(&file).expect("eval config serializes");
    write_text(&file.out.join("config.resolved.toml"), &resolved)?;
    let mut summary = serde_json::Map::new();
    for (kind, runs) in &by_kind {
        if runs.is_empty() {
            continue;
        }
        let points = metrics::build_curve(runs, &refs, aligns.as_deref())
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let csv = metrics::curve_csv(&points);
        write_text(&file.out.join(format!("curve_{kind}.csv")), &csv)?;
        summary.insert(
            (*kind).into(),
            serde_json::json!(points
                .iter()
                .map(|p| {
                    serde_json::json!({
                        "param": p.param, "AL": p.al, "BLEU": p.bleu, "SA": p.sa,
                    })
                })
                .collect::<Vec<_>>()),
        );
    }
    println!(
        "{}",
        serde_json::json!({"out": file.out, "sentences": examples.len(), "curves": summary})
    );
    Ok(())
}

// ── analyze ──────────────────────────────────────────────────────────

/// Teacher-forced confidence study: for every sentence and every prefix
/// length j, run the dual forward and record each position's confidence
/// next to the streaming probability of its gold token.
fn cmd_analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    let mut file: AnalyzeFile = match &a.config {
        Some(p) => read_toml(p)?,
        None => AnalyzeFile::default(),
    };
    if let Some(v) = a.init {
        file.init = v;
    }
    if let Some(v) = a.data {
        file.data = v;
    }
    if let Some(v) = a.out {
        file.out = v;
    }
    let loaded = checkpoint::load(&file.init, None, false)?;
    let corpus = load_split(&file.data, None)?;
    check_vocab_hashes(&loaded.manifest, &corpus)?;

    let mut scatter = String::from("sent,i,j,m,n,conf,p_correct\n");
    let mut cs: Vec<f64> = Vec::new();
    let mut ps: Vec<f64> = Vec::new();
    for (s, ex) in corpus.examples.iter().enumerate() {
        let (m, n) = (ex.m(), ex.n());
        let vocab = loaded.params.cfg.tgt_vocab;
        for j in 1..=m {
            let mut tape = crate::tensor::Tape::<f32>::new();
            let bind = crate::model::bind_params(&mut tape, &loaded.params, false);
            let mut fwd = crate::model::Forward::eval(&mut tape, &loaded.params, &bind);
            let out = fwd.dual(&ex.src, &ex.tgt, j);
            let conf = tape.value(out.conf).to_vec();
            let p_simt = tape.value(out.p_simt).to_vec();
            for i in 1..=n {
                let c = conf[i - 1] as f64;
                let p = p_simt[(i - 1) * vocab + ex.tgt[i - 1] as usize] as f64;
                scatter.push_str(&format!("{s},{i},{j},{m},{n},{c:.6},{p:.6}\n"));
                cs.push(c);
                ps.push(p);
            }
        }
    }
    let corr = metrics::correlations(&cs, &ps).map_err(|e| CliError::Runtime(e.to_string()))?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let corr_csv = format!(
        "pearson,spearman,kendall_tau,n_points\n{},{},{},{}\n",
        fmt(corr.pearson),
        fmt(corr.spearman),
        fmt(corr.kendall_tau),
        cs.len()
    );
    let resolved = toml::to_string_pretty(&file).expect("analyze config serializes");
    fs::create_dir_all(&file.out)
        .map_err(|e| CliError::Runtime(format!("create `{}`: {e}", file.out.display())))?;
    write_text(&file.out.join("config.resolved.toml"), &resolved)?;
    write_text(&file.out.join("scatter.csv"), &scatter)?;
    write_text(&file.out.join("correlations.csv"), &corr_csv)?;
    println!(
        "{}",
        serde_json::json!({
            "out": file.out, "points": cs.len(),
            "pearson": corr.pearson, "spearman": corr.spearman, "kendall_tau": corr.kendall_tau,
        })
    );
    Ok(())
}

// ── audit ────────────────────────────────────────────────────────────

fn cmd_audit(a: AuditArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.log)
        .map_err(|e| CliError::Config(format!("log `{}`: {e}", a.log.display())))?;
    let report = verify::coverage_audit(&text).map_err(cfg_err)?;
    println!("{report}");
    if report.passed(a.min_p) {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "coverage audit failed: p={:.6}, violations={}",
            report.p_value,
            report.violations.len()
        )))
    }
}

// ── Tests ────────────────────────────────────────────────────────────
