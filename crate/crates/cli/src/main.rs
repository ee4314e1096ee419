//! `goaldial`: train, generate, respond, evaluate, gradcheck, synth.
//!
//! Exit codes: 0 success, 1 threshold failure (gradcheck over tolerance),
//! 2 usage, configuration, or I/O errors.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use goaldial_core::checkpoint;
use goaldial_core::corpus::{
    load_corpus, load_embeddings, write_corpus, Caps, Corpus, Dialogue, Role, SplitKind,
    Utterance, EOS,
};
use goaldial_core::generation::{
    generate_dialogue, parallel_map, GeneratedDialogue, GenerationRequest, TerminationReason,
};
use goaldial_core::gradcheck::{grad_check_model, micro_fixture, DEFAULT_STEP};
use goaldial_core::metrics::{
    evaluate_response_task, score_dialogues, score_responses, MetricReport,
};
use goaldial_core::models::train::{train, EpochStats, TrainConfig};
use goaldial_core::models::{Model, ModelConfig, ModelKind};
use goaldial_core::synth;

#[derive(Parser)]
#[command(name = "goaldial", version, about = "Goal-conditioned dialogue models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a corpus directory and write a checkpoint.
    Train(TrainArgs),
    /// Roll out full dialogues from a split's goals and seed turns.
    Generate(GenerateArgs),
    /// Generate one turn per reference context for a chosen role.
    Respond(RespondArgs),
    /// Score a generation output file against its reference split.
    Evaluate(EvaluateArgs),
    /// Verify model gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Emit a deterministic synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Gduha,
    Hred,
    Lmg,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> ModelKind {
        match m {
            ModelArg::Gduha => ModelKind::Gduha,
            ModelArg::Hred => ModelKind::Hred,
            ModelArg::Lmg => ModelKind::Lmg,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Model architecture.
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Corpus directory (schema.json, vocab.txt, {train,valid,test}.jsonl).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    /// key=value file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Probability of feeding the model its own sample as context input.
    #[arg(long = "scheduled-sampling")]
    scheduled_sampling: Option<f64>,
    #[arg(long = "grad-clip")]
    grad_clip: Option<f64>,
    /// Hidden size; selects the proportionally small configuration.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long = "embed-dim")]
    embed_dim: Option<usize>,
    /// Epoch log CSV path (default: <out>.log.csv).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Pretrained embedding file: `token v1 .. vd` per line.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (fallback: GOALDIAL_THREADS, then 1).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct RespondArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Role whose turns are generated.
    #[arg(long, default_value = "agent")]
    role: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Output file of `generate` (task dialogue) or `respond` (task response).
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    task: Task,
    /// Report JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print the fixed-width table.
    #[arg(long)]
    table: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    Dialogue,
    Response,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Architecture to check; omit for all three.
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 20)]
    vocab: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct SynthArgs {
    /// goal-keyword or fixed-length.
    #[arg(long)]
    recipe: String,
    /// Training dialogues (validation and test splits are derived).
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Generate(args) => cmd_generate(args),
        Cmd::Respond(args) => cmd_respond(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Flat `key=value` config file; `#` starts a comment line.
fn read_config_file(path: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), i + 1))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

const CONFIG_KEYS: [&str; 9] = [
    "seed",
    "epochs",
    "batch-size",
    "lr",
    "patience",
    "scheduled-sampling",
    "grad-clip",
    "hidden",
    "embed-dim",
];

fn config_value<T: std::str::FromStr>(
    file: &BTreeMap<String, String>,
    key: &str,
) -> anyhow::Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match file.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|e| anyhow!("config key {key}={raw}: {e}")),
    }
}

fn resolve_threads(flag: Option<usize>) -> anyhow::Result<usize> {
    if let Some(t) = flag {
        return Ok(t.max(1));
    }
    match std::env::var("GOALDIAL_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map(|t| t.max(1))
            .map_err(|e| anyhow!("GOALDIAL_THREADS={v}: {e}")),
        Err(_) => Ok(1),
    }
}

fn load_data(dir: &Path) -> anyhow::Result<Corpus> {
    let (corpus, stats) = load_corpus(dir, Caps::default())
        .with_context(|| format!("loading corpus {}", dir.display()))?;
    eprintln!(
        "loaded {} train / {} valid / {} test dialogues ({} unk tokens, {} truncated utterances)",
        stats.dialogues[0],
        stats.dialogues[1],
        stats.dialogues[2],
        stats.unk_tokens,
        stats.truncated_utterances
    );
    Ok(corpus)
}

fn split_of(corpus: &Corpus, name: &str) -> anyhow::Result<Vec<Dialogue>> {
    let kind = SplitKind::parse(name)
        .ok_or_else(|| anyhow!("unknown split {name:?} (expected train, valid, or test)"))?;
    let split = corpus.split(kind);
    if split.is_empty() {
        bail!("split {name} is empty");
    }
    Ok(split.to_vec())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<ExitCode> {
    let file = match &args.config {
        Some(path) => {
            let map = read_config_file(path)?;
            for key in map.keys() {
                if !CONFIG_KEYS.contains(&key.as_str()) {
                    bail!(
                        "config key {key:?} not recognized (known: {})",
                        CONFIG_KEYS.join(", ")
                    );
                }
            }
            map
        }
        None => BTreeMap::new(),
    };

    let defaults = TrainConfig::default();
    let seed = args.seed.or(config_value(&file, "seed")?).unwrap_or(defaults.seed);
    let cfg = TrainConfig {
        lr: args.lr.or(config_value(&file, "lr")?).unwrap_or(defaults.lr),
        batch_size: args
            .batch_size
            .or(config_value(&file, "batch-size")?)
            .unwrap_or(defaults.batch_size),
        max_epochs: args
            .epochs
            .or(config_value(&file, "epochs")?)
            .unwrap_or(defaults.max_epochs),
        patience: args
            .patience
            .or(config_value(&file, "patience")?)
            .unwrap_or(defaults.patience),
        scheduled_sampling: args
            .scheduled_sampling
            .or(config_value(&file, "scheduled-sampling")?)
            .unwrap_or(defaults.scheduled_sampling),
        grad_clip: args
            .grad_clip
            .or(config_value(&file, "grad-clip")?)
            .unwrap_or(defaults.grad_clip),
        seed,
    };

    let corpus = load_data(&args.data)?;
    let goal_dim = corpus.schema.encoding_dim();
    let vocab_size = corpus.vocab.len();
    let hidden = args.hidden.or(config_value(&file, "hidden")?);
    let embed_dim = args.embed_dim.or(config_value(&file, "embed-dim")?);
    let mut model_cfg = match hidden {
        Some(h) => ModelConfig::small(vocab_size, goal_dim, h),
        None => ModelConfig::reference(vocab_size, goal_dim),
    };
    if let Some(e) = embed_dim {
        model_cfg.embed_dim = e;
    }

    let kind: ModelKind = args.model.into();
    let mut model: Model<f32> = Model::new(kind, model_cfg, seed)?;
    eprintln!("{kind}: {} parameters", model.count_params());

    if let Some(path) = &args.embeddings {
        let vectors = load_embeddings(path, &corpus.vocab, model_cfg.embed_dim)?;
        let loaded = vectors.iter().filter(|v| v.is_some()).count();
        model.apply_pretrained_embeddings(&vectors)?;
        eprintln!("applied {loaded} pretrained embedding rows");
    }

    let outcome = train(&mut model, &corpus.schema, &corpus.train, &corpus.valid, &cfg)?;

    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.csv", args.out.display())));
    let mut log = String::from(EpochStats::CSV_HEADER);
    log.push('\n');
    for row in &outcome.epochs {
        log.push_str(&row.csv_row());
        log.push('\n');
    }
    fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;

    checkpoint::save(&model, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let best_nll = outcome
        .epochs
        .iter()
        .find(|e| e.epoch == outcome.best_epoch)
        .map(|e| e.valid_nll)
        .unwrap_or(f64::NAN);
    println!(
        "trained {} epochs; best epoch {} (validation nll/token {:.4}); checkpoint {}, log {}",
        outcome.epochs.len(),
        outcome.best_epoch,
        best_nll,
        args.out.display(),
        log_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    role: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct GeneratedRecord {
    id: String,
    goals: Vec<goaldial_core::corpus::Goal>,
    turns: Vec<TurnRecord>,
    termination_reason: TerminationReason,
    #[serde(default)]
    role_confusions: usize,
}

fn generated_to_record(d: &GeneratedDialogue, corpus: &Corpus) -> GeneratedRecord {
    GeneratedRecord {
        id: d.id.clone(),
        goals: d.goals.clone(),
        turns: d
            .turns
            .iter()
            .map(|u| TurnRecord {
                role: u.role.as_str().to_string(),
                text: u.text(&corpus.vocab),
            })
            .collect(),
        termination_reason: d.termination_reason,
        role_confusions: d.role_confusions,
    }
}

fn check_vocab(model: &Model<f32>, corpus: &Corpus) -> anyhow::Result<()> {
    if model.config().vocab_size != corpus.vocab.len() {
        bail!(
            "checkpoint vocabulary size {} does not match corpus {}",
            model.config().vocab_size,
            corpus.vocab.len()
        );
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<ExitCode> {
    let model: Model<f32> = checkpoint::load(&args.ckpt)
        .with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    let corpus = load_data(&args.data)?;
    check_vocab(&model, &corpus)?;
    let split = split_of(&corpus, &args.split)?;
    let threads = resolve_threads(args.threads)?;

    let generated = parallel_map(&split, threads, |d| {
        let req = GenerationRequest::new(d.id.clone(), d.goals.clone(), d.turns[0].clone())?;
        generate_dialogue(&model, &corpus.schema, &req)
    })?;

    let mut out = fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for d in &generated {
        serde_json::to_writer(&mut out, &generated_to_record(d, &corpus))?;
        out.write_all(b"\n")?;
    }
    println!("wrote {} dialogues to {}", generated.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize, Deserialize)]
struct ResponseFileRecord {
    id: String,
    turn_index: usize,
    role: String,
    text: String,
}

fn cmd_respond(args: RespondArgs) -> anyhow::Result<ExitCode> {
    let model: Model<f32> = checkpoint::load(&args.ckpt)
        .with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    let corpus = load_data(&args.data)?;
    check_vocab(&model, &corpus)?;
    let split = split_of(&corpus, &args.split)?;
    let role = Role::parse(&args.role)
        .ok_or_else(|| anyhow!("unknown role {:?} (expected user or agent)", args.role))?;
    let threads = resolve_threads(args.threads)?;

    let (records, _) =
        evaluate_response_task(&model, &corpus.schema, &corpus.vocab, &split, role, threads)?;

    let mut out = fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for r in &records {
        let record = ResponseFileRecord {
            id: r.id.clone(),
            turn_index: r.turn_index,
            role: r.utterance.role.as_str().to_string(),
            text: r.utterance.text(&corpus.vocab),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    println!("wrote {} responses to {}", records.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .with_context(|| format!("{}:{}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

fn encode_turn(corpus: &Corpus, role: Role, text: &str) -> anyhow::Result<Utterance> {
    let (mut tokens, _unk) = corpus.vocab.encode_text(text)?;
    tokens.push(EOS);
    Ok(Utterance { role, tokens })
}

fn emit_report(report: &MetricReport, args: &EvaluateArgs, label: &str) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    match &args.out {
        Some(path) => {
            fs::write(path, json + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote report to {}", path.display());
        }
        None => println!("{json}"),
    }
    if args.table {
        print!("{}", report.render_table(label));
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<ExitCode> {
    let corpus = load_data(&args.data)?;
    let split = split_of(&corpus, &args.split)?;
    let by_id: BTreeMap<&str, &Dialogue> = split.iter().map(|d| (d.id.as_str(), d)).collect();

    match args.task {
        Task::Dialogue => {
            let records: Vec<GeneratedRecord> = read_jsonl(&args.generated)?;
            let mut generated = Vec::new();
            let mut refs = Vec::new();
            for rec in &records {
                let reference = *by_id.get(rec.id.as_str()).ok_or_else(|| {
                    anyhow!("generated dialogue {:?} not in split {}", rec.id, args.split)
                })?;
                let mut turns = Vec::new();
                for t in &rec.turns {
                    let role = Role::parse(&t.role)
                        .ok_or_else(|| anyhow!("dialogue {:?}: bad role {:?}", rec.id, t.role))?;
                    turns.push(encode_turn(&corpus, role, &t.text)?);
                }
                if turns.is_empty() {
                    bail!("dialogue {:?} has no turns", rec.id);
                }
                generated.push(GeneratedDialogue {
                    id: rec.id.clone(),
                    goals: rec.goals.clone(),
                    turns,
                    termination_reason: rec.termination_reason,
                    role_confusions: rec.role_confusions,
                });
                refs.push(reference);
            }
            let pairs: Vec<(&GeneratedDialogue, &Dialogue)> =
                generated.iter().zip(refs.into_iter()).collect();
            let report = score_dialogues(&corpus.vocab, &pairs);
            emit_report(&report, &args, "dialogue generation")?;
        }
        Task::Response => {
            let records: Vec<ResponseFileRecord> = read_jsonl(&args.generated)?;
            let mut cands = Vec::new();
            let mut targets = Vec::new();
            for rec in &records {
                let reference = *by_id.get(rec.id.as_str()).ok_or_else(|| {
                    anyhow!("response for {:?} not in split {}", rec.id, args.split)
                })?;
                let target = reference.turns.get(rec.turn_index).ok_or_else(|| {
                    anyhow!(
                        "dialogue {:?} has no turn {} (has {})",
                        rec.id,
                        rec.turn_index,
                        reference.turns.len()
                    )
                })?;
                let role = Role::parse(&rec.role)
                    .ok_or_else(|| anyhow!("response {:?}: bad role {:?}", rec.id, rec.role))?;
                if role != target.role {
                    bail!(
                        "response {:?} turn {} is {}, reference turn is {}",
                        rec.id,
                        rec.turn_index,
                        role,
                        target.role
                    );
                }
                cands.push(encode_turn(&corpus, role, &rec.text)?);
                targets.push(target);
            }
            let pairs: Vec<(&Utterance, &Utterance)> =
                cands.iter().zip(targets.into_iter()).collect();
            let report = score_responses(&corpus.vocab, &pairs);
            emit_report(&report, &args, "response generation")?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let kinds: Vec<ModelKind> = match args.model {
        Some(m) => vec![m.into()],
        None => ModelKind::ALL.to_vec(),
    };
    let (schema, dialogues) = micro_fixture(args.vocab);
    let goal_dim = schema.encoding_dim();
    let mut all_pass = true;
    for kind in kinds {
        let cfg = ModelConfig::small(args.vocab, goal_dim, args.hidden);
        let mut model: Model<f64> = Model::new(kind, cfg, 11)?;
        // Check away from the init point: doubled weights push attention
        // softmaxes off uniform so weakly coupled parameters carry enough
        // gradient to rise above finite-difference noise.
        for (_, entry) in model.params_mut().iter_mut() {
            entry.value.scale_assign(2.0);
        }
        let report = grad_check_model(&mut model, &schema, &dialogues, args.step)?;
        let verdict = if report.passes(args.tolerance) {
            "pass"
        } else {
            all_pass = false;
            "FAIL"
        };
        println!("== {kind} ==");
        print!("{}", report.render());
        println!("{kind}: {verdict} (tolerance {:.1e})", args.tolerance);
    }
    Ok(if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<ExitCode> {
    let recipe: synth::Recipe = args.recipe.parse()?;
    let corpus = synth::build(recipe, args.n, args.seed)?;
    write_corpus(&corpus, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} ({} train / {} valid / {} test, vocabulary {}) to {}",
        recipe,
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        corpus.vocab.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
