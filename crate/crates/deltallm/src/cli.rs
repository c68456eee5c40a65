//! Subcommands of the `deltallm` binary. Reports go to `out` as one JSON object
//! per line; progress goes to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deltallm_core::delta::{compress, compression_ratio, CompressOptions, InitMethod, InitOptions, Rank};
use deltallm_core::model::{init_model, perplexity, score_stream, Model, ModelConfig};
use deltallm_core::optim::{pretrain, LrSchedule, PretrainConfig};
use deltallm_core::pmr::{train, ReplacementScheduler, TrainConfig, TrainMode};
use deltallm_core::quant::{quantize_model, Granularity, QuantPolicy, QuantStrategy};
use deltallm_core::redundancy::{layer_similarity, sample_windows, SublayerChoice, DEFAULT_SAMPLE_POSITIONS};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{self, Checkpoint, CheckpointError, Dtype};
use crate::corpus::{load_corpus, Corpus, CorpusError, Split};
use crate::planfile::{PlanFile, PlanFileError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Plan(#[from] PlanFileError),
    #[error(transparent)]
    Model(#[from] deltallm_core::Error),
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Parser)]
#[command(name = "deltallm", version, about = "Compress small transformers with shared weights and low-rank deltas")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a dense teacher model on a byte-level corpus.
    TrainTeacher(TrainTeacherArgs),
    /// Replace plan targets by anchor references plus low-rank deltas.
    Compress(CompressArgs),
    /// Train delta modules against the teacher.
    DeltaTune(DeltaTuneArgs),
    /// Perplexity of a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Quantize the stored base weights of a checkpoint.
    Quantize(QuantizeArgs),
    /// Print plan, ranks, storage and optionally similarity scores.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FloatDtype {
    F64,
    F32,
}

impl From<FloatDtype> for Dtype {
    fn from(d: FloatDtype) -> Self {
        match d {
            FloatDtype::F64 => Dtype::F64,
            FloatDtype::F32 => Dtype::F32,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainTeacherArgs {
    /// JSON with optional `model` (architecture) and `train` (optimizer) sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the number of optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum, default_value = "f64")]
    pub float_dtype: FloatDtype,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub model: ModelConfig,
    pub train: PretrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Gaussian,
    Svd,
    Qr,
    Eva,
}

impl From<InitArg> for InitMethod {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Gaussian => InitMethod::Gaussian,
            InitArg::Svd => InitMethod::Svd,
            InitArg::Qr => InitMethod::Qr,
            InitArg::Eva => InitMethod::Eva,
        }
    }
}

fn parse_rank(s: &str) -> Result<Rank, String> {
    if s == "full" {
        return Ok(Rank::Full);
    }
    match s.parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("rank must be a positive integer or `full`, got `{s}`")),
        Ok(r) => Ok(Rank::Fixed(r)),
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    /// Plan JSON: {strategy, sublayer, k, rank | rank_map, protected_blocks}.
    #[arg(long)]
    pub plan: PathBuf,
    /// Uniform rank; overrides the plan file's `rank`.
    #[arg(long, value_parser = parse_rank)]
    pub rank: Option<Rank>,
    #[arg(long, value_enum, default_value = "svd")]
    pub init: InitArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Calibration corpus for eva init and similarity plans (train split).
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16.0)]
    pub alpha_lora: f64,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_POSITIONS)]
    pub positions: usize,
    #[arg(long, value_enum, default_value = "f64")]
    pub float_dtype: FloatDtype,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    DeltaOnly,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Constant,
    Cosine,
}

#[derive(Debug, Args)]
pub struct DeltaTuneArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub student: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch line-JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// JSON with optional `train` and `scheduler` sections; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub p0: Option<f64>,
    #[arg(long)]
    pub converge_step: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub extra_epochs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub lora_rank: Option<usize>,
    #[arg(long)]
    pub lora_alpha: Option<f64>,
    #[arg(long)]
    pub lora_dropout: Option<f64>,
    #[arg(long)]
    pub eval_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub train: TrainConfig,
    pub scheduler: Option<ReplacementScheduler>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: Split,
    /// Score at most this many tokens from the start of the split.
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    #[value(name = "AnchorSkip", alias = "anchor-skip")]
    AnchorSkip,
    #[value(name = "AllQuant", alias = "all-quant")]
    AllQuant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    PerRow,
    PerTensor,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bits: u8,
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "per-row")]
    pub granularity: GranularityArg,
    /// Dtype of unquantized floats; defaults to the input's.
    #[arg(long, value_enum)]
    pub float_dtype: Option<FloatDtype>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SublayerArg {
    Mlp,
    Attention,
    Both,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Adds similarity scores over sampled windows of the train split.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_POSITIONS)]
    pub positions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "both")]
    pub sublayer: SublayerArg,
    /// Also write the similarity report as a tab-separated table.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

fn emit(out: &mut dyn Write, value: &impl Serialize) -> Result<(), CliError> {
    serde_json::to_writer(&mut *out, value).map_err(std::io::Error::from)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Config { path: path.display().to_string(), message: e.to_string() })
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::TrainTeacher(a) => train_teacher(a, out),
        Command::Compress(a) => cmd_compress(a, out),
        Command::DeltaTune(a) => delta_tune(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Quantize(a) => cmd_quantize(a, out),
        Command::Inspect(a) => inspect(a, out),
    }
}

/// Add-one smoothed unigram perplexity of `eval` under counts from `train`.
pub fn unigram_ppl(train: &[usize], eval: &[usize], vocab: usize) -> f64 {
    let mut counts = vec![0usize; vocab];
    for &t in train {
        counts[t] += 1;
    }
    let total = (train.len() + vocab) as f64;
    let nll: f64 = eval.iter().map(|&t| -(((counts[t] + 1) as f64) / total).ln()).sum();
    (nll / eval.len() as f64).exp()
}

fn train_teacher(a: TrainTeacherArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let start = Instant::now();
    let corpus = load_corpus(&a.corpus, a.seed)?;
    let mut cfg: TeacherConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TeacherConfig::default(),
    };
    cfg.model.seed = a.seed;
    cfg.train.seed = a.seed;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    let mut model = init_model(&cfg.model, a.seed)?;
    eprintln!(
        "training teacher: {} params, {} steps of {}x{} tokens",
        model.param_count(),
        cfg.train.steps,
        cfg.train.batch_size,
        cfg.train.seq_len
    );
    let records = pretrain(&mut model, corpus.train(), corpus.val(), &cfg.train, &mut |r| {
        eprintln!("step {} loss {:.4} val_ppl {:?} ({:.0}s)", r.step, r.train_loss, r.val_ppl, start.elapsed().as_secs_f64());
        let _ = emit(&mut *out, &json!({"event": "pretrain", "record": r}));
    })?;
    checkpoint::save(&a.out, &Checkpoint::Model(model.clone()), a.float_dtype.into())?;
    let (saved, _) = checkpoint::load(&a.out)?;
    let saved = saved.into_model()?;
    let val = &corpus.val()[..corpus.val().len().min(cfg.train.eval_tokens + 1)];
    let val_ppl = perplexity(&saved, val, cfg.train.seq_len, cfg.train.batch_size)?;
    emit(
        out,
        &json!({
            "command": "train-teacher",
            "out": a.out.display().to_string(),
            "params": saved.param_count(),
            "steps": records.last().map_or(0, |r| r.step),
            "tokens": cfg.train.steps * cfg.train.batch_size * cfg.train.seq_len,
            "val_ppl": val_ppl,
            "unigram_ppl": unigram_ppl(corpus.train(), val, cfg.model.vocab_size),
            "wall_clock_secs": start.elapsed().as_secs_f64(),
        }),
    )
}

fn cmd_compress(a: CompressArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let start = Instant::now();
    let teacher = checkpoint::load(&a.teacher)?.0.into_model()?;
    let pf = PlanFile::load(&a.plan)?;
    let calib: Option<Corpus> = a.calib.as_ref().map(|p| load_corpus(p, a.seed)).transpose()?;
    let method: InitMethod = a.init.into();
    if (pf.needs_report() || method == InitMethod::Eva) && calib.is_none() {
        return Err(CliError::Usage("this plan or init method needs --calib".into()));
    }
    let report = if pf.needs_report() {
        let c = calib.as_ref().expect("checked above");
        let windows = sample_windows(c.train(), a.positions, teacher.config.max_seq_len, a.seed)?;
        Some(layer_similarity(&teacher, &windows, pf.sublayer, &c.id)?)
    } else {
        None
    };
    let plan = pf.build(&teacher.config, report.as_ref())?;
    let ranks = pf.ranks(a.rank, &plan)?;
    let opts = CompressOptions { ranks, method, init: InitOptions { alpha_lora: a.alpha_lora }, seed: a.seed };
    let cm = compress(&teacher, &plan, &opts, calib.as_ref().map(|c| c.train()))?;
    checkpoint::save(&a.out, &Checkpoint::Compressed(cm.clone()), a.float_dtype.into())?;
    let before = teacher.param_count();
    let after = cm.param_count();
    let fraction = compression_ratio(before, after).ok();
    if fraction.is_none() {
        eprintln!("warning: the compressed model stores more parameters ({after}) than the teacher ({before})");
    }
    let float_bytes = Dtype::from(a.float_dtype) == Dtype::F32;
    let float_bytes = if float_bytes { 4 } else { 8 };
    emit(
        out,
        &json!({
            "command": "compress",
            "out": a.out.display().to_string(),
            "strategy": plan.strategy,
            "targets": plan.targets().iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            "anchors": plan.anchors().iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            "params_before": before,
            "params_after": after,
            "compression_fraction": fraction,
            "delta_params": cm.delta_param_count(),
            "delta_bytes": cm.delta_param_count() * float_bytes,
            "wall_clock_secs": start.elapsed().as_secs_f64(),
        }),
    )
}

fn delta_tune(a: DeltaTuneArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let start = Instant::now();
    let teacher = checkpoint::load(&a.teacher)?.0.into_model()?;
    let (student_ck, float) = checkpoint::load(&a.student)?;
    let student = student_ck.into_compressed();
    let mut cfg: TuneConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TuneConfig::default(),
    };
    let t = &mut cfg.train;
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v.into();
            }
        };
    }
    set!(a.alpha, t.alpha);
    set!(a.epochs, t.epochs);
    set!(a.lr, t.lr);
    set!(a.batch_size, t.batch_size);
    set!(a.seq_len, t.seq_len);
    set!(a.lora_rank, t.lora_rank);
    set!(a.lora_alpha, t.alpha_lora);
    set!(a.lora_dropout, t.lora_dropout);
    set!(a.eval_tokens, t.eval_tokens);
    set!(a.seed, t.seed);
    if a.steps_per_epoch.is_some() {
        t.steps_per_epoch = a.steps_per_epoch;
    }
    if let Some(m) = a.mode {
        t.mode = match m {
            ModeArg::DeltaOnly => TrainMode::DeltaOnly,
            ModeArg::Joint => TrainMode::Joint,
        };
    }
    if let Some(s) = a.schedule {
        t.schedule = match s {
            ScheduleArg::Constant => LrSchedule::Constant,
            ScheduleArg::Cosine => LrSchedule::Cosine,
        };
    }
    let pmr_flags = a.p0.is_some() || a.converge_step.is_some() || a.gamma.is_some() || a.extra_epochs.is_some();
    if pmr_flags && cfg.scheduler.is_none() {
        cfg.scheduler = Some(ReplacementScheduler::default());
    }
    if let Some(s) = cfg.scheduler.as_mut() {
        set!(a.p0, s.p0);
        set!(a.converge_step, s.converge_step);
        set!(a.gamma, s.depth_bias);
        if a.extra_epochs.is_some() {
            s.extra_epochs = a.extra_epochs;
        }
    }

    let corpus = load_corpus(&a.corpus, cfg.train.seed)?;
    let mut report_file = a.report.as_ref().map(std::fs::File::create).transpose()?;
    eprintln!(
        "delta-tune: {} delta params, scheduler {:?}",
        student.delta_param_count(),
        cfg.scheduler
    );
    let (trained, mut report) = train(
        &teacher,
        &student,
        corpus.train(),
        corpus.val(),
        &cfg.train,
        cfg.scheduler.as_ref(),
        &mut |rec| {
            eprintln!("epoch {} loss {:.4} val_ppl {:.4} rate {:.3}", rec.epoch, rec.train_loss, rec.val_ppl, rec.replacement_rate);
            let line = json!({"event": "epoch", "record": rec});
            let _ = emit(&mut *out, &line);
            if let Some(f) = report_file.as_mut() {
                let _ = emit(f, &line);
            }
        },
    )?;
    report.wall_clock_secs = Some(start.elapsed().as_secs_f64());
    checkpoint::save(&a.out, &Checkpoint::Compressed(trained), float)?;
    let summary = json!({
        "command": "delta-tune",
        "out": a.out.display().to_string(),
        "train": cfg.train,
        "scheduler": cfg.scheduler,
        "report": report,
    });
    if let Some(f) = report_file.as_mut() {
        emit(f, &summary)?;
    }
    emit(out, &summary)
}

/// Perplexity and storage figures of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dataset: String,
    pub split: Split,
    pub perplexity: f64,
    pub tokens: usize,
    pub storage_bytes: u64,
    pub params: u64,
    pub compression_fraction: f64,
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let start = Instant::now();
    let bytes = std::fs::read(&a.model)?;
    let (ck, _) = checkpoint::decode(&bytes)?;
    let corpus = load_corpus(&a.corpus, 0)?;
    let stream = corpus.split(a.split);
    let stream = &stream[..stream.len().min(a.max_tokens.map_or(usize::MAX, |m| m + 1))];
    let cm = ck.into_compressed();
    let window = cm.config.max_seq_len;
    let (ll, n) = score_stream(&cm, stream, window, a.batch_size)?;
    let dense = cm.config.param_count();
    let params = cm.param_count();
    let result = EvalResult {
        dataset: corpus.id.clone(),
        split: a.split,
        perplexity: (-ll / n as f64).exp(),
        tokens: n,
        storage_bytes: bytes.len() as u64,
        params,
        compression_fraction: (dense as f64 - params as f64) / dense as f64,
    };
    eprintln!("eval: {n} tokens in {:.1}s", start.elapsed().as_secs_f64());
    emit(out, &result)
}

fn cmd_quantize(a: QuantizeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (ck, float) = checkpoint::load(&a.model)?;
    let cm = ck.into_compressed();
    let policy = QuantPolicy {
        bits: a.bits,
        strategy: match a.strategy {
            StrategyArg::AnchorSkip => QuantStrategy::AnchorSkip,
            StrategyArg::AllQuant => QuantStrategy::AllQuant,
        },
        granularity: match a.granularity {
            GranularityArg::PerRow => Granularity::PerRow,
            GranularityArg::PerTensor => Granularity::PerTensor,
        },
    };
    let q = quantize_model(&cm, &policy)?;
    let float = a.float_dtype.map_or(float, Dtype::from);
    checkpoint::save(&a.out, &Checkpoint::Compressed(q.clone()), float)?;
    let quantized: Vec<String> =
        q.weights.iter().filter(|(_, w)| w.is_quantized()).map(|(s, _)| s.to_string()).collect();
    let kept: Vec<String> =
        q.weights.iter().filter(|(_, w)| !w.is_quantized()).map(|(s, _)| s.to_string()).collect();
    emit(
        out,
        &json!({
            "command": "quantize",
            "out": a.out.display().to_string(),
            "policy": policy,
            "quantized": quantized,
            "unquantized": kept,
            "storage_bytes": std::fs::metadata(&a.out)?.len(),
        }),
    )
}

fn inspect(a: InspectArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let header = checkpoint::read_header(&a.model)?;
    let (ck, _) = checkpoint::load(&a.model)?;
    let cm = ck.into_compressed();
    emit(out, &json!({"section": "config", "kind": header.kind, "config": cm.config}))?;
    emit(
        out,
        &json!({
            "section": "plan",
            "strategy": cm.plan.strategy,
            "protected_blocks": cm.plan.protected_blocks,
            "entries": cm.plan.entries,
        }),
    )?;
    for (site, d) in &cm.deltas {
        emit(
            out,
            &json!({"section": "delta", "site": site, "rank": d.rank, "scaling": d.scaling, "init": d.init, "params": d.param_count()}),
        )?;
    }
    for t in &header.tensors {
        emit(
            out,
            &json!({"section": "tensor", "name": t.name, "dtype": t.dtype, "shape": t.shape, "bytes": t.length}),
        )?;
    }
    let total: u64 = header.tensors.iter().map(|t| t.length).sum();
    let delta_bytes: u64 = header.tensors.iter().filter(|t| t.name.ends_with(".A") || t.name.ends_with(".B")).map(|t| t.length).sum();
    let dense = cm.config.param_count();
    emit(
        out,
        &json!({
            "section": "storage",
            "payload_bytes": total,
            "delta_bytes": delta_bytes,
            "params": cm.param_count(),
            "dense_params": dense,
            "compression_fraction": (dense as f64 - cm.param_count() as f64) / dense as f64,
            "quantization": cm.quantization,
        }),
    )?;
    if let Some(path) = &a.corpus {
        let corpus = load_corpus(path, a.seed)?;
        let windows = sample_windows(corpus.train(), a.positions, cm.config.max_seq_len, a.seed)?;
        let choice = match a.sublayer {
            SublayerArg::Mlp => SublayerChoice::Mlp,
            SublayerArg::Attention => SublayerChoice::Attention,
            SublayerArg::Both => SublayerChoice::Both,
        };
        let report = layer_similarity(&cm, &windows, choice, &corpus.id)?;
        for (rank, s) in report.ranked().iter().enumerate() {
            emit(
                out,
                &json!({"section": "similarity", "rank": rank, "block": s.block, "sublayer": s.sublayer, "score": s.score, "n": report.positions}),
            )?;
        }
        if let Some(t) = &a.table {
            std::fs::write(t, report.to_table())?;
        }
    }
    Ok(())
}

/// Loads a checkpoint as a dense model.
pub fn load_model(path: &Path) -> Result<Model, CliError> {
    Ok(checkpoint::load(path)?.0.into_model()?)
}
