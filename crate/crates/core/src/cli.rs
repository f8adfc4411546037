//! `innerloop` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
//! 1 anything else.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::analysis::{
    binomial_stderr, compare_trajectories, comparison_json, pca_project, run_sweep,
    trajectory_json, write_heatmap_csv, ScoredItem, SweepConfig, TraceMeta,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{build_prompt, grade_generation, load_dataset, select_shots, EvalItem, Gold, PromptTemplate};
use crate::engine::{forward, generate_greedy, score_multiple_choice, CapturePosition, ForwardOptions};
use crate::error::{Error, Result};
use crate::model::{init_random, ModelSpec, WeightStore};
use crate::regularize::{RegularizerConfig, Strategy};
use crate::schedule::{LoopSchedule, ScheduleArg};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Parser)]
#[command(name = "innerloop", version, about = "Looped-middle transformer inference", args_override_self = true)]
struct Cli {
    /// File of `key = value` lines used as flag defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Greedy generation from a prompt.
    Run(RunArgs),
    /// Accuracy on a JSONL dataset.
    Score(ScoreArgs),
    /// Accuracy delta for every loop range, as a heatmap CSV.
    Sweep(SweepArgs),
    /// Base vs looped hidden-state trajectories in a shared PCA basis.
    TraceCompare(TraceArgs),
    /// Write a randomly initialised toy checkpoint.
    Init(InitArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Checkpoint in `.lprn` format.
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// Tokenizer JSON; byte-level when omitted.
    #[arg(long, value_name = "PATH")]
    tokenizer: Option<PathBuf>,
    /// Do not prepend the tokenizer's BOS token.
    #[arg(long)]
    no_bos: bool,
}

#[derive(Debug, Args)]
struct RegArgs {
    #[arg(long, default_value = "naive", value_name = "naive|uniform|mavg|align|noise")]
    strategy: String,
    /// Weight on the first loop-boundary state for `mavg`.
    #[arg(long, default_value_t = 0.5)]
    eta: f32,
    /// Score temperature for `align`; defaults to sqrt(d_model).
    #[arg(long)]
    align_temp: Option<f32>,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
}

impl RegArgs {
    fn config(&self) -> Result<RegularizerConfig> {
        let cfg = RegularizerConfig {
            strategy: self.strategy.parse::<Strategy>()?,
            eta: self.eta,
            align_temperature: self.align_temp,
            noise_seed: self.noise_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    /// Loop range and pass count as `s:e:R` (R counts total passes).
    #[arg(long, value_name = "s:e:R")]
    schedule: Option<String>,
    /// Extra passes over the loop range; overrides R with this value + 1.
    #[arg(long, value_name = "N")]
    extra_passes: Option<usize>,
}

impl ScheduleArgs {
    fn build(&self, n_layers: usize) -> Result<LoopSchedule> {
        match (&self.schedule, self.extra_passes) {
            (None, None) => LoopSchedule::identity(n_layers),
            (None, Some(_)) => Err(Error::Config("--extra-passes needs --schedule".into())),
            (Some(text), extra) => {
                let mut arg: ScheduleArg = text.parse()?;
                if let Some(x) = extra {
                    arg.repeats = x + 1;
                }
                arg.build(n_layers)
            }
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    prompt: String,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    reg: RegArgs,
    #[arg(long, default_value_t = 16)]
    max_new: usize,
    /// Write the prompt's last-token trajectory (PCA-projected) as JSON.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PromptArgs {
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,
    /// Number of in-context examples; the template's value when omitted.
    #[arg(long)]
    shots: Option<usize>,
    /// Seed for shot selection.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prompt template JSON.
    #[arg(long, value_name = "FILE")]
    template: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    prompts: PromptArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    reg: RegArgs,
    /// Token budget for generative items.
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    /// Write the JSON report here as well as printing the table.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    prompts: PromptArgs,
    /// Total passes over each loop range.
    #[arg(long, default_value_t = 2)]
    repeats: usize,
    #[command(flatten)]
    reg: RegArgs,
    /// Comma-separated loop starts; all when omitted.
    #[arg(long, value_delimiter = ',')]
    starts: Option<Vec<usize>>,
    /// Comma-separated loop ends (exclusive); all when omitted.
    #[arg(long, value_delimiter = ',')]
    ends: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// CSV destination; standard output when omitted.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TraceArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    prompt: String,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    reg: RegArgs,
    /// Token index to follow; the last token when omitted.
    #[arg(long)]
    position: Option<usize>,
    /// JSON destination; standard output when omitted.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InitArgs {
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    /// Defaults to the byte tokenizer's size.
    #[arg(long, default_value_t = 258)]
    vocab: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Exit code for an engine error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Io { .. } => 3,
        _ => 1,
    }
}

/// Moves `--config FILE` out of `args` and splices its `key = value` pairs in
/// right after the subcommand, so flags given on the command line win.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut path = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let text = a.to_string_lossy();
        if text == "--config" {
            let p = it
                .next()
                .ok_or_else(|| Error::Config("--config needs a file".into()))?;
            path = Some(PathBuf::from(p));
        } else if let Some(p) = text.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut defaults = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with('[') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{}:{}: expected key = value", path.display(), i + 1))
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"');
        match value {
            "true" => defaults.push(OsString::from(format!("--{key}"))),
            "false" => {}
            v => {
                defaults.push(OsString::from(format!("--{key}")));
                defaults.push(OsString::from(v));
            }
        }
    }
    let at = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map_or(rest.len(), |i| i + 2);
    rest.splice(at..at, defaults);
    Ok(rest)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args = match expand_config(args.into_iter().map(Into::into).collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Score(a) => cmd_score(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::TraceCompare(a) => cmd_trace_compare(a),
        Command::Init(a) => cmd_init(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Loaded {
    spec: ModelSpec,
    store: WeightStore,
    tokenizer: Tokenizer,
    bos: Option<u32>,
    label: String,
}

impl Loaded {
    fn open(args: &ModelArgs) -> Result<Self> {
        let (spec, store) = load_checkpoint(&args.model)?;
        let tokenizer = match &args.tokenizer {
            Some(p) => Tokenizer::load(p)?,
            None => Tokenizer::byte(),
        };
        if tokenizer.min_vocab_size() > spec.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer needs {} vocabulary entries but the model has {}",
                tokenizer.min_vocab_size(),
                spec.vocab_size
            )));
        }
        let bos = if args.no_bos { None } else { tokenizer.special().bos };
        Ok(Self {
            spec,
            store,
            tokenizer,
            bos,
            label: args.model.display().to_string(),
        })
    }

    fn context(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids: Vec<u32> = self.bos.into_iter().collect();
        ids.extend(self.tokenizer.encode(text)?);
        if ids.is_empty() {
            return Err(Error::Input("prompt encodes to zero tokens".into()));
        }
        Ok(ids)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    write_file(path, text.as_bytes())
}

fn stdout_line(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn options(model: &Loaded, schedule: &ScheduleArgs, reg: &RegArgs) -> Result<ForwardOptions> {
    let schedule = schedule.build(model.spec.n_layers)?;
    schedule.validate_against(&model.spec)?;
    Ok(ForwardOptions::new(schedule, reg.config()?))
}

fn schedule_label(opts: &ForwardOptions) -> String {
    let s = &opts.schedule;
    format!("{}:{}:{}", s.start(), s.end(), s.repeats())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let model = Loaded::open(&a.model)?;
    let opts = options(&model, &a.schedule, &a.reg)?;
    let prompt = model.context(&a.prompt)?;
    let eos = model.tokenizer.special().eos;
    let new = generate_greedy(&prompt, &model.store, &model.spec, &opts, a.max_new, eos)?;
    let text = String::from_utf8_lossy(&model.tokenizer.decode_bytes(&new)?).into_owned();
    stdout_line(&text)?;
    if let Some(path) = &a.trace {
        let traced = opts.clone().with_trajectory(CapturePosition::Last);
        let out = forward(&prompt, &model.store, &model.spec, &traced)?;
        let record = out.trajectory.expect("trajectory requested");
        let meta = TraceMeta {
            model: model.label.clone(),
            schedule: schedule_label(&opts),
            strategy: opts.regularizer.strategy.name().into(),
        };
        write_json(path, &trajectory_json(&meta, &pca_project(&record)?))?;
    }
    Ok(())
}

struct PreparedItem<'a> {
    item: &'a EvalItem,
    context: Vec<u32>,
    choices: Vec<Vec<u32>>,
}

fn load_items(p: &PromptArgs) -> Result<(Vec<EvalItem>, PromptTemplate, usize)> {
    let items = load_dataset(&p.dataset)?;
    if items.is_empty() {
        return Err(Error::Input(format!("{} has no items", p.dataset.display())));
    }
    let template = match &p.template {
        Some(t) => PromptTemplate::load(t)?,
        None => PromptTemplate::default(),
    };
    let shots = p.shots.unwrap_or(template.n_shots);
    Ok((items, template, shots))
}

fn prepare<'a>(
    model: &Loaded,
    items: &'a [EvalItem],
    template: &PromptTemplate,
    shots: usize,
    seed: u64,
) -> Result<Vec<PreparedItem<'a>>> {
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let picked = select_shots(items, i, shots, seed);
            let prompt = build_prompt(item, &picked, template)?;
            let choices = prompt
                .continuations
                .iter()
                .map(|c| model.tokenizer.encode(c))
                .collect::<Result<Vec<_>>>()?;
            Ok(PreparedItem {
                item,
                context: model.context(&prompt.context)?,
                choices,
            })
        })
        .collect()
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let model = Loaded::open(&a.model)?;
    let opts = options(&model, &a.schedule, &a.reg)?;
    let (items, template, shots) = load_items(&a.prompts)?;
    let prepared = prepare(&model, &items, &template, shots, a.prompts.seed)?;
    let eos = model.tokenizer.special().eos;

    let mut rows = Vec::with_capacity(prepared.len());
    let mut correct = 0usize;
    for p in &prepared {
        let row = match &p.item.gold {
            Gold::Choice(gold) => {
                let s = score_multiple_choice(&p.context, &p.choices, &model.store, &model.spec, &opts)?;
                let ok = s.best == *gold;
                correct += usize::from(ok);
                json!({"line": p.item.line, "correct": ok, "predicted": s.best, "gold": gold, "scores": s.scores})
            }
            Gold::Target(target) => {
                let ids = generate_greedy(&p.context, &model.store, &model.spec, &opts, a.max_new, eos)?;
                let text = String::from_utf8_lossy(&model.tokenizer.decode_bytes(&ids)?).into_owned();
                let ok = grade_generation(&text, target);
                correct += usize::from(ok);
                json!({"line": p.item.line, "correct": ok, "generated": text, "gold": target})
            }
        };
        rows.push(row);
    }
    let n = prepared.len();
    let accuracy = correct as f64 / n as f64;
    let stderr = binomial_stderr(accuracy, n);
    let report = json!({
        "meta": {
            "model": model.label,
            "dataset": a.prompts.dataset.display().to_string(),
            "schedule": schedule_label(&opts),
            "strategy": opts.regularizer.strategy.name(),
            "shots": shots,
            "seed": a.prompts.seed,
        },
        "n": n,
        "correct": correct,
        "accuracy": accuracy,
        "stderr": stderr,
        "items": rows,
    });
    if let Some(path) = &a.json {
        write_json(path, &report)?;
    }
    stdout_line(&format!("{:<10} {:>10}", "schedule", schedule_label(&opts)))?;
    stdout_line(&format!("{:<10} {:>10}", "strategy", opts.regularizer.strategy.name()))?;
    stdout_line(&format!("{:<10} {:>10}", "items", n))?;
    stdout_line(&format!("{:<10} {:>10}", "correct", correct))?;
    stdout_line(&format!(
        "{:<10} {:>10}",
        "accuracy",
        format!("{:.2} ± {:.2}", 100.0 * accuracy, 100.0 * stderr)
    ))
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let model = Loaded::open(&a.model)?;
    let (items, template, shots) = load_items(&a.prompts)?;
    let prepared = prepare(&model, &items, &template, shots, a.prompts.seed)?;
    let scored: Vec<ScoredItem> = prepared
        .into_iter()
        .filter_map(|p| match p.item.gold {
            Gold::Choice(gold) => Some(ScoredItem {
                context: p.context,
                choices: p.choices,
                gold,
            }),
            Gold::Target(_) => None,
        })
        .collect();
    if scored.is_empty() {
        return Err(Error::Input("sweep needs multiple-choice items".into()));
    }
    if a.repeats == 0 {
        return Err(Error::Config("--repeats must be >= 1".into()));
    }
    let cfg = SweepConfig {
        repeats: a.repeats,
        regularizer: a.reg.config()?,
        starts: a.starts.clone(),
        ends: a.ends.clone(),
        jobs: a.jobs,
    };
    let result = run_sweep(&scored, &model.store, &model.spec, &cfg)?;
    let mut csv = Vec::new();
    write_heatmap_csv(&result, &mut csv).map_err(|e| Error::io("<buffer>", e))?;
    match &a.out {
        Some(path) => write_file(path, &csv),
        None => std::io::stdout()
            .write_all(&csv)
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn cmd_trace_compare(a: TraceArgs) -> Result<()> {
    let model = Loaded::open(&a.model)?;
    let looped = options(&model, &a.schedule, &a.reg)?;
    let prompt = model.context(&a.prompt)?;
    let position = a.position.map_or(CapturePosition::Last, CapturePosition::Index);
    let base = ForwardOptions::baseline(&model.spec)?.with_trajectory(position);
    let looped = looped.with_trajectory(position);
    let ra = forward(&prompt, &model.store, &model.spec, &base)?.trajectory.expect("requested");
    let rb = forward(&prompt, &model.store, &model.spec, &looped)?.trajectory.expect("requested");
    let report = compare_trajectories(&ra, &rb)?;
    let meta = TraceMeta {
        model: model.label.clone(),
        schedule: schedule_label(&looped),
        strategy: looped.regularizer.strategy.name().into(),
    };
    let value = comparison_json(&meta, &report);
    match &a.out {
        Some(path) => {
            write_json(path, &value)?;
            stdout_line(&format!("pairs                {}", report.pairs.len()))?;
            stdout_line(&format!(
                "max divergence       {:.6} at depth {}",
                report.max_divergence, report.max_divergence_depth
            ))?;
            let onset = report
                .first_divergent_step
                .map_or_else(|| "none".to_string(), |k| k.to_string());
            stdout_line(&format!("first divergent step {onset}"))
        }
        None => stdout_line(&serde_json::to_string_pretty(&value).expect("json values serialize")),
    }
}

fn cmd_init(a: InitArgs) -> Result<()> {
    let spec = ModelSpec::toy(a.layers, a.d_model, a.vocab);
    spec.validate()?;
    let store = init_random(&spec, a.seed)?;
    save_checkpoint(&a.out, &spec, &store)?;
    stdout_line(&format!(
        "wrote {} (L={}, d={}, V={}, seed={})",
        a.out.display(),
        a.layers,
        a.d_model,
        a.vocab,
        a.seed
    ))
}
