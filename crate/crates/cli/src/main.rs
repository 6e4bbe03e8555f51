//! `drivenext`: build, analyze, gradient-check, train and sweep camera
//! encoder configs from JSON documents.
//!
//! Exit codes: 0 success, 1 runtime failure (including a failed gradient
//! check), 2 configuration or validation failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use drivenext::ablation::{parse_csv, run_grid, write_csv, GridSpec};
use drivenext::analysis::{count_macs, receptive_field_analytic, render_cost_table, CostOptions};
use drivenext::layers::{Mode, Module};
use drivenext::model::{build_network, parse_override, resolve_document, Head, ModelConfig, ResolvedDocument};
use drivenext::plot::{render_scatter, Metric, METRIC_NAMES};
use drivenext::tensor::{tensor_from_seed, Distribution, Shape4};
use drivenext::training::{grad_check, train_loop, GradCheckOptions, TrainRecipe};

#[derive(Parser, Debug)]
#[command(name = "drivenext", version, about = "Camera-encoder architecture workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON config document. Without it the document starts empty, so a
    /// preset must come from --set preset=NAME.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted-path override applied before validation, e.g.
    /// stages.2.attention_tail=1 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for weights, data and sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Progress messages on stderr.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate and build a config, then print its stage table.
    Build {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input size HxW (or N for N×N) used for the output shapes.
        #[arg(long, default_value = "256x256")]
        input_size: String,
    },
    /// Per-stage and total params, MACs and receptive fields.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "256x256")]
        input_size: String,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Leave BN, GELU and LayerNorm out of the MAC count.
        #[arg(long)]
        no_elementwise: bool,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Central-difference gradient check in 64-bit floats.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory receiving gradcheck.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "64x64")]
        input_size: String,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Channel widths are divided by this before building.
        #[arg(long, default_value_t = 16)]
        width_divisor: usize,
        /// Batch-norm mode during the check. In train mode a conv bias
        /// feeding a batch norm has an identically zero gradient.
        #[arg(long, value_enum, default_value_t = CheckMode::Train)]
        mode: CheckMode,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train on the synthetic heatmap task and write train_report.json.
    TrainToy {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        recipe: RecipeArgs,
        /// Train in 64-bit floats instead of 32-bit.
        #[arg(long)]
        f64: bool,
    },
    /// Run the document's grid section; writes results.csv and manifest.json.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: available cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// SVG scatter of a results CSV.
    Plot {
        /// Results CSV written by `ablate`.
        csv: PathBuf,
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "macs", value_parser = metric_names())]
        x: String,
        #[arg(long, default_value = "final_loss_mean", value_parser = metric_names())]
        y: String,
    },
}

fn metric_names() -> clap::builder::PossibleValuesParser {
    clap::builder::PossibleValuesParser::new(METRIC_NAMES)
}

#[derive(Args, Debug)]
struct RecipeArgs {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Table,
    Json,
    Csv,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum CheckMode {
    Train,
    Eval,
}

/// A failure tagged with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<drivenext::Error>() {
            Some(e) if e.is_config() => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

impl From<drivenext::Error> for Failure {
    fn from(e: drivenext::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn config_failure(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

type CmdResult = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(f) => {
            match f.error.downcast_ref::<drivenext::Error>() {
                Some(drivenext::Error::Invalid(vs)) => {
                    eprintln!("error: invalid configuration");
                    for v in vs {
                        eprintln!("  {v}");
                    }
                }
                _ => eprintln!("error: {:#}", f.error),
            }
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Build { cfg, input_size } => cmd_build(&cfg, &input_size),
        Command::Analyze {
            cfg,
            input_size,
            format,
            no_elementwise,
            batch,
        } => cmd_analyze(&cfg, &input_size, format, no_elementwise, batch),
        Command::Gradcheck {
            cfg,
            out,
            input_size,
            batch,
            width_divisor,
            mode,
            epsilon,
            tolerance,
        } => {
            let opts = GradCheckOptions {
                epsilon,
                tolerance,
                seed: cfg.seed.unwrap_or(0),
                ..GradCheckOptions::default()
            };
            cmd_gradcheck(&cfg, out.as_deref(), &input_size, batch, width_divisor, mode, opts)
        }
        Command::TrainToy { cfg, out, recipe, f64 } => cmd_train_toy(&cfg, &out, &recipe, f64),
        Command::Ablate { cfg, out, jobs } => cmd_ablate(&cfg, &out, jobs),
        Command::Plot { csv, out, x, y } => cmd_plot(&csv, &out, &x, &y),
    }
}

fn load(args: &ConfigArgs) -> Result<ResolvedDocument, Failure> {
    let doc: Value = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(config_failure)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(config_failure)?
        }
        None => json!({}),
    };
    let overrides = args
        .overrides
        .iter()
        .map(|o| parse_override(o))
        .collect::<drivenext::Result<Vec<_>>>()?;
    let resolved = resolve_document(doc, &overrides)?;
    if args.verbose > 0 {
        eprintln!("config {} resolved", resolved.model.name);
    }
    Ok(resolved)
}

fn parse_size(raw: &str) -> Result<(usize, usize), Failure> {
    let parsed = match raw.split_once(['x', 'X']) {
        Some((h, w)) => h.trim().parse().ok().zip(w.trim().parse().ok()),
        None => raw.trim().parse().ok().map(|n| (n, n)),
    };
    match parsed {
        Some((h, w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(config_failure(anyhow!("input size {raw:?} is not HxW or N"))),
    }
}

fn check_divisible(cfg: &ModelConfig, h: usize, w: usize) -> Result<(), Failure> {
    let f = cfg.reduction();
    if h % f != 0 || w % f != 0 {
        return Err(config_failure(anyhow!(
            "input {h}x{w} is not divisible by the reduction factor {f} of {}",
            cfg.name
        )));
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn list<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join("/")
}

fn cmd_build(args: &ConfigArgs, input_size: &str) -> CmdResult {
    let cfg = load(args)?.model;
    let (h, w) = parse_size(input_size)?;
    check_divisible(&cfg, h, w)?;
    let net = build_network::<f32>(&cfg, args.seed.unwrap_or(0))?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "config {}: {} stages, stem {}, reduction {}, head {:?}",
        cfg.name,
        cfg.stage_count(),
        if cfg.has_stem() { "on" } else { "off" },
        cfg.reduction(),
        cfg.head
    );
    let _ = writeln!(out, "blocks {}", list(cfg.blocks()));
    let _ = writeln!(out, "input (1, {}, {h}, {w})", cfg.input_channels);
    let _ = writeln!(out, "{:<8} {:>6} {:>9} {:>6} {:>6}  output", "stage", "blocks", "attention", "lk", "lc");
    let (mut oh, mut ow) = (h, w);
    if cfg.has_stem() {
        (oh, ow) = (oh / 2, ow / 2);
        let c = cfg.stages[0].lc_channels;
        let _ = writeln!(out, "{:<8} {:>6} {:>9} {:>6} {:>6}  (1, {c}, {oh}, {ow})", "stem", "-", "-", "-", c);
    }
    for (i, s) in cfg.stages.iter().enumerate() {
        (oh, ow) = (oh / 2, ow / 2);
        let _ = writeln!(
            out,
            "{:<8} {:>6} {:>9} {:>6} {:>6}  (1, {}, {oh}, {ow})",
            i + 1,
            s.blocks,
            s.attention_tail,
            s.lk_channels,
            s.lc_channels,
            s.lc_channels
        );
    }
    if net.skips.is_empty() {
        let _ = writeln!(out, "skips none");
    } else {
        let skips: Vec<String> = net
            .skips
            .iter()
            .map(|s| format!("stage{} (pool {})", s.source + 1, s.pool))
            .collect();
        let _ = writeln!(out, "skips {}", skips.join(", "));
    }
    let _ = writeln!(out, "params {}", net.param_count());
    print!("{out}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(args: &ConfigArgs, input_size: &str, format: Format, no_elementwise: bool, batch: usize) -> CmdResult {
    let cfg = load(args)?.model;
    let (h, w) = parse_size(input_size)?;
    check_divisible(&cfg, h, w)?;
    let opts = CostOptions {
        include_elementwise: !no_elementwise,
    };
    let report = count_macs(&cfg, batch.max(1), h, w, opts)?;
    let rf = receptive_field_analytic(&cfg);
    let stage_rf = |group: &str| -> String {
        group
            .strip_prefix("stage")
            .and_then(|i| i.parse::<usize>().ok())
            .and_then(|i| rf.per_stage.get(i - 1))
            .map_or_else(|| "-".into(), |s| s.r.to_string())
    };
    match format {
        Format::Table => {
            print!("{}", render_cost_table(&report));
            let fields: Vec<String> = rf.per_stage.iter().map(|s| s.r.to_string()).collect();
            println!("receptive field per stage {}  final {}", fields.join(" "), rf.final_output);
        }
        Format::Json => {
            let doc = json!({ "cost": report, "receptive_field": rf });
            println!("{}", serde_json::to_string_pretty(&doc).map_err(anyhow::Error::from)?);
        }
        Format::Csv => {
            let mut out = String::from("group,params,buffers,macs,output_shape,receptive_field\n");
            for g in &report.per_stage {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    g.group,
                    g.params,
                    g.buffers,
                    g.macs,
                    list(g.output_shape),
                    stage_rf(&g.group)
                );
            }
            let t = &report.totals;
            let last = report.per_stage.last().map(|g| g.output_shape).unwrap_or_default();
            let _ = writeln!(
                out,
                "total,{},{},{},{},{}",
                t.params,
                t.buffers,
                t.macs,
                list(last),
                rf.final_output
            );
            print!("{out}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(
    args: &ConfigArgs,
    out: Option<&Path>,
    input_size: &str,
    batch: usize,
    width_divisor: usize,
    mode: CheckMode,
    opts: GradCheckOptions,
) -> CmdResult {
    let cfg = load(args)?.model.scaled_widths(width_divisor);
    let (h, w) = parse_size(input_size)?;
    check_divisible(&cfg, h, w)?;
    let seed = args.seed.unwrap_or(0);
    let mut net = build_network::<f64>(&cfg, seed)?;
    let shape = Shape4::new(batch.max(1), cfg.input_channels, h, w)?;
    let x = tensor_from_seed(shape, seed ^ 0x5eed, Distribution::Uniform)?;
    if mode == CheckMode::Eval {
        // one training-mode pass gives every batch norm running statistics
        net.set_mode(Mode::Train);
        Module::forward(&mut net, &x)?;
        net.set_mode(Mode::Eval);
    }
    let report = grad_check(&mut net, &x, &opts)?;
    for t in &report.tensors {
        let verdict = if t.max_rel_error <= report.tolerance { "ok" } else { "FAIL" };
        println!("{verdict:<4} {:<40} {:>6}/{:<6} max rel {:.3e}", t.name, t.checked, t.len, t.max_rel_error);
    }
    let failures = report.failures().count();
    println!(
        "{}: {} tensors, {failures} over tolerance {:e} ({} mode, config {})",
        if report.pass { "PASS" } else { "FAIL" },
        report.tensors.len(),
        report.tolerance,
        if mode == CheckMode::Train { "train" } else { "eval" },
        cfg.name
    );
    if let Some(dir) = out {
        write_file(&dir.join("gradcheck.json"), &serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?)?;
    }
    Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn recipe_from(args: &RecipeArgs, seed: Option<u64>) -> TrainRecipe {
    let mut r = TrainRecipe::default();
    if let Some(s) = seed {
        r.seed = s;
    }
    if let Some(v) = args.steps {
        r.steps = v;
    }
    if let Some(v) = args.batch_size {
        r.batch_size = v;
    }
    if let Some(v) = args.image_size {
        r.image_size = v;
    }
    if let Some(v) = args.lr {
        r.optimizer.lr_max = v;
    }
    if let Some(v) = args.warmup {
        r.optimizer.warmup_steps = v;
    }
    r
}

fn cmd_train_toy(args: &ConfigArgs, out: &Path, recipe: &RecipeArgs, wide: bool) -> CmdResult {
    let mut cfg = load(args)?.model;
    cfg.head = Head::Heatmap;
    let recipe = recipe_from(recipe, args.seed);
    let report = if wide {
        train_loop::<f64>(&cfg, &recipe)?
    } else {
        train_loop::<f32>(&cfg, &recipe)?
    };
    write_file(&out.join("train_report.json"), &report.to_json()?)?;
    let fin = report.final_loss.map_or_else(|| "non-finite".to_string(), |l| format!("{l:.6}"));
    println!(
        "{}: {} steps, initial loss {:.6}, final loss {fin}{}",
        cfg.name,
        report.steps,
        report.initial_loss,
        if report.diverged { ", diverged" } else { "" }
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool_version: &'static str,
    started_unix: u64,
    finished_unix: u64,
    wall_seconds: f64,
    jobs: usize,
    base_config: &'a ModelConfig,
    grid: &'a GridSpec,
    records: usize,
    results: &'static str,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn cmd_ablate(args: &ConfigArgs, out: &Path, jobs: Option<usize>) -> CmdResult {
    let doc = load(args)?;
    let grid = doc
        .grid
        .ok_or_else(|| config_failure(anyhow!("the config document has no \"grid\" section")))?;
    let mut spec = GridSpec::from_value(grid)?;
    if let Some(s) = args.seed {
        spec.recipe.seed = s;
    }
    let jobs = jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let started = unix_now();
    let clock = Instant::now();
    let records = run_grid(&spec, &doc.model, jobs)?;
    let csv_path = out.join("results.csv");
    write_file(&csv_path, &write_csv(&records))?;
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        started_unix: started,
        finished_unix: unix_now(),
        wall_seconds: clock.elapsed().as_secs_f64(),
        jobs,
        base_config: &doc.model,
        grid: &spec,
        records: records.len(),
        results: "results.csv",
    };
    write_file(
        &out.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).map_err(anyhow::Error::from)?,
    )?;
    let diverged = records.iter().filter(|r| r.diverged).count();
    println!("{} records ({diverged} diverged) written to {}", records.len(), csv_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_plot(csv: &Path, out: &Path, x: &str, y: &str) -> CmdResult {
    let text = std::fs::read_to_string(csv)
        .with_context(|| format!("reading {}", csv.display()))
        .map_err(config_failure)?;
    let records = parse_csv(&text).map_err(|e| config_failure(e.into()))?;
    let (x, y): (Metric, Metric) = (x.parse()?, y.parse()?);
    write_file(out, &render_scatter(&records, x, y))?;
    println!("{} markers written to {}", records.len(), out.display());
    Ok(ExitCode::SUCCESS)
}
