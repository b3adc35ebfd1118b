//! The `bsrn` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::data::{list_images, load_image, save_gray_map, save_image, Dataset, ImageRGB8};
use crate::eval::{display_name, evaluate_image, write_csv};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::model::{
    body_param_count, count_params, forward, init_params, Inference, ModelConfig, SUPPORTED_SCALES,
};
use crate::optim::TrainConfig;
use crate::train::{log_header, log_record, TrainLog, Trainer};

#[derive(Debug, Parser)]
#[command(name = "bsrn", version, about = "Recursive super-resolution with block states")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a directory of images.
    Train(TrainArgs),
    /// Upscale one image with a trained checkpoint.
    Upscale(UpscaleArgs),
    /// Score a checkpoint on a directory of ground-truth images.
    Eval(EvalArgs),
    /// Print parameter counts for an architecture.
    Params(ParamsArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct ArchArgs {
    /// Feature channels.
    #[arg(long = "c", default_value_t = 64)]
    channels: usize,
    /// Block-state channels.
    #[arg(long = "s", default_value_t = 64)]
    state_channels: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    arch: ArchArgs,
    /// Train a single upscaling path.
    #[arg(long, conflicts_with = "multi_scale")]
    scale: Option<usize>,
    /// Train the x2, x3 and x4 paths together.
    #[arg(long)]
    multi_scale: bool,
    #[arg(long, default_value_t = 16)]
    recursions: usize,
    #[arg(long, default_value_t = 1)]
    freq_control: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Low-resolution patch side [default: 32, or 48 with --multi-scale].
    #[arg(long)]
    patch: Option<usize>,
    /// Total number of updates; a resumed run continues up to this count.
    #[arg(long, default_value_t = 1_000_000)]
    steps: u64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f32,
    #[arg(long, default_value_t = 200_000)]
    lr_halve_every: u64,
    /// Per-tensor gradient L2 clipping threshold.
    #[arg(long, default_value_t = 5.0)]
    clip: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    data_dir: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training log [default: the checkpoint path with a .csv extension].
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write a log row every N updates.
    #[arg(long, default_value_t = 1)]
    log_every: u64,
    /// Save the checkpoint every N updates, and always at the end.
    #[arg(long, default_value_t = 1000)]
    checkpoint_every: u64,
    /// Continue from the checkpoint at --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct UpscaleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Upscaling factor [default: the checkpoint's only scale].
    #[arg(long)]
    scale: Option<usize>,
    /// Override the intermediate-output interval r.
    #[arg(long)]
    freq_control: Option<usize>,
    /// Also write every intermediate output and H/S state map here.
    #[arg(long, value_name = "DIR")]
    emit_intermediate: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Not needed with --scale 1.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data_dir: PathBuf,
    /// Upscaling factor; 1 scores every image against itself.
    #[arg(long)]
    scale: usize,
    #[arg(long)]
    freq_control: Option<usize>,
    /// CSV destination [default: stdout].
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Timed runs per image, after one warm-up.
    #[arg(long, default_value_t = 5)]
    timing_runs: usize,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    #[command(flatten)]
    arch: ArchArgs,
    /// Scales to report [default: 2, 3 and 4].
    #[arg(long, value_delimiter = ',')]
    scales: Vec<usize>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Scale one group's analytic gradient by 1.5 (negative-control hook).
    #[arg(long, hide = true, value_name = "GROUP")]
    inject_fault: Option<String>,
}

/// Errors raised while validating flags and inputs, before any work starts.
#[derive(Debug, thiserror::Error)]
#[error("{0:#}")]
struct UsageError(anyhow::Error);

fn usage<T>(r: crate::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| UsageError(e.into()).into())
}

/// Parses `args` and runs the command. Exit status: 0 on success, 1 on a
/// runtime failure or failed gradient check, 2 on a usage error.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("error: invalid arguments");
            eprintln!("{}", first.trim_end());
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Train(a) => train(a).map(|_| ExitCode::SUCCESS),
        Command::Upscale(a) => upscale(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => eval(a).map(|_| ExitCode::SUCCESS),
        Command::Params(a) => params(a).map(|_| ExitCode::SUCCESS),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let scales = match (a.scale, a.multi_scale) {
        (_, true) => SUPPORTED_SCALES.to_vec(),
        (Some(f), false) => vec![f],
        (None, false) => vec![2],
    };
    let config = usage(ModelConfig::new(
        a.arch.channels,
        a.arch.state_channels,
        a.recursions,
        a.freq_control,
        &scales,
    ))?;
    let mut cfg = TrainConfig::recipe(a.multi_scale);
    cfg.batch = a.batch;
    cfg.base_lr = a.lr;
    cfg.halve_every = a.lr_halve_every;
    cfg.clip_theta = a.clip;
    cfg.total_steps = a.steps;
    cfg.seed = a.seed;
    if let Some(p) = a.patch {
        cfg.patch = p;
    }
    usage(cfg.validate(&scales))?;
    if a.log_every == 0 || a.checkpoint_every == 0 {
        return Err(UsageError(anyhow::anyhow!("--log-every and --checkpoint-every must be positive")).into());
    }
    let dataset = usage(Dataset::load_dir(&a.data_dir, &scales, cfg.patch))?;

    let checkpoint = if a.resume {
        let ck = usage(Checkpoint::load(&a.out))?;
        usage(ck.require_config(&config))?;
        ck
    } else {
        Checkpoint::fresh(init_params(&config, a.seed)?)
    };
    let log_path = a.log.clone().unwrap_or_else(|| default_log_path(&a.out));
    let header = log_header(&checkpoint.params);
    let start = checkpoint.global_step();
    let mut log = if a.resume {
        TrainLog::resume(&log_path, &header, start)?
    } else {
        TrainLog::create(&log_path, &header)?
    };
    let mut trainer = usage(Trainer::new(checkpoint, cfg, dataset))?;
    trainer.checkpoint().save(&a.out)?;

    let (log_every, checkpoint_every, out) = (a.log_every, a.checkpoint_every, a.out.clone());
    trainer.run_until(a.steps, |t, report| {
        if report.step % log_every == 0 {
            log.write(&log_record(report))?;
        }
        if t.step() % checkpoint_every == 0 {
            t.checkpoint().save(&out)?;
        }
        if t.step() % 100 == 0 {
            eprintln!("step {} x{} loss {:.5}", t.step(), report.scale, report.loss);
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&a.out)?;
    println!("trained to step {}; checkpoint {}", trainer.step(), a.out.display());
    Ok(())
}

fn pick_scale(ck: &Checkpoint, scale: Option<usize>) -> anyhow::Result<usize> {
    let scales = &ck.config().scales;
    match scale {
        Some(f) if scales.contains(&f) => Ok(f),
        Some(f) => bail!(UsageError(anyhow::anyhow!(
            "config error: scale {f} is not in this checkpoint (has {scales:?})"
        ))),
        None if scales.len() == 1 => Ok(scales[0]),
        None => bail!(UsageError(anyhow::anyhow!(
            "checkpoint has scales {scales:?}; pick one with --scale"
        ))),
    }
}

fn upscale(a: UpscaleArgs) -> anyhow::Result<()> {
    let ck = usage(Checkpoint::load(&a.checkpoint))?;
    let scale = pick_scale(&ck, a.scale)?;
    let mut inference = Inference::new(ck.config(), scale);
    if let Some(r) = a.freq_control {
        usage(crate::model::validate_schedule(inference.recursions, r))?;
        inference = inference.with_freq_control(r);
    }
    if a.emit_intermediate.is_some() {
        inference = inference.with_intermediates();
    }
    let input = usage(load_image(&a.input))?.to_feature_map();
    let result = forward(&input, &ck.params, &inference)?;
    save_image(&ImageRGB8::from_feature_map(&result.output)?, &a.output)?;
    println!("head evaluations: {}", result.head_evaluations);

    if let (Some(dir), Some(inter)) = (&a.emit_intermediate, &result.intermediates) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (t, y) in &inter.outputs {
            save_image(&ImageRGB8::from_feature_map(y)?, dir.join(format!("y_t{t:03}.ppm")))?;
        }
        for (i, h) in inter.features.iter().enumerate() {
            save_gray_map(h, dir.join(format!("h_t{:03}.pgm", i + 1)))?;
        }
        if ck.config().state_channels > 0 {
            for (i, s) in inter.states.iter().enumerate() {
                save_gray_map(s, dir.join(format!("s_t{:03}.pgm", i + 1)))?;
            }
        }
        println!("intermediate outputs: {}", inter.outputs.len());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let ck = match &a.checkpoint {
        Some(p) => Some(usage(Checkpoint::load(p))?),
        None if a.scale == 1 => None,
        None => bail!(UsageError(anyhow::anyhow!("--checkpoint is required above scale 1"))),
    };
    if let Some(ck) = &ck {
        if a.scale != 1 {
            pick_scale(ck, Some(a.scale))?;
        }
    }
    let files = usage(list_images(&a.data_dir))?;
    if files.is_empty() {
        bail!(UsageError(anyhow::anyhow!("no .ppm or .png images in {}", a.data_dir.display())));
    }
    let mut rows = Vec::with_capacity(files.len());
    for path in &files {
        let truth = load_image(path)?.to_feature_map();
        let params = ck.as_ref().map(|c| &c.params);
        let scores = evaluate_image(&display_name(path), &truth, params, a.scale, a.freq_control, a.timing_runs)
            .with_context(|| format!("evaluating {}", path.display()))?;
        rows.push(scores);
    }
    match &a.csv {
        Some(p) => {
            let file = std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_csv(file, &rows)?;
        }
        None => write_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

/// `1234567` → `1,234,567`.
pub fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn params(a: ParamsArgs) -> anyhow::Result<()> {
    let scales = if a.scales.is_empty() { SUPPORTED_SCALES.to_vec() } else { a.scales };
    let config = usage(ModelConfig::new(a.arch.channels, a.arch.state_channels, 1, 1, &scales))?;
    let body = body_param_count(&config);
    let mut out = std::io::stdout().lock();
    writeln!(out, "body: {}", group_thousands(body))?;
    let mut total = body;
    for &f in &config.scales {
        let path = count_params(&config, f)?;
        total += path - body;
        writeln!(out, "x{f}: {}", group_thousands(path))?;
    }
    writeln!(out, "total: {}", group_thousands(total))?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let opts = GradcheckOptions {
        seed: a.seed,
        fault: a.inject_fault,
        ..GradcheckOptions::default()
    };
    let report = usage(run_gradcheck(&opts))?;
    let mut out = std::io::stdout().lock();
    for line in report.lines() {
        writeln!(out, "{line}")?;
    }
    let passed = report.passed();
    writeln!(out, "gradcheck: {}", if passed { "PASS" } else { "FAIL" })?;
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

/// Where `train` writes its log when `--log` is absent.
pub fn default_log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("csv")
}
