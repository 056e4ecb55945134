use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use videdit::config::{Mode, RunConfig};
use videdit::metrics::report_csv;
use videdit::pipeline;
use videdit::Error;

#[derive(Parser)]
#[command(name = "videdit", version, about = "One-shot text-guided editing of short synthetic videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the image model on the procedural caption corpus.
    Pretrain(RunArgs),
    /// Tune, invert and edit the source video with attention injection and blending.
    Edit(RunArgs),
    /// Invert and resample the source with and without optimised null embeddings.
    Reconstruct(RunArgs),
    /// Sample the target prompt from fresh noise with the tuned model.
    BaselineGenerate(RunArgs),
    /// Noise the source part-way and denoise it with the target prompt.
    BaselineSdedit(RunArgs),
    /// Score videos against a reference clip and draw the comparison grid.
    Evaluate(EvalArgs),
    /// Write a synthetic scene with caption and sprite masks.
    MakeData(DataArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; flags override its keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set injection.dur_cross=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Image-model weights (`paths.weights`).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Tuned video-model cache (`paths.tuned`).
    #[arg(long)]
    tuned: Option<PathBuf>,
    /// Source video (`paths.video`).
    #[arg(long)]
    video: Option<PathBuf>,
    /// Output directory (`paths.output`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    guidance: Option<f64>,
    /// `temporal`, `frame_wise` or `off`.
    #[arg(long)]
    blend: Option<String>,
    /// Training steps of the phase this command runs.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Reference clip (dataset directory, PNG directory or archive).
    #[arg(long)]
    reference: PathBuf,
    /// Prompt for text alignment.
    #[arg(long)]
    prompt: String,
    /// `method=path` pairs, one per evaluated video.
    #[arg(long = "video", value_name = "METHOD=PATH", required = true)]
    videos: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
}

fn split_pair(s: &str) -> Result<(String, String), Error> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
        .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{s}`")))
}

fn quoted(s: &str) -> String {
    format!("{s:?}")
}

impl RunArgs {
    fn resolve(&self, mode: Option<Mode>) -> Result<RunConfig, Error> {
        let mut overrides = self.set.iter().map(|s| split_pair(s)).collect::<Result<Vec<_>, _>>()?;
        let mut put = |k: &str, v: String| overrides.push((k.to_owned(), v));
        if let Some(m) = mode {
            let name = match m {
                Mode::Edit => "edit",
                Mode::Reconstruct => "reconstruct",
                Mode::BaselineGenerate => "baseline_generate",
                Mode::BaselineSdedit => "baseline_sdedit",
            };
            put("mode", quoted(name));
        }
        if let Some(v) = self.seed {
            put("seed", v.to_string());
        }
        for (key, path) in [
            ("paths.weights", &self.weights),
            ("paths.tuned", &self.tuned),
            ("paths.video", &self.video),
            ("paths.output", &self.out),
        ] {
            if let Some(p) = path {
                put(key, quoted(&p.to_string_lossy()));
            }
        }
        if let Some(v) = &self.source {
            put("prompts.source", quoted(v));
        }
        if let Some(v) = &self.target {
            put("prompts.target", quoted(v));
        }
        if let Some(v) = self.guidance {
            put("guidance", format!("{v:?}"));
        }
        if let Some(v) = &self.blend {
            put("blend", quoted(v));
        }
        if let Some(v) = self.steps {
            let key = if mode.is_some() { "finetune.steps" } else { "pretrain.steps" };
            put(key, v.to_string());
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let reports = match cli.command {
        Command::Pretrain(a) => {
            let cfg = a.resolve(None)?;
            let out = pipeline::run_pretrain(&cfg)?;
            let tail = &out.losses[out.losses.len().saturating_sub(100)..];
            println!(
                "saved {} after {} steps, mean loss of the last {} steps {:.5}",
                cfg.paths.weights.display(),
                out.losses.len(),
                tail.len(),
                tail.iter().sum::<f64>() / tail.len().max(1) as f64
            );
            return Ok(());
        }
        Command::Edit(a) => pipeline::run_edit(&a.resolve(Some(Mode::Edit))?)?.reports,
        Command::Reconstruct(a) => pipeline::run_reconstruct(&a.resolve(Some(Mode::Reconstruct))?)?,
        Command::BaselineGenerate(a) => vec![pipeline::run_baseline_generate(&a.resolve(Some(Mode::BaselineGenerate))?)?.1],
        Command::BaselineSdedit(a) => vec![pipeline::run_baseline_sdedit(&a.resolve(Some(Mode::BaselineSdedit))?)?.1],
        Command::Evaluate(a) => {
            let videos = a
                .videos
                .iter()
                .map(|s| split_pair(s).map(|(m, p)| (m, PathBuf::from(p))))
                .collect::<Result<Vec<_>, _>>()?;
            pipeline::evaluate_videos(&a.reference, &videos, &a.prompt, &a.out)?
        }
        Command::MakeData(a) => {
            let scene = pipeline::make_data(&a.out, a.seed, a.frames, a.size)?;
            println!("{}: {}", a.out.display(), scene.caption);
            return Ok(());
        }
    };
    print!("{}", report_csv(&reports)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                2
            } else if e.is_numerical() {
                3
            } else {
                1
            })
        }
    }
}
