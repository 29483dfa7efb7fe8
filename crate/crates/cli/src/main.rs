use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hvq_cli::commands::{
    cmd_convert, cmd_eval, cmd_synth_data, cmd_train, ConvertOptions, EvalOptions, Metric,
    TrainOptions,
};
use hvq_cli::config::{Overrides, RunConfig};
use hvq_core::conversion::{ConversionRequest, DynamicsCurveSpec};
use hvq_core::evaluation::AblationVariant;
use hvq_core::hierarchy::Scale;
use hvq_core::networks::GenerationMode;
use hvq_core::Result;

/// Hierarchical VQ singing-voice conversion at toy scale.
#[derive(Debug, Parser)]
#[command(name = "hvqsvc", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    corpus_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    report_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multi-singer corpus.
    SynthData {
        /// Overwrite a non-empty corpus directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one module of the hierarchy.
    Train {
        #[arg(long)]
        scale: Scale,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
        /// Upper scale: condition on the low-resolution audio only.
        #[arg(long)]
        low_res_only: bool,
    },
    /// Convert a WAV file through both modules.
    Convert {
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Singer id of the input recording.
        #[arg(long, default_value_t = 0)]
        source_singer: u32,
        #[arg(long)]
        target_singer: Option<u32>,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        semitones: f64,
        /// identity, expand[:theta] or compress[:theta]
        #[arg(long, default_value = "identity")]
        dynamics: DynamicsCurveSpec,
        #[arg(long, default_value = "sample")]
        mode: GenerationMode,
    },
    /// Write evaluation reports and plots.
    Eval {
        /// maer, usage or ablation
        #[arg(long)]
        metric: String,
        /// noisy_conditioning, source_singer or no_embeddings
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        semitones: f64,
        /// MAER of the ground-truth contours against themselves.
        #[arg(long)]
        ground_truth: bool,
        #[arg(long, default_value = "bottom")]
        scale: Scale,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value = "sample")]
        mode: GenerationMode,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut flags = Overrides {
        seed: cli.global.seed,
        corpus_dir: cli.global.corpus_dir,
        checkpoint_dir: cli.global.checkpoint_dir,
        report_dir: cli.global.report_dir,
        ..Default::default()
    };
    if let Command::Train {
        iterations,
        learning_rate,
        batch_size,
        ..
    } = &cli.command
    {
        flags.iterations = *iterations;
        flags.learning_rate = *learning_rate;
        flags.batch_size = *batch_size;
    }
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), &flags)?;
    match cli.command {
        Command::SynthData { force } => {
            let entries = cmd_synth_data(&cfg, force)?;
            println!(
                "wrote {} utterances to {}",
                entries.len(),
                cfg.paths.corpus_dir.display()
            );
        }
        Command::Train {
            scale,
            resume,
            low_res_only,
            ..
        } => {
            let s = cmd_train(
                &cfg,
                scale,
                TrainOptions {
                    resume,
                    low_res_only,
                },
            )?;
            if let Some(last) = s.report.history.last() {
                println!(
                    "final loss {:.4} after {} iterations",
                    last.total(),
                    s.iterations
                );
            }
            println!("checkpoint {}", s.checkpoint.display());
            println!("loss log {}", s.loss_log.display());
        }
        Command::Convert {
            input,
            output,
            source_singer,
            target_singer,
            semitones,
            dynamics,
            mode,
        } => {
            let opts = ConvertOptions {
                input,
                output: output.clone(),
                source_singer,
                request: ConversionRequest {
                    target_singer,
                    semitone_shift: semitones,
                    dynamics,
                },
                mode,
                seed: cfg.seed,
            };
            let rec = cmd_convert(&cfg, &opts)?;
            println!(
                "wrote {} ({} Hz, pitch ratio {:.6})",
                output.display(),
                rec.output_rate_hz,
                rec.pitch_ratio
            );
        }
        Command::Eval {
            metric,
            variant,
            semitones,
            ground_truth,
            scale,
            limit,
            mode,
        } => {
            let opts = EvalOptions {
                metric: metric.parse::<Metric>()?,
                variant: variant.map(|v| v.parse::<AblationVariant>()).transpose()?,
                semitones,
                ground_truth,
                scale,
                limit,
                mode,
                seed: cfg.seed,
            };
            let out = cmd_eval(&cfg, &opts)?;
            print!("{}", out.report.render());
            for f in out.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage] {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "error[{}] {}",
                e.category(),
                e.to_string().replace('\n', " ")
            );
            ExitCode::FAILURE
        }
    }
}
