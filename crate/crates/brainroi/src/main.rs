use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use brainroi::commands::{self, StageChoice};
use brainroi::config::{Backend, Paths};
use brainroi::{CliError, CliResult, RunConfig};
use brainroi_core::pipeline::Split;
use brainroi_core::training::Preset;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "brainroi", version, about = "Soft-ROI brain captioning pipeline at desk scale")]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Put dataset, checkpoints, traces and reports under this directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Mock,
    Http,
}

#[derive(Args, Default)]
struct DecodeFlags {
    #[arg(long)]
    num_beams: Option<usize>,
    #[arg(long)]
    no_repeat_ngram_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    length_penalty: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Build voxel-index and ROI membership files.
    AtlasBuild {
        /// Template label volume (gridvol); repeat for several atlases.
        #[arg(long)]
        atlas: Vec<PathBuf>,
        /// Subject mask volume (gridvol); repeat for several subjects.
        #[arg(long)]
        mask: Vec<PathBuf>,
    },
    /// Train the encoder.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
    },
    /// Optimize the captioning prompt on the validation split.
    Ipo {
        #[arg(long, value_enum)]
        generator: Option<GeneratorArg>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        timeout_ms: Option<u64>,
    },
    /// Caption a split with the configured decoder.
    Decode {
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[command(flatten)]
        flags: DecodeFlags,
    },
    /// Run the decoding ablation and per-subject evaluation.
    Eval {
        #[arg(long)]
        prompt: Option<String>,
        #[command(flatten)]
        flags: DecodeFlags,
    },
    /// Print the effective configuration as JSON.
    PrintConfig,
}

fn apply_decode_flags(cfg: &mut RunConfig, f: &DecodeFlags) {
    let d = &mut cfg.decode;
    d.num_beams = f.num_beams.unwrap_or(d.num_beams);
    d.no_repeat_ngram_size = f.no_repeat_ngram_size.unwrap_or(d.no_repeat_ngram_size);
    d.length_penalty = f.length_penalty.unwrap_or(d.length_penalty);
    d.max_new_tokens = f.max_new_tokens.unwrap_or(d.max_new_tokens);
}

fn run(cli: Cli) -> CliResult<String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.preset {
        cfg.preset = match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        };
    }
    if let Some(dir) = &cli.out_dir {
        cfg.paths = Paths::under(dir);
    }
    match &cli.command {
        Command::Decode { flags, .. } | Command::Eval { flags, .. } => apply_decode_flags(&mut cfg, flags),
        Command::Ipo {
            generator,
            endpoint,
            timeout_ms,
        } => {
            if let Some(g) = generator {
                cfg.ipo.backend = match g {
                    GeneratorArg::Mock => Backend::Mock,
                    GeneratorArg::Http => Backend::Http,
                };
            }
            if endpoint.is_some() {
                cfg.ipo.endpoint.clone_from(endpoint);
            }
            cfg.ipo.timeout_ms = timeout_ms.unwrap_or(cfg.ipo.timeout_ms);
        }
        _ => {}
    }
    cfg.validate()?;
    match cli.command {
        Command::PrintConfig => {
            eprintln!("config_hash: {}", cfg.hash());
            Ok(commands::print_config(&cfg))
        }
        Command::AtlasBuild { atlas, mask } => commands::atlas_build(&cfg, &atlas, &mask),
        Command::Train { stage } => commands::train(
            &cfg,
            match stage {
                StageArg::One => StageChoice::One,
                StageArg::Two => StageChoice::Two,
                StageArg::All => StageChoice::Both,
            },
        ),
        Command::Ipo { .. } => commands::ipo(&cfg),
        Command::Decode { prompt, split, .. } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            commands::decode(&cfg, prompt.as_deref(), split)
        }
        Command::Eval { prompt, .. } => commands::eval(&cfg, prompt.as_deref()),
    }
}

fn report(e: &CliError) -> ExitCode {
    eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(out) => {
            let _ = std::io::stdout().write_all(out.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => report(&e),
    }
}
