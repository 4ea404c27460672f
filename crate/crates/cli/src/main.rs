use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use flowsvc::checkpoint::{write_atomic, Checkpoint, Stage};
use flowsvc::config::RunConfig;
use flowsvc::corpus::{generate_toy_corpus, load_corpus, ToyCorpusConfig};
use flowsvc::metrics::{evaluate, EvalContext};
use flowsvc::pipeline::{convert, ConvertOptions};
use flowsvc::plugins::{Separator, SubprocessAesthetic, SubprocessSeparator, SubprocessTranscriber};
use flowsvc::rl::{AestheticScorer, TokenLevel, Transcriber};
use flowsvc::signal::{load_wav, save_wav, WavEncoding};
use flowsvc::stages::{build_encoders, fresh_checkpoint, run_rl, run_supervised};
use flowsvc::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_PLUGIN: u8 = 3;

#[derive(Parser)]
#[command(name = "flowsvc", version, about = "Flow-matching singing voice conversion")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted; any key can
    /// also be set through FLOWSVC__<SECTION>__<KEY> environment variables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Cpt,
    Sft,
    Rl,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Cpt => Stage::Cpt,
            StageArg::Sft => Stage::Sft,
            StageArg::Rl => Stage::Rl,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenArg {
    Word,
    Char,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Initial checkpoint. A checkpoint of the same stage is resumed;
        /// otherwise its weights start the stage. Defaults to the previous
        /// stage's output in the checkpoint directory (none for cpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Convert a song (or, with --vocal-only, a clean vocal) to the voice
    /// of a reference recording.
    Convert {
        input: PathBuf,
        target_ref: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Defaults to the RL checkpoint in the checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// The input is already a clean lead vocal; skip separation.
        #[arg(long)]
        vocal_only: bool,
        /// Pitch shift in semitones applied to the source melody.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        transpose: f64,
        /// Instrumental gain at recomposition; defaults to the configured value.
        #[arg(long)]
        gamma_inst: Option<f64>,
    },
    /// Score converted audio listed in a manifest.
    Eval {
        manifest: PathBuf,
        #[arg(long)]
        converted_dir: PathBuf,
        /// Where eval.jsonl and summary.txt are written.
        #[arg(long)]
        out_dir: PathBuf,
        /// Checkpoint whose mel and encoder settings to use; defaults to the
        /// run configuration.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "word")]
        token_level: TokenArg,
    },
    /// Write the synthetic multi-track toy corpus.
    ToyCorpus {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 50)]
        clips: usize,
        #[arg(long, default_value_t = 1.0)]
        secs: f64,
        #[arg(long, default_value_t = 8000)]
        sample_rate: u32,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Plugin(_) => EXIT_PLUGIN,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> flowsvc::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Train { stage, checkpoint } => train(&cfg, stage.into(), checkpoint),
        Command::Convert {
            input,
            target_ref,
            output,
            checkpoint,
            vocal_only,
            transpose,
            gamma_inst,
        } => {
            if !transpose.is_finite() {
                return Err(Error::Config("--transpose must be finite".into()));
            }
            let opts = ConvertOptions {
                vocal_only,
                transpose,
                gamma_inst: gamma_inst.unwrap_or(cfg.inference.gamma_inst),
                prefix_frames: cfg.inference.prefix_frames,
                griffin_lim_iters: cfg.inference.griffin_lim_iters,
                noise_seed: cfg.inference.noise_seed,
            };
            let ck_path = checkpoint.unwrap_or_else(|| stage_output(&cfg, Stage::Rl));
            cmd_convert(&cfg, &ck_path, &input, &target_ref, &output, &opts)
        }
        Command::Eval {
            manifest,
            converted_dir,
            out_dir,
            checkpoint,
            token_level,
        } => {
            let level = match token_level {
                TokenArg::Word => TokenLevel::Word,
                TokenArg::Char => TokenLevel::Char,
            };
            cmd_eval(&cfg, checkpoint.as_deref(), &manifest, &converted_dir, &out_dir, level)
        }
        Command::ToyCorpus {
            out_dir,
            clips,
            secs,
            sample_rate,
        } => {
            let toy = ToyCorpusConfig {
                clips,
                secs,
                sample_rate,
                ..ToyCorpusConfig::default()
            };
            let entries = generate_toy_corpus(&out_dir, &toy)?;
            eprintln!("wrote {} clips to {}", entries.len(), out_dir.display());
            Ok(())
        }
    }
}

fn stage_output(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.paths.checkpoints.join(format!("{}.json", stage.name()))
}

fn train(cfg: &RunConfig, stage: Stage, checkpoint: Option<PathBuf>) -> flowsvc::Result<()> {
    let enc = build_encoders(cfg)?;
    let init = match (checkpoint, stage) {
        (Some(p), _) => Checkpoint::load(&p)?,
        (None, Stage::Cpt) => fresh_checkpoint(cfg, &enc)?,
        (None, Stage::Sft) => Checkpoint::load(&stage_output(cfg, Stage::Cpt))?,
        (None, Stage::Rl) => Checkpoint::load(&stage_output(cfg, Stage::Sft))?,
    };
    let clips = load_corpus(&cfg.paths.corpus, &enc, 0.0)?;

    fs::create_dir_all(&cfg.paths.runs).map_err(|e| Error::io(&cfg.paths.runs, e))?;
    let log_path = cfg.paths.runs.join(format!("{}.jsonl", stage.name()));
    let resuming = init.stage == stage && init.step > 0;
    let file = if resuming {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);

    let ckpt_dir = cfg.paths.checkpoints.as_path();
    let done = match stage {
        Stage::Rl => run_rl(cfg, &enc, &clips, init, Some(ckpt_dir), &mut log)?,
        _ => run_supervised(stage, cfg, &enc, &clips, init, Some(ckpt_dir), &mut log)?,
    };
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let out = stage_output(cfg, stage);
    done.save(&out)?;
    eprintln!("{}: step {} -> {}", stage.name(), done.step, out.display());
    Ok(())
}

fn cmd_convert(
    cfg: &RunConfig,
    ck_path: &Path,
    input: &Path,
    target_ref: &Path,
    output: &Path,
    opts: &ConvertOptions,
) -> flowsvc::Result<()> {
    let ck = Checkpoint::load(ck_path)?;
    let run_cfg = RunConfig {
        mel: ck.mel.clone(),
        encoders: ck.encoders.clone(),
        ..cfg.clone()
    };
    let enc = build_encoders(&run_cfg)?;
    let separator = cfg.plugins.separator.as_ref().map(|c| SubprocessSeparator { command: c.clone() });
    let song = load_wav(input)?;
    let reference = load_wav(target_ref)?;
    let result = convert(
        &ck.model,
        &enc,
        &cfg.sampler,
        &song,
        &reference,
        separator.as_ref().map(|s| s as &dyn Separator),
        opts,
    )?;
    save_wav(&result.output, output, WavEncoding::Float32)?;
    eprintln!("wrote {} ({} samples)", output.display(), result.output.len());
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    manifest: &Path,
    converted_dir: &Path,
    out_dir: &Path,
    token_level: TokenLevel,
) -> flowsvc::Result<()> {
    let mut run_cfg = cfg.clone();
    if let Some(p) = checkpoint {
        let ck = Checkpoint::load(p)?;
        run_cfg.mel = ck.mel;
        run_cfg.encoders = ck.encoders;
    }
    let enc = build_encoders(&run_cfg)?;
    let transcriber = cfg.plugins.transcriber.as_ref().map(|c| SubprocessTranscriber { command: c.clone() });
    let aesthetic = cfg.plugins.aesthetic.as_ref().map(|c| SubprocessAesthetic {
        command: c.clone(),
        range: cfg.plugins.aesthetic_range,
    });
    let ctx = EvalContext {
        encoders: &enc,
        transcriber: transcriber.as_ref().map(|t| t as &dyn Transcriber),
        aesthetic: aesthetic.as_ref().map(|a| a as &dyn AestheticScorer),
        token_level,
    };
    let report = evaluate(manifest, converted_dir, &ctx)?;
    write_atomic(&out_dir.join("eval.jsonl"), report.to_jsonl().as_bytes())?;
    let table = report.summary_table();
    write_atomic(&out_dir.join("summary.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}
