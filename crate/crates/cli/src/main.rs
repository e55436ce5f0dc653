use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tubemae::config::{ConfigMap, Section};
use tubemae::experiments::{run_ablation, run_scratch_cell, AblationSpec, Axis, CellBase, DataSpec, Report};
use tubemae::gradsuite::{default_spec, gradient_suite};
use tubemae::masking::{generate_mask, MaskStrategy};
use tubemae::model::ModelConfig;
use tubemae::seed::derived_rng;
use tubemae::training::{
    finetune, linear_probe, load_checkpoint, restore_mae, save_checkpoint, trace_csv, Checkpoint,
    Pretrainer, Source, TrainConfig, TraceRow,
};
use tubemae::video::{read_raw_video, sample_clip_at, GridDims, VideoClip, CUBE_T};
use tubemae::visualize::{reconstruct, write_mask, write_reconstruction};
use tubemae::Error;

const GRAD_TOLERANCE: f64 = 1e-4;
const MASK_RNG: u64 = 0x3a5c;

#[derive(Parser, Debug)]
#[command(name = "tubemae", version, about = "Masked video autoencoder on synthetic clips")]
struct Cli {
    /// key=value configuration file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed (the `seed` key)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; ARTIFACT_OUT takes precedence
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked-reconstruction pre-training on synthetic sprites
    Pretrain {
        /// Continue from a pre-training checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps, checkpointing as usual
        #[arg(long, value_name = "STEP")]
        stop_after: Option<u64>,
    },
    /// Train encoder and head on labeled clips
    Finetune {
        /// Pre-trained checkpoint; omit to start from scratch
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a linear head on frozen pre-trained features
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write original, masked and reconstructed frames as PPM images
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Raw f32 video with a `.manifest` sidecar; default is a sprite clip
        #[arg(long)]
        video: Option<PathBuf>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Draw a mask as text and as a PPM image
    Maskviz {
        /// Grid as T,H,W in cubes
        #[arg(long)]
        dims: Option<String>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Finite-difference check of every primitive and the model losses
    Gradcheck,
    /// Run an ablation grid and write a CSV report
    Ablate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Probe { .. } => "probe",
            Command::Reconstruct { .. } => "reconstruct",
            Command::Maskviz { .. } => "maskviz",
            Command::Gradcheck => "gradcheck",
            Command::Ablate => "ablate",
        }
    }
}

/// Failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Prints one `event=<name> key=value ...` line.
fn log(event: &str, fields: &[(&str, &dyn Display)]) {
    let mut line = format!("event={event}");
    for (k, v) in fields {
        let v = v.to_string();
        if v.contains(char::is_whitespace) {
            line.push_str(&format!(" {k}={v:?}"));
        } else {
            line.push_str(&format!(" {k}={v}"));
        }
    }
    println!("{line}");
}

struct Run {
    config: ConfigMap,
    seed: u64,
    out: PathBuf,
}

impl Run {
    fn prepare(cli: &Cli, extra: &[(&str, String)]) -> Outcome<Self> {
        let mut config = match &cli.config {
            Some(path) => ConfigMap::load(path)?,
            None => ConfigMap::new(),
        };
        for pair in &cli.set {
            config.set_pair(pair)?;
        }
        for (k, v) in extra {
            config.set(k, v);
        }
        if let Some(seed) = cli.seed {
            config.set("seed", seed);
        }
        let seed = config.get_or("seed", 0u64)?;
        let out = match std::env::var_os("ARTIFACT_OUT") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => cli
                .out
                .clone()
                .unwrap_or_else(|| Path::new("runs").join(cli.command.name())),
        };
        Ok(Run { config, seed, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Rejects unread keys, then writes `resolved` (plus the seed) as
    /// `config.resolved` in the output directory.
    fn finish_config(&self, mut resolved: ConfigMap) -> Outcome {
        self.config.finish()?;
        resolved.set("seed", self.seed);
        std::fs::create_dir_all(&self.out).map_err(|e| Error::Io {
            path: self.out.clone(),
            source: e,
        })?;
        self.write("config.resolved", &resolved.render())?;
        Ok(())
    }

    fn write(&self, name: &str, text: &str) -> Outcome<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, text).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}

fn step_logger(row: &TraceRow) {
    log("step", &[("step", &row.step), ("lr", &format!("{:e}", row.lr)), ("loss", &format!("{:.6}", row.loss))]);
}

fn cmd_pretrain(cli: &Cli, resume: &Option<PathBuf>, stop_after: Option<u64>) -> Outcome {
    let mut run = Run::prepare(cli, &[])?;
    let resumed = resume.as_deref().map(load_checkpoint).transpose()?;
    if let Some(ckpt) = &resumed {
        // the data must be the data the checkpoint was trained on
        run.seed = ckpt.seed;
    }
    let data = DataSpec::read(&mut run.config, "data", DataSpec::default())?;
    let clips = data.generate(run.seed)?.pretrain;
    let mut trainer = match &resumed {
        Some(ckpt) => {
            log("resume", &[("step", &ckpt.step), ("seed", &ckpt.seed)]);
            Pretrainer::from_checkpoint(ckpt, &clips)?
        }
        None => {
            let model = ModelConfig::read(&mut run.config, "model", ModelConfig::desk())?;
            let train = TrainConfig::read(
                &mut run.config,
                "pretrain",
                TrainConfig {
                    seed: run.seed,
                    ..TrainConfig::pretrain()
                },
            )?;
            Pretrainer::new(&model, &train, &clips)?
        }
    };
    let mut resolved = trainer.config_snapshot();
    data.write(&mut resolved, "data");
    run.finish_config(resolved)?;
    let total = trainer.total_steps();
    let target = stop_after.map_or(total, |s| s.min(total));
    log(
        "start",
        &[
            ("command", &"pretrain"),
            ("clips", &clips.len()),
            ("from", &trainer.step),
            ("to", &target),
            ("steps", &total),
            ("strategy", &trainer.config.mask_strategy),
            ("ratio", &trainer.config.mask_ratio),
        ],
    );
    let result = trainer.run_until(target, step_logger);
    // the trace up to the failure is still worth keeping
    run.write("loss.csv", &trace_csv(&trainer.trace))?;
    if let Err(e) = result {
        log("abort", &[("step", &(trainer.step + 1)), ("reason", &e)]);
        return Err(e.into());
    }
    let path = run.path("checkpoint.ckpt");
    save_checkpoint(&trainer.checkpoint(), &path)?;
    let last = trainer.trace.last().map_or(f64::NAN, |r| r.loss);
    log(
        "done",
        &[("steps", &trainer.step), ("final_loss", &format!("{last:.6}")), ("checkpoint", &path.display())],
    );
    Ok(())
}

fn cmd_classify(cli: &Cli, checkpoint: Option<&Path>, probe: bool) -> Outcome {
    let mut run = Run::prepare(cli, &[])?;
    let section = if probe { "probe" } else { "finetune" };
    let defaults = TrainConfig {
        seed: run.seed,
        ..if probe { TrainConfig::probe() } else { TrainConfig::finetune() }
    };
    let train = TrainConfig::read(&mut run.config, section, defaults)?;
    let data = DataSpec::read(&mut run.config, "data", DataSpec::default())?;
    let ckpt: Option<Checkpoint> = checkpoint.map(load_checkpoint).transpose()?;
    let scratch_model = match ckpt {
        Some(_) => None,
        None => Some(ModelConfig::read(&mut run.config, "model", ModelConfig::desk())?),
    };
    let mut resolved = ConfigMap::new();
    train.write(&mut resolved, section);
    data.write(&mut resolved, "data");
    if let Some(m) = &scratch_model {
        m.write(&mut resolved, "model");
    }
    run.finish_config(resolved)?;

    let sets = data.generate(run.seed)?;
    let source = match (&ckpt, &scratch_model) {
        (Some(c), _) => Source::Pretrained(c),
        (None, Some(m)) => Source::Scratch(m),
        (None, None) => unreachable!("one of checkpoint and model is always set"),
    };
    log(
        "start",
        &[
            ("command", &section),
            ("train_clips", &sets.train.len()),
            ("eval_clips", &sets.eval.len()),
            ("init", &if ckpt.is_some() { "pretrained" } else { "scratch" }),
        ],
    );
    let out = if probe {
        linear_probe(source, &sets.train, &sets.eval, &train)?
    } else {
        finetune(source, &sets.train, &sets.eval, &train)?
    };
    for row in &out.trace {
        step_logger(row);
    }
    run.write("loss.csv", &trace_csv(&out.trace))?;
    run.write("metrics.txt", &format!("accuracy={}\n", out.accuracy))?;
    let path = run.path("classifier.ckpt");
    save_checkpoint(&out.checkpoint, &path)?;
    log("done", &[("accuracy", &format!("{:.4}", out.accuracy)), ("checkpoint", &path.display())]);
    Ok(())
}

fn parse_strategy(s: &str) -> Outcome<MaskStrategy> {
    Ok(s.parse::<MaskStrategy>()?)
}

fn cmd_reconstruct(
    cli: &Cli,
    checkpoint: &Path,
    video: &Option<PathBuf>,
    ratio: Option<f64>,
    strategy: &Option<String>,
) -> Outcome {
    let mut extra = Vec::new();
    if let Some(v) = video {
        extra.push(("reconstruct.video", v.display().to_string()));
    }
    if let Some(r) = ratio {
        extra.push(("reconstruct.ratio", r.to_string()));
    }
    if let Some(s) = strategy {
        extra.push(("reconstruct.strategy", s.clone()));
    }
    let mut run = Run::prepare(cli, &extra)?;
    let ratio: f64 = run.config.get_or("reconstruct.ratio", 0.9)?;
    let strategy = parse_strategy(&run.config.get_or("reconstruct.strategy", "tube".to_string())?)?;
    let video: String = run.config.get_or("reconstruct.video", String::new())?;
    let stride: usize = run.config.get_or("reconstruct.stride", 1)?;
    let start: usize = run.config.get_or("reconstruct.start", 0)?;
    let index: usize = run.config.get_or("reconstruct.index", 0)?;
    let data = DataSpec::read(&mut run.config, "data", DataSpec::default())?;

    let mut resolved = ConfigMap::new();
    resolved.set("reconstruct.ratio", ratio);
    resolved.set("reconstruct.strategy", strategy);
    resolved.set("reconstruct.stride", stride);
    resolved.set("reconstruct.start", start);
    resolved.set("reconstruct.index", index);
    if !video.is_empty() {
        resolved.set("reconstruct.video", &video);
    }
    data.write(&mut resolved, "data");
    run.finish_config(resolved)?;

    let ckpt = load_checkpoint(checkpoint)?;
    let (model, store) = restore_mae(&ckpt)?;
    let clip: VideoClip = if video.is_empty() {
        let mut clips = data.generate(run.seed)?.pretrain;
        if index >= clips.len() {
            return Err(Error::Config(format!(
                "reconstruct.index {index} but only {} clips",
                clips.len()
            ))
            .into());
        }
        clips.swap_remove(index)
    } else {
        let raw = read_raw_video(Path::new(&video))?;
        sample_clip_at(&raw, stride, model.config.grid.t * CUBE_T, start)?
    };
    let mask = generate_mask(strategy, model.config.grid, ratio, &mut derived_rng(run.seed, &[MASK_RNG]))?;
    let r = reconstruct(&model, &store, &clip, &mask)?;
    let files = write_reconstruction(&run.out, &r)?;
    run.write("metrics.txt", &format!("masked_mae={}\n", r.masked_mae))?;
    log(
        "done",
        &[
            ("frames", &clip.frames()),
            ("files", &files.len()),
            ("masked_mae", &format!("{:.6}", r.masked_mae)),
            ("out", &run.out.display()),
        ],
    );
    Ok(())
}

fn parse_dims(s: &str) -> Outcome<GridDims> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("`maskviz.dims`: expected T,H,W, got `{s}`")))?;
    match parts[..] {
        [t, h, w] if t > 0 && h > 0 && w > 0 => Ok(GridDims::new(t, h, w)),
        _ => Err(Error::Config(format!("`maskviz.dims`: expected three positive counts, got `{s}`")).into()),
    }
}

fn cmd_maskviz(cli: &Cli, dims: &Option<String>, ratio: Option<f64>, strategy: &Option<String>) -> Outcome {
    let mut extra = Vec::new();
    if let Some(d) = dims {
        extra.push(("maskviz.dims", d.clone()));
    }
    if let Some(r) = ratio {
        extra.push(("maskviz.ratio", r.to_string()));
    }
    if let Some(s) = strategy {
        extra.push(("maskviz.strategy", s.clone()));
    }
    let mut run = Run::prepare(cli, &extra)?;
    let dims = parse_dims(&run.config.get_or("maskviz.dims", "8,4,4".to_string())?)?;
    let ratio: f64 = run.config.get_or("maskviz.ratio", 0.9)?;
    let strategy = parse_strategy(&run.config.get_or("maskviz.strategy", "tube".to_string())?)?;
    let mut resolved = ConfigMap::new();
    resolved.set("maskviz.dims", format!("{},{},{}", dims.t, dims.h, dims.w));
    resolved.set("maskviz.ratio", ratio);
    resolved.set("maskviz.strategy", strategy);
    run.finish_config(resolved)?;

    let mask = generate_mask(strategy, dims, ratio, &mut derived_rng(run.seed, &[MASK_RNG]))?;
    let (text, image) = write_mask(&run.out, &mask, dims)?;
    for (t, line) in mask.render_text().lines().enumerate() {
        log("slice", &[("t", &t), ("mask", &line)]);
    }
    log(
        "done",
        &[
            ("masked", &mask.masked_count()),
            ("visible", &mask.visible_count()),
            ("text", &text.display()),
            ("image", &image.display()),
        ],
    );
    Ok(())
}

fn cmd_gradcheck(cli: &Cli) -> Outcome {
    let mut run = Run::prepare(cli, &[])?;
    let model = ModelConfig::read(&mut run.config, "model", ModelConfig::desk())?;
    let mut spec = default_spec(run.seed);
    spec.h = run.config.get_or("gradcheck.h", spec.h)?;
    let coords: usize = run.config.get_or("gradcheck.coords", spec.coords_per_param.unwrap_or(0))?;
    spec.coords_per_param = (coords > 0).then_some(coords);
    let mut resolved = ConfigMap::new();
    model.write(&mut resolved, "model");
    resolved.set("gradcheck.h", spec.h);
    resolved.set("gradcheck.coords", coords);
    run.finish_config(resolved)?;

    let report = gradient_suite(&model, &spec)?;
    let mut lines = String::from("check,max_rel_error\n");
    for e in &report.entries {
        log("check", &[("name", &e.name), ("max_rel_error", &format!("{:e}", e.report.max_rel_error))]);
        lines.push_str(&format!("{},{:e}\n", e.name, e.report.max_rel_error));
    }
    run.write("gradcheck.csv", &lines)?;
    let worst = report.max_rel_error();
    let pass = worst < GRAD_TOLERANCE;
    log(
        "done",
        &[
            ("max_rel_error", &format!("{worst:e}")),
            ("worst", &report.worst().map_or("-", |e| e.name.as_str())),
            ("pass", &pass),
        ],
    );
    if pass {
        Ok(())
    } else {
        Err(Failure {
            code: 2,
            message: format!("max relative error {worst:e} exceeds {GRAD_TOLERANCE:e}"),
        })
    }
}

fn cmd_ablate(cli: &Cli) -> Outcome {
    let mut run = Run::prepare(cli, &[])?;
    let defaults = AblationSpec::new(
        Axis::Strategy,
        &["tube", "random", "frame"],
        &[run.seed, run.seed + 1, run.seed + 2],
        CellBase::default(),
    );
    let spec = AblationSpec::read(&mut run.config, "ablate", defaults)?;
    let scratch: bool = run.config.get_or("ablate.scratch", false)?;
    let mut resolved = ConfigMap::new();
    spec.write(&mut resolved, "ablate");
    resolved.set("ablate.scratch", scratch);
    run.finish_config(resolved)?;

    log(
        "start",
        &[("command", &"ablate"), ("axis", &spec.axis), ("cells", &spec.cells()), ("scratch", &scratch)],
    );
    let mut report = run_ablation(&spec)?;
    if scratch {
        for &seed in &spec.seeds {
            report.rows.push(run_scratch_cell(&spec.base, seed)?);
        }
    }
    for r in &report.rows {
        log(
            "cell",
            &[
                ("axis", &r.axis),
                ("value", &r.value),
                ("seed", &r.seed),
                ("accuracy", &format!("{:.4}", r.accuracy)),
                ("final_pretrain_loss", &format!("{:.4}", r.final_pretrain_loss)),
                ("wall_seconds", &format!("{:.1}", r.wall_seconds)),
            ],
        );
    }
    let csv = run.path("report.csv");
    report.append_csv(&csv)?;
    run.write("summary.txt", &report.table())?;
    for s in Report::summary(&report) {
        log(
            "summary",
            &[("value", &s.value), ("seeds", &s.seeds), ("mean", &format!("{:.4}", s.mean)), ("std", &format!("{:.4}", s.std))],
        );
    }
    log("done", &[("report", &csv.display())]);
    Ok(())
}

fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Pretrain { resume, stop_after } => cmd_pretrain(cli, resume, *stop_after),
        Command::Finetune { checkpoint } => cmd_classify(cli, checkpoint.as_deref(), false),
        Command::Probe { checkpoint } => cmd_classify(cli, Some(checkpoint), true),
        Command::Reconstruct {
            checkpoint,
            video,
            ratio,
            strategy,
        } => cmd_reconstruct(cli, checkpoint, video, *ratio, strategy),
        Command::Maskviz { dims, ratio, strategy } => cmd_maskviz(cli, dims, *ratio, strategy),
        Command::Gradcheck => cmd_gradcheck(cli),
        Command::Ablate => cmd_ablate(cli),
    }
}

/// Parses `args` and runs the command; the return value is the exit code.
fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(f) => {
            log("error", &[("code", &f.code), ("message", &f.message)]);
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_exit_one() {
        assert_eq!(run(["tubemae", "maskviz", "--bogus"]), 1);
        assert_eq!(run(["tubemae"]), 1);
    }

    #[test]
    fn help_is_success() {
        assert_eq!(run(["tubemae", "--help"]), 0);
    }

    #[test]
    fn dims_parse() {
        let d = parse_dims("8,14,14").unwrap();
        assert_eq!((d.t, d.h, d.w), (8, 14, 14));
        assert!(parse_dims("8,14").is_err());
        assert!(parse_dims("8,0,1").is_err());
    }
}
