use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rcad::dataio::{self, load_image};
use rcad::pipeline::selftest::{run_selftest, SelftestOptions};
use rcad::pipeline::{self, Checkpoint, DataSource, PipelineConfig, Preset, RunOptions};
use rcad::tensor::Exec;
use rcad::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "rcad", version, about = "Recursive autoencoder anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train all three stages (or resume from a checkpoint).
    Train(TrainArgs),
    /// Score images with a trained checkpoint.
    Infer(InferArgs),
    /// Evaluate a checkpoint on a labelled dataset and write a CSV report.
    Eval(EvalArgs),
    /// Run the built-in gradient, adjoint, AUROC and mask checks.
    Selftest(SelftestArgs),
    /// Write the synthetic texture dataset to disk.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Base settings, refined by --config.
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetArg,
    /// key = value file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset folder; the synthetic generator is used when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::preset(self.preset.into());
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg = cfg.apply_text(&text).map_err(|e| e.context(path.display().to_string()))?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(data) = &self.data {
            cfg.data = DataSource::Folder(data.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "rcad-out")]
    out_dir: PathBuf,
    /// Continue from a partially trained checkpoint (its config is used).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this stage.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    stop_after: Option<u8>,
    /// Run every loop on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG files or directories of PNG files.
    #[arg(long, required = true, num_args = 1..)]
    images: Vec<PathBuf>,
    #[arg(long, default_value = "rcad-maps")]
    out_dir: PathBuf,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset folder; defaults to the checkpoint's configured source.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
    /// Also write per-image scores here.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "rcad-synth")]
    out_dir: PathBuf,
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn train(args: &TrainArgs) -> Result<()> {
    let ckpt = match &args.resume {
        Some(path) => Checkpoint::load(path)?,
        None => Checkpoint::initialize(args.config.resolve()?)?,
    };
    let data = ckpt.config.load_data()?;
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    write(&args.out_dir.join("config.txt"), &ckpt.config.to_text())?;
    let log_path = args.out_dir.join("train.log");
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = |e: rcad::train::EpochLoss| {
        let line = format!("stage={} epoch={} loss={:.6}", e.stage, e.epoch, e.loss);
        eprintln!("{line}");
        let _ = writeln!(log_file, "{line}");
    };
    let opts = RunOptions {
        exec: exec(args.sequential),
        out_dir: Some(args.out_dir.clone()),
        stop_after: args.stop_after,
    };
    let ckpt = pipeline::resume_training(ckpt, &data, &opts, &mut log)?;
    let path = args.out_dir.join("checkpoint.rcad");
    ckpt.save(&path)?;
    println!("stage {} complete, checkpoint written to {}", ckpt.stage_completed, path.display());
    Ok(())
}

fn collect_pngs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Usage("no input images found".into()));
    }
    Ok(out)
}

fn infer(args: &InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let paths = collect_pngs(&args.images)?;
    let res = ckpt.config.resolution;
    let images = paths.iter().map(|p| load_image(p, res)).collect::<Result<Vec<_>>>()?;
    let maps = pipeline::run_inference(&ckpt, &images, exec(args.sequential))?;
    let mut csv = String::from("path,image_score\n");
    for (i, (path, map)) in paths.iter().zip(&maps).enumerate() {
        let stem = path.file_stem().map_or_else(|| i.to_string(), |s| s.to_string_lossy().into_owned());
        dataio::save_map(&map.scores, &args.out_dir.join(format!("{i:04}_{stem}.png")))?;
        csv.push_str(&format!("{},{:.6}\n", path.display(), map.image_score));
    }
    write(&args.out_dir.join("scores.csv"), &csv)?;
    println!("{} maps written to {}", maps.len(), args.out_dir.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let mut ckpt = Checkpoint::load(&args.checkpoint)?;
    if let Some(d) = &args.data {
        ckpt.config.data = DataSource::Folder(d.clone());
    }
    let data = ckpt.config.load_data()?;
    let report = pipeline::evaluate(&ckpt, &data, exec(args.sequential))?;
    write(&args.out, &report.to_csv())?;
    if let Some(s) = &args.scores {
        write(s, &report.scores_csv())?;
    }
    print!("{}", report.to_csv());
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let DataSource::Synthetic(s) = &cfg.data else {
        return Err(Error::Usage("synth needs a synthetic data source".into()));
    };
    let index = dataio::generate_synthetic(&cfg.synth_spec(s))?;
    dataio::write_dataset(&index, &args.out_dir)?;
    println!("synthetic dataset written to {}", args.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Selftest(a) => {
            let report = run_selftest(&SelftestOptions {
                seed: a.seed,
                ..SelftestOptions::default()
            });
            println!("{report}");
            return if report.all_passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE };
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
