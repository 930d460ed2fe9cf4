//! `parsestack`: generate data, train, evaluate, compare architectures and
//! predict label maps.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use parsestack::hierarchy::LabelHierarchy;
use parsestack::net::{load_checkpoint, peek_header, save_checkpoint, ArchMode, ParserNet};
use parsestack::synth::{
    export_png, generate, load_dataset, read_image_png, save_dataset, write_label_png, Dataset,
};
use parsestack::tensor::{set_kernel_threads, DType, Element};
use parsestack::training::{build_nets, evaluate, run_ablation, train_with, TrainConfig};

use config::{OutDir, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "parsestack", version, about = "Coarse-to-fine image parsing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Worker threads for convolution kernels.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ArchMode>,
    /// Keep only the finest N hierarchy levels.
    #[arg(long)]
    levels: Option<usize>,
}

fn parse_mode(s: &str) -> Result<ArchMode, String> {
    ArchMode::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val datasets.
    Gen {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        common: Common,
        /// Also export PNG images and per-level label maps.
        #[arg(long)]
        png: bool,
    },
    /// Train one architecture.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        common: Common,
        /// Directory holding train.psds and val.psds; generated from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train all four architectures under one budget and compare them.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write per-level label PNGs for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::load(
            self.config.as_deref(),
            &Overrides {
                seed: self.seed,
                mode: self.mode,
                levels: self.levels,
            },
        )
    }
}

fn datasets(cfg: &RunConfig, h: &LabelHierarchy, dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    match dir {
        Some(d) => Ok((
            load_dataset(&d.join("train.psds"), h)
                .with_context(|| format!("loading {}", d.join("train.psds").display()))?,
            load_dataset(&d.join("val.psds"), h)
                .with_context(|| format!("loading {}", d.join("val.psds").display()))?,
        )),
        None => {
            let spec = parsestack::synth::GeoSceneSpec {
                count: cfg.data.train + cfg.data.val,
                ..cfg.data.scene.clone()
            };
            Ok(generate(&spec, h)?.split(cfg.data.train))
        }
    }
}

fn cmd_gen(run: &RunArgs, common: &Common, png: bool) -> Result<()> {
    let cfg = run.resolve()?;
    let h = cfg.hierarchy()?;
    let out = OutDir::new(&common.out, common.force)?;
    let mut names = vec!["train.psds".to_string(), "val.psds".into(), "config.toml".into()];
    if png {
        names.extend(["train/img".to_string(), "val/img".to_string()]);
    }
    out.claim(&names)?;
    let (train, val) = datasets(&cfg, &h, None)?;
    save_dataset(&train, &out.path("train.psds"))?;
    save_dataset(&val, &out.path("val.psds"))?;
    if png {
        export_png(&train, &h, &out.path("train"))?;
        export_png(&val, &h, &out.path("val"))?;
    }
    out.archive(&cfg, &names)?;
    println!(
        "wrote {} train and {} val samples to {} (hierarchy {:016x})",
        train.len(),
        val.len(),
        common.out.display(),
        h.hash()
    );
    Ok(())
}

fn train_outputs(mode: ArchMode, h: &LabelHierarchy) -> Vec<String> {
    let mut names = vec!["config.toml".to_string()];
    let suffixes: Vec<String> = if mode == ArchMode::Standalone {
        h.levels().iter().map(|l| format!("_{}", l.name)).collect()
    } else {
        vec![String::new()]
    };
    for s in suffixes {
        names.extend([
            format!("model{s}.ckpt"),
            format!("train_log{s}.csv"),
            format!("timing{s}.csv"),
            format!("metrics{s}.csv"),
        ]);
    }
    names
}

fn train_typed<T: Element>(cfg: &RunConfig, train: &Dataset, val: &Dataset, out: &OutDir) -> Result<()> {
    let h = cfg.hierarchy()?;
    let mode = cfg.train.mode;
    let nets = build_nets::<T>(mode, &cfg.model, &h, cfg.train.seed)?;
    for mut net in nets {
        let suffix = if mode == ArchMode::Standalone {
            format!("_{}", h.levels()[net.levels()[0]].name)
        } else {
            String::new()
        };
        let names: Vec<String> = net.levels().iter().map(|&l| h.levels()[l].name.clone()).collect();
        let val_set = (!val.is_empty()).then_some(val);
        let log = train_with(&mut net, train, val_set, &cfg.train, |epoch, n: &ParserNet<T>| {
            save_checkpoint(n, &out.path(&format!("snapshot{suffix}_epoch{epoch:04}.ckpt")))
        })?;
        save_checkpoint(&net, &out.path(&format!("model{suffix}.ckpt")))?;
        out.write(&format!("train_log{suffix}.csv"), report::train_log_csv(&log, &names)?)?;
        out.write(&format!("timing{suffix}.csv"), report::timing_csv(&log)?)?;
        if let Some(v) = log.epochs.last().and_then(|e| e.validation.as_ref()) {
            out.write(&format!("metrics{suffix}.csv"), report::metrics_csv(v)?)?;
            print!("{}", report::metrics_table(v));
        }
        let last = log.steps.last().map_or(f64::NAN, |r| r.total);
        println!("trained {mode}{suffix}: {} steps, final loss {last:.4}", log.steps.len());
    }
    Ok(())
}

fn cmd_train(run: &RunArgs, common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = run.resolve()?;
    let h = cfg.hierarchy()?;
    let out = OutDir::new(&common.out, common.force)?;
    let names = train_outputs(cfg.train.mode, &h);
    out.claim(&names)?;
    let (train, val) = datasets(&cfg, &h, data)?;
    match DType::from_env() {
        DType::F64 => train_typed::<f64>(&cfg, &train, &val, &out)?,
        DType::F32 => train_typed::<f32>(&cfg, &train, &val, &out)?,
    }
    out.archive(&cfg, &names)?;
    Ok(())
}

fn eval_typed<T: Element>(checkpoint: &Path, data: &Path, out: &OutDir) -> Result<()> {
    let net: ParserNet<T> = load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let ds = load_dataset(data, net.hierarchy()).with_context(|| {
        format!(
            "dataset {} does not match checkpoint {}",
            data.display(),
            checkpoint.display()
        )
    })?;
    let report = evaluate(&net, &ds, parsestack::training::EVAL_BATCH)?;
    out.write("metrics.csv", report::metrics_csv(&report)?)?;
    print!("{}", report::metrics_table(&report));
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, common: &Common) -> Result<()> {
    let out = OutDir::new(&common.out, common.force)?;
    out.claim(&["metrics.csv".to_string()])?;
    let header = peek_header(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    if header.dtype == "f64" {
        eval_typed::<f64>(checkpoint, data, &out)
    } else {
        eval_typed::<f32>(checkpoint, data, &out)
    }
}

fn cmd_ablate(run: &RunArgs, common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = run.resolve()?;
    let h = cfg.hierarchy()?;
    let out = OutDir::new(&common.out, common.force)?;
    let names = vec![
        "ablation.csv".to_string(),
        "ablation.svg".into(),
        "consistency.csv".into(),
        "config.toml".into(),
    ];
    out.claim(&names)?;
    let (train, val) = datasets(&cfg, &h, data)?;
    if val.is_empty() {
        bail!("ablation needs a non-empty validation split");
    }
    let base = TrainConfig {
        snapshot_every: 0,
        ..cfg.train.clone()
    };
    let table = match DType::from_env() {
        DType::F64 => run_ablation::<f64>(&train, &val, &cfg.model, &h, &base)?,
        DType::F32 => run_ablation::<f32>(&train, &val, &cfg.model, &h, &base)?,
    };
    out.write("ablation.csv", table.to_csv())?;
    out.write("ablation.svg", report::ablation_svg(&table))?;
    out.write("consistency.csv", report::consistency_csv(&table)?)?;
    out.archive(&cfg, &names)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn predict_typed<T: Element>(checkpoint: &Path, image: &Path, out: &OutDir) -> Result<()> {
    let net: ParserNet<T> = load_checkpoint(checkpoint)?;
    let img = read_image_png(image).with_context(|| format!("reading {}", image.display()))?;
    let shape = img.shape().to_vec();
    let batch = parsestack::tensor::Tensor::new(
        vec![1, shape[0], shape[1], shape[2]],
        img.data().iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
    )?;
    let maps = net.predict(&batch)?;
    for (&level, map) in net.levels().iter().zip(&maps[0].maps) {
        let name = format!("{}.png", net.hierarchy().levels()[level].name);
        write_label_png(&out.path(&name), map)?;
        println!("wrote {}", out.path(&name).display());
    }
    Ok(())
}

fn cmd_predict(checkpoint: &Path, image: &Path, common: &Common) -> Result<()> {
    let header = peek_header(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let h = LabelHierarchy::from_text(&header.hierarchy)?;
    let out = OutDir::new(&common.out, common.force)?;
    let names: Vec<String> = header
        .levels
        .iter()
        .map(|&l| format!("{}.png", h.levels()[l].name))
        .collect();
    out.claim(&names)?;
    if header.dtype == "f64" {
        predict_typed::<f64>(checkpoint, image, &out)
    } else {
        predict_typed::<f32>(checkpoint, image, &out)
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Gen { common, .. }
        | Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Ablate { common, .. }
        | Command::Predict { common, .. } => common,
    };
    if common.threads == 0 {
        bail!("--threads must be at least 1");
    }
    set_kernel_threads(common.threads);
    match &cli.command {
        Command::Gen { run, common, png } => cmd_gen(run, common, *png),
        Command::Train { run, common, data } => cmd_train(run, common, data.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            common,
        } => cmd_eval(checkpoint, data, common),
        Command::Ablate { run, common, data } => cmd_ablate(run, common, data.as_deref()),
        Command::Predict {
            checkpoint,
            image,
            common,
        } => cmd_predict(checkpoint, image, common),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let mismatch = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<parsestack::Error>(),
                    Some(parsestack::Error::HashMismatch { .. })
                )
            });
            if mismatch {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
