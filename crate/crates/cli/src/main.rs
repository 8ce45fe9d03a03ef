//! Command-line front end: dataset generation, training runs, obsolescence
//! diagnostics and cost benchmarks.
//!
//! Exit codes: 0 on success, 2 for configuration or usage errors, 3 for
//! numerical failures, 1 for anything else.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use protomem::dataset::{DatasetConfig, Manifest, SyntheticDataset};
use protomem::diagnostics::{bench_all, memory_csv_line, BenchConfig, BENCH_HEADER, MEMORY_HEADER};
use protomem::encoder::LinearEncoder;
use protomem::head::SystemKind;
use protomem::sampling::PartConfig;
use protomem::train::{ExperimentConfig, TrainLog, Trainer, OBSOLESCENCE_HEADER};
use protomem::MarginLoss;

#[derive(Parser, Debug)]
#[command(
    name = "protomem",
    version,
    about = "Prototype memory experiments on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: manifest.json, examples.bin, directions.bin.
    GenData {
        /// Dataset config, or an experiment config with a `dataset` section.
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one system and write metrics.csv, memory.csv and a checkpoint.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Generate prototypes from this frozen teacher encoder checkpoint.
        #[arg(long, value_name = "TEACHER_CKPT")]
        pmkd: Option<PathBuf>,
        /// Load the dataset written by gen-data instead of regenerating it.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and record the obsolescence curve (obsolescence.csv, memory.csv).
    Diagnose {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run prototype memory and PPRN on the same data and seed.
        #[arg(long)]
        ab: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Time similarity, generation and transfer per step (bench.csv).
    Bench {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args, Debug, Default)]
struct Overrides {
    #[arg(long, value_parser = parse_system)]
    system: Option<SystemKind>,
    #[arg(long, value_enum)]
    loss: Option<LossKind>,
    /// Multi-doppelganger class selection in classes-then-images parts.
    #[arg(long)]
    mdm: bool,
    /// Hardness ratio for example selection.
    #[arg(long, value_name = "H")]
    hem: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossKind {
    Cosface,
    Dsoftmax,
}

fn parse_system(s: &str) -> Result<SystemKind, String> {
    s.parse()
}

/// Bad flags or flag combinations.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn read_config_text(path: &Path) -> anyhow::Result<String> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(usage(format!("config not found: {}", path.display())))
        }
        Err(e) => Err(protomem::Error::Io(e).into()),
    }
}

fn load_experiment(path: &Path) -> anyhow::Result<ExperimentConfig> {
    Ok(ExperimentConfig::from_json(&read_config_text(path)?)?)
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &Overrides) -> anyhow::Result<()> {
    if let Some(system) = o.system {
        cfg.system = system;
    }
    if let Some(seed) = o.seed {
        cfg.pm.seed = seed;
    }
    cfg.pm.loss = match (o.loss, cfg.pm.loss) {
        (None, l)
        | (Some(LossKind::Cosface), l @ MarginLoss::CosFace { .. })
        | (Some(LossKind::Dsoftmax), l @ MarginLoss::DSoftmax { .. }) => l,
        (Some(LossKind::Cosface), l) => MarginLoss::CosFace {
            scale: l.scale(),
            margin: 0.2,
        },
        (Some(LossKind::Dsoftmax), l) => MarginLoss::DSoftmax {
            scale: l.scale(),
            termination: 0.9,
        },
    };
    let has_cti = cfg
        .train
        .sampling
        .iter()
        .any(|p| matches!(p, PartConfig::ClassesThenImages { .. }));
    if o.mdm {
        if !has_cti {
            return Err(usage(
                "--mdm needs a classes_then_images part in the sampling plan",
            ));
        }
        for part in &mut cfg.train.sampling {
            if let PartConfig::ClassesThenImages {
                groups,
                doppelganger_random,
            } = part
            {
                doppelganger_random.get_or_insert((*groups / 8).max(1));
            }
        }
    }
    if let Some(h) = o.hem {
        if !has_cti {
            return Err(usage(
                "--hem needs a classes_then_images part in the sampling plan",
            ));
        }
        cfg.pm.hardness_ratio = h;
    }
    cfg.validate()?;
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn gen_data(config: &Path, out: &Path) -> anyhow::Result<()> {
    let value: serde_json::Value =
        serde_json::from_str(&read_config_text(config)?).map_err(protomem::Error::from)?;
    let section = value.get("dataset").cloned().unwrap_or(value);
    let cfg: DatasetConfig = serde_json::from_value(section).map_err(protomem::Error::from)?;
    let data = SyntheticDataset::generate(&cfg)?;
    std::fs::create_dir_all(out)?;
    let mut w = create(&out.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut w, &data.manifest())?;
    writeln!(w)?;
    w.flush()?;
    let mut w = create(&out.join("examples.bin"))?;
    data.write_examples(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join("directions.bin"))?;
    data.write_directions(&mut w)?;
    w.flush()?;
    log::info!(
        "wrote {} examples of {} classes to {}",
        data.num_examples(),
        data.num_classes(),
        out.display()
    );
    Ok(())
}

fn load_data(dir: &Path, cfg: &ExperimentConfig) -> anyhow::Result<SyntheticDataset> {
    let open = |name: &str| -> anyhow::Result<BufReader<File>> {
        let p = dir.join(name);
        Ok(BufReader::new(
            File::open(&p).with_context(|| format!("opening {}", p.display()))?,
        ))
    };
    let manifest: Manifest =
        serde_json::from_reader(open("manifest.json")?).map_err(protomem::Error::from)?;
    if manifest.dataset != cfg.dataset {
        return Err(usage(
            "dataset on disk was generated from a different dataset config",
        ));
    }
    Ok(SyntheticDataset::from_parts(
        &manifest,
        &mut open("examples.bin")?,
        &mut open("directions.bin")?,
    )?)
}

fn write_memory(path: &Path, trainers: &[&Trainer<'_>]) -> anyhow::Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{MEMORY_HEADER}")?;
    for t in trainers {
        let cfg = t.config();
        let sampled = match cfg.system {
            SystemKind::Pm => cfg.pm.memory_size,
            SystemKind::Full => cfg.dataset.num_classes,
            _ => cfg.sample_size(),
        };
        let head = t.head();
        writeln!(
            w,
            "{}",
            memory_csv_line(
                cfg.system,
                cfg.dataset.num_classes,
                sampled,
                cfg.pm.dim,
                head.memory_report(),
                head.instrumented_memory()
            )
        )?;
    }
    w.flush()?;
    Ok(())
}

fn write_log(path: &Path, log: &TrainLog, obsolescence: bool) -> anyhow::Result<()> {
    let mut w = create(path)?;
    if obsolescence {
        log.write_obsolescence(&mut w)?;
    } else {
        log.write_metrics(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

fn train(
    config: &Path,
    out: &Path,
    o: &Overrides,
    pmkd: Option<&Path>,
    data_dir: Option<&Path>,
) -> anyhow::Result<()> {
    let mut cfg = load_experiment(config)?;
    apply_overrides(&mut cfg, o)?;
    if pmkd.is_some() && cfg.system != SystemKind::Pm {
        return Err(usage(format!(
            "--pmkd needs --system pm, got {}",
            cfg.system
        )));
    }
    let data = match data_dir {
        Some(dir) => load_data(dir, &cfg)?,
        None => SyntheticDataset::generate(&cfg.dataset)?,
    };
    let mut trainer = Trainer::new(cfg, &data)?;
    if let Some(path) = pmkd {
        let file = File::open(path)
            .map_err(|_| usage(format!("teacher checkpoint not found: {}", path.display())))?;
        let teacher = LinearEncoder::read_from(&mut BufReader::new(file))?;
        trainer = trainer.with_teacher(teacher)?;
    }
    log::info!(
        "training {} for {} steps",
        trainer.config().system,
        trainer.config().train.steps
    );
    let log = trainer.run()?;
    std::fs::create_dir_all(out)?;
    write_log(&out.join("metrics.csv"), &log, false)?;
    if !log.obsolescence.is_empty() {
        write_log(&out.join("obsolescence.csv"), &log, true)?;
    }
    write_memory(&out.join("memory.csv"), &[&trainer])?;
    trainer.write_checkpoint(&out.join("checkpoint"))?;
    Ok(())
}

fn diagnose(config: &Path, out: &Path, ab: bool, o: &Overrides) -> anyhow::Result<()> {
    let mut cfg = load_experiment(config)?;
    apply_overrides(&mut cfg, o)?;
    if cfg.train.obsolescence_every == 0 {
        cfg.train.obsolescence_every = (cfg.train.steps / 20).max(1);
    }
    let systems = if ab {
        vec![SystemKind::Pm, SystemKind::Pprn]
    } else {
        vec![cfg.system]
    };
    let data = SyntheticDataset::generate(&cfg.dataset)?;
    let mut trainers = Vec::new();
    let mut points = Vec::new();
    for system in systems {
        let mut c = cfg.clone();
        c.system = system;
        let mut t = Trainer::new(c, &data)?;
        let log = if t.config().train.steps == 0 {
            TrainLog {
                records: Vec::new(),
                obsolescence: vec![t.obsolescence_point()?],
            }
        } else {
            t.run()?
        };
        points.extend(log.obsolescence);
        trainers.push(t);
    }
    std::fs::create_dir_all(out)?;
    let mut w = create(&out.join("obsolescence.csv"))?;
    writeln!(w, "{OBSOLESCENCE_HEADER}")?;
    for p in &points {
        writeln!(w, "{}", p.csv_line())?;
    }
    w.flush()?;
    write_memory(
        &out.join("memory.csv"),
        &trainers.iter().collect::<Vec<_>>(),
    )?;
    Ok(())
}

fn bench(config: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg: BenchConfig =
        serde_json::from_str(&read_config_text(config)?).map_err(protomem::Error::from)?;
    let rows = bench_all(&cfg)?;
    std::fs::create_dir_all(out)?;
    let mut w = create(&out.join("bench.csv"))?;
    writeln!(w, "{BENCH_HEADER}")?;
    for r in &rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    w.flush()?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<protomem::Error>() {
        Some(e) if e.is_numerical() => 3,
        Some(protomem::Error::Io(_)) | None => 1,
        Some(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { config, out } => gen_data(config, out),
        Command::Train {
            config,
            out,
            overrides,
            pmkd,
            data,
        } => train(config, out, overrides, pmkd.as_deref(), data.as_deref()),
        Command::Diagnose {
            config,
            out,
            ab,
            overrides,
        } => diagnose(config, out, *ab, overrides),
        Command::Bench { config, out } => bench(config, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
