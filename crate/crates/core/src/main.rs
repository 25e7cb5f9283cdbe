use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array4, Axis};

use rebalance::error::{Error, Result};
use rebalance::harness::ablation::{run_ablation, run_sweep, SweepParam, Verdict};
use rebalance::harness::config::{set_field, TrainConfig};
use rebalance::harness::metrics::MetricsReport;
use rebalance::harness::report::{
    dump_attention, plot_accuracy_vs_epoch, plot_sweep, write_ablation_csv, write_json, write_table_csv, RunReport,
};
use rebalance::harness::train::{evaluate, train, Tensors};
use rebalance::imbalance::{generate_synthetic, subsample_exponential, Dataset, ImbalanceSpec, Split, SyntheticSpec};
use rebalance::model::checkpoint::Checkpoint;

#[derive(Parser)]
#[command(name = "rebalance", version, about = "Re-balanced attention consistency and smooth labels for imbalanced classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (balanced train and test splits).
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        /// TOML file with generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Generator override, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Subsample a training manifest with exponential per-class decay.
    MakeImbalanced {
        #[arg(long)]
        manifest: PathBuf,
        /// Imbalance factor: largest class count over smallest.
        #[arg(long = "if", value_name = "FACTOR")]
        imbalance_factor: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output manifest path; pixels are written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint and reports.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Report JSON path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the four-arm module ablation.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the consistency weight or the smoothing strength.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        param: SweepParam,
        /// Values to try; defaults depend on the parameter.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write class activation maps of the first samples of a manifest.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the table and plot from a run report JSON.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Training manifest CSV.
    #[arg(long = "train")]
    train_manifest: PathBuf,
    /// Evaluation manifest CSV.
    #[arg(long = "test")]
    test_manifest: PathBuf,
    /// Side length images are resized to when loading image files.
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the CPU-sized preset instead of the reference defaults.
    #[arg(long)]
    desk: bool,
    /// Training override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match (&self.config, self.desk) {
            (Some(path), _) => TrainConfig::from_file(path)?,
            (None, true) => TrainConfig::desk_scale(),
            (None, false) => TrainConfig::default(),
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        Ok(cfg)
    }
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, Dataset)> {
        Ok((
            Dataset::load(&self.train_manifest, Split::Train, self.image_size)?,
            Dataset::load(&self.test_manifest, Split::Test, self.image_size)?,
        ))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth {
            out,
            config,
            overrides,
        } => {
            let mut spec = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
                }
                None => SyntheticSpec::default(),
            };
            for o in &overrides {
                set_field(&mut spec, o)?;
            }
            let (tr, te) = generate_synthetic(&spec)?;
            create_dir(&out)?;
            tr.save(&out, "train")?;
            te.save(&out, "test")?;
            write_text(
                &out.join("synth.toml"),
                &toml::to_string(&spec).map_err(|e| Error::config(e.to_string()))?,
            )?;
            println!("train {:?}", tr.manifest.label_counts());
            println!("test  {:?}", te.manifest.label_counts());
        }
        Command::MakeImbalanced {
            manifest,
            imbalance_factor,
            seed,
            out,
        } => {
            let ds = Dataset::load(&manifest, Split::Train, None)?;
            let spec = ImbalanceSpec::from_counts(&ds.manifest.class_counts()?, imbalance_factor, seed)?;
            let sub = ds.with_manifest(subsample_exponential(&ds.manifest, &spec)?);
            let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
            let stem = out
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::config(format!("bad output path {}", out.display())))?;
            sub.save(&dir, stem)?;
            write_json(&spec, &dir.join(format!("{stem}.imbalance.json")))?;
            println!("mu {:.6}  kept {:?}", spec.mu, sub.manifest.label_counts());
        }
        Command::Train { data, config, out } => {
            let cfg = config.resolve()?;
            let (tr, te) = data.load()?;
            create_dir(&out)?;
            write_text(&out.join("config.toml"), &cfg.to_toml())?;
            let outcome = train(&cfg, &tr, &te)?;
            outcome.checkpoint.save(&out.join("model.ckpt"))?;
            let report = RunReport::new(&cfg, &outcome);
            write_json(&report, &out.join("report.json"))?;
            write_run_outputs(&report, &out)?;
            let (last, best) = (outcome.final_report(), outcome.best_report());
            println!(
                "final: overall {:.4} mean {:.4}; best mean {:.4} (epoch {})",
                last.overall_accuracy, last.mean_accuracy, best.mean_accuracy, best.epoch
            );
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let size = Some(ckpt.model.config.input_size);
            let ds = Dataset::load(&manifest, Split::Test, size)?;
            let report = evaluate(&ckpt, &ds)?.to_record();
            match out {
                Some(p) => write_json(&report, &p)?,
                None => println!("{}", serde_json::to_string_pretty(&report).expect("record serializes")),
            }
        }
        Command::Ablate {
            data,
            config,
            seeds,
            out,
        } => {
            let cfg = config.resolve()?;
            let (tr, te) = data.load()?;
            create_dir(&out)?;
            write_text(&out.join("config.toml"), &cfg.to_toml())?;
            let grid = run_ablation(&cfg, &seeds, &tr, &te)?;
            let summary = grid.summarize(0.03)?;
            write_json(&grid, &out.join("grid.json"))?;
            write_json(&summary, &out.join("summary.json"))?;
            write_ablation_csv(&summary, &out.join("ablation.csv"))?;
            for arm in &summary.arms {
                println!(
                    "{:<9} overall {:.4} mean {:.4}",
                    arm.arm.label(),
                    arm.overall_accuracy,
                    arm.mean_accuracy
                );
            }
            match &summary.verdict {
                Verdict::InsufficientSeeds { seeds, required } => {
                    println!("insufficient seeds ({seeds} < {required}): ordering not judged")
                }
                Verdict::Checked { checks } => {
                    for c in checks {
                        println!("[{}] {}", if c.holds { "holds" } else { "fails" }, c.claim);
                    }
                }
            }
        }
        Command::Sweep {
            data,
            config,
            param,
            values,
            seeds,
            out,
        } => {
            let cfg = config.resolve()?;
            let values = if values.is_empty() { param.default_values() } else { values };
            let (tr, te) = data.load()?;
            create_dir(&out)?;
            write_text(&out.join("config.toml"), &cfg.to_toml())?;
            let sweep = run_sweep(&cfg, param, &values, &seeds, &tr, &te)?;
            write_json(&sweep, &out.join(format!("sweep_{}.json", param.name())))?;
            plot_sweep(&sweep, &out.join(format!("accuracy_vs_{}.svg", param.name())))?;
            for p in &sweep.points {
                println!("{} = {:<6} overall {:.4} mean {:.4}", param.name(), p.value, p.overall_accuracy, p.mean_accuracy);
            }
        }
        Command::DumpAttention {
            checkpoint,
            manifest,
            count,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = Dataset::load(&manifest, Split::Test, Some(ckpt.model.config.input_size))?;
            let tensors = Tensors::from_dataset(&ds)?;
            let n = count.min(tensors.len());
            if n == 0 {
                return Err(Error::data("no samples to dump"));
            }
            let images: Array4<f64> = tensors.images.slice_axis(Axis(0), (0..n).into()).to_owned();
            let dump = dump_attention(&ckpt, &images, &out)?;
            println!("wrote {:?} maps to {}", dump.shape, out.display());
        }
        Command::Report { input, out } => {
            let report = RunReport::load(&input)?;
            create_dir(&out)?;
            write_run_outputs(&report, &out)?;
        }
    }
    Ok(())
}

/// Table of final and best epochs plus the accuracy-per-epoch plot.
fn write_run_outputs(report: &RunReport, out: &Path) -> Result<()> {
    let rows = vec![
        ("final".to_string(), MetricsReport::from_record(&report.last)?),
        ("best".to_string(), MetricsReport::from_record(&report.best)?),
    ];
    write_table_csv(&rows, &out.join("report.csv"))?;
    plot_accuracy_vs_epoch(&report.reports()?, &out.join("accuracy.svg"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
