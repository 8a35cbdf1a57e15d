use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dsrb::config::{DatasetConfig, ExperimentConfig};
use dsrb::harness::{self, Features, Method, RunSpec};
use dsrb::{io, Error, Report, Result};
use dsrb_core::train::Toggles;

#[derive(Parser)]
#[command(name = "dsrb", version, about = "Multi-label recognition from partial labels")]
struct Cli {
    /// TOML experiment file; the preset supplies anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting point when no config file is given.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Override a config field, e.g. `--set train.schedule.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output root (takes precedence over DSRB_OUTPUT_DIR and the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Baseline,
    Iprb,
    Pprb,
    Dsrb,
    /// Whatever `train.toggles` says.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Markdown,
}

#[derive(Subcommand)]
enum Command {
    /// Render the configured synthetic dataset to `<out>/data/{train,test}`.
    Generate,
    /// Drop labels from a complete label CSV.
    Prepare {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        proportion: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train one run (resuming from its checkpoint when present) and evaluate it.
    Train {
        #[arg(long, value_enum, default_value = "config")]
        method: MethodArg,
        #[arg(long)]
        proportion: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the configured test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate the configured method at every proportion and seed.
    Sweep,
    /// The four-row ablation (baseline, IPRB, PPRB, both) at every proportion and seed.
    Ablation,
    /// Print a saved report in another format.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(&cli.preset)?,
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    } else {
        cfg.output_dir = cfg.resolved_output_dir();
    }
    Ok(cfg)
}

fn method(arg: MethodArg, cfg: &ExperimentConfig) -> Method {
    match arg {
        MethodArg::Baseline => Method::new("baseline", Toggles::baseline()),
        MethodArg::Iprb => Method::new("iprb", Toggles::instance_only()),
        MethodArg::Pprb => Method::new("pprb", Toggles::prototype_only()),
        MethodArg::Dsrb => Method::new("dsrb", Toggles::full()),
        MethodArg::Config => Method::new(&cfg.name, cfg.train.toggles),
    }
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn grid(cfg: &ExperimentConfig, methods: &[Method]) -> Result<()> {
    let data = harness::load_dataset(cfg)?;
    let root = cfg.output_dir.join(&cfg.name);
    io::write_text(&root.join("config.toml"), &cfg.to_toml()?)?;
    let report = harness::run_grid(cfg, &data, methods, Some(&root.join("runs")), &mut |m: &str| log(m))?;
    report.write(&root)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Generate => {
            let DatasetConfig::Synthetic {
                scene,
                train_images,
                test_images,
            } = &cfg.dataset
            else {
                return Err(Error::Config("generate needs a synthetic dataset config".into()));
            };
            let data = harness::load_dataset(&cfg)?;
            let dir = cfg.output_dir.join("data");
            io::save_image_dir(&dir.join("train"), &data.categories, &data.train.images, &data.train.labels)?;
            io::save_image_dir(&dir.join("test"), &data.categories, &data.test.images, &data.test.labels)?;
            io::write_text(&dir.join("scene.toml"), &toml::to_string(scene).map_err(|e| Error::Config(e.to_string()))?)?;
            log(&format!(
                "wrote {train_images} train and {test_images} test images to {}",
                dir.display()
            ));
        }
        Command::Prepare {
            labels,
            proportion,
            seed,
            output,
        } => {
            let (names, files, full) = io::read_labels_csv(&labels)?;
            let partial = harness::partial_labels(&full, proportion, seed)?;
            io::write_labels_csv(&output, &names, &files, &partial)?;
        }
        Command::Train { method: m, proportion, seed } => {
            let m = method(m, &cfg);
            let proportion = proportion.unwrap_or(cfg.proportions[0]);
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let data = harness::load_dataset(&cfg)?;
            let partial = harness::partial_labels(&data.train.labels, proportion, seed)?;
            let probe = harness::build_model(&cfg, &data.categories, &partial, seed)?;
            let features = Features::extract(&probe, &data, cfg.train.flip)?;
            let dir = harness::run_dir(&cfg.output_dir.join(&cfg.name).join("runs"), &m.name, proportion, seed);
            let spec = RunSpec {
                method: m.name.clone(),
                toggles: m.toggles,
                proportion,
                seed,
                dir: Some(dir.clone()),
            };
            let out = harness::train_and_evaluate(&cfg, &data, &features, &spec, |t, rows| {
                if let Some(last) = rows.last() {
                    log(&format!("epoch {} loss {:.4}", t.epoch, last.total));
                }
            })?;
            println!(
                "{}: mAP {:.2} OF1 {:.2} CF1 {:.2} ({})",
                m.name,
                out.report.map * 100.0,
                out.report.of1() * 100.0,
                out.report.cf1() * 100.0,
                dir.display()
            );
        }
        Command::Evaluate { checkpoint } => {
            let ck = harness::Checkpoint::load(&checkpoint)?;
            let data = harness::load_dataset(&cfg)?;
            let features = Features::extract(&ck.trainer.model, &data, false)?;
            let report = harness::evaluate_model(
                &ck.trainer.model,
                &features.test,
                &data.test.labels,
                cfg.threshold,
                Some(ck.proportion),
            )?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Sweep => grid(&cfg, &[method(MethodArg::Config, &cfg)])?,
        Command::Ablation => grid(&cfg, &Method::ablation())?,
        Command::Report { input, format } => {
            let report = Report::read(&input)?;
            match format {
                Format::Csv => print!("{}", report.to_csv()),
                Format::Json => print!("{}", report.to_json()?),
                Format::Markdown => print!("{}", report.to_markdown()),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

