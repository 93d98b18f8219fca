use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use catch_core::harness::{self, emit_report, ExperimentConfig, ExperimentId, Pipeline, PolicyName, Sweep};
use catch_core::{Error, Result};

#[derive(Parser)]
#[command(name = "catch", version, about = "Per-domain adapter experiments on a frozen toy VQA model")]
struct Cli {
    /// JSON experiment config; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (relative paths resolve against CATCH_OUTPUT_ROOT).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Existing dataset directory containing manifest.json.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Comma-separated 1-based injection layers.
    #[arg(long, global = true, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, global = true)]
    prefix_len: Option<usize>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Fail instead of training missing artifacts.
    #[arg(long, global = true)]
    no_train: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Hard,
    Soft,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Layers,
    Prefix,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test splits.
    GenData,
    /// Pretrain and freeze the backbone.
    Pretrain,
    /// Train the image-only domain classifier.
    TrainClassifier,
    /// Train one domain's adapter pair (or `all`).
    TrainAdapters {
        #[arg(long)]
        domain: String,
    },
    /// Evaluate one routing policy on the test split.
    Eval {
        #[arg(long, value_enum)]
        policy: PolicyArg,
    },
    /// Frozen baseline against hard-routed adapters.
    Main,
    Ablate,
    Crossdomain,
    Routing,
    Sweep {
        #[arg(long, value_enum)]
        what: SweepArg,
    },
    /// Re-render every JSON report in the output directory as text.
    Report,
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.output {
        cfg.output_dir = o.clone();
    }
    if let Some(m) = &cli.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(l) = &cli.layers {
        cfg.overrides.layers = Some(l.clone());
    }
    if let Some(l) = cli.prefix_len {
        cfg.overrides.prefix_len = Some(l);
    }
    if let Some(t) = cli.temperature {
        cfg.overrides.temperature = Some(t);
    }
    if cli.no_train {
        cfg.train_missing = false;
    }
    cfg.experiment = match cli.command {
        Command::Ablate => ExperimentId::Ablation,
        Command::Crossdomain => ExperimentId::Crossdomain,
        Command::Routing => ExperimentId::Routing,
        Command::Sweep { what: SweepArg::Layers } => ExperimentId::LayersSweep,
        Command::Sweep { what: SweepArg::Prefix } => ExperimentId::PrefixSweep,
        Command::Main => ExperimentId::Main,
        _ => cfg.experiment,
    };
    Ok(cfg)
}

fn print(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
}

fn emit(p: &Pipeline, r: &harness::Report) -> Result<()> {
    let (json_path, text_path) = emit_report(r, &p.reports_dir())?;
    print!("{}", r.render());
    print(json!({"report": json_path, "text": text_path}));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli)?;
    let mut p = Pipeline::open(cfg)?;
    match &cli.command {
        Command::GenData => {
            let m = p.gen_data()?;
            print(json!({"manifest": m, "dataset_hash": p.dataset_hash()?}));
        }
        Command::Pretrain => {
            let losses = p.pretrain()?;
            print(json!({"checkpoint": p.backbone_path(), "epoch_losses": losses}));
        }
        Command::TrainClassifier => {
            let domains = p.domains();
            let losses = p.train_classifier(&domains)?;
            let clf = p.classifier()?;
            let test = p.splits()?.test.clone();
            let correct = test
                .iter()
                .filter(|s| {
                    clf.classify(&s.image)
                        .map(|pr| clf.domains[catch_core::backbone::argmax(&pr)] == s.domain)
                        .unwrap_or(false)
                })
                .count();
            print(json!({"epoch_losses": losses, "test_accuracy": correct as f64 / test.len().max(1) as f64}));
        }
        Command::TrainAdapters { domain } => {
            let backbone = p.backbone()?;
            let clf = p.classifier()?;
            let adapter = p.cfg.effective_adapter();
            let targets: Vec<_> = match domain.as_str() {
                "all" => p.domains(),
                name => vec![p
                    .domains()
                    .into_iter()
                    .find(|d| d.name == name)
                    .ok_or_else(|| Error::Lookup {
                        what: "domain",
                        name: name.to_string(),
                        available: p.domains().iter().map(|d| d.name.clone()).collect::<Vec<_>>().join(", "),
                    })?],
            };
            let mut logs = Vec::new();
            for d in &targets {
                logs.push(p.train_adapter(&backbone, Some(&clf), &adapter, d)?);
            }
            print(json!({"adapter_dir": p.adapter_dir(&adapter)?, "logs": logs}));
        }
        Command::Eval { policy } => {
            let policy = match policy {
                PolicyArg::Hard => PolicyName::Hard,
                PolicyArg::Soft => PolicyName::Soft,
                PolicyArg::Random => PolicyName::Random,
            };
            let r = harness::run_eval(&mut p, policy)?;
            emit(&p, &r)?;
        }
        Command::Main | Command::Ablate | Command::Crossdomain | Command::Routing => {
            let r = harness::run_experiment(&mut p)?;
            emit(&p, &r)?;
        }
        Command::Sweep { what } => {
            let what = match what {
                SweepArg::Layers => Sweep::Layers,
                SweepArg::Prefix => Sweep::Prefix,
            };
            let r = harness::run_sweep(&mut p, what)?;
            emit(&p, &r)?;
        }
        Command::Report => {
            let dir = p.reports_dir();
            let mut entries: Vec<_> = std::fs::read_dir(&dir)
                .map_err(|e| Error::MissingArtifact {
                    path: dir.clone(),
                    hint: format!("no reports yet ({e}); run an experiment command first"),
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            entries.sort();
            for path in entries {
                let r = harness::load_report(&path)?;
                emit_report(&r, &dir)?;
                println!("== {}", r.experiment);
                print!("{}", r.render());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{body}");
            ExitCode::from(2)
        }
    }
}
