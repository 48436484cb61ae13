//! Command-line front end: dataset generation, training, attacks, adversarial
//! training, the geometric sweep, and report rendering.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use geomadv::attack::{AttackConfig, AttackMethod};
use geomadv::defense::{adversarial_train, DefenseConfig, DefenseKind};
use geomadv::facegen::{
    build_dataset, load_dataset, make_classes_with_margin, save_dataset, JitterParams,
    LandmarkLayout, DEFAULT_CLASS_MARGIN,
};
use geomadv::harness::{
    report, run_defense_eval, run_per_region, run_sweep, run_whitebox, ExperimentConfig,
    ExperimentKind,
};
use geomadv::victim::{save_checkpoint, train, ArchitectureDescriptor, TrainParams};

#[derive(Parser)]
#[command(name = "geomadv")]
#[command(about = "Geometric adversarial attacks on landmark-defined face classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Generate a synthetic schematic-face dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long = "per-class", default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Landmark layout: compact (k=23) or paperlike (k=68).
        #[arg(long, default_value = "compact")]
        layout: String,
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long, default_value_t = DEFAULT_CLASS_MARGIN)]
        margin: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train the victim classifier on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run attacks against a trained model.
    Attack {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated methods: flm, gflm, fgsm.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long = "lambda-flow")]
        lambda_flow: Option<f64>,
        #[arg(long = "max-iters")]
        max_iters: Option<usize>,
        /// "all" or a comma-separated list of group ids (1..5).
        #[arg(long)]
        regions: Option<String>,
        /// on/off: tie the mirrored eye groups during GFLM.
        #[arg(long)]
        symmetry: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "sample-limit")]
        sample_limit: Option<usize>,
        #[arg(long = "timing-reps")]
        timing_reps: Option<usize>,
        /// whitebox (default), per-region, or defense.
        #[arg(long)]
        experiment: Option<String>,
        /// Defended checkpoints for the defense experiment (repeatable).
        #[arg(long = "defended-model")]
        defended_models: Vec<PathBuf>,
        /// JSON experiment config; explicit flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "dump-images")]
        dump_images: Option<usize>,
    },
    /// Adversarially train a defended model.
    Advtrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// fgsm or pgd.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0.03)]
        eps: f64,
        #[arg(long, default_value_t = 7)]
        steps: usize,
        /// Defaults to eps / 4.
        #[arg(long = "step-size")]
        step_size: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        frac: f64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep the eight geometric variables and record mean true-class
    /// probability per offset.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// "all" or comma-separated variable ids 1..8.
        #[arg(long)]
        variables: Option<String>,
        #[arg(long)]
        range: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long = "sample-limit")]
        sample_limit: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render text tables from the CSVs in a results directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Commands::GenData { out, classes, per_class, size, layout, split, margin, seed } => {
            let layout = LandmarkLayout::from_str(&layout)?;
            let templates = make_classes_with_margin(classes, layout, seed, margin)?;
            let ds =
                build_dataset(&templates, per_class, split, size, &JitterParams::default(), seed)?;
            save_dataset(&ds, &out)?;
            println!(
                "wrote {} samples ({} train / {} test, {} classes, {}x{}, k={}) to {}",
                ds.samples.len(),
                ds.manifest.train_indices.len(),
                ds.manifest.test_indices.len(),
                classes,
                size,
                size,
                layout.num_landmarks(),
                out.display()
            );
            Ok(())
        }
        Commands::Train { data, out, epochs, lr, momentum, batch, seed } => {
            let ds = load_dataset(&data)?;
            let desc =
                ArchitectureDescriptor::default_cnn(ds.manifest.image_size, ds.manifest.n_classes);
            let hp = TrainParams { lr, momentum, epochs, batch_size: batch, seed };
            let model = train(&desc, &ds.train_refs(), &ds.test_refs(), &hp)?;
            save_checkpoint(&model, &out)?;
            println!(
                "trained {} epochs: train accuracy {:.4}, test accuracy {:.4} -> {}",
                epochs,
                model.meta().train_accuracy,
                model.meta().test_accuracy,
                out.display()
            );
            Ok(())
        }
        Commands::Attack {
            data,
            model,
            out,
            method,
            eps,
            lambda_flow,
            max_iters,
            regions,
            symmetry,
            seed,
            sample_limit,
            timing_reps,
            experiment,
            defended_models,
            config,
            dump_images,
        } => {
            let mut cfg = base_config(config.as_deref(), ExperimentKind::Whitebox)?;
            if let Some(v) = data {
                cfg.dataset = v;
            }
            if let Some(v) = model {
                cfg.checkpoint = v;
            }
            if let Some(v) = out {
                cfg.out_dir = v;
            }
            if let Some(kind) = experiment {
                cfg.kind = match kind.as_str() {
                    "whitebox" => ExperimentKind::Whitebox,
                    "per-region" | "per_region" => ExperimentKind::PerRegion,
                    "defense" => ExperimentKind::Defense,
                    other => bail!("unknown experiment {other:?}"),
                };
            }
            if !defended_models.is_empty() {
                cfg.defended_checkpoints = defended_models;
            }
            if let Some(methods) = method {
                cfg.attacks = parse_methods(&methods)?;
            } else if cfg.kind == ExperimentKind::PerRegion {
                cfg.attacks.retain(|a| a.method != AttackMethod::Fgsm);
            }
            for a in &mut cfg.attacks {
                if let Some(v) = eps {
                    a.eps = v;
                }
                if let Some(v) = lambda_flow {
                    a.lambda_flow = v;
                }
                if let Some(v) = max_iters {
                    a.max_iters = v;
                }
                if let Some(r) = &regions {
                    a.regions = parse_regions(r)?;
                }
                if let Some(s) = &symmetry {
                    a.symmetry = parse_on_off(s)?;
                }
                if let Some(v) = seed {
                    a.seed = v;
                }
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = sample_limit {
                cfg.sample_limit = Some(v);
            }
            if let Some(v) = timing_reps {
                cfg.timing_reps = v;
            }
            if let Some(v) = dump_images {
                cfg.dump_images = v;
            }
            validate_paths(&cfg)?;

            match cfg.kind {
                ExperimentKind::Whitebox => {
                    let rows = run_whitebox(&cfg)?;
                    print_metrics(&rows);
                }
                ExperimentKind::PerRegion => {
                    let rows = run_per_region(&cfg)?;
                    print_metrics(&rows);
                }
                ExperimentKind::Defense => {
                    let rows = run_defense_eval(&cfg)?;
                    println!("{:<12} {:<6} {:>8} {:>9}", "defense", "method", "sr(%)", "attacked");
                    for r in rows {
                        println!(
                            "{:<12} {:<6} {:>8.2} {:>9}",
                            r.defense, r.method, r.success_rate, r.attacked
                        );
                    }
                }
                ExperimentKind::Sweep => bail!("use the sweep subcommand for sweep configs"),
            }
            println!("results written to {}", cfg.out_dir.display());
            Ok(())
        }
        Commands::Advtrain {
            data,
            out,
            kind,
            eps,
            steps,
            step_size,
            frac,
            epochs,
            lr,
            momentum,
            batch,
            seed,
        } => {
            let ds = load_dataset(&data)?;
            let desc =
                ArchitectureDescriptor::default_cnn(ds.manifest.image_size, ds.manifest.n_classes);
            let cfg = DefenseConfig {
                kind: DefenseKind::from_str(&kind)?,
                eps,
                pgd_steps: steps,
                pgd_step_size: step_size.unwrap_or(eps / 4.0),
                adv_fraction: frac,
                train: TrainParams { lr, momentum, epochs, batch_size: batch, seed },
            };
            let model = adversarial_train(&desc, &ds.train_refs(), &ds.test_refs(), &cfg)?;
            save_checkpoint(&model, &out)?;
            println!(
                "adversarially trained ({}): train accuracy {:.4}, test accuracy {:.4} -> {}",
                cfg.kind,
                model.meta().train_accuracy,
                model.meta().test_accuracy,
                out.display()
            );
            Ok(())
        }
        Commands::Sweep { data, model, out, variables, range, steps, sample_limit, seed, config } => {
            let mut cfg = base_config(config.as_deref(), ExperimentKind::Sweep)?;
            if let Some(v) = data {
                cfg.dataset = v;
            }
            if let Some(v) = model {
                cfg.checkpoint = v;
            }
            if let Some(v) = out {
                cfg.out_dir = v;
            }
            if let Some(v) = &variables {
                cfg.sweep.variables = parse_variables(v)?;
            }
            if let Some(v) = range {
                cfg.sweep.range = v;
            }
            if let Some(v) = steps {
                cfg.sweep.steps = v;
            }
            if let Some(v) = sample_limit {
                cfg.sample_limit = Some(v);
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            validate_paths(&cfg)?;
            let points = run_sweep(&cfg)?;
            println!(
                "swept {} variables x {} offsets over {} samples; sweep.csv written to {}",
                cfg.sweep.variables.len(),
                cfg.sweep.steps,
                points.first().map_or(0, |p| p.samples),
                cfg.out_dir.display()
            );
            Ok(())
        }
        Commands::Report { dir } => {
            print!("{}", report(&dir)?);
            Ok(())
        }
    }
}

fn base_config(config: Option<&std::path::Path>, kind: ExperimentKind) -> Result<ExperimentConfig> {
    match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let cfg: ExperimentConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            Ok(cfg)
        }
        None => Ok(ExperimentConfig::new(
            kind,
            PathBuf::new(),
            PathBuf::new(),
            PathBuf::from("results"),
        )),
    }
}

fn validate_paths(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.dataset.as_os_str().is_empty() {
        bail!("missing dataset path (--data or config)");
    }
    if cfg.checkpoint.as_os_str().is_empty() && cfg.kind != ExperimentKind::Defense {
        bail!("missing model path (--model or config)");
    }
    Ok(())
}

fn parse_methods(s: &str) -> Result<Vec<AttackConfig>> {
    s.split(',')
        .map(|m| {
            Ok(match AttackMethod::from_str(m.trim())? {
                AttackMethod::Flm => AttackConfig::flm(),
                AttackMethod::Gflm => AttackConfig::gflm(),
                AttackMethod::Fgsm => AttackConfig::fgsm(),
            })
        })
        .collect()
}

fn parse_regions(s: &str) -> Result<Option<Vec<u8>>> {
    if s == "all" {
        return Ok(None);
    }
    let groups = s
        .split(',')
        .map(|g| g.trim().parse::<u8>().context("region ids are 1..5"))
        .collect::<Result<Vec<u8>>>()?;
    Ok(Some(groups))
}

fn parse_variables(s: &str) -> Result<Vec<u8>> {
    if s == "all" {
        return Ok((1..=8).collect());
    }
    s.split(',').map(|v| v.trim().parse::<u8>().context("variable ids are 1..8")).collect()
}

fn parse_on_off(s: &str) -> Result<bool> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => bail!("expected on/off, got {other:?}"),
    }
}

fn print_metrics(rows: &[geomadv::harness::MetricsRow]) {
    println!(
        "{:<6} {:<10} {:>10} {:>8} {:>9} {:>9} {:>8}",
        "method", "region", "mean_iters", "sr(%)", "p_true", "time(s)", "samples"
    );
    for r in rows {
        println!(
            "{:<6} {:<10} {:>10.2} {:>8.2} {:>9.4} {:>9.4} {:>8}",
            r.method, r.region, r.mean_iters, r.success_rate, r.p_true_mean, r.time_mean_s, r.samples
        );
    }
}
