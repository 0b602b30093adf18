use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use digpt::ablation::{run_ablation, write_csv, AblationAxis, AblationOptions};
use digpt::checks::{run_all, CheckSpec};
use digpt::config::{help_table, Config, Provenance};
use digpt::data::load_dataset;
use digpt::eval::{finetune, linear_probe, FinetuneConfig, ProbeConfig};
use digpt::model::DiGptModel;
use digpt::plot::plot_metrics;
use digpt::teacher::{extract_cache, TeacherKind};
use digpt::train::{
    apply_preset, checkpoint_load, checkpoint_save, load_teacher, run_pretraining, AdamWConfig, TrainConfig, TrainState,
};

#[derive(Parser)]
#[command(
    name = "digpt",
    version,
    about = "Cluster-level autoregressive pretraining with semantic targets"
)]
#[command(after_long_help = help_table())]
struct Cli {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value`, applied after the file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Named recipe (in1k, in21k) applied before the file.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder; writes metrics, config snapshot and checkpoints to train.out_dir.
    Pretrain,
    /// Linear probe of a checkpoint's frozen encoder.
    Probe(EvalArgs),
    /// Fine-tune a checkpoint's encoder (or a fresh one) with a linear head.
    Finetune(FinetuneArgs),
    /// Sweep one ablation axis and write a CSV table.
    Ablate(AblateArgs),
    /// Run the attention-mask property suites.
    CheckMasks(CheckArgs),
    /// Precompute teacher tokens for every image into a feature cache.
    ExtractTeacher(ExtractArgs),
    /// Render loss and lr curves from a metrics log to SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write the result as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Start from this checkpoint's encoder; a fresh encoder when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Save the tuned encoder as a checkpoint (usable as a frozen teacher).
    #[arg(long)]
    save: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    axis: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long, default_value = "ablation.csv")]
    out: PathBuf,
    #[arg(long)]
    skip_probe: bool,
}

#[derive(Args)]
struct CheckArgs {
    /// Number of clusters (default: draw from 2, 3, 4).
    #[arg(long)]
    n: Option<usize>,
    /// Patches per cluster, a perfect square (default: draw from 1, 4, 9).
    #[arg(long)]
    patches: Option<usize>,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExtractArgs {
    /// Teacher checkpoint; defaults to teacher.path.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the hash of `config.txt` next to the metrics log.
    #[arg(long)]
    config_hash: Option<String>,
}

fn load_config(cli: &Cli) -> digpt::Result<Config> {
    let mut cfg = Config::defaults();
    if let Some(p) = &cli.preset {
        apply_preset(&mut cfg, p)?;
    }
    if let Some(path) = &cli.config {
        cfg.apply_text(
            &digpt::error::at_path(path, std::fs::read_to_string(path))?,
            Provenance::File,
        )?;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> digpt::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(p) = path {
        std::fs::write(p, text + "\n")?;
    }
    Ok(())
}

fn run(cli: &Cli) -> digpt::Result<bool> {
    match &cli.command {
        Command::Pretrain => {
            let cfg = load_config(cli)?;
            let tc = TrainConfig::from_config(&cfg)?;
            let outcome = run_pretraining(&tc)?;
            println!(
                "pretrained {} steps; final checkpoint {}; metrics {}",
                outcome.steps,
                outcome.final_checkpoint.display(),
                outcome.metrics_path.display()
            );
            Ok(true)
        }
        Command::Probe(a) => {
            let cfg = load_config(cli)?;
            let ck = checkpoint_load(&a.checkpoint)?;
            let model = &ck.state.model;
            let ds = load_dataset(cfg.string("data.root"), model.config.image_size)?;
            let probe = ProbeConfig::from_config(&cfg)?;
            let r = linear_probe(
                &model.encoder,
                &ds,
                model.config.patch_size,
                &probe,
                cfg.string("data.root"),
                &ck.config_hash,
            )?;
            write_json(a.out.as_deref(), &r)?;
            Ok(true)
        }
        Command::Finetune(a) => {
            let cfg = load_config(cli)?;
            let (state, hash) = match &a.checkpoint {
                Some(p) => {
                    let ck = checkpoint_load(p)?;
                    (ck.state, ck.config_hash)
                }
                None => {
                    let tc = TrainConfig::from_config(&cfg)?;
                    let seed = cfg.int("seed")? as u64;
                    let model = DiGptModel::init(&tc.model, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))?;
                    (TrainState::new(model, tc.adam, seed), cfg.hash())
                }
            };
            let mc = state.model.config.clone();
            let ds = load_dataset(cfg.string("data.root"), mc.image_size)?;
            let ft = FinetuneConfig::from_config(&cfg)?;
            let (r, tuned) = finetune(
                &state.model.encoder,
                &ds,
                mc.patch_size,
                &ft,
                cfg.string("data.root"),
                &hash,
            )?;
            if let Some(save) = &a.save {
                let mut model = state.model;
                model.encoder = tuned.encoder;
                let out = TrainState::new(model, AdamWConfig::default(), ft.seed);
                checkpoint_save(&out, &cfg.render(), &cfg.hash(), save)?;
            }
            write_json(a.out.as_deref(), &r)?;
            Ok(true)
        }
        Command::Ablate(a) => {
            let cfg = load_config(cli)?;
            let axis: AblationAxis = a.axis.parse()?;
            let rows = run_ablation(
                axis,
                &a.values,
                &cfg,
                &AblationOptions {
                    skip_probe: a.skip_probe,
                },
            )?;
            write_csv(&rows, &a.out)?;
            for r in &rows {
                println!("{}", r.csv_line());
            }
            println!("wrote {} rows to {}", rows.len(), a.out.display());
            Ok(true)
        }
        Command::CheckMasks(a) => {
            let mut spec = CheckSpec {
                cases: a.cases,
                seed: a.seed,
                ..CheckSpec::default()
            };
            if let Some(n) = a.n {
                spec.clusters = vec![n];
            }
            if let Some(p) = a.patches {
                spec.patches_per_cluster = vec![p];
            }
            let reports = run_all(&spec)?;
            for r in &reports {
                println!("{r}");
            }
            Ok(reports.iter().all(|r| r.passed))
        }
        Command::ExtractTeacher(a) => {
            let cfg = load_config(cli)?;
            let tc = TrainConfig::from_config(&cfg)?;
            let path = match &a.checkpoint {
                Some(p) => p.display().to_string(),
                None => cfg.string("teacher.path").to_string(),
            };
            let teacher = if path.is_empty() {
                digpt::teacher::TeacherProvider::Pixel
            } else {
                load_teacher(TeacherKind::Frozen, &path)?
            };
            let ds = load_dataset(&tc.data_root, tc.model.image_size)?;
            let n = extract_cache(&teacher, &[&ds.train, &ds.test], &tc.layout()?, &a.out)?;
            println!("wrote {n} {} token grids to {}", teacher.kind(), a.out.display());
            Ok(true)
        }
        Command::Plot(a) => {
            let hash = match &a.config_hash {
                Some(h) => h.clone(),
                None => {
                    let snapshot = a.metrics.with_file_name("config.txt");
                    if snapshot.exists() {
                        let mut c = Config::defaults();
                        c.apply_text(&std::fs::read_to_string(&snapshot)?, Provenance::File)?;
                        c.hash()
                    } else {
                        String::new()
                    }
                }
            };
            plot_metrics(&a.metrics, &a.out, &hash)?;
            println!("wrote {}", a.out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
