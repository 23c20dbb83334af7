use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agnet::checkpoint::Checkpoint;
use agnet::checks::{check_blocks, check_full, check_primitives, CheckOutcome};
use agnet::config::RunConfig;
use agnet::data::{load_manifest, load_samples, split_811, write_synthetic, SyntheticSpec};
use agnet::marcu::Preset;
use agnet::ranking::{ecr_value_and_grad, encode_ranking_label, make_interval_points, LossKind};
use agnet::train::{evaluate_checkpoint, train, EvalReport, Split, Splits};
use agnet::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "agnet", version, about = "Ranking-loss age estimation with attribute guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Ops,
    Block,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ecr,
    L1,
    Ce,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum)]
        scope: Scope,
        /// Random cases per primitive (ops and block scopes).
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Parameter entries sampled per tensor (full scope).
        #[arg(long, default_value_t = 4)]
        elements: usize,
    },
    /// Render face-proxy images and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 16)]
        a_min: i32,
        #[arg(long, default_value_t = 77)]
        a_max: i32,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Train from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        #[arg(long)]
        no_attribute_guidance: bool,
        /// Directory for metrics.jsonl and best.agn.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the data source recorded in the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Print the ranking label and thresholds of an age.
    Encode { age: i32, a_min: i32, a_max: i32 },
    /// Print the single-sample ranking loss and its derivative.
    Loss {
        #[arg(allow_negative_numbers = true)]
        h: f64,
        age: i32,
        a_min: i32,
        a_max: i32,
    },
}

enum Failure {
    Check,
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn print_check(o: &CheckOutcome) {
    let status = if o.passed() { "PASS" } else { "FAIL" };
    println!(
        "{status} {:<24} runs={:<4} checked={:<5} skipped={:<3} max_rel_err={:.6e} tol={:.0e}",
        o.name, o.runs, o.checked, o.skipped, o.max_rel_err, o.tolerance
    );
    if let Some(f) = &o.failure {
        println!("     {f}");
    }
}

fn gradcheck_cmd(scope: Scope, seeds: u64, elements: usize) -> Result<(), Failure> {
    let outcomes = match scope {
        Scope::Ops => check_primitives(0..seeds)?,
        Scope::Block => check_blocks(0..seeds)?,
        Scope::Full => vec![check_full(0, elements)?],
    };
    outcomes.iter().for_each(print_check);
    if outcomes.iter().all(CheckOutcome::passed) {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn fmt_list<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    format!("[{}]", items.iter().map(f).collect::<Vec<_>>().join(","))
}

fn print_report(split: &str, r: &EvalReport) {
    println!("split {split} samples {} mae {:.6}", r.count, r.mae);
    for g in &r.per_group {
        println!("  group {} (from age {}) samples {} mae {:.6}", g.group, g.from_age, g.count, g.mae);
    }
    println!("  gender_accuracy {:.6}", r.gender_accuracy);
    println!("  age_group_accuracy {:.6}", r.age_group_accuracy);
    if let Some(e) = r.ethnicity_accuracy {
        println!("  ethnicity_accuracy {e:.6}");
    }
}

fn train_cmd(
    config: &Path,
    seed: Option<u64>,
    preset: Option<PresetArg>,
    loss: Option<LossArg>,
    no_ag: bool,
    out: &Path,
) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(p) = preset {
        cfg.train.preset = match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
        };
    }
    if let Some(l) = loss {
        cfg.train.loss = match l {
            LossArg::Ecr => LossKind::Ecr,
            LossArg::L1 => LossKind::L1,
            LossArg::Ce => LossKind::MulticlassCe,
        };
    }
    if no_ag {
        cfg.train.attribute_guidance = false;
    }
    cfg.validate()?;
    let splits = Splits::from_config(&cfg)?;
    let outcome = train(&cfg, &splits, Some(out))?;
    for r in &outcome.log {
        println!(
            "epoch {:>4} train_loss {:.6} val_mae {:.6}{}",
            r.epoch,
            r.train_loss,
            r.val_mae,
            if r.retained { " retained" } else { "" }
        );
    }
    println!(
        "best epoch {} val_mae {:.6} -> {}",
        outcome.best.meta.epoch,
        outcome.best.meta.best_val_mae,
        out.join("best.agn").display()
    );
    if !splits.test.is_empty() {
        let schema = cfg.schema.resolve()?;
        print_report("test", &evaluate_checkpoint(&outcome.best, &splits.test, &schema)?);
    }
    Ok(())
}

fn eval_cmd(checkpoint: &Path, manifest: Option<&Path>, split: SplitArg) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = &ckpt.meta.config;
    let schema = ckpt.meta.model.schema.clone();
    let splits = match manifest {
        Some(path) => {
            let m = load_manifest(path, &schema)?;
            for r in &m.rejected {
                eprintln!("{}:{}: rejected: {}", path.display(), r.line, r.reason);
            }
            if !m.rejected.is_empty() {
                return Err(Failure::Usage(format!("{} manifest rows rejected", m.rejected.len())));
            }
            if let SplitArg::All = split {
                Splits {
                    train: load_samples(&m.entries)?,
                    ..Splits::default()
                }
            } else {
                let (a, b, c) = split_811(&m.entries, cfg.split_seed())?;
                Splits {
                    train: load_samples(&a)?,
                    val: load_samples(&b)?,
                    test: load_samples(&c)?,
                }
            }
        }
        None => {
            let mut s = Splits::from_config(cfg)?;
            if let SplitArg::All = split {
                s.train.append(&mut s.val);
                s.train.append(&mut s.test);
            }
            s
        }
    };
    let (name, which) = match split {
        SplitArg::Train => ("train", Split::Train),
        SplitArg::Val => ("val", Split::Val),
        SplitArg::Test => ("test", Split::Test),
        SplitArg::All => ("all", Split::Train),
    };
    let report = evaluate_checkpoint(&ckpt, splits.get(which), &schema)?;
    print_report(name, &report);
    println!(
        "recorded best val_mae {:.6} (epoch {})",
        ckpt.meta.best_val_mae, ckpt.meta.epoch
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gradcheck { scope, seeds, elements } => gradcheck_cmd(scope, seeds, elements),
        Command::Synth {
            out,
            count,
            seed,
            resolution,
            a_min,
            a_max,
            noise,
        } => {
            let spec = SyntheticSpec {
                resolution,
                a_min,
                a_max,
                noise_sigma: noise,
                seed,
                train: count,
                val: 0,
                test: 0,
            };
            let manifest = write_synthetic(&spec, &out)?;
            println!("wrote {count} images and {}", manifest.display());
            Ok(())
        }
        Command::Train {
            config,
            seed,
            preset,
            loss,
            no_attribute_guidance,
            out,
        } => train_cmd(&config, seed, preset, loss, no_attribute_guidance, &out),
        Command::Eval {
            checkpoint,
            manifest,
            split,
        } => eval_cmd(&checkpoint, manifest.as_deref(), split),
        Command::Encode { age, a_min, a_max } => {
            let points = make_interval_points(a_min, a_max)?;
            let label = encode_ranking_label(age, &points)?;
            println!("label {}", fmt_list(&label.bits, |b| b.to_string()));
            println!("b {}", fmt_list(points.thresholds(), |b| format!("{b:.6}")));
            Ok(())
        }
        Command::Loss { h, age, a_min, a_max } => {
            let points = make_interval_points(a_min, a_max)?;
            let label = encode_ranking_label(age, &points)?;
            let (value, grad) = ecr_value_and_grad(h, &label, &points)?;
            println!("loss {value:.6}");
            println!("dloss_dh {grad:.6}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
