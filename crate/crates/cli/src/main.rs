use std::path::{Path, PathBuf};
use std::process::ExitCode;

use caim::pipeline::{self, MetricsFile};
use caim::trainer::History;
use caim::{Result, RunConfig};
use clap::{Parser, Subcommand};

/// Conditional adaptive instance modulation: desk-scale cross-modality
/// matching pipeline.
///
/// Any configuration value can be overridden with a dotted flag such as
/// `--train.margin=2.0` or `--dataset.identities=60`; `CAIM_SEED` replaces
/// the global seed.
#[derive(Parser, Debug)]
#[command(name = "caim", version)]
struct Cli {
    /// JSON run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-modality dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backbone on source images and freeze it.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Insert CAIM blocks into a pretrained backbone and train them.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the eval split and write metrics.json and scores.csv.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop inserted blocks and evaluate the frozen backbone alone.
        #[arg(long)]
        baseline: bool,
    },
    /// Train and evaluate every block count plus the unconditional variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Splits `--section.key=value` overrides from the arguments clap sees.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for (i, a) in args.into_iter().enumerate() {
        let dotted = a.strip_prefix("--").and_then(|s| s.split_once('=')).is_some_and(|(k, _)| k.contains('.'));
        if i > 0 && dotted {
            overrides.push(a[2..].to_string());
        } else {
            rest.push(a);
        }
    }
    (rest, overrides)
}

fn print_history(label: &str, h: &History) {
    for r in &h.epochs {
        match r.holdout_eer {
            Some(e) => println!("{label} epoch {:>3}  loss {:.5}  holdout EER {:.4}", r.epoch, r.mean_loss, e),
            None => println!("{label} epoch {:>3}  loss {:.5}", r.epoch, r.mean_loss),
        }
    }
}

fn print_metrics(m: &MetricsFile) {
    println!("cross-modal  AUC {:.4}  EER {:.4}  Rank-1 {:.4}", m.cross.auc, m.cross.eer, m.cross.rank1);
    for (far, vr) in &m.cross.vr_at_far {
        println!("  VR@FAR={far}: {vr:.4}");
    }
    if let Some(s) = &m.source {
        println!("source-only  AUC {:.4}  EER {:.4}  Rank-1 {:.4}", s.auc, s.eer, s.rank1);
    }
    if let Some(f) = &m.folds {
        println!(
            "{} folds  EER {:.4} ± {:.4}  Rank-1 {:.4} ± {:.4}",
            f.count, f.eer.mean, f.eer.std, f.rank1.mean, f.rank1.std
        );
    }
}

fn run(cli: Cli, overrides: &[String]) -> Result<()> {
    let cfg = RunConfig::assemble(cli.config.as_deref(), overrides)?;
    match cli.command {
        Command::Synth { out } => {
            let data = pipeline::cmd_synth(&cfg, &out)?;
            print!("{}", pipeline::dataset_summary(&data));
            println!("wrote {}", out.display());
        }
        Command::Pretrain { data, out } => {
            let (_, h) = pipeline::cmd_pretrain(&cfg, &data, &out)?;
            print_history("pretrain", &h);
            println!("wrote {}", out.display());
        }
        Command::Train { data, backbone, out } => {
            let (_, h) = pipeline::cmd_train(&cfg, &data, &backbone, &out)?;
            print_history("train", &h);
            println!("wrote {}", out.display());
        }
        Command::Eval { data, checkpoint, out, baseline } => {
            let m = pipeline::cmd_eval(&cfg, &data, &checkpoint, &out, baseline)?;
            print_metrics(&m);
        }
        Command::Ablate { data, backbone, out } => {
            let rows = pipeline::cmd_ablate(&cfg, &data, &backbone, &out)?;
            for r in &rows {
                println!("{:<18} EER {:.4}  Rank-1 {:.4}  source preserved: {:<5}  {}", r.variant, r.report.eer, r.report.rank1, r.source_preserved, r.status());
            }
            println!("wrote {}", Path::new(&out).join("ablation.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
