use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use helix_core::data::{generate_synthetic, load_dataset, SplitKind};
use helix_core::heatmap::export_heatmaps;
use helix_core::helix::HelixConfig;
use helix_core::trainer::{
    ablation_csv, evaluate, init_meta, init_pretrain, is_finished, load_checkpoint, resume, run_ablation,
    save_checkpoint, test_seed, AblationRow, Checkpoint, Event, ModelScorer, Stage, TrainConfig,
};
use helix_core::{Error, Result};

#[derive(Parser)]
#[command(name = "helix", version, about = "Few-shot fine-grained classification with symmetric cross-attention")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Settings layered over the config file, in this order.
#[derive(Args)]
struct Overrides {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// qs, sq, asym-sq, asym-qs or sym.
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    /// Number of stacked attention layers; 0 is the plain relation network.
    #[arg(long, global = true)]
    stack: Option<usize>,
    /// conv or fc.
    #[arg(long, global = true)]
    embed: Option<String>,
    /// on or off.
    #[arg(long, global = true)]
    rep: Option<String>,
    /// Evaluation episodes.
    #[arg(long, global = true)]
    episodes: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage one: backbone plus a temporary classifier over base classes.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write (updated after every epoch).
        #[arg(long)]
        out: PathBuf,
        /// Continue from a partial stage-one checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Pause after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Stage two: episodic fine-tuning with cross-attention.
    MetaTrain {
        #[arg(long)]
        data: PathBuf,
        /// Finished stage-one checkpoint.
        #[arg(long, required_unless_present = "resume")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a partial stage-two checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Accuracy with a 95% interval over sampled episodes.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// base, val or novel.
        #[arg(long, default_value = "novel")]
        split: String,
        /// CSV file for the result row.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a list of cross-attention settings.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// CSV file for the results table.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated cells such as `rn,qs,sq,sym,sym/norep,sym/h4/fc/n2`.
        #[arg(long, default_value = "rn,qs,sq,sym,sym/norep")]
        cells: String,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Channel-max feature maps for one support/query pair.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        support: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn effective_config(o: &Overrides) -> Result<TrainConfig> {
    let mut cfg = match &o.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let flags = [
        ("seed", o.seed.map(|v| v.to_string())),
        ("helix.variant", o.variant.clone()),
        ("helix.heads", o.heads.map(|v| v.to_string())),
        ("helix.stack", o.stack.map(|v| v.to_string())),
        ("helix.embed", o.embed.clone()),
        ("helix.rep", o.rep.clone()),
        ("eval.episodes", o.episodes.map(|v| v.to_string())),
    ];
    for kv in &o.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(cfg: &TrainConfig) {
    println!("# effective config");
    for (k, v) in cfg.entries() {
        println!("#   {k} = {v}");
    }
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Pretrain => "pretrain",
        Stage::Meta => "meta-train",
    }
}

fn print_event(prefix: &str, e: &Event) {
    if let Event::Epoch {
        stage,
        epoch,
        loss,
        lr,
        val_acc,
    } = e
    {
        let val = val_acc.map_or(String::new(), |v| format!(" val_acc={v:.4}"));
        println!("{prefix}stage={} epoch={} loss={loss:.6} lr={lr:e}{val}", stage_name(*stage), epoch + 1);
    }
}

/// Trains one epoch at a time, saving after each, so an interrupted run
/// can be resumed from `out`.
fn train_to(mut ckpt: Checkpoint, ds: &helix_core::data::Dataset, out: &Path, stop_after: Option<usize>) -> Result<()> {
    let total = match ckpt.state.stage {
        Stage::Pretrain => ckpt.config.stage1.epochs,
        Stage::Meta => ckpt.config.stage2.epochs,
    };
    let end = stop_after.map_or(total, |s| s.min(total));
    while ckpt.state.epoch < end {
        let next = ckpt.state.epoch + 1;
        ckpt = resume(ckpt, ds, Some(next), &mut |e| print_event("", e))?;
        save_checkpoint(out, &ckpt)?;
    }
    if ckpt.state.epoch >= total {
        // finalizes a stage that had nothing left to run
        ckpt = resume(ckpt, ds, None, &mut |_| {})?;
    }
    save_checkpoint(out, &ckpt)?;
    if let Some((acc, at)) = ckpt.state.best {
        println!("best val_acc={acc:.4} at epoch {at}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn resumed(path: &Path, want: Stage) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.state.stage != want {
        return Err(Error::Config(format!(
            "{} is a {} checkpoint",
            path.display(),
            stage_name(ckpt.state.stage)
        )));
    }
    echo_config(&ckpt.config);
    Ok(ckpt)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli.overrides)?;
    match cli.command {
        Command::GenData { out } => {
            echo_config(&cfg);
            let mut spec = cfg.synth.clone();
            spec.seed = cfg.seed;
            generate_synthetic(&spec, &out)?;
            let (base, val, novel) = spec.genus_split();
            let per = spec.species_per_genus;
            println!(
                "wrote {} base, {} val, {} novel classes to {}",
                base.len() * per,
                val.len() * per,
                novel.len() * per,
                out.display()
            );
        }
        Command::Pretrain {
            data,
            out,
            resume: from,
            stop_after,
        } => {
            let ckpt = match from {
                Some(p) => resumed(&p, Stage::Pretrain)?,
                None => {
                    echo_config(&cfg);
                    let ds = load_dataset(&data, cfg.model.image_size)?;
                    let ck = init_pretrain(&cfg, &ds)?;
                    return train_to(ck, &ds, &out, stop_after);
                }
            };
            let ds = load_dataset(&data, ckpt.config.model.image_size)?;
            train_to(ckpt, &ds, &out, stop_after)?;
        }
        Command::MetaTrain {
            data,
            checkpoint,
            out,
            resume: from,
            stop_after,
        } => {
            let ckpt = match (from, checkpoint) {
                (Some(p), _) => resumed(&p, Stage::Meta)?,
                (None, Some(p)) => {
                    echo_config(&cfg);
                    let pre = load_checkpoint(&p)?;
                    if pre.state.stage != Stage::Pretrain || !is_finished(&pre) {
                        return Err(Error::Config(format!("{} is not a finished pretraining checkpoint", p.display())));
                    }
                    let ds = load_dataset(&data, cfg.model.image_size)?;
                    let ck = init_meta(&cfg, &ds, &pre)?;
                    return train_to(ck, &ds, &out, stop_after);
                }
                (None, None) => unreachable!("clap requires one of them"),
            };
            let ds = load_dataset(&data, ckpt.config.model.image_size)?;
            train_to(ckpt, &ds, &out, stop_after)?;
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            out,
        } => {
            echo_config(&cfg);
            let ckpt = load_checkpoint(&checkpoint)?;
            if ckpt.state.stage != Stage::Meta {
                return Err(Error::Config(format!("{} has no trained relation head", checkpoint.display())));
            }
            let kind: SplitKind = split.parse()?;
            let model = ckpt.config.model;
            let ds = load_dataset(&data, model.image_size)?;
            let scorer = ModelScorer::new(model, ckpt.eval_params(), ckpt.norm);
            let report = evaluate(&scorer, ds.split(kind), &cfg.episode, cfg.eval_episodes, test_seed(cfg.seed))?;
            println!(
                "{} {}-way {}-shot: {:.2}±{:.2} over {} episodes",
                model.helix.label(),
                cfg.episode.way,
                cfg.episode.shot,
                100.0 * report.mean,
                100.0 * report.ci95,
                report.episodes
            );
            if let Some(out) = out {
                let row = AblationRow {
                    cell: model.helix,
                    seed: cfg.seed,
                    report,
                };
                write_file(&out, &ablation_csv(&[row]))?;
                println!("wrote {}", out.display());
            }
        }
        Command::Ablate {
            data,
            out,
            cells,
            seeds,
        } => {
            echo_config(&cfg);
            let cells = cells
                .split(',')
                .map(|c| HelixConfig::from_label(c, cfg.model.helix))
                .collect::<Result<Vec<_>>>()?;
            let seeds = match seeds {
                Some(s) => s
                    .split(',')
                    .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("bad seed {v:?}"))))
                    .collect::<Result<Vec<u64>>>()?,
                None => vec![cfg.seed],
            };
            let ds = load_dataset(&data, cfg.model.image_size)?;
            let rows = run_ablation(&cfg, &cells, &seeds, &ds, &mut |cell, seed, e| {
                print_event(&format!("cell={} seed={seed} ", cell.label()), e)
            })?;
            for r in &rows {
                println!(
                    "cell={} seed={} acc={:.2}±{:.2}",
                    r.cell.label(),
                    r.seed,
                    100.0 * r.report.mean,
                    100.0 * r.report.ci95
                );
            }
            write_file(&out, &ablation_csv(&rows))?;
            println!("wrote {}", out.display());
        }
        Command::Heatmap {
            checkpoint,
            support,
            query,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            echo_config(&ckpt.config);
            for p in export_heatmaps(&ckpt, &support, &query, &out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("HELIX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("HELIX_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
