use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use commonloc_core::autodiff::Checkpoint;
use commonloc_core::data::{build_manifest, EpisodeParams, Split};
use commonloc_core::harness::{ablate, evaluate, save_outcome, train, Corpus, RunConfig, Sweep};
use commonloc_core::Error;

#[derive(Parser)]
#[command(name = "commonloc", version, about = "Few-shot common action localization on a synthetic video corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write final.ckpt, best.ckpt and train_log.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint and write the metrics report.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Overrides the evaluation episode seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Include the decoder's fused-attention maps in the report.
        #[arg(long)]
        dump_attention: bool,
    },
    /// Run an ablation sweep, writing one report per cell and summary.json.
    Ablate {
        #[arg(long)]
        sweep: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Trained model reused by evaluation-only sweeps (fig4, table4).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a corpus manifest, optionally rendering every episode's videos.
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Episodes per split: train, val, test.
        #[arg(long, value_delimiter = ',', default_value = "200,50,200")]
        episodes: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for rendered videos (`<split>_<index>_{support<k>,query}.vid`).
        #[arg(long)]
        videos: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let outcome = train(&cfg, |e| {
                let val = e.val_frame_map.map_or("-".to_string(), |v| format!("{v:.4}"));
                eprintln!("epoch {:>3}  loss {:.4}  val frame-mAP {val}", e.epoch, e.mean_loss);
            })?;
            save_outcome(&outcome, &out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            eprintln!("wrote {} ({:.0}s)", out.display(), outcome.log.wall_time_s);
        }
        Command::Eval {
            config,
            checkpoint,
            report,
            seed,
            dump_attention,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            let ckpt = Checkpoint::load(&checkpoint)?;
            let r = evaluate(&cfg, &ckpt.params, dump_attention)?;
            write_json(&report, &r)?;
            println!(
                "frame-mAP {:.4}  video-mAP {:.4}{}",
                r.aggregates.frame_map,
                r.aggregates.video_map,
                r.aggregates.miou.map_or(String::new(), |m| format!("  mIoU {m:.4}"))
            );
        }
        Command::Ablate {
            sweep,
            config,
            out,
            checkpoint,
            seed,
        } => {
            let sweep: Sweep = sweep.parse()?;
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ckpt = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let result = ablate(&cfg, sweep, ckpt.as_ref().map(|c| &c.params), |cell| eprintln!("{cell}"))?;
            std::fs::create_dir_all(&out)?;
            for (i, cell) in result.cells.iter().enumerate() {
                write_json(&out.join(format!("cell_{i:02}.json")), &cell.report)?;
            }
            write_json(&out.join("summary.json"), &result.summary)?;
            print!("{}", result.summary_table());
        }
        Command::GenCorpus {
            config,
            manifest,
            episodes,
            seed,
            videos,
        } => {
            let cfg = load_config(config.as_deref())?;
            let [tr, va, te] = <[usize; 3]>::try_from(episodes)
                .map_err(|_| Error::Config("--episodes takes three counts: train,val,test".into()))?;
            let base = seed.unwrap_or(cfg.seed);
            let params = EpisodeParams {
                k_shot: cfg.episode.k_shot,
                support_len: cfg.data.support_len,
                train_query_len: None,
            };
            let m = build_manifest(&cfg.data, &params, base, [tr, va, te])?;
            write_json(&manifest, &m)?;
            if let Some(dir) = videos {
                std::fs::create_dir_all(&dir)?;
                let corpus = Corpus::new(&cfg.data)?;
                let mut run_cfg = cfg.clone();
                run_cfg.eval.seed = base;
                for e in &m.episodes {
                    let ep = corpus.eval_episode(&run_cfg, e.split, e.index)?;
                    let tag = match e.split {
                        Split::Train => "train",
                        Split::Val => "val",
                        Split::Test => "test",
                    };
                    for (k, s) in ep.supports.iter().enumerate() {
                        s.video.save(dir.join(format!("{tag}_{:05}_support{k}.vid", e.index)))?;
                    }
                    ep.query.video.save(dir.join(format!("{tag}_{:05}_query.vid", e.index)))?;
                }
            }
            println!("{} episodes -> {}", m.episodes.len(), manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::NonFinite(_) => 3,
                _ => 1,
            })
        }
    }
}
