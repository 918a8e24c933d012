use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;
use morel_core::agent::{evaluate, load_agent, train, write_eval, Algo, EvalSummary, RunLayout};
use morel_core::baselines::{build_variant, pretrain_autoencoder, summary_rows, write_summary, Variant};
use morel_core::checkpoint::{file_sha256, Checkpoint};
use morel_core::env::{collect_random, Dataset, EnvConfig};
use morel_core::segtrain::{load_segnet, pretrain, PretrainConfig, PretrainLayout, SEGNET_KIND};
use morel_core::viz::{evaluate_iou, export_episode, ActionSource, DEFAULT_IOU_THRESHOLD};
use morel_core::{Error, Result, RunConfig, SegNet};

mod plot;

#[derive(Parser)]
#[command(name = "morel", version, about = "Motion segmentation pretraining and actor-critic training on sprite world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record random-policy frames into a dataset file.
    Collect {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the segmentation network (or the autoencoder baseline).
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        autoencoder: bool,
        /// Total steps; the warm-up is rescaled to 40% of it.
        #[arg(long)]
        steps: Option<u64>,
        /// Full-length schedule (250k steps, 100k warm-up).
        #[arg(long = "paper-scale", conflicts_with = "steps")]
        full_scale: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one variant for one or more seeds.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        algo: Option<Algo>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seg_checkpoint: Option<PathBuf>,
        /// Comma-separated, e.g. `1,2,3`.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        total_env_steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fixed-seed evaluation of an agent or segmentation checkpoint.
    Eval(EvalArgs),
    /// Export frame, overlay and flow images for one episode.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Act with the agent's policy instead of uniformly at random.
        #[arg(long)]
        policy: bool,
    },
    /// Draw learning curves from one or more summary CSVs.
    Plot {
        #[arg(long = "summary", required = true, num_args = 1..)]
        summaries: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Frames consumed by pretraining, added to pretrained variants.
        #[arg(long, default_value_t = 10_000)]
        pretrain_frames: u64,
        #[arg(long, default_value = "sprite world")]
        title: String,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    iou_frames: usize,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    threshold: f64,
    /// Per-episode CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Collect {
            config,
            out,
            frames,
            seed,
        } => {
            let cfg = config.load()?;
            let n = frames.unwrap_or(cfg.dataset.frames);
            let header = collect_random(&cfg.env, seed.unwrap_or(cfg.seed), n, &out)?;
            println!(
                "frames {} pairs {} sha256 {}",
                header.frame_count,
                header.frame_count.saturating_sub(1),
                file_sha256(&out)?
            );
            Ok(())
        }
        Command::Pretrain {
            dataset,
            config,
            out,
            autoencoder,
            steps,
            full_scale,
            seed,
        } => {
            let mut cfg = config.load()?;
            if full_scale {
                cfg.pretrain = PretrainConfig {
                    seed: cfg.pretrain.seed,
                    k: cfg.pretrain.k,
                    reg_normalization: cfg.pretrain.reg_normalization,
                    ..PretrainConfig::full_scale()
                };
            }
            if let Some(s) = steps {
                cfg.pretrain = cfg.pretrain.clone().with_steps(s);
            }
            if let Some(s) = seed {
                cfg.pretrain.seed = s;
            }
            cfg.validate()?;
            let p = &cfg.pretrain;
            println!(
                "pretrain{}: lr={} batch={} steps={} warmup={}",
                if autoencoder { " (autoencoder)" } else { "" },
                p.learning_rate,
                p.batch_size,
                p.total_steps,
                p.warmup_steps
            );
            fresh_dir(&out)?;
            snapshot(&out, &cfg)?;
            let mut ds = Dataset::open(&dataset)?;
            let (history, ck) = if autoencoder {
                let o = pretrain_autoencoder(&mut ds, &cfg.pretrain, Some(&out))?;
                (o.history, o.checkpoint)
            } else {
                let o = pretrain(&mut ds, &cfg.pretrain, Some(&out))?;
                (o.history, o.checkpoint)
            };
            match history.last() {
                Some(r) => println!(
                    "step {} loss_total {:.6} loss_reconstruct {:.6} loss_reg {:.6}",
                    r.step, r.loss_total, r.loss_reconstruct, r.loss_reg
                ),
                None => println!("no steps run"),
            }
            println!(
                "checkpoint {} ({} tensors)",
                PretrainLayout::new(&out).final_checkpoint().display(),
                ck.parameters().count()
            );
            Ok(())
        }
        Command::Train {
            config,
            algo,
            variant,
            seg_checkpoint,
            seeds,
            total_env_steps,
            out,
        } => {
            let mut cfg = config.load()?;
            if let Some(a) = algo {
                cfg.rl.algo = a;
            }
            if let Some(v) = variant {
                cfg.variant.name = v;
            }
            if let Some(p) = seg_checkpoint {
                cfg.variant.seg_checkpoint = Some(p);
            }
            if let Some(n) = total_env_steps {
                cfg.rl.total_env_steps = n;
            }
            cfg.validate()?;
            run_train(&cfg, &seeds, &out)
        }
        Command::Eval(args) => run_eval(args),
        Command::Viz {
            checkpoint,
            config,
            out,
            steps,
            seed,
            policy,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (net, agent, env) = model_from_checkpoint(&ck, &config)?;
            let source = match (&agent, policy) {
                (Some(a), true) => ActionSource::Policy(a),
                (None, true) => return Err(Error::Argument("--policy needs an agent checkpoint".into())),
                _ => ActionSource::Random,
            };
            fresh_dir(&out)?;
            let entries = export_episode(&net, &env, source, seed, steps, &out)?;
            let mean = entries.first().map_or(0.0, |e| e.mean_iou);
            println!("wrote {} images to {} (mean iou {:.3})", entries.len(), out.display(), mean);
            Ok(())
        }
        Command::Plot {
            summaries,
            out,
            pretrain_frames,
            title,
        } => {
            let n = plot::plot_summaries(&summaries, &out, pretrain_frames, &title)?;
            println!("plotted {n} variants to {}", out.display());
            Ok(())
        }
    }
}

fn run_train(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<()> {
    let variant = cfg.variant.name;
    let ck = match (&cfg.variant.seg_checkpoint, variant.required_checkpoint()) {
        (Some(p), Some(_)) => Some(Checkpoint::load(p)?),
        (Some(p), None) => {
            warn!("variant {variant} ignores --seg-checkpoint {}", p.display());
            None
        }
        (None, _) => None,
    };
    let segnet = cfg.pretrain.segnet_config();
    // every seed is built before any environment step so configuration
    // errors surface first
    let built = seeds
        .iter()
        .map(|&s| build_variant(variant, s, ck.as_ref(), segnet))
        .collect::<Result<Vec<_>>>()?;
    fresh_dir(out)?;
    let mut rows = Vec::new();
    for (b, &seed) in built.into_iter().zip(seeds) {
        let dir = out.join(format!("seed_{seed}"));
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        run_cfg.out_dir = Some(dir.clone());
        fresh_dir(&dir)?;
        snapshot(&dir, &run_cfg)?;
        let o = train(b.agent, &cfg.train_config(seed), b.joint_seg, Some(&dir))?;
        let last = o.history.last();
        println!(
            "{variant} seed {seed}: updates {} env_steps {} mean_return {} eval {}",
            o.history.len(),
            last.map_or(0, |r| r.env_steps),
            last.and_then(|r| r.mean_return).map_or("n/a".to_string(), |m| format!("{m:.3}")),
            fmt_eval(o.evals.last())
        );
        rows.extend(summary_rows(variant, seed, &o.history));
    }
    write_summary(&out.join("summary.csv"), &rows)
}

fn fmt_eval(e: Option<&EvalSummary>) -> String {
    e.map_or("n/a".into(), |e| format!("{:.3}±{:.3}", e.mean_return, e.std_return))
}

fn run_eval(args: EvalArgs) -> Result<()> {
    if args.episodes == Some(0) {
        return Err(Error::Argument("--episodes must be at least 1".into()));
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (net, agent, env) = model_from_checkpoint(&ck, &args.config)?;
    let defaults = args.config.load()?;
    if let Some(agent) = &agent {
        let episodes = args.episodes.unwrap_or(defaults.rl.eval_episodes);
        let seed = args.seed.unwrap_or(defaults.rl.eval_seed);
        let rows = evaluate(agent, &env, episodes, seed)?;
        let s = EvalSummary::from_rows(ck.step, 0, &rows);
        println!("return mean {:.3} sd {:.3} over {} episodes", s.mean_return, s.std_return, rows.len());
        if let Some(p) = &args.out {
            write_eval(p, &rows)?;
        }
    }
    let report = evaluate_iou(&net, &env, args.iou_frames, args.seed.unwrap_or(defaults.rl.eval_seed), args.threshold)?;
    println!("iou mean {:.3} over {} frames", report.mean, report.rows.len());
    Ok(())
}

/// Segmentation network to render plus the agent it came from, if any,
/// and the environment to play.
fn model_from_checkpoint(ck: &Checkpoint, config: &ConfigArg) -> Result<(SegNet<f32>, Option<morel_core::ActorCritic<f32>>, EnvConfig)> {
    if ck.kind == SEGNET_KIND {
        let env = config.load()?.env;
        return Ok((load_segnet(ck)?, None, env));
    }
    let (agent, meta) = load_agent(ck)?;
    let env = match &config.config {
        Some(_) => config.load()?.env,
        None => meta.train.env.clone(),
    };
    let net = agent
        .segnet()
        .cloned()
        .ok_or_else(|| Error::Argument("single-path agents have no segmentation network to render".into()))?;
    Ok((net, Some(agent), env))
}

/// Refuses to write into a directory that already holds files.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
        if entries.next().is_some() {
            return Err(Error::Argument(format!("{} already exists and is not empty", dir.display())));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let p = RunLayout::new(dir).config();
    std::fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(format!("writing {}", p.display()), e))
}
