//! `kagprompt`: train, evaluate and inspect the few-shot anomaly detector on
//! the synthetic toy task.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kag_core::harness::{self, train::initial_checkpoint, Checkpoint, Experiment, RunConfig, SweepParam};
use kag_core::synth;

#[derive(Parser, Debug)]
#[command(name = "kagprompt", version, about = "Few-shot anomaly detection with kernel-aware graph prompts")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for data, encoder, text stubs and initialisation.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for checkpoints, reports and images.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Per-key config overrides; each wins over the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true, value_name = "N")]
    epochs: Option<String>,
    #[arg(long, global = true)]
    lr: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    batch_size: Option<String>,
    /// Graph message-passing rounds.
    #[arg(long = "T", global = true, value_name = "N")]
    t: Option<String>,
    #[arg(long, global = true)]
    gamma: Option<String>,
    #[arg(long, global = true, value_name = "K")]
    top_k: Option<String>,
    #[arg(long, global = true)]
    lambda1: Option<String>,
    #[arg(long, global = true)]
    lambda2: Option<String>,
    /// Comma-separated shot counts.
    #[arg(long, global = true)]
    shots: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    n_train: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    n_test: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    layers: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    c_enc: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    c_prime: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    c_cls: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    grid: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    image: Option<String>,
    #[arg(long, global = true, value_name = "BOOL")]
    graph_enabled: Option<String>,
    #[arg(long, global = true, value_name = "BOOL")]
    kernel_enabled: Option<String>,
}

impl Overrides {
    fn pairs(&self, seed: Option<u64>) -> Vec<(String, String)> {
        let fields = [
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("T", &self.t),
            ("gamma", &self.gamma),
            ("top_k", &self.top_k),
            ("lambda1", &self.lambda1),
            ("lambda2", &self.lambda2),
            ("shots", &self.shots),
            ("n_train", &self.n_train),
            ("n_test", &self.n_test),
            ("layers", &self.layers),
            ("c_enc", &self.c_enc),
            ("c_prime", &self.c_prime),
            ("c_cls", &self.c_cls),
            ("grid", &self.grid),
            ("image", &self.image),
            ("graph_enabled", &self.graph_enabled),
            ("kernel_enabled", &self.kernel_enabled),
        ];
        let mut out: Vec<(String, String)> = seed.map(|s| ("seed".to_string(), s.to_string())).into_iter().collect();
        out.extend(fields.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))));
        out
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the graph head and adapter; writes `checkpoint.kagp` and `train_loss.csv`.
    Train,
    /// Evaluate a checkpoint for every configured shot count; writes `metrics.csv`.
    Eval {
        /// Defaults to `<out-dir>/checkpoint.kagp`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate once per value of one parameter; writes `sweep_<param>.csv`.
    Sweep {
        /// One of T, top_k, gamma, lr, epochs, lambda1, lambda2.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Write fused anomaly heatmaps of test images as PGM files.
    Render {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Support images in the memory bank; defaults to the smallest configured shot count.
        #[arg(long)]
        shot: Option<usize>,
        /// Number of test images to render.
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Write every synthetic image and mask as PGM files.
    DumpData,
    /// Compare autodiff gradients of the full pipeline against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Sampled coordinates per tensor.
        #[arg(long, default_value_t = 4)]
        per_tensor: usize,
        /// Graph rounds inside the checked pipeline.
        #[arg(long, default_value_t = 2)]
        rounds: usize,
    },
}

fn checkpoint_path(out_dir: &Path, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| out_dir.join("checkpoint.kagp"))
}

fn write(path: &Path, text: &str) -> kag_core::Result<()> {
    std::fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> kag_core::Result<bool> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides.pairs(cli.seed))?;
    let out = &cli.out_dir;
    std::fs::create_dir_all(out)?;
    match &cli.command {
        Command::Train => {
            let (ckpt, losses) = harness::train(&cfg)?;
            let mut log = String::from("epoch,loss\n");
            for (i, l) in losses.iter().enumerate() {
                log.push_str(&format!("{},{l:.6}\n", i + 1));
                println!("epoch {:>3}  loss {l:.6}", i + 1);
            }
            let path = out.join("checkpoint.kagp");
            ckpt.save(&path)?;
            println!("wrote {}", path.display());
            write(&out.join("train_loss.csv"), &log)?;
        }
        Command::Eval { checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint_path(out, checkpoint))?;
            let report = harness::evaluate(&ckpt, &cfg)?;
            print!("{}", report.to_csv());
            write(&out.join("metrics.csv"), &report.to_csv())?;
        }
        Command::Sweep { param, values } => {
            let param: SweepParam = param.parse()?;
            let outcome = harness::sweep(param, values, &cfg)?;
            print!("{}", outcome.report.to_csv());
            println!("training runs: {}", outcome.trainings);
            write(&out.join(format!("sweep_{}.csv", param.key())), &outcome.report.to_csv())?;
        }
        Command::Render { checkpoint, shot, limit } => {
            let path = checkpoint_path(out, checkpoint);
            let ckpt = if path.exists() { Checkpoint::load(&path)? } else { initial_checkpoint(&cfg)? };
            let exp = Experiment::prepare(&cfg)?;
            let shot = shot.unwrap_or_else(|| cfg.shots.iter().copied().min().unwrap_or(1));
            let written = harness::render_heatmaps(&exp, &ckpt.params, &cfg, shot, *limit, &out.join("heatmaps"))?;
            println!("wrote {} heatmaps to {}", written.len(), out.join("heatmaps").display());
        }
        Command::DumpData => {
            let data = synth::make_splits(cfg.n_train, cfg.n_test, cfg.max_shots(), cfg.seed, cfg.dims.image)?;
            let dir = out.join("data");
            let n = harness::dump_dataset(&data, &dir)?;
            println!("wrote {n} files to {}", dir.display());
        }
        Command::GradCheck { seeds, per_tensor, rounds } => {
            let mut ok = true;
            for seed in 0..*seeds {
                let r = harness::pipeline_grad_check(seed, *rounds, *per_tensor)?;
                println!(
                    "seed {seed:>3}  checked {:>4}  max rel error {:.3e}  {}",
                    r.checked,
                    r.max_rel_error,
                    if r.passed { "ok" } else { "FAIL" }
                );
                ok &= r.passed;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
