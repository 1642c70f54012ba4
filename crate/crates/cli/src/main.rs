//! `hdit` — train, sample, cost and verify hourglass diffusion transformers.
//!
//! Exit codes: 0 success, 1 verification failure, 2 bad input (config,
//! dataset, checkpoint, arguments), 3 training aborted on a non-finite loss.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hdit::checkpoint::Checkpoint;
use hdit::config::RunConfig;
use hdit::cost::{count_dit, count_hdit, scaling_sweep, sweep_csv, CostReport, DitConfig, SweepRow};
use hdit::model::{presets, ModelConfig};
use hdit::train::{self, RunOptions, TrainError, CHECKPOINT_FILE};
use hdit::verify::{self, Suite, VerifyOptions};

#[derive(Parser)]
#[command(name = "hdit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model as described by a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps (for interrupting runs).
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Draw samples with the (EMA) weights of a checkpoint.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class to sample; cycles through all classes when omitted.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Guidance scale; 1 = no guidance. Defaults to the config value.
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for `sample_<seed>_<idx>.ppm` (defaults to the config's output dir).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Use the raw instead of the averaged weights.
        #[arg(long)]
        raw: bool,
    },
    /// Analytic FLOP counts over a list of resolutions.
    Cost {
        #[arg(long, value_enum, default_value_t = Arch::Hdit)]
        arch: Arch,
        /// Run config whose model is costed (default: the 128² ablation model).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated resolutions, e.g. `128,256,512`.
        #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
        resolutions: Vec<usize>,
        /// Write `x,y,r` rows (resolution, GFLOP, % reduction vs DiT-B/4).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the self-verification suites.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        /// Corrupt one attention temperature to exercise the failure path.
        #[arg(long, hide = true)]
        inject_negative_tau: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Dit,
    Hdit,
}

/// An error together with the exit code it maps to.
struct Failure(u8, anyhow::Error);

fn input<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(|e| Failure(2, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("HDIT_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        hdit::init_threads(n.max(1));
    }
    let result = match cli.command {
        Command::Train { config, resume, stop_at } => cmd_train(&config, resume, stop_at),
        Command::Sample {
            config,
            checkpoint,
            class,
            count,
            cfg_scale,
            seed,
            out_dir,
            raw,
        } => cmd_sample(&config, &checkpoint, class, count, cfg_scale, seed, out_dir, raw),
        Command::Cost {
            arch,
            config,
            resolutions,
            csv,
        } => cmd_cost(arch, config.as_deref(), &resolutions, csv.as_deref()),
        Command::Verify {
            suite,
            inject_negative_tau,
        } => cmd_verify(suite, inject_negative_tau),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn cmd_train(config: &Path, resume: bool, stop_at: Option<u64>) -> std::result::Result<(), Failure> {
    let cfg = input(load_config(config))?;
    let ckpt = cfg.training.output_dir.join(CHECKPOINT_FILE);
    if resume && !ckpt.exists() {
        return Err(Failure(2, anyhow::anyhow!("no checkpoint to resume at {}", ckpt.display())));
    }
    let opts = RunOptions {
        resume: resume.then_some(ckpt),
        stop_at,
        verbose: true,
    };
    match train::run(&cfg, &opts) {
        Ok((trainer, _)) => {
            println!(
                "finished at step {} — checkpoint and metrics in {}",
                trainer.step,
                cfg.training.output_dir.display()
            );
            Ok(())
        }
        Err(e @ TrainError::NonFinite { .. }) => Err(Failure(3, e.into())),
        Err(e) => Err(Failure(2, e.into())),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    config: &Path,
    checkpoint: &Path,
    class: Option<usize>,
    count: usize,
    cfg_scale: Option<f64>,
    seed: u64,
    out_dir: Option<PathBuf>,
    raw: bool,
) -> std::result::Result<(), Failure> {
    let mut cfg = input(load_config(config))?;
    if let Some(w) = cfg_scale {
        cfg.sampler.guidance_scale = w;
    }
    input(cfg.sampler.validate().map_err(anyhow::Error::msg))?;
    if let Some(k) = class {
        if k >= cfg.model.num_classes {
            return Err(Failure(2, anyhow::anyhow!("class {k} out of range for {} classes", cfg.model.num_classes)));
        }
    }
    let ckpt = input(Checkpoint::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display())))?;
    let model = input(train::load_model(&cfg, &ckpt, !raw).context("checkpoint does not match the config"))?;
    let out = out_dir.unwrap_or_else(|| cfg.training.output_dir.clone());
    input(std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display())))?;
    let images = train::generate(&model, &cfg.sampler, cfg.diffusion.data_sigma, class, count, seed)
        .map_err(|e| Failure(3, e.into()))?;
    for (i, img) in images.iter().enumerate() {
        let path = out.join(format!("sample_{seed}_{i}.ppm"));
        input(hdit::data::save_image(img, &path).with_context(|| format!("writing {}", path.display())))?;
    }
    println!("wrote {} samples to {}", images.len(), out.display());
    Ok(())
}

fn cost_table(r: &CostReport) {
    println!(
        "  {:>6}²  tokens {:?}  attn-proj {:>9.2}  attn-mix {:>9.2}  ff {:>9.2}  token-ops {:>7.2}  total {:>9.2} GFLOP  params {:.1}M",
        r.resolution,
        r.tokens(),
        r.attention_projections() / 1e9,
        r.attention_mixing() / 1e9,
        r.feedforward() / 1e9,
        r.token_ops / 1e9,
        r.gflops(),
        r.parameters as f64 / 1e6
    );
}

fn cmd_cost(arch: Arch, config: Option<&Path>, resolutions: &[usize], csv: Option<&Path>) -> std::result::Result<(), Failure> {
    let base: ModelConfig = match config {
        Some(p) => input(load_config(p))?.model,
        None => presets::ablation_e(),
    };
    input(check_resolutions(resolutions))?;
    let dit = DitConfig::B4;
    let sweep = input(scaling_sweep(&base, &dit, resolutions).context("invalid resolution list"))?;
    let rows: Vec<SweepRow> = match arch {
        Arch::Hdit => {
            println!("hourglass (adapted from {}²):", base.input_resolution);
            for &res in resolutions {
                let cfg = input(base.adapt_resolution(res).map_err(anyhow::Error::from))?;
                cost_table(&input(count_hdit(&cfg, res).map_err(anyhow::Error::from))?);
            }
            sweep
        }
        Arch::Dit => {
            println!("DiT-B/4:");
            for &res in resolutions {
                cost_table(&count_dit(&dit, res));
            }
            sweep
                .iter()
                .map(|r| SweepRow {
                    resolution: r.resolution,
                    hdit_gflops: r.dit_gflops,
                    dit_gflops: r.dit_gflops,
                })
                .collect()
        }
    };
    println!("{:>8}  {:>12}  {:>12}  {:>9}", "res", "GFLOP", "DiT-B/4", "reduction");
    for r in &rows {
        println!(
            "{:>8}  {:>12.2}  {:>12.2}  {:>8.2}%",
            r.resolution,
            r.hdit_gflops,
            r.dit_gflops,
            r.reduction_percent()
        );
    }
    if let Some(path) = csv {
        input(std::fs::write(path, sweep_csv(&rows)).with_context(|| format!("writing {}", path.display())))?;
    }
    Ok(())
}

fn check_resolutions(resolutions: &[usize]) -> Result<()> {
    if resolutions.is_empty() {
        bail!("resolution list is empty");
    }
    if let Some(r) = resolutions.iter().find(|&&r| r == 0) {
        bail!("invalid resolution {r}");
    }
    Ok(())
}

fn cmd_verify(suite: Suite, inject_negative_tau: bool) -> std::result::Result<(), Failure> {
    let start = std::time::Instant::now();
    let results = verify::run(suite, &VerifyOptions { inject_negative_tau });
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} checks, {} failed, {:.1}s",
        results.len(),
        failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure(1, anyhow::anyhow!("{failed} verification checks failed")));
    }
    Ok(())
}
