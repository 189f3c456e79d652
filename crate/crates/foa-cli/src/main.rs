use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use foa::channel::{ChannelConfig, ChannelDraw, ChannelKind};
use foa::checkpoint;
use foa::harness::{self, parse_config, world_from_meta, write_atomic};
use foa::retrieval::{evaluate, EvalConfig};
use foa::source::build_dataset;
use foa::Execution;
use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "foa", version, about = "Two-device edge retrieval over a shared channel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every job of a sweep config, writing results.csv.
    Sweep {
        config: PathBuf,
        /// Run directory; overrides `output` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run jobs one after another instead of on the thread pool.
        #[arg(long)]
        sequential: bool,
    },
    /// Evaluate a saved checkpoint at one channel condition.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        snr: f64,
        /// Channel uses per codeword; must match the checkpoint.
        #[arg(long)]
        k: Option<usize>,
        /// `awgn` or `rayleigh`; defaults to the checkpoint's channel.
        #[arg(long)]
        channel: Option<String>,
        /// Split and evaluation seed; defaults to the training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// Append the result row to `<out>/results.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the differentiable losses.
    Gradcheck,
    /// Quick checks of loss gradients and channel noise statistics.
    Selftest,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Sweep { config, out, sequential } => sweep(config, out, sequential),
        Command::Eval {
            checkpoint,
            snr,
            k,
            channel,
            seed,
            trials,
            out,
        } => eval(checkpoint, snr, k, channel, seed, trials, out),
        Command::Gradcheck => {
            let worst = gradcheck()?;
            println!("max relative error {worst:.3e}");
            if worst >= 1e-4 {
                bail!("gradient check failed");
            }
            Ok(())
        }
        Command::Selftest => selftest(),
    }
}

fn sweep(config: PathBuf, out: Option<PathBuf>, sequential: bool) -> Result<()> {
    let mut cfg = parse_config(&config).with_context(|| format!("reading {}", config.display()))?;
    if let Some(out) = out {
        cfg.output = out;
    }
    let exec = if sequential { Execution::Sequential } else { Execution::default() };
    let jobs = cfg.jobs()?.len();
    eprintln!("{jobs} jobs -> {}", cfg.output.display());
    let rows = harness::run_sweep(&cfg, exec)?;
    print!("{}", harness::to_csv(&rows));
    Ok(())
}

fn eval(
    path: PathBuf,
    snr: f64,
    k: Option<usize>,
    channel: Option<String>,
    seed: Option<u64>,
    trials: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let ckpt = checkpoint::load(&path)?;
    let arch = &ckpt.model.arch;
    let kind: ChannelKind = match channel {
        Some(c) => c.parse()?,
        None => arch.channel,
    };
    let k = k.unwrap_or(arch.bandwidth);
    let seed = match seed {
        Some(s) => s,
        None => ckpt
            .meta
            .get("seed")
            .context("checkpoint has no seed; pass --seed")?
            .parse()
            .context("checkpoint seed")?,
    };
    let world = world_from_meta(&ckpt.meta)?;
    let split = build_dataset(&world, seed)?;
    let channel = ChannelConfig::new(kind, snr, k)?;
    let cfg = EvalConfig {
        trials,
        seed,
        execution: Execution::default(),
    };
    let start = std::time::Instant::now();
    let result = evaluate(&ckpt.model, &split, ckpt.scheme, &channel, &cfg)?;
    let row = harness::ResultRow {
        scheme: ckpt.scheme,
        channel: kind,
        snr_db: snr,
        bandwidth: k,
        seed,
        top1: result.top1(),
        seconds: start.elapsed().as_secs_f64(),
    };
    println!("{}\n{}", harness::CSV_HEADER, row.csv_line());
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        let csv = dir.join("results.csv");
        let mut rows = match std::fs::read_to_string(&csv) {
            Ok(text) => harness::parse_csv(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e).with_context(|| csv.display().to_string()),
        };
        rows.push(row);
        harness::sort_rows(&mut rows);
        write_atomic(&csv, &harness::to_csv(&rows))?;
    }
    Ok(())
}

fn gradcheck() -> Result<f64> {
    use foa::autodiff::grad_check;
    use foa::training::{loss_cl, loss_mse};
    use foa::Tensor;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = Tensor::randn(&[4, 12], 1.0, &mut rng);
        let fixed = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let cl = grad_check(
            |t, v| {
                let q1 = t.slice(v, 0, 3)?;
                let q2 = t.slice(v, 3, 3)?;
                let p = t.constant(fixed.clone());
                let p1 = t.slice(p, 0, 3)?;
                let p2 = t.slice(p, 3, 3)?;
                loss_cl(t, q1, q2, p1, p2)
            },
            &x,
            1e-6,
        )?;
        let mse = grad_check(
            |t, v| {
                let a = t.slice(v, 0, 6)?;
                let b = t.slice(v, 6, 6)?;
                let target = t.constant(fixed.clone());
                loss_mse(t, &[target, target], &[a, b])
            },
            &x,
            1e-6,
        )?;
        let net = grad_check(
            |t, v| {
                let w = t.constant(fixed.clone().reshape(vec![6, 4])?);
                let h = t.slice(v, 0, 6)?;
                let h = t.matmul(h, w)?;
                let h = t.relu(h);
                let sq = t.mul(h, h)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-6,
        )?;
        worst = worst.max(cl).max(mse).max(net);
    }
    Ok(worst)
}

fn selftest() -> Result<()> {
    let mut failures = 0;
    let mut check = |name: &str, ok: bool, detail: String| {
        println!("{}  {name}: {detail}", if ok { "ok  " } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    let worst = gradcheck()?;
    check("gradients", worst < 1e-4, format!("max relative error {worst:.2e}"));

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for snr in [-6.0, 0.0, 12.0] {
        let cfg = ChannelConfig::new(ChannelKind::Awgn, snr, 500)?;
        let acc: f64 = (0..200)
            .map(|_| ChannelDraw::sample(&cfg, &mut rng).noise.data().iter().map(|x| x * x).sum::<f64>())
            .sum();
        let est = acc / 1e5;
        let rel = (est / cfg.noise_variance() - 1.0).abs();
        check("noise variance", rel < 0.03, format!("{snr} dB: {est:.4} vs {:.4}", cfg.noise_variance()));
    }

    if failures > 0 {
        bail!("{failures} self-test check(s) failed");
    }
    Ok(())
}
