use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pacbayes::atlas::{
    compare_bounds, log_grid, tightest_map, write_atlas_csv, DEFAULT_GRID_POINTS,
    DEFAULT_K_RANGE, DEFAULT_P_RANGE,
};
use pacbayes::cert::{final_certificate, mc_bound_from_mean, mc_risk_means, write_certificate_csv};
use pacbayes::checkpoint::{read_checkpoint, write_checkpoint};
use pacbayes::kl::BoundKind;
use pacbayes::net::LossKind;
use pacbayes::train::{load_run_spec, train, write_history_csv};

#[derive(Parser)]
#[command(
    name = "pacbayes",
    version,
    about = "Risk certificates for stochastic neural networks"
)]
struct Cli {
    /// Override the seed from the config file (train and certify).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for output files.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Suppress progress output; results and errors still print.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print every bound value at one (p, K) point.
    Bounds {
        /// Empirical risk, in (0, 1).
        #[arg(long)]
        p: f64,
        /// Complexity term, positive.
        #[arg(long = "K")]
        k: f64,
    },
    /// Map the tightest bound kind over a (p, K) grid into atlas.csv.
    Atlas {
        #[arg(long, default_value_t = DEFAULT_P_RANGE.0)]
        p_min: f64,
        #[arg(long, default_value_t = DEFAULT_P_RANGE.1)]
        p_max: f64,
        #[arg(long, default_value_t = DEFAULT_K_RANGE.0)]
        k_min: f64,
        #[arg(long, default_value_t = DEFAULT_K_RANGE.1)]
        k_max: f64,
        /// Points per axis, log spaced.
        #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
        grid: usize,
    },
    /// Train a posterior by descending a certificate-shaped objective.
    Train {
        /// Run description file (key = value lines).
        #[arg(long)]
        config: PathBuf,
    },
    /// Certify a trained posterior by Monte Carlo weight sampling.
    Certify {
        /// Run description file the posterior was trained with.
        #[arg(long)]
        config: PathBuf,
        /// Posterior checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Loss to certify: zero_one or bounded_xe.
        #[arg(long, default_value = "zero_one")]
        loss: String,
        /// Certificate family: maurer, pinsker, pbq, ts, trp, or rts.
        #[arg(long, default_value = "maurer")]
        bound: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Bounds { p, k } => bounds(p, k),
        Command::Atlas {
            p_min,
            p_max,
            k_min,
            k_max,
            grid,
        } => atlas(&cli, p_min, p_max, k_min, k_max, grid),
        Command::Train { ref config } => run_train(&cli, config.clone()),
        Command::Certify {
            ref config,
            ref checkpoint,
            ref loss,
            ref bound,
        } => certify(
            &cli,
            config.clone(),
            checkpoint.clone(),
            loss.clone(),
            bound.clone(),
        ),
    }
}

fn bounds(p: f64, k: f64) -> Result<()> {
    let cell = compare_bounds(p, k)?;
    for (kind, value) in cell.values.iter() {
        println!("{:<8} {:.16e}", kind.name(), value);
    }
    println!("tightest relaxation: {}", cell.tightest.name());
    Ok(())
}

fn atlas(cli: &Cli, p_min: f64, p_max: f64, k_min: f64, k_max: f64, grid: usize) -> Result<()> {
    let p_grid = log_grid(p_min, p_max, grid).context("building the p grid")?;
    let k_grid = log_grid(k_min, k_max, grid).context("building the K grid")?;
    let cells = tightest_map(&p_grid, &k_grid)?;
    fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let path = cli.out_dir.join("atlas.csv");
    let mut out = BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    );
    write_atlas_csv(&cells, &mut out)?;
    out.flush()?;
    if !cli.quiet {
        println!("wrote {} ({} cells)", path.display(), cells.len());
    }
    Ok(())
}

fn run_train(cli: &Cli, config: PathBuf) -> Result<()> {
    let mut spec = load_run_spec(&config)
        .with_context(|| format!("reading config {}", config.display()))?;
    if let Some(seed) = cli.seed {
        spec.train.seed = seed;
    }
    let data = spec.load_dataset().context("loading the dataset")?;
    if !cli.quiet {
        println!(
            "training {} for {} epochs on {} examples (seed {})",
            spec.train.objective,
            spec.train.epochs,
            spec.train.n_train,
            spec.train.seed
        );
    }
    let run = train(&spec.train, &data)?;
    if !cli.quiet {
        for row in &run.history {
            println!(
                "epoch {:>3}: loss {:.4}, error {:.4}, divergence/n {:.5}, proxy bound {:.4}",
                row.epoch, row.emp_xe, row.emp_01, row.kl_over_n, row.cert_01
            );
        }
        if run.fallback_steps > 0 {
            println!(
                "{} steps fell back to pure divergence descent",
                run.fallback_steps
            );
        }
    }

    fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let history_path = cli.out_dir.join("history.csv");
    let mut out = BufWriter::new(
        File::create(&history_path)
            .with_context(|| format!("creating {}", history_path.display()))?,
    );
    write_history_csv(&run.history, &mut out)?;
    out.flush()?;
    let checkpoint_path = cli.out_dir.join("checkpoint.bin");
    write_checkpoint(&run.posterior, &checkpoint_path)?;
    if !cli.quiet {
        println!(
            "wrote {} and {}",
            history_path.display(),
            checkpoint_path.display()
        );
    }
    Ok(())
}

fn certify(
    cli: &Cli,
    config: PathBuf,
    checkpoint: PathBuf,
    loss: String,
    bound: String,
) -> Result<()> {
    let mut spec = load_run_spec(&config)
        .with_context(|| format!("reading config {}", config.display()))?;
    if let Some(seed) = cli.seed {
        spec.train.seed = seed;
    }
    let loss = LossKind::parse(&loss)?;
    let bound = BoundKind::parse(&bound)?;
    let post = read_checkpoint(&checkpoint)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    if post.arch() != &spec.train.arch {
        bail!(
            "checkpoint architecture {:?} differs from configured {:?}",
            post.arch().layer_sizes(),
            spec.train.arch.layer_sizes()
        );
    }
    let data = spec.load_dataset().context("loading the dataset")?;
    let t = &spec.train;
    if !cli.quiet {
        eprintln!(
            "certifying {} with {} weight draws over {} examples (seed {})",
            loss, t.mc_samples, t.n_train, t.seed
        );
    }
    let risks = mc_risk_means(&post, &data, t.n_train, t.mc_samples, t.p_min, t.seed)?;
    let mean = match loss {
        LossKind::ZeroOne => risks.zero_one,
        LossKind::BoundedXe => risks.bounded_xe,
    };
    let emp_bound = mc_bound_from_mean(mean, t.mc_samples, t.delta_mc)?;
    let cert = final_certificate(
        emp_bound,
        post.gaussian_kl(),
        t.n_train as u64,
        t.delta,
        t.delta_mc,
        bound,
        loss,
    )?;

    let mut stdout = std::io::stdout().lock();
    write_certificate_csv(&cert, &mut stdout)?;
    stdout.flush()?;

    fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let path = cli.out_dir.join("certificate.csv");
    let mut out = BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    );
    write_certificate_csv(&cert, &mut out)?;
    out.flush()?;
    if !cli.quiet {
        eprintln!("{cert}");
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}
