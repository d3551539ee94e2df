//! Command-line experiment runner.
//!
//! Settings resolve in order: built-in defaults, then `--config` file, then
//! flags. Exit codes: 0 success, 2 config error, 3 data error, 4 divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use qosgraph::experiment::{self, ExperimentConfig};
use qosgraph::Error;

#[derive(Parser, Debug)]
#[command(name = "qosgraph", version, about = "QoS prediction experiments on user/service attribute graphs")]
struct Cli {
    /// `key = value` config file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// WSDream directory or a matrix file.
    #[arg(long)]
    dataset: Option<String>,
    /// Matrix format: `wsdream_dense` or `triple_csv`.
    #[arg(long)]
    format: Option<String>,
    /// `rt` or `tp` for WSDream directories.
    #[arg(long)]
    metric: Option<String>,
    /// Training density, or a comma-separated list.
    #[arg(long)]
    density: Option<String>,
    /// qosmgaa, upcc, ipcc, uipcc or pmf; comma-separated for several.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    order: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    embed_dim: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    /// Seed, or a comma-separated list of seeds.
    #[arg(long)]
    seed: Option<String>,
    /// Edge-noise ratio, or a comma-separated list.
    #[arg(long)]
    noise_ratio: Option<String>,
    /// none, no_adversarial, no_gumbel, fool_fakes, rescale_fakes, shared_orders.
    #[arg(long)]
    ablation: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Extra `key=value` settings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the parameter-memory breakdown for the resolved config and exit.
    #[arg(long)]
    memory_only: bool,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let flags = [
        ("dataset", &cli.dataset),
        ("format", &cli.format),
        ("metric", &cli.metric),
        ("density", &cli.density),
        ("model", &cli.model),
        ("order", &cli.order),
        ("heads", &cli.heads),
        ("embed_dim", &cli.embed_dim),
        ("lambda", &cli.lambda),
        ("tau", &cli.tau),
        ("epochs", &cli.epochs),
        ("patience", &cli.patience),
        ("batch_size", &cli.batch_size),
        ("seed", &cli.seed),
        ("noise_ratio", &cli.noise_ratio),
        ("ablation", &cli.ablation),
        ("out", &cli.out),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = resolve(cli)?;
    if cli.memory_only {
        let data = experiment::load_data(&cfg)?;
        let graphs = experiment::build_graphs(&data, cfg.training.effective_order(), 0.0, 0)?;
        let mem = experiment::estimate_memory_for(
            &cfg.training,
            graphs.users.num_nodes(),
            graphs.services.num_nodes(),
            cfg.bytes_per_scalar,
        )?;
        for m in &mem.modules {
            println!("{:<20} {:>10} params {:>12} bytes", m.module, m.params, m.bytes);
        }
        println!("{:<20} {:>10} params {:>12} bytes ({:.3} MB)", "total", mem.total_params, mem.total_bytes, mem.megabytes());
        return Ok(());
    }
    let report = experiment::run_experiment(&cfg)?;
    println!("model     density  noise  runs  mae                 rmse");
    for a in &report.aggregates {
        let sd = |s: Option<f64>| s.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<9} {:<8} {:<6} {:<5} {:.4} ± {:<8} {:.4} ± {}",
            a.model.to_string(),
            a.density,
            a.noise_ratio,
            a.runs,
            a.mae_mean,
            sd(a.mae_std),
            a.rmse_mean,
            sd(a.rmse_std)
        );
    }
    println!("report written to {}", cfg.out.join("report.json").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
