use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hetsvrg::comm::{optimal_comm_slots, pc_sample_slots, CommLedger};
use hetsvrg::harness::{emit_plotdata, run_experiment, ExperimentSpec};
use hetsvrg::optim::{theoretical_rate, RateKind, RateParams};
use hetsvrg::{Error, Result};

#[derive(Parser)]
#[command(name = "hetsvrg", version, about = "Adaptive-sampling distributed SVRG on a simulated cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a step-size sweep and write traces, report.csv and best.csv.
    Run(RunArgs),
    /// Print theoretical per-epoch contraction factors as CSV.
    Rates(RatesArgs),
    /// Draw repeatedly with the sampling protocol and print marginals as CSV.
    ProtocolTest(ProtocolArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Flat key=value config file, applied before the other flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// linear, logistic or csv.
    #[arg(long)]
    preset: Option<String>,
    /// CSV dataset for the csv preset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Task of the CSV dataset.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    algos: Option<String>,
    #[arg(long)]
    etas: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    inner: Option<usize>,
    #[arg(long = "R")]
    group_size: Option<usize>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra key=value settings, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Skip the per-figure plot files.
    #[arg(long)]
    no_plots: bool,
}

#[derive(clap::Args)]
struct RatesArgs {
    /// Comma list of kinds, or `all`.
    #[arg(long, default_value = "all")]
    kind: String,
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    eta: f64,
    #[arg(long = "T")]
    inner: usize,
    #[arg(long = "R", default_value_t = 1)]
    group_size: usize,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    tau: f64,
    #[arg(long)]
    lbar: f64,
    /// Largest Lipschitz constant; defaults to `lbar`.
    #[arg(long)]
    lmax: Option<f64>,
}

#[derive(clap::Args)]
struct ProtocolArgs {
    #[arg(long = "M")]
    workers: usize,
    #[arg(long = "R")]
    group_size: usize,
    /// Number of protocol invocations.
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    /// Comma list of M weights; defaults to 1, 2, ..., M.
    #[arg(long)]
    weights: Option<String>,
    /// pc or optimal.
    #[arg(long, default_value = "pc")]
    protocol: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the cost of one invocation here.
    #[arg(long)]
    ledger_out: Option<PathBuf>,
}

fn run(args: RunArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => ExperimentSpec::load_config(path)?,
        None => ExperimentSpec::linear(),
    };
    if let Some(p) = &args.preset {
        spec.set("preset", p)?;
    }
    if let Some(t) = &args.task {
        spec.set("task", t)?;
    }
    if let Some(d) = &args.data {
        spec.set("data", &d.to_string_lossy())?;
    }
    let flags = [
        ("algos", args.algos.clone()),
        ("etas", args.etas.clone()),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("inner", args.inner.map(|v| v.to_string())),
        ("R", args.group_size.map(|v| v.to_string())),
        ("seeds", args.seeds.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            spec.set(key, &v)?;
        }
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        spec.set(k.trim(), v.trim())?;
    }
    if let Some(out) = &args.out {
        spec.output_dir = Some(out.clone());
    }
    let report = run_experiment(&spec)?;
    if let Some(dir) = &spec.output_dir {
        if !args.no_plots {
            emit_plotdata(&report, dir, &dir.join("plots"))?;
        }
    }
    for &a in &report.algorithms {
        if report.best_for(a).is_none() {
            eprintln!("warning: every grid cell diverged for {a}");
        }
    }
    print!("{}", report.best_csv());
    Ok(())
}

fn rates(args: RatesArgs) -> Result<()> {
    let kinds: Vec<RateKind> = if args.kind == "all" {
        RateKind::ALL.to_vec()
    } else {
        args.kind.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?
    };
    let params = RateParams {
        lambda: args.lambda,
        l_bar: args.lbar,
        l_max: args.lmax.unwrap_or(args.lbar),
        eta: args.eta,
        inner_iters: args.inner,
        group_size: args.group_size,
        tau: args.tau,
    };
    println!("kind,rho,converges");
    for kind in kinds {
        match theoretical_rate(kind, &params) {
            Ok(rho) => println!("{kind},{rho:?},{}", rho < 1.0),
            Err(Error::RateUndefined(_)) => println!("{kind},undefined,false"),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn protocol_test(args: ProtocolArgs) -> Result<()> {
    let weights: Vec<f64> = match &args.weights {
        Some(w) => w
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad weight `{s}`")))
            })
            .collect::<Result<_>>()?,
        None => (1..=args.workers).map(|i| i as f64).collect(),
    };
    if weights.len() != args.workers {
        return Err(Error::InvalidArgument(format!(
            "{} weights given for M = {}",
            weights.len(),
            args.workers
        )));
    }
    if args.draws == 0 {
        return Err(Error::InvalidArgument("draws must be at least 1".into()));
    }
    let sampler = match args.protocol.as_str() {
        "pc" => pc_sample_slots::<ChaCha8Rng>,
        "optimal" => optimal_comm_slots::<ChaCha8Rng>,
        other => return Err(Error::InvalidArgument(format!("unknown protocol `{other}`"))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut counts = vec![0u64; args.workers];
    let mut first = None;
    for _ in 0..args.draws {
        let mut ledger = CommLedger::new();
        for i in sampler(&weights, args.group_size, &mut ledger, &mut rng)? {
            counts[i] += 1;
        }
        first.get_or_insert(ledger);
    }
    if let (Some(path), Some(ledger)) = (&args.ledger_out, first) {
        let body = format!("{}\n{}\n", CommLedger::CSV_HEADER, ledger.csv_row(&args.protocol));
        std::fs::write(path, body).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    let total_w: f64 = weights.iter().sum();
    let slots = (args.draws * args.group_size) as f64;
    println!("worker,weight,expected,empirical,abs_error");
    for (m, (&w, &c)) in weights.iter().zip(&counts).enumerate() {
        let expected = w / total_w;
        let empirical = c as f64 / slots;
        println!("{},{w:?},{expected:?},{empirical:?},{:?}", m + 1, (empirical - expected).abs());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Rates(a) => rates(a),
        Command::ProtocolTest(a) => protocol_test(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
