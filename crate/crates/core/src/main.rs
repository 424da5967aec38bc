use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use benign_lab::data::{generate_dataset, make_mu};
use benign_lab::diagnostics::{balance_series, condition_report, stage_report, stage_report_from_series, BalanceSeries, RegimeConfig};
use benign_lab::decomposition::DecompCoeffs;
use benign_lab::error::{Error, Result};
use benign_lab::experiments::{estimate_test_error, fit_boundary, run_sweep, AxisTransform, BoundaryOptions, RunSeeds, SweepSpec};
use benign_lab::model::{init_params, InitConfig};
use benign_lab::seq::{balancing_time, simulate, write_csv, write_csv_file, SeqParams};
use benign_lab::trainer::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "benign-lab", version, about = "Benign overfitting simulations for two-layer ReLU CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network and write its trajectory CSV.
    Train(TrainArgs),
    /// Simulate the two intertwined sequences.
    Seqsim(SeqArgs),
    /// Summarize a trajectory CSV.
    Diagnose(DiagnoseArgs),
    /// Run a hyperparameter grid from a TOML spec.
    Sweep(SweepArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 1000)]
    d: usize,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 1.0)]
    mu_norm: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_p: f64,
    #[arg(long, default_value_t = 0.01)]
    sigma_0: f64,
    #[arg(long, default_value_t = 0.1)]
    v0: f64,
    #[arg(long, default_value_t = 0.01)]
    eta: f64,
    /// Maximum number of gradient steps.
    #[arg(long = "iters", short = 'T', default_value_t = 200)]
    iters: usize,
    /// Stop once the training loss is at most this value.
    #[arg(long = "target-loss", default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    log_every: usize,
    /// Filter index for the balance columns; defaults to the filter with
    /// the largest final noise inner product.
    #[arg(long)]
    tracked_filter: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    /// Trajectory CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the stage report and run summary as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write the final parameters as a checkpoint CSV.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also track and write the signal-noise coefficients.
    #[arg(long)]
    decomp: Option<PathBuf>,
    /// Also dump the training set as points.csv and noise.csv in this
    /// directory.
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SeqArgs {
    #[arg(long, default_value_t = 0.0)]
    a0: f64,
    #[arg(long, default_value_t = 1.0)]
    b0: f64,
    #[arg(long = "A")]
    a: f64,
    #[arg(long = "B")]
    b: f64,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = benign_lab::seq::DEFAULT_TOL)]
    tol: f64,
    /// CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct DiagnoseArgs {
    /// Trajectory CSV written by `train`.
    trajectory: PathBuf,
    /// JSON report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-iteration CSV of `iter,window_ok,ratio_noise`.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Transform {
    Identity,
    Ln,
    Reciprocal,
    Square,
    Fourth,
}

impl From<Transform> for AxisTransform {
    fn from(t: Transform) -> Self {
        match t {
            Transform::Identity => AxisTransform::Identity,
            Transform::Ln => AxisTransform::Ln,
            Transform::Reciprocal => AxisTransform::Reciprocal,
            Transform::Square => AxisTransform::Pow(2.0),
            Transform::Fourth => AxisTransform::Pow(4.0),
        }
    }
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the worker count in the spec.
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long, value_enum, default_value = "identity")]
    fit_x: Transform,
    #[arg(long, value_enum, default_value = "identity")]
    fit_y: Transform,
    /// Restrict the boundary fit to columns with axis value in `LO,HI`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    columns: Option<Vec<f64>>,
}

fn run_train(a: TrainArgs) -> Result<()> {
    let seeds = RunSeeds::from_child(a.seed);
    let mu = make_mu(a.d, a.mu_norm)?;
    let ds = generate_dataset(a.n, &mu, a.sigma_p, seeds.data)?;
    let p0 = init_params(a.m, a.d, &InitConfig { sigma_0: a.sigma_0, v_0: a.v0, seed: seeds.init })?;
    let cfg = TrainConfig {
        eta: a.eta,
        max_iters: a.iters,
        target_loss: a.epsilon,
        log_every: a.log_every,
        seed: a.seed,
        track_decomposition: a.decomp.is_some(),
    };
    let out = train(&p0, &ds, &cfg, ())?;
    let series = balance_series(&out.log, a.tracked_filter)?;
    series.write_csv(&a.out)?;
    let accuracy = estimate_test_error(&out.params, &mu, a.sigma_p, a.n_test, seeds.test)?;
    eprintln!(
        "stop={:?} iterations={} loss={:.6} test_accuracy={accuracy:.4} tracked_filter={:?}",
        out.stop, out.iterations, out.final_loss, series.r_star
    );
    if let Some(path) = &a.report {
        let stage = stage_report(&out.log, &ds)?;
        let conditions = condition_report(&RegimeConfig {
            d: a.d,
            n: a.n,
            m: a.m,
            sigma_p: a.sigma_p,
            sigma_0: a.sigma_0,
            v_0: a.v0,
            eta: a.eta,
            mu_norm: a.mu_norm,
        })?;
        let report = serde_json::json!({
            "stop": out.stop,
            "iterations": out.iterations,
            "final_loss": out.final_loss,
            "test_accuracy": accuracy,
            "seeds": seeds,
            "tracked_filter": series.r_star,
            "stage": stage,
            "conditions": conditions,
        });
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    if let Some(path) = &a.checkpoint {
        out.params.write_checkpoint(path)?;
    }
    if let Some(path) = &a.decomp {
        let snaps: Vec<DecompCoeffs> = out.log.entries.iter().filter_map(|e| e.decomp.clone()).collect();
        DecompCoeffs::write_csv(&snaps, path)?;
    }
    if let Some(dir) = &a.dataset_dir {
        fs::create_dir_all(dir)?;
        ds.write_csv(&dir.join("points.csv"), &dir.join("noise.csv"))?;
    }
    Ok(())
}

fn run_seq(a: SeqArgs) -> Result<()> {
    let p = SeqParams::new(a.a0, a.b0, a.a, a.b)?;
    if !p.in_regime() {
        eprintln!("warning: AB ≤ 1 and a0/b0 ≤ 0.1·√(A/B) do not both hold; balancing time may not scale as 1/√(AB)");
    }
    let seq = simulate(&p, a.steps)?;
    match &a.out {
        Some(path) => write_csv_file(&seq, path)?,
        None => write_csv(&seq, io::stdout().lock())?,
    }
    match balancing_time(&p, a.tol) {
        Ok(t1) => eprintln!("balancing_time={t1} fixed_ratio={}", p.fixed_ratio()),
        Err(Error::NotBalanced { cap }) => eprintln!("not balanced within {cap} steps"),
        Err(e) => return Err(e),
    }
    Ok(())
}

fn run_diagnose(a: DiagnoseArgs) -> Result<()> {
    let series = BalanceSeries::read_csv(&a.trajectory)?;
    let report = stage_report_from_series(&series);
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(path) => fs::write(path, json)?,
        None => print!("{json}"),
    }
    if let Some(path) = &a.csv {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iter", "window_ok", "ratio_noise"])?;
        for (row, (_, ok)) in series.rows.iter().zip(&report.window_ok) {
            w.write_record([row.iter.to_string(), ok.to_string(), row.ratio_noise.map(|x| x.to_string()).unwrap_or_default()])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn run_sweep_cmd(a: SweepArgs) -> Result<()> {
    let mut spec = SweepSpec::read(&a.spec)?;
    if let Some(p) = a.parallelism {
        spec.parallelism = p;
    }
    let result = run_sweep(&spec)?;
    let opts = BoundaryOptions {
        x: a.fit_x.into(),
        y: a.fit_y.into(),
        column_range: a.columns.map(|c| (c[0], c[1])),
    };
    let fit = match fit_boundary(&result, &opts) {
        Ok(fit) => {
            eprintln!("boundary slope={} intercept={} r={}", fit.slope, fit.intercept, fit.pearson_r);
            Some(fit)
        }
        Err(Error::NoBoundary(msg)) => {
            eprintln!("no boundary: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    result.write_outputs(&a.out, fit.as_ref())?;
    let benign = result.cells.iter().filter(|c| c.benign(spec.truncation)).count();
    eprintln!("{} cells, {benign} above truncation {}", result.cells.len(), spec.truncation);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Seqsim(a) => run_seq(a),
        Command::Diagnose(a) => run_diagnose(a),
        Command::Sweep(a) => run_sweep_cmd(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
