use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use gppca::io::{
    read_config, read_covariates, read_inputs, read_matrix_csv, read_table, resolve_scenario,
    load_model, save_model, write_matrix_csv, write_replicates, write_summary,
};
use gppca::predict::Z_95;
use gppca::{
    build_mean_design, fit_with_design, predict_with_mean, run_experiment, simulate_dataset,
    GppcaError, Method, OutputMatrix, Result,
};

#[derive(Parser)]
#[command(name = "gppca", version, about = "Generalized probabilistic principal component analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one replicate of a scenario and write its matrices as CSV.
    Simulate {
        /// Built-in scenario name or path to a scenario JSON file.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a model to a k×n output matrix.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// n×p input locations; defaults to 1..n.
        #[arg(long)]
        inputs: Option<PathBuf>,
        /// Covariate table with a header, one row per input.
        #[arg(long)]
        covariates: Option<PathBuf>,
    },
    /// Predictive means, standard deviations and 95% intervals at new inputs.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// m×p prediction inputs.
        #[arg(long)]
        inputs: PathBuf,
        /// CSV with columns input,row,value (0-based) to condition on.
        #[arg(long)]
        observed: Option<PathBuf>,
        /// Covariate values at the prediction inputs, with a header.
        #[arg(long)]
        covariates: Option<PathBuf>,
    },
    /// Run methods over seeded replicates of a scenario and write a report.
    Benchmark {
        #[arg(long)]
        scenario: String,
        #[arg(long, value_delimiter = ',', default_value = "pca,gppca,ly1,ly5")]
        methods: Vec<Method>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gppca: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate {
            scenario,
            out,
            replicate,
            seed,
        } => simulate(&scenario, &out, replicate, seed),
        Command::Fit {
            data,
            config,
            out,
            inputs,
            covariates,
        } => fit(&data, &config, &out, inputs.as_deref(), covariates.as_deref()),
        Command::Predict {
            model,
            inputs,
            observed,
            covariates,
        } => predict(&model, &inputs, observed.as_deref(), covariates.as_deref()),
        Command::Benchmark {
            scenario,
            methods,
            replicates,
            seed,
            out,
        } => benchmark(&scenario, &methods, replicates, seed, &out),
    }
}

fn simulate(name: &str, out: &Path, replicate: usize, seed: Option<u64>) -> Result<()> {
    let mut scenario = resolve_scenario(name)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let data = simulate_dataset(&scenario, replicate)?;
    std::fs::create_dir_all(out)?;
    write_matrix_csv(&out.join("Y.csv"), &data.y, None)?;
    write_matrix_csv(&out.join("A_true.csv"), &data.a_true, None)?;
    write_matrix_csv(&out.join("Z_true.csv"), &data.z_true, None)?;
    write_matrix_csv(&out.join("mean_true.csv"), &data.mean_true, None)?;
    let grid = scenario.grid();
    let x = DMatrix::from_fn(grid.len(), grid.dim(), |i, j| grid.point(i)[j]);
    write_matrix_csv(&out.join("inputs.csv"), &x, None)?;
    std::fs::write(out.join("scenario.json"), serde_json::to_string_pretty(&scenario)?)?;
    Ok(())
}

fn fit(
    data: &Path,
    config: &Path,
    out: &Path,
    inputs: Option<&Path>,
    covariates: Option<&Path>,
) -> Result<()> {
    let y = read_matrix_csv(data)?;
    let cfg = read_config(config)?;
    let grid = read_inputs(inputs, y.ncols())?;
    let covs = covariates.map(read_covariates).transpose()?;
    let design = build_mean_design(&cfg.mean, &grid, covs.as_ref())?;
    let model = fit_with_design(&OutputMatrix::new(y, grid)?, &cfg, design)?;
    save_model(&model, out)?;
    let h = model.hyper();
    eprintln!(
        "log-likelihood {:.6}, sigma0^2 {:.6e}, tau {:?}, converged {}",
        model.report().log_likelihood,
        h.sigma0_sq,
        h.taus,
        model.report().converged
    );
    Ok(())
}

/// Observed values grouped by prediction input.
fn read_observed(path: &Path, m: usize, k: usize) -> Result<Vec<(Vec<usize>, Vec<f64>)>> {
    let t = read_table(path)?;
    if t.values.ncols() != 3 {
        return Err(GppcaError::InvalidArgument(
            "observed file needs columns input,row,value".into(),
        ));
    }
    let mut groups = vec![(Vec::new(), Vec::new()); m];
    for r in t.values.row_iter() {
        let index = |v: f64, bound: usize, what: &str| -> Result<usize> {
            if v.fract() == 0.0 && v >= 0.0 && (v as usize) < bound {
                Ok(v as usize)
            } else {
                Err(GppcaError::InvalidArgument(format!(
                    "observed {what} index {v} is not in 0..{bound}"
                )))
            }
        };
        let i = index(r[0], m, "input")?;
        let row = index(r[1], k, "row")?;
        groups[i].0.push(row);
        groups[i].1.push(r[2]);
    }
    Ok(groups)
}

fn predict(
    model: &Path,
    inputs: &Path,
    observed: Option<&Path>,
    covariates: Option<&Path>,
) -> Result<()> {
    let model = load_model(model)?;
    let x = read_matrix_csv(inputs)?;
    let m = x.nrows();
    let k = model.data().k();
    let covs = covariates.map(read_covariates).transpose()?;
    let cov_cols: Vec<usize> = match &covs {
        Some(c) => model
            .design()
            .basis()
            .covariate_columns
            .iter()
            .map(|name| c.column(name))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    if let Some(c) = &covs {
        if c.values.nrows() != m {
            return Err(GppcaError::InvalidArgument(format!(
                "covariate table has {} rows for {m} inputs",
                c.values.nrows()
            )));
        }
    }
    let groups = match observed {
        Some(p) => read_observed(p, m, k)?,
        None => vec![(Vec::new(), Vec::new()); m],
    };
    let stdout = std::io::stdout();
    let mut w = csv::Writer::from_writer(stdout.lock());
    let to_io = |e: csv::Error| GppcaError::Io(std::io::Error::other(e.to_string()));
    w.write_record(["input", "row", "mean", "sd", "lower", "upper"])
        .map_err(to_io)?;
    for (i, (rows, values)) in groups.iter().enumerate() {
        let xstar: Vec<f64> = x.row(i).iter().copied().collect();
        let cv: Vec<f64> = match &covs {
            Some(c) => cov_cols.iter().map(|&j| c.values[(i, j)]).collect(),
            None => Vec::new(),
        };
        let marginal = predict_with_mean(&model, &xstar, &cv)?;
        let (dist, free): (_, Vec<usize>) = if rows.is_empty() {
            (marginal, (0..k).collect())
        } else {
            let cond = marginal.condition(rows, &DVector::from_vec(values.clone()))?;
            (cond, (0..k).filter(|r| !rows.contains(r)).collect())
        };
        let sd = dist.std_devs();
        for (j, &row) in free.iter().enumerate() {
            let mu = dist.mean[j];
            w.write_record([
                i.to_string(),
                row.to_string(),
                mu.to_string(),
                sd[j].to_string(),
                (mu - Z_95 * sd[j]).to_string(),
                (mu + Z_95 * sd[j]).to_string(),
            ])
            .map_err(to_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn benchmark(
    name: &str,
    methods: &[Method],
    replicates: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut scenario = resolve_scenario(name)?;
    if let Some(r) = replicates {
        scenario.replicates = r;
    }
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let report = run_experiment(&scenario, methods)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_summary(std::fs::File::create(out)?, &report)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    write_replicates(
        std::fs::File::create(out.with_file_name(format!("{stem}_replicates.csv")))?,
        &report,
    )?;
    let mut err = std::io::stderr();
    for s in &report.summaries {
        let _ = writeln!(
            err,
            "{:>6}: median angle {:.4}, avg mse {:.4e}, failures {}",
            s.method, s.median_angle, s.avg_mse, s.failures
        );
    }
    Ok(())
}
