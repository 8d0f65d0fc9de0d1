use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use spatial_multinomial::diagnostics::{parameter_traces, split_rhat, summarize_chain};
use spatial_multinomial::io::{
    areas_to_csv, bounding_box, class_frequency_table, draws_to_csv, load_dataset, load_locations,
    locations_to_csv, prediction_to_csv, read_chain, rows_to_csv, save_dataset, write_atomic, write_chain,
    write_json, AreaTiling, GridSpec, KnotSpec, PredictionSpec, RunConfig,
};
use spatial_multinomial::prediction::{predict_summary, AreaPartition};
use spatial_multinomial::sampler::{derive_seed, initial_state, run_chain_from, run_chains};
use spatial_multinomial::selection::{oos_lpd, ternary_search, ternary_search_u, waic};
use spatial_multinomial::simulation::{
    run_dimension_study, run_laplace_accuracy_study, simulate_dataset, FitConfig, SimConfig,
};
use spatial_multinomial::spatial_basis::{grid_locations, Bounds};
use spatial_multinomial::{ChainStore, Dataset, Error, Location, ParamState};

/// Thread cap for parallel chains and replicates.
const THREADS_ENV: &str = "SPMN_THREADS";

#[derive(Parser)]
#[command(name = "spmn", version, about = "Reduced-rank spatial multinomial models")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset on the unit square.
    Simulate(SimulateArgs),
    /// Fit the model for one latent dimension.
    Fit(FitArgs),
    /// Choose the latent dimension by ternary search on WAIC.
    SelectDim(SelectArgs),
    /// Posterior predictive summaries on a grid.
    Predict(PredictArgs),
    /// Posterior summary table.
    Summarize(SummarizeArgs),
    /// Acceptance rates, trace extracts and split R-hat.
    Diagnostics(DiagnosticsArgs),
    /// Simulation studies: dimension selection or Laplace accuracy.
    Study(StudyArgs),
}

#[derive(Args)]
struct StudyArgs {
    #[command(subcommand)]
    kind: StudyKind,
    /// Simulation settings (JSON); defaults are the 50x50 grid, J = 5, u = 2 design.
    #[arg(long, global = true)]
    sim_config: Option<PathBuf>,
    /// Fitting settings (JSON with `sampler`, `priors`, `u_max`).
    #[arg(long, global = true)]
    fit_config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    n_samples: Option<usize>,
    #[arg(long, global = true)]
    n_burnin: Option<usize>,
    #[arg(long, global = true, default_value = "study")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum StudyKind {
    /// Fit u = 1..u_max on simulated replicates and compare held-out lpd.
    Dimension {
        #[arg(long, default_value_t = 10)]
        replicates: usize,
    },
    /// Exact vs nested-Laplace fits across marginal precisions.
    Laplace {
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,1,2.5")]
        omega: Vec<f64>,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation settings (JSON); defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "sim")]
    out: PathBuf,
}

/// Options shared by `fit` and `select-dim`; flags override the config file.
#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out dataset CSV, scored by log predictive density.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    n_burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Latent dimension.
    #[arg(long)]
    u: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    /// Also write the draws as CSV.
    #[arg(long)]
    csv: bool,
    /// Continue from the last state of a saved chain (no burn-in, frozen step size).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    u_min: Option<usize>,
    #[arg(long)]
    u_max: Option<usize>,
    /// Comma-separated scores for u_min..=u_max used instead of fitting.
    #[arg(long, value_delimiter = ',')]
    stub_waic: Option<Vec<f64>>,
}

#[derive(Args)]
struct PredictArgs {
    /// Chain artifact.
    #[arg(long)]
    chain: PathBuf,
    /// Run configuration whose `prediction` section supplies defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV of prediction locations (`x`, `y`).
    #[arg(long, conflicts_with = "grid")]
    locations: Option<PathBuf>,
    /// Regular grid size `NX,NY`.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    /// Grid extent `XMIN,XMAX,YMIN,YMAX` (default: the knot bounding box).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    bounds: Option<Vec<f64>>,
    /// Draw categorical outcomes for outcome frequencies and area summaries.
    #[arg(long)]
    outcomes: bool,
    /// Quantile levels, e.g. `0.05,0.95`.
    #[arg(long, value_delimiter = ',')]
    quantiles: Option<Vec<f64>>,
    /// Class union to report, as `label+label`; repeatable.
    #[arg(long)]
    union: Vec<String>,
    /// Area tile size `WIDTH,HEIGHT`.
    #[arg(long, value_delimiter = ',')]
    area_size: Option<Vec<f64>>,
    /// Class whose area occurrence is reported; repeatable.
    #[arg(long)]
    area_class: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "predictions")]
    out: PathBuf,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long)]
    chain: PathBuf,
    /// Write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnosticsArgs {
    /// Chain artifacts; R-hat needs at least two.
    #[arg(long = "chain", required = true)]
    chains: Vec<PathBuf>,
    /// Number of evenly spaced values shown per trace.
    #[arg(long, default_value_t = 5)]
    extract: usize,
    /// Write the split R-hat table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidInput(_) | Error::Parse { .. } | Error::Format(_) | Error::Json(_) => 1,
            Error::SingularMatrix(_) | Error::Sampler(_) | Error::Io(_) => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(f) = init_threads() {
        eprintln!("error: {f}");
        return ExitCode::from(f.code);
    }
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::SelectDim(a) => select_dim(a),
        Command::Predict(a) => predict(a),
        Command::Summarize(a) => summarize(a),
        Command::Diagnostics(a) => diagnostics(a),
        Command::Study(a) => study(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::validation(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure {
            code: 2,
            message: format!("thread pool: {e}"),
        })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure {
        code: 2,
        message: format!("cannot create {}: {e}", dir.display()),
    })
}

#[derive(Serialize)]
struct SimTruth<'a> {
    config: &'a SimConfig,
    class_labels: &'a [String],
    truth: &'a ParamState,
    train_index: &'a [usize],
    test_index: &'a [usize],
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(p) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(p).map_err(|e| Failure::validation(format!("cannot read {}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::validation(format!("{}: {e}", p.display())))
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let mut cfg: SimConfig = read_json(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let sim = simulate_dataset(&cfg)?;
    create_dir(&a.out)?;
    save_dataset(&a.out.join("train.csv"), &sim.train)?;
    save_dataset(&a.out.join("test.csv"), &sim.test)?;
    write_atomic(&a.out.join("knots.csv"), &locations_to_csv(sim.knots.as_slice(), &[], None)?)?;
    let labels = cfg.class_labels();
    let header: Vec<String> = labels.iter().map(|l| format!("p_{l}")).collect();
    let grid = cfg.grid()?;
    write_atomic(
        &a.out.join("grid_truth.csv"),
        &locations_to_csv(&grid, &header, Some(&sim.grid_probs))?,
    )?;
    write_json(
        &a.out.join("truth.json"),
        &SimTruth {
            config: &cfg,
            class_labels: &labels,
            truth: &sim.truth,
            train_index: &sim.train_index,
            test_index: &sim.test_index,
        },
    )?;
    let mut run = RunConfig::default();
    run.data = Some("train.csv".into());
    run.test_data = Some("test.csv".into());
    run.dataset.class_labels = Some(labels.clone());
    run.knots = KnotSpec::File {
        path: "knots.csv".into(),
    };
    run.u = Some(cfg.u_true);
    run.output_dir = "fit".into();
    write_json(&a.out.join("run.json"), &run)?;
    println!(
        "simulated {} training and {} test points, J = {}, u = {}, into {}",
        sim.train.n(),
        sim.test.n(),
        cfg.n_classes,
        cfg.u_true,
        a.out.display()
    );
    Ok(())
}

/// Loads a run configuration; relative paths inside it are taken from the file's directory.
fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(p) = path else {
        return Ok(RunConfig::default());
    };
    let mut cfg = RunConfig::load(p)?;
    let base = p.parent().unwrap_or(Path::new(""));
    let fix = |q: &mut PathBuf| {
        if q.is_relative() {
            *q = base.join(&*q);
        }
    };
    if let Some(d) = cfg.data.as_mut() {
        fix(d);
    }
    if let Some(d) = cfg.test_data.as_mut() {
        fix(d);
    }
    if let KnotSpec::File { path } = &mut cfg.knots {
        fix(path);
    }
    if let Some(PredictionSpec {
        grid: GridSpec::File { path },
        ..
    }) = cfg.prediction.as_mut()
    {
        fix(path);
    }
    fix(&mut cfg.output_dir);
    Ok(cfg)
}

impl RunArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(d) = &self.test_data {
            cfg.test_data = Some(d.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(n) = self.n_samples {
            cfg.sampler.n_samples = n;
        }
        if let Some(n) = self.n_burnin {
            cfg.sampler.n_burnin = n;
        }
        if let Some(t) = self.thin {
            cfg.sampler.thin = t;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
    }
}

fn load_data(cfg: &RunConfig) -> CliResult<(Dataset, Option<Dataset>)> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Failure::validation("no dataset given (use --data or the `data` key)"))?;
    let data = load_dataset(path, &cfg.dataset)?;
    println!("dataset {}: n = {}, J = {}", path.display(), data.n(), data.n_classes());
    for (label, count) in class_frequency_table(&data) {
        println!("  {label:<20} {count}");
    }
    let test = match &cfg.test_data {
        Some(p) => {
            let mut opts = cfg.dataset.clone();
            opts.class_labels.get_or_insert_with(|| data.class_labels().to_vec());
            let t = load_dataset(p, &opts)?;
            if t.class_labels() != data.class_labels() {
                return Err(Failure::validation(format!(
                    "{} has class labels {:?}, training data has {:?}",
                    p.display(),
                    t.class_labels(),
                    data.class_labels()
                )));
            }
            Some(t)
        }
        None => None,
    };
    Ok((data, test))
}

fn report_chain(chain: &ChainStore, test: Option<&Dataset>) -> CliResult<()> {
    println!(
        "u = {}: {} draws, {:.4} s per cycle ({:.1} s total), {} Newton fallbacks",
        chain.u,
        chain.n_draws(),
        chain.seconds_per_cycle(),
        chain.runtime_secs,
        chain.newton_fallbacks
    );
    println!("  {:<8} {:>10} {:>10}", "block", "accepted", "rate");
    for (name, t) in chain.acceptance.rows() {
        if t.proposed > 0 {
            println!("  {:<8} {:>10} {:>10.3}", name, t.accepted, t.rate());
        }
    }
    if chain.n_draws() >= 2 {
        println!("  WAIC {:.3}", waic(&chain.pointwise_loglik)?.waic);
    }
    if let Some(t) = test {
        if chain.n_draws() > 0 {
            println!("  held-out log predictive density {:.3}", oos_lpd(chain, t)?);
        }
    }
    Ok(())
}

fn write_chain_outputs(dir: &Path, stem: &str, chain: &ChainStore, csv: bool) -> CliResult<()> {
    let path = dir.join(format!("{stem}.spmn"));
    write_chain(&path, chain)?;
    println!("wrote {}", path.display());
    if csv {
        let p = dir.join(format!("{stem}_draws.csv"));
        write_atomic(&p, &draws_to_csv(chain)?)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn fit(a: FitArgs) -> CliResult<()> {
    let mut cfg = load_config(a.run.config.as_deref())?;
    a.run.apply(&mut cfg);
    if let Some(u) = a.u {
        cfg.u = Some(u);
    }
    if let Some(c) = a.chains {
        cfg.n_chains = c;
    }
    cfg.validate()?;
    let (data, test) = load_data(&cfg)?;
    create_dir(&cfg.output_dir)?;
    let sampler = cfg.effective_sampler();

    if let Some(prev_path) = &a.resume {
        let prev = read_chain(prev_path)?;
        if prev.class_labels != data.class_labels() {
            return Err(Failure::validation(format!(
                "{} was fitted to classes {:?}, dataset has {:?}",
                prev_path.display(),
                prev.class_labels,
                data.class_labels()
            )));
        }
        let mut s = sampler.clone();
        s.n_burnin = 0;
        s.adapt_phi = false;
        s.phi_rw_sd = prev.phi_rw_sd_final;
        let chain = run_chain_from(prev.last_state.clone(), &data, &prev.knots, &prev.priors, &s)?;
        report_chain(&chain, test.as_ref())?;
        return write_chain_outputs(&cfg.output_dir, "chain", &chain, a.csv);
    }

    let u = cfg
        .u
        .ok_or_else(|| Failure::validation("no latent dimension given (use --u or the `u` key)"))?;
    if u >= data.n_classes() {
        return Err(Failure::validation(format!(
            "u = {u} must be below J = {}",
            data.n_classes()
        )));
    }
    let knots = cfg.knots.build(data.locations())?;
    let priors = cfg.priors.build(data.n_classes(), u)?;
    let chains = if cfg.n_chains == 1 {
        let init = initial_state(&data, knots.len(), u, &priors)?;
        vec![run_chain_from(init, &data, &knots, &priors, &sampler)?]
    } else {
        run_chains(&data, &knots, &priors, u, &sampler, cfg.n_chains)?
    };
    for (c, chain) in chains.iter().enumerate() {
        if chains.len() > 1 {
            println!("chain {} (seed {}):", c + 1, chain.seed);
        }
        report_chain(chain, test.as_ref())?;
        let stem = if chains.len() == 1 {
            "chain".to_string()
        } else {
            format!("chain_{}", c + 1)
        };
        write_chain_outputs(&cfg.output_dir, &stem, chain, a.csv)?;
    }
    Ok(())
}

fn select_dim(a: SelectArgs) -> CliResult<()> {
    let mut cfg = load_config(a.run.config.as_deref())?;
    a.run.apply(&mut cfg);
    let [cfg_lo, cfg_hi] = cfg.u_range.unwrap_or([1, usize::MAX]);
    let lo = a.u_min.unwrap_or(cfg_lo);
    let hi = a.u_max.unwrap_or(cfg_hi);

    if let Some(scores) = &a.stub_waic {
        cfg.validate()?;
        if hi == usize::MAX {
            return Err(Failure::validation("stub mode needs --u-max"));
        }
        if lo == 0 || lo > hi || scores.len() != hi - lo + 1 {
            return Err(Failure::validation(format!(
                "stub mode needs 1 <= u_min <= u_max and one score per candidate ({} given for [{lo}, {hi}])",
                scores.len()
            )));
        }
        let trace = ternary_search(lo, hi, |u| Ok(scores[u - lo]))?;
        create_dir(&cfg.output_dir)?;
        let path = cfg.output_dir.join("dim_trace.json");
        write_json(&path, &trace)?;
        print_trace(&trace);
        println!("wrote {}", path.display());
        return Ok(());
    }

    cfg.validate()?;
    let (data, test) = load_data(&cfg)?;
    let hi = hi.min(data.n_logits());
    let knots = cfg.knots.build(data.locations())?;
    let (trace, best) = ternary_search_u(&data, &knots, &cfg.priors, &cfg.effective_sampler(), lo, hi)?;
    print_trace(&trace);
    report_chain(&best, test.as_ref())?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("dim_trace.json");
    write_json(&path, &trace)?;
    println!("wrote {}", path.display());
    write_chain_outputs(&cfg.output_dir, "chain", &best, false)
}

fn print_trace(trace: &spatial_multinomial::selection::DimSearchTrace) {
    println!("  {:>4} {:>14} {:>10}", "u", "WAIC", "seconds");
    for e in &trace.evaluated {
        println!("  {:>4} {:>14.3} {:>10.2}", e.u, e.waic, e.runtime_secs);
    }
    println!("selected u = {} after {} fits", trace.selected_u, trace.n_evaluated());
}

fn class_index(chain: &ChainStore, label: &str) -> CliResult<usize> {
    chain
        .class_labels
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| Failure::validation(format!("unknown class '{label}'; classes are {:?}", chain.class_labels)))
}

fn predict(a: PredictArgs) -> CliResult<()> {
    for (flag, v, len) in [
        ("--grid", a.grid.as_ref().map(Vec::len), 2),
        ("--bounds", a.bounds.as_ref().map(Vec::len), 4),
        ("--area-size", a.area_size.as_ref().map(Vec::len), 2),
    ] {
        if v.is_some_and(|v| v != len) {
            return Err(Failure::validation(format!("{flag} takes {len} comma-separated values")));
        }
    }
    let chain = read_chain(&a.chain)?;
    let cfg = load_config(a.config.as_deref())?;
    cfg.validate()?;
    let mut spec = cfg.prediction.clone();

    let locations: Vec<Location> = if let Some(p) = &a.locations {
        load_locations(p)?
    } else if let Some(g) = &a.grid {
        let bounds = match &a.bounds {
            Some(b) => Bounds::new(b[0], b[1], b[2], b[3])?,
            None => bounding_box(chain.knots.as_slice())?,
        };
        grid_locations(g[0], g[1], &bounds)?
    } else if let Some(s) = &spec {
        s.grid.locations()?
    } else {
        return Err(Failure::validation(
            "no prediction locations (use --locations, --grid or the `prediction` key)",
        ));
    };

    let mut opts = spec.as_ref().map(|s| s.options.clone()).unwrap_or_default();
    if a.outcomes {
        opts.want_outcomes = true;
    }
    if let Some(q) = &a.quantiles {
        opts.quantiles = q.clone();
    }
    for u in &a.union {
        let subset = u
            .split('+')
            .map(|l| class_index(&chain, l.trim()))
            .collect::<CliResult<Vec<_>>>()?;
        opts.unions.push(subset);
    }
    for c in &a.area_class {
        opts.area_classes.push(class_index(&chain, c)?);
    }
    let tiling = match &a.area_size {
        Some(s) => Some(AreaTiling {
            width: s[0],
            height: s[1],
            origin: None,
        }),
        None => spec.take().and_then(|s| s.areas),
    };
    let areas = match &tiling {
        Some(t) => {
            let origin = match t.origin {
                Some(o) => o,
                None => {
                    let b = bounding_box(&locations)?;
                    Location::new(b.xmin, b.ymin)
                }
            };
            if opts.area_classes.is_empty() {
                opts.area_classes = (0..chain.n_classes()).collect();
            }
            opts.want_outcomes = true;
            Some(AreaPartition::rectangular(&locations, origin, t.width, t.height)?)
        }
        None => None,
    };
    if areas.is_none() && !opts.area_classes.is_empty() {
        return Err(Failure::validation("area classes need an area tiling (--area-size)"));
    }
    let seed = a.seed.or(cfg.seed).unwrap_or_else(|| derive_seed(chain.seed, u64::MAX));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let summary = predict_summary(&chain, &locations, areas.as_ref(), &opts, &mut rng)?;
    create_dir(&a.out)?;
    let p = a.out.join("locations.csv");
    write_atomic(&p, &prediction_to_csv(&summary)?)?;
    println!("{} locations x {} classes from {} draws; wrote {}", locations.len(), chain.n_classes(), summary.n_draws, p.display());
    if areas.is_some() {
        let p = a.out.join("areas.csv");
        write_atomic(&p, &areas_to_csv(&summary)?)?;
        println!("{} areas; wrote {}", summary.area_labels.len(), p.display());
    }
    Ok(())
}

fn summarize(a: SummarizeArgs) -> CliResult<()> {
    let chain = read_chain(&a.chain)?;
    if chain.n_draws() == 0 {
        return Err(Failure::validation(format!("{} holds no draws", a.chain.display())));
    }
    let rows = summarize_chain(&chain);
    println!(
        "{:<14} {:>10} {:>10} {:>10} {:>10} {:>10} {:>9}",
        "parameter", "mean", "sd", "q05", "q50", "q95", "ess"
    );
    for s in &rows {
        println!(
            "{:<14} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>9.1}",
            s.name, s.mean, s.sd, s.q05, s.q50, s.q95, s.ess
        );
    }
    if let Some(p) = &a.out {
        write_atomic(p, &rows_to_csv(&rows)?)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct RhatRow {
    parameter: String,
    rhat: f64,
}

fn diagnostics(a: DiagnosticsArgs) -> CliResult<()> {
    let chains = a
        .chains
        .iter()
        .map(|p| read_chain(p).map_err(Failure::from))
        .collect::<CliResult<Vec<_>>>()?;
    for (path, c) in a.chains.iter().zip(&chains) {
        println!("{} (u = {}, {} draws, seed {})", path.display(), c.u, c.n_draws(), c.seed);
        println!("  {:<8} {:>10} {:>10} {:>10}", "block", "accepted", "proposed", "rate");
        for (name, t) in c.acceptance.rows() {
            println!("  {:<8} {:>10} {:>10} {:>10.3}", name, t.accepted, t.proposed, t.rate());
        }
        let traces = parameter_traces(c);
        if a.extract > 0 && c.n_draws() > 0 {
            println!("  trace extracts:");
            for (name, x) in &traces {
                let n = a.extract.min(x.len());
                let picks: Vec<String> = (0..n)
                    .map(|i| {
                        let idx = if n == 1 { 0 } else { i * (x.len() - 1) / (n - 1) };
                        format!("{:.4}", x[idx])
                    })
                    .collect();
                println!("    {:<14} {}", name, picks.join(" "));
            }
        }
    }
    if chains.len() < 2 {
        println!("split R-hat needs at least two chains");
        return Ok(());
    }
    let first = &chains[0];
    if chains
        .iter()
        .any(|c| c.u != first.u || c.class_labels != first.class_labels || c.knots.len() != first.knots.len())
    {
        return Err(Failure::validation("chains differ in dimensions or class labels"));
    }
    let per_chain: Vec<Vec<(String, Vec<f64>)>> = chains.iter().map(parameter_traces).collect();
    let mut rows = Vec::new();
    println!("{:<14} {:>8}", "parameter", "R-hat");
    for (p, (name, _)) in per_chain[0].iter().enumerate() {
        let draws: Vec<Vec<f64>> = per_chain.iter().map(|t| t[p].1.clone()).collect();
        let rhat = split_rhat(&draws)?;
        println!("{name:<14} {rhat:>8.4}");
        rows.push(RhatRow {
            parameter: name.clone(),
            rhat,
        });
    }
    if let Some(p) = &a.out {
        write_atomic(p, &rows_to_csv(&rows)?)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct LogitRow {
    omega: f64,
    exact: f64,
    nested: f64,
}

fn study(a: StudyArgs) -> CliResult<()> {
    let mut sim: SimConfig = read_json(a.sim_config.as_deref())?;
    let mut fit: FitConfig = read_json(a.fit_config.as_deref())?;
    if let Some(s) = a.seed {
        sim.seed = s;
        fit.sampler.seed = s;
    }
    if let Some(n) = a.n_samples {
        fit.sampler.n_samples = n;
    }
    if let Some(n) = a.n_burnin {
        fit.sampler.n_burnin = n;
    }
    let mut problems = sim.problems();
    problems.extend(fit.priors.problems());
    problems.extend(fit.sampler.problems().into_iter().map(|p| format!("sampler: {p}")));
    if !problems.is_empty() {
        return Err(Failure::validation(format!(
            "{} configuration problem(s):\n  {}",
            problems.len(),
            problems.join("\n  ")
        )));
    }
    create_dir(&a.out)?;
    match a.kind {
        StudyKind::Dimension { replicates } => {
            let study = run_dimension_study(replicates, &sim, &fit)?;
            write_atomic(&a.out.join("dimension_rows.csv"), &rows_to_csv(&study.rows)?)?;
            write_atomic(&a.out.join("dimension_replicates.csv"), &rows_to_csv(&study.replicates)?)?;
            write_json(&a.out.join("dimension_summary.json"), &study)?;
            println!("mean delta-lpd over {replicates} replicates (standard error):");
            for (name, m) in [
                ("WAIC-selected", study.waic_selected),
                ("LOO-selected", study.loo_selected),
                ("full rank", study.full_rank),
                ("true u", study.true_u),
            ] {
                println!("  {name:<14} {:>9.3} ({:.3})", m.mean, m.se);
            }
        }
        StudyKind::Laplace { omega } => {
            let study = run_laplace_accuracy_study(&omega, &sim, &fit)?;
            write_json(&a.out.join("laplace_summary.json"), &study)?;
            let rows: Vec<LogitRow> = study
                .logits
                .iter()
                .flat_map(|(w, x, y)| {
                    x.iter().zip(y).map(move |(e, n)| LogitRow {
                        omega: *w,
                        exact: *e,
                        nested: *n,
                    })
                })
                .collect();
            write_atomic(&a.out.join("laplace_logits.csv"), &rows_to_csv(&rows)?)?;
            println!("  {:>8} {:>10} {:>8}", "omega", "w accept", "slope");
            for r in &study.rows {
                println!("  {:>8} {:>10.3} {:>8.3}", r.omega, r.w_acceptance, r.slope);
            }
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
