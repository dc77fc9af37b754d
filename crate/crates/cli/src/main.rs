use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use qlbs_core::analytic_bsm::bsm_put;
use qlbs_core::basis::BasisSpec;
use qlbs_core::experiments::{
    emit_report, run_scenario, ReportFormat, ScenarioConfig, ScenarioKind, ScenarioResult,
};
use qlbs_core::market_sim::{
    compute_states, load_paths, simulate_gbm, write_paths, MarketParams, PathSet, StateKind,
    StateSeries,
};
use qlbs_core::numerics::Regularizer;
use qlbs_core::qlbs_dp::{run_model_based, RiskParams};
use qlbs_core::qlbs_fqi::{
    build_offline_dataset, perturb_actions, run_fqi, ActionRule, OfflineDataset,
};

#[derive(Parser)]
#[command(name = "qlbs", version, about = "QLBS option pricing and hedging")]
struct Cli {
    /// Log level (error, warn, info, debug, trace); RUST_LOG also works.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate GBM paths and write them as CSV.
    Simulate {
        #[command(flatten)]
        market: MarketArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Black-Scholes put price and delta.
    PriceBs {
        #[arg(long, default_value_t = 100.0)]
        s0: f64,
        #[arg(long, default_value_t = 100.0)]
        strike: f64,
        #[arg(long, default_value_t = 0.03)]
        r: f64,
        #[arg(long, default_value_t = 0.15)]
        sigma: f64,
        #[arg(long, default_value_t = 1.0)]
        maturity: f64,
        #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
        format: OutputFormat,
    },
    /// Model-based QLBS price by backward dynamic programming.
    PriceQlbsDp {
        #[command(flatten)]
        pricing: PricingArgs,
    },
    /// Model-free QLBS price by fitted Q iteration on noisy-action data.
    PriceQlbsFqi {
        #[command(flatten)]
        pricing: PricingArgs,
        /// Multiplicative action noise level in [0, 1].
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[arg(long, value_enum, default_value_t = RuleArg::Observed)]
        action_rule: RuleArg,
        /// Write the generated offline dataset to this CSV file.
        #[arg(long)]
        dataset_out: Option<PathBuf>,
        /// Price from an existing offline dataset instead of simulating one.
        #[arg(long, conflicts_with = "paths")]
        dataset: Option<PathBuf>,
    },
    /// Run a named study and write its report.
    Experiment {
        /// vol-sweep, noise-grid, hedge-frequency, moneyness,
        /// transaction-costs, basis-sensitivity or single.
        name: String,
        /// JSON scenario config; missing fields take the study's defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
        /// Override the number of seeds.
        #[arg(long)]
        seeds: Option<usize>,
        /// Exit non-zero if any cell failed.
        #[arg(long)]
        strict: bool,
    },
}

#[derive(Args, Clone)]
struct MarketArgs {
    #[arg(long, default_value_t = 100.0)]
    s0: f64,
    #[arg(long, default_value_t = 0.05)]
    mu: f64,
    #[arg(long, default_value_t = 0.15)]
    sigma: f64,
    #[arg(long, default_value_t = 0.03)]
    r: f64,
    #[arg(long, default_value_t = 1.0)]
    maturity: f64,
    #[arg(long, default_value_t = 24)]
    n_steps: usize,
    #[arg(long, default_value_t = 10_000)]
    n_paths: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

impl MarketArgs {
    fn params(&self) -> MarketParams {
        MarketParams {
            s0: self.s0,
            mu: self.mu,
            sigma: self.sigma,
            r: self.r,
            maturity: self.maturity,
            n_steps: self.n_steps,
            n_paths: self.n_paths,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct PricingArgs {
    #[command(flatten)]
    market: MarketArgs,
    /// Load paths from CSV instead of simulating.
    #[arg(long)]
    paths: Option<PathBuf>,
    /// Time step for a path file without metadata.
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long, default_value_t = 100.0)]
    strike: f64,
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    /// Include the drift term in the hedge (default is the pure-risk hedge).
    #[arg(long)]
    full_hedge: bool,
    #[arg(long, value_enum, default_value_t = StateArg::X)]
    state: StateArg,
    #[arg(long, default_value_t = 12)]
    n_splines: usize,
    /// B-spline order (polynomial degree + 1).
    #[arg(long, default_value_t = 4)]
    spline_order: usize,
    /// Ridge: `trace:F` (F times the mean diagonal), `abs:V`, or a bare
    /// number meaning `trace:`.
    #[arg(long, default_value = "trace:1e-9", value_parser = parse_ridge)]
    ridge: Regularizer,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum StateArg {
    /// Drift-adjusted log price.
    X,
    /// Stock price.
    S,
    /// Log price level.
    LnS,
    /// One-step log return.
    DlnS,
}

impl From<StateArg> for StateKind {
    fn from(s: StateArg) -> Self {
        match s {
            StateArg::X => StateKind::DriftAdjusted,
            StateArg::S => StateKind::Price,
            StateArg::LnS => StateKind::LogPrice,
            StateArg::DlnS => StateKind::LogReturn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Observed,
    Greedy,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum OutputFormat {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

fn parse_ridge(s: &str) -> std::result::Result<Regularizer, String> {
    let (kind, value) = s.split_once(':').unwrap_or(("trace", s));
    let v: f64 = value
        .parse()
        .map_err(|_| format!("bad ridge value `{value}`"))?;
    if !(v.is_finite() && v >= 0.0) {
        return Err(format!("ridge must be >= 0, got {v}"));
    }
    match kind {
        "trace" => Ok(Regularizer::TraceScaled(v)),
        "abs" => Ok(Regularizer::Absolute(v)),
        _ => Err(format!("unknown ridge kind `{kind}`; use trace: or abs:")),
    }
}

#[derive(Serialize)]
struct PriceReport {
    method: &'static str,
    state: &'static str,
    price: f64,
    hedge_t0: Option<f64>,
    bsm_price: f64,
    bsm_delta: f64,
    n_paths: usize,
    n_steps: usize,
}

fn print_report(report: &PriceReport, format: OutputFormat) -> Result<()> {
    match format {
        OutputFormat::Json => println!("{}", serde_json::to_string_pretty(report)?),
        OutputFormat::Text => {
            println!("method     {}", report.method);
            println!("state      {}", report.state);
            println!("price      {:.6}", report.price);
            if let Some(h) = report.hedge_t0 {
                println!("hedge_t0   {h:.6}");
            }
            println!("bsm_price  {:.6}", report.bsm_price);
            println!("bsm_delta  {:.6}", report.bsm_delta);
            println!("paths      {} x {} steps", report.n_paths, report.n_steps);
        }
    }
    Ok(())
}

fn obtain_paths(args: &PricingArgs) -> Result<PathSet> {
    match &args.paths {
        Some(p) => {
            load_paths(p, args.dt).with_context(|| format!("loading paths from {}", p.display()))
        }
        None => Ok(simulate_gbm(&args.market.params())?),
    }
}

fn bsm_for(paths: &PathSet, args: &PricingArgs) -> (f64, f64) {
    let p = &paths.params;
    // fixtures may lack sigma; fall back to the command-line value
    let sigma = if p.sigma > 0.0 {
        p.sigma
    } else {
        args.market.sigma
    };
    let q = bsm_put(paths.prices[[0, 0]], args.strike, p.r, sigma, p.maturity);
    (q.price, q.delta)
}

fn price_dp(args: &PricingArgs) -> Result<()> {
    let paths = obtain_paths(args)?;
    let kind = StateKind::from(args.state);
    let risk = RiskParams::new(args.lambda, !args.full_hedge, paths.params.r, paths.dt)?;
    let spec = BasisSpec::for_states(
        &compute_states(&paths, kind),
        args.n_splines,
        args.spline_order,
    )?;
    let sol = run_model_based(&paths, kind, &spec, args.strike, &risk, args.ridge)?;
    let (bsm_price, bsm_delta) = bsm_for(&paths, args);
    print_report(
        &PriceReport {
            method: "dp",
            state: kind.label(),
            price: sol.price_t0,
            hedge_t0: Some(sol.hedge_t0),
            bsm_price,
            bsm_delta,
            n_paths: paths.n_paths(),
            n_steps: paths.n_steps(),
        },
        args.format,
    )
}

fn price_fqi(
    args: &PricingArgs,
    noise: f64,
    rule: RuleArg,
    dataset_out: Option<&Path>,
    dataset_in: Option<&Path>,
) -> Result<()> {
    let rule = match rule {
        RuleArg::Observed => ActionRule::Observed,
        RuleArg::Greedy => ActionRule::Greedy,
    };
    let gamma_for = |dt: f64, r: f64| (-r * dt).exp();
    let (dataset, gamma, bsm) = match dataset_in {
        Some(file) => {
            let ds = OfflineDataset::read_csv(file)
                .with_context(|| format!("loading dataset {}", file.display()))?;
            let m = args.market.params();
            let gamma = gamma_for(m.dt(), m.r);
            let q = bsm_put(m.s0, args.strike, m.r, m.sigma, m.maturity);
            (ds, gamma, (q.price, q.delta))
        }
        None => {
            let paths = obtain_paths(args)?;
            let kind = StateKind::from(args.state);
            let risk = RiskParams::new(args.lambda, !args.full_hedge, paths.params.r, paths.dt)?;
            let spec = BasisSpec::for_states(
                &compute_states(&paths, kind),
                args.n_splines,
                args.spline_order,
            )?;
            let dp = run_model_based(&paths, kind, &spec, args.strike, &risk, args.ridge)?;
            let noisy = perturb_actions(dp.hedges.view(), noise, paths.params.seed)?;
            let ds = build_offline_dataset(&paths, kind, noisy.view(), args.strike, &risk)?;
            (ds, risk.gamma, bsm_for(&paths, args))
        }
    };
    if let Some(out) = dataset_out {
        dataset.write_csv(out)?;
        info!("wrote dataset to {}", out.display());
    }
    let series = StateSeries {
        values: dataset.states.clone(),
        kind: dataset.state_kind,
    };
    let spec = BasisSpec::for_states(&series, args.n_splines, args.spline_order)?;
    let sol = run_fqi(&dataset, &spec, gamma, args.ridge, rule)?;
    print_report(
        &PriceReport {
            method: "fqi",
            state: dataset.state_kind.label(),
            price: sol.price_t0,
            hedge_t0: None,
            bsm_price: bsm.0,
            bsm_delta: bsm.1,
            n_paths: dataset.n_paths(),
            n_steps: dataset.n_steps(),
        },
        args.format,
    )
}

fn print_summary(result: &ScenarioResult) {
    println!(
        "{:>4} {:>5} {:>6} {:>6} {:>4} {:>5} {:>7} {:>8} {:>6} {:>4} {:>3} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "cell", "state", "sigma", "K", "T", "eta", "strike", "lambda", "c", "N", "ord", "bsm", "dp", "hedge_t0", "fqi", "tw_mean", "tw_med"
    );
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for s in &result.summary {
        let p = &s.params;
        println!(
            "{:>4} {:>5} {:>6} {:>6} {:>4} {:>5} {:>7} {:>8} {:>6} {:>4} {:>3} {:>9.4} {:>9} {:>9} {:>9} {:>9} {:>9}",
            s.cell,
            s.state.label(),
            p.sigma,
            p.n_paths,
            p.n_steps,
            p.noise,
            p.strike,
            p.lambda,
            p.cost_rate.map_or("-".into(), |c| c.to_string()),
            p.n_basis,
            p.spline_order,
            s.bsm_price,
            f(s.dp_price),
            f(s.dp_hedge_t0),
            f(s.fqi_price),
            f(s.tw_mean),
            f(s.tw_median)
        );
    }
}

fn merge_json(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn experiment(
    name: &str,
    config: Option<&Path>,
    out: Option<&Path>,
    format: FormatArg,
    seeds: Option<usize>,
    strict: bool,
) -> Result<ExitCode> {
    let Some(kind) = ScenarioKind::from_name(name) else {
        let names: Vec<_> = ScenarioKind::ALL.iter().map(|k| k.name()).collect();
        bail!(
            "unknown experiment `{name}`; expected one of {}",
            names.join(", ")
        );
    };
    let mut cfg = match config {
        Some(file) => {
            let text = std::fs::read_to_string(file)
                .with_context(|| format!("reading {}", file.display()))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", file.display()))?;
            // fields absent from the file keep this study's defaults
            let mut merged = serde_json::to_value(ScenarioConfig::for_scenario(kind))?;
            merge_json(&mut merged, value);
            serde_json::from_value(merged)
                .with_context(|| format!("invalid config {}", file.display()))?
        }
        None => ScenarioConfig::for_scenario(kind),
    };
    cfg.scenario = kind;
    if let Some(n) = seeds {
        cfg.n_seeds = n;
    }
    let out = out.map(Path::to_path_buf).or_else(|| cfg.output.clone());
    let result = run_scenario(&cfg)?;
    print_summary(&result);
    if let Some(path) = &out {
        let fmt = match format {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        };
        emit_report(&result, path, fmt)?;
        eprintln!("wrote {}", path.display());
    }
    let failures = result.n_failures();
    if failures > 0 {
        eprintln!("{failures} of {} rows failed", result.rows.len());
        for r in result.rows.iter().filter(|r| r.error.is_some()) {
            eprintln!(
                "  cell {} state {} seed {}: {}",
                r.cell,
                r.state.label(),
                r.seed,
                r.error.as_deref().unwrap_or("")
            );
        }
        if strict {
            return Ok(ExitCode::FAILURE);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate { market, out } => {
            let paths = simulate_gbm(&market.params())?;
            write_paths(&paths, &out)?;
            eprintln!(
                "wrote {} paths x {} steps to {}",
                paths.n_paths(),
                paths.n_steps(),
                out.display()
            );
        }
        Command::PriceBs {
            s0,
            strike,
            r,
            sigma,
            maturity,
            format,
        } => {
            let q = bsm_put(s0, strike, r, sigma, maturity);
            match format {
                OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&q)?),
                OutputFormat::Text => {
                    println!("price  {:.6}", q.price);
                    println!("delta  {:.6}", q.delta);
                }
            }
        }
        Command::PriceQlbsDp { pricing } => price_dp(&pricing)?,
        Command::PriceQlbsFqi {
            pricing,
            noise,
            action_rule,
            dataset_out,
            dataset,
        } => price_fqi(
            &pricing,
            noise,
            action_rule,
            dataset_out.as_deref(),
            dataset.as_deref(),
        )?,
        Command::Experiment {
            name,
            config,
            out,
            format,
            seeds,
            strict,
        } => {
            return experiment(
                &name,
                config.as_deref(),
                out.as_deref(),
                format,
                seeds,
                strict,
            )
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
