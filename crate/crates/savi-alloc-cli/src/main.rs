//! Experiment front end: configures models from JSON, runs the suites, and
//! emits CSV/JSON (and trace) outputs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use nalgebra::DVector;

use savi_alloc::alloc::{
    lambda_domain_allocate, oeu_baseline, report_at, LambdaMap, OmegaSchedule,
};
use savi_alloc::graph::NodeId;
use savi_alloc::model::{
    two_level_quadratic, FrameData, GopModel, GopModelSpec, LatentState, LatentValues, Model,
    Nonlinearity, TwoLevelParams,
};
use savi_alloc::oracle::{unrolled_hypergradient, OracleConfig};
use savi_alloc::savi::{
    grad_dag, savi_accurate_2level, savi_accurate_dag, savi_approx, savi_naive, solve_suffix,
    windowed_gradient, SaviConfig, SaviVariant,
};

#[derive(Parser, Debug)]
#[command(
    name = "savi-alloc",
    about = "SAVI bit-allocation experiment runner",
    version
)]
struct Cli {
    /// Experiment suite to run.
    suite: Option<String>,
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Override: suite name (alternative to the positional argument).
    #[arg(long = "suite")]
    suite_flag: Option<String>,
    /// Override: ascent steps K.
    #[arg(long)]
    steps: Option<usize>,
    /// Override: ascent learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Override: window size C for the scalable variant.
    #[arg(long)]
    window: Option<usize>,
    /// Override: SAVI variant.
    #[arg(long)]
    variant: Option<String>,
    /// Override: run a single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Override: output path stem.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Suite {
    VerifyGradients,
    CompareVariants,
    Allocate,
    WindowSweep,
    DensityAnalog,
    Trace,
}

impl Suite {
    fn parse(s: &str) -> Option<Suite> {
        match s {
            "verify-gradients" => Some(Suite::VerifyGradients),
            "compare-variants" => Some(Suite::CompareVariants),
            "allocate" => Some(Suite::Allocate),
            "window-sweep" => Some(Suite::WindowSweep),
            "density-analog" => Some(Suite::DensityAnalog),
            "trace" => Some(Suite::Trace),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Suite::VerifyGradients => "verify-gradients",
            Suite::CompareVariants => "compare-variants",
            Suite::Allocate => "allocate",
            Suite::WindowSweep => "window-sweep",
            Suite::DensityAnalog => "density-analog",
            Suite::Trace => "trace",
        }
    }
}

/// Flat JSON config; overrides from the command line are applied on top.
#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    suite: Option<String>,
    graph: Option<String>,
    frame_count: Option<usize>,
    latent_dim: Option<usize>,
    pixel_count: Option<usize>,
    lambda0: Option<f64>,
    temporal_correlation: Option<f64>,
    nonlinearity: Option<String>,
    prior_radius: Option<f64>,
    steps: Option<usize>,
    learning_rate: Option<f64>,
    window: Option<usize>,
    variant: Option<String>,
    omega: Option<f64>,
    seeds: Option<Vec<u64>>,
    output_path: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Numerical(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Config(msg.into()))
}

/// Validated experiment configuration.
#[derive(Debug, Clone)]
struct ExperimentConfig {
    suite: Suite,
    graph: String,
    frame_count: usize,
    latent_dim: usize,
    pixel_count: usize,
    lambda0: f64,
    temporal_correlation: f64,
    nonlinearity: Nonlinearity,
    prior_radius: f64,
    steps: usize,
    learning_rate: f64,
    window: Option<usize>,
    variant: Option<SaviVariant>,
    omega: f64,
    seeds: Vec<u64>,
    output_path: PathBuf,
}

fn require<T>(v: Option<T>, field: &str, suite: &str) -> Result<T, CliError> {
    match v {
        Some(v) => Ok(v),
        None => config_err(format!("missing field `{field}` (required by suite {suite})")),
    }
}

fn parse_variant(s: &str) -> Result<SaviVariant, CliError> {
    match s {
        "naive" => Ok(SaviVariant::Naive),
        "accurate2" => Ok(SaviVariant::Accurate2),
        "accurate-dag" => Ok(SaviVariant::AccurateDag),
        "approx" => Ok(SaviVariant::Approx),
        "approx-scalable" => Ok(SaviVariant::ApproxScalable),
        other => config_err(format!("unknown variant `{other}`")),
    }
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", cli.config.display())))?;
    let mut raw: RawConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid JSON in {}: {e}", cli.config.display())))?;

    if let Some(s) = cli.steps {
        raw.steps = Some(s);
    }
    if let Some(a) = cli.learning_rate {
        raw.learning_rate = Some(a);
    }
    if let Some(w) = cli.window {
        raw.window = Some(w);
    }
    if let Some(v) = &cli.variant {
        raw.variant = Some(v.clone());
    }
    if let Some(s) = cli.seed {
        raw.seeds = Some(vec![s]);
    }
    if let Some(o) = &cli.out {
        raw.output_path = Some(o.clone());
    }

    let suite_name = cli
        .suite
        .clone()
        .or_else(|| cli.suite_flag.clone())
        .or(raw.suite.clone());
    let suite_name = match suite_name {
        Some(s) => s,
        None => return config_err("missing field `suite` (positional argument or config key)"),
    };
    let suite = match Suite::parse(&suite_name) {
        Some(s) => s,
        None => return config_err(format!("unknown suite `{suite_name}`")),
    };

    let nonlinearity = match raw.nonlinearity.as_deref() {
        None | Some("linear") => Nonlinearity::Linear,
        Some("tanh") => Nonlinearity::Tanh,
        Some(other) => return config_err(format!("unknown nonlinearity `{other}`")),
    };
    let graph = raw.graph.unwrap_or_else(|| "chain".to_string());
    if graph != "chain" && graph != "diamond" {
        return config_err(format!("unknown graph `{graph}`"));
    }

    let name = suite.name();
    let steps = if suite == Suite::VerifyGradients {
        raw.steps.unwrap_or(2)
    } else {
        require(raw.steps, "steps", name)?
    };
    let learning_rate = require(raw.learning_rate, "learning_rate", name)?;
    let seeds = require(raw.seeds, "seeds", name)?;
    if seeds.is_empty() {
        return config_err("field `seeds` must be non-empty");
    }
    let output_path = require(raw.output_path, "output_path", name)?;
    let variant = raw.variant.as_deref().map(parse_variant).transpose()?;
    if suite == Suite::WindowSweep && raw.frame_count.unwrap_or(0) < 2 {
        return config_err("field `frame_count` must be at least 2 for suite window-sweep");
    }

    // density-analog runs a fixed two-level family; the GoP shape is unused.
    let frame_count = if suite == Suite::DensityAnalog {
        raw.frame_count.unwrap_or(4)
    } else {
        require(raw.frame_count, "frame_count", name)?
    };
    Ok(ExperimentConfig {
        suite,
        graph,
        frame_count,
        latent_dim: raw.latent_dim.unwrap_or(2),
        pixel_count: raw.pixel_count.unwrap_or(2),
        lambda0: raw.lambda0.unwrap_or(1.0),
        temporal_correlation: raw.temporal_correlation.unwrap_or(0.7),
        nonlinearity,
        prior_radius: raw.prior_radius.unwrap_or(0.8),
        steps,
        learning_rate,
        window: raw.window,
        variant,
        omega: raw.omega.unwrap_or(1.0),
        seeds,
        output_path,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
struct ResultRow {
    suite: String,
    seed: u64,
    variant: String,
    steps: usize,
    learning_rate: f64,
    window: Option<usize>,
    final_objective: f64,
    gop_cost: f64,
    eval_count: u64,
    wall_time_ms: f64,
}

fn fmt_float(x: f64) -> String {
    // 12 significant digits, plain decimal-point formatting.
    format!("{x:.11e}")
}

fn emit_csv(rows: &[ResultRow], path: &Path) -> Result<(), CliError> {
    if rows.is_empty() {
        return Err(CliError::Numerical("no result rows to emit".into()));
    }
    let mut out = String::from(
        "suite,seed,variant,steps,learning_rate,window,final_objective,gop_cost,eval_count,wall_time_ms\n",
    );
    for r in rows {
        let window = r.window.map(|w| w.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.suite,
            r.seed,
            r.variant,
            r.steps,
            fmt_float(r.learning_rate),
            window,
            fmt_float(r.final_objective),
            fmt_float(r.gop_cost),
            r.eval_count,
            fmt_float(r.wall_time_ms),
        ));
    }
    std::fs::write(path, out).map_err(|e| CliError::Numerical(format!("write {}: {e}", path.display())))
}

fn emit_json(rows: &[ResultRow], path: &Path) -> Result<(), CliError> {
    let json = serde_json::json!({ "rows": rows });
    std::fs::write(path, serde_json::to_string_pretty(&json).expect("serializable"))
        .map_err(|e| CliError::Numerical(format!("write {}: {e}", path.display())))
}

fn build_model(cfg: &ExperimentConfig, seed: u64) -> Result<GopModel, CliError> {
    let spec = GopModelSpec::new(cfg.frame_count, cfg.latent_dim, cfg.pixel_count, seed)
        .with_nonlinearity(cfg.nonlinearity)
        .with_lambda0(cfg.lambda0)
        .with_correlation(cfg.temporal_correlation)
        .with_prior_radius(cfg.prior_radius);
    match cfg.graph.as_str() {
        "chain" => Ok(GopModel::chain(spec)),
        "diamond" => {
            if cfg.frame_count != 4 {
                return config_err("graph `diamond` requires frame_count = 4");
            }
            Ok(GopModel::diamond(spec))
        }
        other => config_err(format!("unknown graph `{other}`")),
    }
}

fn favi_values<M: Model>(model: &M, frames: &FrameData) -> LatentValues {
    let mut v = LatentValues::zeros(model.graph());
    for &n in model.graph().topo_order() {
        let y = model.favi_init(frames, &v, n);
        v.set(n, y);
    }
    v
}

fn variant_name(v: SaviVariant) -> &'static str {
    match v {
        SaviVariant::Naive => "naive",
        SaviVariant::Accurate2 => "accurate2",
        SaviVariant::AccurateDag => "accurate-dag",
        SaviVariant::Approx => "approx",
        SaviVariant::ApproxScalable => "approx-scalable",
    }
}

fn run_variant(
    model: &GopModel,
    frames: &FrameData,
    variant: SaviVariant,
    cfg: &ExperimentConfig,
) -> Result<(LatentState, f64), CliError> {
    let mut scfg = SaviConfig::new(variant, cfg.steps, cfg.learning_rate);
    if variant == SaviVariant::ApproxScalable {
        scfg.window = Some(cfg.window.unwrap_or(1));
    }
    let numerical = |e: savi_alloc::savi::SaviError| CliError::Numerical(e.to_string());
    match variant {
        SaviVariant::Naive => {
            let (s, _) = savi_naive(model, frames, &scfg).map_err(numerical)?;
            let l = model.objective(frames, &s.values).total;
            Ok((s, l))
        }
        SaviVariant::Approx | SaviVariant::ApproxScalable => {
            let (s, _) = savi_approx(model, frames, &scfg).map_err(numerical)?;
            let l = model.objective(frames, &s.values).total;
            Ok((s, l))
        }
        SaviVariant::Accurate2 | SaviVariant::AccurateDag => {
            let (s, _) = savi_accurate_dag(model, frames, &scfg).map_err(numerical)?;
            // Report the inner-solved objective the hypergradients ascend
            // (the literal schedule leaves final descendants one step stale).
            let mut values = s.values.clone();
            if let Some(&first) = model.graph().topo_order().first() {
                solve_suffix(model, frames, &mut values, Some(first), &scfg)
                    .map_err(numerical)?;
            }
            let l = model.objective(frames, &values).total;
            Ok((s, l))
        }
    }
}

fn row(
    cfg: &ExperimentConfig,
    seed: u64,
    variant: &str,
    window: Option<usize>,
    final_objective: f64,
    gop_cost: f64,
    eval_count: u64,
    started: Instant,
) -> ResultRow {
    ResultRow {
        suite: cfg.suite.name().to_string(),
        seed,
        variant: variant.to_string(),
        steps: cfg.steps,
        learning_rate: cfg.learning_rate,
        window,
        final_objective,
        gop_cost,
        eval_count,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    }
}

fn run_suite(cfg: &ExperimentConfig) -> Result<(Vec<ResultRow>, Option<String>), CliError> {
    let mut rows = Vec::new();
    let mut trace_out = None;
    for &seed in &cfg.seeds {
        let model = build_model(cfg, seed)?;
        let frames = model.generate_frames();
        match cfg.suite {
            Suite::VerifyGradients => {
                let t0 = Instant::now();
                let (worst, evals) = verify_gradients(&model, &frames, cfg)?;
                if worst > 1e-3 {
                    return Err(CliError::Numerical(format!(
                        "seed {seed}: hypergradient check failed, worst rel err {worst:.3e}"
                    )));
                }
                // final_objective reports the worst relative error observed.
                rows.push(row(cfg, seed, "gradcheck", None, worst, 0.0, evals, t0));
            }
            Suite::CompareVariants => {
                for variant in [
                    SaviVariant::Naive,
                    SaviVariant::Approx,
                    SaviVariant::ApproxScalable,
                    SaviVariant::AccurateDag,
                ] {
                    let t0 = Instant::now();
                    let (state, l) = run_variant(&model, &frames, variant, cfg)?;
                    let window = (variant == SaviVariant::ApproxScalable)
                        .then(|| cfg.window.unwrap_or(1));
                    rows.push(row(
                        cfg,
                        seed,
                        variant_name(variant),
                        window,
                        l,
                        -l,
                        state.total_evals() + state.total_hypergrad_evals(),
                        t0,
                    ));
                }
            }
            Suite::Allocate => {
                let numerical =
                    |e: savi_alloc::alloc::AllocError| CliError::Numerical(e.to_string());
                let t0 = Instant::now();
                let favi = report_at(
                    &model,
                    &frames,
                    &favi_values(&model, &frames),
                    LambdaMap::uniform(&model),
                )
                .map_err(numerical)?;
                rows.push(row(cfg, seed, "favi", None, -favi.gop_cost, favi.gop_cost, 0, t0));

                let t0 = Instant::now();
                let omega = OmegaSchedule::constant(cfg.frame_count, cfg.omega);
                let ld = lambda_domain_allocate(
                    &model,
                    &frames,
                    &omega,
                    cfg.steps,
                    cfg.learning_rate,
                )
                .map_err(numerical)?;
                rows.push(row(
                    cfg,
                    seed,
                    "lambda-domain",
                    None,
                    -ld.gop_cost,
                    ld.gop_cost,
                    (cfg.frame_count * cfg.steps) as u64,
                    t0,
                ));

                let t0 = Instant::now();
                let oeu = oeu_baseline(&model, &frames, cfg.steps, cfg.learning_rate * 0.1)
                    .map_err(numerical)?;
                rows.push(row(
                    cfg,
                    seed,
                    "oeu",
                    None,
                    -oeu.gop_cost,
                    oeu.gop_cost,
                    cfg.steps as u64,
                    t0,
                ));

                let t0 = Instant::now();
                let (state, l) = run_variant(&model, &frames, SaviVariant::Approx, cfg)?;
                rows.push(row(
                    cfg,
                    seed,
                    "savi-approx",
                    None,
                    l,
                    -l,
                    state.total_hypergrad_evals(),
                    t0,
                ));
            }
            Suite::WindowSweep => {
                for c in 0..cfg.frame_count {
                    let t0 = Instant::now();
                    let mut scfg =
                        SaviConfig::new(SaviVariant::ApproxScalable, cfg.steps, cfg.learning_rate);
                    scfg.window = Some(c);
                    let (state, _) = savi_approx(&model, &frames, &scfg)
                        .map_err(|e| CliError::Numerical(e.to_string()))?;
                    let l = model.objective(&frames, &state.values).total;
                    rows.push(row(
                        cfg,
                        seed,
                        "approx-scalable",
                        Some(c),
                        l,
                        -l,
                        state.total_hypergrad_evals(),
                        t0,
                    ));
                }
            }
            Suite::DensityAnalog => {
                // Fixed two-level quadratic family; only K, alpha, and the
                // seed list come from the config.
                let mut params = TwoLevelParams::new(4, 3, 6, 1000 + seed);
                params.favi_noise = 0.1;
                params.beta = 2.0;
                let (model, frames) = two_level_quadratic(params);
                let numerical = |e: savi_alloc::savi::SaviError| CliError::Numerical(e.to_string());
                let scfg = SaviConfig::new(SaviVariant::Naive, cfg.steps, cfg.learning_rate);

                let t0 = Instant::now();
                let l_favi = model.objective(&frames, &favi_values(&model, &frames)).total;
                rows.push(row(cfg, seed, "favi", None, l_favi, -l_favi, 0, t0));

                let t0 = Instant::now();
                let (s, _) = savi_naive(&model, &frames, &scfg).map_err(numerical)?;
                let l = model.objective(&frames, &s.values).total;
                rows.push(row(cfg, seed, "naive", None, l, -l, s.total_evals(), t0));

                let t0 = Instant::now();
                let (s, _) = savi_approx(&model, &frames, &scfg).map_err(numerical)?;
                let l = model.objective(&frames, &s.values).total;
                rows.push(row(
                    cfg,
                    seed,
                    "approx",
                    None,
                    l,
                    -l,
                    s.total_hypergrad_evals(),
                    t0,
                ));

                let t0 = Instant::now();
                let (s, _) = savi_accurate_2level(&model, &frames, &scfg).map_err(numerical)?;
                // The literal schedule leaves the leaf one top-update stale;
                // report the inner-solved objective the hypergradients ascend.
                let mut values = s.values.clone();
                solve_suffix(&model, &frames, &mut values, Some(NodeId(1)), &scfg)
                    .map_err(numerical)?;
                let l = model.objective(&frames, &values).total;
                rows.push(row(
                    cfg,
                    seed,
                    "accurate",
                    None,
                    l,
                    -l,
                    s.total_evals() + s.total_hypergrad_evals(),
                    t0,
                ));
            }
            Suite::Trace => {
                let t0 = Instant::now();
                let scfg = SaviConfig::new(
                    cfg.variant.unwrap_or(SaviVariant::AccurateDag),
                    cfg.steps,
                    cfg.learning_rate,
                )
                .with_trace();
                let (state, trace) = savi_accurate_dag(&model, &frames, &scfg)
                    .map_err(|e| CliError::Numerical(e.to_string()))?;
                let l = model.objective(&frames, &state.values).total;
                trace_out = Some(trace.serialize());
                rows.push(row(
                    cfg,
                    seed,
                    "accurate-dag",
                    None,
                    l,
                    -l,
                    state.total_evals(),
                    t0,
                ));
            }
        }
        println!("seed {seed}: done ({})", cfg.suite.name());
    }
    // Deterministic output order regardless of execution order.
    rows.sort_by(|a, b| (a.seed, a.variant.clone()).cmp(&(b.seed, b.variant.clone())));
    Ok((rows, trace_out))
}

/// Spot checks per seed: analytic partials against central FD and one
/// accurate hypergradient against the unrolled oracle.
fn verify_gradients(
    model: &GopModel,
    frames: &FrameData,
    cfg: &ExperimentConfig,
) -> Result<(f64, u64), CliError> {
    let mut worst = 0.0f64;
    let mut evals = 0u64;
    let values = favi_values(model, frames);
    let h = 1e-6;
    for &n in model.graph().topo_order() {
        let g = model.grad_partial(frames, &values, n);
        let d = model.graph().latent_dim(n);
        let mut fd = DVector::zeros(d);
        for c in 0..d {
            let mut plus = values.clone();
            let mut y = plus.get(n).clone();
            y[c] += h;
            plus.set(n, y);
            let mut minus = values.clone();
            let mut y = minus.get(n).clone();
            y[c] -= h;
            minus.set(n, y);
            fd[c] =
                (model.objective(frames, &plus).total - model.objective(frames, &minus).total)
                    / (2.0 * h);
            evals += 2;
        }
        worst = worst.max((&g - &fd).norm() / fd.norm().max(1.0));
        // Windowed gradient with full window must match reverse accumulation
        // of the same quantity restricted to C = N.
        let state = LatentState {
            values: values.clone(),
            steps: vec![0; model.graph().node_count()],
            eval_counter: vec![0; model.graph().node_count()],
            hypergrad_counter: vec![0; model.graph().node_count()],
        };
        let full = windowed_gradient(model, frames, &state, n, None);
        let wide = windowed_gradient(model, frames, &state, n, Some(cfg.frame_count));
        worst = worst.max((&full - &wide).norm());
    }
    let scfg = SaviConfig::new(SaviVariant::AccurateDag, cfg.steps.min(2), cfg.learning_rate);
    let first = model.graph().topo_order()[0];
    let g = grad_dag(model, frames, &values, first, &scfg)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let o = unrolled_hypergradient(
        model,
        frames,
        &values,
        first,
        &scfg,
        &OracleConfig::default(),
    )
    .map_err(|e| CliError::Numerical(e.to_string()))?;
    worst = worst.max((&g - &o).norm() / o.norm().max(1e-12));
    Ok((worst, evals))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = build_config(cli)?;
    let (rows, trace) = run_suite(&cfg)?;
    let stem = &cfg.output_path;
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Numerical(format!("mkdir {}: {e}", parent.display())))?;
        }
    }
    emit_csv(&rows, &stem.with_extension("csv"))?;
    emit_json(&rows, &stem.with_extension("json"))?;
    if let Some(t) = trace {
        std::fs::write(stem.with_extension("trace"), t)
            .map_err(|e| CliError::Numerical(format!("write trace: {e}")))?;
    }
    println!(
        "{}: {} rows -> {}.csv/.json",
        cfg.suite.name(),
        rows.len(),
        stem.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e @ CliError::Numerical(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
    }
}
