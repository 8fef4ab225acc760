//! Command-line front end: builds losses and score subspaces from flags and
//! files, runs curves/bounds/reports, and emits CSV/JSON for plotting.

use crate::calibration::{
    calibration_curve, consistency_report, dm_constant, lower_bound_curve,
    sample_complexity_with_dm, tree_bound_closed, LabelPolicy, PairPolicy, VMode,
};
use crate::curve::{convex_minorant, CalibrationCurve, CurveMeta, CurveValue};
use crate::losses::{load_loss_matrix, map_loss_matrix, tree_loss_matrix, LossMatrix, TreeSpec};
use crate::matrixcore::DenseMatrix;
use crate::rankanalysis::{asymptotic_report, map_closed_forms};
use crate::subspaces::{f_map, f_sort, tree_block_basis, ScoreSubspace};
use crate::Error;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

/// Exit codes: 0 success, 2 configuration error, 3 solver failure,
/// 4 target accuracy below the consistency level.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_LEVEL: i32 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "calibrax",
    about = "Calibration functions, lower bounds, and consistency reports \
             for quadratic surrogates over score subspaces",
    version
)]
pub struct Cli {
    /// Worker threads for pair sweeps (env CALIBRAX_WORKERS overrides).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Exact calibration curve via pairwise QPs.
    Calibration(CurveArgs),
    /// Piecewise-linear lower bound of the calibration function.
    Bound(BoundArgs),
    /// Closed-form tree bound without building explicit matrices.
    TreeBound(TreeBoundArgs),
    /// Certified consistency-level estimates.
    Consistency(ConsistencyArgs),
    /// Closed-form and asymptotic diagnostics of the sort subspace.
    MapAnalysis(MapAnalysisArgs),
    /// Sufficient sample size from a curve's convex minorant.
    SampleComplexity(SampleComplexityArgs),
}

#[derive(Args, Debug)]
pub struct CurveArgs {
    /// Loss source: tree spec JSON path, `map:R`, or a CSV matrix path.
    #[arg(long)]
    pub loss: String,
    /// Subspace: `tree:T`, `map_full`, `map_sort`, `identity`, or CSV path.
    #[arg(long)]
    pub scores: String,
    /// Grid `MIN:MAX:COUNT`, COUNT uniform points inclusive.
    #[arg(long)]
    pub eps: Option<String>,
    /// Pair selection: `all` or `sampled:N[:SEED]`.
    #[arg(long, default_value = "all")]
    pub pairs: String,
    /// Default seed for `sampled:N` without an explicit seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BoundArgs {
    #[command(flatten)]
    pub curve: CurveArgs,
    /// Inner maximization mode: `optimal` or `fixed_one`.
    #[arg(long, default_value = "optimal")]
    pub v_mode: String,
    /// For tree losses with `tree:T` scores, use the closed form instead of
    /// the explicit pair terms.
    #[arg(long, default_value_t = false)]
    pub tree_closed: bool,
}

#[derive(Args, Debug)]
pub struct TreeBoundArgs {
    /// Tree spec JSON path.
    #[arg(long)]
    pub tree: PathBuf,
    /// Consistency depth t (scores constant within depth-t blocks).
    #[arg(long)]
    pub depth: usize,
    /// Grid `MIN:MAX:COUNT`.
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ConsistencyArgs {
    #[arg(long)]
    pub loss: String,
    #[arg(long)]
    pub scores: String,
    /// Labeling selection: `exhaustive` or `sampled:N[:SEED]`.
    #[arg(long, default_value = "exhaustive")]
    pub labels: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSON path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MapAnalysisArgs {
    /// Number of ranked items for the per-h coefficient table.
    #[arg(long)]
    pub r: usize,
    /// Comma-separated r values for the asymptotic diagnostics CSV.
    #[arg(long, default_value = "10,32,100,316,1000,3162,10000")]
    pub r_grid: String,
    /// Asymptotics CSV path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Coefficient table CSV path (stdout when omitted).
    #[arg(long)]
    pub table_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleComplexityArgs {
    /// Curve CSV (as written by `calibration`); its convex minorant feeds
    /// the calculator.
    #[arg(long)]
    pub curve: PathBuf,
    /// Target task accuracy ε.
    #[arg(long)]
    pub eps: f64,
    /// Optimization constant DM given directly; overrides the breakdown.
    #[arg(long)]
    pub dm: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub l_max: f64,
    /// Subspace condition number κ(F).
    #[arg(long, default_value_t = 1.0)]
    pub kappa: f64,
    /// Subspace dimension d.
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    /// Data-distribution radius constant R.
    #[arg(long, default_value_t = 1.0)]
    pub r_const: f64,
    /// Data-distribution norm constant Q.
    #[arg(long, default_value_t = 1.0)]
    pub q_const: f64,
    /// Output JSON path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolved run settings shared by the curve-producing subcommands.
#[derive(Debug)]
pub struct RunConfig {
    pub loss: LossMatrix,
    pub tree: Option<TreeSpec>,
    pub scores: ScoreSubspace,
    pub eps_grid: Vec<f64>,
    pub pair_policy: PairPolicy,
    pub out: Option<PathBuf>,
}

/// Error with the process exit code it should map to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Solver(_) => EXIT_SOLVER,
            _ => EXIT_CONFIG,
        };
        CliError { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn parse_loss(src: &str) -> CliResult<(LossMatrix, Option<TreeSpec>)> {
    if let Some(r) = src.strip_prefix("map:") {
        let r: usize = r
            .parse()
            .map_err(|_| CliError::config(format!("invalid item count in `{src}`")))?;
        return Ok((map_loss_matrix(r)?, None));
    }
    let path = Path::new(src);
    if path.extension().is_some_and(|e| e == "json") {
        let spec = TreeSpec::load(path)?;
        let loss = tree_loss_matrix(&spec)?;
        Ok((loss, Some(spec)))
    } else {
        Ok((load_loss_matrix(path)?, None))
    }
}

fn parse_scores(
    src: &str,
    loss: &LossMatrix,
    tree: Option<&TreeSpec>,
) -> CliResult<(ScoreSubspace, Option<usize>)> {
    if let Some(t) = src.strip_prefix("tree:") {
        let t: usize = t
            .parse()
            .map_err(|_| CliError::config(format!("invalid depth in `{src}`")))?;
        let spec = tree
            .ok_or_else(|| CliError::config("`tree:T` scores require a tree-spec loss"))?;
        return Ok((tree_block_basis(spec, t)?, Some(t)));
    }
    let sub = match src {
        "identity" => ScoreSubspace::identity(loss.k())?,
        "map_full" | "map_sort" => {
            let r = (2..=34)
                .find(|&r| crate::losses::all_permutations(r).len() == loss.k())
                .filter(|&r| (1u64 << r) - 1 == loss.m() as u64)
                .ok_or_else(|| {
                    CliError::config(format!("`{src}` scores require a `map:R` loss"))
                })?;
            if src == "map_full" {
                f_map(r)?
            } else {
                f_sort(r)?
            }
        }
        path => {
            let text = std::fs::read_to_string(path).map_err(Error::from)?;
            let rows = crate::losses::parse_csv_matrix(&text)?;
            if rows.is_empty() {
                return Err(CliError::config("score basis CSV is empty"));
            }
            let (k, d) = (rows.len(), rows[0].len());
            let f = DenseMatrix::from_fn(k, d, |i, j| rows[i][j]);
            ScoreSubspace::explicit(f)?
        }
    };
    if sub.k() != loss.k() {
        return Err(CliError::config(format!(
            "subspace has {} rows but the loss has {} outputs",
            sub.k(),
            loss.k()
        )));
    }
    Ok((sub, None))
}

fn parse_eps(spec: Option<&str>, l_max: f64) -> CliResult<Vec<f64>> {
    let (a, b, n) = match spec {
        None => (0.0, l_max, 101usize),
        Some(s) => {
            let parts: Vec<&str> = s.split(':').collect();
            if parts.len() != 3 {
                return Err(CliError::config(format!("grid `{s}` must be MIN:MAX:COUNT")));
            }
            let a: f64 = parts[0]
                .parse()
                .map_err(|_| CliError::config(format!("bad grid start `{}`", parts[0])))?;
            let b: f64 = parts[1]
                .parse()
                .map_err(|_| CliError::config(format!("bad grid end `{}`", parts[1])))?;
            let n: usize = parts[2]
                .parse()
                .map_err(|_| CliError::config(format!("bad grid count `{}`", parts[2])))?;
            (a, b, n)
        }
    };
    if n < 2 || a < 0.0 || b <= a {
        return Err(CliError::config("grid needs MIN ≥ 0 < MAX and COUNT ≥ 2"));
    }
    Ok((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect())
}

fn parse_pairs(spec: &str, default_seed: u64) -> CliResult<PairPolicy> {
    if spec == "all" {
        return Ok(PairPolicy::All);
    }
    if let Some(rest) = spec.strip_prefix("sampled:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let n: usize = parts[0]
            .parse()
            .map_err(|_| CliError::config(format!("bad sample size in `{spec}`")))?;
        let seed = match parts.len() {
            1 => default_seed,
            2 => parts[1]
                .parse()
                .map_err(|_| CliError::config(format!("bad seed in `{spec}`")))?,
            _ => return Err(CliError::config(format!("bad pair policy `{spec}`"))),
        };
        return Ok(PairPolicy::Sampled { n, seed });
    }
    Err(CliError::config(format!(
        "pair policy `{spec}` must be `all` or `sampled:N[:SEED]`"
    )))
}

fn parse_labels(spec: &str, default_seed: u64) -> CliResult<LabelPolicy> {
    if spec == "exhaustive" {
        return Ok(LabelPolicy::Exhaustive);
    }
    match parse_pairs(spec, default_seed)? {
        PairPolicy::Sampled { n, seed } => Ok(LabelPolicy::Sampled { n, seed }),
        PairPolicy::All => Ok(LabelPolicy::Exhaustive),
    }
}

fn resolve(args: &CurveArgs) -> CliResult<RunConfig> {
    let (loss, tree) = parse_loss(&args.loss)?;
    let (scores, _) = parse_scores(&args.scores, &loss, tree.as_ref())?;
    let eps_grid = parse_eps(args.eps.as_deref(), loss.l_max)?;
    let pair_policy = parse_pairs(&args.pairs, args.seed)?;
    Ok(RunConfig { loss, tree, scores, eps_grid, pair_policy, out: args.out.clone() })
}

fn emit(out: Option<&Path>, content: &str) -> CliResult<()> {
    match out {
        Some(path) => std::fs::write(path, content).map_err(|e| CliError {
            code: EXIT_CONFIG,
            message: format!("cannot write {}: {e}", path.display()),
        }),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

pub fn cmd_calibration(args: &CurveArgs) -> CliResult<()> {
    let cfg = resolve(args)?;
    let curve = calibration_curve(&cfg.scores, &cfg.loss, &cfg.eps_grid, cfg.pair_policy)?;
    emit(cfg.out.as_deref(), &curve.to_csv())
}

pub fn cmd_bound(args: &BoundArgs) -> CliResult<()> {
    let cfg = resolve(&args.curve)?;
    let v_mode = match args.v_mode.as_str() {
        "optimal" => VMode::Optimal,
        "fixed_one" => VMode::FixedOne,
        other => {
            return Err(CliError::config(format!(
                "v-mode `{other}` must be `optimal` or `fixed_one`"
            )))
        }
    };
    let curve = if args.tree_closed {
        let spec = cfg
            .tree
            .as_ref()
            .ok_or_else(|| CliError::config("--tree-closed requires a tree-spec loss"))?;
        let t = args
            .curve
            .scores
            .strip_prefix("tree:")
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| CliError::config("--tree-closed requires `tree:T` scores"))?;
        tree_closed_curve(spec, t, &cfg.eps_grid)?
    } else {
        lower_bound_curve(&cfg.scores, &cfg.loss, &cfg.eps_grid, v_mode)?
    };
    let mut csv = curve.to_csv();
    let header_end = csv.find('\n').map(|i| i + 1).unwrap_or(0);
    csv.insert_str(header_end, &format!("# meta: v_mode={}, kind={}\n", args.v_mode, curve.meta));
    emit(cfg.out.as_deref(), &csv)
}

fn tree_closed_curve(spec: &TreeSpec, t: usize, grid: &[f64]) -> CliResult<CalibrationCurve> {
    let points = grid
        .iter()
        .map(|&e| Ok((e, tree_bound_closed(spec, t, e)?)))
        .collect::<crate::Result<Vec<(f64, CurveValue)>>>()?;
    Ok(CalibrationCurve::new(points, CurveMeta::TreeClosed)?)
}

pub fn cmd_tree_bound(args: &TreeBoundArgs) -> CliResult<()> {
    let spec = TreeSpec::load(&args.tree)?;
    let l_max: f64 = spec.weights.iter().sum();
    let grid = parse_eps(args.eps.as_deref(), l_max)?;
    let curve = tree_closed_curve(&spec, args.depth, &grid)?;
    emit(args.out.as_deref(), &curve.to_csv())
}

pub fn cmd_consistency(args: &ConsistencyArgs) -> CliResult<()> {
    let (loss, tree) = parse_loss(&args.loss)?;
    let (scores, _) = parse_scores(&args.scores, &loss, tree.as_ref())?;
    let labels = parse_labels(&args.labels, args.seed)?;
    let report = consistency_report(&scores, &loss, labels)?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    emit(args.out.as_deref(), &format!("{json}\n"))
}

pub fn cmd_map_analysis(args: &MapAnalysisArgs) -> CliResult<()> {
    let forms = map_closed_forms(args.r)?;
    let mut table = String::from("h,alpha_scaled,beta_scaled,gamma\n");
    for h in 1..=args.r {
        table.push_str(&format!(
            "{h},{:.12e},{:.12e},{:.12e}\n",
            forms.alpha_scaled(h).map_err(CliError::from)?,
            forms.beta_scaled(h)?,
            forms.gamma(h)?,
        ));
    }
    emit(args.table_out.as_deref(), &table)?;
    let r_values = args
        .r_grid
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| CliError::config(format!("bad r value `{t}`")))
        })
        .collect::<CliResult<Vec<usize>>>()?;
    let mut csv = String::from("r,kappa,gamma_mid,proj_term\n");
    for row in asymptotic_report(&r_values)? {
        csv.push_str(&format!(
            "{},{:.12e},{:.12e},{:.12e}\n",
            row.r, row.kappa, row.gamma_mid, row.proj_term
        ));
    }
    emit(args.out.as_deref(), &csv)
}

/// Round to 12 significant digits, then take the ceiling: reports exact
/// integer targets without float-noise off-by-ones.
pub fn ceil_significant(x: f64) -> f64 {
    if x <= 0.0 || !x.is_finite() {
        return x.ceil();
    }
    let mag = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(11 - mag);
    ((x * scale).round() / scale).ceil()
}

pub fn cmd_sample_complexity(args: &SampleComplexityArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&args.curve).map_err(Error::from)?;
    let curve = CalibrationCurve::from_csv(&text, CurveMeta::ExactQp)?;
    let minorant = convex_minorant(&curve)?;
    let dm = args
        .dm
        .unwrap_or_else(|| dm_constant(args.l_max, args.kappa, args.dim, args.r_const, args.q_const));
    let n_star = sample_complexity_with_dm(&minorant, args.eps, dm).map_err(|e| CliError {
        code: EXIT_LEVEL,
        message: e.to_string(),
    })?;
    let delta = match minorant.value_at(args.eps) {
        CurveValue::Finite(v) => v,
        CurveValue::Infinite => unreachable!("guarded by sample_complexity_with_dm"),
    };
    let json = serde_json::json!({
        "n_star": ceil_significant(n_star),
        "n_star_float": n_star,
        "dm": dm,
        "eps": args.eps,
        "delta_check": delta,
    });
    emit(args.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&json).map_err(Error::from)?))
}

/// Worker-count resolution: env `CALIBRAX_WORKERS` wins, then `--workers`,
/// then the rayon default.
pub fn resolve_workers(flag: Option<usize>) -> CliResult<Option<usize>> {
    if let Ok(val) = std::env::var("CALIBRAX_WORKERS") {
        let n: usize = val
            .parse()
            .map_err(|_| CliError::config(format!("bad CALIBRAX_WORKERS value `{val}`")))?;
        if n == 0 {
            return Err(CliError::config("worker count must be ≥ 1"));
        }
        return Ok(Some(n));
    }
    if let Some(n) = flag {
        if n == 0 {
            return Err(CliError::config("worker count must be ≥ 1"));
        }
        return Ok(Some(n));
    }
    Ok(None)
}

/// Run a parsed command, returning the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let workers = match resolve_workers(cli.workers) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {}", e.message);
            return e.code;
        }
    };
    if let Some(n) = workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure worker pool: {e}");
            return EXIT_CONFIG;
        }
    }
    let result = match &cli.command {
        Command::Calibration(a) => cmd_calibration(a),
        Command::Bound(a) => cmd_bound(a),
        Command::TreeBound(a) => cmd_tree_bound(a),
        Command::Consistency(a) => cmd_consistency(a),
        Command::MapAnalysis(a) => cmd_map_analysis(a),
        Command::SampleComplexity(a) => cmd_sample_complexity(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
