//! The `rope-lens` command line.
//!
//! Every command loads a head dump, runs one analysis and writes its reports
//! under `--out` (or `RL_OUTPUT_DIR`) with fixed file names. JSON reports wrap
//! the result in a parameter echo: `{tool, version, command, params, result}`.
//! The headline metric goes to stdout.
//!
//! Exit codes: 0 success, 1 usage, 2 input or I/O error, 3 degenerate numerics.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::decompose::{correlation, reconstruct_rank_two, reconstruct_ternary, solve_rank_two, solve_ternary, DEFAULT_RIDGE_LAMBDA};
use crate::error::{Error, Result};
use crate::perturb::{drift_grid, PerturbationKind};
use crate::render::{render_heatmap, render_tuple_plot, Heatmap};
use crate::rope::{fake_logit_map, logit_map, RopeConfig};
use crate::tensor_io::{generate_synthetic, load_head, save_report, write_head, HeadRecord, Report, ReportFormat, SyntheticSpec};
use crate::trace::{envelope_check, sliding_window_trace, DistanceMap, DEFAULT_SLACK};
use crate::tuples::{
    build_fg, causal_disentanglement, detect_slow_dominating, residual_diagnostics, tuple_stats, SlowSet, TupleReport,
    DEFAULT_ANGLE_BUDGET, DEFAULT_NORM_THRESHOLD,
};

pub const EXIT_USAGE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "rope-lens", version, about = "Positional/semantic analysis of RoPE attention heads")]
pub struct Cli {
    /// Output directory, created if absent
    #[arg(long, global = true, env = "RL_OUTPUT_DIR", default_value = "rope-lens-out")]
    pub out: PathBuf,

    /// Worker threads; 0 uses every core. Results do not depend on it
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    /// Which report formats to write when a command has a tabular report
    #[arg(long, global = true, value_enum, default_value_t = FormatChoice::Both)]
    pub format: FormatChoice,

    /// Log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatChoice {
    Json,
    Csv,
    Both,
}

impl FormatChoice {
    fn json(self) -> bool {
        self != FormatChoice::Csv
    }

    fn csv(self) -> bool {
        self != FormatChoice::Json
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Summarize a dump: sizes, tuple angles, per-tuple norms. Writes inspect.json
    Inspect(InspectArgs),
    /// Ternary or rank-two additive fit. Writes <mode>.json, logits.svg, reconstruction.svg
    Decompose(DecomposeArgs),
    /// Per-tuple statistics and slow-set detection. Writes tuples.json, tuples.csv, tuples.svg
    Tuples(TuplesArgs),
    /// Explicit f/g split over the slow set. Writes disentangle.json
    Disentangle(DisentangleArgs),
    /// Output drift over a (gamma, l_max) grid. Writes drift_grid.json, drift_grid.csv
    Perturb(PerturbArgs),
    /// Sliding-window trace and envelope check. Writes trace.json, trace.csv, envelope.json
    Trace(TraceArgs),
    /// Generate a synthetic head dump into the output directory
    Synth(SynthArgs),
}

/// Comma-separated indices where the empty string is the empty list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct IndexList(pub Vec<usize>);

impl std::str::FromStr for IndexList {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.trim().is_empty() {
            return Ok(IndexList(Vec::new()));
        }
        s.split(',').map(|t| t.trim().parse()).collect::<std::result::Result<_, _>>().map(IndexList)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    /// Head manifest (JSON)
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecomposeMode {
    Ternary,
    Rank2,
}

#[derive(Debug, Args, Serialize)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub manifest: PathBuf,

    #[arg(long, value_enum, default_value_t = DecomposeMode::Ternary)]
    pub mode: DecomposeMode,

    /// Ridge penalty of the ternary fit
    #[arg(long, default_value_t = DEFAULT_RIDGE_LAMBDA)]
    pub lambda: f64,

    /// Rank2: query row of the fake-distance map [default: n-1]
    #[arg(long)]
    pub query_index: Option<usize>,

    /// Rank2: number of fake distances 0..m; must equal n for a square map [default: n]
    #[arg(long)]
    pub num_distances: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct SlowArgs {
    /// Norm-product threshold as a multiple of the median
    #[arg(long, default_value_t = DEFAULT_NORM_THRESHOLD)]
    pub norm_threshold: f64,

    /// Largest total rotation theta_r * L_PT of a slow tuple (radians)
    #[arg(long, default_value_t = DEFAULT_ANGLE_BUDGET)]
    pub angle_budget: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct TuplesArgs {
    #[arg(long)]
    pub manifest: PathBuf,

    #[command(flatten)]
    pub slow: SlowArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct DisentangleArgs {
    #[arg(long)]
    pub manifest: PathBuf,

    /// Comma-separated slow tuple indices; "" for none [default: detected]
    #[arg(long)]
    pub slow_indices: Option<IndexList>,

    #[command(flatten)]
    pub slow: SlowArgs,

    /// Query row for the explicit f/g tables [default: n-1]
    #[arg(long)]
    pub query_index: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Text,
    Feature,
    Position,
}

impl From<KindArg> for PerturbationKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Text => PerturbationKind::TextTransposition,
            KindArg::Feature => PerturbationKind::FeatureTransposition,
            KindArg::Position => PerturbationKind::PositionManipulation,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PerturbArgs {
    #[arg(long)]
    pub manifest: PathBuf,

    #[arg(long, value_enum, default_value_t = KindArg::Position)]
    #[serde(serialize_with = "serialize_kind")]
    pub kind: KindArg,

    /// Perturbed fraction axis
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.05,0.1,0.5")]
    pub gammas: Vec<f64>,

    /// Maximum offset / transposition distance axis
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,100")]
    pub l_max: Vec<usize>,

    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,

    /// Feature transposition: move keys but keep values in place
    #[arg(long)]
    pub keys_only: bool,
}

fn serialize_kind<S: serde::Serializer>(k: &KindArg, s: S) -> std::result::Result<S::Ok, S::Error> {
    PerturbationKind::from(*k).serialize(s)
}

#[derive(Debug, Args, Serialize)]
pub struct TraceArgs {
    #[arg(long)]
    pub manifest: PathBuf,

    /// Query row attended through every window [default: n-1]
    #[arg(long)]
    pub query_index: Option<usize>,

    /// Window length [default: pretrain_length]
    #[arg(long)]
    pub window_len: Option<usize>,

    #[arg(long, default_value_t = 1)]
    pub stride: usize,

    /// Mahalanobis slack above the baseline maximum
    #[arg(long, default_value_t = DEFAULT_SLACK)]
    pub slack: f64,

    /// JSON file with `distances` (and optional `pinned` [slot, row] pairs) [default: window_len-1..0]
    #[arg(long)]
    pub distance_map: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 256)]
    pub n: usize,

    #[arg(long, default_value_t = 64)]
    pub d: usize,

    /// Comma-separated slow tuple indices; "" for none
    #[arg(long, default_value = "30,31")]
    pub slow_indices: IndexList,

    #[arg(long, default_value_t = 50.0)]
    pub slow_norm_ratio: f64,

    #[arg(long, default_value_t = 0.02)]
    pub deviation_ratio: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, default_value_t = 10000.0)]
    pub rope_base: f64,

    #[arg(long, default_value_t = 4096)]
    pub pretrain_length: usize,
}

#[derive(Serialize)]
struct Echo<'a, P: Serialize, R: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    params: &'a P,
    result: &'a R,
}

impl<P: Serialize, R: Serialize> Report for Echo<'_, P, R> {}

struct Ctx<'a> {
    out: &'a Path,
    format: FormatChoice,
    stdout: &'a mut (dyn Write + Send),
}

impl Ctx<'_> {
    fn json<P: Serialize, R: Serialize>(&self, name: &str, command: &'static str, params: &P, result: &R) -> Result<()> {
        let echo = Echo {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            params,
            result,
        };
        save_report(&echo, self.out.join(name), ReportFormat::Json)
    }

    fn csv<R: Report>(&self, name: &str, result: &R) -> Result<()> {
        save_report(result, self.out.join(name), ReportFormat::Csv)
    }

    fn say(&mut self, line: impl std::fmt::Display) -> Result<()> {
        writeln!(self.stdout, "{line}").map_err(|e| Error::io("<stdout>", e))
    }
}

/// Parses `args` (including the program name) and runs the command, writing
/// headline output to `stdout`. Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();

    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: could not start worker pool: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| execute(&cli, stdout)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli, stdout: &mut (dyn Write + Send)) -> Result<()> {
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let mut ctx = Ctx {
        out: &cli.out,
        format: cli.format,
        stdout,
    };
    match &cli.command {
        Command::Inspect(a) => cmd_inspect(&mut ctx, a),
        Command::Decompose(a) => cmd_decompose(&mut ctx, a),
        Command::Tuples(a) => cmd_tuples(&mut ctx, a),
        Command::Disentangle(a) => cmd_disentangle(&mut ctx, a),
        Command::Perturb(a) => cmd_perturb(&mut ctx, a),
        Command::Trace(a) => cmd_trace(&mut ctx, a),
        Command::Synth(a) => cmd_synth(&mut ctx, a),
    }
}

fn load(manifest: &Path) -> Result<(HeadRecord, RopeConfig)> {
    let record = load_head(manifest)?;
    let config = RopeConfig::from_manifest(&record.manifest)?;
    log::info!("loaded {} with n = {}, d = {}", manifest.display(), record.n(), record.head_dim());
    Ok((record, config))
}

fn default_query(query: Option<usize>, record: &HeadRecord) -> usize {
    query.unwrap_or(record.n().saturating_sub(1))
}

#[derive(Serialize)]
struct TupleNorms {
    index: usize,
    theta: f64,
    mean_key_norm: f64,
    mean_query_norm: f64,
}

#[derive(Serialize)]
struct InspectSummary {
    model_label: String,
    layer_index: u32,
    head_index: u32,
    n: usize,
    head_dim: usize,
    value_dim: usize,
    rope_base: f64,
    pretrain_length: usize,
    thetas: Vec<f64>,
    tuples: Vec<TupleNorms>,
}

fn cmd_inspect(ctx: &mut Ctx, a: &InspectArgs) -> Result<()> {
    let (record, config) = load(&a.manifest)?;
    let thetas = config.tuple_angles();
    let n = record.n() as f64;
    let mean_norm = |m: &crate::Matrix, r: usize| {
        m.iter_rows().map(|row| {
            let t = config.tuple_of(row, r);
            t[0].hypot(t[1])
        }).sum::<f64>()
            / n
    };
    let tuples: Vec<TupleNorms> = thetas
        .iter()
        .enumerate()
        .map(|(r, &theta)| TupleNorms {
            index: r,
            theta,
            mean_key_norm: mean_norm(&record.k, r),
            mean_query_norm: mean_norm(&record.q, r),
        })
        .collect();
    let m = &record.manifest;
    let summary = InspectSummary {
        model_label: m.model_label.clone(),
        layer_index: m.layer_index,
        head_index: m.head_index,
        n: record.n(),
        head_dim: record.head_dim(),
        value_dim: record.value_dim(),
        rope_base: m.rope_base,
        pretrain_length: m.pretrain_length,
        thetas,
        tuples,
    };
    ctx.json("inspect.json", "inspect", a, &summary)?;
    ctx.say(format_args!("n: {}", summary.n))?;
    ctx.say(format_args!("d: {}", summary.head_dim))?;
    ctx.say(format_args!("value_dim: {}", summary.value_dim))?;
    let thetas: Vec<String> = summary.thetas.iter().map(f64::to_string).collect();
    ctx.say(format_args!("theta: [{}]", thetas.join(", ")))?;
    ctx.say("tuple\tmean_key_norm\tmean_query_norm")?;
    for t in &summary.tuples {
        ctx.say(format_args!("{}\t{:.6}\t{:.6}", t.index, t.mean_key_norm, t.mean_query_norm))?;
    }
    Ok(())
}

fn cmd_decompose(ctx: &mut Ctx, a: &DecomposeArgs) -> Result<()> {
    let (record, config) = load(&a.manifest)?;
    let corr = match a.mode {
        DecomposeMode::Ternary => {
            let w = logit_map(&record, &config)?;
            let dec = solve_ternary(&w, a.lambda)?;
            let recon = reconstruct_ternary(&dec);
            ctx.json("ternary.json", "decompose", a, &dec)?;
            render_heatmap(&Heatmap::from_logit_map("logits", &w), ctx.out.join("logits.svg"))?;
            render_heatmap(&Heatmap::from_logit_map("ternary reconstruction", &recon), ctx.out.join("reconstruction.svg"))?;
            correlation(&w, &recon)?
        }
        DecomposeMode::Rank2 => {
            let query = default_query(a.query_index, &record);
            let m = a.num_distances.unwrap_or(record.n());
            let distances: Vec<i64> = (0..m as i64).collect();
            let wp = fake_logit_map(&record, query, &distances, &config)?;
            let dec = solve_rank_two(&wp)?;
            let recon = reconstruct_rank_two(&dec);
            ctx.json("rank2.json", "decompose", a, &dec)?;
            render_heatmap(&Heatmap::from_fake_map("fake-distance logits", &wp), ctx.out.join("logits.svg"))?;
            render_heatmap(&Heatmap::from_fake_map("rank-two reconstruction", &recon), ctx.out.join("reconstruction.svg"))?;
            dec.correlation
        }
    };
    ctx.say(format_args!("correlation: {corr}"))
}

#[derive(Serialize)]
struct TuplesResult<'a> {
    report: &'a TupleReport,
    slow_set: &'a SlowSet,
}

fn cmd_tuples(ctx: &mut Ctx, a: &TuplesArgs) -> Result<()> {
    let (record, config) = load(&a.manifest)?;
    let tuples = tuple_stats(&record, &config)?;
    let slow = detect_slow_dominating(&tuples, a.slow.norm_threshold, a.slow.angle_budget);
    let report = TupleReport {
        pretrain_length: config.pretrain_length,
        tuples,
    };
    if ctx.format.json() {
        ctx.json(
            "tuples.json",
            "tuples",
            a,
            &TuplesResult {
                report: &report,
                slow_set: &slow,
            },
        )?;
    }
    if ctx.format.csv() {
        ctx.csv("tuples.csv", &report)?;
    }
    render_tuple_plot(&report.tuples, ctx.out.join("tuples.svg"))?;
    let idx: Vec<String> = slow.indices.iter().map(usize::to_string).collect();
    ctx.say(format_args!("slow tuples: [{}]", idx.join(", ")))
}

#[derive(Serialize)]
struct DisentangleResult {
    slow_set: SlowSet,
    query: crate::tuples::DisentangledLogit,
    query_ratios: Option<crate::tuples::ResidualRatios>,
    causal: crate::tuples::CausalDisentanglement,
}

fn cmd_disentangle(ctx: &mut Ctx, a: &DisentangleArgs) -> Result<()> {
    let (record, config) = load(&a.manifest)?;
    let slow = match &a.slow_indices {
        Some(idx) => SlowSet::from_indices(idx.0.iter().copied()),
        None => detect_slow_dominating(&tuple_stats(&record, &config)?, a.slow.norm_threshold, a.slow.angle_budget),
    };
    if slow.empty {
        log::warn!("slow set is empty; f is constant");
    }
    let query = build_fg(&record, &slow, default_query(a.query_index, &record), &config)?;
    let query_ratios = match residual_diagnostics(&query) {
        Ok(r) => Some(r),
        Err(Error::Degenerate(msg)) => {
            log::warn!("{msg}");
            None
        }
        Err(e) => return Err(e),
    };
    let causal = causal_disentanglement(&record, &slow, &config)?;
    let corr = causal.correlation_fg_vs_w;
    ctx.json(
        "disentangle.json",
        "disentangle",
        a,
        &DisentangleResult {
            slow_set: slow,
            query,
            query_ratios,
            causal,
        },
    )?;
    ctx.say(format_args!("correlation: {corr}"))
}

fn cmd_perturb(ctx: &mut Ctx, a: &PerturbArgs) -> Result<()> {
    let (record, config) = load(&a.manifest)?;
    let grid = drift_grid(&record, a.kind.into(), &a.gammas, &a.l_max, &a.seeds, a.keys_only, &config)?;
    if ctx.format.json() {
        ctx.json("drift_grid.json", "perturb", a, &grid)?;
    }
    if ctx.format.csv() {
        ctx.csv("drift_grid.csv", &grid)?;
    }
    let worst = grid.cells.iter().map(|c| c.mean_cos).fold(f64::INFINITY, f64::min);
    ctx.say(format_args!("min mean_cos: {worst}"))
}

fn cmd_trace(ctx: &mut Ctx, a: &TraceArgs) -> Result<()> {
    let (record, config) = load(&a.manifest)?;
    let map = match &a.distance_map {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let map: DistanceMap = serde_json::from_str(&text).map_err(|e| Error::Manifest {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            Some(map)
        }
        None => None,
    };
    let window_len = a.window_len.unwrap_or(config.pretrain_length);
    let trace = sliding_window_trace(
        &record,
        default_query(a.query_index, &record),
        window_len,
        a.stride,
        &config,
        map.as_ref(),
    )?;
    let envelope = envelope_check(&trace, &trace.baseline_mahalanobis, a.slack)?;
    if ctx.format.json() {
        ctx.json("trace.json", "trace", a, &trace)?;
        ctx.json("envelope.json", "trace", a, &envelope)?;
    }
    if ctx.format.csv() {
        ctx.csv("trace.csv", &trace)?;
    }
    let verdict = if envelope.inside { "inside" } else { "outside" };
    ctx.say(format_args!("envelope: {verdict} (max_excess {})", envelope.max_excess))
}

fn cmd_synth(ctx: &mut Ctx, a: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n: a.n,
        d: a.d,
        rope_base: a.rope_base,
        pretrain_length: a.pretrain_length,
        slow_indices: a.slow_indices.0.iter().copied().collect(),
        slow_norm_ratio: a.slow_norm_ratio,
        deviation_ratio: a.deviation_ratio,
        seed: a.seed,
    };
    let record = generate_synthetic(&spec)?;
    let path = write_head(&record, ctx.out)?;
    ctx.say(format_args!("manifest: {}", path.display()))
}
