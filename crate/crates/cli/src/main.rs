use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pdflow::diagram::{gen_gaussian, gen_uniform, load_diagram, load_dir, save_diagram};
use pdflow::embedding::embed;
use pdflow::eval::{
    approx_matrix, derive_seed, distance_report, ranking, run_evaluation, runtime_bench,
    with_workers, write_csv, EvalConfig, Method, TreePolicy,
};
use pdflow::exact::DEFAULT_SIZE_CAP;
use pdflow::flowtree::Reduce;
use pdflow::{Error, GroundMetric, PersistenceDiagram, ShiftedQuadtree, TreeConfig};

const EXIT_USAGE: u8 = 2;
const EXIT_PARSE: u8 = 3;
const EXIT_ORACLE_CAP: u8 = 4;
const EXIT_INTERNAL: u8 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "pdflow",
    version,
    about = "Wasserstein distances between persistence diagrams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset of diagrams.
    Gen(GenArgs),
    /// Distance between two diagram files, printed as JSON.
    Dist(DistArgs),
    /// Export vectors for every diagram in a directory on one shared tree.
    Embed(EmbedArgs),
    /// Rank candidates for each query diagram.
    Knn(KnnArgs),
    /// Error, recall, ranking and runtime tables over a dataset.
    Eval(EvalArgs),
    /// Runtime scaling on uniform diagrams of increasing size.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Uniform,
    Gaussian,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Exact,
    Embedding,
    Flowtree,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Exact => Method::Exact,
            MethodArg::Embedding => Method::Embedding,
            MethodArg::Flowtree => Method::Flowtree,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    L1,
    L2,
    Linf,
}

impl From<MetricArg> for GroundMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::L1 => GroundMetric::L1,
            MetricArg::L2 => GroundMetric::L2,
            MetricArg::Linf => GroundMetric::LInf,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReduceArg {
    Mean,
    Min,
}

impl From<ReduceArg> for Reduce {
    fn from(r: ReduceArg) -> Self {
        match r {
            ReduceArg::Mean => Reduce::Mean,
            ReduceArg::Min => Reduce::Min,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Pair,
    Dataset,
}

#[derive(Debug, Args)]
struct SeedArg {
    #[arg(long, env = "PDFLOW_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TreesArgs {
    /// Independent random trees to average over.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    trees: u64,
    #[arg(long, value_enum, default_value = "mean")]
    reduce: ReduceArg,
}

impl TreesArgs {
    fn seeds(&self, base: u64) -> Vec<u64> {
        (0..self.trees).map(|t| base.wrapping_add(t)).collect()
    }
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    max_size: usize,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DistArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, value_enum, default_value = "flowtree")]
    method: MethodArg,
    #[arg(long, value_enum, default_value = "l2")]
    metric: MetricArg,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    trees: TreesArgs,
    #[arg(long, default_value_t = DEFAULT_SIZE_CAP)]
    oracle_cap: usize,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "l2")]
    metric: MetricArg,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct KnnArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long, value_enum, default_value = "flowtree")]
    method: MethodArg,
    #[arg(long, value_enum, default_value = "l2")]
    metric: MetricArg,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    trees: TreesArgs,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
    #[arg(long, default_value_t = DEFAULT_SIZE_CAP)]
    oracle_cap: usize,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "exact,embedding,flowtree"
    )]
    methods: Vec<MethodArg>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "l1,l2,linf")]
    metrics: Vec<MetricArg>,
    #[command(flatten)]
    seed: SeedArg,
    /// Sampled pairs for the error tables.
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    #[arg(long, value_enum, default_value = "pair")]
    tree_policy: PolicyArg,
    #[arg(long, default_value_t = 0.1)]
    query_fraction: f64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
    #[arg(long, default_value_t = DEFAULT_SIZE_CAP)]
    oracle_cap: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write `eval.json` next to the CSV tables.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "embedding,flowtree"
    )]
    methods: Vec<MethodArg>,
    #[arg(long, value_enum, default_value = "l2")]
    metric: MetricArg,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[command(flatten)]
    seed: SeedArg,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_parse() {
            EXIT_PARSE
        } else {
            match e.root() {
                Error::SizeCap { .. } => EXIT_ORACLE_CAP,
                Error::InvalidConfig(_) | Error::EmptyInput(_) | Error::Io { .. } => EXIT_USAGE,
                _ => EXIT_INTERNAL,
            }
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    eprintln!("+ {}  # {:?}", argv.join(" "), cli.command);
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();

    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Dist(a) => cmd_dist(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Knn(a) => cmd_knn(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn ensure_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))
}

fn ensure_input_dir(dir: &Path) -> CmdResult {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{}: not a directory", dir.display())))
    }
}

fn ensure_parent(path: &Path) -> CmdResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(|e| Failure::from(Error::from(e)))
}

#[derive(Serialize)]
struct Manifest {
    kind: &'static str,
    count: usize,
    max_size: usize,
    seed: u64,
    files: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    size: usize,
    seed: u64,
}

fn cmd_gen(a: &GenArgs) -> CmdResult {
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    ensure_dir(&a.out)?;
    let mut files = Vec::with_capacity(a.count);
    for i in 0..a.count {
        // Sizes grow linearly up to max_size, like s = 10·x for x = 1..100.
        let size = (a.max_size * (i + 1)).div_ceil(a.count);
        let seed = derive_seed(a.seed.seed, i as u64);
        let d = match a.kind {
            Kind::Uniform => gen_uniform(size, seed),
            Kind::Gaussian => gen_gaussian(size, seed),
        };
        let name = format!("dgm_{i:04}.txt");
        save_diagram(&d, a.out.join(&name))?;
        files.push(ManifestEntry {
            file: name,
            size,
            seed,
        });
    }
    let manifest = Manifest {
        kind: match a.kind {
            Kind::Uniform => "uniform",
            Kind::Gaussian => "gaussian",
        },
        count: a.count,
        max_size: a.max_size,
        seed: a.seed.seed,
        files,
    };
    write_text(&a.out.join("manifest.json"), &(to_json(&manifest)? + "\n"))
}

fn cmd_dist(a: &DistArgs) -> CmdResult {
    let p = load_diagram(&a.a)?;
    let q = load_diagram(&a.b)?;
    let report = distance_report(
        &p,
        &q,
        a.method.into(),
        a.metric.into(),
        &a.trees.seeds(a.seed.seed),
        a.trees.reduce.into(),
        a.oracle_cap,
    )?;
    println!("{}", to_json(&report)?);
    Ok(())
}

fn cmd_embed(a: &EmbedArgs) -> CmdResult {
    ensure_input_dir(&a.input)?;
    let loaded = load_dir(&a.input)?;
    if loaded.is_empty() {
        return Err(usage(format!("{}: no .txt diagrams", a.input.display())));
    }
    ensure_dir(&a.out)?;
    let refs: Vec<&PersistenceDiagram> = loaded.iter().map(|(_, d)| d).collect();
    let tree = ShiftedQuadtree::for_diagrams(&refs, TreeConfig::new(a.seed.seed, a.metric.into()))?;
    for (path, d) in &loaded {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        embed(&tree, d)?.save(a.out.join(format!("{stem}.vec")))?;
    }
    write_text(&a.out.join("tree.json"), &(to_json(&tree.meta())? + "\n"))
}

#[derive(Serialize)]
struct KnnRow<'a> {
    query: &'a str,
    rank: usize,
    candidate: &'a str,
    distance: f64,
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned()
}

fn cmd_knn(a: &KnnArgs) -> CmdResult {
    ensure_input_dir(&a.queries)?;
    ensure_input_dir(&a.candidates)?;
    if let Some(out) = &a.out {
        ensure_parent(out)?;
    }
    let queries = load_dir(&a.queries)?;
    let candidates = load_dir(&a.candidates)?;
    if queries.is_empty() || candidates.is_empty() {
        return Err(usage(
            "query and candidate directories must contain .txt diagrams",
        ));
    }
    let qr: Vec<&PersistenceDiagram> = queries.iter().map(|(_, d)| d).collect();
    let cr: Vec<&PersistenceDiagram> = candidates.iter().map(|(_, d)| d).collect();
    let seeds = a.trees.seeds(a.seed.seed);
    let dist = with_workers(a.workers as usize, || {
        approx_matrix(
            &qr,
            &cr,
            a.method.into(),
            a.metric.into(),
            &seeds,
            a.trees.reduce.into(),
            a.oracle_cap,
        )
    })??;

    let qnames: Vec<String> = queries.iter().map(|(p, _)| file_name(p)).collect();
    let cnames: Vec<String> = candidates.iter().map(|(p, _)| file_name(p)).collect();
    let mut rows = Vec::new();
    for (qi, row) in dist.iter().enumerate() {
        for (rank, c) in ranking(row).into_iter().take(a.k).enumerate() {
            rows.push(KnnRow {
                query: &qnames[qi],
                rank: rank + 1,
                candidate: &cnames[c],
                distance: row[c],
            });
        }
    }
    emit_csv(a.out.as_deref(), &rows)
}

fn emit_csv<T: Serialize>(out: Option<&Path>, rows: &[T]) -> CmdResult {
    match out {
        Some(path) => Ok(write_csv(path, rows)?),
        None => {
            print!("{}", pdflow::eval::csv_string(rows)?);
            Ok(())
        }
    }
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    ensure_input_dir(&a.dataset)?;
    if !(0.0..1.0).contains(&a.query_fraction) {
        return Err(usage("--query-fraction must lie in [0, 1)"));
    }
    let dataset: Vec<PersistenceDiagram> =
        load_dir(&a.dataset)?.into_iter().map(|(_, d)| d).collect();
    ensure_dir(&a.out)?;
    let methods: Vec<Method> = a.methods.iter().map(|&m| m.into()).collect();
    let metrics: Vec<GroundMetric> = a.metrics.iter().map(|&m| m.into()).collect();
    let cfg = EvalConfig {
        seed: a.seed.seed,
        n_pairs: a.pairs,
        tree_policy: match a.tree_policy {
            PolicyArg::Pair => TreePolicy::PerPair,
            PolicyArg::Dataset => TreePolicy::Dataset,
        },
        workers: a.workers as usize,
        oracle_cap: a.oracle_cap,
        query_fraction: a.query_fraction,
    };
    let report = run_evaluation(&dataset, &methods, &metrics, &cfg)?;
    report.write_to_dir(&a.out)?;
    if a.json {
        report.write_json(a.out.join("eval.json"))?;
    }
    if report.skipped_rate() > 0.5 {
        return Err(Failure {
            code: EXIT_ORACLE_CAP,
            message: format!(
                "{} of {} pairs exceeded the oracle cap",
                report.skipped_pairs, report.attempted_pairs
            ),
        });
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> CmdResult {
    if let Some(out) = &a.out {
        ensure_parent(out)?;
    }
    let methods: Vec<Method> = a.methods.iter().map(|&m| m.into()).collect();
    let rows = runtime_bench(&a.sizes, &methods, a.metric.into(), a.seed.seed, a.reps)?;
    emit_csv(a.out.as_deref(), &rows)
}
