//! Evaluation harness: relative error against the exact oracle, recall@m
//! for nearest-neighbor search, rank scatter data and runtime scaling.
//!
//! Every table is a pure function of the dataset and the seeds, apart from
//! the columns whose names end in `_seconds`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagram::{gen_uniform, GroundMetric, PersistenceDiagram};
use crate::embedding::{embed, l1_distance, EmbeddingVector};
use crate::error::{Error, Result};
use crate::exact::{exact_distance_capped, DEFAULT_SIZE_CAP};
use crate::flowtree::{flowtree_distance, greedy_match, Estimator, Reduce};
use crate::quadtree::{ShiftedQuadtree, TreeConfig, TreeMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Embedding,
    Flowtree,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Exact, Method::Embedding, Method::Flowtree];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Embedding => "embedding",
            Method::Flowtree => "flowtree",
        }
    }

    fn estimator(self) -> Option<Estimator> {
        match self {
            Method::Exact => None,
            Method::Embedding => Some(Estimator::Embedding),
            Method::Flowtree => Some(Estimator::Flowtree),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Method::Exact),
            "embedding" | "embd" => Ok(Method::Embedding),
            "flowtree" | "ft" => Ok(Method::Flowtree),
            other => Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

/// Which points a quadtree is built over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreePolicy {
    /// A fresh tree over the union of each compared pair.
    PerPair,
    /// One tree over the union of the whole dataset.
    Dataset,
}

impl FromStr for TreePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair" | "per-pair" | "perpair" => Ok(TreePolicy::PerPair),
            "dataset" => Ok(TreePolicy::Dataset),
            other => Err(Error::InvalidConfig(format!(
                "unknown tree policy `{other}`"
            ))),
        }
    }
}

/// Independent seed for sub-stream `stream` of `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Runs `f` on a pool with `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(pool.install(f))
}

/// `|d_true − d_approx| / d_true`. Undefined (`None`) when the true
/// distance is zero but the estimate is not.
pub fn relative_error(d_true: f64, d_approx: f64) -> Option<f64> {
    if d_true > 0.0 {
        Some((d_true - d_approx).abs() / d_true)
    } else if d_approx == d_true {
        Some(0.0)
    } else {
        log::warn!("relative error undefined: exact distance 0, estimate {d_approx}");
        None
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub pair: usize,
    pub left: usize,
    pub right: usize,
    pub metric: GroundMetric,
    pub method: Method,
    pub exact: f64,
    pub approx: f64,
    pub rel_error: Option<f64>,
    pub elapsed_seconds: f64,
    pub build_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub method: Method,
    pub ground_metric: GroundMetric,
    pub mean_rel_error: f64,
    pub std_rel_error: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    pub n_pairs: usize,
    pub tree_policy: TreePolicy,
    pub workers: usize,
    pub oracle_cap: usize,
    pub query_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_pairs: 100,
            tree_policy: TreePolicy::PerPair,
            workers: 1,
            oracle_cap: DEFAULT_SIZE_CAP,
            query_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSuite {
    pub pair_errors: Vec<PairError>,
    pub stats: Vec<ErrorStats>,
    pub attempted_pairs: usize,
    pub skipped_pairs: usize,
}

impl ErrorSuite {
    pub fn skipped_rate(&self) -> f64 {
        if self.attempted_pairs == 0 {
            0.0
        } else {
            self.skipped_pairs as f64 / self.attempted_pairs as f64
        }
    }
}

/// `k` distinct unordered pairs `(i, j)`, `i < j`, sampled without
/// replacement and returned in lexicographic order.
pub fn sample_pairs(n: usize, k: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = n * n.saturating_sub(1) / 2;
    let k = k.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, total, k).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|mut t| {
            let mut i = 0;
            while t >= n - 1 - i {
                t -= n - 1 - i;
                i += 1;
            }
            (i, i + 1 + t)
        })
        .collect()
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

fn dataset_trees(
    dataset: &[&PersistenceDiagram],
    metrics: &[GroundMetric],
    seed: u64,
) -> Result<BTreeMap<GroundMetric, (ShiftedQuadtree, f64)>> {
    metrics
        .iter()
        .map(|&m| {
            let (tree, secs) =
                timed(|| ShiftedQuadtree::for_diagrams(dataset, TreeConfig::new(seed, m)));
            Ok((m, (tree?, secs)))
        })
        .collect()
}

/// Relative error of each method against the exact distance on sampled
/// pairs, summarized per `(method, metric)`.
pub fn error_suite(
    dataset: &[PersistenceDiagram],
    methods: &[Method],
    metrics: &[GroundMetric],
    cfg: &EvalConfig,
) -> Result<ErrorSuite> {
    if dataset.len() < 2 {
        return Err(Error::InvalidConfig(
            "error suite needs at least two diagrams".into(),
        ));
    }
    let pairs = sample_pairs(dataset.len(), cfg.n_pairs, cfg.seed);
    let refs: Vec<&PersistenceDiagram> = dataset.iter().collect();
    let shared = match cfg.tree_policy {
        TreePolicy::Dataset => Some(dataset_trees(&refs, metrics, cfg.seed)?),
        TreePolicy::PerPair => None,
    };

    let per_pair: Vec<Result<Option<Vec<PairError>>>> = with_workers(cfg.workers, || {
        pairs
            .par_iter()
            .enumerate()
            .map(|(pair_idx, &(l, r))| {
                let (p, q) = (&dataset[l], &dataset[r]);
                let mut rows = Vec::new();
                for &metric in metrics {
                    let (exact, exact_secs) =
                        timed(|| exact_distance_capped(p, q, metric, cfg.oracle_cap));
                    let exact = match exact {
                        Ok(v) => v,
                        Err(Error::SizeCap { size, cap }) => {
                            log::warn!(
                                "pair ({l}, {r}) skipped: size {size} over oracle cap {cap}"
                            );
                            return Ok(None);
                        }
                        Err(e) => return Err(e),
                    };
                    let needs_tree = methods.iter().any(|m| m.estimator().is_some());
                    let (tree, build_secs) = match (&shared, needs_tree) {
                        (_, false) => (None, 0.0),
                        (Some(trees), true) => {
                            let (t, s) = &trees[&metric];
                            (Some(std::borrow::Cow::Borrowed(t)), *s)
                        }
                        (None, true) => {
                            if p.is_empty() && q.is_empty() {
                                (None, 0.0)
                            } else {
                                let seed = derive_seed(cfg.seed, pair_idx as u64);
                                let (t, s) = timed(|| {
                                    ShiftedQuadtree::for_diagrams(
                                        &[p, q],
                                        TreeConfig::new(seed, metric),
                                    )
                                });
                                (Some(std::borrow::Cow::Owned(t?)), s)
                            }
                        }
                    };
                    for &method in methods {
                        let (approx, secs) = match (method.estimator(), &tree) {
                            (None, _) => (exact, exact_secs),
                            (Some(_), None) => (0.0, 0.0),
                            (Some(est), Some(t)) => {
                                let (v, s) = timed(|| estimate(t, p, q, metric, est));
                                (v?, s)
                            }
                        };
                        rows.push(PairError {
                            pair: pair_idx,
                            left: l,
                            right: r,
                            metric,
                            method,
                            exact,
                            approx,
                            rel_error: relative_error(exact, approx),
                            elapsed_seconds: secs,
                            build_seconds: if method == Method::Exact {
                                0.0
                            } else {
                                build_secs
                            },
                        });
                    }
                }
                Ok(Some(rows))
            })
            .collect()
    })?;

    let mut pair_errors = Vec::new();
    let mut skipped = 0;
    for r in per_pair {
        match r? {
            Some(rows) => pair_errors.extend(rows),
            None => skipped += 1,
        }
    }

    let mut stats = Vec::new();
    for &method in methods {
        for &metric in metrics {
            let errs: Vec<f64> = pair_errors
                .iter()
                .filter(|e| e.method == method && e.metric == metric)
                .filter_map(|e| e.rel_error)
                .collect();
            let (mean, std) = mean_std(&errs);
            stats.push(ErrorStats {
                method,
                ground_metric: metric,
                mean_rel_error: mean,
                std_rel_error: std,
                n_pairs: errs.len(),
            });
        }
    }

    Ok(ErrorSuite {
        pair_errors,
        stats,
        attempted_pairs: pairs.len(),
        skipped_pairs: skipped,
    })
}

fn estimate(
    tree: &ShiftedQuadtree,
    p: &PersistenceDiagram,
    q: &PersistenceDiagram,
    metric: GroundMetric,
    est: Estimator,
) -> Result<f64> {
    crate::flowtree::estimate_on_tree(tree, p, q, metric, est)
}

/// Deterministic query/candidate split: a seeded shuffle, the first
/// `round(n · fraction)` indices (at least one, leaving at least one
/// candidate) become queries. Both lists are returned sorted.
pub fn split_queries(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidConfig(
            "a query split needs at least two diagrams".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let nq = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut queries = idx[..nq].to_vec();
    let mut candidates = idx[nq..].to_vec();
    queries.sort_unstable();
    candidates.sort_unstable();
    Ok((queries, candidates))
}

/// Exact distances, `queries × candidates`.
pub fn ground_truth(
    queries: &[&PersistenceDiagram],
    candidates: &[&PersistenceDiagram],
    metric: GroundMetric,
    cap: usize,
) -> Result<Vec<Vec<f64>>> {
    queries
        .par_iter()
        .map(|q| {
            candidates
                .iter()
                .map(|c| exact_distance_capped(q, c, metric, cap))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Approximate distances, `queries × candidates`, on one tree per seed
/// built over all queries and candidates; per-tree matrices are reduced
/// entry-wise.
pub fn approx_matrix(
    queries: &[&PersistenceDiagram],
    candidates: &[&PersistenceDiagram],
    method: Method,
    metric: GroundMetric,
    seeds: &[u64],
    reduce: Reduce,
    cap: usize,
) -> Result<Vec<Vec<f64>>> {
    let Some(est) = method.estimator() else {
        return ground_truth(queries, candidates, metric, cap);
    };
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    let all: Vec<&PersistenceDiagram> = queries.iter().chain(candidates).copied().collect();
    let per_tree = seeds
        .iter()
        .map(|&seed| {
            let tree = ShiftedQuadtree::for_diagrams(&all, TreeConfig::new(seed, metric))?;
            single_tree_matrix(&tree, queries, candidates, metric, est)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values = Vec::with_capacity(seeds.len());
    Ok((0..queries.len())
        .map(|i| {
            (0..candidates.len())
                .map(|j| {
                    values.clear();
                    values.extend(per_tree.iter().map(|m| m[i][j]));
                    reduce.apply(&values)
                })
                .collect()
        })
        .collect())
}

fn single_tree_matrix(
    tree: &ShiftedQuadtree,
    queries: &[&PersistenceDiagram],
    candidates: &[&PersistenceDiagram],
    metric: GroundMetric,
    est: Estimator,
) -> Result<Vec<Vec<f64>>> {
    match est {
        Estimator::Embedding => {
            let qv: Vec<EmbeddingVector> = queries
                .par_iter()
                .map(|d| embed(tree, d))
                .collect::<Result<_>>()?;
            let cv: Vec<EmbeddingVector> = candidates
                .par_iter()
                .map(|d| embed(tree, d))
                .collect::<Result<_>>()?;
            qv.par_iter()
                .map(|a| cv.iter().map(|b| l1_distance(a, b)).collect())
                .collect()
        }
        Estimator::Flowtree => queries
            .par_iter()
            .map(|q| {
                candidates
                    .iter()
                    .map(|c| flowtree_distance(tree, q, c, metric))
                    .collect()
            })
            .collect(),
    }
}

/// Candidate indices ordered by distance, ties broken by index.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub method: Method,
    pub metric: GroundMetric,
    pub m_values: Vec<usize>,
    pub recall: Vec<f64>,
}

/// Recall@m for `m = 1..=m_max` given exact and approximate distance matrices.
pub fn recall_from_matrices(truth: &[Vec<f64>], approx: &[Vec<f64>], m_max: usize) -> Vec<f64> {
    let ranks: Vec<usize> = truth
        .iter()
        .zip(approx)
        .map(|(t, a)| {
            let nn = ranking(t)[0];
            ranking(a).iter().position(|&c| c == nn).unwrap() + 1
        })
        .collect();
    let nq = ranks.len().max(1) as f64;
    (1..=m_max)
        .map(|m| ranks.iter().filter(|&&r| r <= m).count() as f64 / nq)
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn recall_at_m(
    queries: &[&PersistenceDiagram],
    candidates: &[&PersistenceDiagram],
    method: Method,
    metric: GroundMetric,
    m_max: usize,
    seeds: &[u64],
    reduce: Reduce,
    cap: usize,
) -> Result<RecallCurve> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig(
            "recall needs at least one candidate".into(),
        ));
    }
    let truth = ground_truth(queries, candidates, metric, cap)?;
    let approx = approx_matrix(queries, candidates, method, metric, seeds, reduce, cap)?;
    Ok(RecallCurve {
        method,
        metric,
        m_values: (1..=m_max).collect(),
        recall: recall_from_matrices(&truth, &approx, m_max),
    })
}

/// `(true_rank, approx_rank)` for each candidate, in candidate order. Ranks
/// start at 1.
pub fn ranking_pairs(truth_row: &[f64], approx_row: &[f64]) -> Vec<(usize, usize)> {
    let rank_of = |row: &[f64]| {
        let mut r = vec![0; row.len()];
        for (pos, c) in ranking(row).into_iter().enumerate() {
            r[c] = pos + 1;
        }
        r
    };
    rank_of(truth_row)
        .into_iter()
        .zip(rank_of(approx_row))
        .collect()
}

pub fn ranking_table(
    query: &PersistenceDiagram,
    candidates: &[&PersistenceDiagram],
    method: Method,
    metric: GroundMetric,
    seeds: &[u64],
    cap: usize,
) -> Result<Vec<(usize, usize)>> {
    let truth = ground_truth(&[query], candidates, metric, cap)?;
    let approx = approx_matrix(
        &[query],
        candidates,
        method,
        metric,
        seeds,
        Reduce::Mean,
        cap,
    )?;
    Ok(ranking_pairs(&truth[0], &approx[0]))
}

pub fn mean_rank_displacement(pairs: &[(usize, usize)]) -> f64 {
    let total: usize = pairs.iter().map(|&(a, b)| a.abs_diff(b)).sum();
    total as f64 / pairs.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub size: usize,
    pub method: Method,
    pub reps: usize,
    pub mean_seconds: f64,
    pub median_seconds: f64,
    pub build_seconds: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Times each method on a pair of uniform diagrams per size. Distance
/// computation is timed apart from the tree build; the build is the
/// median over `reps` fresh builds. Each method gets one untimed warm-up
/// call per size.
pub fn runtime_bench(
    sizes: &[usize],
    methods: &[Method],
    metric: GroundMetric,
    seed: u64,
    reps: usize,
) -> Result<Vec<RuntimeRow>> {
    let reps = reps.max(1);
    let mut rows = Vec::new();
    for (i, &size) in sizes.iter().enumerate() {
        let p = gen_uniform(size, derive_seed(seed, 2 * i as u64));
        let q = gen_uniform(size, derive_seed(seed, 2 * i as u64 + 1));
        let cfg = TreeConfig::new(derive_seed(seed, u64::MAX - i as u64), metric);
        let mut builds = Vec::with_capacity(reps);
        let mut tree = None;
        for _ in 0..reps {
            let (t, s) = timed(|| ShiftedQuadtree::for_diagrams(&[&p, &q], cfg));
            tree = Some(t?);
            builds.push(s);
        }
        let tree = tree.expect("reps >= 1");
        let build_seconds = median(&mut builds);
        for &method in methods {
            let run = || -> Result<f64> {
                match method {
                    Method::Exact => exact_distance_capped(&p, &q, metric, usize::MAX),
                    Method::Embedding => l1_distance(&embed(&tree, &p)?, &embed(&tree, &q)?),
                    Method::Flowtree => Ok(greedy_match(&tree, &p, &q, metric)?.matching.cost),
                }
            };
            // untimed warm-up
            std::hint::black_box(run()?);
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let (v, s) = timed(run);
                std::hint::black_box(v?);
                times.push(s);
            }
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            rows.push(RuntimeRow {
                size,
                method,
                reps,
                mean_seconds: mean,
                median_seconds: median(&mut times),
                build_seconds: if method == Method::Exact {
                    0.0
                } else {
                    build_seconds
                },
            });
        }
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub method: Method,
    pub metric: GroundMetric,
    pub m: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub method: Method,
    pub metric: GroundMetric,
    pub query: usize,
    pub candidate: usize,
    pub true_rank: usize,
    pub approx_rank: usize,
}

/// Everything `pdflow eval` writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pair_errors: Vec<PairError>,
    pub error_stats: Vec<ErrorStats>,
    pub recall: Vec<RecallRow>,
    pub ranking: Vec<RankingRow>,
    pub runtime: Vec<RuntimeRow>,
    pub attempted_pairs: usize,
    pub skipped_pairs: usize,
}

pub const REPORT_FILES: [&str; 5] = [
    "pair_errors.csv",
    "error_stats.csv",
    "recall.csv",
    "ranking.csv",
    "runtime.csv",
];

impl EvalReport {
    pub fn skipped_rate(&self) -> f64 {
        if self.attempted_pairs == 0 {
            0.0
        } else {
            self.skipped_pairs as f64 / self.attempted_pairs as f64
        }
    }

    /// Writes the five CSV tables.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(dir.join(REPORT_FILES[0]), &self.pair_errors)?;
        write_csv(dir.join(REPORT_FILES[1]), &self.error_stats)?;
        write_csv(dir.join(REPORT_FILES[2]), &self.recall)?;
        write_csv(dir.join(REPORT_FILES[3]), &self.ranking)?;
        write_csv(dir.join(REPORT_FILES[4]), &self.runtime)
    }

    /// JSON mirror of all five tables with the same field names.
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Writes rows with a header line even when `rows` is empty.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, csv_string(rows)?).map_err(|e| Error::io(path, e))
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
}

/// Drops every column whose header ends in `_seconds`, for comparing
/// tables across runs.
pub fn strip_timing_columns(csv_text: &str) -> String {
    let mut lines = csv_text.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let keep: Vec<bool> = header
        .split(',')
        .map(|h| !h.ends_with("_seconds"))
        .collect();
    let filter = |line: &str| {
        line.split(',')
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(f, _)| f)
            .collect::<Vec<_>>()
            .join(",")
    };
    std::iter::once(header)
        .chain(lines)
        .map(filter)
        .collect::<Vec<_>>()
        .join("\n")
}

/// Full protocol over one dataset: error suite on sampled pairs (tree per
/// `cfg.tree_policy`), then recall and ranking on a seeded query split with
/// one dataset-wide tree per metric.
pub fn run_evaluation(
    dataset: &[PersistenceDiagram],
    methods: &[Method],
    metrics: &[GroundMetric],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let suite = error_suite(dataset, methods, metrics, cfg)?;

    let (qi, ci) = split_queries(dataset.len(), cfg.query_fraction, derive_seed(cfg.seed, 1))?;
    let queries: Vec<&PersistenceDiagram> = qi.iter().map(|&i| &dataset[i]).collect();
    let candidates: Vec<&PersistenceDiagram> = ci.iter().map(|&i| &dataset[i]).collect();

    let mut recall = Vec::new();
    let mut rankings = Vec::new();
    with_workers(cfg.workers, || -> Result<()> {
        for &metric in metrics {
            let truth = match ground_truth(&queries, &candidates, metric, cfg.oracle_cap) {
                Ok(t) => t,
                Err(Error::SizeCap { size, cap }) => {
                    log::warn!("recall for {metric} skipped: size {size} over oracle cap {cap}");
                    continue;
                }
                Err(e) => return Err(e),
            };
            for &method in methods {
                let approx = if method == Method::Exact {
                    truth.clone()
                } else {
                    approx_matrix(
                        &queries,
                        &candidates,
                        method,
                        metric,
                        &[derive_seed(cfg.seed, 2)],
                        Reduce::Mean,
                        cfg.oracle_cap,
                    )?
                };
                let curve = recall_from_matrices(&truth, &approx, candidates.len());
                recall.extend(curve.into_iter().enumerate().map(|(i, r)| RecallRow {
                    method,
                    metric,
                    m: i + 1,
                    recall: r,
                }));
                for (row, &q) in qi.iter().enumerate() {
                    for (k, (t, a)) in ranking_pairs(&truth[row], &approx[row])
                        .into_iter()
                        .enumerate()
                    {
                        rankings.push(RankingRow {
                            method,
                            metric,
                            query: q,
                            candidate: ci[k],
                            true_rank: t,
                            approx_rank: a,
                        });
                    }
                }
            }
        }
        Ok(())
    })??;

    // Per-pair timings grouped by s = max(|P|, |Q|) and method.
    let mut groups: BTreeMap<(usize, Method), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for e in &suite.pair_errors {
        let s = dataset[e.left]
            .total_count()
            .max(dataset[e.right].total_count()) as usize;
        let g = groups.entry((s, e.method)).or_default();
        g.0.push(e.elapsed_seconds);
        g.1.push(e.build_seconds);
    }
    let runtime = groups
        .into_iter()
        .map(|((size, method), (mut times, builds))| RuntimeRow {
            size,
            method,
            reps: times.len(),
            mean_seconds: times.iter().sum::<f64>() / times.len() as f64,
            median_seconds: median(&mut times),
            build_seconds: builds.iter().sum::<f64>() / builds.len() as f64,
        })
        .collect();

    Ok(EvalReport {
        pair_errors: suite.pair_errors,
        error_stats: suite.stats,
        recall,
        ranking: rankings,
        runtime,
        attempted_pairs: suite.attempted_pairs,
        skipped_pairs: suite.skipped_pairs,
    })
}

/// Single-distance result as printed by `pdflow dist`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub method: Method,
    pub metric: GroundMetric,
    pub value: f64,
    pub seeds: Vec<u64>,
    pub reduce: Option<Reduce>,
    /// Per-tree estimates in seed order.
    pub per_tree: Vec<f64>,
    pub tree_meta: Vec<TreeMeta>,
    /// Some tree had a non-terminal root and sent leftovers to the diagonal.
    pub root_fallback: bool,
    pub elapsed_seconds: f64,
}

pub fn distance_report(
    p: &PersistenceDiagram,
    q: &PersistenceDiagram,
    method: Method,
    metric: GroundMetric,
    seeds: &[u64],
    reduce: Reduce,
    cap: usize,
) -> Result<DistanceReport> {
    let start = Instant::now();
    let Some(est) = method.estimator() else {
        let value = exact_distance_capped(p, q, metric, cap)?;
        return Ok(DistanceReport {
            method,
            metric,
            value,
            seeds: Vec::new(),
            reduce: None,
            per_tree: Vec::new(),
            tree_meta: Vec::new(),
            root_fallback: false,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        });
    };
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    let mut per_tree = Vec::with_capacity(seeds.len());
    let mut tree_meta = Vec::new();
    let mut root_fallback = false;
    for &seed in seeds {
        if p.is_empty() && q.is_empty() {
            per_tree.push(0.0);
            continue;
        }
        let tree = ShiftedQuadtree::for_diagrams(&[p, q], TreeConfig::new(seed, metric))?;
        let v = match est {
            Estimator::Embedding => l1_distance(&embed(&tree, p)?, &embed(&tree, q)?)?,
            Estimator::Flowtree => {
                let g = greedy_match(&tree, p, q, metric)?;
                root_fallback |= g.root_fallback;
                g.matching.cost
            }
        };
        per_tree.push(v);
        tree_meta.push(tree.meta());
    }
    let value = reduce.apply(&per_tree);
    Ok(DistanceReport {
        method,
        metric,
        value,
        seeds: seeds.to_vec(),
        reduce: Some(reduce),
        per_tree,
        tree_meta,
        root_fallback,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagram::gen_gaussian;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(2.0, 3.0), Some(0.5));
        assert_eq!(relative_error(4.0, 2.0), Some(0.5));
        assert_eq!(relative_error(1.7, 1.7), Some(0.0));
        assert_eq!(relative_error(0.0, 0.3), None);
        assert_eq!(relative_error(0.0, 0.0), Some(0.0));
    }

    #[test]
    fn pair_sampling() {
        let all = sample_pairs(5, 100, 1);
        assert_eq!(all.len(), 10);
        assert_eq!(all[0], (0, 1));
        assert_eq!(all[9], (3, 4));
        let some = sample_pairs(20, 15, 3);
        assert_eq!(some.len(), 15);
        assert!(some.windows(2).all(|w| w[0] < w[1]));
        assert!(some.iter().all(|&(i, j)| i < j && j < 20));
        assert_eq!(some, sample_pairs(20, 15, 3));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (q, c) = split_queries(100, 0.1, 4).unwrap();
        assert_eq!((q.len(), c.len()), (10, 90));
        assert!(q.iter().all(|i| !c.contains(i)));
        assert_eq!((q.clone(), c), split_queries(100, 0.1, 4).unwrap());
        assert_eq!(split_queries(3, 0.0, 1).unwrap().0.len(), 1);
        assert!(split_queries(1, 0.5, 1).is_err());
    }

    #[test]
    fn ranking_ties_break_by_index() {
        assert_eq!(ranking(&[3.0, 1.0, 3.0, 0.5]), vec![3, 1, 0, 2]);
        let pairs = ranking_pairs(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        assert_eq!(pairs, vec![(1, 1), (2, 2), (3, 3)]);
        let pairs = ranking_pairs(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]);
        assert_eq!(pairs, vec![(1, 3), (2, 2), (3, 1)]);
        assert_eq!(mean_rank_displacement(&pairs), 4.0 / 3.0);
    }

    #[test]
    fn exact_against_itself_is_error_free() {
        let data: Vec<_> = (0..6).map(|i| gen_uniform(8 + i, i as u64)).collect();
        let cfg = EvalConfig {
            n_pairs: 10,
            ..EvalConfig::default()
        };
        let suite = error_suite(&data, &[Method::Exact], &GroundMetric::ALL, &cfg).unwrap();
        assert_eq!(suite.stats.len(), 3);
        for s in &suite.stats {
            assert_eq!(
                (s.mean_rel_error, s.std_rel_error, s.n_pairs),
                (0.0, 0.0, 10)
            );
        }
    }

    #[test]
    fn error_suite_shapes_and_skips() {
        let data: Vec<_> = (0..5).map(|i| gen_uniform(10, i)).collect();
        let cfg = EvalConfig {
            n_pairs: 4,
            ..EvalConfig::default()
        };
        let suite = error_suite(
            &data,
            &Method::ALL,
            &[GroundMetric::L1, GroundMetric::L2],
            &cfg,
        )
        .unwrap();
        assert_eq!(suite.stats.len(), 6);
        assert_eq!(suite.pair_errors.len(), 4 * 2 * 3);
        for e in &suite.pair_errors {
            if e.method == Method::Flowtree {
                assert!(e.approx >= e.exact - 1e-9);
            }
        }

        let capped = EvalConfig {
            oracle_cap: 5,
            ..cfg
        };
        let suite = error_suite(&data, &Method::ALL, &[GroundMetric::L2], &capped).unwrap();
        assert_eq!(suite.skipped_pairs, 4);
        assert_eq!(suite.skipped_rate(), 1.0);
        assert!(suite.pair_errors.is_empty());
        assert!(error_suite(&data[..1], &Method::ALL, &[GroundMetric::L2], &cfg).is_err());
    }

    #[test]
    fn dataset_tree_policy_runs() {
        let data: Vec<_> = (0..4).map(|i| gen_gaussian(12, i)).collect();
        let cfg = EvalConfig {
            n_pairs: 6,
            tree_policy: TreePolicy::Dataset,
            ..EvalConfig::default()
        };
        let suite = error_suite(&data, &Method::ALL, &[GroundMetric::L2], &cfg).unwrap();
        assert_eq!(suite.pair_errors.len(), 18);
    }

    #[test]
    fn recall_curve_properties() {
        let data: Vec<_> = (0..12).map(|i| gen_uniform(10, 50 + i)).collect();
        let refs: Vec<&PersistenceDiagram> = data.iter().collect();
        let (q, c) = refs.split_at(3);
        for method in Method::ALL {
            let curve = recall_at_m(
                q,
                c,
                method,
                GroundMetric::L2,
                c.len(),
                &[7],
                Reduce::Mean,
                4000,
            )
            .unwrap();
            assert!(curve.recall.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(*curve.recall.last().unwrap(), 1.0);
            if method == Method::Exact {
                assert_eq!(curve.recall[0], 1.0);
            }
        }
    }

    #[test]
    fn exact_ranking_is_the_identity() {
        let data: Vec<_> = (0..6).map(|i| gen_uniform(6, 90 + i)).collect();
        let refs: Vec<&PersistenceDiagram> = data[1..].iter().collect();
        let table =
            ranking_table(&data[0], &refs, Method::Exact, GroundMetric::L2, &[1], 4000).unwrap();
        assert_eq!(table.len(), 5);
        assert!(table.iter().all(|&(a, b)| a == b));
        let table = ranking_table(
            &data[0],
            &refs,
            Method::Flowtree,
            GroundMetric::L2,
            &[1],
            4000,
        )
        .unwrap();
        assert_eq!(table.len(), 5);
    }

    #[test]
    fn slope_fit() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(2)).collect();
        assert!((loglog_slope(&xs, &ys) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn runtime_rows() {
        let rows = runtime_bench(
            &[50, 100],
            &[Method::Flowtree, Method::Embedding],
            GroundMetric::L2,
            1,
            2,
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[0].size, rows[0].method), (50, Method::Flowtree));
        assert!(rows.iter().all(|r| r.reps == 2 && r.mean_seconds >= 0.0));
    }

    #[test]
    fn timing_columns_are_stripped() {
        let text = "a,b_seconds,c\n1,0.5,x\n2,0.25,y\n";
        assert_eq!(strip_timing_columns(text), "a,c\n1,x\n2,y");
    }

    #[test]
    fn distance_reports() {
        let p = PersistenceDiagram::from_pairs(&[(0.0, 4.0)]).unwrap();
        let q = PersistenceDiagram::from_pairs(&[(0.0, 6.0)]).unwrap();
        let r = distance_report(
            &p,
            &q,
            Method::Exact,
            GroundMetric::L2,
            &[],
            Reduce::Mean,
            10,
        )
        .unwrap();
        assert!((r.value - 2.0).abs() < 1e-12);
        let seeds: Vec<u64> = (0..10).collect();
        let mean = distance_report(
            &p,
            &q,
            Method::Flowtree,
            GroundMetric::L2,
            &seeds,
            Reduce::Mean,
            10,
        )
        .unwrap();
        let min = distance_report(
            &p,
            &q,
            Method::Flowtree,
            GroundMetric::L2,
            &seeds,
            Reduce::Min,
            10,
        )
        .unwrap();
        assert!(min.value <= mean.value);
        assert!(min.value >= 2.0 - 1e-9);
        assert_eq!(mean.tree_meta.len(), 10);
        let same = distance_report(
            &p,
            &p,
            Method::Flowtree,
            GroundMetric::L2,
            &[3],
            Reduce::Mean,
            10,
        )
        .unwrap();
        assert_eq!(same.value, 0.0);
    }
}
