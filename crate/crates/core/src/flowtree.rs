//! Greedy augmented matching on a shifted quadtree and the flowtree
//! estimate built from it.
//!
//! Units of mass are matched bottom-up. Inside a non-terminal cell as many
//! P units as possible are paired with Q units and the surplus (from one
//! side only) moves to the parent. Inside a terminal cell every unmatched
//! unit goes straight to its own diagonal projection. The flowtree
//! estimate is the ground-metric cost of the resulting matching; the tree
//! is used only to decide who gets paired with whom.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diagram::{GroundMetric, PersistenceDiagram, Point};
use crate::embedding::embedding_distance;
use crate::error::{Error, Result};
use crate::quadtree::{CellId, ShiftedQuadtree, TreeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Cross,
    PToDiagonal,
    QToDiagonal,
}

impl PairKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PairKind::Cross => "cross",
            PairKind::PToDiagonal => "p_to_diagonal",
            PairKind::QToDiagonal => "q_to_diagonal",
        }
    }
}

/// `mass` units of `source` sent to `target`. For cross pairs the source
/// is in P and the target in Q; a diagonal pair joins a point with its own
/// projection (the projection is the source for `QToDiagonal`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub kind: PairKind,
    pub source: Point,
    pub target: Point,
    pub mass: u64,
    /// Tree level of the cell in which the pair was formed.
    pub level: u32,
    /// `mass · ‖source − target‖`.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedMatching {
    pub metric: GroundMetric,
    pub pairs: Vec<MatchedPair>,
    pub cost: f64,
}

impl AugmentedMatching {
    /// Audit dump: one `kind bx by dx dy mass cost` line per pair.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {}",
                p.kind.as_str(),
                p.source.x,
                p.source.y,
                p.target.x,
                p.target.y,
                p.mass,
                p.cost
            );
        }
        out
    }
}

/// Output of [`greedy_match`] with per-level bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyMatching {
    pub matching: AugmentedMatching,
    /// `residuals[i]` is the number of units left unmatched in non-terminal
    /// cells after processing level `level_lo + i`.
    pub residuals: Vec<u64>,
    /// Units left over at a non-terminal root were sent to the diagonal.
    pub root_fallback: bool,
}

impl GreedyMatching {
    /// `Σ side(ℓ) · residual(ℓ)`: the tree-metric cost of the greedy flow.
    pub fn tree_cost(&self, tree: &ShiftedQuadtree) -> f64 {
        self.residuals
            .iter()
            .enumerate()
            .map(|(i, &r)| tree.side(tree.level_lo() + i as u32) * r as f64)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Side {
    P,
    Q,
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    key: u128,
    fx: u64,
    fy: u64,
    side: Side,
    /// Rank in the diagram's canonical `(birth, death)` order.
    rank: usize,
    mass: u64,
}

fn interleave(x: u64, y: u64) -> u128 {
    let mut key = 0u128;
    for bit in 0..64 {
        key |= u128::from((x >> bit) & 1) << (2 * bit + 1);
        key |= u128::from((y >> bit) & 1) << (2 * bit);
    }
    key
}

/// Bottom-up greedy augmented matching between `p` and `q` on `tree`.
///
/// Within a cell, cross pairs are formed in canonical `(birth, death)` order
/// on both sides, which makes the result symmetric under swapping P and Q.
pub fn greedy_match(
    tree: &ShiftedQuadtree,
    p: &PersistenceDiagram,
    q: &PersistenceDiagram,
    metric: GroundMetric,
) -> Result<GreedyMatching> {
    let mut active: Vec<Unit> = Vec::with_capacity(p.len() + q.len());
    for (side, d) in [(Side::P, p), (Side::Q, q)] {
        for (rank, pt) in d.iter().enumerate() {
            let (fx, fy) = tree.finest_index(pt.point())?;
            active.push(Unit {
                key: interleave(fx, fy),
                fx,
                fy,
                side,
                rank,
                mass: u64::from(pt.multiplicity),
            });
        }
    }
    active.sort_unstable_by_key(|u| (u.key, u.side, u.rank));

    let point_of = |u: &Unit| match u.side {
        Side::P => p.points()[u.rank],
        Side::Q => q.points()[u.rank],
    };

    let mut pairs: Vec<MatchedPair> = Vec::new();
    let mut cost = 0.0;
    let mut residuals = Vec::with_capacity(tree.num_levels() as usize);
    let mut root_fallback = false;
    let mut next: Vec<Unit> = Vec::with_capacity(active.len());

    let to_diagonal = |u: &Unit, level: u32, pairs: &mut Vec<MatchedPair>, cost: &mut f64| {
        let pt = point_of(u);
        let c = u.mass as f64 * pt.diagonal_distance(metric);
        let (kind, source, target) = match u.side {
            Side::P => (PairKind::PToDiagonal, pt.point(), pt.projection()),
            Side::Q => (PairKind::QToDiagonal, pt.projection(), pt.point()),
        };
        *cost += c;
        pairs.push(MatchedPair {
            kind,
            source,
            target,
            mass: u.mass,
            level,
            cost: c,
        });
    };

    for level in tree.level_lo()..=tree.level_hi() {
        let k = level - tree.level_lo();
        let shift = 2 * k;
        let mut residual = 0u64;
        next.clear();
        let mut start = 0;
        while start < active.len() {
            let cell_key = active[start].key >> shift;
            let mut end = start + 1;
            while end < active.len() && active[end].key >> shift == cell_key {
                end += 1;
            }
            let group = &mut active[start..end];
            let cell = CellId {
                level,
                ix: group[0].fx >> k,
                iy: group[0].fy >> k,
            };
            if tree.is_terminal(cell) {
                for u in group.iter() {
                    to_diagonal(u, level, &mut pairs, &mut cost);
                }
            } else {
                group.sort_unstable_by_key(|u| (u.side, u.rank));
                let split = group.partition_point(|u| u.side == Side::P);
                let (ps, qs) = group.split_at_mut(split);
                let (mut i, mut j) = (0, 0);
                while i < ps.len() && j < qs.len() {
                    let m = ps[i].mass.min(qs[j].mass);
                    let (a, b) = (point_of(&ps[i]).point(), point_of(&qs[j]).point());
                    let c = m as f64 * metric.distance(a, b);
                    cost += c;
                    pairs.push(MatchedPair {
                        kind: PairKind::Cross,
                        source: a,
                        target: b,
                        mass: m,
                        level,
                        cost: c,
                    });
                    ps[i].mass -= m;
                    qs[j].mass -= m;
                    if ps[i].mass == 0 {
                        i += 1;
                    }
                    if qs[j].mass == 0 {
                        j += 1;
                    }
                }
                for u in ps[i..].iter().chain(qs[j..].iter()) {
                    residual += u.mass;
                    next.push(*u);
                }
            }
            start = end;
        }
        residuals.push(residual);
        std::mem::swap(&mut active, &mut next);
    }

    if !active.is_empty() {
        root_fallback = true;
        for u in &active {
            to_diagonal(u, tree.level_hi(), &mut pairs, &mut cost);
        }
    }

    Ok(GreedyMatching {
        matching: AugmentedMatching {
            metric,
            pairs,
            cost,
        },
        residuals,
        root_fallback,
    })
}

/// Cost of the greedy augmented matching: an upper bound on the exact
/// distance for every tree.
pub fn flowtree_distance(
    tree: &ShiftedQuadtree,
    p: &PersistenceDiagram,
    q: &PersistenceDiagram,
    metric: GroundMetric,
) -> Result<f64> {
    Ok(greedy_match(tree, p, q, metric)?.matching.cost)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Embedding,
    Flowtree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduce {
    Mean,
    Min,
}

impl Reduce {
    /// Combines per-tree estimates. The mean is clamped to the observed
    /// range so rounding never lifts it above the largest value.
    pub fn apply(self, values: &[f64]) -> f64 {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        match self {
            Reduce::Min => lo,
            Reduce::Mean => {
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (values.iter().sum::<f64>() / values.len() as f64).clamp(lo, hi)
            }
        }
    }
}

impl FromStr for Reduce {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduce::Mean),
            "min" => Ok(Reduce::Min),
            other => Err(Error::InvalidConfig(format!("unknown reduction `{other}`"))),
        }
    }
}

/// Estimate on one tree per seed (each built over `p ∪ q`), then reduce.
pub fn multi_tree_estimate(
    p: &PersistenceDiagram,
    q: &PersistenceDiagram,
    metric: GroundMetric,
    seeds: &[u64],
    reduce: Reduce,
    estimator: Estimator,
) -> Result<f64> {
    let values = per_tree_estimates(p, q, metric, seeds, estimator)?
        .into_iter()
        .map(|(_, v)| v)
        .collect::<Vec<_>>();
    Ok(reduce.apply(&values))
}

/// One `(tree, estimate)` per seed. When both diagrams are empty there is
/// nothing to build a tree over and the estimate is zero.
pub fn per_tree_estimates(
    p: &PersistenceDiagram,
    q: &PersistenceDiagram,
    metric: GroundMetric,
    seeds: &[u64],
    estimator: Estimator,
) -> Result<Vec<(Option<ShiftedQuadtree>, f64)>> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one seed is required".to_string(),
        ));
    }
    seeds
        .iter()
        .map(|&seed| {
            if p.is_empty() && q.is_empty() {
                return Ok((None, 0.0));
            }
            let tree = ShiftedQuadtree::for_diagrams(&[p, q], TreeConfig::new(seed, metric))?;
            let v = estimate_on_tree(&tree, p, q, metric, estimator)?;
            Ok((Some(tree), v))
        })
        .collect()
}

pub fn estimate_on_tree(
    tree: &ShiftedQuadtree,
    p: &PersistenceDiagram,
    q: &PersistenceDiagram,
    metric: GroundMetric,
    estimator: Estimator,
) -> Result<f64> {
    match estimator {
        Estimator::Embedding => embedding_distance(tree, p, q),
        Estimator::Flowtree => flowtree_distance(tree, p, q, metric),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagram::{gen_uniform, PDPoint};

    fn tree_over(ds: &[&PersistenceDiagram], seed: u64) -> ShiftedQuadtree {
        ShiftedQuadtree::for_diagrams(ds, TreeConfig::new(seed, GroundMetric::L2)).unwrap()
    }

    /// Full consumption and legal pair forms.
    fn assert_valid(m: &AugmentedMatching, p: &PersistenceDiagram, q: &PersistenceDiagram) {
        let mut used_p = vec![0u64; p.len()];
        let mut used_q = vec![0u64; q.len()];
        let find = |d: &PersistenceDiagram, pt: Point| {
            d.iter()
                .position(|x| x.point() == pt)
                .expect("pair endpoint is not a diagram point")
        };
        let mut total = 0.0;
        for pair in &m.pairs {
            assert!(pair.mass > 0);
            match pair.kind {
                PairKind::Cross => {
                    used_p[find(p, pair.source)] += pair.mass;
                    used_q[find(q, pair.target)] += pair.mass;
                }
                PairKind::PToDiagonal => {
                    let i = find(p, pair.source);
                    assert_eq!(pair.target, p.points()[i].projection());
                    used_p[i] += pair.mass;
                }
                PairKind::QToDiagonal => {
                    let j = find(q, pair.target);
                    assert_eq!(pair.source, q.points()[j].projection());
                    used_q[j] += pair.mass;
                }
            }
            let expected = pair.mass as f64 * m.metric.distance(pair.source, pair.target);
            assert!((pair.cost - expected).abs() <= 1e-12 * expected.max(1.0));
            total += pair.cost;
        }
        for (u, pt) in used_p.iter().zip(p.iter()) {
            assert_eq!(*u, u64::from(pt.multiplicity));
        }
        for (u, pt) in used_q.iter().zip(q.iter()) {
            assert_eq!(*u, u64::from(pt.multiplicity));
        }
        assert!((total - m.cost).abs() <= 1e-9 * total.max(1.0));
    }

    #[test]
    fn interleave_prefixes_are_parents() {
        let (x, y) = (0b1011_0110u64, 0b0110_1101u64);
        for k in 0..8 {
            assert_eq!(interleave(x, y) >> (2 * k), interleave(x >> k, y >> k));
        }
    }

    #[test]
    fn identical_diagrams_match_crosswise_at_zero_cost() {
        let p = gen_uniform(40, 1);
        let t = tree_over(&[&p], 2);
        let g = greedy_match(&t, &p, &p, GroundMetric::L2).unwrap();
        assert_eq!(g.matching.cost, 0.0);
        assert!(g.matching.pairs.iter().all(|x| x.kind == PairKind::Cross));
        assert_eq!(g.matching.pairs.len(), p.len());
        assert!(g.residuals.iter().all(|&r| r == 0));
        assert_valid(&g.matching, &p, &p);
    }

    #[test]
    fn singleton_against_empty() {
        let p = PersistenceDiagram::from_pairs(&[(0.0, 4.0)]).unwrap();
        let e = PersistenceDiagram::empty();
        for seed in 0..20 {
            let t = tree_over(&[&p], seed);
            let g = greedy_match(&t, &p, &e, GroundMetric::L2).unwrap();
            assert_eq!(g.matching.pairs.len(), 1);
            let pair = g.matching.pairs[0];
            assert_eq!(pair.kind, PairKind::PToDiagonal);
            assert_eq!(pair.source, Point::new(0.0, 4.0));
            assert_eq!(pair.target, Point::new(2.0, 2.0));
            assert!((g.matching.cost - 2.0 * 2f64.sqrt()).abs() < 1e-12);
            assert!(!g.root_fallback);
        }
    }

    #[test]
    fn against_empty_costs_sum_of_diagonal_distances() {
        let p = gen_uniform(30, 8);
        let e = PersistenceDiagram::empty();
        for m in GroundMetric::ALL {
            let expected: f64 = p
                .iter()
                .map(|x| f64::from(x.multiplicity) * x.diagonal_distance(m))
                .sum();
            for seed in 0..10 {
                let t = ShiftedQuadtree::for_diagrams(&[&p], TreeConfig::new(seed, m)).unwrap();
                let g = greedy_match(&t, &e, &p, m).unwrap();
                assert!((g.matching.cost - expected).abs() < 1e-9);
                assert!(g
                    .matching
                    .pairs
                    .iter()
                    .all(|x| x.kind == PairKind::QToDiagonal));
                assert_valid(&g.matching, &e, &p);
            }
        }
    }

    #[test]
    fn matching_is_valid_and_symmetric() {
        for seed in 0..30 {
            let p = gen_uniform(15, seed);
            let q = gen_uniform(11, seed + 100);
            let t = tree_over(&[&p, &q], seed);
            let pq = greedy_match(&t, &p, &q, GroundMetric::L2).unwrap();
            let qp = greedy_match(&t, &q, &p, GroundMetric::L2).unwrap();
            assert_valid(&pq.matching, &p, &q);
            assert_valid(&qp.matching, &q, &p);
            assert_eq!(pq.residuals, qp.residuals);
            assert!((pq.matching.cost - qp.matching.cost).abs() < 1e-9);
            let mut a: Vec<_> = pq
                .matching
                .pairs
                .iter()
                .map(|x| {
                    (
                        x.source.x.to_bits(),
                        x.source.y.to_bits(),
                        x.target.x.to_bits(),
                        x.target.y.to_bits(),
                        x.mass,
                    )
                })
                .collect();
            let mut b: Vec<_> = qp
                .matching
                .pairs
                .iter()
                .map(|x| {
                    (
                        x.target.x.to_bits(),
                        x.target.y.to_bits(),
                        x.source.x.to_bits(),
                        x.source.y.to_bits(),
                        x.mass,
                    )
                })
                .collect();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn level_cost_bound_l2() {
        for seed in 0..30 {
            let p = gen_uniform(20, seed);
            let q = gen_uniform(20, seed + 50);
            let t = tree_over(&[&p, &q], seed);
            let g = greedy_match(&t, &p, &q, GroundMetric::L2).unwrap();
            for pair in &g.matching.pairs {
                let bound = pair.mass as f64 * t.side(pair.level) * 2f64.sqrt();
                assert!(pair.cost <= bound * (1.0 + 1e-12), "{pair:?}");
            }
        }
    }

    #[test]
    fn residuals_reproduce_tree_distance() {
        for seed in 0..30 {
            let p = gen_uniform(5, seed);
            let q = gen_uniform(5, seed + 1000);
            let t = tree_over(&[&p, &q], seed);
            let g = greedy_match(&t, &p, &q, GroundMetric::L2).unwrap();
            let dt = embedding_distance(&t, &p, &q).unwrap();
            assert!((g.tree_cost(&t) - dt).abs() < 1e-9);
        }
    }

    #[test]
    fn multiplicities_are_consumed_in_place() {
        let p = PersistenceDiagram::from_points([PDPoint::new(0.0, 10.0, 3).unwrap()]);
        let q = PersistenceDiagram::from_points([PDPoint::new(0.0, 10.0, 1).unwrap()]);
        let t = tree_over(&[&p, &q], 5);
        let g = greedy_match(&t, &p, &q, GroundMetric::L2).unwrap();
        assert_valid(&g.matching, &p, &q);
        let cross: u64 = g
            .matching
            .pairs
            .iter()
            .filter(|x| x.kind == PairKind::Cross)
            .map(|x| x.mass)
            .sum();
        assert_eq!(cross, 1);
        assert!((g.matching.cost - 2.0 * 10.0 / 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn non_terminal_root_falls_back_to_diagonal() {
        let p = PersistenceDiagram::from_pairs(&[(0.0, 100.0), (0.0, 101.0)]).unwrap();
        let q = PersistenceDiagram::from_pairs(&[(0.0, 100.0)]).unwrap();
        let cfg = TreeConfig::new(3, GroundMetric::L2).with_cover_projections(false);
        let t = ShiftedQuadtree::for_diagrams(&[&p, &q], cfg).unwrap();
        assert!(!t.is_terminal(t.root()));
        let g = greedy_match(&t, &p, &q, GroundMetric::L2).unwrap();
        assert!(g.root_fallback);
        assert_valid(&g.matching, &p, &q);
        assert_eq!(*g.residuals.last().unwrap(), 1);
        let dt = embedding_distance(&t, &p, &q).unwrap();
        assert!((g.tree_cost(&t) - dt).abs() < 1e-9);
    }

    #[test]
    fn outside_root_is_an_error() {
        let p = gen_uniform(5, 1);
        let far = PersistenceDiagram::from_pairs(&[(1e4, 2e4)]).unwrap();
        let t = tree_over(&[&p], 1);
        assert!(greedy_match(&t, &p, &far, GroundMetric::L2).is_err());
    }

    #[test]
    fn multi_tree_reductions() {
        let p = gen_uniform(12, 1);
        let q = gen_uniform(9, 2);
        let seeds: Vec<u64> = (0..10).collect();
        for est in [Estimator::Flowtree, Estimator::Embedding] {
            let single =
                multi_tree_estimate(&p, &q, GroundMetric::L2, &[4], Reduce::Mean, est).unwrap();
            let t = tree_over(&[&p, &q], 4);
            assert_eq!(
                single,
                estimate_on_tree(&t, &p, &q, GroundMetric::L2, est).unwrap()
            );
            let mean =
                multi_tree_estimate(&p, &q, GroundMetric::L2, &seeds, Reduce::Mean, est).unwrap();
            let min =
                multi_tree_estimate(&p, &q, GroundMetric::L2, &seeds, Reduce::Min, est).unwrap();
            assert!(min <= mean);
        }
        assert!(multi_tree_estimate(
            &p,
            &q,
            GroundMetric::L2,
            &[],
            Reduce::Min,
            Estimator::Flowtree
        )
        .is_err());
        let e = PersistenceDiagram::empty();
        assert_eq!(
            multi_tree_estimate(
                &e,
                &e,
                GroundMetric::L2,
                &[1],
                Reduce::Min,
                Estimator::Flowtree
            )
            .unwrap(),
            0.0
        );
    }

    #[test]
    fn dump_format() {
        let p = PersistenceDiagram::from_pairs(&[(0.0, 4.0)]).unwrap();
        let t = tree_over(&[&p], 0);
        let g = greedy_match(&t, &p, &PersistenceDiagram::empty(), GroundMetric::LInf).unwrap();
        assert_eq!(g.matching.to_text(), "p_to_diagonal 0 4 2 2 1 2\n");
    }
}
