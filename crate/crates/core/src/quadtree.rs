//! Randomly shifted dyadic grid hierarchy over the plane.
//!
//! The root is a square of side `2Δ'` (with `Δ'` the largest side of the
//! input bounding box) translated by a uniform random vector; every level
//! below halves the side. Levels are numbered so that `level_lo` is the
//! finest grid and `level_hi` the root. Cells are never materialized: a
//! [`CellId`] is computed on demand from a point and a level.
//!
//! Depth adapts to the data. The finest side is the first halving strictly
//! below half the minimum separation `δ_min`, where `δ_min` covers both
//! distinct input pairs and input-to-diagonal distances. A finest cell
//! therefore holds at most one distinct location and never touches the
//! diagonal, unless `max_levels_cap` binds (recorded in `truncated`).

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use ordered_float::OrderedFloat;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagram::{project_to_diagonal, GroundMetric, PersistenceDiagram, Point};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_LEVELS: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub seed: u64,
    pub max_levels_cap: u32,
    pub ground_metric: GroundMetric,
    /// Grow the bounding box to include the diagonal projections of the
    /// input, which makes the root cell terminal.
    pub cover_projections: bool,
}

impl TreeConfig {
    pub fn new(seed: u64, ground_metric: GroundMetric) -> Self {
        Self {
            seed,
            max_levels_cap: DEFAULT_MAX_LEVELS,
            ground_metric,
            cover_projections: true,
        }
    }

    pub fn with_max_levels(mut self, cap: u32) -> Self {
        self.max_levels_cap = cap;
        self
    }

    pub fn with_cover_projections(mut self, cover: bool) -> Self {
        self.cover_projections = cover;
        self
    }
}

/// Address of a grid cell: `(ix, iy)` counted from the root's lower-left
/// corner in units of the level's side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId {
    pub level: u32,
    pub ix: u64,
    pub iy: u64,
}

impl CellId {
    /// Dyadic parent one level up.
    pub fn parent(self) -> CellId {
        CellId {
            level: self.level + 1,
            ix: self.ix >> 1,
            iy: self.iy >> 1,
        }
    }
}

/// Reproducibility metadata for a built tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeMeta {
    pub seed: u64,
    pub signature: String,
    pub origin: Point,
    pub shift: Point,
    pub root_side: f64,
    pub level_lo: u32,
    pub level_hi: u32,
    pub delta_min: f64,
    pub spread: f64,
    pub truncated: bool,
    pub root_terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedQuadtree {
    config: TreeConfig,
    origin: Point,
    shift: Point,
    root_side: f64,
    level_lo: u32,
    level_hi: u32,
    delta_min: f64,
    spread: f64,
    truncated: bool,
    /// `(origin.x - origin.y) / root_side`: the diagonal's offset in root units.
    diagonal_offset: f64,
    signature: String,
}

pub fn build_tree(points: &[Point], config: TreeConfig) -> Result<ShiftedQuadtree> {
    ShiftedQuadtree::build(points, config)
}

impl ShiftedQuadtree {
    pub fn build(points: &[Point], config: TreeConfig) -> Result<Self> {
        if config.max_levels_cap < 2 {
            return Err(Error::InvalidConfig(format!(
                "max_levels_cap must be at least 2, got {}",
                config.max_levels_cap
            )));
        }
        if points.is_empty() {
            return Err(Error::EmptyInput("cannot build a tree over zero points"));
        }
        if let Some(p) = points.iter().find(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "non-finite input point ({}, {})",
                p.x, p.y
            )));
        }
        let metric = config.ground_metric;

        let diagonal_min = points
            .iter()
            .map(|p| metric.distance(*p, project_to_diagonal(*p)))
            .fold(f64::INFINITY, f64::min);
        let delta_min = closest_pair_distance(points, metric)
            .unwrap_or(f64::INFINITY)
            .min(diagonal_min);
        if delta_min.is_nan() || delta_min <= 0.0 {
            return Err(Error::InvalidConfig(
                "an input point lies on the diagonal".to_string(),
            ));
        }

        let (mut lo, mut hi) = bounding_box(points.iter().copied());
        let data_extent = (hi.x - lo.x).max(hi.y - lo.y);
        if config.cover_projections {
            let (plo, phi) = bounding_box(points.iter().map(|p| project_to_diagonal(*p)));
            lo = Point::new(lo.x.min(plo.x), lo.y.min(plo.y));
            hi = Point::new(hi.x.max(phi.x), hi.y.max(phi.y));
        }
        let extent = (hi.x - lo.x).max(hi.y - lo.y).max(delta_min);

        // Shift drawn from (0, extent] so the half-open root strictly
        // contains the upper edge of the bounding box.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let ux: f64 = rng.random();
        let uy: f64 = rng.random();
        let shift = Point::new(extent * (1.0 - ux), extent * (1.0 - uy));
        let origin = Point::new(lo.x - extent + shift.x, lo.y - extent + shift.y);
        let root_side = 2.0 * extent;

        let mut needed: u32 = 1;
        let mut side = root_side;
        while side >= delta_min / 2.0 {
            side /= 2.0;
            needed += 1;
        }
        let levels = needed.min(config.max_levels_cap);
        let truncated = needed > config.max_levels_cap;

        let mut tree = Self {
            config,
            origin,
            shift,
            root_side,
            level_lo: 0,
            level_hi: levels - 1,
            delta_min,
            spread: data_extent.max(delta_min) / delta_min,
            truncated,
            diagonal_offset: (origin.x - origin.y) / root_side,
            signature: String::new(),
        };
        tree.signature = tree.compute_signature();
        for p in points {
            tree.finest_index(*p)?;
        }
        Ok(tree)
    }

    /// One tree over the union of several diagrams.
    pub fn for_diagrams(diagrams: &[&PersistenceDiagram], config: TreeConfig) -> Result<Self> {
        let points: Vec<Point> = diagrams
            .iter()
            .flat_map(|d| d.iter().map(|p| p.point()))
            .collect();
        Self::build(&points, config)
    }

    fn compute_signature(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        h.update(self.origin.x.to_bits().to_le_bytes());
        h.update(self.origin.y.to_bits().to_le_bytes());
        h.update(self.root_side.to_bits().to_le_bytes());
        h.update(self.level_lo.to_le_bytes());
        h.update(self.level_hi.to_le_bytes());
        h.update(self.config.ground_metric.as_str().as_bytes());
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn ground_metric(&self) -> GroundMetric {
        self.config.ground_metric
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn shift(&self) -> Point {
        self.shift
    }

    pub fn root_side(&self) -> f64 {
        self.root_side
    }

    pub fn level_lo(&self) -> u32 {
        self.level_lo
    }

    pub fn level_hi(&self) -> u32 {
        self.level_hi
    }

    pub fn num_levels(&self) -> u32 {
        self.level_hi - self.level_lo + 1
    }

    pub fn delta_min(&self) -> f64 {
        self.delta_min
    }

    /// Largest bounding-box side of the input over `δ_min`.
    pub fn spread(&self) -> f64 {
        self.spread
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    /// Identifies this tree's geometry; vectors embedded on different
    /// trees carry different signatures.
    pub fn signature(&self) -> &str {
        &self.signature
    }

    pub fn root(&self) -> CellId {
        CellId {
            level: self.level_hi,
            ix: 0,
            iy: 0,
        }
    }

    /// Cell side at `level`: `root_side · 2^(level - level_hi)`.
    pub fn side(&self, level: u32) -> f64 {
        debug_assert!(level <= self.level_hi);
        self.root_side / (1u64 << (self.level_hi - level)) as f64
    }

    fn check_level(&self, level: u32) -> Result<()> {
        if level < self.level_lo || level > self.level_hi {
            return Err(Error::LevelOutOfRange {
                level,
                lo: self.level_lo,
                hi: self.level_hi,
            });
        }
        Ok(())
    }

    /// Cell indices of `p` at the finest level.
    pub(crate) fn finest_index(&self, p: Point) -> Result<(u64, u64)> {
        let side = self.side(self.level_lo);
        let n = 1u64 << (self.level_hi - self.level_lo);
        let fx = ((p.x - self.origin.x) / side).floor();
        let fy = ((p.y - self.origin.y) / side).floor();
        if !(fx >= 0.0 && fy >= 0.0 && fx < n as f64 && fy < n as f64) {
            return Err(Error::OutsideRoot { x: p.x, y: p.y });
        }
        Ok((fx as u64, fy as u64))
    }

    /// The half-open cell at `level` containing `p`.
    pub fn cell_of(&self, p: Point, level: u32) -> Result<CellId> {
        self.check_level(level)?;
        let (fx, fy) = self.finest_index(p)?;
        let k = level - self.level_lo;
        Ok(CellId {
            level,
            ix: fx >> k,
            iy: fy >> k,
        })
    }

    /// Lower-left corner of a cell.
    pub fn corner(&self, c: CellId) -> Point {
        let s = self.side(c.level);
        Point::new(
            self.origin.x + c.ix as f64 * s,
            self.origin.y + c.iy as f64 * s,
        )
    }

    /// Whether the closed square of `c` meets the line `y = x`.
    ///
    /// With corner `(x0, y0)` and side `s` this is `|x0 - y0| <= s`,
    /// evaluated in units of the cell side so that the answer is
    /// consistent between a cell and its ancestors.
    pub fn is_terminal(&self, c: CellId) -> bool {
        let scale = (1u64 << (self.level_hi - c.level)) as f64;
        let offset = self.diagonal_offset * scale;
        let rel = offset + (c.ix as f64 - c.iy as f64);
        rel.abs() <= 1.0
    }

    /// Mass of `d` in each occupied cell at `level`.
    pub fn occupied_cells(
        &self,
        d: &PersistenceDiagram,
        level: u32,
    ) -> Result<BTreeMap<CellId, u64>> {
        self.check_level(level)?;
        let mut cells = BTreeMap::new();
        for p in d.iter() {
            let c = self.cell_of(p.point(), level)?;
            *cells.entry(c).or_insert(0) += u64::from(p.multiplicity);
        }
        Ok(cells)
    }

    pub fn meta(&self) -> TreeMeta {
        TreeMeta {
            seed: self.config.seed,
            signature: self.signature.clone(),
            origin: self.origin,
            shift: self.shift,
            root_side: self.root_side,
            level_lo: self.level_lo,
            level_hi: self.level_hi,
            delta_min: self.delta_min,
            spread: self.spread,
            truncated: self.truncated,
            root_terminal: self.is_terminal(self.root()),
        }
    }
}

fn bounding_box(points: impl Iterator<Item = Point>) -> (Point, Point) {
    let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    (lo, hi)
}

/// Smallest non-zero distance between two input locations, or `None` when
/// all inputs coincide.
///
/// Plane sweep in x with an active set ordered by y. Every supported norm
/// dominates the L∞ norm, so only candidates inside the current best
/// window need to be examined.
pub(crate) fn closest_pair_distance(points: &[Point], metric: GroundMetric) -> Option<f64> {
    let mut sorted: Vec<Point> = points.to_vec();
    sorted.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    sorted.dedup();

    let mut best = f64::INFINITY;
    let mut active: BTreeSet<(OrderedFloat<f64>, usize)> = BTreeSet::new();
    let mut tail = 0;
    for (i, p) in sorted.iter().enumerate() {
        while tail < i && p.x - sorted[tail].x > best {
            active.remove(&(OrderedFloat(sorted[tail].y), tail));
            tail += 1;
        }
        let lower = (OrderedFloat(p.y - best), 0);
        let upper = (OrderedFloat(p.y + best), usize::MAX);
        for &(_, j) in active.range(lower..=upper) {
            let d = metric.distance(*p, sorted[j]);
            if d > 0.0 && d < best {
                best = d;
            }
        }
        active.insert((OrderedFloat(p.y), i));
    }
    best.is_finite().then_some(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagram::{gen_uniform, PDPoint};

    fn tree(points: &[(f64, f64)], seed: u64, metric: GroundMetric) -> ShiftedQuadtree {
        let pts: Vec<Point> = points.iter().map(|&(x, y)| Point::new(x, y)).collect();
        build_tree(&pts, TreeConfig::new(seed, metric)).unwrap()
    }

    fn brute_closest(points: &[Point], metric: GroundMetric) -> Option<f64> {
        let mut best = f64::INFINITY;
        for (i, a) in points.iter().enumerate() {
            for b in &points[i + 1..] {
                let d = metric.distance(*a, *b);
                if d > 0.0 {
                    best = best.min(d);
                }
            }
        }
        best.is_finite().then_some(best)
    }

    #[test]
    fn closest_pair_matches_brute_force() {
        for seed in 0..20 {
            let d = gen_uniform(200, seed);
            let mut pts: Vec<Point> = d.iter().map(|p| p.point()).collect();
            pts.push(pts[3]);
            for m in GroundMetric::ALL {
                assert_eq!(closest_pair_distance(&pts, m), brute_closest(&pts, m));
            }
        }
        let single = [Point::new(0.0, 1.0)];
        assert_eq!(closest_pair_distance(&single, GroundMetric::L2), None);
    }

    #[test]
    fn single_point_tree() {
        let t = tree(&[(0.0, 4.0)], 1, GroundMetric::L2);
        assert!(t.num_levels() >= 2);
        assert!((t.delta_min() - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        let root = t.cell_of(Point::new(0.0, 4.0), t.level_hi()).unwrap();
        assert_eq!(root, t.root());
        assert!(!t.truncated());
    }

    #[test]
    fn two_point_separation_rule() {
        let t = tree(&[(0.0, 4.0), (0.0, 6.0)], 9, GroundMetric::L2);
        assert_eq!(t.delta_min(), 2.0);
        assert!(t.side(t.level_lo()) < 1.0);
    }

    #[test]
    fn finest_side_strictly_below_half_separation() {
        for seed in 0..10 {
            let d = gen_uniform(100, seed);
            for m in GroundMetric::ALL {
                let t = ShiftedQuadtree::for_diagrams(&[&d], TreeConfig::new(seed, m)).unwrap();
                assert!(t.side(t.level_lo()) < t.delta_min() / 2.0);
                // one more halving upward is not below the bound
                assert!(t.side(t.level_lo() + 1) >= t.delta_min() / 2.0);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let pts = [(0.0, 4.0), (1.0, 3.0), (2.5, 9.0)];
        let a = tree(&pts, 42, GroundMetric::L2);
        let b = tree(&pts, 42, GroundMetric::L2);
        assert_eq!(a, b);
        let c = tree(&pts, 43, GroundMetric::L2);
        assert_ne!(a.signature(), c.signature());
        assert_ne!(a.shift(), c.shift());
    }

    #[test]
    fn root_contains_bounding_box_and_projections() {
        for seed in 0..50 {
            let d = gen_uniform(30, seed);
            let t = ShiftedQuadtree::for_diagrams(&[&d], TreeConfig::new(seed, GroundMetric::L2))
                .unwrap();
            for p in d.iter() {
                assert_eq!(t.cell_of(p.point(), t.level_hi()).unwrap(), t.root());
                assert_eq!(t.cell_of(p.projection(), t.level_hi()).unwrap(), t.root());
            }
            assert!(t.is_terminal(t.root()));
        }
    }

    #[test]
    fn terminal_geometry_examples() {
        // Hand-placed tree: origin (0, 0), root side 8, four levels (finest side 1).
        let mut t = tree(&[(0.0, 4.0)], 0, GroundMetric::L2);
        t.origin = Point::new(0.0, 0.0);
        t.root_side = 8.0;
        t.level_lo = 0;
        t.level_hi = 3;
        t.diagonal_offset = 0.0;
        let cell = |ix, iy| CellId { level: 0, ix, iy };
        assert_eq!(t.side(0), 1.0);
        assert!(t.is_terminal(cell(0, 0)));
        assert!(!t.is_terminal(cell(5, 0)));
        assert!(t.is_terminal(cell(1, 0)));
        assert!(t.is_terminal(cell(0, 1)));
        assert!(!t.is_terminal(cell(0, 2)));

        let c = t.cell_of(Point::new(0.5, 0.5), 0).unwrap();
        assert_eq!((c.ix, c.iy), (0, 0));
        // left/bottom boundary belongs to the cell
        let c = t.cell_of(Point::new(2.0, 3.0), 0).unwrap();
        assert_eq!((c.ix, c.iy), (2, 3));
        assert_eq!(t.corner(c), Point::new(2.0, 3.0));
        assert!(t.cell_of(Point::new(8.0, 1.0), 0).is_err());
        assert!(t.cell_of(Point::new(-0.1, 1.0), 0).is_err());
    }

    #[test]
    fn parent_is_dyadic() {
        let c = CellId {
            level: 2,
            ix: 7,
            iy: 4,
        };
        assert_eq!(
            c.parent(),
            CellId {
                level: 3,
                ix: 3,
                iy: 2
            }
        );
    }

    #[test]
    fn nesting_and_terminal_monotonicity() {
        let d = gen_uniform(60, 5);
        let t =
            ShiftedQuadtree::for_diagrams(&[&d], TreeConfig::new(77, GroundMetric::L2)).unwrap();
        for p in d.iter() {
            for level in t.level_lo()..t.level_hi() {
                let c = t.cell_of(p.point(), level).unwrap();
                let up = t.cell_of(p.point(), level + 1).unwrap();
                assert_eq!(c.parent(), up);
                if t.is_terminal(c) {
                    assert!(t.is_terminal(up));
                }
                let corner = t.corner(c);
                let s = t.side(level);
                assert!(corner.x <= p.birth && p.birth < corner.x + s);
                assert!(corner.y <= p.death && p.death < corner.y + s);
            }
        }
    }

    #[test]
    fn finest_cells_are_singletons_and_non_terminal() {
        for seed in 0..10 {
            let d = gen_uniform(200, seed);
            let t = ShiftedQuadtree::for_diagrams(&[&d], TreeConfig::new(seed, GroundMetric::L1))
                .unwrap();
            assert!(!t.truncated());
            let cells = t.occupied_cells(&d, t.level_lo()).unwrap();
            assert_eq!(cells.len(), d.len());
            assert!(cells.keys().all(|c| !t.is_terminal(*c)));
        }
    }

    #[test]
    fn occupied_cells_counts() {
        let d = PersistenceDiagram::from_points([
            PDPoint::new(0.0, 4.0, 3).unwrap(),
            PDPoint::new(1.0, 9.0, 2).unwrap(),
        ]);
        let t = ShiftedQuadtree::for_diagrams(&[&d], TreeConfig::new(3, GroundMetric::L2)).unwrap();
        let root = t.occupied_cells(&d, t.level_hi()).unwrap();
        assert_eq!(root.len(), 1);
        assert_eq!(root[&t.root()], 5);
        for level in t.level_lo()..=t.level_hi() {
            let cells = t.occupied_cells(&d, level).unwrap();
            assert_eq!(cells.values().sum::<u64>(), 5);
        }
        assert!(t.occupied_cells(&d, t.level_hi() + 1).is_err());
    }

    #[test]
    fn cap_truncates_depth() {
        let pts = [Point::new(0.0, 100.0), Point::new(1e-7, 100.0)];
        let t = build_tree(
            &pts,
            TreeConfig::new(1, GroundMetric::L2).with_max_levels(8),
        )
        .unwrap();
        assert!(t.truncated());
        assert_eq!(t.num_levels(), 8);
        let c0 = t.cell_of(pts[0], t.level_lo()).unwrap();
        let c1 = t.cell_of(pts[1], t.level_lo()).unwrap();
        assert_eq!(c0, c1);
    }

    #[test]
    fn invalid_builds() {
        assert!(build_tree(&[], TreeConfig::new(0, GroundMetric::L2)).is_err());
        let pts = [Point::new(0.0, 1.0)];
        assert!(build_tree(
            &pts,
            TreeConfig::new(0, GroundMetric::L2).with_max_levels(1)
        )
        .is_err());
        assert!(build_tree(
            &[Point::new(1.0, 1.0)],
            TreeConfig::new(0, GroundMetric::L2)
        )
        .is_err());
    }

    #[test]
    fn shift_separation_probability() {
        // Two points at the same height, horizontal gap g. At a level with
        // side s > g, a vertical grid line falls between them with
        // probability g / s because the shift is uniform modulo s.
        let a = Point::new(10.0, 60.0);
        let b = Point::new(10.75, 60.0);
        let trials = 20_000;
        let mut separated = 0usize;
        let mut side = None;
        for seed in 0..trials {
            let t = build_tree(&[a, b], TreeConfig::new(seed, GroundMetric::L2)).unwrap();
            let level = t.level_hi() - 5;
            side.get_or_insert(t.side(level));
            assert_eq!(side, Some(t.side(level)));
            let ca = t.cell_of(a, level).unwrap();
            let cb = t.cell_of(b, level).unwrap();
            if ca != cb {
                separated += 1;
            }
        }
        let p = 0.75 / side.unwrap();
        assert!(p < 1.0);
        let observed = separated as f64 / trials as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        assert!(
            (observed - p).abs() < 4.0 * sigma,
            "observed {observed}, expected {p}"
        );
    }
}
