//! Exact 1-Wasserstein distance between persistence diagrams.
//!
//! P is augmented with one diagonal slot per unit of Q and vice versa,
//! giving a square assignment problem in which diagonal slots match each
//! other for free. A dense `O(n³)` Hungarian solver gives the optimum.
//! A brute-force enumerator over augmented matchings covers tiny inputs
//! and serves as an independent check on the solver.

use crate::diagram::{project_to_diagonal, GroundMetric, PersistenceDiagram, Point};
use crate::error::{Error, Result};

pub const DEFAULT_SIZE_CAP: usize = 4000;
pub const BRUTE_FORCE_BOUND: usize = 8;

/// Square cost matrix, row-major.
///
/// Rows are the units of P followed by `|Q|` diagonal slots; columns are
/// the units of Q followed by `|P|` diagonal slots.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentProblem {
    pub size: usize,
    pub cost: Vec<f64>,
}

impl AssignmentProblem {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.cost[row * self.size + col]
    }

    /// Minimum-cost perfect matching value.
    pub fn solve(&self) -> f64 {
        let assignment = hungarian(self.size, &self.cost);
        assignment
            .iter()
            .enumerate()
            .map(|(r, &c)| self.at(r, c))
            .sum()
    }
}

fn check_cap(p: &PersistenceDiagram, q: &PersistenceDiagram, cap: usize) -> Result<usize> {
    let size = (p.total_count() + q.total_count()) as usize;
    if size > cap {
        return Err(Error::SizeCap { size, cap });
    }
    Ok(size)
}

pub fn build_assignment(
    p: &PersistenceDiagram,
    q: &PersistenceDiagram,
    metric: GroundMetric,
    cap: usize,
) -> Result<AssignmentProblem> {
    let size = check_cap(p, q, cap)?;
    let ps: Vec<_> = p
        .iter()
        .flat_map(|x| std::iter::repeat_n(*x, x.multiplicity as usize))
        .collect();
    let qs: Vec<_> = q
        .iter()
        .flat_map(|x| std::iter::repeat_n(*x, x.multiplicity as usize))
        .collect();
    let mut cost = vec![0.0; size * size];
    for (r, a) in ps.iter().enumerate() {
        let row = &mut cost[r * size..(r + 1) * size];
        for (c, b) in qs.iter().enumerate() {
            row[c] = metric.distance(a.point(), b.point());
        }
        let diag = a.diagonal_distance(metric);
        row[qs.len()..].fill(diag);
    }
    for r in ps.len()..size {
        let row = &mut cost[r * size..(r + 1) * size];
        for (c, b) in qs.iter().enumerate() {
            row[c] = b.diagonal_distance(metric);
        }
    }
    Ok(AssignmentProblem { size, cost })
}

pub fn exact_distance_capped(
    p: &PersistenceDiagram,
    q: &PersistenceDiagram,
    metric: GroundMetric,
    cap: usize,
) -> Result<f64> {
    Ok(build_assignment(p, q, metric, cap)?.solve())
}

/// Exact distance with the default size cap.
pub fn exact_distance(
    p: &PersistenceDiagram,
    q: &PersistenceDiagram,
    metric: GroundMetric,
) -> Result<f64> {
    exact_distance_capped(p, q, metric, DEFAULT_SIZE_CAP)
}

/// Minimum over every augmented matching, by exhaustive search. Limited to
/// [`BRUTE_FORCE_BOUND`] expanded points.
pub fn brute_force_distance(
    p: &PersistenceDiagram,
    q: &PersistenceDiagram,
    metric: GroundMetric,
) -> Result<f64> {
    let size = (p.total_count() + q.total_count()) as usize;
    if size > BRUTE_FORCE_BOUND {
        return Err(Error::BruteForceBound {
            size,
            bound: BRUTE_FORCE_BOUND,
        });
    }
    let ps: Vec<Point> = p.expanded().collect();
    let qs: Vec<Point> = q.expanded().collect();
    let mut used = vec![false; qs.len()];
    Ok(enumerate(&ps, &qs, 0, &mut used, metric))
}

fn enumerate(ps: &[Point], qs: &[Point], i: usize, used: &mut [bool], metric: GroundMetric) -> f64 {
    let diag = |x: Point| metric.distance(x, project_to_diagonal(x));
    if i == ps.len() {
        return qs
            .iter()
            .zip(used.iter())
            .filter(|(_, &u)| !u)
            .map(|(x, _)| diag(*x))
            .sum();
    }
    let mut best = diag(ps[i]) + enumerate(ps, qs, i + 1, used, metric);
    for j in 0..qs.len() {
        if !used[j] {
            used[j] = true;
            let c = metric.distance(ps[i], qs[j]) + enumerate(ps, qs, i + 1, used, metric);
            used[j] = false;
            best = best.min(c);
        }
    }
    best
}

/// Optimal transport between the uniform measures on `P ∪ π(Q)` and
/// `Q ∪ π(P)` under the plain ground metric, so projections do not move
/// along the diagonal for free. Never exceeds twice the exact distance.
pub fn ot_augmented(
    p: &PersistenceDiagram,
    q: &PersistenceDiagram,
    metric: GroundMetric,
    cap: usize,
) -> Result<f64> {
    let size = check_cap(p, q, cap)?;
    let ps: Vec<Point> = p.expanded().collect();
    let qs: Vec<Point> = q.expanded().collect();
    let rows: Vec<Point> = ps
        .iter()
        .copied()
        .chain(qs.iter().map(|x| project_to_diagonal(*x)))
        .collect();
    let cols: Vec<Point> = qs
        .iter()
        .copied()
        .chain(ps.iter().map(|x| project_to_diagonal(*x)))
        .collect();
    let cost: Vec<f64> = rows
        .iter()
        .flat_map(|a| cols.iter().map(move |b| metric.distance(*a, *b)))
        .collect();
    Ok(AssignmentProblem { size, cost }.solve())
}

/// Shortest-augmenting-path Hungarian method with row/column potentials.
/// Returns the column assigned to each row.
fn hungarian(n: usize, cost: &[f64]) -> Vec<usize> {
    debug_assert_eq!(cost.len(), n * n);
    if n == 0 {
        return Vec::new();
    }
    // 1-based with column 0 as the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![f64::INFINITY; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = row[j - 1] - ui0 - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    assignment
}
