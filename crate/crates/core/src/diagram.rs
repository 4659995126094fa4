//! Persistence diagrams: points above the diagonal with multiplicities.
//!
//! A [`PersistenceDiagram`] is kept in canonical form: points sorted by
//! `(birth, death)` with duplicates merged into a multiplicity. All
//! downstream algorithms consume multiplicities directly and never expand
//! them (except the exact oracle, which needs one row per unit of mass).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Inner norm used for pair costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundMetric {
    L1,
    L2,
    LInf,
}

impl GroundMetric {
    pub const ALL: [GroundMetric; 3] = [GroundMetric::L1, GroundMetric::L2, GroundMetric::LInf];

    pub fn distance(self, a: Point, b: Point) -> f64 {
        let dx = (a.x - b.x).abs();
        let dy = (a.y - b.y).abs();
        match self {
            GroundMetric::L1 => dx + dy,
            GroundMetric::L2 => dx.hypot(dy),
            GroundMetric::LInf => dx.max(dy),
        }
    }

    /// Norm of the vector `(-h, h)`; the distance from a point to its
    /// diagonal projection when `h` is half its lifetime.
    fn diagonal_norm(self, lifetime: f64) -> f64 {
        match self {
            GroundMetric::L1 => lifetime,
            GroundMetric::L2 => lifetime / std::f64::consts::SQRT_2,
            GroundMetric::LInf => lifetime / 2.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GroundMetric::L1 => "l1",
            GroundMetric::L2 => "l2",
            GroundMetric::LInf => "linf",
        }
    }
}

impl fmt::Display for GroundMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroundMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" | "1" => Ok(GroundMetric::L1),
            "l2" | "2" => Ok(GroundMetric::L2),
            "linf" | "inf" | "l_inf" => Ok(GroundMetric::LInf),
            other => Err(Error::InvalidConfig(format!(
                "unknown ground metric `{other}`"
            ))),
        }
    }
}

/// A persistence point `(birth, death)` with multiplicity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PDPoint {
    pub birth: f64,
    pub death: f64,
    pub multiplicity: u32,
}

impl PDPoint {
    pub fn new(birth: f64, death: f64, multiplicity: u32) -> Result<Self> {
        let invalid = |reason| Error::InvalidPoint {
            birth,
            death,
            reason,
        };
        if !birth.is_finite() || !death.is_finite() {
            return Err(invalid("coordinates must be finite"));
        }
        if death <= birth {
            return Err(invalid("death must exceed birth"));
        }
        if multiplicity == 0 {
            return Err(invalid("multiplicity must be positive"));
        }
        // -0.0 and 0.0 must land in the same canonical slot.
        Ok(Self {
            birth: birth + 0.0,
            death: death + 0.0,
            multiplicity,
        })
    }

    pub fn point(&self) -> Point {
        Point::new(self.birth, self.death)
    }

    pub fn lifetime(&self) -> f64 {
        self.death - self.birth
    }

    /// Nearest point on the diagonal.
    pub fn projection(&self) -> Point {
        project_to_diagonal(self.point())
    }

    pub fn diagonal_distance(&self, metric: GroundMetric) -> f64 {
        metric.diagonal_norm(self.lifetime())
    }

    fn key_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.birth
            .total_cmp(&other.birth)
            .then(self.death.total_cmp(&other.death))
    }
}

/// Orthogonal projection of `p` onto the line `y = x`.
pub fn project_to_diagonal(p: Point) -> Point {
    let m = (p.x + p.y) / 2.0;
    Point::new(m, m)
}

/// Cost of matching a persistence point to its own diagonal projection.
pub fn diagonal_distance(p: &PDPoint, metric: GroundMetric) -> f64 {
    p.diagonal_distance(metric)
}

/// A finite multiset of persistence points in canonical order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PersistenceDiagram {
    points: Vec<PDPoint>,
    total_count: u64,
}

impl PersistenceDiagram {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Sorts and merges duplicate `(birth, death)` entries.
    pub fn from_points(points: impl IntoIterator<Item = PDPoint>) -> Self {
        let mut points: Vec<PDPoint> = points.into_iter().collect();
        points.sort_by(PDPoint::key_cmp);
        let mut merged: Vec<PDPoint> = Vec::with_capacity(points.len());
        for p in points {
            match merged.last_mut() {
                Some(last) if last.key_cmp(&p).is_eq() => last.multiplicity += p.multiplicity,
                _ => merged.push(p),
            }
        }
        let total_count = merged.iter().map(|p| u64::from(p.multiplicity)).sum();
        Self {
            points: merged,
            total_count,
        }
    }

    /// Builds a diagram from `(birth, death)` pairs, each with multiplicity one.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        let points = pairs
            .iter()
            .map(|&(b, d)| PDPoint::new(b, d, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_points(points))
    }

    pub fn points(&self) -> &[PDPoint] {
        &self.points
    }

    pub fn iter(&self) -> impl Iterator<Item = &PDPoint> {
        self.points.iter()
    }

    /// Number of distinct locations.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sum of multiplicities.
    pub fn total_count(&self) -> u64 {
        self.total_count
    }

    /// Every unit of mass as its own point, in canonical order.
    pub fn expanded(&self) -> impl Iterator<Item = Point> + '_ {
        self.points
            .iter()
            .flat_map(|p| std::iter::repeat_n(p.point(), p.multiplicity as usize))
    }

    /// Parses the text format `birth death [multiplicity]`, one point per
    /// line, with `#` starting a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected `birth death [multiplicity]`, got `{content}`"),
                });
            }
            let parse_f = |s: &str| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("`{s}` is not a number"),
                })
            };
            let birth = parse_f(fields[0])?;
            let death = parse_f(fields[1])?;
            let multiplicity = match fields.get(2) {
                Some(s) => match s.parse::<u32>() {
                    Ok(m) if m > 0 => m,
                    _ => {
                        return Err(Error::Parse {
                            line,
                            message: format!("`{s}` is not a positive integer multiplicity"),
                        })
                    }
                },
                None => 1,
            };
            if !birth.is_finite() || !death.is_finite() {
                return Err(Error::NonFinite { line });
            }
            if death <= birth {
                return Err(Error::NonPositiveLifetime { line });
            }
            points.push(PDPoint::new(birth, death, multiplicity)?);
        }
        Ok(Self::from_points(points))
    }

    /// Renders the diagram in the text format. Floats use the shortest
    /// representation that round-trips exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            if p.multiplicity == 1 {
                out.push_str(&format!("{} {}\n", p.birth, p.death));
            } else {
                out.push_str(&format!("{} {} {}\n", p.birth, p.death, p.multiplicity));
            }
        }
        out
    }
}

pub fn load_diagram(path: impl AsRef<Path>) -> Result<PersistenceDiagram> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PersistenceDiagram::parse(&text).map_err(|e| Error::InFile {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

/// Loads every `*.txt` file in `dir`, ordered by file name.
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, PersistenceDiagram)>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| load_diagram(&p).map(|d| (p, d)))
        .collect()
}

pub fn save_diagram(diagram: &PersistenceDiagram, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(diagram.to_text().as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Lifetimes below this are resampled by [`gen_gaussian`].
pub const MIN_GAUSSIAN_LIFETIME: f64 = 1e-9;

/// `max_size` points with birth uniform on `[0, 200]` and death uniform on
/// `(birth, 300]`.
pub fn gen_uniform(max_size: usize, seed: u64) -> PersistenceDiagram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..max_size).map(|_| loop {
        let birth: f64 = rng.random_range(0.0..=200.0);
        let death: f64 = rng.random_range(birth..=300.0);
        if death > birth {
            break PDPoint {
                birth,
                death,
                multiplicity: 1,
            };
        }
    });
    PersistenceDiagram::from_points(points.collect::<Vec<_>>())
}

/// `max_size` near-diagonal points: birth uniform on `[0, 200]`, lifetime
/// the absolute value of a standard normal draw.
pub fn gen_gaussian(max_size: usize, seed: u64) -> PersistenceDiagram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..max_size).map(|_| {
        let birth: f64 = rng.random_range(0.0..=200.0);
        loop {
            let g: f64 = rng.sample(StandardNormal);
            let lifetime = g.abs();
            let death = birth + lifetime;
            if lifetime >= MIN_GAUSSIAN_LIFETIME && death > birth {
                break PDPoint {
                    birth,
                    death,
                    multiplicity: 1,
                };
            }
        }
    });
    PersistenceDiagram::from_points(points.collect::<Vec<_>>())
}
