//! Sparse L1 embedding of a diagram on a shifted quadtree.
//!
//! Each occupied cell that does not touch the diagonal contributes one
//! coordinate, `side(level) · mass-in-cell`. Dropping terminal cells turns
//! the tree's modified-L1 distance into a plain L1 distance between these
//! vectors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagram::PersistenceDiagram;
use crate::error::{Error, Result};
use crate::quadtree::{CellId, ShiftedQuadtree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    tree_signature: String,
    entries: Vec<(CellId, f64)>,
    total_mass: u64,
}

impl EmbeddingVector {
    pub fn tree_signature(&self) -> &str {
        &self.tree_signature
    }

    /// Non-zero coordinates sorted by `(level, ix, iy)`.
    pub fn entries(&self) -> &[(CellId, f64)] {
        &self.entries
    }

    pub fn total_mass(&self) -> u64 {
        self.total_mass
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Text export: a header line carrying the tree signature, then one
    /// `level ix iy value` line per entry in sorted order.
    pub fn to_text(&self) -> String {
        let mut out = format!("# tree {} mass {}\n", self.tree_signature, self.total_mass);
        for (c, v) in &self.entries {
            let _ = writeln!(out, "{} {} {} {}", c.level, c.ix, c.iy, v);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing header".to_string(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (tree_signature, total_mass) = match fields.as_slice() {
            ["#", "tree", sig, "mass", mass] => (
                sig.to_string(),
                mass.parse::<u64>().map_err(|_| Error::Parse {
                    line: 1,
                    message: format!("bad mass `{mass}`"),
                })?,
            ),
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("bad header `{header}`"),
                })
            }
        };
        let mut entries = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Parse {
                line: idx + 1,
                message: format!("expected `level ix iy value`, got `{line}`"),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let cell = CellId {
                level: f[0].parse().map_err(|_| bad())?,
                ix: f[1].parse().map_err(|_| bad())?,
                iy: f[2].parse().map_err(|_| bad())?,
            };
            let value: f64 = f[3].parse().map_err(|_| bad())?;
            entries.push((cell, value));
        }
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Parse {
                line: 2,
                message: "entries are not strictly sorted".to_string(),
            });
        }
        Ok(Self {
            tree_signature,
            entries,
            total_mass,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Embeds `d` on `tree` in `O(|d| log |d| + |d| · levels)`.
///
/// Points are sorted once at the finest level. Each coarser level's sorted
/// cell list is merged from the one below. Terminal cells are dropped as
/// soon as they appear, since their ancestors are terminal too.
pub fn embed(tree: &ShiftedQuadtree, d: &PersistenceDiagram) -> Result<EmbeddingVector> {
    let mut cur: Vec<(u64, u64, u64)> = d
        .iter()
        .map(|p| {
            let (fx, fy) = tree.finest_index(p.point())?;
            Ok((fx, fy, u64::from(p.multiplicity)))
        })
        .collect::<Result<_>>()?;
    cur.sort_unstable_by_key(|&(x, y, _)| (x, y));
    cur.dedup_by(|b, a| {
        let same = (a.0, a.1) == (b.0, b.1);
        if same {
            a.2 += b.2;
        }
        same
    });

    let mut entries: Vec<(CellId, f64)> = Vec::new();
    let mut next = Vec::with_capacity(cur.len());
    for level in tree.level_lo()..=tree.level_hi() {
        let side = tree.side(level);
        cur.retain(|&(ix, iy, count)| {
            let cell = CellId { level, ix, iy };
            let keep = !tree.is_terminal(cell);
            if keep {
                entries.push((cell, side * count as f64));
            }
            keep
        });
        if cur.is_empty() {
            break;
        }
        parents(&cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(EmbeddingVector {
        tree_signature: tree.signature().to_string(),
        entries,
        total_mass: d.total_count(),
    })
}

/// Parent cells of a list sorted by `(ix, iy)`, again sorted, counts summed.
/// Children of one parent column come from the two adjacent runs `ix = 2a`
/// and `ix = 2a + 1`, each already sorted by `iy`, so one merge suffices.
fn parents(cells: &[(u64, u64, u64)], out: &mut Vec<(u64, u64, u64)>) {
    out.clear();
    let mut push = |x: u64, y: u64, c: u64| match out.last_mut() {
        Some(last) if (last.0, last.1) == (x, y) => last.2 += c,
        _ => out.push((x, y, c)),
    };
    let mut i = 0;
    while i < cells.len() {
        let px = cells[i].0 >> 1;
        let even_end = i + cells[i..].iter().take_while(|c| c.0 == cells[i].0).count();
        let end = even_end
            + cells[even_end..]
                .iter()
                .take_while(|c| c.0 >> 1 == px)
                .count();
        let (mut a, mut b) = (i, even_end);
        while a < even_end || b < end {
            let take_a = b == end || (a < even_end && cells[a].1 >> 1 <= cells[b].1 >> 1);
            let c = if take_a {
                a += 1;
                cells[a - 1]
            } else {
                b += 1;
                cells[b - 1]
            };
            push(px, c.1 >> 1, c.2);
        }
        i = end;
    }
}

/// L1 distance between two vectors embedded on the same tree, by sorted merge.
pub fn l1_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.tree_signature != b.tree_signature {
        return Err(Error::SignatureMismatch {
            left: a.tree_signature.clone(),
            right: b.tree_signature.clone(),
        });
    }
    let (mut i, mut j) = (0, 0);
    let (ea, eb) = (&a.entries, &b.entries);
    let mut total = 0.0;
    while i < ea.len() && j < eb.len() {
        match ea[i].0.cmp(&eb[j].0) {
            std::cmp::Ordering::Less => {
                total += ea[i].1.abs();
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                total += eb[j].1.abs();
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                total += (ea[i].1 - eb[j].1).abs();
                i += 1;
                j += 1;
            }
        }
    }
    total += ea[i..].iter().map(|e| e.1.abs()).sum::<f64>();
    total += eb[j..].iter().map(|e| e.1.abs()).sum::<f64>();
    Ok(total)
}

/// Modified-L1 tree distance between two diagrams on a shared tree.
pub fn embedding_distance(
    tree: &ShiftedQuadtree,
    p: &PersistenceDiagram,
    q: &PersistenceDiagram,
) -> Result<f64> {
    l1_distance(&embed(tree, p)?, &embed(tree, q)?)
}
