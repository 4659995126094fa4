//! Fast approximations of the 1-Wasserstein distance between persistence
//! diagrams, built on randomly shifted quadtrees.
//!
//! * [`embedding`] maps a diagram to a sparse vector whose L1 distances
//!   give the tree-based estimate `d_T`.
//! * [`flowtree`] computes a greedy augmented matching on the same tree and
//!   reports its true ground-metric cost `d_F`, an upper bound on the exact
//!   distance that is usually much tighter than `d_T`.
//! * [`exact`] solves the assignment formulation exactly and is the
//!   reference for the evaluation harness in [`eval`].
//!
//! ```
//! use pdflow::diagram::{GroundMetric, PersistenceDiagram};
//! use pdflow::quadtree::{ShiftedQuadtree, TreeConfig};
//! use pdflow::{exact, flowtree};
//!
//! let p = PersistenceDiagram::from_pairs(&[(0.0, 4.0), (1.0, 9.0)]).unwrap();
//! let q = PersistenceDiagram::from_pairs(&[(0.5, 4.5)]).unwrap();
//! let tree = ShiftedQuadtree::for_diagrams(&[&p, &q], TreeConfig::new(7, GroundMetric::L2)).unwrap();
//! let approx = flowtree::flowtree_distance(&tree, &p, &q, GroundMetric::L2).unwrap();
//! let truth = exact::exact_distance(&p, &q, GroundMetric::L2).unwrap();
//! assert!(truth <= approx + 1e-9);
//! ```

pub mod diagram;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod exact;
pub mod flowtree;
pub mod quadtree;

pub use diagram::{
    load_diagram, load_dir, save_diagram, GroundMetric, PDPoint, PersistenceDiagram, Point,
};
pub use error::{Error, Result};
pub use quadtree::{CellId, ShiftedQuadtree, TreeConfig};
