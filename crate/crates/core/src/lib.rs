//! Linear-time construction of the spatial data structures used by the fast
//! multipole method, together with a Laplace-kernel evaluator and a simulated
//! multi-node runtime that exercises them end to end.
//!
//! The pipeline is:
//!
//! 1. [`pseudosort`] groups points by their finest-level Morton box with a
//!    histogram and a prefix scan (no comparison sort).
//! 2. [`lists`] derives the near-field neighbor table, the per-level box
//!    directory and the far-field translation stencils from the compacted
//!    box arrays.
//! 3. [`fmm`] evaluates potentials with truncated solid-harmonic expansions.
//! 4. [`partition`], [`boxtype`] and [`exchange`] split the octree across
//!    simulated nodes and route multipole data between them; [`multinode`]
//!    drives the whole distributed run.

pub mod boxtype;
pub mod error;
pub mod exchange;
pub mod fmm;
pub mod generate;
pub mod io;
pub mod lists;
pub mod morton;
pub mod multinode;
pub mod partition;
pub mod pseudosort;
pub mod scan;
pub mod verify;

pub use boxtype::{classify, BoxType, ClassifyOptions, TypedBoxList};
pub use error::{FmmError, Result};
pub use exchange::{MStatus, MStore, NodeState, TrafficLedger};
pub use fmm::{direct_sum, evaluate, ChargedPoint, EvalOptions, Expansion, ExpansionKind};
pub use lists::{build_all, Depth, FmmStructures, LevelDirectory, NeighborTable, TranslationStencils};
pub use morton::{BoxCoords, MortonKey, Point3, MAX_LEVEL};
pub use multinode::{evaluate_distributed, ClusterConfig, DistributedRun};
pub use partition::{choose_partition, LoadProfile, PartitionPlan};
pub use pseudosort::{SortConfig, SortMode, SortedPointSet};
