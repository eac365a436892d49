//! Grid feature extraction for point clouds.
//!
//! Points are partitioned into pillars or voxels ([`grid`]), embedded by a
//! small per-point MLP and pooled per cell ([`descriptor`]). Besides max and
//! mean pooling, the crate implements a learnable pooling that sorts every
//! embedded channel independently and takes a weighted sum of the sorted
//! rows, which reduces to max pooling for the weight vector `[0, …, 0, 1]`.

pub mod autograd;
pub mod cells;
pub mod descriptor;
pub mod error;
pub mod grid;
pub mod network;
pub mod par;
pub mod pipeline;
pub mod pointcloud;
mod simd;
pub mod suites;
pub mod toy;

pub use cells::CellSlots;
pub use descriptor::{
    aggregate_max, aggregate_mean, aggregate_weighted, sort_project, Activation, AggregationWeights,
    DenseLayer, Descriptor, DescriptorKind, ForwardCache, Mlp, SortedFeatureMatrix,
};
pub use error::{Error, Result};
pub use grid::{assign_cells, build_cell_batch, scatter_to_grid, CellBatch, FeatureMap, GridMode, GridSpec};
pub use par::Execution;
pub use pointcloud::{generate_synthetic, load_kitti_bin, write_kitti_bin, PointCloud, SyntheticCloudSpec};
