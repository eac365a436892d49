//! Point cloud to dense feature map in one call.

use crate::descriptor::{Descriptor, DescriptorKind};
use crate::error::Result;
use crate::grid::{build_cell_batch, scatter_to_grid, CellBatch, FeatureMap, GridSpec};
use crate::pointcloud::PointCloud;

#[derive(Debug, Clone)]
pub struct Featurized {
    pub batch: CellBatch,
    /// `K × channels` cell features, in batch order.
    pub features: Vec<f64>,
    pub channels: usize,
    pub map: FeatureMap,
}

/// Grids `cloud`, runs `descriptor` on every occupied cell and scatters the
/// features into a dense map. An empty cloud gives an all-zero map.
pub fn featurize(
    cloud: &PointCloud,
    spec: &GridSpec,
    descriptor: &Descriptor,
    kind: DescriptorKind,
) -> Result<Featurized> {
    let batch = build_cell_batch(cloud, spec)?;
    let channels = descriptor.output_channels(batch.slots.channels());
    let features = descriptor.forward(&batch.slots, kind)?;
    let map = scatter_to_grid(&features, channels, &batch.coords, spec)?;
    Ok(Featurized {
        batch,
        features,
        channels,
        map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridMode;

    #[test]
    fn features_land_at_their_cells() {
        let pts = vec![0.1, 0.1, 0.0, 0.5, 0.2, 0.15, 0.1, 0.7, 1.3, 0.9, -0.2, 0.1];
        let cloud = PointCloud::kitti(pts, "mem").unwrap();
        let spec = GridSpec {
            mode: GridMode::Pillar,
            range_min: [0.0, 0.0, -1.0],
            range_max: [2.0, 2.0, 1.0],
            cell_size: [0.5, 0.5, 2.0],
            capacity: 4,
            max_cells: 10,
            overflow: crate::grid::OverflowPolicy::KeepFirst,
            decorate: true,
        };
        let d = Descriptor::default_for(9, 8, 4, 1).unwrap();
        let f = featurize(&cloud, &spec, &d, DescriptorKind::Weighted).unwrap();
        assert_eq!(f.batch.len(), 2);
        for (k, &c) in f.batch.coords.iter().enumerate() {
            assert_eq!(f.map.gather(c).unwrap(), &f.features[k * 8..(k + 1) * 8]);
        }
        let empty = featurize(&PointCloud::empty_kitti(), &spec, &d, DescriptorKind::Max).unwrap();
        assert!(empty.batch.is_empty() && empty.map.data().iter().all(|&v| v == 0.0));
    }
}
