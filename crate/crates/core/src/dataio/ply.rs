//! ASCII PLY point lists: one coloured vertex per occupied voxel centre.

use std::fmt::Write as _;

use super::{LabelSpace, VoxelGrid};
use crate::error::{shape_err, Result};
use crate::geometry::VoxelGridSpec;

/// Every voxel with a label other than 0 (empty) or the invalid sentinel
/// becomes one `x y z r g b` line after the header, in voxel order.
pub fn encode_ply(grid: &VoxelGrid, spec: &VoxelGridSpec, label_space: &LabelSpace) -> Result<String> {
    if grid.dims != spec.dims {
        return Err(shape_err!("grid {:?} does not match spec {:?}", grid.dims, spec.dims));
    }
    let occupied: Vec<usize> =
        (0..grid.len()).filter(|&v| grid.labels[v] != 0 && grid.labels[v] != super::INVALID_LABEL).collect();
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", occupied.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for v in occupied {
        let (i, j, k) = spec.unlinear(v);
        let c = spec.centroid(i, j, k);
        let rgb = label_space.colors.get(grid.labels[v] as usize).copied().unwrap_or([255, 255, 255]);
        let _ = writeln!(s, "{:.4} {:.4} {:.4} {} {} {}", c[0], c[1], c[2], rgb[0], rgb[1], rgb[2]);
    }
    Ok(s)
}
