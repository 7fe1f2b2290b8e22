//! SemanticKITTI voxel files: `<frame>.label` holds one little-endian u16
//! raw label per voxel and `<frame>.invalid` one bit per voxel, packed
//! most significant bit first. Both use the 256×256×32 grid in the same
//! `(i·W + j)·Z + k` order as [`VoxelGrid`].

use std::collections::BTreeMap;
use std::path::Path;

use super::sscv::unpack_bits;
use super::{VoxelGrid, INVALID_LABEL};
use crate::error::{Error, Result};

pub const KITTI_DIMS: [usize; 3] = [256, 256, 32];

/// Raw label → class index. Targets of [`INVALID_LABEL`] mark ignored voxels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    map: BTreeMap<u16, u16>,
}

impl ClassMap {
    pub fn identity(num_classes: u16) -> Self {
        Self { map: (0..num_classes).map(|c| (c, c)).collect() }
    }

    /// The benchmark's standard raw-to-20-class table.
    pub fn semantickitti() -> Self {
        const TABLE: [(u16, u16); 34] = [
            (0, 0),
            (1, 0),
            (10, 1),
            (11, 2),
            (13, 5),
            (15, 3),
            (16, 5),
            (18, 4),
            (20, 5),
            (30, 6),
            (31, 7),
            (32, 8),
            (40, 9),
            (44, 10),
            (48, 11),
            (49, 12),
            (50, 13),
            (51, 14),
            (52, 0),
            (60, 9),
            (70, 15),
            (71, 16),
            (72, 17),
            (80, 18),
            (81, 19),
            (99, 0),
            (252, 1),
            (253, 7),
            (254, 6),
            (255, 8),
            (256, 5),
            (257, 5),
            (258, 4),
            (259, 5),
        ];
        Self { map: TABLE.into_iter().collect() }
    }

    /// `raw = class` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parsed = line
                .split_once('=')
                .and_then(|(a, b)| Some((a.trim().parse::<u16>().ok()?, b.trim().parse::<u16>().ok()?)));
            let (from, to) = parsed.ok_or_else(|| Error::Format(format!("class map line {}: {raw:?}", n + 1)))?;
            if map.insert(from, to).is_some() {
                return Err(Error::Format(format!("class map maps raw label {from} twice")));
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, raw: u16) -> Option<u16> {
        self.map.get(&raw).copied()
    }

    /// Largest target class index (ignoring the invalid sentinel).
    pub fn max_class(&self) -> Option<u16> {
        self.map.values().copied().filter(|&c| c != INVALID_LABEL).max()
    }
}

pub fn read_semantickitti_voxels(dir: &Path, frame: &str, map: &ClassMap) -> Result<VoxelGrid> {
    let n: usize = KITTI_DIMS.iter().product();
    let label_path = dir.join(format!("{frame}.label"));
    let invalid_path = dir.join(format!("{frame}.invalid"));
    let label_bytes = std::fs::read(&label_path).map_err(|e| Error::io(&label_path, e))?;
    if label_bytes.len() != 2 * n {
        return Err(Error::Length { what: format!("{}", label_path.display()), expected: 2 * n, actual: label_bytes.len() });
    }
    let invalid_bytes = std::fs::read(&invalid_path).map_err(|e| Error::io(&invalid_path, e))?;
    if invalid_bytes.len() != n / 8 {
        return Err(Error::Length {
            what: format!("{}", invalid_path.display()),
            expected: n / 8,
            actual: invalid_bytes.len(),
        });
    }
    let mut labels = Vec::with_capacity(n);
    for (v, c) in label_bytes.chunks_exact(2).enumerate() {
        let raw = u16::from_le_bytes([c[0], c[1]]);
        let mapped = map
            .get(raw)
            .ok_or_else(|| Error::Data(format!("raw label {raw} at voxel {v} is not in the class map")))?;
        labels.push(mapped);
    }
    let valid = unpack_bits(&invalid_bytes, n).into_iter().map(|inv| !inv).collect();
    Ok(VoxelGrid { dims: KITTI_DIMS, labels, valid })
}
