//! Voxel grids, label spaces, file formats and the synthetic scene generator.

mod dataset;
mod kitti;
mod ply;
mod sscv;
mod synthetic;

pub use dataset::{
    read_camera, read_dataset, read_sample, read_tensor, write_camera, write_dataset, write_sample, write_tensor,
};
pub use ply::encode_ply;
pub use kitti::{read_semantickitti_voxels, ClassMap, KITTI_DIMS};
pub use sscv::{decode_sscv, encode_sscv, read_sscv, write_sscv, SSCV_VERSION};
pub use synthetic::{cast_rays, generate_synthetic, render_image, visibility_mask, DEPTH_SCALE};

use crate::diffcore::Tensor;
use crate::error::{config_err, shape_err, Error, Result};
use crate::geometry::{CameraModel, VoxelGridSpec};
pub use crate::metrics::INVALID_LABEL;

/// Labels and validity flags on an `H×W×Z` grid, `(i·W + j)·Z + k` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub labels: Vec<u16>,
    pub valid: Vec<bool>,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], labels: Vec<u16>, valid: Vec<bool>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if labels.len() != n || valid.len() != n {
            return Err(shape_err!(
                "grid {dims:?} needs {n} voxels, got {} labels and {} flags",
                labels.len(),
                valid.len()
            ));
        }
        Ok(Self { dims, labels, valid })
    }

    pub fn filled(dims: [usize; 3], label: u16) -> Self {
        let n = dims.iter().product();
        Self { dims, labels: vec![label; n], valid: vec![true; n] }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    /// Voxels that count for losses and metrics.
    pub fn is_scored(&self, v: usize) -> bool {
        self.valid[v] && self.labels[v] != INVALID_LABEL
    }

    /// Per-class histogram over scored voxels.
    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for v in 0..self.len() {
            if self.is_scored(v) && (self.labels[v] as usize) < num_classes {
                h[self.labels[v] as usize] += 1;
            }
        }
        h
    }
}

/// Class names, the foreground subset and export colours. Class 0 is empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    pub names: Vec<String>,
    pub foreground: Vec<usize>,
    pub colors: Vec<[u8; 3]>,
}

impl LabelSpace {
    pub fn new(names: Vec<String>, foreground: Vec<usize>, colors: Vec<[u8; 3]>) -> Result<Self> {
        if names.len() < 2 || names[0] != "empty" {
            return Err(config_err!("a label space needs class 0 named \"empty\" and at least one more class"));
        }
        if colors.len() != names.len() {
            return Err(config_err!("{} classes but {} colours", names.len(), colors.len()));
        }
        if foreground.iter().any(|&c| c == 0 || c >= names.len()) {
            return Err(config_err!("foreground classes must be in 1..{}", names.len()));
        }
        Ok(Self { names, foreground, colors })
    }

    /// Six classes used by the synthetic generator.
    pub fn synthetic() -> Self {
        let spec: [(&str, [u8; 3]); 6] = [
            ("empty", [135, 206, 235]),
            ("road", [128, 64, 128]),
            ("building", [200, 120, 40]),
            ("car", [40, 80, 230]),
            ("person", [230, 30, 30]),
            ("vegetation", [40, 180, 40]),
        ];
        Self {
            names: spec.iter().map(|s| s.0.to_string()).collect(),
            foreground: vec![3, 4],
            colors: spec.iter().map(|s| s.1).collect(),
        }
    }

    /// The 20-class SemanticKITTI space with movable objects as foreground.
    pub fn semantickitti() -> Self {
        let spec: [(&str, [u8; 3]); 20] = [
            ("empty", [0, 0, 0]),
            ("car", [100, 150, 245]),
            ("bicycle", [100, 230, 245]),
            ("motorcycle", [30, 60, 150]),
            ("truck", [80, 30, 180]),
            ("other-vehicle", [0, 0, 255]),
            ("person", [255, 30, 30]),
            ("bicyclist", [255, 40, 200]),
            ("motorcyclist", [150, 30, 90]),
            ("road", [255, 0, 255]),
            ("parking", [255, 150, 255]),
            ("sidewalk", [75, 0, 75]),
            ("other-ground", [175, 0, 75]),
            ("building", [255, 200, 0]),
            ("fence", [255, 120, 50]),
            ("vegetation", [0, 175, 0]),
            ("trunk", [135, 60, 0]),
            ("terrain", [150, 240, 80]),
            ("pole", [255, 240, 150]),
            ("traffic-sign", [255, 0, 0]),
        ];
        Self {
            names: spec.iter().map(|s| s.0.to_string()).collect(),
            foreground: (1..=8).collect(),
            colors: spec.iter().map(|s| s.1).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_foreground(&self, label: u16) -> bool {
        self.foreground.contains(&(label as usize))
    }

    pub fn foreground_mask(&self, grid: &VoxelGrid) -> Vec<bool> {
        grid.labels.iter().map(|&l| self.is_foreground(l)).collect()
    }

    /// One line per class: `index name r g b fg|bg`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, (name, c)) in self.names.iter().zip(&self.colors).enumerate() {
            let fg = if self.foreground.contains(&i) { "fg" } else { "bg" };
            s.push_str(&format!("{i} {name} {} {} {} {fg}\n", c[0], c[1], c[2]));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut colors = Vec::new();
        let mut foreground = Vec::new();
        for (n, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Format(format!("label space line {}: {line:?}", n + 1));
            if f.len() != 6 || f[0].parse::<usize>().ok() != Some(n) {
                return Err(bad());
            }
            let rgb: Vec<u8> = f[2..5].iter().map(|x| x.parse().map_err(|_| bad())).collect::<Result<_>>()?;
            names.push(f[1].to_string());
            colors.push([rgb[0], rgb[1], rgb[2]]);
            match f[5] {
                "fg" => foreground.push(n),
                "bg" => {}
                _ => return Err(bad()),
            }
        }
        Self::new(names, foreground, colors).map_err(|e| Error::Format(e.to_string()))
    }
}

/// One training or evaluation unit.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[3, H, W]` images, one per frame.
    pub images: Vec<Tensor>,
    pub camera: CameraModel,
    pub spec: VoxelGridSpec,
    pub gt: VoxelGrid,
    pub foreground_mask: Vec<bool>,
}

impl SceneSample {
    pub fn image(&self) -> &Tensor {
        &self.images[0]
    }

    pub fn image_size(&self) -> (usize, usize) {
        let s = self.images[0].shape();
        (s[2], s[1])
    }
}
