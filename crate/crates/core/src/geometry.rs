//! Pinhole camera, voxel grid layout and the voxel → pixel view transform.
//!
//! World axes are x forward, y left, z up. A camera maps a world point `p`
//! to camera coordinates `(h_c, w_c, z_c) = R·p + t`, with `z_c` the optical
//! depth, and to pixels through `z_c·(u, v, 1) = K·(h_c, w_c, z_c)`.
//!
//! Voxels are addressed by `(i, j, k)` along (x, y, z) and stored with `k`
//! fastest: `linear = (i·W + j)·Z + k`.

use crate::diffcore::{Graph, Var};
use crate::error::{config_err, shape_err, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

const ORTHO_TOL: f64 = 1e-9;

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rotation about a unit axis by `angle` radians (Rodrigues).
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Pinhole intrinsics `K` and world-to-camera extrinsics `(R, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    k: Mat3,
    r: Mat3,
    t: Vec3,
}

impl CameraModel {
    pub fn new(k: Mat3, r: Mat3, t: Vec3) -> Result<Self> {
        let upper = k[1][0] == 0.0 && k[2][0] == 0.0 && k[2][1] == 0.0;
        if !upper || k[2][2] != 1.0 || !(k[0][0] > 0.0) || !(k[1][1] > 0.0) {
            return Err(config_err!("intrinsics must be upper triangular with K[2][2] = 1 and positive focal lengths"));
        }
        let rrt = mat_mul(&r, &transpose(&r));
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                if (rrt[i][j] - e).abs() > ORTHO_TOL {
                    return Err(config_err!("rotation is not orthonormal (R·Rᵀ[{i}][{j}] = {})", rrt[i][j]));
                }
            }
        }
        if (det(&r) - 1.0).abs() > ORTHO_TOL {
            return Err(config_err!("rotation determinant {} is not 1", det(&r)));
        }
        if t.iter().any(|x| !x.is_finite()) {
            return Err(config_err!("translation must be finite"));
        }
        Ok(Self { k, r, t })
    }

    /// Simple intrinsics with zero skew.
    pub fn intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> Mat3 {
        [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]
    }

    /// Camera at world position `center` with forward pitch `pitch` (radians,
    /// positive looks down) and yaw `yaw` (positive turns left).
    pub fn looking_forward(k: Mat3, center: Vec3, pitch: f64, yaw: f64) -> Result<Self> {
        // camera axes in world frame at zero pitch/yaw: right = -y, down = -z, forward = +x
        let base: Mat3 = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
        let yaw_m = axis_angle([0.0, 0.0, 1.0], yaw);
        let pitch_m = axis_angle([0.0, 1.0, 0.0], pitch);
        // world-from-camera-body rotation; R is its transpose composed with base
        let body = mat_mul(&yaw_m, &pitch_m);
        let r = mat_mul(&base, &transpose(&body));
        let rc = mat_vec(&r, &center);
        Self::new(k, r, [-rc[0], -rc[1], -rc[2]])
    }

    pub fn k(&self) -> &Mat3 {
        &self.k
    }

    pub fn r(&self) -> &Mat3 {
        &self.r
    }

    pub fn t(&self) -> &Vec3 {
        &self.t
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        let rp = mat_vec(&self.r, p);
        [rp[0] + self.t[0], rp[1] + self.t[1], rp[2] + self.t[2]]
    }

    /// Pixel coordinates and depth of a world point.
    pub fn project(&self, p: &Vec3) -> (f64, f64, f64) {
        let c = self.world_to_camera(p);
        let kc = mat_vec(&self.k, &c);
        (kc[0] / c[2], kc[1] / c[2], c[2])
    }

    /// World point on the ray through pixel `(u, v)` at optical depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let k = &self.k;
        // invert the upper-triangular K
        let y = (v - k[1][2]) / k[1][1];
        let x = (u - k[0][2] - k[0][1] * y) / k[0][0];
        let c = [x * depth - self.t[0], y * depth - self.t[1], depth - self.t[2]];
        mat_vec(&transpose(&self.r), &c)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        let c = mat_vec(&transpose(&self.r), &self.t);
        [-c[0], -c[1], -c[2]]
    }

    /// Same physical camera after moving the whole scene by `p ↦ Q·p + s`.
    pub fn transformed(&self, q: &Mat3, s: &Vec3) -> Result<Self> {
        let r = mat_mul(&self.r, &transpose(q));
        let rs = mat_vec(&r, s);
        Self::new(self.k, r, [self.t[0] - rs[0], self.t[1] - rs[1], self.t[2] - rs[2]])
    }
}

/// Regular voxel grid placement.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGridSpec {
    pub dims: [usize; 3],
    pub origin: Vec3,
    pub resolution: f64,
}

impl VoxelGridSpec {
    pub fn new(dims: [usize; 3], origin: Vec3, resolution: f64) -> Result<Self> {
        if dims.contains(&0) {
            return Err(config_err!("grid extents must be positive, got {dims:?}"));
        }
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(config_err!("grid resolution must be positive, got {resolution}"));
        }
        Ok(Self { dims, origin, resolution })
    }

    /// Grid with the scene range of a forward-facing sensor: x from 0, y
    /// centred on 0, z from 0.
    pub fn forward_facing(dims: [usize; 3], resolution: f64) -> Result<Self> {
        Self::new(dims, [0.0, -(dims[1] as f64) * resolution / 2.0, 0.0], resolution)
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn unlinear(&self, idx: usize) -> (usize, usize, usize) {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        let i = idx / (self.dims[1] * self.dims[2]);
        (i, j, k)
    }

    pub fn centroid(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [
            self.origin[0] + self.resolution * (i as f64 + 0.5),
            self.origin[1] + self.resolution * (j as f64 + 0.5),
            self.origin[2] + self.resolution * (k as f64 + 0.5),
        ]
    }

    /// Voxel containing a world point, if inside the grid.
    pub fn locate(&self, p: &Vec3) -> Option<(usize, usize, usize)> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = (p[a] - self.origin[a]) / self.resolution;
            if !(f >= 0.0) || f >= self.dims[a] as f64 {
                return None;
            }
            idx[a] = f as usize;
        }
        Some((idx[0], idx[1], idx[2]))
    }
}

/// Per-voxel projection of grid centroids into one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub uv: Vec<(f64, f64)>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    pub image_size: (usize, usize),
}

impl Projection {
    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

pub fn project_voxels(spec: &VoxelGridSpec, cam: &CameraModel, image_size: (usize, usize)) -> Projection {
    let n = spec.num_voxels();
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let mut uv = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for idx in 0..n {
        let (i, j, k) = spec.unlinear(idx);
        let (u, v, d) = cam.project(&spec.centroid(i, j, k));
        uv.push((u, v));
        depth.push(d);
        valid.push(d > 0.0 && (0.0..w).contains(&u) && (0.0..h).contains(&v));
    }
    Projection { uv, depth, valid, image_size }
}

/// Continuous feature-lattice coordinates of a pixel position for a map
/// downsampled by `downsample`; lattice node `j` sits at pixel centre
/// `(j + 0.5)·downsample`.
pub fn pixel_to_lattice(u: f64, v: f64, downsample: f64) -> (f64, f64) {
    (u / downsample - 0.5, v / downsample - 0.5)
}

/// Bilinearly samples a `[C, H_f, W_f]` feature map at every valid voxel's
/// projection. Returns a voxel-major `[N_voxels, C]` matrix; invalid voxels
/// get zero rows.
pub fn sample_image_features(g: &mut Graph, features: Var, proj: &Projection, downsample: f64) -> Result<Var> {
    let (c, hf, wf) = match *g.shape(features) {
        [c, h, w] => (c, h, w),
        ref s => return Err(shape_err!("feature map must be [C,H,W], got {s:?}")),
    };
    let chw = g.reshape(features, &[c, hf * wf])?;
    let lattice = g.transpose(chw)?;
    sample_lattice(g, lattice, (hf, wf), proj, downsample)
}

/// As [`sample_image_features`] for a pixel-major `[H_f·W_f, C]` lattice.
pub fn sample_lattice(
    g: &mut Graph,
    lattice: Var,
    lattice_hw: (usize, usize),
    proj: &Projection,
    downsample: f64,
) -> Result<Var> {
    if !(downsample > 0.0) {
        return Err(config_err!("downsample factor must be positive, got {downsample}"));
    }
    let points: Vec<Option<(f64, f64)>> = proj
        .uv
        .iter()
        .zip(&proj.valid)
        .map(|(&(u, v), &ok)| ok.then(|| pixel_to_lattice(u, v, downsample)))
        .collect();
    g.bilinear_sample(lattice, lattice_hw.0, lattice_hw.1, &points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_cam() -> CameraModel {
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        CameraModel::new(CameraModel::intrinsics(100.0, 100.0, 64.0, 32.0), id, [0.0; 3]).unwrap()
    }

    #[test]
    fn principal_ray_and_offset_point() {
        let cam = simple_cam();
        assert_eq!(cam.project(&[0.0, 0.0, 5.0]), (64.0, 32.0, 5.0));
        let (u, v, _) = cam.project(&[1.0, 0.0, 5.0]);
        assert_eq!((u, v), (84.0, 32.0));
    }

    #[test]
    fn behind_camera_is_invalid() {
        // one-voxel grid centred at (0, 0, -1)
        let spec = VoxelGridSpec::new([1, 1, 1], [-0.5, -0.5, -1.5], 1.0).unwrap();
        let p = project_voxels(&spec, &simple_cam(), (128, 64));
        assert!(!p.valid[0]);
        let spec = VoxelGridSpec::new([1, 1, 1], [-0.5, -0.5, 4.5], 1.0).unwrap();
        let p = project_voxels(&spec, &simple_cam(), (128, 64));
        assert!(p.valid[0]);
        assert_eq!(p.uv[0], (64.0, 32.0));
        assert_eq!(p.depth[0], 5.0);
    }

    #[test]
    fn rejects_bad_cameras_and_grids() {
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let k = CameraModel::intrinsics(100.0, 100.0, 0.0, 0.0);
        let refl = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(CameraModel::new(k, refl, [0.0; 3]).is_err());
        let bad_k = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraModel::new(bad_k, id, [0.0; 3]).is_err());
        assert!(VoxelGridSpec::new([1, 1, 1], [0.0; 3], 0.0).is_err());
        assert!(VoxelGridSpec::new([0, 1, 1], [0.0; 3], 1.0).is_err());
    }

    #[test]
    fn looking_forward_sees_ahead() {
        let k = CameraModel::intrinsics(50.0, 50.0, 32.0, 16.0);
        let cam = CameraModel::looking_forward(k, [0.0, 0.0, 1.0], 0.0, 0.0).unwrap();
        let (u, v, d) = cam.project(&[5.0, 0.0, 1.0]);
        assert!((u - 32.0).abs() < 1e-12 && (v - 16.0).abs() < 1e-12 && (d - 5.0).abs() < 1e-12);
        // left of the camera maps to smaller u, above maps to smaller v
        assert!(cam.project(&[5.0, 1.0, 1.0]).0 < 32.0);
        assert!(cam.project(&[5.0, 0.0, 2.0]).1 < 16.0);
        let c = cam.center();
        assert!((c[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_constant_and_lattice_points() {
        // one voxel at the camera centre, one straight ahead
        let spec = VoxelGridSpec::new([1, 1, 2], [-0.5, -0.5, -0.5], 1.0).unwrap();
        let cam = simple_cam();
        let proj = project_voxels(&spec, &cam, (128, 64));
        assert_eq!(proj.valid, vec![false, true]);
        let mut g = Graph::new();
        let f = g.constant_vec(&[2, 16, 32], vec![1.0; 1024]).unwrap();
        let s = sample_image_features(&mut g, f, &proj, 4.0).unwrap();
        assert_eq!(g.value(s), &[0.0, 0.0, 1.0, 1.0]);
        assert!(sample_image_features(&mut g, f, &proj, 0.0).is_err());
    }

    #[test]
    fn sampling_at_pixel_centre_and_midpoint() {
        let mut g = Graph::new();
        let lat = g.constant_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let proj = Projection {
            uv: vec![(0.5, 0.5), (1.5, 0.5), (1.0, 0.5)],
            depth: vec![1.0; 3],
            valid: vec![true; 3],
            image_size: (2, 1),
        };
        let s = sample_image_features(&mut g, lat, &proj, 1.0).unwrap();
        assert_eq!(g.value(s), &[0.0, 1.0, 0.5]);
    }
}
