//! Seeded procedural street scenes.
//!
//! Each scene has a road layer at `k = 0`, two or three building or
//! vegetation slabs and two to six car or person boxes. The camera sits
//! behind the `x = 0` face of the grid looking along `+x`, slightly down.
//!
//! Images are ray cast against the ground-truth voxels. Channels 0 and 1
//! carry the red and green components of the hit class colour plus noise;
//! channel 2 carries the hit depth divided by [`DEPTH_SCALE`], standing in
//! for the depth cue of a stereo pair.
//!
//! Validity follows what the image shows. An empty voxel is valid when its
//! centroid projects into the image with a clear line of sight. An occupied
//! voxel is valid when the surface seen through its centroid's pixel has
//! its label and lies at most [`SEEN_MARGIN`] voxels in front of it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabelSpace, SceneSample, VoxelGrid};
use crate::diffcore::Tensor;
use crate::error::{config_err, Result};
use crate::geometry::{project_voxels, CameraModel, Vec3, VoxelGridSpec};

/// Depth in metres that maps to 1.0 in the depth channel; farther hits and
/// sky pixels saturate at 1.0.
pub const DEPTH_SCALE: f64 = 20.0;

const HALF_FOV_TAN: f64 = 0.7;
const NOISE: f64 = 0.02;
const MAX_ATTEMPTS: usize = 200;

struct Classes {
    road: u16,
    building: u16,
    car: u16,
    person: u16,
    vegetation: u16,
}

impl Classes {
    fn from(ls: &LabelSpace) -> Result<Self> {
        let find = |name: &str| {
            ls.class_index(name)
                .map(|i| i as u16)
                .ok_or_else(|| config_err!("label space lacks the class {name:?} needed for synthetic scenes"))
        };
        Ok(Self {
            road: find("road")?,
            building: find("building")?,
            car: find("car")?,
            person: find("person")?,
            vegetation: find("vegetation")?,
        })
    }
}

/// The fixed camera used for every synthetic scene on `spec`.
pub fn synthetic_camera(spec: &VoxelGridSpec, image_size: (usize, usize)) -> Result<CameraModel> {
    let [h, _, z] = spec.dims;
    let res = spec.resolution;
    let (w_img, h_img) = (image_size.0 as f64, image_size.1 as f64);
    let f = w_img / 2.0 / HALF_FOV_TAN;
    let k = CameraModel::intrinsics(f, f, w_img / 2.0, h_img / 2.0);
    let height = 0.75 * z as f64 * res;
    let eye = [spec.origin[0] - 2.0 * res, spec.origin[1] + spec.dims[1] as f64 * res / 2.0, spec.origin[2] + height];
    let pitch = (height / (0.6 * h as f64 * res + 2.0 * res)).atan();
    CameraModel::looking_forward(k, eye, pitch, 0.0)
}

pub fn generate_synthetic(
    seed: u64,
    count: usize,
    spec: &VoxelGridSpec,
    label_space: &LabelSpace,
    image_size: (usize, usize),
) -> Result<Vec<SceneSample>> {
    if count == 0 {
        return Err(config_err!("scene count must be at least 1"));
    }
    let [h, w, z] = spec.dims;
    if h < 8 || w < 8 || z < 4 {
        return Err(config_err!("grid {:?} is too small to place scene geometry (need at least 8x8x4)", spec.dims));
    }
    if image_size.0 < 4 || image_size.1 < 4 {
        return Err(config_err!("image {image_size:?} is too small"));
    }
    let classes = Classes::from(label_space)?;
    let camera = synthetic_camera(spec, image_size)?;
    (0..count)
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            for _ in 0..MAX_ATTEMPTS {
                let Some((labels, boxes)) = build_scene(&mut rng, spec, idx, &classes) else { continue };
                let valid = visibility_mask(spec, &camera, &labels, image_size);
                if boxes.iter().all(|b| b.iter().any(|&v| valid[v])) {
                    let hits = cast_rays(spec, &camera, &labels, image_size);
                    let image = render_image(&hits, label_space, image_size, &mut rng)?;
                    let gt = VoxelGrid::new(spec.dims, labels, valid)?;
                    let foreground_mask = label_space.foreground_mask(&gt);
                    return Ok(SceneSample { images: vec![image], camera: camera.clone(), spec: spec.clone(), gt, foreground_mask });
                }
            }
            Err(config_err!("could not place visible geometry in scene {idx} of grid {:?}", spec.dims))
        })
        .collect()
}

/// Labels plus the voxel lists of every foreground box, or `None` when a
/// required box did not fit.
fn build_scene(rng: &mut ChaCha8Rng, spec: &VoxelGridSpec, idx: usize, c: &Classes) -> Option<(Vec<u16>, Vec<Vec<usize>>)> {
    let [h, w, z] = spec.dims;
    let at = |i: usize, j: usize, k: usize| (i * w + j) * z + k;
    let mut labels = vec![0u16; h * w * z];
    for i in 0..h {
        for j in 0..w {
            labels[at(i, j, 0)] = c.road;
        }
    }

    // A facade across the far end, a shorter one of the other class in
    // front of it, and sometimes a third slab anywhere.
    let (first, second) = if idx.is_multiple_of(2) { (c.building, c.vegetation) } else { (c.vegetation, c.building) };
    let slabs = rng.random_range(2..=3);
    for s in 0..slabs {
        let thick = rng.random_range(1..=2);
        let top = rng.random_range(3..z.max(4)).min(z - 1);
        let (class, ir, jr) = match s {
            0 => {
                let i0 = rng.random_range(3 * h / 4..=h - thick);
                let len = rng.random_range(w / 2..=w);
                let j0 = rng.random_range(0..=w - len);
                (first, i0..i0 + thick, j0..j0 + len)
            }
            1 => {
                let i0 = rng.random_range(h / 2..=3 * h / 4 - thick);
                let len = rng.random_range(w / 4..=w / 2);
                let j0 = rng.random_range(0..=w - len);
                (second, i0..i0 + thick, j0..j0 + len)
            }
            _ => {
                let class = if rng.random_bool(0.5) { c.building } else { c.vegetation };
                let j0 = if rng.random_bool(0.5) { 0 } else { w - thick };
                let len = rng.random_range(h / 3..=h - h / 4);
                let i0 = rng.random_range(h / 4..=h - len);
                (class, i0..i0 + len, j0..j0 + thick)
            }
        };
        for i in ir {
            for j in jr.clone() {
                for k in 1..=top {
                    labels[at(i, j, k)] = class;
                }
            }
        }
    }

    let n_boxes = rng.random_range(2..=6);
    let mut boxes = Vec::new();
    for b in 0..n_boxes {
        let class = match (b, idx % 2) {
            (0, 0) => c.car,
            (0, _) => c.person,
            _ if rng.random_bool(0.5) => c.car,
            _ => c.person,
        };
        let (sx, sy, sz) = if class == c.car {
            (rng.random_range(4..=6), rng.random_range(3..=4), rng.random_range(2..=3))
        } else {
            (2, 2, rng.random_range(3..=4))
        };
        let sz = sz.min(z - 1);
        let mut placed = None;
        for _ in 0..50 {
            if h < sx + h / 6 + 1 {
                break;
            }
            let i0 = rng.random_range(h / 6..=h - sx - 1);
            // stay inside the horizontal field of view at this depth
            let half = (((i0 + 2) as f64 * HALF_FOV_TAN) as usize).max(sy);
            let lo = (w / 2).saturating_sub(half);
            let hi = (w / 2 + half).saturating_sub(sy).min(w - sy);
            if lo > hi {
                continue;
            }
            let j0 = rng.random_range(lo..=hi);
            let cells: Vec<usize> = (i0..i0 + sx)
                .flat_map(|i| (j0..j0 + sy).flat_map(move |j| (1..=sz).map(move |k| at(i, j, k))))
                .collect();
            if cells.iter().all(|&v| labels[v] == 0) {
                placed = Some(cells);
                break;
            }
        }
        match placed {
            Some(cells) => {
                cells.iter().for_each(|&v| labels[v] = class);
                boxes.push(cells);
            }
            None if b == 0 => return None,
            None => {}
        }
    }
    Some((labels, boxes))
}

/// Marches from `from` towards `to` and reports whether an occupied voxel
/// other than `target` lies on the way.
fn blocked(spec: &VoxelGridSpec, occ: &[bool], from: &Vec3, to: &Vec3, target: usize) -> bool {
    let d = [to[0] - from[0], to[1] - from[1], to[2] - from[2]];
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let step = spec.resolution / 8.0;
    let n = (len / step) as usize;
    for s in 1..n {
        let t = s as f64 * step / len;
        let p = [from[0] + t * d[0], from[1] + t * d[1], from[2] + t * d[2]];
        if let Some((i, j, k)) = spec.locate(&p) {
            let v = spec.linear(i, j, k);
            if v != target && occ[v] {
                return true;
            }
        }
    }
    false
}

/// How far in front of an occupied voxel's centroid, in voxels, the
/// surface seen at its pixel may lie for the voxel to count as observed.
const SEEN_MARGIN: f64 = 2.0;

/// First occupied voxel label and its camera depth along every pixel's
/// centre ray, row-major.
pub fn cast_rays(spec: &VoxelGridSpec, cam: &CameraModel, labels: &[u16], image_size: (usize, usize)) -> Vec<Option<(u16, f64)>> {
    let (w, h) = image_size;
    let eye = cam.center();
    let step = spec.resolution / 8.0;
    let max_t = 1.5 * DEPTH_SCALE;
    let mut hits = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let p = cam.unproject(x as f64 + 0.5, y as f64 + 0.5, 1.0);
            let d = [p[0] - eye[0], p[1] - eye[1], p[2] - eye[2]];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let d = [d[0] / n, d[1] / n, d[2] / n];
            let mut hit = None;
            let mut t = 0.0;
            while t < max_t {
                let q = [eye[0] + t * d[0], eye[1] + t * d[1], eye[2] + t * d[2]];
                if let Some((i, j, k)) = spec.locate(&q) {
                    let v = spec.linear(i, j, k);
                    if labels[v] != 0 {
                        hit = Some((labels[v], cam.world_to_camera(&q)[2]));
                        break;
                    }
                }
                t += step;
            }
            hits.push(hit);
        }
    }
    hits
}

/// Valid flags for voxels whose centroid projects into the image and that
/// the image gives evidence for. An empty voxel needs an unobstructed line
/// of sight to its centroid. An occupied voxel needs the surface seen at
/// its centroid's pixel to carry its label and to lie at most
/// [`SEEN_MARGIN`] voxels in front of the centroid.
pub fn visibility_mask(spec: &VoxelGridSpec, cam: &CameraModel, labels: &[u16], image_size: (usize, usize)) -> Vec<bool> {
    let proj = project_voxels(spec, cam, image_size);
    let hits = cast_rays(spec, cam, labels, image_size);
    let occ: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
    let eye = cam.center();
    let (w, h) = image_size;
    (0..spec.num_voxels())
        .map(|v| {
            if !proj.valid[v] {
                return false;
            }
            let (i, j, k) = spec.unlinear(v);
            if !occ[v] {
                return !blocked(spec, &occ, &eye, &spec.centroid(i, j, k), v);
            }
            let (u, y) = proj.uv[v];
            let pix = (y as usize).min(h - 1) * w + (u as usize).min(w - 1);
            hits[pix].is_some_and(|(l, d)| l == labels[v] && proj.depth[v] - d <= SEEN_MARGIN * spec.resolution)
        })
        .collect()
}

/// Renders ray hits into a `[3, H, W]` image.
pub fn render_image<R: Rng>(
    hits: &[Option<(u16, f64)>],
    label_space: &LabelSpace,
    image_size: (usize, usize),
    rng: &mut R,
) -> Result<Tensor> {
    let (w, h) = image_size;
    if hits.len() != w * h {
        return Err(config_err!("{} ray hits for a {w}x{h} image", hits.len()));
    }
    let color = |l: u16| {
        let c = label_space.colors.get(l as usize).copied().unwrap_or([0, 0, 0]);
        [c[0] as f64 / 255.0, c[1] as f64 / 255.0]
    };
    let mut data = vec![0.0; 3 * h * w];
    for (pix, hit) in hits.iter().enumerate() {
        let (label, depth) = hit.unwrap_or((0, DEPTH_SCALE));
        let [r, g] = color(label);
        data[pix] = r + rng.random_range(-NOISE..NOISE);
        data[h * w + pix] = g + rng.random_range(-NOISE..NOISE);
        data[2 * h * w + pix] = (depth / DEPTH_SCALE).min(1.0);
    }
    Tensor::new(&[3, h, w], data)
}
