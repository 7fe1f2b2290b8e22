//! Dataset directories.
//!
//! ```text
//! <root>/labels.txt                label space, one class per line
//! <root>/sample_0000/gt.sscv       ground truth
//! <root>/sample_0000/camera.txt    K, R, t rows
//! <root>/sample_0000/grid.txt      dims, origin, resolution
//! <root>/sample_0000/image_0.sst   [3, H, W] image tensor
//! ```
//!
//! Tensor files (`.sst`) are `"SSCT"`, u16 version, u32 rank, rank × u32
//! extents, then little-endian f64 values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{read_sscv, write_sscv, LabelSpace, SceneSample};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Mat3, Vec3, VoxelGridSpec};

const TENSOR_MAGIC: &[u8; 4] = b"SSCT";
const TENSOR_VERSION: u16 = 1;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let short = |expected: usize| Error::Length { what: "tensor file".into(), expected, actual: bytes.len() };
    if bytes.len() < 10 {
        return Err(short(10));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    if u16::from_le_bytes([bytes[4], bytes[5]]) != TENSOR_VERSION {
        return Err(Error::Format("unsupported tensor version".into()));
    }
    let rank = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("tensor rank {rank} out of range")));
    }
    let head = 10 + 4 * rank;
    if bytes.len() < head {
        return Err(short(head));
    }
    let shape: Vec<usize> = bytes[10..head]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(8))
        .and_then(|b| b.checked_add(head))
        .ok_or_else(|| Error::Format("tensor too large".into()))?;
    if bytes.len() != n {
        return Err(short(n));
    }
    let data = bytes[head..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor(t: &Tensor, path: &Path) -> Result<()> {
    write_file(path, &encode_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn fmt_row(s: &mut String, tag: &str, row: &[f64]) {
    let _ = write!(s, "{tag}");
    for x in row {
        let _ = write!(s, " {x:?}");
    }
    s.push('\n');
}

fn parse_rows(text: &str, what: &str) -> Result<Vec<(String, Vec<f64>)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace();
            let tag = it.next().unwrap_or_default().to_string();
            let vals = it
                .map(|x| x.parse::<f64>().map_err(|_| Error::Format(format!("{what}: bad number {x:?}"))))
                .collect::<Result<Vec<_>>>()?;
            Ok((tag, vals))
        })
        .collect()
}

/// `K`, `R` (three rows each) and `t`, one row per line.
pub fn write_camera(cam: &CameraModel, path: &Path) -> Result<()> {
    let mut s = String::new();
    for row in cam.k() {
        fmt_row(&mut s, "K", row);
    }
    for row in cam.r() {
        fmt_row(&mut s, "R", row);
    }
    fmt_row(&mut s, "t", cam.t());
    write_file(path, s.as_bytes())
}

pub fn read_camera(path: &Path) -> Result<CameraModel> {
    let rows = parse_rows(&read_text(path)?, "camera file")?;
    let pick = |tag: &str| -> Vec<Vec<f64>> { rows.iter().filter(|r| r.0 == tag).map(|r| r.1.clone()).collect() };
    let mat = |tag: &str| -> Result<Mat3> {
        let r = pick(tag);
        if r.len() != 3 || r.iter().any(|x| x.len() != 3) {
            return Err(Error::Format(format!("camera file needs three {tag} rows of three values")));
        }
        Ok([[r[0][0], r[0][1], r[0][2]], [r[1][0], r[1][1], r[1][2]], [r[2][0], r[2][1], r[2][2]]])
    };
    let t = pick("t");
    if t.len() != 1 || t[0].len() != 3 {
        return Err(Error::Format("camera file needs one t row of three values".into()));
    }
    CameraModel::new(mat("K")?, mat("R")?, [t[0][0], t[0][1], t[0][2]]).map_err(|e| Error::Format(e.to_string()))
}

fn write_grid_spec(spec: &VoxelGridSpec, path: &Path) -> Result<()> {
    let mut s = String::new();
    let dims: Vec<f64> = spec.dims.iter().map(|&d| d as f64).collect();
    fmt_row(&mut s, "dims", &dims);
    fmt_row(&mut s, "origin", &spec.origin);
    fmt_row(&mut s, "resolution", &[spec.resolution]);
    write_file(path, s.as_bytes())
}

fn read_grid_spec(path: &Path) -> Result<VoxelGridSpec> {
    let rows = parse_rows(&read_text(path)?, "grid file")?;
    let get = |tag: &str, n: usize| -> Result<Vec<f64>> {
        rows.iter()
            .find(|r| r.0 == tag && r.1.len() == n)
            .map(|r| r.1.clone())
            .ok_or_else(|| Error::Format(format!("grid file needs {tag} with {n} values")))
    };
    let d = get("dims", 3)?;
    if d.iter().any(|&x| x < 1.0 || x.fract() != 0.0 || x > u32::MAX as f64) {
        return Err(Error::Format(format!("grid dims {d:?} are not positive integers")));
    }
    let o = get("origin", 3)?;
    let origin: Vec3 = [o[0], o[1], o[2]];
    VoxelGridSpec::new([d[0] as usize, d[1] as usize, d[2] as usize], origin, get("resolution", 1)?[0])
        .map_err(|e| Error::Format(e.to_string()))
}

fn sample_dir(root: &Path, idx: usize) -> PathBuf {
    root.join(format!("sample_{idx:04}"))
}

pub fn write_sample(sample: &SceneSample, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_sscv(&sample.gt, &dir.join("gt.sscv"))?;
    write_camera(&sample.camera, &dir.join("camera.txt"))?;
    write_grid_spec(&sample.spec, &dir.join("grid.txt"))?;
    for (i, img) in sample.images.iter().enumerate() {
        write_tensor(img, &dir.join(format!("image_{i}.sst")))?;
    }
    Ok(())
}

pub fn read_sample(dir: &Path, label_space: &LabelSpace) -> Result<SceneSample> {
    let gt = read_sscv(&dir.join("gt.sscv"))?;
    let camera = read_camera(&dir.join("camera.txt"))?;
    let spec = read_grid_spec(&dir.join("grid.txt"))?;
    if spec.dims != gt.dims {
        return Err(Error::Data(format!("{}: grid file {:?} disagrees with labels {:?}", dir.display(), spec.dims, gt.dims)));
    }
    let n = label_space.num_classes();
    if let Some(v) = (0..gt.len()).find(|&v| gt.is_scored(v) && gt.labels[v] as usize >= n) {
        return Err(Error::Data(format!("{}: label {} at voxel {v} outside {n} classes", dir.display(), gt.labels[v])));
    }
    let mut images = Vec::new();
    while let Ok(true) = dir.join(format!("image_{}.sst", images.len())).try_exists() {
        let img = read_tensor(&dir.join(format!("image_{}.sst", images.len())))?;
        if img.rank() != 3 || img.shape()[0] != 3 {
            return Err(Error::Data(format!("{}: image must be [3, H, W], got {:?}", dir.display(), img.shape())));
        }
        images.push(img);
    }
    if images.is_empty() {
        return Err(Error::Data(format!("{}: no image_0.sst", dir.display())));
    }
    let foreground_mask = label_space.foreground_mask(&gt);
    Ok(SceneSample { images, camera, spec, gt, foreground_mask })
}

pub fn write_dataset(samples: &[SceneSample], label_space: &LabelSpace, root: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_file(&root.join("labels.txt"), label_space.to_text().as_bytes())?;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let d = sample_dir(root, i);
            write_sample(s, &d)?;
            Ok(d)
        })
        .collect()
}

/// Reads every `sample_NNNN` directory in index order.
pub fn read_dataset(root: &Path) -> Result<(LabelSpace, Vec<SceneSample>)> {
    let labels_path = root.join("labels.txt");
    let label_space = LabelSpace::parse(&read_text(&labels_path)?)?;
    let mut samples = Vec::new();
    while sample_dir(root, samples.len()).is_dir() {
        samples.push(read_sample(&sample_dir(root, samples.len()), &label_space)?);
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{} holds no sample_0000 directory", root.display())));
    }
    Ok((label_space, samples))
}
