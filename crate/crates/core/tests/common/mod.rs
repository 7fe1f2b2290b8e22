//! Brute-force oracles shared by the integration tests. None of these call
//! into the library code they check.

#![allow(dead_code)]

use std::collections::BTreeSet;

/// Top-k by a full sort: score descending, lower index first on ties.
pub fn top_k_by_sort(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Largest entry of each row of a row-major `[n, classes]` matrix.
pub fn row_max(logits: &[f64], classes: usize) -> Vec<f64> {
    logits.chunks(classes).map(|r| r.iter().cloned().fold(f64::MIN, f64::max)).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `KL(p‖q) + KL(q‖p)` by direct summation.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln() + b * (b / a).ln()).sum()
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as u64;
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let index: f64 = table.iter().map(|&c| choose2(c)).sum();
    let rows: f64 = (0..ka).map(|i| choose2((0..kb).map(|j| table[i * kb + j]).sum())).sum();
    let cols: f64 = (0..kb).map(|j| choose2((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let expected = rows * cols / choose2(n);
    let max = (rows + cols) / 2.0;
    if max == expected {
        1.0
    } else {
        (index - expected) / (max - expected)
    }
}

fn set_iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> Option<f64> {
    let union = a.union(b).count();
    (union > 0).then(|| a.intersection(b).count() as f64 / union as f64)
}

/// Scene IoU from index sets of occupied valid voxels; 0 when both are empty.
pub fn scene_iou_by_sets(pred: &[u16], gt: &[u16], valid: &[bool]) -> f64 {
    let occ = |l: &[u16]| -> BTreeSet<usize> { (0..l.len()).filter(|&v| valid[v] && l[v] != 0).collect() };
    set_iou(&occ(pred), &occ(gt)).unwrap_or(0.0)
}

/// Per-class IoU for classes `1..classes` from index sets, with the
/// mean over classes present on either side.
pub fn miou_by_sets(pred: &[u16], gt: &[u16], valid: &[bool], classes: usize) -> (Vec<Option<f64>>, f64) {
    let per: Vec<Option<f64>> = (1..classes as u16)
        .map(|c| {
            let of = |l: &[u16]| -> BTreeSet<usize> { (0..l.len()).filter(|&v| valid[v] && l[v] == c).collect() };
            set_iou(&of(pred), &of(gt))
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (per, mean)
}

/// Writes a SemanticKITTI-style frame with its own packing code: little
/// endian u16 labels and MSB-first invalid bits.
pub fn write_kitti_frame(dir: &std::path::Path, frame: &str, raw: &[u16], invalid: &[bool]) {
    let mut label_bytes = Vec::with_capacity(raw.len() * 2);
    for &r in raw {
        label_bytes.push((r & 0xff) as u8);
        label_bytes.push((r >> 8) as u8);
    }
    let mut bits = vec![0u8; invalid.len().div_ceil(8)];
    for (i, &b) in invalid.iter().enumerate() {
        if b {
            bits[i / 8] |= 1 << (7 - i % 8);
        }
    }
    std::fs::write(dir.join(format!("{frame}.label")), label_bytes).unwrap();
    std::fs::write(dir.join(format!("{frame}.invalid")), bits).unwrap();
}
