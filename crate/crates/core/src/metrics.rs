//! Scene-completion IoU and semantic mIoU from an integer confusion matrix.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};

/// Label value marking a voxel without ground truth.
pub const INVALID_LABEL: u16 = 255;

/// Rows are ground truth, columns prediction. Class 0 is empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    valid_total: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes], valid_total: 0 }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn valid_total(&self) -> u64 {
        self.valid_total
    }

    /// Tallies every voxel with `valid[i]` set and a ground-truth label
    /// other than [`INVALID_LABEL`].
    pub fn accumulate(&mut self, pred: &[u16], gt: &[u16], valid: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || gt.len() != valid.len() {
            return Err(shape_err!(
                "prediction ({}), labels ({}) and mask ({}) differ in size",
                pred.len(),
                gt.len(),
                valid.len()
            ));
        }
        let n = self.num_classes;
        for (i, ((&p, &g), &ok)) in pred.iter().zip(gt).zip(valid).enumerate() {
            if !ok || g == INVALID_LABEL {
                continue;
            }
            if g as usize >= n {
                return Err(Error::Data(format!("ground-truth label {g} at voxel {i} exceeds {n} classes")));
            }
            if p as usize >= n {
                return Err(Error::Data(format!("predicted label {p} at voxel {i} exceeds {n} classes")));
            }
            self.counts[g as usize * n + p as usize] += 1;
            self.valid_total += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(shape_err!("cannot merge {} and {} class matrices", self.num_classes, other.num_classes));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.valid_total += other.valid_total;
        Ok(())
    }

    /// Class-agnostic IoU of "not empty"; 0 when nothing is occupied in
    /// either prediction or ground truth.
    pub fn scene_iou(&self) -> f64 {
        let n = self.num_classes;
        let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
        for g in 0..n {
            for p in 0..n {
                let c = self.count(g, p);
                match (g != 0, p != 0) {
                    (true, true) => tp += c,
                    (false, true) => fp += c,
                    (true, false) => fnn += c,
                    _ => {}
                }
            }
        }
        ratio(tp, tp + fp + fnn)
    }

    /// IoU of each non-empty class (`None` when absent from both sides) and
    /// the mean over present classes (0 when none are present).
    pub fn semantic_miou(&self) -> (Vec<Option<f64>>, f64) {
        let n = self.num_classes;
        let per_class: Vec<Option<f64>> = (1..n)
            .map(|c| {
                let row: u64 = (0..n).map(|p| self.count(c, p)).sum();
                let col: u64 = (0..n).map(|g| self.count(g, c)).sum();
                let tp = self.count(c, c);
                let union = row + col - tp;
                (union > 0).then(|| ratio(tp, union))
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        (per_class, miou)
    }

    /// Two-line CSV: `scene_iou,miou,<class names 1..N>` and the values.
    /// Absent classes leave an empty field.
    pub fn report_csv(&self, class_names: &[String]) -> String {
        let (per_class, miou) = self.semantic_miou();
        let mut out = String::from("scene_iou,miou");
        for name in class_names.iter().skip(1).take(per_class.len()) {
            out.push(',');
            out.push_str(name);
        }
        let _ = write!(out, "\n{:.6},{:.6}", self.scene_iou(), miou);
        for v in &per_class {
            out.push(',');
            if let Some(v) = v {
                let _ = write!(out, "{v:.6}");
            }
        }
        out.push('\n');
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
