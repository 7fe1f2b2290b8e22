use super::{Forward, ModelConfig};
use crate::dataio::VoxelGrid;
use crate::diffcore::{ops, Graph, Var};
use crate::error::{domain_err, shape_err, Result};

/// Scalar value of every loss term for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub ce: f64,
    pub bce_of: f64,
    pub bce_fb: f64,
    /// Already scaled by `λ`.
    pub orth: f64,
    pub decouple: f64,
    pub critical: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "total,ce,bce_of,bce_fb,orth,decouple,critical";

    pub fn csv_row(&self) -> String {
        let v = [self.total, self.ce, self.bce_of, self.bce_fb, self.orth, self.decouple, self.critical];
        v.iter().map(|x| format!("{x:.9}")).collect::<Vec<_>>().join(",")
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.ce, self.bce_of, self.bce_fb, self.orth, self.decouple, self.critical]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Graph nodes of every loss term; `total` is the one to differentiate.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub bce_of: Var,
    pub bce_fb: Var,
    pub orth: Var,
    pub decouple: Var,
    pub critical: Var,
}

impl LossTerms {
    pub fn report(&self, g: &Graph) -> LossReport {
        LossReport {
            total: g.scalar(self.total),
            ce: g.scalar(self.ce),
            bce_of: g.scalar(self.bce_of),
            bce_fb: g.scalar(self.bce_fb),
            orth: g.scalar(self.orth),
            decouple: g.scalar(self.decouple),
            critical: g.scalar(self.critical),
        }
    }
}

/// Supervision plus auxiliary terms.
///
/// `ce` averages over scored voxels, `bce_of` supervises occupancy on the
/// same voxels and `bce_fb` supervises the foreground mask on scored,
/// occupied voxels (zero when there are none).
pub fn total_loss(g: &mut Graph, fwd: &Forward, gt: &VoxelGrid, foreground: &[bool], cfg: &ModelConfig) -> Result<LossTerms> {
    let n = gt.len();
    if foreground.len() != n || g.value(fwd.maps.m_of).len() != n {
        return Err(shape_err!("ground truth has {n} voxels, model output {}", g.value(fwd.maps.m_of).len()));
    }
    let scored: Vec<usize> = (0..n).filter(|&v| gt.is_scored(v)).collect();
    if scored.is_empty() {
        return Err(domain_err!("ground truth has no valid voxels"));
    }
    let classes = fwd.refined.num_classes;
    if let Some(&v) = scored.iter().find(|&&v| gt.labels[v] as usize >= classes) {
        return Err(domain_err!("label {} at voxel {v} outside {classes} classes", gt.labels[v]));
    }
    let labels: Vec<usize> = scored.iter().map(|&v| gt.labels[v] as usize).collect();
    let ce = ops::cross_entropy_rows(g, fwd.refined.logits, &scored, &labels)?;

    let occupied: Vec<bool> = labels.iter().map(|&c| c != 0).collect();
    let bce_of = ops::bce_with_logits(g, fwd.maps.m_of, &scored, &occupied)?;

    let occ_rows: Vec<usize> = scored.iter().copied().filter(|&v| gt.labels[v] != 0).collect();
    let bce_fb = if occ_rows.is_empty() {
        g.constant_vec(&[1], vec![0.0])?
    } else {
        let fg: Vec<bool> = occ_rows.iter().map(|&v| foreground[v]).collect();
        ops::bce_with_logits(g, fwd.maps.m_fb, &occ_rows, &fg)?
    };

    let mut total = g.add(ce, bce_of)?;
    total = g.add(total, bce_fb)?;
    total = g.add(total, fwd.orth)?;
    let dec = g.scale(fwd.decouple, cfg.w_decouple);
    total = g.add(total, dec)?;
    let crit = g.scale(fwd.critical, cfg.w_critical);
    total = g.add(total, crit)?;
    Ok(LossTerms { total, ce, bce_of, bce_fb, orth: fwd.orth, decouple: fwd.decouple, critical: fwd.critical })
}
