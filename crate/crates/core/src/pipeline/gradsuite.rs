//! Finite-difference check of every loss term on a small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{total_loss, Model, ModelConfig};
use crate::dataio::{generate_synthetic, LabelSpace, SceneSample};
use crate::diffcore::{grad_check_scaled, Decisions, GradCheckReport, Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::geometry::VoxelGridSpec;

/// Loss terms checked by [`run_gradient_suite`], in report order.
pub const GRAD_ROWS: [&str; 7] = ["ce", "bce_of", "bce_fb", "orth", "decouple", "critical", "total"];

/// Pass threshold on the maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-5;

const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub loss: &'static str,
    pub report: GradCheckReport,
    /// Name of the parameter holding the worst entry.
    pub worst_param: Option<String>,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRAD_TOLERANCE
    }
}

/// `base` shrunk to an 8×8×4 grid and a 32×16 image with a few channels
/// per layer. Seed, loss weights and switches carry over.
pub fn gradcheck_config(base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        grid: [8, 8, 4],
        image_w: 32,
        image_h: 16,
        c2d: 4,
        c3d: 4,
        d_exp: base.d_exp.min(2),
        n_query: 6,
        k_critical: 8,
        k_nn: 2,
        refine_hidden: 4,
        ..base.clone()
    }
}

/// The failing row, or `Ok` with every row. `analytic_scale` other than 1
/// corrupts the analytic gradient (a negative control).
///
/// The refinement output layer is set to small random values first so
/// that gradients reach the whole refinement branch. Discrete choices are
/// recorded at the base point and replayed for every probe.
pub fn run_gradient_suite(base: &ModelConfig, analytic_scale: f64) -> std::result::Result<Vec<GradRow>, (&'static str, crate::Error)> {
    let cfg = gradcheck_config(base);
    let setup = || -> Result<(Model, SceneSample)> {
        let spec = VoxelGridSpec::forward_facing(cfg.grid, cfg.resolution)?;
        let ls = LabelSpace::synthetic();
        let sample = generate_synthetic(cfg.seed, 1, &spec, &ls, (cfg.image_w, cfg.image_h))?.remove(0);
        let mut model = Model::new(cfg.clone(), ls.num_classes())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
        for id in [model.refine.w2, model.refine.b2] {
            for x in model.store.get_mut(id).tensor_mut().data_mut() {
                *x = rng.random_range(-0.3..0.3);
            }
        }
        Ok((model, sample))
    };
    let (model, sample) = setup().map_err(|e| ("setup", e))?;
    let mut recorded = Decisions::new();
    model.forward(&mut Graph::new(), &sample, &mut recorded).map_err(|e| ("setup", e))?;
    recorded.replay();

    let params: Vec<ParamId> = model.store.ids().collect();
    let mut rows = Vec::new();
    for (r, &name) in GRAD_ROWS.iter().enumerate() {
        let f = |g: &mut Graph, store: &ParamStore| -> Result<Var> {
            let mut dec = recorded.clone();
            let fwd = model.forward_with(g, store, &sample, &mut dec)?;
            let t = total_loss(g, &fwd, &sample.gt, &sample.foreground_mask, &model.cfg)?;
            Ok([t.ce, t.bce_of, t.bce_fb, t.orth, t.decouple, t.critical, t.total][r])
        };
        let mut store = model.store.clone();
        let report = grad_check_scaled(f, &mut store, &params, EPS, analytic_scale).map_err(|e| (name, e))?;
        let worst_param = report.worst.map(|(p, _)| model.store.get(p).name().to_string());
        rows.push(GradRow { loss: name, report, worst_param });
    }
    Ok(rows)
}
