use log::{debug, info};

use super::{total_loss, LossReport, Model};
use crate::dataio::SceneSample;
use crate::diffcore::{Decisions, Graph, ParamId, ParamStore};
use crate::error::{config_err, Error, Result};
use crate::metrics::ConfusionMatrix;

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor().len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from `grads[id]`; parameters listed in `frozen` or with no
    /// gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], frozen: &[ParamId]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(gr) = grads[i].as_deref() else { continue };
            if frozen.contains(&id) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).tensor_mut().data_mut();
            for e in 0..p.len() {
                m[e] = self.beta1 * m[e] + (1.0 - self.beta1) * gr[e];
                v[e] = self.beta2 * v[e] + (1.0 - self.beta2) * gr[e] * gr[e];
                let step = (m[e] / c1) / ((v[e] / c2).sqrt() + self.eps);
                p[e] -= self.lr * (step + self.weight_decay * p[e]);
            }
        }
    }
}

/// Mean losses of one epoch and, when evaluated, training-set metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossReport,
    pub scene_iou: Option<f64>,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    /// Whether each parameter ever received a nonzero gradient entry.
    pub touched: Vec<bool>,
    /// True when the metric targets were met before the budget ran out.
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn untouched_params<'a>(&self, store: &'a ParamStore) -> Vec<&'a str> {
        store.iter().filter(|(id, _)| !self.touched[id.index()]).map(|(_, p)| p.name()).collect()
    }
}

/// One forward/backward pass. Returns the loss report and per-parameter
/// gradients indexed by [`ParamId::index`].
pub fn train_step(model: &Model, sample: &SceneSample) -> Result<(LossReport, Vec<Option<Vec<f64>>>)> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, sample, &mut Decisions::passive())?;
    let terms = total_loss(&mut g, &fwd, &sample.gt, &sample.foreground_mask, &model.cfg)?;
    let report = terms.report(&g);
    let grads = g.backward(terms.total)?;
    let per_param = model.store.ids().map(|id| grads.wrt_param(id).map(<[f64]>::to_vec)).collect();
    Ok((report, per_param))
}

/// Trains on `data` one sample per step in dataset order.
///
/// Stops after `cfg.epochs` epochs or `cfg.max_steps` steps (when nonzero).
/// With `cfg.eval_every > 0` the training set is scored every that many
/// epochs, and training ends once both metric targets are met.
pub fn train(model: &mut Model, data: &[SceneSample]) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(config_err!("training needs at least one sample"));
    }
    let cfg = model.cfg.clone();
    let frozen = model.frozen_params();
    let mut opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay);
    let mut touched = vec![false; model.store.len()];
    let mut epochs = Vec::new();
    let mut step = 0;
    let mut stopped_early = false;
    let budget = |s: usize| cfg.max_steps == 0 || s < cfg.max_steps;

    for epoch in 0..cfg.epochs {
        if !budget(step) {
            break;
        }
        let mut sum = LossReport::default();
        let mut count = 0;
        for sample in data {
            if !budget(step) {
                break;
            }
            let (report, grads) = match train_step(model, sample) {
                // finite weights can still overflow inside the forward pass
                Err(Error::Domain(msg)) if step > 0 && msg.contains("non-finite") => {
                    return Err(Error::Diverged { step, detail: msg });
                }
                r => r?,
            };
            if !report.is_finite() {
                return Err(Error::Diverged { step, detail: format!("loss terms {report:?}") });
            }
            for (i, gr) in grads.iter().enumerate() {
                if let Some(gr) = gr {
                    if let Some(e) = gr.iter().position(|x| !x.is_finite()) {
                        let name = model.store.get(model.store.ids().nth(i).expect("index in range")).name();
                        return Err(Error::Diverged { step, detail: format!("gradient of {name}[{e}] is not finite") });
                    }
                    touched[i] |= gr.iter().any(|&x| x != 0.0);
                }
            }
            opt.update(&mut model.store, &grads, &frozen);
            // an overflowing update would otherwise surface later as a domain error
            if let Some((_, p)) = model.store.iter().find(|(_, p)| p.tensor().data().iter().any(|x| !x.is_finite())) {
                return Err(Error::Diverged { step, detail: format!("parameter {} is not finite after the update", p.name()) });
            }
            debug!("step {step}: total {:.6}", report.total);
            accumulate(&mut sum, &report);
            count += 1;
            step += 1;
        }
        let mut rec = EpochRecord { epoch, steps: step, loss: scale(&sum, 1.0 / count.max(1) as f64), scene_iou: None, miou: None };
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            let cm = evaluate(model, data, 1)?;
            let (iou, miou) = (cm.scene_iou(), cm.semantic_miou().1);
            rec.scene_iou = Some(iou);
            rec.miou = Some(miou);
            if cfg.target_miou > 0.0 && miou >= cfg.target_miou && iou >= cfg.target_iou {
                stopped_early = true;
            }
        }
        info!(
            "epoch {epoch}: steps {step}, loss {:.5}{}",
            rec.loss.total,
            rec.miou.map(|m| format!(", miou {m:.4}, iou {:.4}", rec.scene_iou.unwrap_or(0.0))).unwrap_or_default()
        );
        epochs.push(rec);
        if stopped_early {
            break;
        }
    }
    Ok(TrainOutcome { epochs, steps: step, touched, stopped_early })
}

fn accumulate(sum: &mut LossReport, r: &LossReport) {
    sum.total += r.total;
    sum.ce += r.ce;
    sum.bce_of += r.bce_of;
    sum.bce_fb += r.bce_fb;
    sum.orth += r.orth;
    sum.decouple += r.decouple;
    sum.critical += r.critical;
}

fn scale(r: &LossReport, s: f64) -> LossReport {
    LossReport {
        total: r.total * s,
        ce: r.ce * s,
        bce_of: r.bce_of * s,
        bce_fb: r.bce_fb * s,
        orth: r.orth * s,
        decouple: r.decouple * s,
        critical: r.critical * s,
    }
}

/// Confusion matrix of the model's predictions over `data`, computed on
/// `workers` threads. Counts are integers, so the result does not depend
/// on the worker count.
pub fn evaluate(model: &Model, data: &[SceneSample], workers: usize) -> Result<ConfusionMatrix> {
    evaluate_with(data, model.num_classes, workers, |s| model.predict(s))
}

/// As [`evaluate`] with an arbitrary predictor.
pub fn evaluate_with<F>(data: &[SceneSample], num_classes: usize, workers: usize, predict: F) -> Result<ConfusionMatrix>
where
    F: Fn(&SceneSample) -> Result<Vec<u16>> + Sync,
{
    if workers == 0 {
        return Err(config_err!("worker count must be at least 1"));
    }
    let score = |idx: &mut dyn Iterator<Item = usize>| -> Result<ConfusionMatrix> {
        let mut cm = ConfusionMatrix::new(num_classes);
        for i in idx {
            let s = &data[i];
            cm.accumulate(&predict(s)?, &s.gt.labels, &s.gt.valid)?;
        }
        Ok(cm)
    };
    let score = &score;
    let parts: Vec<Result<ConfusionMatrix>> = if workers == 1 {
        vec![score(&mut (0..data.len()))]
    } else {
        std::thread::scope(|sc| {
            let handles: Vec<_> = (0..workers)
                .map(|w| sc.spawn(move || score(&mut (w..data.len()).step_by(workers))))
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut total = ConfusionMatrix::new(num_classes);
    for p in parts {
        total.merge(&p?)?;
    }
    Ok(total)
}
