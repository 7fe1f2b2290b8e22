//! High-density occupancy refinement.
//!
//! Detect phase: binary occupancy and foreground heads pick the `k` voxels
//! with the highest geometric score. Refine phase: a class-wise head gives
//! initial logits, whose per-voxel confidence picks `k` semantic critical
//! voxels. A small MLP then adds residual logits at the union of both sets.
//! A symmetric KL term aligns the two score fields.
//!
//! Voxel features are voxel-major `[H·W·Z, C]` matrices throughout.

use rand::Rng;

use crate::diffcore::{ops, Decisions, Graph, ParamId, ParamStore, Var};
use crate::error::{config_err, shape_err, Result};

/// Learned voxel queries that summarize the voxel features into one
/// context vector.
#[derive(Clone, Debug)]
pub struct VoxelQuerySet {
    pub queries: ParamId,
    pub count: usize,
    pub channels: usize,
}

impl VoxelQuerySet {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, count: usize, channels: usize, rng: &mut R) -> Result<Self> {
        if count == 0 {
            return Err(config_err!("voxel query count must be positive"));
        }
        let queries = store.add_uniform(name, &[count, channels], channels, rng)?;
        Ok(Self { queries, count, channels })
    }
}

/// Linear head over `[f_v ; g]`, split as `f_v·W_f + g·W_g + b`.
#[derive(Clone, Debug)]
pub struct LinearHead {
    pub w_feat: ParamId,
    pub w_ctx: ParamId,
    pub bias: ParamId,
    pub outputs: usize,
}

impl LinearHead {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, channels: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        let fan_in = 2 * channels;
        let w_feat = store.add_uniform(&format!("{prefix}.w_feat"), &[channels, outputs], fan_in, rng)?;
        let w_ctx = store.add_uniform(&format!("{prefix}.w_ctx"), &[channels, outputs], fan_in, rng)?;
        let bias = store.add_zeros(&format!("{prefix}.bias"), &[outputs])?;
        Ok(Self { w_feat, w_ctx, bias, outputs })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, feats: Var, ctx: Var) -> Result<Var> {
        let wf = g.param(store, self.w_feat);
        let wg = g.param(store, self.w_ctx);
        let b = g.param(store, self.bias);
        let per_voxel = g.matmul(feats, wf)?;
        let shared = g.matmul(ctx, wg)?;
        let shared = g.reshape(shared, &[self.outputs])?;
        let row = g.add(shared, b)?;
        g.add_row(per_voxel, row)
    }
}

/// Occupied-vs-free and foreground-vs-background logits, one per voxel.
#[derive(Clone, Copy, Debug)]
pub struct ScoreMaps {
    pub m_of: Var,
    pub m_fb: Var,
}

impl ScoreMaps {
    /// Geometric density score `m_of + m_fb`.
    pub fn geometric_score(&self, g: &mut Graph) -> Result<Var> {
        g.add(self.m_of, self.m_fb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticalKind {
    Geometric,
    Semantic,
}

/// Top-k voxels, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticalSet {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub kind: CriticalKind,
}

/// Per-voxel class logits `[H·W·Z, N+1]`; column 0 is the empty class.
#[derive(Clone, Copy, Debug)]
pub struct SemLogits {
    pub logits: Var,
    pub num_classes: usize,
}

/// Two-layer MLP producing residual logits from `[f_v ; geo ; sem]`.
#[derive(Clone, Debug)]
pub struct RefineMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl RefineMlp {
    /// The output layer starts at zero so refinement begins as the identity.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        hidden: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w1 = store.add_uniform(&format!("{prefix}.w1"), &[channels + 2, hidden], channels + 2, rng)?;
        let b1 = store.add_zeros(&format!("{prefix}.b1"), &[hidden])?;
        let w2 = store.add_zeros(&format!("{prefix}.w2"), &[hidden, num_classes])?;
        let b2 = store.add_zeros(&format!("{prefix}.b2"), &[num_classes])?;
        Ok(Self { w1, b1, w2, b2 })
    }
}

/// Mean of the query-attended voxel features, shape `[1, C]`.
pub fn voxel_context(g: &mut Graph, store: &ParamStore, f_voxel: Var, queries: &VoxelQuerySet) -> Result<Var> {
    let (_, c) = ops::mat_dims(g, f_voxel)?;
    if c != queries.channels {
        return Err(shape_err!("voxel features have {c} channels, queries have {}", queries.channels));
    }
    let q = g.param(store, queries.queries);
    let attended = ops::scaled_dot_attention(g, q, f_voxel, f_voxel)?;
    let pooled = g.sum_axis(attended, 0)?;
    let pooled = g.scale(pooled, 1.0 / queries.count as f64);
    g.reshape(pooled, &[1, c])
}

pub fn binary_heads(g: &mut Graph, store: &ParamStore, f_voxel: Var, queries: &VoxelQuerySet, head: &LinearHead) -> Result<ScoreMaps> {
    if head.outputs != 2 {
        return Err(config_err!("binary head needs 2 outputs, has {}", head.outputs));
    }
    let ctx = voxel_context(g, store, f_voxel, queries)?;
    let logits = head.apply(g, store, f_voxel, ctx)?;
    let (n, _) = ops::mat_dims(g, logits)?;
    let m_of = g.pick_cols(logits, &vec![0; n])?;
    let m_fb = g.pick_cols(logits, &vec![1; n])?;
    Ok(ScoreMaps { m_of, m_fb })
}

pub fn classwise_head(
    g: &mut Graph,
    store: &ParamStore,
    f_voxel: Var,
    queries: &VoxelQuerySet,
    head: &LinearHead,
) -> Result<SemLogits> {
    if head.outputs < 2 {
        return Err(config_err!("class-wise head needs at least 2 classes, has {}", head.outputs));
    }
    let ctx = voxel_context(g, store, f_voxel, queries)?;
    let logits = head.apply(g, store, f_voxel, ctx)?;
    Ok(SemLogits { logits, num_classes: head.outputs })
}

/// Indices of the `k` largest scores, descending, ties to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(config_err!("critical voxel count must be positive"));
    }
    if k > scores.len() {
        return Err(config_err!("k = {k} exceeds {} voxels", scores.len()));
    }
    // partial_cmp so that -0.0 and 0.0 tie; total_cmp only orders NaNs
    let by_score = |a: usize, b: usize| scores[b].partial_cmp(&scores[a]).unwrap_or_else(|| scores[b].total_cmp(&scores[a]));
    let order = |&a: &usize, &b: &usize| by_score(a, b).then(a.cmp(&b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    Ok(idx)
}

fn critical(scores: &[f64], k: usize, kind: CriticalKind) -> Result<CriticalSet> {
    let indices = top_k(scores, k)?;
    let scores = indices.iter().map(|&i| scores[i]).collect();
    Ok(CriticalSet { indices, scores, kind })
}

/// Top-k of `m_of + m_fb` given the two score fields as plain values.
pub fn geometric_critical(m_of: &[f64], m_fb: &[f64], k: usize) -> Result<CriticalSet> {
    if m_of.len() != m_fb.len() {
        return Err(shape_err!("score maps differ in size: {} vs {}", m_of.len(), m_fb.len()));
    }
    let s: Vec<f64> = m_of.iter().zip(m_fb).map(|(a, b)| a + b).collect();
    critical(&s, k, CriticalKind::Geometric)
}

/// Per-voxel confidence: the largest class logit.
pub fn confidence(logits: &[f64], num_classes: usize) -> Vec<f64> {
    logits.chunks(num_classes).map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
}

pub fn semantic_critical(logits: &[f64], num_classes: usize, k: usize) -> Result<CriticalSet> {
    if num_classes == 0 || !logits.len().is_multiple_of(num_classes) {
        return Err(shape_err!("{} logits do not split into {num_classes} classes", logits.len()));
    }
    critical(&confidence(logits, num_classes), k, CriticalKind::Semantic)
}

/// Differentiable per-voxel confidence `[N]`.
pub fn confidence_var(g: &mut Graph, y: &SemLogits, dec: &mut Decisions) -> Result<Var> {
    let idx = dec.choose(|| ops::argmax_rows(g.value(y.logits), y.num_classes));
    g.pick_cols(y.logits, &idx)
}

/// `KL(p_geo‖p_sem) + KL(p_sem‖p_geo)` where both distributions are
/// softmaxes over the voxel grid. With `subset` the softmaxes run over
/// those voxel indices only.
pub fn critical_alignment_loss(
    g: &mut Graph,
    maps: &ScoreMaps,
    y_init: &SemLogits,
    subset: Option<&[usize]>,
    dec: &mut Decisions,
) -> Result<Var> {
    let geo = maps.geometric_score(g)?;
    let sem = confidence_var(g, y_init, dec)?;
    alignment_of_fields(g, geo, sem, subset)
}

/// The symmetric KL between the grid softmaxes of two raw score fields.
pub fn alignment_of_fields(g: &mut Graph, geo: Var, sem: Var, subset: Option<&[usize]>) -> Result<Var> {
    let n = g.value(geo).len();
    if g.value(sem).len() != n {
        return Err(shape_err!("score fields differ in size: {n} vs {}", g.value(sem).len()));
    }
    let (geo, sem) = match subset {
        Some(idx) => {
            let gc = g.reshape(geo, &[n, 1])?;
            let sc = g.reshape(sem, &[n, 1])?;
            (g.gather_rows(gc, idx)?, g.gather_rows(sc, idx)?)
        }
        None => (geo, sem),
    };
    let m = g.value(geo).len();
    let geo = g.reshape(geo, &[m])?;
    let sem = g.reshape(sem, &[m])?;
    let p_geo = g.softmax(geo, 0)?;
    let p_sem = g.softmax(sem, 0)?;
    let a = ops::kl_divergence(g, p_geo, p_sem)?;
    let b = ops::kl_divergence(g, p_sem, p_geo)?;
    g.add(a, b)
}

/// Union of both critical sets in ascending voxel order.
pub fn critical_union(v_geo: &CriticalSet, v_sem: &CriticalSet) -> Vec<usize> {
    let mut u: Vec<usize> = v_geo.indices.iter().chain(&v_sem.indices).copied().collect();
    u.sort_unstable();
    u.dedup();
    u
}

/// Adds MLP residuals onto `y_init` at the union of the critical sets;
/// every other voxel keeps its logits bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn refine(
    g: &mut Graph,
    store: &ParamStore,
    y_init: &SemLogits,
    f_voxel: Var,
    geo_score: Var,
    sem_conf: Var,
    v_geo: &CriticalSet,
    v_sem: &CriticalSet,
    mlp: &RefineMlp,
    dec: &mut Decisions,
) -> Result<SemLogits> {
    let (n, _) = ops::mat_dims(g, f_voxel)?;
    let union = critical_union(v_geo, v_sem);
    if let Some(&bad) = union.iter().find(|&&i| i >= n) {
        panic!("critical voxel {bad} outside a grid of {n} voxels");
    }
    let feats = g.gather_rows(f_voxel, &union)?;
    let geo = g.reshape(geo_score, &[n, 1])?;
    let geo = g.gather_rows(geo, &union)?;
    let sem = g.reshape(sem_conf, &[n, 1])?;
    let sem = g.gather_rows(sem, &union)?;
    let x = g.concat_cols(&[feats, geo, sem])?;
    let w1 = g.param(store, mlp.w1);
    let b1 = g.param(store, mlp.b1);
    let w2 = g.param(store, mlp.w2);
    let b2 = g.param(store, mlp.b2);
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = ops::relu_gated(g, h, dec)?;
    let r = g.matmul(h, w2)?;
    let r = g.add_row(r, b2)?;
    let logits = g.scatter_add_rows(y_init.logits, r, &union)?;
    Ok(SemLogits { logits, num_classes: y_init.num_classes })
}
