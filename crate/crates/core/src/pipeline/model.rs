use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::dataio::{SceneSample, DEPTH_SCALE};
use crate::diffcore::{ops, Decisions, Graph, ParamId, ParamStore, Var};
use crate::error::{config_err, shape_err, Result};
use crate::geometry::{project_voxels, sample_image_features, Projection, VoxelGridSpec};
use crate::hor::{self, CriticalKind, CriticalSet, LinearHead, RefineMlp, ScoreMaps, SemLogits, VoxelQuerySet};
use crate::hsd::{self, ClusterSet, ExpansionLayer, PixelQuerySet};

/// Per-voxel channels appended to the sampled image features: the raw
/// image (3) at full resolution, voxel depth, voxel height and the depth
/// residual.
pub const GEO_CHANNELS: usize = 6;

/// Bound on the depth residual channel, in voxels.
const RESIDUAL_CLAMP: f64 = 3.0;

/// Encoder, semantic decoupling, view transform, voxel convolution and the
/// detect-and-refine heads, with every weight in one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub num_classes: usize,
    pub store: ParamStore,
    pub enc1: (ParamId, ParamId),
    pub enc2: (ParamId, ParamId),
    pub expand: ExpansionLayer,
    pub pixel_queries: PixelQuerySet,
    pub voxel_conv: (ParamId, ParamId),
    pub voxel_queries: VoxelQuerySet,
    pub binary_head: LinearHead,
    pub class_head: LinearHead,
    pub refine: RefineMlp,
}

/// Everything a forward pass produces that losses or callers need.
#[derive(Clone, Debug)]
pub struct Forward {
    pub refined: SemLogits,
    pub initial: SemLogits,
    pub maps: ScoreMaps,
    pub geo_score: Var,
    pub sem_conf: Var,
    pub v_geo: CriticalSet,
    pub v_sem: CriticalSet,
    pub clusters: ClusterSet,
    /// `λ`-weighted orthogonality penalty.
    pub orth: Var,
    pub decouple: Var,
    pub critical: Var,
    /// Voxels whose centroid projects into the image.
    pub in_view: Vec<bool>,
}

impl Model {
    /// Fresh weights drawn from `cfg.seed`.
    pub fn new(cfg: ModelConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if num_classes < 2 {
            return Err(config_err!("need at least 2 classes, got {num_classes}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut s = ParamStore::new();
        let (c2, c3) = (cfg.c2d, cfg.c3d);
        let enc1 = (s.add_uniform("enc1.weight", &[c2, 3, 3, 3], 27, &mut rng)?, s.add_zeros("enc1.bias", &[c2])?);
        let enc2 = (
            s.add_uniform("enc2.weight", &[c2, c2, 3, 3], 9 * c2, &mut rng)?,
            s.add_zeros("enc2.bias", &[c2])?,
        );
        let expand = ExpansionLayer::new(&mut s, "expand", c2, cfg.d_exp, &mut rng)?;
        let pixel_queries = PixelQuerySet::new(&mut s, "pixel_queries", cfg.n_query, c2, &mut rng)?;
        let cin = c2 + GEO_CHANNELS;
        let voxel_conv = (
            s.add_uniform("voxel_conv.weight", &[27, cin, c3], 27 * cin, &mut rng)?,
            s.add_zeros("voxel_conv.bias", &[c3])?,
        );
        let voxel_queries = VoxelQuerySet::new(&mut s, "voxel_queries", cfg.n_query, c3, &mut rng)?;
        let binary_head = LinearHead::new(&mut s, "binary_head", c3, 2, &mut rng)?;
        let class_head = LinearHead::new(&mut s, "class_head", c3, num_classes, &mut rng)?;
        let refine = RefineMlp::new(&mut s, "refine", c3, cfg.refine_hidden, num_classes, &mut rng)?;
        Ok(Self {
            cfg,
            num_classes,
            store: s,
            enc1,
            enc2,
            expand,
            pixel_queries,
            voxel_conv,
            voxel_queries,
            binary_head,
            class_head,
            refine,
        })
    }

    /// Parameters held fixed during training for the configured variant.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        match self.cfg.variant {
            super::Variant::HsdOnly => vec![self.refine.w2, self.refine.b2],
            _ => Vec::new(),
        }
    }

    fn check_sample(&self, sample: &SceneSample) -> Result<()> {
        if sample.spec.dims != self.cfg.grid {
            return Err(shape_err!("sample grid {:?} differs from model grid {:?}", sample.spec.dims, self.cfg.grid));
        }
        let (w, h) = sample.image_size();
        if (w, h) != (self.cfg.image_w, self.cfg.image_h) {
            return Err(shape_err!("sample image {w}x{h} differs from model image {}x{}", self.cfg.image_w, self.cfg.image_h));
        }
        Ok(())
    }

    /// Two stride-2 3×3 convolutions with relu: `[3, H, W]` to `[C, H/4, W/4]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, image: Var, dec: &mut Decisions) -> Result<Var> {
        match *g.shape(image) {
            [3, h, w] if h % 4 == 0 && w % 4 == 0 => {}
            ref s => return Err(config_err!("encoder input {s:?} must be [3, H, W] with H, W divisible by 4")),
        }
        let mut x = image;
        for (w, b) in [self.enc1, self.enc2] {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            let y = g.conv2d(x, wv, Some(bv), 2, 1)?;
            x = ops::relu_gated(g, y, dec)?;
        }
        Ok(x)
    }

    pub fn forward(&self, g: &mut Graph, sample: &SceneSample, dec: &mut Decisions) -> Result<Forward> {
        self.forward_with(g, &self.store, sample, dec)
    }

    /// [`Model::forward`] reading weights from `store`, which must share
    /// this model's layout (used by finite-difference probes).
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, sample: &SceneSample, dec: &mut Decisions) -> Result<Forward> {
        self.check_sample(sample)?;
        let cfg = &self.cfg;
        let image = g.constant(sample.image());
        let f_cam = self.encode(g, store, image, dec)?;

        let volume = hsd::dim_expand(g, store, f_cam, &self.expand)?;
        let orth = hsd::orthogonal_loss(g, store, &self.expand, cfg.lambda_orth)?;
        let collected = hsd::collect_global_semantics(g, store, &self.pixel_queries, &volume)?;
        let clusters = self.cluster(g, collected, dec)?;
        let centroids = hsd::cluster_centroids(g, collected, &clusters)?;
        let decouple = hsd::decoupling_loss(g, centroids)?;
        let f_agg = hsd::semantic_aggregate(g, &volume, centroids, cfg.slice_level_sim, dec)?;

        let proj = project_voxels(&sample.spec, &sample.camera, sample.image_size());
        let x = self.voxel_inputs(g, f_agg, image, &sample.spec, &proj)?;
        let (cw, cb) = self.voxel_conv;
        let (wv, bv) = (g.param(store, cw), g.param(store, cb));
        let pre = g.conv3d(x, wv, Some(bv), cfg.grid)?;
        let f_voxel = ops::relu_gated(g, pre, dec)?;

        let maps = hor::binary_heads(g, store, f_voxel, &self.voxel_queries, &self.binary_head)?;
        let initial = hor::classwise_head(g, store, f_voxel, &self.voxel_queries, &self.class_head)?;
        let geo_score = maps.geometric_score(g)?;
        let sem_conf = hor::confidence_var(g, &initial, dec)?;
        let v_geo = pick_critical(g, geo_score, cfg.k_critical, CriticalKind::Geometric, dec)?;
        let v_sem = pick_critical(g, sem_conf, cfg.k_critical, CriticalKind::Semantic, dec)?;
        let union = hor::critical_union(&v_geo, &v_sem);
        let subset = cfg.kl_topk_only.then_some(union.as_slice());
        let critical = hor::alignment_of_fields(g, geo_score, sem_conf, subset)?;
        let refined =
            hor::refine(g, store, &initial, f_voxel, geo_score, sem_conf, &v_geo, &v_sem, &self.refine, dec)?;

        Ok(Forward {
            refined,
            initial,
            maps,
            geo_score,
            sem_conf,
            v_geo,
            v_sem,
            clusters,
            orth,
            decouple,
            critical,
            in_view: proj.valid,
        })
    }

    fn cluster(&self, g: &Graph, collected: Var, dec: &mut Decisions) -> Result<ClusterSet> {
        let points = g.value(collected);
        let (n, d) = (self.cfg.n_query, self.cfg.c2d);
        let fresh = if dec.is_replaying() {
            None
        } else {
            Some(hsd::dpc_knn_cluster(points, d, self.cfg.d_exp, self.cfg.k_nn)?)
        };
        let encoded = dec.choose(|| {
            let cs = fresh.as_ref().expect("clusters are computed whenever choices are not replayed");
            cs.centers.iter().chain(&cs.assignment).copied().collect()
        });
        match fresh {
            Some(cs) => Ok(cs),
            None => {
                let (centers, assignment) = encoded.split_at(encoded.len() - n);
                ClusterSet::from_assignment(points, d, centers.to_vec(), assignment.to_vec())
            }
        }
    }

    /// `[N_voxels, C + GEO_CHANNELS]` rows: sampled aggregated features, the
    /// raw image at the voxel's projection, voxel depth, voxel height and
    /// the depth residual. Voxels outside the image get zero rows.
    ///
    /// The residual is the image depth at the projected pixel minus the
    /// voxel depth, in voxels and clamped to `±RESIDUAL_CLAMP`: positive in
    /// front of the visible surface, near zero on it.
    fn voxel_inputs(&self, g: &mut Graph, f_agg: Var, image: Var, spec: &VoxelGridSpec, proj: &Projection) -> Result<Var> {
        let sampled = sample_image_features(g, f_agg, proj, 4.0)?;
        let raw = sample_image_features(g, image, proj, 1.0)?;
        let n = spec.num_voxels();
        let z = spec.dims[2];
        let (w, h) = proj.image_size;
        let surface = &g.value(image)[2 * w * h..];
        let mut geo = vec![0.0; n * 3];
        for v in (0..n).filter(|&v| proj.valid[v]) {
            let (u, y) = proj.uv[v];
            let pix = (y as usize).min(h - 1) * w + (u as usize).min(w - 1);
            let residual = (surface[pix] * DEPTH_SCALE - proj.depth[v]) / spec.resolution;
            geo[3 * v] = proj.depth[v] / DEPTH_SCALE;
            geo[3 * v + 1] = ((v % z) as f64 + 0.5) / z as f64;
            geo[3 * v + 2] = residual.clamp(-RESIDUAL_CLAMP, RESIDUAL_CLAMP);
        }
        let geo = g.constant_vec(&[n, 3], geo)?;
        g.concat_cols(&[sampled, raw, geo])
    }

    /// Class index per voxel from the refined logits.
    pub fn predict(&self, sample: &SceneSample) -> Result<Vec<u16>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, sample, &mut Decisions::passive())?;
        Ok(ops::argmax_rows(g.value(fwd.refined.logits), self.num_classes).into_iter().map(|c| c as u16).collect())
    }
}

fn pick_critical(g: &Graph, scores: Var, k: usize, kind: CriticalKind, dec: &mut Decisions) -> Result<CriticalSet> {
    let values = g.value(scores);
    let fresh = if dec.is_replaying() { None } else { Some(hor::top_k(values, k)?) };
    let indices = dec.choose(|| fresh.expect("top-k is computed whenever choices are not replayed"));
    let scores = indices.iter().map(|&i| values[i]).collect();
    Ok(CriticalSet { indices, scores, kind })
}

/// Nearest-neighbour upsampling of voxel-major logits by `factor` along
/// every axis.
pub fn upsample_logits(g: &mut Graph, y: &SemLogits, dims: [usize; 3], factor: usize) -> Result<SemLogits> {
    if factor == 0 {
        return Err(config_err!("upsampling factor must be at least 1"));
    }
    let logits = g.upsample3d(y.logits, dims, factor)?;
    Ok(SemLogits { logits, num_classes: y.num_classes })
}
