//! High-dimension semantic decoupling.
//!
//! A 2D feature map is lifted into `D_exp` pseudo slices by a 1×1 expansion
//! layer. Learned pixel queries attend over all slices to collect global
//! semantics, which are grouped into `D_exp` clusters by density peaks with
//! kNN densities. Each slice location is then weighted by its best cosine
//! match against the cluster centroids and the slices are summed.
//!
//! Discrete choices (cluster centres, assignments, argmax of similarities)
//! are constants of the forward pass; gradients flow through centroid means
//! and cosines only.

use rand::Rng;

use crate::diffcore::{ops, Decisions, Graph, ParamId, ParamStore, Var};
use crate::error::{config_err, domain_err, shape_err, Result};

/// 1×1 projection from `C` to `D_exp·C` channels.
#[derive(Clone, Debug)]
pub struct ExpansionLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_exp: usize,
    pub channels: usize,
}

impl ExpansionLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, channels: usize, d_exp: usize, rng: &mut R) -> Result<Self> {
        if d_exp == 0 || channels == 0 {
            return Err(config_err!("expansion needs D_exp >= 1 and C >= 1"));
        }
        let rows = d_exp * channels;
        let weight = store.add_uniform(&format!("{prefix}.weight"), &[rows, channels], channels, rng)?;
        let bias = store.add_uniform(&format!("{prefix}.bias"), &[rows], channels, rng)?;
        Ok(Self { weight, bias, d_exp, channels })
    }
}

/// The `D_exp` pseudo slices of one feature map.
#[derive(Clone, Copy, Debug)]
pub struct PseudoVolume {
    /// `[D_exp, C, H, W]`
    pub slices: Var,
    /// Feature vectors as rows, slice-major then pixel: `[D_exp·H·W, C]`.
    pub rows: Var,
    pub d_exp: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Learned queries that read global semantics out of a pseudo volume.
#[derive(Clone, Debug)]
pub struct PixelQuerySet {
    pub queries: ParamId,
    pub count: usize,
}

impl PixelQuerySet {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, count: usize, channels: usize, rng: &mut R) -> Result<Self> {
        if count == 0 {
            return Err(config_err!("pixel query count must be positive"));
        }
        let queries = store.add_uniform(name, &[count, channels], channels, rng)?;
        Ok(Self { queries, count })
    }
}

pub fn dim_expand(g: &mut Graph, store: &ParamStore, f_cam: Var, layer: &ExpansionLayer) -> Result<PseudoVolume> {
    let (c, h, w) = match *g.shape(f_cam) {
        [c, h, w] => (c, h, w),
        ref s => return Err(shape_err!("camera features must be [C,H,W], got {s:?}")),
    };
    if c != layer.channels {
        return Err(shape_err!("camera features have {c} channels, expansion expects {}", layer.channels));
    }
    let d = layer.d_exp;
    let wt = g.param(store, layer.weight);
    let w4 = g.reshape(wt, &[d * c, c, 1, 1])?;
    let b = g.param(store, layer.bias);
    let out = g.conv2d(f_cam, w4, Some(b), 1, 0)?;
    let slices = g.reshape(out, &[d, c, h, w])?;
    let flat = g.reshape(out, &[d, c, h * w])?;
    let t = g.transpose(flat)?;
    let rows = g.reshape(t, &[d * h * w, c])?;
    Ok(PseudoVolume { slices, rows, d_exp: d, channels: c, height: h, width: w })
}

/// `λ · mean(|Ŵ·Ŵᵀ − I|)` with `Ŵ` the row-normalized expansion weight.
pub fn orthogonal_loss(g: &mut Graph, store: &ParamStore, layer: &ExpansionLayer, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(config_err!("orthogonality weight must be non-negative, got {lambda}"));
    }
    let w = g.param(store, layer.weight);
    orthogonal_penalty(g, w, lambda)
}

/// [`orthogonal_loss`] for an arbitrary weight matrix on the tape.
pub fn orthogonal_penalty(g: &mut Graph, w: Var, lambda: f64) -> Result<Var> {
    let (rows, cols) = ops::mat_dims(g, w)?;
    for (r, row) in g.value(w).chunks(cols).enumerate() {
        if row.iter().all(|&x| x == 0.0) {
            return Err(domain_err!("expansion weight row {r} is zero and cannot be normalized"));
        }
    }
    let wn = g.normalize_rows(w)?;
    let gram = g.matmul_ex(wn, wn, true)?;
    let mut eye = vec![0.0; rows * rows];
    for i in 0..rows {
        eye[i * rows + i] = 1.0;
    }
    let eye = g.constant_vec(&[rows, rows], eye)?;
    let diff = g.sub(gram, eye)?;
    let a = g.abs(diff);
    let m = g.mean(a);
    Ok(g.scale(m, lambda))
}

/// Cross attention from the pixel queries to every pseudo-volume feature.
pub fn collect_global_semantics(g: &mut Graph, store: &ParamStore, queries: &PixelQuerySet, volume: &PseudoVolume) -> Result<Var> {
    let q = g.param(store, queries.queries);
    ops::scaled_dot_attention(g, q, volume.rows, volume.rows)
}

/// Density-peaks clustering result.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSet {
    /// Point index of each cluster's centre, in decreasing `ρ·δ` order.
    pub centers: Vec<usize>,
    /// Cluster index of every point.
    pub assignment: Vec<usize>,
    pub density: Vec<f64>,
    pub separation: Vec<f64>,
    /// `[D_exp, dim]` member means (a cluster with no members keeps its centre point).
    pub centroids: Vec<f64>,
    pub dim: usize,
}

impl ClusterSet {
    /// Rebuilds a cluster set with the given centres and assignment,
    /// recomputing centroids from `points`. Diagnostics are left empty.
    pub fn from_assignment(points: &[f64], dim: usize, centers: Vec<usize>, assignment: Vec<usize>) -> Result<Self> {
        let n = points.len() / dim.max(1);
        if dim == 0 || points.len() != n * dim || assignment.len() != n {
            return Err(shape_err!("{} values, width {dim}, {} assignments", points.len(), assignment.len()));
        }
        if centers.iter().any(|&c| c >= n) || assignment.iter().any(|&a| a >= centers.len()) {
            return Err(shape_err!("cluster indices out of range"));
        }
        let mut cs = Self { centers, assignment, density: Vec::new(), separation: Vec::new(), centroids: Vec::new(), dim };
        let avg = cs.averaging_matrix();
        let d = cs.centers.len();
        let mut centroids = vec![0.0; d * dim];
        for c in 0..d {
            for i in 0..n {
                let w = avg[c * n + i];
                if w != 0.0 {
                    for (dst, x) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
                        *dst += w * x;
                    }
                }
            }
        }
        cs.centroids = centroids;
        Ok(cs)
    }

    pub fn num_clusters(&self) -> usize {
        self.centers.len()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == cluster).collect()
    }

    /// `[D_exp, N]` matrix that maps point rows to centroid rows.
    pub fn averaging_matrix(&self) -> Vec<f64> {
        let n = self.assignment.len();
        let mut m = vec![0.0; self.centers.len() * n];
        for c in 0..self.centers.len() {
            let members = self.members(c);
            if members.is_empty() {
                m[c * n + self.centers[c]] = 1.0;
            } else {
                let w = 1.0 / members.len() as f64;
                for i in members {
                    m[c * n + i] = w;
                }
            }
        }
        m
    }

    /// Within-cluster sum of squared distances to the centroids.
    pub fn sse(&self, points: &[f64]) -> f64 {
        points
            .chunks(self.dim)
            .zip(&self.assignment)
            .map(|(p, &c)| sq_dist(p, &self.centroids[c * self.dim..(c + 1) * self.dim]))
            .sum()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Density peaks clustering with kNN density on `n` points of width `dim`.
///
/// Ties anywhere (densities, distances, centre scores) go to the lowest
/// point index. "Denser than" is the strict order by density, then index,
/// so every point but the global peak has a nearest denser neighbour.
pub fn dpc_knn_cluster(points: &[f64], dim: usize, d_exp: usize, k_nn: usize) -> Result<ClusterSet> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(shape_err!("{} values do not form rows of width {dim}", points.len()));
    }
    let n = points.len() / dim;
    if d_exp == 0 || n < d_exp {
        return Err(config_err!("need at least D_exp = {d_exp} points, got {n}"));
    }
    if k_nn == 0 || k_nn >= n {
        return Err(config_err!("k_nn = {k_nn} must be in [1, {n})"));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(row(i), row(j));
            d2[i * n + j] = d;
            d2[j * n + i] = d;
        }
    }

    let density: Vec<f64> = (0..n)
        .map(|i| {
            let mut nb: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (d2[i * n + j], j)).collect();
            nb.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let msd = nb[..k_nn].iter().map(|x| x.0).sum::<f64>() / k_nn as f64;
            (-msd).exp()
        })
        .collect();
    let denser = |j: usize, i: usize| density[j] > density[i] || (density[j] == density[i] && j < i);

    let mut separation = vec![0.0; n];
    let mut parent: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if j != i && denser(j, i) {
                let d = d2[i * n + j];
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
        }
        match best {
            Some((d, j)) => {
                separation[i] = d.sqrt();
                parent[i] = Some(j);
            }
            None => {
                separation[i] = (0..n).map(|j| d2[i * n + j]).fold(0.0, f64::max).sqrt();
            }
        }
    }

    let mut by_gamma: Vec<usize> = (0..n).collect();
    let gamma: Vec<f64> = (0..n).map(|i| density[i] * separation[i]).collect();
    by_gamma.sort_by(|&a, &b| gamma[b].total_cmp(&gamma[a]).then(a.cmp(&b)));
    let centers: Vec<usize> = by_gamma[..d_exp].to_vec();

    // Walk points from densest to sparsest so parents are labelled first.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| density[b].total_cmp(&density[a]).then(a.cmp(&b)));
    let mut assignment = vec![usize::MAX; n];
    for &i in &order {
        let head = centers.iter().position(|&c| c == i);
        // A centre that coincides with a denser point is a duplicate, not a head.
        let real_head = head.filter(|_| parent[i].is_none() || separation[i] > 0.0);
        assignment[i] = match (real_head, parent[i]) {
            (Some(c), _) => c,
            (None, Some(p)) => assignment[p],
            // the global peak is always among the centres unless d_exp centres
            // all outrank it; fall back to the top centre
            (None, None) => 0,
        };
    }

    let mut centroids = vec![0.0; d_exp * dim];
    for c in 0..d_exp {
        let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == c).collect();
        let dst = &mut centroids[c * dim..(c + 1) * dim];
        if members.is_empty() {
            dst.copy_from_slice(row(centers[c]));
        } else {
            for &m in &members {
                dst.iter_mut().zip(row(m)).for_each(|(d, x)| *d += x);
            }
            let inv = 1.0 / members.len() as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
    }
    Ok(ClusterSet { centers, assignment, density, separation, centroids, dim })
}

/// Differentiable centroids `[D_exp, C]` of the rows of `points` under a
/// fixed cluster assignment.
pub fn cluster_centroids(g: &mut Graph, points: Var, clusters: &ClusterSet) -> Result<Var> {
    let (n, _) = ops::mat_dims(g, points)?;
    if n != clusters.assignment.len() {
        return Err(shape_err!("{n} points but {} assignments", clusters.assignment.len()));
    }
    let avg = g.constant_vec(&[clusters.num_clusters(), n], clusters.averaging_matrix())?;
    g.matmul(avg, points)
}

/// Sum of pairwise cosine similarities between distinct centroids (each
/// unordered pair once).
pub fn decoupling_loss(g: &mut Graph, centroids: Var) -> Result<Var> {
    let (d, cols) = ops::mat_dims(g, centroids)?;
    for (i, row) in g.value(centroids).chunks(cols).enumerate() {
        if row.iter().all(|&x| x == 0.0) {
            return Err(domain_err!("centroid {i} is zero"));
        }
    }
    let cn = g.normalize_rows(centroids)?;
    let gram = g.matmul_ex(cn, cn, true)?;
    let mut upper = vec![0.0; d * d];
    for i in 0..d {
        for j in i + 1..d {
            upper[i * d + j] = 1.0;
        }
    }
    let mask = g.constant_vec(&[d, d], upper)?;
    let pairs = g.mul(gram, mask)?;
    Ok(g.sum(pairs))
}

/// Weights each slice by its best cosine match against the centroids and
/// sums the slices. Returns `[C, H, W]`.
///
/// With `slice_level` the similarity is one scalar per slice (slice mean
/// against centroids) instead of one per location.
pub fn semantic_aggregate(
    g: &mut Graph,
    volume: &PseudoVolume,
    centroids: Var,
    slice_level: bool,
    dec: &mut Decisions,
) -> Result<Var> {
    let (_, cw) = ops::mat_dims(g, centroids)?;
    let (d, c, h, w) = (volume.d_exp, volume.channels, volume.height, volume.width);
    if cw != c {
        return Err(shape_err!("centroid width {cw} differs from slice channels {c}"));
    }
    let p = h * w;
    let cn = g.normalize_rows(centroids)?;
    let weights = if slice_level {
        let per_slice = g.reshape(volume.rows, &[d, p, c])?;
        let sums = g.sum_axis(per_slice, 1)?;
        let sums = g.reshape(sums, &[d, c])?;
        let sn = g.normalize_rows(sums)?;
        let sim = g.matmul_ex(sn, cn, true)?;
        let best = pick_best(g, sim, dec)?;
        let col = g.reshape(best, &[d, 1])?;
        let idx: Vec<usize> = (0..d * p).map(|r| r / p).collect();
        let spread = g.gather_rows(col, &idx)?;
        g.reshape(spread, &[d * p])?
    } else {
        let xn = g.normalize_rows(volume.rows)?;
        let sim = g.matmul_ex(xn, cn, true)?;
        pick_best(g, sim, dec)?
    };
    let weighted = g.mul_rows(volume.rows, weights)?;
    let stacked = g.reshape(weighted, &[d, p * c])?;
    let summed = g.sum_axis(stacked, 0)?;
    let pc = g.reshape(summed, &[p, c])?;
    let cp = g.transpose(pc)?;
    g.reshape(cp, &[c, h, w])
}

fn pick_best(g: &mut Graph, sim: Var, dec: &mut Decisions) -> Result<Var> {
    let (_, cols) = ops::mat_dims(g, sim)?;
    let idx = dec.choose(|| ops::argmax_rows(g.value(sim), cols));
    g.pick_cols(sim, &idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer_with(store: &mut ParamStore, w: Vec<f64>, b: Vec<f64>, d: usize, c: usize) -> ExpansionLayer {
        let weight = store.add("de.weight", Tensor::new(&[d * c, c], w).unwrap()).unwrap();
        let bias = store.add("de.bias", Tensor::new(&[d * c], b).unwrap()).unwrap();
        ExpansionLayer { weight, bias, d_exp: d, channels: c }
    }

    #[test]
    fn expansion_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = ExpansionLayer::new(&mut store, "de", 8, 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let f = g.constant_vec(&[8, 4, 4], vec![0.5; 128]).unwrap();
        let vol = dim_expand(&mut g, &store, f, &layer).unwrap();
        assert_eq!(g.shape(vol.slices), &[4, 8, 4, 4]);
        assert_eq!(g.shape(vol.rows), &[64, 8]);
        let bad = g.constant_vec(&[7, 4, 4], vec![0.5; 112]).unwrap();
        assert!(matches!(dim_expand(&mut g, &store, bad, &layer), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn zero_and_identity_expansions() {
        let (d, c) = (3, 2);
        let mut store = ParamStore::new();
        let layer = layer_with(&mut store, vec![0.0; d * c * c], vec![0.0; d * c], d, c);
        let mut g = Graph::new();
        let fdata: Vec<f64> = (0..c * 2 * 3).map(|x| x as f64 - 2.5).collect();
        let f = g.constant_vec(&[c, 2, 3], fdata.clone()).unwrap();
        let vol = dim_expand(&mut g, &store, f, &layer).unwrap();
        assert!(g.value(vol.slices).iter().all(|&x| x == 0.0));

        let mut w = vec![0.0; d * c * c];
        for s in 0..d {
            for i in 0..c {
                w[(s * c + i) * c + i] = 1.0;
            }
        }
        let mut store = ParamStore::new();
        let layer = layer_with(&mut store, w, vec![0.0; d * c], d, c);
        let mut g = Graph::new();
        let f = g.constant_vec(&[c, 2, 3], fdata.clone()).unwrap();
        let vol = dim_expand(&mut g, &store, f, &layer).unwrap();
        for s in 0..d {
            assert_eq!(&g.value(vol.slices)[s * fdata.len()..(s + 1) * fdata.len()], &fdata[..]);
        }
    }

    #[test]
    fn orthogonal_loss_hand_values() {
        let mut store = ParamStore::new();
        let layer = layer_with(&mut store, vec![1.0, 0.0, 0.0, 2.0], vec![0.0; 2], 1, 2);
        let mut g = Graph::new();
        let l = orthogonal_loss(&mut g, &store, &layer, 0.01).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);

        let mut g = Graph::new();
        let w = g.constant_vec(&[2, 3], vec![0.6, 0.8, 0.0, 0.6, 0.8, 0.0]).unwrap();
        let l = orthogonal_penalty(&mut g, w, 0.01).unwrap();
        assert!((g.scalar(l) - 0.005).abs() < 1e-12);

        let z = g.constant_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(orthogonal_penalty(&mut g, z, 0.01), Err(crate::Error::Domain(_))));
        let mut store = ParamStore::new();
        let layer = layer_with(&mut store, vec![1.0, 0.0, 0.0, 2.0], vec![0.0; 2], 1, 2);
        assert!(matches!(orthogonal_loss(&mut g, &store, &layer, -1.0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn global_semantics_single_key_and_uniform_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = layer_with(&mut store, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2], 1, 2);
        let q = PixelQuerySet::new(&mut store, "q", 5, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let f = g.constant_vec(&[2, 1, 1], vec![0.3, -0.7]).unwrap();
        let vol = dim_expand(&mut g, &store, f, &layer).unwrap();
        let out = collect_global_semantics(&mut g, &store, &q, &vol).unwrap();
        for row in g.value(out).chunks(2) {
            assert!((row[0] - 0.3).abs() < 1e-15 && (row[1] + 0.7).abs() < 1e-15);
        }

        let f = g.constant_vec(&[2, 3, 3], [vec![1.5; 9], vec![-2.0; 9]].concat()).unwrap();
        let vol = dim_expand(&mut g, &store, f, &layer).unwrap();
        let out = collect_global_semantics(&mut g, &store, &q, &vol).unwrap();
        for row in g.value(out).chunks(2) {
            assert!((row[0] - 1.5).abs() < 1e-12 && (row[1] + 2.0).abs() < 1e-12);
        }
        let qv = g.param(&store, q.queries);
        let attn = ops::attention_weights(&mut g, qv, vol.rows).unwrap();
        for row in g.value(attn).chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dpc_full_split_and_identical_points() {
        let pts = vec![0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 3.0, 3.0];
        let cs = dpc_knn_cluster(&pts, 2, 4, 1).unwrap();
        let mut seen: Vec<usize> = cs.assignment.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        for (i, &c) in cs.assignment.iter().enumerate() {
            assert_eq!(&cs.centroids[c * 2..c * 2 + 2], &pts[i * 2..i * 2 + 2]);
        }

        let same = vec![0.5; 6 * 3];
        let cs = dpc_knn_cluster(&same, 3, 3, 2).unwrap();
        assert_eq!(cs.centers, vec![0, 1, 2]);
        assert!(cs.assignment.iter().all(|&a| a == 0));
        assert_eq!(&cs.centroids[..3], &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn dpc_precondition_errors() {
        let pts = vec![0.0; 8];
        assert!(dpc_knn_cluster(&pts, 2, 5, 1).is_err());
        assert!(dpc_knn_cluster(&pts, 2, 2, 4).is_err());
        assert!(dpc_knn_cluster(&pts, 2, 2, 0).is_err());
        assert!(dpc_knn_cluster(&pts, 3, 2, 1).is_err());
    }

    #[test]
    fn decoupling_loss_hand_values() {
        let mut g = Graph::new();
        let orth = g.constant_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0]).unwrap();
        assert!(decoupling_loss(&mut g, orth).map(|v| g.scalar(v)).unwrap().abs() < 1e-15);
        let same = g.constant_vec(&[2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let l = decoupling_loss(&mut g, same).unwrap();
        assert!((g.scalar(l) - 1.0).abs() < 1e-12);
        let opp = g.constant_vec(&[2, 2], vec![1.0, 2.0, -1.0, -2.0]).unwrap();
        let l = decoupling_loss(&mut g, opp).unwrap();
        assert!((g.scalar(l) + 1.0).abs() < 1e-12);
        let zero = g.constant_vec(&[2, 2], vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        assert!(matches!(decoupling_loss(&mut g, zero), Err(crate::Error::Domain(_))));
        let single = g.constant_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let l = decoupling_loss(&mut g, single).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    fn volume_from(g: &mut Graph, slices: &[f64], d: usize, c: usize, h: usize, w: usize) -> PseudoVolume {
        let s = g.constant_vec(&[d, c, h, w], slices.to_vec()).unwrap();
        let flat = g.reshape(s, &[d, c, h * w]).unwrap();
        let t = g.transpose(flat).unwrap();
        let rows = g.reshape(t, &[d * h * w, c]).unwrap();
        PseudoVolume { slices: s, rows, d_exp: d, channels: c, height: h, width: w }
    }

    #[test]
    fn aggregate_colinear_and_orthogonal_slices() {
        let mut g = Graph::new();
        let vol = volume_from(&mut g, &[2.0, 0.0, 0.0, 3.0], 2, 2, 1, 1);
        let cents = g.constant_vec(&[2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let agg = semantic_aggregate(&mut g, &vol, cents, false, &mut Decisions::new()).unwrap();
        assert_eq!(g.value(agg), &[2.0, 0.0]);
    }

    #[test]
    fn aggregate_unit_weights_and_single_slice() {
        let mut g = Graph::new();
        // every location is colinear with one of the centroids
        let vol = volume_from(&mut g, &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 3.0, 4.0], 2, 2, 1, 2);
        let cents = g.constant_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let agg = semantic_aggregate(&mut g, &vol, cents, false, &mut Decisions::new()).unwrap();
        assert_eq!(g.value(agg), &[1.0, 2.0, 3.0, 4.0]);

        let vol = volume_from(&mut g, &[3.0, 4.0], 1, 2, 1, 1);
        let cents = g.constant_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let agg = semantic_aggregate(&mut g, &vol, cents, false, &mut Decisions::new()).unwrap();
        let w = 3.0 / 5.0;
        assert_eq!(g.value(agg), &[3.0 * w, 4.0 * w]);
    }

    #[test]
    fn aggregate_zero_location_and_slice_level() {
        let mut g = Graph::new();
        // locations (0, 0) and (0, 1)
        let vol = volume_from(&mut g, &[0.0, 0.0, 0.0, 1.0], 1, 2, 1, 2);
        let cents = g.constant_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        let agg = semantic_aggregate(&mut g, &vol, cents, false, &mut Decisions::new()).unwrap();
        assert_eq!(g.value(agg), &[0.0, 0.0, 0.0, 1.0]);

        // locations (1, 0) and (0, 1): per location weights 0 and 1, per slice 1/sqrt 2
        let vol = volume_from(&mut g, &[1.0, 0.0, 0.0, 1.0], 1, 2, 1, 2);
        let agg = semantic_aggregate(&mut g, &vol, cents, false, &mut Decisions::new()).unwrap();
        assert_eq!(g.value(agg), &[0.0, 0.0, 0.0, 1.0]);
        let agg = semantic_aggregate(&mut g, &vol, cents, true, &mut Decisions::new()).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for (a, b) in g.value(agg).iter().zip([r, 0.0, 0.0, r]) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
