//! Property tests for the module invariants.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssc_core::dataio::{decode_sscv, encode_sscv, generate_synthetic, LabelSpace, VoxelGrid};
use ssc_core::diffcore::{kl_divergence, softmax, Decisions, Graph, ParamStore, Tensor};
use ssc_core::geometry::{axis_angle, mat_vec, project_voxels, CameraModel, Vec3, VoxelGridSpec};
use ssc_core::hor::{alignment_of_fields, geometric_critical, top_k};
use ssc_core::hsd::{decoupling_loss, dim_expand, dpc_knn_cluster, orthogonal_loss, semantic_aggregate, ExpansionLayer};
use ssc_core::metrics::ConfusionMatrix;
use ssc_core::pipeline::{decode_checkpoint, ModelConfig};

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

fn finite(lo: f64, hi: f64, n: impl Into<proptest::collection::SizeRange>) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, n)
}

fn normalized(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn rotation() -> impl Strategy<Value = [[f64; 3]; 3]> {
    ((-1.0..1.0f64, -1.0..1.0f64, 0.1..1.0f64), -3.1..3.1f64).prop_map(|((x, y, z), a)| axis_angle([x, y, z], a))
}

/// A camera whose optical axis passes through `target` at distance `dist`.
fn aimed_camera(r: [[f64; 3]; 3], target: Vec3, dist: f64, f: f64, size: (usize, usize)) -> CameraModel {
    let k = CameraModel::intrinsics(f, f, size.0 as f64 / 2.0, size.1 as f64 / 2.0);
    let rt = mat_vec(&r, &target);
    CameraModel::new(k, r, [-rt[0], -rt[1], dist - rt[2]]).unwrap()
}

proptest! {
    #![proptest_config(cfg(128))]

    #[test]
    fn softmax_normalizes_and_ignores_shifts(x in finite(-15.0, 15.0, 1..40), c in -50.0..50.0f64) {
        let n = x.len();
        let mut g = Graph::new();
        let a = g.constant_vec(&[n], x.clone()).unwrap();
        let b = g.constant_vec(&[n], x.iter().map(|v| v + c).collect()).unwrap();
        let sa = softmax(&mut g, a, 0).unwrap();
        let sb = softmax(&mut g, b, 0).unwrap();
        let (pa, pb) = (g.value(sa), g.value(sb));
        prop_assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(pa.iter().all(|&p| p > 0.0 && p < 1.0 || n == 1));
        for (u, v) in pa.iter().zip(pb) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_non_negative(raw in finite(0.01, 1.0, 2..30), seed in 0u64..1000) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = raw.len();
        let p = normalized(&raw);
        let q = normalized(&(0..n).map(|_| rng.random_range(0.01..1.0)).collect::<Vec<_>>());
        let mut g = Graph::new();
        let (vp, vq) = (g.constant_vec(&[n], p.clone()).unwrap(), g.constant_vec(&[n], q).unwrap());
        let kl = kl_divergence(&mut g, vp, vq).unwrap();
        let same = kl_divergence(&mut g, vp, vp).unwrap();
        prop_assert!(g.scalar(kl) >= 0.0);
        prop_assert_eq!(g.scalar(same), 0.0);
    }

    #[test]
    fn rigid_motion_of_scene_and_camera_preserves_projection(
        r in rotation(),
        q in rotation(),
        s in (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64),
        pts in proptest::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), 1..20),
    ) {
        let cam = aimed_camera(r, [0.0; 3], 12.0, 150.0, (128, 64));
        let s = [s.0, s.1, s.2];
        let moved = cam.transformed(&q, &s).unwrap();
        for (x, y, z) in pts {
            let p = [x, y, z];
            let qp = mat_vec(&q, &p);
            let (u0, v0, d0) = cam.project(&p);
            let (u1, v1, d1) = moved.project(&[qp[0] + s[0], qp[1] + s[1], qp[2] + s[2]]);
            prop_assert!((d0 - d1).abs() < 1e-9);
            prop_assert!((u0 - u1).abs() < 1e-9 * u0.abs().max(1.0));
            prop_assert!((v0 - v1).abs() < 1e-9 * v0.abs().max(1.0));
        }
    }

    #[test]
    fn shrinking_the_image_never_adds_valid_voxels(
        r in rotation(),
        dims in (1usize..8, 1usize..8, 1usize..4),
        (w, h) in (8usize..200, 8usize..200),
        (dw, dh) in (0usize..100, 0usize..100),
    ) {
        let spec = VoxelGridSpec::new([dims.0, dims.1, dims.2], [-2.0, -2.0, -1.0], 0.5).unwrap();
        let cam = aimed_camera(r, [0.0; 3], 3.0, 60.0, (w, h));
        let big = project_voxels(&spec, &cam, (w, h));
        let small = project_voxels(&spec, &cam, (w.saturating_sub(dw).max(1), h.saturating_sub(dh).max(1)));
        for (s, b) in small.valid.iter().zip(&big.valid) {
            prop_assert!(!s || *b);
        }
    }

    #[test]
    fn top_k_matches_sort(scores in finite(-3.0, 3.0, 1..300), k_frac in 0.0..1.0f64, ties in any::<bool>()) {
        let scores: Vec<f64> = if ties { scores.iter().map(|x| x.round()).collect() } else { scores };
        let k = ((scores.len() as f64 * k_frac) as usize).max(1);
        prop_assert_eq!(top_k(&scores, k).unwrap(), common::top_k_by_sort(&scores, k));
        let zeros = vec![0.0; scores.len()];
        let set = geometric_critical(&scores, &zeros, k).unwrap();
        prop_assert!(set.scores.windows(2).all(|w| w[0] >= w[1]));
        let last = *set.scores.last().unwrap();
        for v in (0..scores.len()).filter(|v| !set.indices.contains(v)) {
            prop_assert!(scores[v] <= last);
        }
    }

    #[test]
    fn alignment_is_shift_invariant_and_zero_on_equal_softmaxes(
        a in finite(-5.0, 5.0, 2..60),
        seed in 0u64..1000,
        (ca, cb) in (-20.0..20.0f64, -20.0..20.0f64),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = a.len();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut g = Graph::new();
        let va = g.constant_vec(&[n], a.clone()).unwrap();
        let vb = g.constant_vec(&[n], b.clone()).unwrap();
        let sa = g.constant_vec(&[n], a.iter().map(|x| x + ca).collect()).unwrap();
        let sb = g.constant_vec(&[n], b.iter().map(|x| x + cb).collect()).unwrap();
        let base = alignment_of_fields(&mut g, va, vb, None).unwrap();
        let shifted = alignment_of_fields(&mut g, sa, sb, None).unwrap();
        let equal = alignment_of_fields(&mut g, va, sa, None).unwrap();
        let (base, shifted, equal) = (g.scalar(base), g.scalar(shifted), g.scalar(equal));
        prop_assert!((base - shifted).abs() < 1e-9 * base.max(1.0));
        prop_assert!(equal.abs() < 1e-12);
        prop_assert!(a == b || base > 0.0);
    }

    #[test]
    fn decoupling_matches_pairwise_loop(d in 1usize..=8, c in 1usize..6, seed in 0u64..1000) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cent: Vec<f64> = (0..d * c).map(|_| rng.random_range(0.05..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let mut g = Graph::new();
        let v = g.constant_vec(&[d, c], cent.clone()).unwrap();
        let loss = decoupling_loss(&mut g, v).unwrap();
        let row = |i: usize| &cent[i * c..(i + 1) * c];
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut oracle = 0.0;
        for i in 0..d {
            for j in i + 1..d {
                let dot: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum();
                oracle += dot / (norm(row(i)) * norm(row(j)));
            }
        }
        let pairs = (d * (d - 1) / 2) as f64;
        prop_assert!((g.scalar(loss) - oracle).abs() < 1e-12 * pairs.max(1.0));
        prop_assert!(g.scalar(loss).abs() <= pairs + 1e-12);
    }

    #[test]
    fn aggregation_ignores_centroid_scale(
        (d, c, hw) in (1usize..4, 1usize..5, 1usize..4),
        seed in 0u64..1000,
        scales in finite(0.01, 100.0, 4),
        slice_level in any::<bool>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = ExpansionLayer::new(&mut store, "de", c, d, &mut rng).unwrap();
        let feats: Vec<f64> = (0..c * hw * hw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cent: Vec<f64> = (0..d * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = cent.iter().enumerate().map(|(i, x)| x * scales[i / c]).collect();
        let run = |centroids: Vec<f64>| {
            let mut g = Graph::new();
            let f = g.constant_vec(&[c, hw, hw], feats.clone()).unwrap();
            let vol = dim_expand(&mut g, &store, f, &layer).unwrap();
            let cv = g.constant_vec(&[d, c], centroids).unwrap();
            let out = semantic_aggregate(&mut g, &vol, cv, slice_level, &mut Decisions::new()).unwrap();
            g.value(out).to_vec()
        };
        let (a, b) = (run(cent), run(scaled));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(cfg(64))]

    #[test]
    fn clustering_is_permutation_equivariant(
        n in 8usize..=16,
        d in 1usize..5,
        k_nn in 2usize..5,
        (pt_seed, perm_seed) in (any::<u64>(), any::<u64>()),
    ) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        // Equivariance needs tie-free densities: with duplicates, or with
        // k_nn = 1 where mutual nearest neighbours always tie, the
        // lowest-index rule depends on input order.
        let dim = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(pt_seed);
        let pts: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let pts = &pts[..];
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let shuffled: Vec<f64> = perm.iter().flat_map(|&i| pts[i * dim..(i + 1) * dim].to_vec()).collect();
        let a = dpc_knn_cluster(pts, dim, d, k_nn).unwrap();
        let mut rho = a.density.clone();
        rho.sort_by(f64::total_cmp);
        prop_assume!(rho.windows(2).all(|w| w[0] != w[1]));
        let b = dpc_knn_cluster(&shuffled, dim, d, k_nn).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(b.assignment[j], a.assignment[i]);
        }
        let centers: Vec<usize> = b.centers.iter().map(|&j| perm[j]).collect();
        prop_assert_eq!(centers, a.centers.clone());
        // every point lands in one cluster whose centroid is its members' mean
        for cl in 0..d {
            let members = a.members(cl);
            if members.is_empty() {
                continue;
            }
            for x in 0..dim {
                let mean = members.iter().map(|&m| pts[m * dim + x]).sum::<f64>() / members.len() as f64;
                prop_assert!((a.centroids[cl * dim + x] - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn confusion_merge_and_order_are_exact(
        data in proptest::collection::vec((0u16..5, 0u16..5, any::<bool>()), 1..200),
        split in 0.0..1.0f64,
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let pred: Vec<u16> = data.iter().map(|t| t.0).collect();
        let gt: Vec<u16> = data.iter().map(|t| t.1).collect();
        let valid: Vec<bool> = data.iter().map(|t| t.2).collect();
        let mut whole = ConfusionMatrix::new(5);
        whole.accumulate(&pred, &gt, &valid).unwrap();
        prop_assert_eq!(whole.counts().iter().sum::<u64>(), whole.valid_total());

        let cut = (data.len() as f64 * split) as usize;
        let (mut a, mut b) = (ConfusionMatrix::new(5), ConfusionMatrix::new(5));
        a.accumulate(&pred[..cut], &gt[..cut], &valid[..cut]).unwrap();
        b.accumulate(&pred[cut..], &gt[cut..], &valid[cut..]).unwrap();
        a.merge(&b).unwrap();
        prop_assert_eq!(&a, &whole);

        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let pick = |v: &[u16]| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let mut shuffled = ConfusionMatrix::new(5);
        shuffled.accumulate(&pick(&pred), &pick(&gt), &order.iter().map(|&i| valid[i]).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(shuffled.scene_iou(), whole.scene_iou());
        prop_assert_eq!(shuffled.semantic_miou(), whole.semantic_miou());

        let mut perfect = ConfusionMatrix::new(5);
        perfect.accumulate(&gt, &gt, &valid).unwrap();
        if gt.iter().zip(&valid).any(|(&l, &v)| v && l != 0) {
            prop_assert_eq!(perfect.scene_iou(), 1.0);
            prop_assert_eq!(perfect.semantic_miou().1, 1.0);
        }
    }

    #[test]
    fn sscv_decoding_is_total_and_canonical(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        if let Ok(grid) = decode_sscv(&bytes) {
            prop_assert_eq!(encode_sscv(&grid).unwrap(), bytes);
        }
    }

    #[test]
    fn sscv_damage_is_an_error_not_a_crash(
        dims in (1usize..6, 1usize..6, 1usize..6),
        flips in proptest::collection::vec((any::<usize>(), any::<u8>()), 0..4),
        cut in any::<usize>(),
    ) {
        let n = dims.0 * dims.1 * dims.2;
        let grid = VoxelGrid::new([dims.0, dims.1, dims.2], (0..n as u16).collect(), (0..n).map(|i| i % 3 == 0).collect()).unwrap();
        let mut bytes = encode_sscv(&grid).unwrap();
        prop_assert_eq!(decode_sscv(&bytes).unwrap(), grid);
        for (at, x) in flips {
            let i = at % bytes.len();
            bytes[i] ^= x;
        }
        if let Ok(g) = decode_sscv(&bytes) {
            prop_assert_eq!(encode_sscv(&g).unwrap(), bytes.clone());
        }
        let _ = decode_sscv(&bytes[..cut % (bytes.len() + 1)]);
    }

    #[test]
    fn checkpoint_and_config_readers_are_total(bytes in proptest::collection::vec(any::<u8>(), 0..256), text in ".{0,200}") {
        let mut framed = b"SSCK\x01\x00".to_vec();
        framed.extend_from_slice(&bytes);
        prop_assert!(decode_checkpoint(&bytes).is_err());
        prop_assert!(decode_checkpoint(&framed).is_err());
        let _ = ModelConfig::parse(&text);
    }
}

#[test]
fn orthogonal_loss_descends_for_fifty_steps() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = ExpansionLayer::new(&mut store, "de", 3, 2, &mut rng).unwrap();
        let mut last = f64::INFINITY;
        for step in 0..50 {
            let mut g = Graph::new();
            let f = g.constant_vec(&[3, 2, 2], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
            let vol = dim_expand(&mut g, &store, f, &layer).unwrap();
            let loss = orthogonal_loss(&mut g, &store, &layer, 1.0).unwrap();
            let total = g.sum(vol.rows);
            let total = g.scale(total, 0.0);
            let total = g.add(total, loss).unwrap();
            let value = g.scalar(total);
            assert!(value < last, "seed {seed} step {step}: {value} after {last}");
            last = value;
            let grads = g.backward(total).unwrap();
            let gw = grads.wrt_param(layer.weight).unwrap().to_vec();
            for (w, d) in store.get_mut(layer.weight).tensor_mut().data_mut().iter_mut().zip(gw) {
                *w -= 1e-3 * d;
            }
        }
    }
}

#[test]
fn synthetic_foreground_objects_are_in_view() {
    let ls = LabelSpace::synthetic();
    let spec = VoxelGridSpec::forward_facing([32, 32, 8], 0.4).unwrap();
    let samples = generate_synthetic(3, 8, &spec, &ls, (128, 64)).unwrap();
    let mut seen = vec![false; ls.num_classes()];
    for (si, s) in samples.iter().enumerate() {
        let proj = project_voxels(&spec, &s.camera, s.image_size());
        let n = spec.num_voxels();
        let mut done = vec![false; n];
        for start in 0..n {
            let label = s.gt.labels[start];
            if label != 255 && (label as usize) < seen.len() {
                seen[label as usize] = true;
            }
            if done[start] || !ls.is_foreground(label) {
                continue;
            }
            // one connected foreground object per flood fill
            let mut stack = vec![start];
            done[start] = true;
            let mut in_view = false;
            while let Some(v) = stack.pop() {
                in_view |= proj.valid[v];
                let (i, j, k) = spec.unlinear(v);
                let (i, j, k) = (i as isize, j as isize, k as isize);
                for (di, dj, dk) in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
                    let (a, b, c) = (i + di, j + dj, k + dk);
                    if a < 0 || b < 0 || c < 0 || a >= 32 || b >= 32 || c >= 8 {
                        continue;
                    }
                    let u = spec.linear(a as usize, b as usize, c as usize);
                    if !done[u] && s.gt.labels[u] == label {
                        done[u] = true;
                        stack.push(u);
                    }
                }
            }
            assert!(in_view, "sample {si}: object at voxel {start} is entirely out of view");
        }
        for (v, &fg) in s.foreground_mask.iter().enumerate() {
            assert_eq!(fg, ls.is_foreground(s.gt.labels[v]));
        }
    }
    assert!(seen.iter().all(|&x| x), "classes seen: {seen:?}");
}

#[test]
fn tensor_shape_must_match_data() {
    assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    assert_eq!(Tensor::new(&[2, 3], vec![0.0; 6]).unwrap().len(), 6);
}
