//! Composite operations built only from [`Graph`] primitives.

use super::{Decisions, Graph, Var};
use crate::error::{domain_err, shape_err, Result};

/// Lower clamp applied to both distributions before taking logs in
/// [`kl_divergence`].
pub const KL_CLAMP: f64 = 1e-12;

/// Tolerance on `sum == 1` for [`kl_divergence`] inputs.
pub const KL_NORM_TOL: f64 = 1e-9;

pub fn softmax(g: &mut Graph, x: Var, axis: usize) -> Result<Var> {
    g.softmax(x, axis)
}

/// Single-head attention: row `i` of the result is
/// `softmax(q_i · Kᵀ / sqrt(d)) · V`.
pub fn scaled_dot_attention(g: &mut Graph, queries: Var, keys: Var, values: Var) -> Result<Var> {
    let attn = attention_weights(g, queries, keys)?;
    let (nk, _) = mat_dims(g, keys)?;
    let (nv, _) = mat_dims(g, values)?;
    if nv != nk {
        return Err(shape_err!("attention has {nk} keys but {nv} values"));
    }
    g.matmul(attn, values)
}

/// Row-stochastic `[Nq, Nk]` attention matrix.
pub fn attention_weights(g: &mut Graph, queries: Var, keys: Var) -> Result<Var> {
    let (_, dq) = mat_dims(g, queries)?;
    let (nk, dk) = mat_dims(g, keys)?;
    if dq == 0 || nk == 0 {
        return Err(shape_err!("attention needs d > 0 and at least one key"));
    }
    if dq != dk {
        return Err(shape_err!("query width {dq} differs from key width {dk}"));
    }
    let logits = g.matmul_ex(queries, keys, true)?;
    let logits = g.scale(logits, 1.0 / (dq as f64).sqrt());
    g.softmax(logits, 1)
}

/// `Σ p · ln(p / q)` with both inputs clamped to `[1e-12, 1]` first.
pub fn kl_divergence(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    if g.shape(p) != g.shape(q) {
        return Err(shape_err!(
            "kl operands differ in shape: {:?} vs {:?}",
            g.shape(p),
            g.shape(q)
        ));
    }
    for (name, v) in [("p", p), ("q", q)] {
        let s: f64 = g.value(v).iter().sum();
        if (s - 1.0).abs() > KL_NORM_TOL || g.value(v).iter().any(|x| !x.is_finite()) {
            return Err(domain_err!("kl input {name} sums to {s}, not 1"));
        }
    }
    let pc = g.clamp(p, KL_CLAMP, 1.0);
    let qc = g.clamp(q, KL_CLAMP, 1.0);
    let lp = g.log(pc)?;
    let lq = g.log(qc)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(pc, diff)?;
    Ok(g.sum(terms))
}

/// Mean cross-entropy of `logits[rows[i], :]` against `labels[i]`.
pub fn cross_entropy_rows(g: &mut Graph, logits: Var, rows: &[usize], labels: &[usize]) -> Result<Var> {
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(domain_err!("cross-entropy needs matching non-empty rows and labels"));
    }
    let sel = g.gather_rows(logits, rows)?;
    let ls = g.log_softmax(sel, 1)?;
    let picked = g.pick_cols(ls, labels)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Mean binary cross-entropy with logits over the selected entries of a
/// flat logit vector; `targets[i]` is the label of `logits[rows[i]]`.
pub fn bce_with_logits(g: &mut Graph, logits: Var, rows: &[usize], targets: &[bool]) -> Result<Var> {
    if rows.is_empty() || rows.len() != targets.len() {
        return Err(domain_err!("binary cross-entropy needs matching non-empty rows and targets"));
    }
    let n = g.value(logits).len();
    let col = g.reshape(logits, &[n, 1])?;
    let sel = g.gather_rows(col, rows)?;
    // log σ(x) and log(1 − σ(x)) are the two log-softmax entries of [0, x].
    let zeros = g.constant_vec(&[rows.len(), 1], vec![0.0; rows.len()])?;
    let pair = g.concat_cols(&[zeros, sel])?;
    let ls = g.log_softmax(pair, 1)?;
    let cols: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let picked = g.pick_cols(ls, &cols)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Row-wise argmax with lowest-index tie break.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Differentiable row maximum: gathers the argmax entry of every row.
pub fn max_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let (_, cols) = mat_dims(g, x)?;
    let idx = argmax_rows(g.value(x), cols);
    g.pick_cols(x, &idx)
}

/// `relu` whose active set is a recorded decision: replayed passes keep the
/// same units open even if a perturbation moved them across zero.
pub fn relu_gated(g: &mut Graph, x: Var, dec: &mut Decisions) -> Result<Var> {
    if !dec.is_replaying() && !dec.is_recording() {
        return Ok(g.relu(x));
    }
    let open = dec.choose(|| g.value(x).iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect());
    let mut mask = vec![0.0; g.value(x).len()];
    for i in open {
        mask[i] = 1.0;
    }
    let shape = g.shape(x).to_vec();
    let m = g.constant_vec(&shape, mask)?;
    g.mul(x, m)
}

pub fn mat_dims(g: &Graph, v: Var) -> Result<(usize, usize)> {
    match *g.shape(v) {
        [r, c] => Ok((r, c)),
        ref s => Err(shape_err!("expected a matrix, got {s:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vals(g: &Graph, v: Var) -> Vec<f64> {
        g.value(v).to_vec()
    }

    #[test]
    fn softmax_uniform_and_hand_value() {
        let mut g = Graph::new();
        let x = g.constant_vec(&[3], vec![0.0; 3]).unwrap();
        let s = softmax(&mut g, x, 0).unwrap();
        for v in vals(&g, s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant_vec(&[2], vec![0.0, 3f64.ln()]).unwrap();
        let s = softmax(&mut g, x, 0).unwrap();
        let v = vals(&g, s);
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant_and_rejects_nonfinite() {
        let mut g = Graph::new();
        let x = g.constant_vec(&[2, 3], vec![0.3, -1.0, 2.0, 5.0, 5.0, -7.0]).unwrap();
        let y = g.add_scalar(x, 123.4);
        let a = softmax(&mut g, x, 1).unwrap();
        let b = softmax(&mut g, y, 1).unwrap();
        for (p, q) in vals(&g, a).iter().zip(vals(&g, b)) {
            assert!((p - q).abs() < 1e-12);
        }
        let bad = g.constant_vec(&[2], vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(softmax(&mut g, bad, 0), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn attention_single_key_and_identical_keys() {
        let mut g = Graph::new();
        let q = g.constant_vec(&[3, 2], vec![1.0, 2.0, -3.0, 0.5, 9.0, 9.0]).unwrap();
        let k = g.constant_vec(&[1, 2], vec![0.7, -0.2]).unwrap();
        let v = g.constant_vec(&[1, 3], vec![4.0, 5.0, 6.0]).unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert_eq!(vals(&g, out), vec![4.0, 5.0, 6.0, 4.0, 5.0, 6.0, 4.0, 5.0, 6.0]);

        let k = g.constant_vec(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let v = g.constant_vec(&[2, 1], vec![2.5, 2.5]).unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        for x in vals(&g, out) {
            assert!((x - 2.5).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_sharp_query_selects_value() {
        let mut g = Graph::new();
        let q = g.constant_vec(&[1, 2], vec![100.0, 0.0]).unwrap();
        let k = g.constant_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = g.constant_vec(&[2, 2], vec![1.0, -1.0, 7.0, 3.0]).unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        let o = vals(&g, out);
        assert!((o[0] - 1.0).abs() < 1e-6 && (o[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn attention_shape_errors() {
        let mut g = Graph::new();
        let q = g.constant_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let k = g.constant_vec(&[2, 3], vec![0.0; 6]).unwrap();
        let v = g.constant_vec(&[2, 1], vec![0.0; 2]).unwrap();
        assert!(matches!(scaled_dot_attention(&mut g, q, k, v), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn kl_hand_value_and_identity() {
        let mut g = Graph::new();
        let p = g.constant_vec(&[2], vec![0.25, 0.75]).unwrap();
        let q = g.constant_vec(&[2], vec![0.5, 0.5]).unwrap();
        let kl = kl_divergence(&mut g, p, q).unwrap();
        let expected = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((g.scalar(kl) - expected).abs() < 1e-15);
        assert!((g.scalar(kl) - 0.1308).abs() < 1e-3);
        let same = kl_divergence(&mut g, p, p).unwrap();
        assert_eq!(g.scalar(same), 0.0);
    }

    #[test]
    fn kl_rejects_bad_inputs() {
        let mut g = Graph::new();
        let p = g.constant_vec(&[2], vec![0.25, 0.70]).unwrap();
        let q = g.constant_vec(&[2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(kl_divergence(&mut g, p, q), Err(crate::Error::Domain(_))));
        let r = g.constant_vec(&[3], vec![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(kl_divergence(&mut g, q, r), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn confident_logits_have_tiny_losses() {
        let mut g = Graph::new();
        let logits = g.constant_vec(&[2, 3], vec![10.0, -10.0, -10.0, -10.0, -10.0, 10.0]).unwrap();
        let ce = cross_entropy_rows(&mut g, logits, &[0, 1], &[0, 2]).unwrap();
        assert!(g.scalar(ce) < 1e-4);
        let bl = g.constant_vec(&[3], vec![10.0, -10.0, 10.0]).unwrap();
        let bce = bce_with_logits(&mut g, bl, &[0, 1, 2], &[true, false, true]).unwrap();
        assert!(g.scalar(bce) < 1e-4);
        let hand = (1.0 + (-10f64).exp()).ln();
        assert!((g.scalar(bce) - hand).abs() < 1e-15);
    }
}
