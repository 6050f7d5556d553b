//! Visual-token selector: emphasize suspicious tokens by their significance,
//! pool them into a few query tokens, and let those queries attend back over
//! the crop's final tokens with one multi-head cross-attention block.

use crate::autodiff::{AutodiffError, Real, Tape, Tensor, Var};
use crate::params::AttentionTensors;

/// Pooled queries of one crop.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledQueries<F> {
    /// `[h·w × D_enc]`.
    pub q: Tensor<F>,
    /// `[h·w]`, pooled significance.
    pub pooled_m: Tensor<F>,
}

/// Splits `n` positions into `parts` contiguous runs; the first `n % parts`
/// runs are one longer.
fn partition(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let (base, extra) = (n / parts, n % parts);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Average-pooling operator over a `g×g` grid as a `[h·w × g²]` matrix. Cell
/// `(r, c)` is row `r·w + c`.
pub fn pool_matrix<F: Real>(g: usize, h: usize, w: usize) -> Result<Tensor<F>, AutodiffError> {
    if h == 0 || w == 0 || h > g || w > g {
        return Err(AutodiffError::InvalidArgument(format!("cannot pool a {g}x{g} grid into {h}x{w} cells")));
    }
    let t = g * g;
    let mut m = vec![F::zero(); h * w * t];
    for (ci, rows) in partition(g, h).into_iter().enumerate() {
        for (cj, cols) in partition(g, w).into_iter().enumerate() {
            let inv = F::from_f64(1.0 / (rows.len() * cols.len()) as f64);
            let cell = ci * w + cj;
            for r in rows.clone() {
                for c in cols.clone() {
                    m[cell * t + r * g + c] = inv;
                }
            }
        }
    }
    Tensor::new(vec![h * w, t], m)
}

/// `q = P(v ⊙ m)` and `P(m)`, with `pool` from [`pool_matrix`].
pub fn emphasize_pool<F: Real>(tape: &mut Tape<F>, v_final: Var, m: Var, pool: Var) -> Result<(Var, Var), AutodiffError> {
    let emphasized = tape.row_scale(v_final, m)?;
    let q = tape.linear(pool, emphasized, None)?;
    let t = tape.shape(m)[0];
    let m_col = tape.reshape(m, &[t, 1])?;
    let pm = tape.linear(pool, m_col, None)?;
    let cells = tape.shape(pm)[0];
    let pm = tape.reshape(pm, &[cells])?;
    Ok((q, pm))
}

/// Single-block multi-head cross-attention with the pooled queries as query
/// and the crop tokens as key and value. Heads are concatenated and
/// projected by `wo`; `residual` adds the queries back.
pub fn qformer_attend<F: Real>(
    tape: &mut Tape<F>,
    q: Var,
    v_final: Var,
    att: &AttentionTensors<Var>,
    n_heads: usize,
    residual: bool,
) -> Result<Var, AutodiffError> {
    let d = tape.shape(q)[1];
    if n_heads == 0 || d % n_heads != 0 || tape.shape(v_final).get(1) != Some(&d) {
        return Err(AutodiffError::ShapeMismatch {
            op: "qformer_attend",
            detail: format!("q {:?}, kv {:?}, heads {}", tape.shape(q), tape.shape(v_final), n_heads),
        });
    }
    let dh = d / n_heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let qp = tape.linear(q, att.wq, None)?;
    let kp = tape.linear(v_final, att.wk, None)?;
    let vp = tape.linear(v_final, att.wv, None)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (qp, kp, vp)
        } else {
            (tape.slice_cols(qp, h * dh, dh)?, tape.slice_cols(kp, h * dh, dh)?, tape.slice_cols(vp, h * dh, dh)?)
        };
        let logits = tape.matmul_t(qh, kh)?;
        let logits = tape.scale(logits, scale)?;
        let weights = tape.softmax_rows(logits)?;
        heads.push(tape.linear(weights, vh, None)?);
    }
    let joined = if n_heads == 1 { heads[0] } else { tape.concat(&heads, 1)? };
    let out = tape.linear(joined, att.wo, None)?;
    if residual {
        tape.add(out, q)
    } else {
        Ok(out)
    }
}

/// Selected tokens of one crop: pooled queries refined by cross-attention.
pub fn select_crop<F: Real>(
    tape: &mut Tape<F>,
    v_final: Var,
    m: Var,
    pool: Var,
    att: &AttentionTensors<Var>,
    n_heads: usize,
    residual: bool,
) -> Result<(Var, Var), AutodiffError> {
    let (q, pm) = emphasize_pool(tape, v_final, m, pool)?;
    let v_s = qformer_attend(tape, q, v_final, att, n_heads, residual)?;
    Ok((v_s, pm))
}

/// Plain-value form of [`emphasize_pool`] for a `g×g` grid.
pub fn emphasize_pool_values<F: Real>(v_final: &Tensor<F>, m: &Tensor<F>, g: usize, h: usize, w: usize) -> Result<PooledQueries<F>, AutodiffError> {
    if h * w > g * g {
        return Err(AutodiffError::InvalidArgument(format!("{h}x{w} cells exceed {} tokens", g * g)));
    }
    let mut tape = Tape::new();
    let pool = tape.constant(pool_matrix(g, h, w)?);
    let v = tape.constant(v_final.clone());
    let mv = tape.constant(m.clone());
    let (q, pm) = emphasize_pool(&mut tape, v, mv, pool)?;
    Ok(PooledQueries { q: tape.value(q).clone(), pooled_m: tape.value(pm).clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn ragged_partition_puts_larger_cells_first() {
        let p = partition(27, 2);
        assert_eq!(p, vec![0..14, 14..27]);
        let m = pool_matrix::<f64>(27, 2, 2).unwrap();
        assert_eq!(m.shape(), &[4, 729]);
        for cell in 0..4 {
            let s: f64 = m.row(cell).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((m.at(0, 0) - 1.0 / 196.0).abs() < 1e-15);
        assert!((m.at(3, 728) - 1.0 / 169.0).abs() < 1e-15);
        assert!(pool_matrix::<f64>(2, 3, 1).is_err());
    }

    #[test]
    fn neutral_and_zero_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = rand_tensor(&mut rng, &[36, 5], -1.0, 1.0);
        let ones = emphasize_pool_values(&v, &Tensor::full(&[36], 1.0), 6, 2, 2).unwrap();
        for cell in 0..4 {
            let (r0, c0) = ((cell / 2) * 3, (cell % 2) * 3);
            for k in 0..5 {
                let mut s = 0.0;
                for r in r0..r0 + 3 {
                    for c in c0..c0 + 3 {
                        s += v.at(r * 6 + c, k);
                    }
                }
                assert!((ones.q.at(cell, k) - s / 9.0).abs() < 1e-12);
            }
        }
        let zeros = emphasize_pool_values(&v, &Tensor::zeros(&[36]), 6, 2, 2).unwrap();
        assert!(zeros.q.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hand_weighted_average() {
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let m = Tensor::vector(vec![1.0, 0.0, 0.0, 1.0]);
        let out = emphasize_pool_values(&v, &m, 2, 1, 1).unwrap();
        assert_eq!(out.q.data(), &[0.25, 0.0]);
        assert_eq!(out.pooled_m.data(), &[0.5]);
        let out = emphasize_pool_values(&v, &Tensor::vector(vec![1.0, 1.0, 0.0, 0.0]), 2, 1, 1).unwrap();
        assert_eq!(out.q.data(), &[0.25, 0.25]);
    }

    #[test]
    fn constant_mask_pools_to_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = rand_tensor(&mut rng, &[49, 3], -1.0, 1.0);
        let out = emphasize_pool_values(&v, &Tensor::full(&[49], 0.375), 7, 2, 2).unwrap();
        assert!(out.pooled_m.data().iter().all(|&x| x == 0.375));
    }

    #[test]
    fn pooling_is_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (v1, v2) = (rand_tensor(&mut rng, &[16, 4], -1.0, 1.0), rand_tensor(&mut rng, &[16, 4], -1.0, 1.0));
            let (m1, m2) = (rand_tensor(&mut rng, &[16], 0.0, 1.0), rand_tensor(&mut rng, &[16], 0.0, 1.0));
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let lin_v = Tensor::new(vec![16, 4], v1.data().iter().zip(v2.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let lhs = emphasize_pool_values(&lin_v, &m1, 4, 2, 2).unwrap().q;
            let r1 = emphasize_pool_values(&v1, &m1, 4, 2, 2).unwrap().q;
            let r2 = emphasize_pool_values(&v2, &m1, 4, 2, 2).unwrap().q;
            for i in 0..lhs.numel() {
                assert!((lhs.data()[i] - (a * r1.data()[i] + b * r2.data()[i])).abs() < 1e-6);
            }
            let lin_m = Tensor::vector(m1.data().iter().zip(m2.data()).map(|(x, y)| a * x + b * y).collect());
            let lhs = emphasize_pool_values(&v1, &lin_m, 4, 2, 2).unwrap().q;
            let r2 = emphasize_pool_values(&v1, &m2, 4, 2, 2).unwrap().q;
            for i in 0..lhs.numel() {
                assert!((lhs.data()[i] - (a * r1.data()[i] + b * r2.data()[i])).abs() < 1e-6);
            }
        }
    }

    fn attend(q: &Tensor<f64>, kv: &Tensor<f64>, att: &AttentionTensors<Tensor<f64>>, heads: usize, residual: bool) -> Tensor<f64> {
        let mut tape = Tape::new();
        let (qv, kvv) = (tape.constant(q.clone()), tape.constant(kv.clone()));
        let a = att_vars(&mut tape, att);
        let out = qformer_attend(&mut tape, qv, kvv, &a, heads, residual).unwrap();
        tape.value(out).clone()
    }

    fn att_vars(tape: &mut Tape<f64>, att: &AttentionTensors<Tensor<f64>>) -> AttentionTensors<Var> {
        AttentionTensors {
            wq: tape.constant(att.wq.clone()),
            wk: tape.constant(att.wk.clone()),
            wv: tape.constant(att.wv.clone()),
            wo: tape.constant(att.wo.clone()),
        }
    }

    #[test]
    fn identical_values_give_that_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kv = Tensor::new(vec![10, 8], (0..10).flat_map(|_| u.clone()).collect()).unwrap();
        let q = rand_tensor(&mut rng, &[4, 8], -1.0, 1.0);
        let att = AttentionTensors { wq: rand_tensor(&mut rng, &[8, 8], -1.0, 1.0), wk: rand_tensor(&mut rng, &[8, 8], -1.0, 1.0), wv: Tensor::eye(8), wo: Tensor::eye(8) };
        let out = attend(&q, &kv, &att, 4, false);
        for i in 0..4 {
            for k in 0..8 {
                assert!((out.at(i, k) - u[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_projection_is_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let kv = rand_tensor(&mut rng, &[6, 4], -1.0, 1.0);
        let q = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let att = AttentionTensors { wq: Tensor::zeros(&[4, 4]), wk: rand_tensor(&mut rng, &[4, 4], -1.0, 1.0), wv: Tensor::eye(4), wo: Tensor::eye(4) };
        let out = attend(&q, &kv, &att, 2, false);
        for i in 0..4 {
            for k in 0..4 {
                let mean = (0..6).map(|t| kv.at(t, k)).sum::<f64>() / 6.0;
                assert!((out.at(i, k) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_softmax_single_head() {
        // Logits (ln 2, 0) after the 1/√d scale with d = 1.
        let q = Tensor::from_rows(&[vec![2f64.ln()]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let mut tape = Tape::<f64>::new();
        let (qv, kv) = (tape.constant(q), tape.constant(k));
        let logits = tape.matmul_t(qv, kv).unwrap();
        let w = tape.softmax_rows(logits).unwrap();
        assert!((tape.value(w).data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((tape.value(w).data()[1] - 1.0 / 3.0).abs() < 1e-12);

        // Same case through the full block: V₁ = 3, V₂ = 6 via Wv on the keys.
        let kv_tokens = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let att = AttentionTensors {
            wq: Tensor::from_rows(&[vec![1.0]]).unwrap(),
            wk: Tensor::from_rows(&[vec![1.0]]).unwrap(),
            wv: Tensor::from_rows(&[vec![1.0]]).unwrap(),
            wo: Tensor::from_rows(&[vec![1.0]]).unwrap(),
        };
        let out = attend(&Tensor::from_rows(&[vec![2f64.ln()]]).unwrap(), &kv_tokens, &att, 1, false);
        assert!((out.at(0, 0) - (2.0 * 1.0 + 0.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_stay_in_value_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let kv = rand_tensor(&mut rng, &[9, 4], -2.0, 2.0);
            let q = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
            let att = AttentionTensors { wq: rand_tensor(&mut rng, &[4, 4], -1.0, 1.0), wk: rand_tensor(&mut rng, &[4, 4], -1.0, 1.0), wv: Tensor::eye(4), wo: Tensor::eye(4) };
            let out = attend(&q, &kv, &att, 1, false);
            for k in 0..4 {
                let col: Vec<f64> = (0..9).map(|t| kv.at(t, k)).collect();
                let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
                for i in 0..4 {
                    assert!(out.at(i, k) >= lo - 1e-12 && out.at(i, k) <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn residual_adds_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let kv = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
        let q = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let att = AttentionTensors { wq: rand_tensor(&mut rng, &[4, 4], -1.0, 1.0), wk: rand_tensor(&mut rng, &[4, 4], -1.0, 1.0), wv: rand_tensor(&mut rng, &[4, 4], -1.0, 1.0), wo: rand_tensor(&mut rng, &[4, 4], -1.0, 1.0) };
        let plain = attend(&q, &kv, &att, 2, false);
        let res = attend(&q, &kv, &att, 2, true);
        for i in 0..16 {
            assert!((res.data()[i] - plain.data()[i] - q.data()[i]).abs() < 1e-12);
        }
    }
}
