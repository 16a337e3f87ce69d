//! Composite layers recorded on a [`Tape`], and eager wrappers for one-off use.

use super::{NumericsError, Tape, Tensor, Var};

/// Projection weights of a single-head cross-attention.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// `softmax(q·Wq·(kv·Wk)ᵀ / √d) · (kv·Wv)`.
///
/// `q` is `[n_q, d_q]`, `kv` is `[n_kv, d_kv]`; `Wq: [d_q, d]`, `Wk, Wv: [d_kv, d]`.
pub fn cross_attention(tape: &mut Tape, q: Var, kv: Var, w: AttentionVars) -> Result<Var, NumericsError> {
    let (scores, v) = attention_scores(tape, q, kv, w)?;
    tape.matmul(scores, v)
}

/// Attention weights `[n_q, n_kv]` plus the projected values.
pub fn attention_scores(tape: &mut Tape, q: Var, kv: Var, w: AttentionVars) -> Result<(Var, Var), NumericsError> {
    let qp = tape.matmul(q, w.wq)?;
    let kp = tape.matmul(kv, w.wk)?;
    let vp = tape.matmul(kv, w.wv)?;
    let d = tape.shape(qp)[1];
    if tape.shape(kp)[1] != d {
        return Err(NumericsError::ShapeMismatch {
            op: "cross_attention",
            lhs: tape.shape(qp).to_vec(),
            rhs: tape.shape(kp).to_vec(),
        });
    }
    let kt = tape.transpose(kp)?;
    let logits = tape.matmul(qp, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f32).sqrt())?;
    let weights = tape.softmax_rows(logits)?;
    Ok((weights, vp))
}

/// `x[n, d_in] · w[d_in, d_out] + b[d_out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// `[c, h, w]` feature map → `[h*w, c]` token rows.
pub fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
    let [c, h, w] = tape.value(x).dims3("to_tokens")?;
    let flat = tape.reshape(x, &[c, h * w])?;
    tape.transpose(flat)
}

/// `[h*w, c]` token rows → `[c, h, w]` feature map.
pub fn from_tokens(tape: &mut Tape, t: Var, h: usize, w: usize) -> Result<Var, NumericsError> {
    let [_, c] = tape.value(t).dims2("from_tokens")?;
    let flat = tape.transpose(t)?;
    tape.reshape(flat, &[c, h, w])
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let (a, b) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let out = tape.matmul(a, b)?;
    Ok(tape.value(out).clone())
}

pub fn conv2d(x: &Tensor, k: &Tensor) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let (x, k) = (tape.leaf(x.clone()), tape.leaf(k.clone()));
    let out = tape.conv2d(x, k)?;
    Ok(tape.value(out).clone())
}

/// Group norm with unit scale and zero shift.
pub fn group_norm(x: &Tensor, groups: usize, eps: f32) -> Result<Tensor, NumericsError> {
    let c = x.shape().first().copied().unwrap_or(0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let g = tape.leaf(Tensor::full(&[c.max(1)], 1.0));
    let b = tape.leaf(Tensor::zeros(&[c.max(1)]));
    let out = tape.group_norm(xv, g, b, groups, eps)?;
    Ok(tape.value(out).clone())
}

/// Eager cross-attention; returns `(output, attention weights)`.
pub fn cross_attention_eager(
    q: &Tensor,
    kv: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
) -> Result<(Tensor, Tensor), NumericsError> {
    let mut tape = Tape::new();
    let qv = tape.leaf(q.clone());
    let kvv = tape.leaf(kv.clone());
    let w = AttentionVars {
        wq: tape.leaf(wq.clone()),
        wk: tape.leaf(wk.clone()),
        wv: tape.leaf(wv.clone()),
    };
    let (scores, v) = attention_scores(&mut tape, qv, kvv, w)?;
    let out = tape.matmul(scores, v)?;
    Ok((tape.value(out).clone(), tape.value(scores).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a.get(&[i, p]) as f64 * b.get(&[p, j]) as f64;
                }
                out.set(&[i, j], s as f32);
            }
        }
        out
    }

    fn naive_conv(x: &Tensor, k: &Tensor) -> Tensor {
        let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cout = k.shape()[0];
        let mut out = Tensor::zeros(&[cout, h, w]);
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0f64;
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x.get(&[ci, iy as usize, ix as usize]) as f64
                                    * k.get(&[co, ci, ky, kx]) as f64;
                            }
                        }
                    }
                    out.set(&[co, y, xx], s as f32);
                }
            }
        }
        out
    }

    #[test]
    fn identity_matmul() {
        let mut rng = seeded_rng(1);
        let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
    }

    #[test]
    fn permutation_matmul() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(matmul(&a, &p).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn random_matmul_matches_triple_loop() {
        let mut rng = seeded_rng(2);
        let a = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-6);
    }

    #[test]
    fn matmul_shape_mismatch() {
        assert!(matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn delta_kernel_sums_channels() {
        let mut rng = seeded_rng(3);
        let x = Tensor::randn(&[3, 5, 6], 1.0, &mut rng);
        let mut k = Tensor::zeros(&[1, 3, 3, 3]);
        for ci in 0..3 {
            k.set(&[0, ci, 1, 1], 1.0);
        }
        let y = conv2d(&x, &k).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                let s: f32 = (0..3).map(|c| x.get(&[c, i, j])).sum();
                assert!((y.get(&[0, i, j]) - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let (v, cin) = (0.7f32, 2);
        let x = Tensor::full(&[cin, 6, 6], v);
        let k = Tensor::full(&[1, cin, 3, 3], 1.0);
        let y = conv2d(&x, &k).unwrap();
        for i in 1..5 {
            for j in 1..5 {
                assert!((y.get(&[0, i, j]) - 9.0 * v * cin as f32).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn random_conv_matches_direct_loops() {
        let mut rng = seeded_rng(4);
        let x = Tensor::randn(&[3, 7, 5], 1.0, &mut rng);
        let k = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        assert!(conv2d(&x, &k).unwrap().max_abs_diff(&naive_conv(&x, &k)) < 1e-5);
    }

    #[test]
    fn conv_channel_mismatch() {
        assert!(conv2d(&Tensor::zeros(&[2, 4, 4]), &Tensor::zeros(&[1, 3, 3, 3])).is_err());
    }

    #[test]
    fn group_norm_constant_input_is_zero() {
        let y = group_norm(&Tensor::full(&[4, 3, 3], 2.5), 2, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_single_group_matches_direct_statistics() {
        let mut rng = seeded_rng(5);
        let x = Tensor::randn(&[4, 3, 3], 2.0, &mut rng);
        let n = x.numel() as f64;
        let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let y = group_norm(&x, 1, 1e-5).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            let expect = (*a as f64 - mean) / (var + 1e-5).sqrt();
            assert!((expect - *b as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn group_norm_groups_are_centered() {
        let mut rng = seeded_rng(6);
        let x = Tensor::randn(&[8, 4, 4], 3.0, &mut rng);
        let y = group_norm(&x, 4, 1e-5).unwrap();
        for g in y.data().chunks(2 * 16) {
            let m = g.iter().map(|&v| v as f64).sum::<f64>() / g.len() as f64;
            assert!(m.abs() < 1e-6, "group mean {m}");
        }
        assert!(group_norm(&x, 3, 1e-5).is_err());
    }

    #[test]
    fn single_key_attention_returns_value_row() {
        let mut rng = seeded_rng(7);
        let q = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let kv = Tensor::randn(&[1, 3], 1.0, &mut rng);
        let eye = Tensor::eye(3);
        let (out, w) = cross_attention_eager(&q, &kv, &eye, &eye, &eye).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
        for row in out.data().chunks(3) {
            assert_eq!(row, kv.data());
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = seeded_rng(8);
        let q = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let kv = Tensor::randn(&[9, 5], 1.0, &mut rng);
        let wq = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let wk = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let wv = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let (out, w) = cross_attention_eager(&q, &kv, &wq, &wk, &wv).unwrap();
        assert_eq!(out.shape(), &[6, 3]);
        for row in w.data().chunks(9) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hand_sized_attention_matches_scalar_arithmetic() {
        let q = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.5, -1.0]).unwrap();
        let kv = Tensor::new(&[2, 2], vec![2.0, 1.0, -1.0, 3.0]).unwrap();
        let eye = Tensor::eye(2);
        let (out, _) = cross_attention_eager(&q, &kv, &eye, &eye, &eye).unwrap();
        let s = 1.0f64 / 2f64.sqrt();
        for (qi, q_row) in [[1.0f64, 0.0], [0.5, -1.0]].iter().enumerate() {
            let l0 = (q_row[0] * 2.0 + q_row[1] * 1.0) * s;
            let l1 = (q_row[0] * -1.0 + q_row[1] * 3.0) * s;
            let (e0, e1) = (l0.exp(), l1.exp());
            let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            let expect = [p0 * 2.0 + p1 * -1.0, p0 * 1.0 + p1 * 3.0];
            for d in 0..2 {
                assert!((out.get(&[qi, d]) as f64 - expect[d]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_dim_mismatch() {
        let q = Tensor::zeros(&[2, 2]);
        let kv = Tensor::zeros(&[2, 3]);
        assert!(cross_attention_eager(&q, &kv, &Tensor::eye(2), &Tensor::eye(2), &Tensor::eye(3)).is_err());
    }
}
