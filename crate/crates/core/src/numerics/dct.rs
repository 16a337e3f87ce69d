//! Orthonormal 2-D DCT-II and its inverse (DCT-III), separable, computed in f64.

use std::f64::consts::PI;

use super::{NumericsError, Tensor};

fn basis(n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for k in 0..n {
        let alpha = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            c[k * n + i] = alpha * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    c
}

// out = L · X · Rᵀ where L is [h,h], R is [w,w]; `lt`/`rt` select transposes.
fn sandwich(x: &[f32], h: usize, w: usize, l: &[f64], lt: bool, r: &[f64], rt: bool) -> Vec<f32> {
    let lidx = |a: usize, b: usize| if lt { l[b * h + a] } else { l[a * h + b] };
    let ridx = |a: usize, b: usize| if rt { r[b * w + a] } else { r[a * w + b] };
    let mut tmp = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = (0..w).map(|k| x[i * w + k] as f64 * ridx(j, k)).sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = (0..h).map(|k| lidx(i, k) * tmp[k * w + j]).sum::<f64>() as f32;
        }
    }
    out
}

/// Forward orthonormal 2-D DCT-II of `x[h,w]`.
pub fn dct2(x: &Tensor) -> Result<Tensor, NumericsError> {
    let [h, w] = x.dims2("dct2")?;
    let (bh, bw) = (basis(h), basis(w));
    Tensor::new(&[h, w], sandwich(x.data(), h, w, &bh, false, &bw, false))
}

/// Inverse of [`dct2`].
pub fn idct2(coef: &Tensor) -> Result<Tensor, NumericsError> {
    let [h, w] = coef.dims2("idct2")?;
    let (bh, bw) = (basis(h), basis(w));
    Tensor::new(&[h, w], sandwich(coef.data(), h, w, &bh, true, &bw, true))
}
