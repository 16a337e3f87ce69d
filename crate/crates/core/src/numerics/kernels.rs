//! Slice-level kernels shared by the eager ops and the tape.
//!
//! Everything here is single-threaded with a fixed summation order, so results
//! are bit-reproducible for identical inputs.

pub fn transpose(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// `c (+)= a[m,k] · b[k,n]`, all row-major.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(0.0);
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    }
}

/// `c (+)= a · bᵀ` with `a[m,k]`, `b[n,k]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    let mut bt = vec![0.0; k * n];
    transpose(b, n, k, &mut bt);
    gemm(m, k, n, a, &bt, c, accumulate);
}

/// `c (+)= aᵀ · b` with `a[k,m]`, `b[k,n]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    let mut at = vec![0.0; k * m];
    transpose(a, k, m, &mut at);
    gemm(m, k, n, &at, b, c, accumulate);
}

/// Unfolds `x[c,h,w]` into `cols[c*9, h*w]` for a 3×3, stride-1, pad-1 kernel.
pub fn im2col3(x: &[f32], c: usize, h: usize, w: usize, cols: &mut [f32]) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * 9 * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    let drow = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            drow[0] = 0.0;
                            drow[1..].copy_from_slice(&srow[..w - 1]);
                        }
                        1 => drow.copy_from_slice(srow),
                        _ => {
                            drow[..w - 1].copy_from_slice(&srow[1..]);
                            drow[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatters `cols[c*9, h*w]` back onto `dx[c,h,w]` (accumulating).
pub fn col2im3(cols: &[f32], c: usize, h: usize, w: usize, dx: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                let src = &cols[row..row + hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[oy * w..(oy + 1) * w];
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, s) in drow[..w - 1].iter_mut().zip(&srow[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, s) in drow[1..].iter_mut().zip(&srow[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-group mean and reciprocal standard deviation, accumulated in f64.
pub fn group_stats(x: &[f32], groups: usize, eps: f64) -> Vec<(f64, f64)> {
    let per = x.len() / groups;
    (0..groups)
        .map(|g| {
            let s = &x[g * per..(g + 1) * per];
            let mean = s.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
            let var = s
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / per as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

/// Row-wise softmax over `x[rows, cols]` in place; max-shifted, f64 normaliser.
pub fn softmax_rows(x: &mut [f32], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        let inv = (1.0 / sum) as f32;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

pub fn avg_pool(x: &[f32], c: usize, h: usize, w: usize, f: usize) -> Vec<f32> {
    let (oh, ow) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f32;
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0f32;
                for dy in 0..f {
                    let row = (ci * h + oy * f + dy) * w + ox * f;
                    s += x[row..row + f].iter().sum::<f32>();
                }
                out[(ci * oh + oy) * ow + ox] = s * inv;
            }
        }
    }
    out
}

pub fn upsample_nearest(x: &[f32], c: usize, h: usize, w: usize, f: usize) -> Vec<f32> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            let src = &x[(ci * h + oy / f) * w..(ci * h + oy / f + 1) * w];
            let dst = &mut out[(ci * oh + oy) * ow..(ci * oh + oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / f];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w) = (2, 4, 5);
        let x: Vec<f32> = (0..c * h * w).map(|i| ((i * 7) % 13) as f32 - 6.0).collect();
        let y: Vec<f32> = (0..c * 9 * h * w).map(|i| ((i * 5) % 11) as f32 - 5.0).collect();
        let mut cols = vec![0.0; c * 9 * h * w];
        im2col3(&x, c, h, w, &mut cols);
        let mut back = vec![0.0; c * h * w];
        col2im3(&y, c, h, w, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a * *b) as f64).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a * *b) as f64).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn pool_then_upsample_preserves_mean() {
        let x: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let p = avg_pool(&x, 1, 4, 4, 2);
        assert_eq!(p, vec![2.5, 4.5, 10.5, 12.5]);
        let u = upsample_nearest(&p, 1, 2, 2, 2);
        assert_eq!(u.iter().sum::<f32>(), x.iter().sum::<f32>());
    }
}
