//! Slice-level numeric kernels shared by the tape and the plain-tensor paths.
//!
//! Every kernel is generic over the float type so the same loop order can be
//! evaluated in `f64` by the finite-difference checker. Spatial tensors use
//! `[H, W, C]` row-major layout; convolution weights are `[3, 3, Cin, Cout]`.

use num_traits::Float;

/// `out = op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// With `ta`, `a` is stored `k×m`; with `tb`, `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|o| *o = T::zero());
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o = *o + av * bv;
                    }
                }
            }
        }
        _ => {
            let ai = |i: usize, p: usize| if ta { a[p * m + i] } else { a[i * k + p] };
            let bi = |p: usize, j: usize| if tb { b[j * k + p] } else { b[p * n + j] };
            for i in 0..m {
                for p in 0..k {
                    let av = ai(i, p);
                    for j in 0..n {
                        out[i * n + j] = out[i * n + j] + av * bi(p, j);
                    }
                }
            }
        }
    }
}

/// 3×3 convolution, stride 1, zero padding, with per-output-channel bias.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3<T: Float>(
    x: &[T],
    w: &[T],
    bias: &[T],
    out: &mut [T],
    h: usize,
    wd: usize,
    cin: usize,
    cout: usize,
) {
    for y in 0..h {
        for xx in 0..wd {
            let o = &mut out[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
            o.copy_from_slice(bias);
            for ky in 0..3 {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = xx as isize + kx as isize - 1;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let xbase = (iy as usize * wd + ix as usize) * cin;
                    let wbase = (ky * 3 + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x[xbase + ci];
                        let wrow = &w[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (acc, &wv) in o.iter_mut().zip(wrow) {
                            *acc = *acc + xv * wv;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates the gradients of [`conv3x3`] into whichever of `dx`, `dw`,
/// `db` are requested.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Float>(
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    h: usize,
    wd: usize,
    cin: usize,
    cout: usize,
) {
    if let Some(db) = db {
        for px in 0..h * wd {
            for co in 0..cout {
                db[co] = db[co] + dout[px * cout + co];
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    for y in 0..h {
        for xx in 0..wd {
            let g = &dout[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
            for ky in 0..3 {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = xx as isize + kx as isize - 1;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let xbase = (iy as usize * wd + ix as usize) * cin;
                    let wbase = (ky * 3 + kx) * cin * cout;
                    for ci in 0..cin {
                        let wrow = &w[wbase + ci * cout..wbase + (ci + 1) * cout];
                        if let Some(dx) = dx.as_deref_mut() {
                            let mut acc = T::zero();
                            for (&gv, &wv) in g.iter().zip(wrow) {
                                acc = acc + gv * wv;
                            }
                            dx[xbase + ci] = dx[xbase + ci] + acc;
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            let xv = x[xbase + ci];
                            let drow = &mut dw[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (d, &gv) in drow.iter_mut().zip(g) {
                                *d = *d + xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour ×2 upsampling of an `[h, w, c]` map.
pub fn upsample2<T: Float>(x: &[T], out: &mut [T], h: usize, w: usize, c: usize) {
    let w2 = 2 * w;
    for y in 0..2 * h {
        for xx in 0..w2 {
            let src = ((y / 2) * w + xx / 2) * c;
            let dst = (y * w2 + xx) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
}

pub fn upsample2_backward<T: Float>(dout: &[T], dx: &mut [T], h: usize, w: usize, c: usize) {
    let w2 = 2 * w;
    for y in 0..2 * h {
        for xx in 0..w2 {
            let src = ((y / 2) * w + xx / 2) * c;
            let dst = (y * w2 + xx) * c;
            for ch in 0..c {
                dx[src + ch] = dx[src + ch] + dout[dst + ch];
            }
        }
    }
}

/// Forward spatial difference along `axis` (0 = rows, 1 = columns).
pub fn diff<T: Float>(x: &[T], out: &mut [T], h: usize, w: usize, c: usize, axis: usize) {
    let (oh, ow) = diff_dims(h, w, axis);
    let (dy, dxx) = if axis == 0 { (1, 0) } else { (0, 1) };
    for y in 0..oh {
        for xx in 0..ow {
            for ch in 0..c {
                let a = x[(y * w + xx) * c + ch];
                let b = x[((y + dy) * w + xx + dxx) * c + ch];
                out[(y * ow + xx) * c + ch] = b - a;
            }
        }
    }
}

pub fn diff_backward<T: Float>(dout: &[T], dx: &mut [T], h: usize, w: usize, c: usize, axis: usize) {
    let (oh, ow) = diff_dims(h, w, axis);
    let (dy, dxx) = if axis == 0 { (1, 0) } else { (0, 1) };
    for y in 0..oh {
        for xx in 0..ow {
            for ch in 0..c {
                let g = dout[(y * ow + xx) * c + ch];
                let ia = (y * w + xx) * c + ch;
                let ib = ((y + dy) * w + xx + dxx) * c + ch;
                dx[ia] = dx[ia] - g;
                dx[ib] = dx[ib] + g;
            }
        }
    }
}

pub fn diff_dims(h: usize, w: usize, axis: usize) -> (usize, usize) {
    if axis == 0 {
        (h.saturating_sub(1), w)
    } else {
        (h, w.saturating_sub(1))
    }
}

pub fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn matmul_transpose_flags_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let expect = naive_matmul(&a, &b, m, k, n);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut out = vec![0.0; m * n];
            matmul(aa, bb, &mut out, m, k, n, ta, tb);
            for (x, y) in out.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12, "ta={ta} tb={tb}");
            }
        }
    }

    #[test]
    fn conv_of_zero_input_is_bias_everywhere() {
        let (h, w, cin, cout) = (4, 5, 2, 3);
        let x = vec![0.0f32; h * w * cin];
        let wts = vec![0.5f32; 9 * cin * cout];
        let bias = [0.1f32, -0.2, 0.3];
        let mut out = vec![0.0; h * w * cout];
        conv3x3(&x, &wts, &bias, &mut out, h, w, cin, cout);
        for px in out.chunks(cout) {
            assert_eq!(px, &bias);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let (h, w, c) = (3, 3, 1);
        let x: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let mut wts = vec![0.0f32; 9];
        wts[4] = 1.0;
        let mut out = vec![0.0; 9];
        conv3x3(&x, &wts, &[0.0], &mut out, h, w, c, c);
        assert_eq!(out, x);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = [1.0f32, 2.0, 3.0, 4.0];
        let mut out = [0.0f32; 16];
        upsample2(&x, &mut out, 2, 2, 1);
        assert_eq!(
            out,
            [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn diff_along_both_axes() {
        // 2x3 single channel: [[1,2,4],[7,11,16]]
        let x = [1.0f32, 2.0, 4.0, 7.0, 11.0, 16.0];
        let mut rows = [0.0f32; 3];
        diff(&x, &mut rows, 2, 3, 1, 0);
        assert_eq!(rows, [6.0, 9.0, 12.0]);
        let mut cols = [0.0f32; 4];
        diff(&x, &mut cols, 2, 3, 1, 1);
        assert_eq!(cols, [1.0, 2.0, 4.0, 5.0]);
    }
}
