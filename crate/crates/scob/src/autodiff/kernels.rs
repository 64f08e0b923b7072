//! Flat-slice numeric kernels used by the tape.
//!
//! All matrices are row-major. The matmul kernels accumulate into `out`,
//! callers zero the buffer when they want a plain product.

/// out[m,n] += a[m,k] * b[k,n]
pub fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
pub fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// 3x3 convolution, zero padding 1, stride 1 or 2.
/// x: [cin, h, w], weight: [cout, cin, 3, 3], bias: [cout],
/// out: [cout, h/stride, w/stride] (overwritten).
pub fn conv3x3_fwd(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    stride: usize,
) {
    let oh = h / stride;
    let ow = w / stride;
    debug_assert_eq!(out.len(), cout * oh * ow);
    for oc in 0..cout {
        let oplane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        oplane.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..cin {
            let xplane = &x[ic * h * w..(ic + 1) * h * w];
            let wbase = (oc * cin + ic) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = weight[wbase + ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            *o += wv * xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Backward of [`conv3x3_fwd`]. Accumulates input, weight and bias
/// gradients from the output gradient `g` in one sweep over the same
/// index space as the forward pass.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_bwd(
    x: &[f64],
    weight: &[f64],
    g: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    stride: usize,
) {
    let oh = h / stride;
    let ow = w / stride;
    for oc in 0..cout {
        let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
        gb[oc] += gplane.iter().sum::<f64>();
        for ic in 0..cin {
            let xplane = &x[ic * h * w..(ic + 1) * h * w];
            let gxplane = &mut gx[ic * h * w..(ic + 1) * h * w];
            let wbase = (oc * cin + ic) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = weight[wbase + ky * 3 + kx];
                    let mut wacc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                        let gxrow = &mut gxplane[iy as usize * w..(iy as usize + 1) * w];
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for (ox, &gv) in grow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gxrow[ix as usize] += wv * gv;
                            wacc += xrow[ix as usize] * gv;
                        }
                    }
                    gw[wbase + ky * 3 + kx] += wacc;
                }
            }
        }
    }
}

/// Row-wise softmax with max subtraction. `a` and `out` are [rows, cols].
pub fn softmax_rows(a: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let arow = &a[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mx = arow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(arow.iter()) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        orow.iter_mut().for_each(|o| *o *= inv);
    }
}
