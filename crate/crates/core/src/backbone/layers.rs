//! Layer primitives on flat CHW buffers.

/// 3x3 convolution, stride 1, zero padding 1. `weight` is `(cout, cin, 3, 3)`.
pub fn conv3x3_forward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let cout = bias.len();
    let plane = h * w;
    debug_assert_eq!(input.len(), cin * plane);
    debug_assert_eq!(out.len(), cout * plane);
    for oc in 0..cout {
        let o = &mut out[oc * plane..(oc + 1) * plane];
        o.fill(bias[oc]);
        for ic in 0..cin {
            let inp = &input[ic * plane..(ic + 1) * plane];
            let k = &weight[(oc * cin + ic) * 9..(oc * cin + ic + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = k[ky * 3 + kx];
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    for y in 0..h {
                        let iy = y + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        let irow = &inp[(iy - 1) * w..iy * w];
                        let orow = &mut o[y * w..(y + 1) * w];
                        for (ov, iv) in orow[x0..x1].iter_mut().zip(&irow[x0 + kx - 1..x1 + kx - 1]) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
}

/// Backward of [`conv3x3_forward`]. Accumulates into `dweight`/`dbias`; when
/// `dinput` is given it is accumulated as well.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let cout = dbias.len();
    let plane = h * w;
    for oc in 0..cout {
        let d = &dout[oc * plane..(oc + 1) * plane];
        dbias[oc] += d.iter().sum::<f64>();
        for ic in 0..cin {
            let inp = &input[ic * plane..(ic + 1) * plane];
            let base = (oc * cin + ic) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    let mut acc = 0.0;
                    for y in 0..h {
                        let iy = y + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        let irow = &inp[(iy - 1) * w + x0 + kx - 1..(iy - 1) * w + x1 + kx - 1];
                        let drow = &d[y * w + x0..y * w + x1];
                        acc += drow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dweight[base + ky * 3 + kx] += acc;
                    if let Some(di) = dinput.as_deref_mut() {
                        let wv = weight[base + ky * 3 + kx];
                        let dip = &mut di[ic * plane..(ic + 1) * plane];
                        for y in 0..h {
                            let iy = y + ky;
                            if iy < 1 || iy > h {
                                continue;
                            }
                            let drow = &d[y * w + x0..y * w + x1];
                            let irow = &mut dip[(iy - 1) * w + x0 + kx - 1..(iy - 1) * w + x1 + kx - 1];
                            for (iv, dv) in irow.iter_mut().zip(drow) {
                                *iv += wv * dv;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the post-activation value is not positive.
pub fn relu_backward(activated: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pool, stride 2. Records the flat in-plane index of each maximum
/// (first maximum wins on ties).
pub fn maxpool2_forward(input: &[f64], c: usize, h: usize, w: usize, out: &mut [f64], argmax: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let inp = &input[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let mut best = (f64::NEG_INFINITY, 0usize);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (2 * y + dy) * w + 2 * x + dx;
                        if inp[i] > best.0 {
                            best = (inp[i], i);
                        }
                    }
                }
                let o = ch * oh * ow + y * ow + x;
                out[o] = best.0;
                argmax[o] = best.1 as u32;
            }
        }
    }
}

pub fn maxpool2_backward(dout: &[f64], argmax: &[u32], c: usize, h: usize, w: usize, dinput: &mut [f64]) {
    let per = (h / 2) * (w / 2);
    for ch in 0..c {
        for k in 0..per {
            let o = ch * per + k;
            dinput[ch * h * w + argmax[o] as usize] += dout[o];
        }
    }
}

/// `out = W x + b` with `W` row-major `(out, in)`.
pub fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, (ov, b)) in out.iter_mut().zip(bias).enumerate() {
        let row = &weight[o * n_in..(o + 1) * n_in];
        *ov = b + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Accumulates weight/bias gradients and, optionally, `dx = W^T dout`.
pub fn linear_backward(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let n_in = x.len();
    for (o, &d) in dout.iter().enumerate() {
        dbias[o] += d;
        if d != 0.0 {
            let row = &mut dweight[o * n_in..(o + 1) * n_in];
            for (g, xv) in row.iter_mut().zip(x) {
                *g += d * xv;
            }
        }
    }
    if let Some(dx) = dx {
        for (o, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &weight[o * n_in..(o + 1) * n_in];
            for (g, wv) in dx.iter_mut().zip(row) {
                *g += d * wv;
            }
        }
    }
}
