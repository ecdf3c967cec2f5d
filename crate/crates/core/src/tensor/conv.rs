//! Direct 3x3 convolution kernels (zero padding 1, stride 1 or 2) and the
//! nearest-neighbor resize, with hand-written adjoints.
//!
//! Layout: feature maps are `[channels, height, width]` flattened row-major;
//! weights are `[c_out, c_in, 3, 3]`.

/// Output spatial size for kernel 3, padding 1.
pub fn conv_out_dim(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

pub fn conv2d_forward(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    ker: &[f64],
    c_out: usize,
    stride: usize,
    out: &mut [f64],
) {
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    debug_assert_eq!(out.len(), c_out * oh * ow);
    out.fill(0.0);
    for co in 0..c_out {
        let out_plane = &mut out[co * oh * ow..][..oh * ow];
        for ci in 0..c_in {
            let x_plane = &x[ci * h * w..][..h * w];
            let k9 = &ker[(co * c_in + ci) * 9..][..9];
            if stride == 1 {
                plane_s1(x_plane, h, w, k9, out_plane);
            } else {
                plane_s2(x_plane, h, w, k9, out_plane, oh, ow);
            }
        }
    }
}

fn plane_s1(x: &[f64], h: usize, w: usize, k9: &[f64], out: &mut [f64]) {
    for ku in 0..3 {
        for oy in 0..h {
            let sy = oy as isize + ku as isize - 1;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let xrow = &x[sy as usize * w..][..w];
            let orow = &mut out[oy * w..][..w];
            for kv in 0..3 {
                let wv = k9[ku * 3 + kv];
                // source column = ox + kv - 1, kept in range
                let (olo, ohi, slo) = match kv {
                    0 => (1, w, 0),
                    1 => (0, w, 0),
                    _ => (0, w - 1, 1),
                };
                for (o, xv) in orow[olo..ohi].iter_mut().zip(&xrow[slo..slo + ohi - olo]) {
                    *o += wv * xv;
                }
            }
        }
    }
}

fn plane_s2(x: &[f64], h: usize, w: usize, k9: &[f64], out: &mut [f64], oh: usize, ow: usize) {
    for ku in 0..3 {
        for oy in 0..oh {
            let sy = 2 * oy as isize + ku as isize - 1;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let xrow = &x[sy as usize * w..][..w];
            let orow = &mut out[oy * ow..][..ow];
            for kv in 0..3 {
                let wv = k9[ku * 3 + kv];
                let olo = if kv == 0 { 1 } else { 0 };
                let ohi = ow.min((w - kv) / 2 + 1);
                for ox in olo..ohi {
                    orow[ox] += wv * xrow[2 * ox + kv - 1];
                }
            }
        }
    }
}

/// Gradient with respect to the input: scatter `g_out` back through the taps.
pub fn conv2d_backward_input(
    g_out: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    ker: &[f64],
    c_out: usize,
    stride: usize,
    g_x: &mut [f64],
) {
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    for co in 0..c_out {
        let go_plane = &g_out[co * oh * ow..][..oh * ow];
        for ci in 0..c_in {
            let gx_plane = &mut g_x[ci * h * w..][..h * w];
            let k9 = &ker[(co * c_in + ci) * 9..][..9];
            for ku in 0..3 {
                for oy in 0..oh {
                    let sy = (stride * oy) as isize + ku as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let gxrow = &mut gx_plane[sy as usize * w..][..w];
                    let gorow = &go_plane[oy * ow..][..ow];
                    for kv in 0..3 {
                        let wv = k9[ku * 3 + kv];
                        if stride == 1 {
                            let (olo, ohi, slo) = match kv {
                                0 => (1, w, 0),
                                1 => (0, w, 0),
                                _ => (0, w - 1, 1),
                            };
                            for (g, o) in gxrow[slo..slo + ohi - olo].iter_mut().zip(&gorow[olo..ohi]) {
                                *g += wv * o;
                            }
                        } else {
                            let olo = if kv == 0 { 1 } else { 0 };
                            let ohi = ow.min((w - kv) / 2 + 1);
                            for ox in olo..ohi {
                                gxrow[2 * ox + kv - 1] += wv * gorow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the weights.
pub fn conv2d_backward_weights(
    g_out: &[f64],
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    stride: usize,
    g_ker: &mut [f64],
) {
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(w, stride));
    for co in 0..c_out {
        let go_plane = &g_out[co * oh * ow..][..oh * ow];
        for ci in 0..c_in {
            let x_plane = &x[ci * h * w..][..h * w];
            let gk = &mut g_ker[(co * c_in + ci) * 9..][..9];
            for ku in 0..3 {
                for oy in 0..oh {
                    let sy = (stride * oy) as isize + ku as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let xrow = &x_plane[sy as usize * w..][..w];
                    let gorow = &go_plane[oy * ow..][..ow];
                    for kv in 0..3 {
                        let mut acc = 0.0;
                        if stride == 1 {
                            let (olo, ohi, slo) = match kv {
                                0 => (1, w, 0),
                                1 => (0, w, 0),
                                _ => (0, w - 1, 1),
                            };
                            for (o, xv) in gorow[olo..ohi].iter().zip(&xrow[slo..slo + ohi - olo]) {
                                acc += o * xv;
                            }
                        } else {
                            let olo = if kv == 0 { 1 } else { 0 };
                            let ohi = ow.min((w - kv) / 2 + 1);
                            for ox in olo..ohi {
                                acc += gorow[ox] * xrow[2 * ox + kv - 1];
                            }
                        }
                        gk[ku * 3 + kv] += acc;
                    }
                }
            }
        }
    }
}

pub fn resize_nearest_forward(x: &[f64], c: usize, h: usize, w: usize, f: usize, out: &mut [f64]) {
    let (oh, ow) = (h * f, w * f);
    for ch in 0..c {
        let xp = &x[ch * h * w..][..h * w];
        let op = &mut out[ch * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let xrow = &xp[(oy / f) * w..][..w];
            let orow = &mut op[oy * ow..][..ow];
            for (ox, o) in orow.iter_mut().enumerate() {
                *o = xrow[ox / f];
            }
        }
    }
}

/// Adjoint of nearest resize: sum each f x f output block into its source.
pub fn resize_nearest_backward(g_out: &[f64], c: usize, h: usize, w: usize, f: usize, g_x: &mut [f64]) {
    let (oh, ow) = (h * f, w * f);
    for ch in 0..c {
        let gp = &g_out[ch * oh * ow..][..oh * ow];
        let gxp = &mut g_x[ch * h * w..][..h * w];
        for oy in 0..oh {
            let gorow = &gp[oy * ow..][..ow];
            let gxrow = &mut gxp[(oy / f) * w..][..w];
            for (ox, g) in gorow.iter().enumerate() {
                gxrow[ox / f] += g;
            }
        }
    }
}
