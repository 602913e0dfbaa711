//! Raw loops for the spatial primitives. Layout is NCHW throughout.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims4 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

/// Output column range and input offset for kernel column `kx` with padding 1.
fn col_span(kx: usize, w: usize) -> (usize, usize) {
    let lo = usize::from(kx == 0);
    let hi = if kx == 2 { w - 1 } else { w };
    (lo, hi)
}

/// 3x3, stride 1, zero padding 1.
pub(crate) fn conv3x3_forward(x: &[f64], xd: Dims4, w: &[f64], cout: usize) -> Vec<f64> {
    let (cin, h, wd) = (xd.c, xd.h, xd.w);
    let plane = h * wd;
    let mut out = vec![0.0; xd.b * cout * plane];
    out.par_chunks_mut(cout * plane)
        .zip(x.par_chunks(cin * plane))
        .for_each(|(ob, xb)| {
            for co in 0..cout {
                let oplane = &mut ob[co * plane..(co + 1) * plane];
                for ci in 0..cin {
                    let xplane = &xb[ci * plane..(ci + 1) * plane];
                    let wk = &w[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wv = wk[ky * 3 + kx];
                            let (lo, hi) = col_span(kx, wd);
                            for oy in 0..h {
                                let iy = oy + ky;
                                if iy == 0 || iy > h {
                                    continue;
                                }
                                let iy = iy - 1;
                                let orow = &mut oplane[oy * wd + lo..oy * wd + hi];
                                let irow = &xplane[iy * wd + lo + kx - 1..iy * wd + hi + kx - 1];
                                for (o, i) in orow.iter_mut().zip(irow) {
                                    *o += wv * i;
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Returns `(grad_x, grad_w)`. Per-example weight gradients are reduced in
/// batch order so the result does not depend on the thread count.
pub(crate) fn conv3x3_backward(
    x: &[f64],
    xd: Dims4,
    w: &[f64],
    cout: usize,
    g: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (cin, h, wd) = (xd.c, xd.h, xd.w);
    let plane = h * wd;
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..xd.b)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * cin * plane..(b + 1) * cin * plane];
            let gb = &g[b * cout * plane..(b + 1) * cout * plane];
            let mut gx = if need_x { vec![0.0; cin * plane] } else { Vec::new() };
            let mut gw = if need_w { vec![0.0; cout * cin * 9] } else { Vec::new() };
            for co in 0..cout {
                let gplane = &gb[co * plane..(co + 1) * plane];
                for ci in 0..cin {
                    let xplane = &xb[ci * plane..(ci + 1) * plane];
                    let base = (co * cin + ci) * 9;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wv = w[base + ky * 3 + kx];
                            let (lo, hi) = col_span(kx, wd);
                            let mut acc = 0.0;
                            for oy in 0..h {
                                let iy = oy + ky;
                                if iy == 0 || iy > h {
                                    continue;
                                }
                                let iy = iy - 1;
                                let grow = &gplane[oy * wd + lo..oy * wd + hi];
                                let ioff = iy * wd + lo + kx - 1;
                                if need_w {
                                    let irow = &xplane[ioff..ioff + (hi - lo)];
                                    acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if need_x {
                                    let gxrow = &mut gx[ci * plane + ioff..ci * plane + ioff + (hi - lo)];
                                    for (o, gv) in gxrow.iter_mut().zip(grow) {
                                        *o += wv * gv;
                                    }
                                }
                            }
                            if need_w {
                                gw[base + ky * 3 + kx] += acc;
                            }
                        }
                    }
                }
            }
            (gx, gw)
        })
        .collect();
    let mut gx = Vec::with_capacity(if need_x { x.len() } else { 0 });
    let mut gw = if need_w { vec![0.0; w.len()] } else { Vec::new() };
    for (px, pw) in parts {
        gx.extend(px);
        for (a, b) in gw.iter_mut().zip(pw) {
            *a += b;
        }
    }
    (gx, gw)
}

/// 2x2 max pooling with stride 2; odd trailing rows/cols are dropped.
/// Returns pooled values and the flat input index chosen for each output.
pub(crate) fn maxpool2x2_forward(x: &[f64], xd: Dims4) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (xd.h / 2, xd.w / 2);
    let n = xd.b * xd.c * oh * ow;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for bc in 0..xd.b * xd.c {
        let base = bc * xd.h * xd.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * xd.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * xd.w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
