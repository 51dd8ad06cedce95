//! Direct-loop 2-d convolution kernels. Shapes here are small enough that
//! the straightforward quadruple loop wins on clarity.

use ndarray::{Array4, ArrayView4};

use super::tape::Padding;

/// Output geometry: (out_h, out_w, pad_top, pad_left).
fn geometry(
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    pad: Padding,
    stride: usize,
) -> Result<(usize, usize, usize, usize), String> {
    if stride == 0 {
        return Err("stride must be positive".into());
    }
    match pad {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(format!(
                    "kernel {kh}x{kw} does not fit input {h}x{w} with valid padding"
                ));
            }
            Ok(((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0))
        }
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let ph = ((oh - 1) * stride + kh).saturating_sub(h);
            let pw = ((ow - 1) * stride + kw).saturating_sub(w);
            Ok((oh, ow, ph / 2, pw / 2))
        }
    }
}

pub(crate) fn forward(
    x: &ArrayView4<f64>,
    k: &ArrayView4<f64>,
    pad: Padding,
    stride: usize,
) -> Result<Array4<f64>, String> {
    let (b, h, w, cin) = x.dim();
    let (kh, kw, kcin, cout) = k.dim();
    if kcin != cin {
        return Err(format!(
            "kernel expects {kcin} input channels, input has {cin}"
        ));
    }
    let (oh, ow, pt, pl) = geometry((h, w), (kh, kw), pad, stride)?;
    let mut out = Array4::<f64>::zeros((b, oh, ow, cout));
    for bi in 0..b {
        for oi in 0..oh {
            for oj in 0..ow {
                for di in 0..kh {
                    let ii = (oi * stride + di).wrapping_sub(pt);
                    if ii >= h {
                        continue;
                    }
                    for dj in 0..kw {
                        let jj = (oj * stride + dj).wrapping_sub(pl);
                        if jj >= w {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x[[bi, ii, jj, ci]];
                            if xv == 0.0 {
                                continue;
                            }
                            for co in 0..cout {
                                out[[bi, oi, oj, co]] += xv * k[[di, dj, ci, co]];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn backward(
    x: &ArrayView4<f64>,
    k: &ArrayView4<f64>,
    g: &ArrayView4<f64>,
    pad: Padding,
    stride: usize,
) -> (Array4<f64>, Array4<f64>) {
    let (b, h, w, cin) = x.dim();
    let (kh, kw, _, cout) = k.dim();
    let (oh, ow, pt, pl) =
        geometry((h, w), (kh, kw), pad, stride).expect("geometry validated in forward");
    debug_assert_eq!(g.dim(), (b, oh, ow, cout));
    let mut dx = Array4::<f64>::zeros((b, h, w, cin));
    let mut dk = Array4::<f64>::zeros(k.dim());
    for bi in 0..b {
        for oi in 0..oh {
            for oj in 0..ow {
                for di in 0..kh {
                    let ii = (oi * stride + di).wrapping_sub(pt);
                    if ii >= h {
                        continue;
                    }
                    for dj in 0..kw {
                        let jj = (oj * stride + dj).wrapping_sub(pl);
                        if jj >= w {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x[[bi, ii, jj, ci]];
                            for co in 0..cout {
                                let gv = g[[bi, oi, oj, co]];
                                dx[[bi, ii, jj, ci]] += gv * k[[di, dj, ci, co]];
                                dk[[di, dj, ci, co]] += gv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}
