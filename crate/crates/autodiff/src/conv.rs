//! im2col-backed 2-d convolution forward and backward.

use crate::{dims4, Element};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD};

fn out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        len + 2 * pad >= k,
        "kernel {} larger than padded input {}",
        k,
        len + 2 * pad
    );
    (len + 2 * pad - k) / stride + 1
}

/// Unfold x (N,C,H,W) into (C*k*k, N*oh*ow).
fn im2col<F: Element>(x: &ArrayD<F>, k: usize, stride: usize, pad: usize) -> Array2<F> {
    let (n, c, h, w) = dims4(x);
    let oh = out_len(h, k, stride, pad);
    let ow = out_len(w, k, stride, pad);
    let cols = n * oh * ow;
    let mut col = Array2::<F>::zeros((c * k * k, cols));
    let xs = x.as_slice().unwrap();
    let cs = col.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let rbase = r * cols;
                for ni in 0..n {
                    let xbase = (ni * c + ci) * h * w;
                    let obase = rbase + ni * oh * ow;
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let orow = obase + oy * ow;
                        let xrow = xbase + iy * w;
                        for ox in 0..ow {
                            let ix = ox * stride + kx;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            cs[orow + ox] = xs[xrow + ix - pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Fold (C*k*k, N*oh*ow) gradients back into (N,C,H,W), accumulating overlaps.
fn col2im<F: Element>(
    col: &Array2<F>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<F> {
    let oh = out_len(h, k, stride, pad);
    let ow = out_len(w, k, stride, pad);
    let cols = n * oh * ow;
    let mut x = ArrayD::<F>::zeros(vec![n, c, h, w]);
    let xs = x.as_slice_mut().unwrap();
    let cs = col.as_slice().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let rbase = r * cols;
                for ni in 0..n {
                    let xbase = (ni * c + ci) * h * w;
                    let obase = rbase + ni * oh * ow;
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let orow = obase + oy * ow;
                        let xrow = xbase + iy * w;
                        for ox in 0..ow {
                            let ix = ox * stride + kx;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            xs[xrow + ix - pad] += cs[orow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv2d_forward<F: Element>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    stride: usize,
    pad: usize,
) -> ArrayD<F> {
    let (n, ci, h, wd) = dims4(x);
    let (co, ciw, k, k2) = dims4(w);
    assert_eq!(ci, ciw, "conv input channels mismatch");
    assert_eq!(k, k2, "square kernels only");
    let oh = out_len(h, k, stride, pad);
    let ow = out_len(wd, k, stride, pad);
    let col = im2col(x, k, stride, pad);
    let w2 = w
        .view()
        .into_shape_with_order((co, ci * k * k))
        .expect("weight reshape");
    let mut y2 = Array2::<F>::zeros((co, n * oh * ow));
    general_mat_mul(F::one(), &w2, &col, F::zero(), &mut y2);
    // (co, n, oh, ow) -> (n, co, oh, ow)
    let y4 = y2
        .into_shape_with_order((co, n, oh, ow))
        .unwrap()
        .permuted_axes([1, 0, 2, 3]);
    y4.as_standard_layout().to_owned().into_dyn()
}

pub(crate) fn conv2d_backward<F: Element>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    gy: &ArrayD<F>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<ArrayD<F>>, Option<ArrayD<F>>) {
    let (n, ci, h, wd) = dims4(x);
    let (co, _, k, _) = dims4(w);
    let (gn, gc, oh, ow) = dims4(gy);
    assert_eq!(gn, n);
    assert_eq!(gc, co);
    // (n, co, oh, ow) -> (co, n*oh*ow)
    let gy2 = gy
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((co, n * oh * ow))
        .unwrap();

    let dw = if need_dw {
        let col = im2col(x, k, stride, pad);
        let mut dw2 = Array2::<F>::zeros((co, ci * k * k));
        general_mat_mul(F::one(), &gy2, &col.t(), F::zero(), &mut dw2);
        Some(
            dw2.into_shape_with_order((co, ci, k, k))
                .unwrap()
                .into_dyn(),
        )
    } else {
        None
    };

    let dx = if need_dx {
        let w2 = w
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("weight reshape");
        let mut dcol = Array2::<F>::zeros((ci * k * k, n * oh * ow));
        general_mat_mul(F::one(), &w2.t(), &gy2, F::zero(), &mut dcol);
        Some(col2im(&dcol, n, ci, h, wd, k, stride, pad))
    } else {
        None
    };

    (dx, dw)
}
