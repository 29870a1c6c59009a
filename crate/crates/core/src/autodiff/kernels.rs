//! Raw forward/backward loops for the spatial operators. Everything here works
//! on flat slices in `(N, C, H, W)` order; shape validation happens in the
//! graph layer.

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.p();
    for ci in 0..g.ci {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.ci {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); g.n * g.co * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..g.n {
        let xn = &x[n * g.ci * g.h * g.w..(n + 1) * g.ci * g.h * g.w];
        let cm: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        let on = &mut out[n * g.co * p..(n + 1) * g.co * p];
        T::gemm(g.co, k, p, T::one(), w, k as isize, 1, cm, p as isize, 1, T::zero(), on, p as isize, 1);
        if let Some(b) = b {
            for (co, row) in on.chunks_mut(p).enumerate() {
                let bias = b[co];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients for one convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    mut dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (k, p) = (g.k(), g.p());
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if pointwise || dx.is_none() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dw = dw;
    if let Some(db) = db {
        for n in 0..g.n {
            let gn = &gout[n * g.co * p..(n + 1) * g.co * p];
            for (co, row) in gn.chunks(p).enumerate() {
                let mut s = T::zero();
                for &v in row {
                    s += v;
                }
                db[co] += s;
            }
        }
    }
    for n in 0..g.n {
        let gn = &gout[n * g.co * p..(n + 1) * g.co * p];
        let xn = &x[n * g.ci * g.h * g.w..(n + 1) * g.ci * g.h * g.w];
        if let Some(dw) = dw.as_deref_mut() {
            let cm: &[T] = if pointwise {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            // dW[co, k] += sum_p gout[co, p] * cols[k, p]
            T::gemm(g.co, p, k, T::one(), gn, p as isize, 1, cm, 1, p as isize, T::one(), dw, k as isize, 1);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * g.ci * g.h * g.w..(n + 1) * g.ci * g.h * g.w];
            if pointwise {
                T::gemm(k, g.co, p, T::one(), w, 1, k as isize, gn, p as isize, 1, T::one(), dxn, p as isize, 1);
            } else {
                T::gemm(k, g.co, p, T::one(), w, 1, k as isize, gn, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                col2im_add(g, &dcols, dxn);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Returns pooled values and, for max pooling, the flat input index of each winner.
pub(crate) fn max_pool_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> (Vec<T>, Vec<u32>) {
    let mut out = Vec::with_capacity(g.planes * g.ho * g.wo);
    let mut arg = Vec::with_capacity(out.capacity());
    for pl in 0..g.planes {
        let base = pl * g.h * g.w;
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let mut best_i = base + oh * g.stride * g.w + ow * g.stride;
                let mut best = x[best_i];
                // first maximum in scan order wins ties; windows are clipped at
                // the border in ceil mode
                let kh = g.k.min(g.h - oh * g.stride);
                let kw = g.k.min(g.w - ow * g.stride);
                for ki in 0..kh {
                    for kj in 0..kw {
                        let i = base + (oh * g.stride + ki) * g.w + ow * g.stride + kj;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> Vec<T> {
    let inv = T::of(1.0 / (g.k * g.k) as f64);
    let mut out = Vec::with_capacity(g.planes * g.ho * g.wo);
    for pl in 0..g.planes {
        let base = pl * g.h * g.w;
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let mut s = T::zero();
                for ki in 0..g.k {
                    let row = base + (oh * g.stride + ki) * g.w + ow * g.stride;
                    for kj in 0..g.k {
                        s += x[row + kj];
                    }
                }
                out.push(s * inv);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(g: &PoolGeom, gout: &[T], dx: &mut [T]) {
    let inv = T::of(1.0 / (g.k * g.k) as f64);
    for pl in 0..g.planes {
        let base = pl * g.h * g.w;
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let v = gout[(pl * g.ho + oh) * g.wo + ow] * inv;
                for ki in 0..g.k {
                    let row = base + (oh * g.stride + ki) * g.w + ow * g.stride;
                    for kj in 0..g.k {
                        dx[row + kj] += v;
                    }
                }
            }
        }
    }
}

/// Source taps for one axis of a half-pixel-centred bilinear resize.
#[derive(Debug, Clone)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            frac: Vec::with_capacity(output),
        };
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(src - lo as f64);
        }
        taps
    }
}

pub(crate) fn bilinear_forward<T: Scalar>(
    planes: usize,
    (h, w): (usize, usize),
    ty: &AxisTaps,
    tx: &AxisTaps,
    x: &[T],
) -> Vec<T> {
    let (oh, ow) = (ty.lo.len(), tx.lo.len());
    let mut out = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let plane = &x[pl * h * w..(pl + 1) * h * w];
        for y in 0..oh {
            let ly = T::of(ty.frac[y]);
            let r0 = &plane[ty.lo[y] * w..(ty.lo[y] + 1) * w];
            let r1 = &plane[ty.hi[y] * w..(ty.hi[y] + 1) * w];
            for xo in 0..ow {
                let lx = T::of(tx.frac[xo]);
                let (a, b) = (tx.lo[xo], tx.hi[xo]);
                let top = (T::one() - lx) * r0[a] + lx * r0[b];
                let bot = (T::one() - lx) * r1[a] + lx * r1[b];
                out.push((T::one() - ly) * top + ly * bot);
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Scalar>(
    planes: usize,
    (h, w): (usize, usize),
    ty: &AxisTaps,
    tx: &AxisTaps,
    gout: &[T],
    dx: &mut [T],
) {
    let (oh, ow) = (ty.lo.len(), tx.lo.len());
    for pl in 0..planes {
        let plane = &mut dx[pl * h * w..(pl + 1) * h * w];
        for y in 0..oh {
            let ly = T::of(ty.frac[y]);
            for xo in 0..ow {
                let lx = T::of(tx.frac[xo]);
                let gv = gout[(pl * oh + y) * ow + xo];
                let (a, b) = (tx.lo[xo], tx.hi[xo]);
                let top = (T::one() - ly) * gv;
                let bot = ly * gv;
                plane[ty.lo[y] * w + a] += (T::one() - lx) * top;
                plane[ty.lo[y] * w + b] += lx * top;
                plane[ty.hi[y] * w + a] += (T::one() - lx) * bot;
                plane[ty.hi[y] * w + b] += lx * bot;
            }
        }
    }
}
