//! Raw numeric kernels over contiguous row-major slices.
//!
//! Nothing here knows about the autodiff graph; the graph calls these for
//! both forward values and vector-Jacobian products.

use rayon::prelude::*;

/// Row/column strides of a matrix view.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `rows x cols` matrix.
    pub fn row_major(cols: usize) -> Self {
        Layout {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix that has `cols` columns in storage.
    pub fn transposed(cols: usize) -> Self {
        Layout {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = a·b (+ c if accumulate)` for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover every index reachable through the given
    // strides: `a` spans m×k, `b` spans k×n and `c` is a dense m×n block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-d convolution over a batch of `n` images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kj − pad` is in bounds.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let s = g.stride;
    let lo = g.pad.saturating_sub(kj).div_ceil(s).min(g.wo);
    let hi = if g.w + g.pad > kj { (g.w + g.pad - kj).div_ceil(s).min(g.wo) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfolds one image into patch rows of length `plane`, row `r` starting at
/// `cols[r·ld]`.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64], ld: usize) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld..][..plane];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, out) in line[lo..hi].iter_mut().enumerate() {
                            *out = src[first + o * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], ld: usize, dx: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld..][..plane];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    if lo == hi {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    let first = lo * g.stride + kj - g.pad;
                    for (o, v) in src[oy * g.wo + lo..oy * g.wo + hi].iter().enumerate() {
                        dst[first + o * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Images unfolded together so each GEMM has enough columns to be worth
/// it. Depends only on the geometry, never on the thread count.
fn images_per_chunk(g: &ConvGeom) -> usize {
    const BUDGET: usize = 1 << 14;
    (BUDGET / (g.patch_len() * g.out_plane()).max(1)).clamp(1, g.n.max(1))
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// Two per-thread work buffers of the given lengths. Contents are stale;
/// callers overwrite every element they read.
fn with_scratch<R>(a: usize, b: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut bufs = cell.borrow_mut();
        let (x, y) = &mut *bufs;
        if x.len() < a {
            x.resize(a, 0.0);
        }
        if y.len() < b {
            y.resize(b, 0.0);
        }
        f(&mut x[..a], &mut y[..b])
    })
}

/// Cross-correlation forward pass, no bias.
pub fn conv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64]) -> Vec<f64> {
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * g.out_plane();
    let plane = g.out_plane();
    let patch = g.patch_len();
    let per = images_per_chunk(g);
    let mut out = vec![0.0; g.n * out_img];
    out.par_chunks_mut(per * out_img)
        .zip(x.par_chunks(per * in_img))
        .for_each(|(o, xs)| {
            let k = xs.len() / in_img;
            let ld = k * plane;
            with_scratch(patch * ld, g.cout * ld, |cols, prod| {
                for (j, xi) in xs.chunks(in_img).enumerate() {
                    im2col(g, xi, &mut cols[j * plane..], ld);
                }
                gemm(g.cout, patch, ld, weight, Layout::row_major(patch), cols, Layout::row_major(ld), prod, false);
                for (j, oi) in o.chunks_mut(out_img).enumerate() {
                    for (co, dst) in oi.chunks_mut(plane).enumerate() {
                        dst.copy_from_slice(&prod[co * ld + j * plane..][..plane]);
                    }
                }
            })
        });
    out
}

/// Vector-Jacobian product of the convolution. Returns `(dx, dweight)`;
/// `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * g.out_plane();
    let plane = g.out_plane();
    let patch = g.patch_len();
    let per = images_per_chunk(g);
    let per_chunk: Vec<(Option<Vec<f64>>, Vec<f64>)> = x
        .par_chunks(per * in_img)
        .zip(dout.par_chunks(per * out_img))
        .map(|(xs, ds)| {
            let k = xs.len() / in_img;
            let ld = k * plane;
            with_scratch(patch * ld, g.cout * ld, |cols, dm| {
                for (j, xi) in xs.chunks(in_img).enumerate() {
                    im2col(g, xi, &mut cols[j * plane..], ld);
                }
                // dOut laid out as [cout, images·plane]
                for (j, di) in ds.chunks(out_img).enumerate() {
                    for (co, src) in di.chunks(plane).enumerate() {
                        dm[co * ld + j * plane..][..plane].copy_from_slice(src);
                    }
                }
                let mut dw = vec![0.0; g.cout * patch];
                // dW = dOut · colsᵀ
                gemm(g.cout, ld, patch, dm, Layout::row_major(ld), cols, Layout::transposed(ld), &mut dw, false);
                let dx = need_dx.then(|| {
                    // dcols = Wᵀ · dOut
                    gemm(patch, g.cout, ld, weight, Layout::transposed(patch), dm, Layout::row_major(ld), cols, false);
                    let mut dx = vec![0.0; k * in_img];
                    for (j, dxi) in dx.chunks_mut(in_img).enumerate() {
                        col2im(g, &cols[j * plane..], ld, dxi);
                    }
                    dx
                });
                (dx, dw)
            })
        })
        .collect();
    // Reduce in chunk order so the result does not depend on scheduling.
    let mut dw = vec![0.0; g.cout * patch];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.n * in_img));
    for (dxi, dwi) in per_chunk {
        for (a, b) in dw.iter_mut().zip(&dwi) {
            *a += b;
        }
        if let (Some(acc), Some(part)) = (dx.as_mut(), dxi) {
            acc.extend_from_slice(&part);
        }
    }
    (dx, dw)
}

/// Max pooling over `planes` independent `h×w` planes with a square window.
/// Output size floors. Returns values and the flat input index of each maximum;
/// ties resolve to the first element in row-major scan order.
pub fn max_pool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_ix = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let ix = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[ix] > best {
                            best = x[ix];
                            best_ix = ix;
                        }
                    }
                }
                out.push(best);
                arg.push(best_ix);
            }
        }
    }
    (out, arg, ho, wo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, Layout::transposed(2), &b, Layout::row_major(2), &mut c, false);
        // aᵀ·b = [[1,3],[2,4]]·b
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, Layout::row_major(2), &b, Layout::row_major(2), &mut c, true);
        assert_eq!(c, [45.0, 52.0, 81.0, 94.0]);
    }

    #[test]
    fn pool_ties_pick_first() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let (v, arg, ho, wo) = max_pool_forward(&x, 1, 2, 2, 2, 2);
        assert_eq!((v, arg, ho, wo), (vec![1.0], vec![0], 1, 1));
    }

    #[test]
    fn pool_floors_odd_sizes() {
        let x: Vec<f64> = (0..21 * 21).map(|v| v as f64).collect();
        let (_, _, ho, wo) = max_pool_forward(&x, 1, 21, 21, 2, 2);
        assert_eq!((ho, wo), (10, 10));
    }
}
