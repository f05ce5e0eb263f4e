//! Raw numeric kernels shared by forward and backward rules.

/// How a row-major operand is read by [`gemm`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum Layout {
    /// Stored as the logical `rows x cols` matrix.
    Plain,
    /// Stored as `cols x rows`; read transposed.
    Transposed,
}

/// `c = a * b (+ c if accumulate)` for logical shapes `m x k` and `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Plain => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Plain => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every buffer to the extents implied by
    // (m, k, n) and the strides address only those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D sliding window over `[N, C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.sh + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.sw + 1
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Row count of the unrolled patch matrix.
    pub fn patches(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }
}

/// Unrolls padded input patches into rows of a
/// `[N*OH*OW, C*KH*KW]` matrix.
pub(crate) fn im2col(x: &[f64], g: &Window) -> Vec<f64> {
    let (oh, ow, plen) = (g.out_h(), g.out_w(), g.patch_len());
    let mut cols = vec![0.0; g.patches() * plen];
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * plen;
                for c in 0..g.c {
                    for ky in 0..g.kh {
                        let iy = (oy * g.sh + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.sw + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let src = ((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize;
                            cols[row + (c * g.kh + ky) * g.kw + kx] = x[src];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
pub(crate) fn col2im(cols: &[f64], g: &Window) -> Vec<f64> {
    let (oh, ow, plen) = (g.out_h(), g.out_w(), g.patch_len());
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * plen;
                for c in 0..g.c {
                    for ky in 0..g.kh {
                        let iy = (oy * g.sh + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.sw + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let dst = ((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize;
                            x[dst] += cols[row + (c * g.kh + ky) * g.kw + kx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Per-window maxima and the flat input index each came from (first
/// maximum in row-major window order on ties).
pub(crate) fn max_pool(x: &[f64], g: &Window) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = Vec::with_capacity(g.n * g.c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for nc in 0..g.n * g.c {
        let base = nc * g.h * g.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (oy * g.sh) * g.w + ox * g.sw;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let idx = base + (oy * g.sh + ky) * g.w + ox * g.sw + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_layouts_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, Layout::Plain, &b, Layout::Plain, &mut c, false);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut d = [1.0; 4];
        gemm(2, 3, 2, &at, Layout::Transposed, &bt, Layout::Transposed, &mut d, true);
        assert_eq!(d, [59.0, 65.0, 140.0, 155.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = Window { n: 1, c: 2, h: 4, w: 5, kh: 3, kw: 2, sh: 1, sw: 2, pad: 1 };
        let x: Vec<f64> = (0..g.n * g.c * g.h * g.w).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
