//! Low-level numeric kernels shared by the tape operations.

use super::Element;

/// Layout of a matrix operand inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl MatLayout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix, viewed as `cols x rows`.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self {
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.row_stride as usize + (self.cols - 1) * self.col_stride as usize + 1
    }
}

/// `c += a * b` (or `c = a * b` when `accumulate` is false).
pub(crate) fn gemm<E: Element>(
    a: &[E],
    la: MatLayout,
    b: &[E],
    lb: MatLayout,
    c: &mut [E],
    accumulate: bool,
) {
    assert_eq!(la.cols, lb.rows, "gemm inner extent");
    let (m, k, n) = (la.rows, la.cols, lb.cols);
    assert!(a.len() >= la.span() && b.len() >= lb.span(), "gemm operand bounds");
    assert!(c.len() >= m * n, "gemm output bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(E::zero());
        }
        return;
    }
    let beta = if accumulate { E::one() } else { E::zero() };
    // SAFETY: extents and strides were checked against the slice lengths above.
    unsafe {
        E::gemm_raw(
            m,
            k,
            n,
            E::one(),
            a.as_ptr(),
            la.row_stride,
            la.col_stride,
            b.as_ptr(),
            lb.row_stride,
            lb.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(out_index, src_index)` for every element of a tensor of shape
/// `shape`, where `src_index = offset + sum(idx[d] * src_strides[d])`.
pub(crate) fn for_each_strided(
    shape: &[usize],
    src_strides: &[usize],
    offset: usize,
    mut f: impl FnMut(usize, usize),
) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, offset);
        return;
    }
    let nd = shape.len();
    let inner = shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut base = offset;
    let mut out = 0;
    loop {
        let mut s = base;
        for _ in 0..inner {
            f(out, s);
            out += 1;
            s += inner_stride;
        }
        // advance outer multi-index
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Source strides that broadcast `src` (right-aligned, extents 1 or equal) onto `out`.
pub(crate) fn broadcast_strides(out: &[usize], src: &[usize]) -> Option<Vec<usize>> {
    if src.len() > out.len() {
        return None;
    }
    let pad = out.len() - src.len();
    let src_s = strides(src);
    let mut res = vec![0; out.len()];
    for d in 0..out.len() {
        if d < pad {
            continue;
        }
        let e = src[d - pad];
        if e == out[d] {
            res[d] = src_s[d - pad];
        } else if e == 1 {
            res[d] = 0;
        } else {
            return None;
        }
    }
    Some(res)
}

/// 3x3, padding 1 patch extraction: `cols[(ci*9 + ky*3 + kx) * (oh*ow) + oy*ow + ox]`.
pub(crate) fn im2col<E: Element>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    cols: &mut [E],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(E::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        *d = if ix < 0 || ix >= w as isize {
                            E::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im<E: Element>(
    cols: &[E],
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    dx: &mut [E],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let xc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
