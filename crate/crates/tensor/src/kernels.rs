//! Raw convolution kernels on flat slices.
//!
//! Every convolution is lowered to im2col + GEMM over a 3-D spatial
//! geometry; 2-D convolutions use a depth of one. Transposed convolution
//! reuses the same geometry with the roles of input and output swapped.

use crate::par::{self, Exec};

/// `C = A·B + beta·C` with row-major storage. `A` is logically `m×k`
/// (stored `k×m` when `a_t`), `B` is logically `k×n` (stored `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let sa = if a_t { (1, m) } else { (k, 1) };
    let sb = if b_t { (1, k) } else { (n, 1) };
    gemm_strided(m, k, n, a, sa, b, sb, beta, c, n);
}

/// Largest flat index touched by an `r×c` view with strides `(rs, cs)`.
fn view_end(r: usize, c: usize, (rs, cs): (usize, usize)) -> usize {
    if r == 0 || c == 0 {
        0
    } else {
        (r - 1) * rs + (c - 1) * cs + 1
    }
}

/// `C = A·B + beta·C` where `A` (`m×k`) and `B` (`k×n`) are read through
/// `(row, column)` strides and `C` has row stride `ldc`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: (usize, usize),
    b: &[f32],
    sb: (usize, usize),
    beta: f32,
    c: &mut [f32],
    ldc: usize,
) {
    assert!(view_end(m, k, sa) <= a.len());
    assert!(view_end(k, n, sb) <= b.len());
    assert!(view_end(m, n, (ldc, 1)) <= c.len());
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the assertions above bound every element each view touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Output columns unfolded at a time; tiles always cover whole output rows.
const TILE_COLUMNS: usize = 4096;

/// Geometry of one convolution over `channels × in_dims` producing `out_dims`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(
        channels: usize,
        in_dims: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Option<Self> {
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let padded = in_dims[a] + 2 * pad[a];
            if stride[a] == 0 || kernel[a] == 0 || kernel[a] > padded {
                return None;
            }
            out_dims[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Some(ConvGeom {
            channels,
            in_dims,
            kernel,
            stride,
            pad,
            out_dims,
        })
    }

    pub fn in_size(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_size(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Rows of the column matrix: `channels · kd · kh · kw`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Unfolds one image (`channels × in_dims`) into `cols` (`col_rows × out_size`).
/// Output columns `lo..hi` whose input column `xo·stride + offset − pad`
/// falls inside `0..width`.
fn valid_range(out: usize, width: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > offset { (pad - offset).div_ceil(stride) } else { 0 };
    let hi = if width + pad > offset {
        ((width + pad - offset - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[cfg(test)]
fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    im2col_rows(x, g, 0, g.out_dims[0] * g.out_dims[1], cols);
}

/// [`im2col`] restricted to the flat output rows `r0..r1` (row = `z·oh + y`);
/// `cols` is `col_rows × (r1 − r0)·ow`.
fn im2col_rows(x: &[f32], g: &ConvGeom, r0: usize, r1: usize, cols: &mut [f32]) {
    let [id, ih, iw] = g.in_dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [_, oh, ow] = g.out_dims;
    let p = (r1 - r0) * ow;
    debug_assert_eq!(cols.len(), g.col_rows() * p);
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for dz in 0..kd {
            for dy in 0..kh {
                for dx in 0..kw {
                    let (lo, hi) = valid_range(ow, iw, sw, dx, pw);
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for (r, seg) in (r0..r1).zip(dst.chunks_exact_mut(ow)) {
                        let zi = ((r / oh) * sd + dz) as isize - pd as isize;
                        let yi = ((r % oh) * sh + dy) as isize - ph as isize;
                        if zi < 0 || zi >= id as isize || yi < 0 || yi >= ih as isize {
                            seg.fill(0.0);
                            continue;
                        }
                        let base = (zi as usize * ih + yi as usize) * iw;
                        let src = &xc[base..base + iw];
                        seg[..lo].fill(0.0);
                        seg[hi..].fill(0.0);
                        if sw == 1 {
                            seg[lo..hi].copy_from_slice(&src[lo + dx - pw..hi + dx - pw]);
                        } else {
                            for xo in lo..hi {
                                seg[xo] = src[xo * sw + dx - pw];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back, accumulating into `x`.
#[cfg(test)]
fn col2im(cols: &[f32], g: &ConvGeom, x: &mut [f32]) {
    col2im_rows(cols, g, 0, g.out_dims[0] * g.out_dims[1], x);
}

/// Adjoint of [`im2col_rows`].
fn col2im_rows(cols: &[f32], g: &ConvGeom, r0: usize, r1: usize, x: &mut [f32]) {
    let [id, ih, iw] = g.in_dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [_, oh, ow] = g.out_dims;
    let p = (r1 - r0) * ow;
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for dz in 0..kd {
            for dy in 0..kh {
                for dx in 0..kw {
                    let (lo, hi) = valid_range(ow, iw, sw, dx, pw);
                    let src = &cols[row * p..(row + 1) * p];
                    for (r, seg) in (r0..r1).zip(src.chunks_exact(ow)) {
                        let zi = ((r / oh) * sd + dz) as isize - pd as isize;
                        let yi = ((r % oh) * sh + dy) as isize - ph as isize;
                        if zi < 0 || zi >= id as isize || yi < 0 || yi >= ih as isize {
                            continue;
                        }
                        let base = (zi as usize * ih + yi as usize) * iw;
                        let dst = &mut xc[base..base + iw];
                        if sw == 1 {
                            let d = &mut dst[lo + dx - pw..hi + dx - pw];
                            for (a, &v) in d.iter_mut().zip(&seg[lo..hi]) {
                                *a += v;
                            }
                        } else {
                            for xo in lo..hi {
                                dst[xo * sw + dx - pw] += seg[xo];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Flat output-row ranges `r0..r1` whose unfolded columns fit one tile.
fn row_tiles(g: &ConvGeom) -> impl Iterator<Item = (usize, usize)> {
    let rows = g.out_dims[0] * g.out_dims[1];
    let per = (TILE_COLUMNS / g.out_dims[2].max(1)).max(1);
    (0..rows).step_by(per).map(move |r0| (r0, (r0 + per).min(rows)))
}

/// Batched convolution. `w` is `out_channels × col_rows`; returns
/// `batch × out_channels × out_size`.
pub(crate) fn conv_forward(
    exec: Exec,
    x: &[f32],
    batch: usize,
    g: &ConvGeom,
    w: &[f32],
    bias: &[f32],
) -> Vec<f32> {
    let co = bias.len();
    let (k, p, in_len, ow) = (g.col_rows(), g.out_size(), g.channels * g.in_size(), g.out_dims[2]);
    let per_image = par::map_range(exec, batch, |b| {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let mut out = vec![0.0; co * p];
        for (o, row) in out.chunks_exact_mut(p).enumerate() {
            row.fill(bias[o]);
        }
        if g.is_pointwise() {
            gemm(co, k, p, w, false, xb, false, 1.0, &mut out);
            return out;
        }
        let mut cols = Vec::new();
        for (r0, r1) in row_tiles(g) {
            let n = (r1 - r0) * ow;
            cols.resize(k * n, 0.0);
            im2col_rows(xb, g, r0, r1, &mut cols);
            gemm_strided(co, k, n, w, (k, 1), &cols, (n, 1), 1.0, &mut out[r0 * ow..], p);
        }
        out
    });
    per_image.concat()
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

type ImageGrads = (Option<Vec<f32>>, Vec<f32>, Vec<f32>);

/// Concatenates per-image input gradients and sums weight and bias gradients
/// in image order.
fn reduce_grads(parts: Vec<ImageGrads>, lens: [usize; 3], need_dx: bool) -> ConvGrads {
    let [dx_len, dw_len, db_len] = lens;
    let mut out = ConvGrads {
        dx: need_dx.then(|| Vec::with_capacity(dx_len)),
        dw: vec![0.0; dw_len],
        db: vec![0.0; db_len],
    };
    for (dx, dw, db) in parts {
        if let (Some(acc), Some(dx)) = (out.dx.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
        out.dw.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        out.db.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    exec: Exec,
    x: &[f32],
    batch: usize,
    g: &ConvGeom,
    w: &[f32],
    co: usize,
    dout: &[f32],
    need_dx: bool,
) -> ConvGrads {
    let (k, p, in_len, ow) = (g.col_rows(), g.out_size(), g.channels * g.in_size(), g.out_dims[2]);
    let parts = par::map_range(exec, batch, |b| {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let go = &dout[b * co * p..(b + 1) * co * p];
        let db: Vec<f32> = go.chunks_exact(p).map(|r| r.iter().sum()).collect();
        let mut dw = vec![0.0; co * k];
        if g.is_pointwise() {
            gemm(co, p, k, go, false, xb, true, 0.0, &mut dw);
            let dx = need_dx.then(|| {
                let mut dx = vec![0.0; in_len];
                gemm(k, co, p, w, true, go, false, 0.0, &mut dx);
                dx
            });
            return (dx, dw, db);
        }
        let mut dx = need_dx.then(|| vec![0.0; in_len]);
        let (mut cols, mut dcols) = (Vec::new(), Vec::new());
        for (r0, r1) in row_tiles(g) {
            let (c0, n) = (r0 * ow, (r1 - r0) * ow);
            cols.resize(k * n, 0.0);
            im2col_rows(xb, g, r0, r1, &mut cols);
            gemm_strided(co, n, k, &go[c0..], (p, 1), &cols, (1, n), 1.0, &mut dw, k);
            if let Some(dx) = dx.as_mut() {
                dcols.resize(k * n, 0.0);
                gemm_strided(k, co, n, w, (1, k), &go[c0..], (p, 1), 0.0, &mut dcols, n);
                col2im_rows(&dcols, g, r0, r1, dx);
            }
        }
        (dx, dw, db)
    });
    reduce_grads(parts, [batch * in_len, co * k, co], need_dx)
}

/// Batched transposed convolution. `g` describes the *forward* convolution
/// whose input is this op's output (`channels` = output channels) and whose
/// output is this op's input. `w` is `in_channels × col_rows`.
pub(crate) fn conv_transpose_forward(
    exec: Exec,
    x: &[f32],
    batch: usize,
    ci: usize,
    g: &ConvGeom,
    w: &[f32],
    bias: &[f32],
) -> Vec<f32> {
    let (k, p, ow) = (g.col_rows(), g.out_size(), g.out_dims[2]);
    let out_len = g.channels * g.in_size();
    let per_image = par::map_range(exec, batch, |b| {
        let xb = &x[b * ci * p..(b + 1) * ci * p];
        let mut out = vec![0.0; out_len];
        let mut cols = Vec::new();
        for (r0, r1) in row_tiles(g) {
            let (c0, n) = (r0 * ow, (r1 - r0) * ow);
            cols.resize(k * n, 0.0);
            gemm_strided(k, ci, n, w, (1, k), &xb[c0..], (p, 1), 0.0, &mut cols, n);
            col2im_rows(&cols, g, r0, r1, &mut out);
        }
        let plane = g.in_size();
        for (c, chunk) in out.chunks_exact_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bias[c]);
        }
        out
    });
    per_image.concat()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward(
    exec: Exec,
    x: &[f32],
    batch: usize,
    ci: usize,
    g: &ConvGeom,
    w: &[f32],
    dout: &[f32],
    need_dx: bool,
) -> ConvGrads {
    let (k, p, ow) = (g.col_rows(), g.out_size(), g.out_dims[2]);
    let out_len = g.channels * g.in_size();
    let parts = par::map_range(exec, batch, |b| {
        let go = &dout[b * out_len..(b + 1) * out_len];
        let xb = &x[b * ci * p..(b + 1) * ci * p];
        let db: Vec<f32> = go.chunks_exact(g.in_size()).map(|r| r.iter().sum()).collect();
        let mut dw = vec![0.0; ci * k];
        let mut dx = need_dx.then(|| vec![0.0; ci * p]);
        let mut dcols = Vec::new();
        for (r0, r1) in row_tiles(g) {
            let (c0, n) = (r0 * ow, (r1 - r0) * ow);
            dcols.resize(k * n, 0.0);
            im2col_rows(go, g, r0, r1, &mut dcols);
            gemm_strided(ci, n, k, &xb[c0..], (p, 1), &dcols, (1, n), 1.0, &mut dw, k);
            if let Some(dx) = dx.as_mut() {
                gemm_strided(ci, k, n, w, (k, 1), &dcols, (n, 1), 0.0, &mut dx[c0..], p);
            }
        }
        (dx, dw, db)
    });
    reduce_grads(parts, [batch * ci * p, ci * k, g.channels], need_dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f32]) -> Vec<f32> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_flags() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.91).cos()).collect();
        let want = naive_gemm(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, a_t) in [(&a, false), (&at, true)] {
            for (bb, b_t) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, a_t, bb, b_t, 0.0, &mut c);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, [3, 5, 4], [2, 3, 3], [1, 2, 1], [1, 1, 0]).unwrap();
        let x: Vec<f32> = (0..2 * g.in_size()).map(|i| (i as f32 * 0.13).sin()).collect();
        let y: Vec<f32> = (0..g.col_rows() * g.out_size())
            .map(|i| (i as f32 * 0.29).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
    }

    fn close(a: &[f32], b: &[f32]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn tiled_convolutions_match_one_shot_unfolding() {
        let g = ConvGeom::new(2, [3, 80, 130], [3, 3, 3], [1, 2, 1], [1, 1, 1]).unwrap();
        assert!(row_tiles(&g).count() > 2);
        let (k, p, co) = (g.col_rows(), g.out_size(), 3);
        let wave = |n: usize, f: f32| -> Vec<f32> { (0..n).map(|i| (i as f32 * f).sin()).collect() };
        let x = wave(2 * g.in_size(), 0.37);
        let w = wave(co * k, 0.11);
        let bias = vec![0.5, -0.25, 0.0];
        let go = wave(co * p, 0.23);
        let mut cols = vec![0.0; k * p];
        im2col(&x, &g, &mut cols);

        let mut want = naive_gemm(co, k, p, &w, &cols);
        for (o, row) in want.chunks_exact_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v += bias[o]);
        }
        close(&conv_forward(Exec::Sequential, &x, 1, &g, &w, &bias), &want);

        let grads = conv_backward(Exec::Sequential, &x, 1, &g, &w, co, &go, true);
        close(&grads.dw, &naive_gemm(co, p, k, &go, &transpose(k, p, &cols)));
        let mut dx = vec![0.0; x.len()];
        col2im(&naive_gemm(k, co, p, &transpose(co, k, &w), &go), &g, &mut dx);
        close(grads.dx.as_ref().unwrap(), &dx);

        // Transposed convolution reading `go` (co × p) and writing 2 channels.
        let wt = wave(co * k, 0.07);
        let tb = vec![0.1, -0.1];
        let mut out = vec![0.0; 2 * g.in_size()];
        col2im(&naive_gemm(k, co, p, &transpose(co, k, &wt), &go), &g, &mut out);
        for (c, plane) in out.chunks_exact_mut(g.in_size()).enumerate() {
            plane.iter_mut().for_each(|v| *v += tb[c]);
        }
        close(&conv_transpose_forward(Exec::Sequential, &go, 1, co, &g, &wt, &tb), &out);

        let tg = conv_transpose_backward(Exec::Sequential, &go, 1, co, &g, &wt, &x, true);
        close(&tg.dw, &naive_gemm(co, p, k, &go, &transpose(k, p, &cols)));
        close(tg.dx.as_ref().unwrap(), &naive_gemm(co, k, p, &wt, &cols));
    }

    #[test]
    fn geometry_rejects_oversized_kernels() {
        assert!(ConvGeom::new(1, [1, 2, 2], [1, 3, 3], [1, 1, 1], [0, 0, 0]).is_none());
        assert!(ConvGeom::new(1, [1, 2, 2], [1, 3, 3], [1, 1, 1], [0, 1, 1]).is_some());
        assert!(ConvGeom::new(1, [1, 4, 4], [1, 2, 2], [1, 0, 2], [0, 0, 0]).is_none());
    }
}
