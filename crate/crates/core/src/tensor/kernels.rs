//! Raw `f32` kernels behind the tensor ops. Everything here works on flat
//! row-major buffers and knows nothing about autograd.

/// Left-pads `shape` with ones up to `rank`.
pub(crate) fn padded(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1; rank - shape.len()];
    out.extend_from_slice(shape);
    out
}

pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (padded(a, rank), padded(b, rank));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Strides of `shape` (already padded to the output rank) when read as if
/// broadcast to `out`: broadcast dimensions get stride zero.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Merges adjacent output dimensions whenever every input walks them as
/// one contiguous run, so the innermost loop is as long as possible.
fn coalesce<const K: usize>(out: &[usize], inputs: [&[usize]; K]) -> (Vec<usize>, [Vec<usize>; K]) {
    let rank = out.len();
    let strides: [Vec<usize>; K] = inputs.map(|s| broadcast_strides(&padded(s, rank), out));
    let mut dims: Vec<usize> = Vec::with_capacity(rank);
    let mut merged: [Vec<usize>; K] = std::array::from_fn(|_| Vec::with_capacity(rank));
    for d in 0..rank {
        if out[d] == 1 {
            continue;
        }
        if !dims.is_empty() {
            let joinable = (0..K).all(|k| *merged[k].last().unwrap() == strides[k][d] * out[d]);
            if joinable {
                *dims.last_mut().unwrap() *= out[d];
                for k in 0..K {
                    *merged[k].last_mut().unwrap() = strides[k][d];
                }
                continue;
            }
        }
        dims.push(out[d]);
        for k in 0..K {
            merged[k].push(strides[k][d]);
        }
    }
    if dims.is_empty() {
        dims.push(1);
        for m in merged.iter_mut() {
            m.push(0);
        }
    }
    (dims, merged)
}

/// Walks `out` in row-major order one innermost run at a time. `f` gets
/// the linear output offset of the run, each input's base offset, the run
/// length and each input's stride along the run.
fn for_each_run<const K: usize>(
    out: &[usize],
    inputs: [&[usize]; K],
    mut f: impl FnMut(usize, [usize; K], usize, [usize; K]),
) {
    if out.iter().product::<usize>() == 0 {
        return;
    }
    let (dims, strides) = coalesce(out, inputs);
    let rank = dims.len();
    let inner = dims[rank - 1];
    let inner_strides: [usize; K] = std::array::from_fn(|k| strides[k][rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut base = [0usize; K];
    let mut linear = 0;
    loop {
        f(linear, base, inner, inner_strides);
        linear += inner;
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            for k in 0..K {
                base[k] += strides[k][d];
            }
            if idx[d] < dims[d] {
                break;
            }
            for k in 0..K {
                base[k] -= strides[k][d] * dims[d];
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn zip_map(
    a: &[f32],
    a_shape: &[usize],
    b: &[f32],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f32, f32) -> f32,
) -> Vec<f32> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    for_each_run(out_shape, [a_shape, b_shape], |l, [ba, bb], n, [sa, sb]| {
        let dst = &mut out[l..l + n];
        match (sa, sb) {
            (1, 1) => {
                for ((o, &x), &y) in dst.iter_mut().zip(&a[ba..ba + n]).zip(&b[bb..bb + n]) {
                    *o = f(x, y);
                }
            }
            (1, 0) => {
                let y = b[bb];
                for (o, &x) in dst.iter_mut().zip(&a[ba..ba + n]) {
                    *o = f(x, y);
                }
            }
            (0, 1) => {
                let x = a[ba];
                for (o, &y) in dst.iter_mut().zip(&b[bb..bb + n]) {
                    *o = f(x, y);
                }
            }
            _ => {
                for (i, o) in dst.iter_mut().enumerate() {
                    *o = f(a[ba + i * sa], b[bb + i * sb]);
                }
            }
        }
    });
    out
}

pub(crate) fn broadcast_to(x: &[f32], shape: &[usize], out_shape: &[usize]) -> Vec<f32> {
    if shape == out_shape {
        return x.to_vec();
    }
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    for_each_run(out_shape, [shape], |l, [bx], n, [sx]| {
        let dst = &mut out[l..l + n];
        if sx == 0 {
            dst.fill(x[bx]);
        } else {
            for (i, o) in dst.iter_mut().enumerate() {
                *o = x[bx + i * sx];
            }
        }
    });
    out
}

/// Sums `x` down to `target`, which must broadcast to `shape`.
pub(crate) fn sum_to(x: &[f32], shape: &[usize], target: &[usize]) -> Vec<f32> {
    if shape == target {
        return x.to_vec();
    }
    let numel: usize = target.iter().product();
    let mut acc = vec![0.0f64; numel];
    for_each_run(shape, [target], |l, [bt], n, [st]| {
        let src = &x[l..l + n];
        if st == 0 {
            acc[bt] += src.iter().map(|&v| v as f64).sum::<f64>();
        } else {
            for (i, &v) in src.iter().enumerate() {
                acc[bt + i * st] += v as f64;
            }
        }
    });
    acc.into_iter().map(|v| v as f32).collect()
}

/// Row-major `c = a · b + beta · c` with explicit strides on the inputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), 0.0, &mut c);
    c
}

pub(crate) fn transpose2(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Writes the patches of one sample into columns `off..off + out_h*out_w`
/// of `cols`, a `[patch_len, ld]` matrix.
fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32], ld: usize, off: usize) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w) = (g.height as isize, g.width as isize);
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * ld + off..row * ld + off + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = valid_range(kj, g.pad, ow, g.width);
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        if lo < hi {
                            let s0 = lo + kj - g.pad;
                            line[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns `off..` of `cols` into one
/// sample's gradient.
fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32], ld: usize, off: usize) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w) = (g.height as isize, g.width as isize);
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * ld + off..row * ld + off + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = valid_range(kj, g.pad, ow, g.width);
                        if lo < hi {
                            let s0 = lo + kj - g.pad;
                            for (d, &v) in line[s0..s0 + hi - lo].iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Output columns `[lo, hi)` whose stride-1 input column `ox + kj - pad`
/// falls inside `0..width`.
fn valid_range(kj: usize, pad: usize, ow: usize, width: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj).min(ow);
    let hi = (width + pad).saturating_sub(kj).min(ow).max(lo);
    (lo, hi)
}

pub(crate) fn conv2d(x: &[f32], weight: &[f32], batch: usize, g: &ConvGeom) -> Vec<f32> {
    let (l, p) = (g.out_h() * g.out_w(), g.patch_len());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * l;
    let mut out = vec![0.0; batch * out_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; p * l] };
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let src: &[f32] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols, l, 0);
            &cols
        };
        gemm(
            g.out_channels,
            p,
            l,
            weight,
            (p, 1),
            src,
            (l, 1),
            0.0,
            &mut out[n * out_len..(n + 1) * out_len],
        );
    }
    out
}

pub(crate) fn conv2d_input_grad(grad: &[f32], weight: &[f32], batch: usize, g: &ConvGeom) -> Vec<f32> {
    let (l, p) = (g.out_h() * g.out_w(), g.patch_len());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * l;
    let mut dx = vec![0.0; batch * in_len];
    let mut cols = vec![0.0; p * l];
    for n in 0..batch {
        let gn = &grad[n * out_len..(n + 1) * out_len];
        let dxn = &mut dx[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            gemm(p, g.out_channels, l, weight, (1, p), gn, (l, 1), 0.0, dxn);
        } else {
            gemm(p, g.out_channels, l, weight, (1, p), gn, (l, 1), 0.0, &mut cols);
            col2im(&cols, g, dxn, l, 0);
        }
    }
    dx
}

pub(crate) fn conv2d_weight_grad(x: &[f32], grad: &[f32], batch: usize, g: &ConvGeom) -> Vec<f32> {
    let (l, p) = (g.out_h() * g.out_w(), g.patch_len());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * l;
    let mut dw = vec![0.0; g.out_channels * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; p * l] };
    let mut rows = vec![0.0; p * l];
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let src: &[f32] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols, l, 0);
            &cols
        };
        let gn = &grad[n * out_len..(n + 1) * out_len];
        transpose_into(src, p, l, &mut rows);
        gemm(g.out_channels, l, p, gn, (l, 1), &rows, (p, 1), 1.0, &mut dw);
    }
    dw
}

/// Cache-blocked transpose of a `rows × cols` row-major matrix into `out`.
fn transpose_into(x: &[f32], rows: usize, cols: usize, out: &mut [f32]) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
        }
    }
}

/// 2×2 average pooling with stride 2 over the trailing two dimensions.
pub(crate) fn avg_pool2(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling over the trailing two dimensions.
pub(crate) fn upsample2(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Shifts each sample by its own integer offset, filling with zeros.
pub(crate) fn translate(x: &[f32], shape: &[usize], shifts: &[(isize, isize)]) -> Vec<f32> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![0.0; x.len()];
    for (s, &(dy, dx)) in shifts.iter().enumerate().take(n) {
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            for y in 0..h as isize {
                let sy = y - dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w as isize {
                    let sx = xx - dx;
                    if sx >= 0 && sx < w as isize {
                        out[base + (y as usize) * w + xx as usize] = x[base + (sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    out
}

/// Max pooling over the trailing two dimensions; returns the values and the
/// flat input index each output was taken from.
pub(crate) fn max_pool(
    x: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, Vec<usize>, usize, usize) {
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                idx.push(best_i);
            }
        }
    }
    (out, idx, oh, ow)
}
