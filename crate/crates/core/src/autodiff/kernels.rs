//! Dense f64 kernels used by the tape. Layouts are row-major; image tensors
//! are `[N, C, H, W]`.

use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
    fn cols_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one sample into a `(cin*k*k) x (oh*ow)` matrix.
fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut cols = vec![0.0; g.cols_rows() * p];
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a column matrix back into one sample, accumulating overlaps.
fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let p = g.out_plane();
    let kk = g.cols_rows();
    let mut out = vec![0.0; g.n * g.cout * p];
    let in_sample = g.cin * g.h * g.w;
    for n in 0..g.n {
        let cols = im2col(g, &x[n * in_sample..(n + 1) * in_sample]);
        let dst = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        exec::for_each_chunk_mut(dst, p, |co, row| {
            if let Some(b) = b {
                row.fill(b[co]);
            }
            let wrow = &w[co * kk..(co + 1) * kk];
            for (j, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let c = &cols[j * p..(j + 1) * p];
                for (o, &cv) in row.iter_mut().zip(c) {
                    *o += wv * cv;
                }
            }
        });
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let p = g.out_plane();
    let kk = g.cols_rows();
    let in_sample = g.cin * g.h * g.w;
    let all_cols: Vec<Vec<f64>> =
        exec::map_indexed(g.n, |n| im2col(g, &x[n * in_sample..(n + 1) * in_sample]));

    let mut dw = vec![0.0; g.cout * kk];
    exec::for_each_chunk_mut(&mut dw, kk, |co, dwrow| {
        for (n, cols) in all_cols.iter().enumerate() {
            let d = &dout[(n * g.cout + co) * p..(n * g.cout + co + 1) * p];
            for (j, acc) in dwrow.iter_mut().enumerate() {
                let c = &cols[j * p..(j + 1) * p];
                *acc += d.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    });
    let mut db = vec![0.0; g.cout];
    for n in 0..g.n {
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += dout[(n * g.cout + co) * p..(n * g.cout + co + 1) * p]
                .iter()
                .sum::<f64>();
        }
    }

    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; g.n * in_sample];
        exec::for_each_chunk_mut(&mut dx, in_sample, |n, dxn| {
            let mut dcols = vec![0.0; kk * p];
            for co in 0..g.cout {
                let d = &dout[(n * g.cout + co) * p..(n * g.cout + co + 1) * p];
                let wrow = &w[co * kk..(co + 1) * kk];
                for (j, &wv) in wrow.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    let dc = &mut dcols[j * p..(j + 1) * p];
                    for (a, &b) in dc.iter_mut().zip(d) {
                        *a += wv * b;
                    }
                }
            }
            col2im(g, &dcols, dxn);
        });
        dx
    });
    (dx, dw, db)
}

/// Transposed convolution with kernel size equal to stride (non-overlapping
/// blocks). Weight layout `[cin, cout, s, s]`.
pub fn conv_transpose_forward(
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    s: usize,
    x: &[f64],
    wt: &[f64],
    b: Option<&[f64]>,
) -> Vec<f64> {
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0; n * cout * oh * ow];
    exec::for_each_chunk_mut(&mut out, oh * ow, |nc, plane| {
        let (ni, co) = (nc / cout, nc % cout);
        if let Some(b) = b {
            plane.fill(b[co]);
        }
        for ci in 0..cin {
            let xin = &x[(ni * cin + ci) * h * w..(ni * cin + ci + 1) * h * w];
            let k = &wt[(ci * cout + co) * s * s..(ci * cout + co + 1) * s * s];
            for y in 0..h {
                for xx in 0..w {
                    let v = xin[y * w + xx];
                    for a in 0..s {
                        for c in 0..s {
                            plane[(y * s + a) * ow + xx * s + c] += v * k[a * s + c];
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward(
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    s: usize,
    x: &[f64],
    wt: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (h * s, w * s);
    let mut dx = vec![0.0; n * cin * h * w];
    exec::for_each_chunk_mut(&mut dx, h * w, |nc, plane| {
        let (ni, ci) = (nc / cin, nc % cin);
        for co in 0..cout {
            let d = &dout[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            let k = &wt[(ci * cout + co) * s * s..(ci * cout + co + 1) * s * s];
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for a in 0..s {
                        for c in 0..s {
                            acc += d[(y * s + a) * ow + xx * s + c] * k[a * s + c];
                        }
                    }
                    plane[y * w + xx] += acc;
                }
            }
        }
    });
    let mut dw = vec![0.0; cin * cout * s * s];
    exec::for_each_chunk_mut(&mut dw, s * s, |cc, k| {
        let (ci, co) = (cc / cout, cc % cout);
        for ni in 0..n {
            let xin = &x[(ni * cin + ci) * h * w..(ni * cin + ci + 1) * h * w];
            let d = &dout[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            for y in 0..h {
                for xx in 0..w {
                    let v = xin[y * w + xx];
                    for a in 0..s {
                        for c in 0..s {
                            k[a * s + c] += v * d[(y * s + a) * ow + xx * s + c];
                        }
                    }
                }
            }
        }
    });
    let mut db = vec![0.0; cout];
    for ni in 0..n {
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += dout[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow]
                .iter()
                .sum::<f64>();
        }
    }
    (dx, dw, db)
}

/// Source taps for bilinear upsampling by an integer factor with
/// half-pixel centres: `(i0, i1, frac)` per output index.
pub fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_forward(planes: usize, h: usize, w: usize, f: usize, x: &[f64]) -> Vec<f64> {
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; planes * oh * ow];
    exec::for_each_chunk_mut(&mut out, oh * ow, |pi, plane| {
        let src = &x[pi * h * w..(pi + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                plane[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    });
    out
}

pub fn upsample_backward(planes: usize, h: usize, w: usize, f: usize, dout: &[f64]) -> Vec<f64> {
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let (oh, ow) = (h * f, w * f);
    let mut dx = vec![0.0; planes * h * w];
    exec::for_each_chunk_mut(&mut dx, h * w, |pi, plane| {
        let d = &dout[pi * oh * ow..(pi + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = d[oy * ow + ox];
                plane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += g * (1.0 - fy) * fx;
                plane[y1 * w + x0] += g * fy * (1.0 - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    });
    dx
}

/// `out[m x n] = a[m x k] * b[k x n]` (or `b^T` when `trans_b`, with `b`
/// stored `n x k`).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, trans_b: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        if trans_b {
            for (j, o) in orow.iter_mut().enumerate() {
                *o = arow
                    .iter()
                    .zip(&b[j * k..(j + 1) * k])
                    .map(|(x, y)| x * y)
                    .sum();
            }
        } else {
            for (l, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&b[l * n..(l + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// `out[k x n] += a[m x k]^T * d[m x n]`.
pub fn matmul_at_acc(a: &[f64], d: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let drow = &d[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &dv) in out[l * n..(l + 1) * n].iter_mut().zip(drow) {
                *o += av * dv;
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax over consecutive rows of length `len`.
pub fn softmax_rows(data: &mut [f64], len: usize) {
    for row in data.chunks_mut(len) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}
