//! Reverse-mode differentiation over a linear tape of f64 tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Parameters are
//! leaves bound to a slice of a flat parameter vector; [`Graph::backward`]
//! returns the gradient of a scalar node laid out like that vector.

pub mod kernels;

use thiserror::Error;

use kernels::ConvGeom;

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite gradient at parameter index {index}")]
    NonFinite { index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param {
        offset: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    SoftmaxLast(Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose12(Var),
    Concat1(Vec<Var>),
    Slice1 {
        x: Var,
        start: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        pe: Option<Var>,
        heads: usize,
        probs: Vec<f64>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    WeightedBce {
        x: Var,
        target: Vec<u8>,
        weights: [f64; 2],
        eps: f64,
    },
    Mse {
        x: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape plus the flat parameter vector its parameter leaves read from.
pub struct Graph<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Parameter leaf reading `params[offset..offset + len]`.
    pub fn param(&mut self, offset: usize, shape: Vec<usize>) -> Var {
        let n: usize = shape.iter().product();
        let data = self.params[offset..offset + n].to_vec();
        self.push(Tensor::new(shape, data), Op::Param { offset }, true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws[1], xs[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k: ws[2],
            stride,
            pad,
        };
        let data = kernels::conv2d_forward(
            &geom,
            &self.value(x).data,
            &self.value(w).data,
            b.map(|b| self.value(b).data.as_slice()),
        );
        let shape = vec![geom.n, geom.cout, geom.out_h(), geom.out_w()];
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(Tensor::new(shape, data), Op::Conv2d { x, w, b, geom }, ng)
    }

    /// Transposed convolution whose kernel equals its stride; `w` is
    /// `[cin, cout, s, s]`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws[0], xs[1]);
        let (cout, s) = (ws[1], ws[2]);
        let data = kernels::conv_transpose_forward(
            xs[0],
            xs[1],
            xs[2],
            xs[3],
            cout,
            s,
            &self.value(x).data,
            &self.value(w).data,
            b.map(|b| self.value(b).data.as_slice()),
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(
            Tensor::new(vec![xs[0], cout, xs[2] * s, xs[3] * s], data),
            Op::ConvTranspose { x, w, b, stride: s },
            ng,
        )
    }

    /// Batch normalization with batch statistics over `(N, H, W)`.
    /// Returns the output and the per-channel batch mean and unbiased
    /// variance for running-estimate updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let xs = self.shape(x).to_vec();
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let m = (n * plane) as f64;
        let xv = &self.value(x).data;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                s += xv[(ni * c + ci) * plane..(ni * c + ci + 1) * plane].iter().sum::<f64>();
            }
            mean[ci] = s / m;
            let mut q = 0.0;
            for ni in 0..n {
                q += xv[(ni * c + ci) * plane..(ni * c + ci + 1) * plane]
                    .iter()
                    .map(|v| (v - mean[ci]) * (v - mean[ci]))
                    .sum::<f64>();
            }
            var[ci] = q / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..xv.len() {
            let ci = (i / plane) % c;
            xhat[i] = (xv[i] - mean[ci]) * inv_std[ci];
            out[i] = g[ci] * xhat[i] + b[ci];
        }
        let unbiased: Vec<f64> = var
            .iter()
            .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
            .collect();
        let ng = self.ng(&[x, gamma, beta]);
        let y = self.push(
            Tensor::new(xs, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        );
        (y, mean, unbiased)
    }

    /// Batch normalization with fixed statistics (inference).
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        let (c, plane) = (xs[1], xs[2] * xs[3]);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let out: Vec<f64> = self
            .value(x)
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ci = (i / plane) % c;
                g[ci] * (v - mean[ci]) * inv_std[ci] + b[ci]
            })
            .collect();
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            Tensor::new(xs, out),
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            ng,
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().expect("layer_norm needs rank >= 1");
        let xv = &self.value(x).data;
        let rows = xv.len() / d;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            Tensor::new(xs, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|&v| f(v)).collect());
        let ng = self.ng(&[x]);
        self.push(out, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape.clone(), data);
        let ng = self.ng(&[a, b]);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let data = self.value(x).data.clone();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, data), Op::Reshape(x), ng)
    }

    /// 3x3 max pooling, stride 2, padding 1.
    pub fn max_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
        let xv = &self.value(x).data;
        let mut out = vec![0.0; planes * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let idx = p * h * w + iy as usize * w + ix as usize;
                            if xv[idx] > best {
                                best = xv[idx];
                                arg = idx;
                            }
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = arg;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(vec![xs[0], xs[1], oh, ow], out),
            Op::MaxPool { x, argmax },
            ng,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape.last().expect("rank >= 1");
        let mut data = t.data.clone();
        kernels::softmax_rows(&mut data, d);
        let out = Tensor::new(t.shape.clone(), data);
        let ng = self.ng(&[x]);
        self.push(out, Op::SoftmaxLast(x), ng)
    }

    /// Batched matmul: `a [N,m,k] x b [N,k,n]`, or `b^T` with `b [N,n,k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0]);
        let (bn, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            assert_eq!(sb[2], k);
            sb[1]
        } else {
            assert_eq!(sb[1], k);
            sb[2]
        };
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut out = Vec::with_capacity(bn * m * n);
        for i in 0..bn {
            out.extend(kernels::matmul(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                trans_b,
            ));
        }
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(vec![bn, m, n], out), Op::Bmm { a, b, trans_b }, ng)
    }

    /// `[N, a, b] -> [N, b, a]`.
    pub fn transpose12(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, a, b) = (s[0], s[1], s[2]);
        let xv = &self.value(x).data;
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for r in 0..a {
                for c in 0..b {
                    out[(i * b + c) * a + r] = xv[(i * a + r) * b + c];
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![n, b, a], out), Op::Transpose12(x), ng)
    }

    /// Concatenation along axis 1.
    pub fn concat1(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            assert_eq!(s[0], outer);
            assert_eq!(s[2..], first[2..]);
            total += s[1];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let len = t.shape[1] * inner;
                out.extend_from_slice(&t.data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        let ng = self.ng(parts);
        self.push(Tensor::new(shape, out), Op::Concat1(parts.to_vec()), ng)
    }

    /// `x[:, start..start + len, ...]`.
    pub fn slice1(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start + len <= s[1]);
        let inner: usize = s[2..].iter().product();
        let xv = &self.value(x).data;
        let mut out = Vec::with_capacity(s[0] * len * inner);
        for o in 0..s[0] {
            let base = o * s[1] * inner;
            out.extend_from_slice(&xv[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, out), Op::Slice1 { x, start }, ng)
    }

    /// `x [..., cin] * w [cin, cout] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let cin = *xs.last().expect("rank >= 1");
        assert_eq!(ws[0], cin, "linear input width mismatch");
        let cout = ws[1];
        let rows = self.value(x).len() / cin;
        let mut out = kernels::matmul(&self.value(x).data, &self.value(w).data, rows, cin, cout, false);
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for row in out.chunks_mut(cout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = cout;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, ng)
    }

    /// Multi-head scaled dot-product attention. `q [N,Tq,H*d]`,
    /// `k, v [N,Tk,H*d]`; `pe [H,Tq,d]` is added to each head's output.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, pe: Option<Var>, heads: usize) -> Var {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let (n, tq, hd) = (qs[0], qs[1], qs[2]);
        let tk = ks[1];
        assert_eq!(hd % heads, 0);
        assert_eq!(self.shape(v), ks.as_slice());
        let d = hd / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qv, kv, vv) = (&self.value(q).data, &self.value(k).data, &self.value(v).data);
        let pev = pe.map(|p| {
            assert_eq!(self.shape(p), &[heads, tq, d]);
            &self.value(p).data
        });
        let mut probs = vec![0.0; n * heads * tq * tk];
        let mut out = vec![0.0; n * tq * hd];
        for ni in 0..n {
            for h in 0..heads {
                let pb = &mut probs[((ni * heads + h) * tq) * tk..((ni * heads + h + 1) * tq) * tk];
                for i in 0..tq {
                    let qrow = &qv[(ni * tq + i) * hd + h * d..(ni * tq + i) * hd + (h + 1) * d];
                    for j in 0..tk {
                        let krow = &kv[(ni * tk + j) * hd + h * d..(ni * tk + j) * hd + (h + 1) * d];
                        pb[i * tk + j] = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                }
                kernels::softmax_rows(pb, tk);
                for i in 0..tq {
                    let orow = &mut out[(ni * tq + i) * hd + h * d..(ni * tq + i) * hd + (h + 1) * d];
                    for j in 0..tk {
                        let p = pb[i * tk + j];
                        let vrow = &vv[(ni * tk + j) * hd + h * d..(ni * tk + j) * hd + (h + 1) * d];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                    if let Some(pe) = pev {
                        let prow = &pe[(h * tq + i) * d..(h * tq + i + 1) * d];
                        for (o, &x) in orow.iter_mut().zip(prow) {
                            *o += x;
                        }
                    }
                }
            }
        }
        let mut deps = vec![q, k, v];
        deps.extend(pe);
        let ng = self.ng(&deps);
        self.push(
            Tensor::new(vec![n, tq, hd], out),
            Op::Attention {
                q,
                k,
                v,
                pe,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Attention probabilities `[N, H, Tq, Tk]` of an attention node.
    pub fn attention_probs(&self, a: Var) -> Option<&[f64]> {
        match &self.nodes[a.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Bilinear upsampling of an NCHW tensor by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let s = self.shape(x).to_vec();
        let data = kernels::upsample_forward(s[0] * s[1], s[2], s[3], factor, &self.value(x).data);
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(vec![s[0], s[1], s[2] * factor, s[3] * factor], data),
            Op::Upsample { x, factor },
            ng,
        )
    }

    /// Class-weighted binary cross-entropy of two-channel probabilities
    /// `x [N,2,H,W]` against a one-hot encoding of `target [N*H*W]`,
    /// averaged over pixels. Probabilities are clamped to `[eps, 1-eps]`.
    pub fn weighted_bce(&mut self, x: Var, target: &[u8], weights: [f64; 2], eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s[1], 2, "two-channel scores expected");
        let plane = s[2] * s[3];
        assert_eq!(target.len(), s[0] * plane);
        let xv = &self.value(x).data;
        let mut total = 0.0;
        for n in 0..s[0] {
            for p in 0..plane {
                let y = target[n * plane + p] as usize;
                let mut l = 0.0;
                for c in 0..2 {
                    let pr = xv[(n * 2 + c) * plane + p].clamp(eps, 1.0 - eps);
                    let t = if c == y { 1.0 } else { 0.0 };
                    l -= t * pr.ln() + (1.0 - t) * (1.0 - pr).ln();
                }
                total += weights[y] * 0.5 * l;
            }
        }
        let value = total / (s[0] * plane) as f64;
        let ng = self.ng(&[x]);
        self.push(
            Tensor::scalar(value),
            Op::WeightedBce {
                x,
                target: target.to_vec(),
                weights,
                eps,
            },
            ng,
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[f64]) -> Var {
        let xv = &self.value(x).data;
        assert_eq!(xv.len(), target.len());
        let value = xv
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / xv.len() as f64;
        let ng = self.ng(&[x]);
        self.push(
            Tensor::scalar(value),
            Op::Mse {
                x,
                target: target.to_vec(),
            },
            ng,
        )
    }

    /// Gradient of scalar `root` w.r.t. every parameter leaf, laid out like
    /// the parameter vector. Parameters not on the tape get zero.
    /// Branch taken by every piecewise op on the tape: ReLU and abs signs,
    /// max-pool winners and BCE clamping. Two evaluations with equal patterns
    /// lie on the same smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.value(*x).data.iter().map(|&v| (v > 0.0) as usize)),
                Op::Abs(x) => out.extend(self.value(*x).data.iter().map(|&v| (v >= 0.0) as usize)),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                Op::WeightedBce { x, eps, .. } => out.extend(
                    self.value(*x)
                        .data
                        .iter()
                        .map(|&v| if v < *eps { 0 } else if v > 1.0 - eps { 2 } else { 1 }),
                ),
                _ => {}
            }
        }
        out
    }

    pub fn backward(&self, root: Var) -> Result<Vec<f64>, GradError> {
        let rs = &self.nodes[root.0].value;
        if rs.len() != 1 {
            return Err(GradError::NotScalar(rs.shape.clone()));
        }
        let mut flat = vec![0.0; self.params.len()];
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, &mut flat);
        }
        if let Some(index) = flat.iter().position(|v| !v.is_finite()) {
            return Err(GradError::NonFinite { index });
        }
        Ok(flat)
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], flat: &mut [f64]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Param { offset } => {
                for (f, d) in flat[*offset..*offset + g.len()].iter_mut().zip(g) {
                    *f += d;
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(geom, &val(*x).data, &val(*w).data, g, wants(*x));
                if let Some(dx) = dx {
                    acc(grads, *x, dx);
                }
                acc(grads, *w, dw);
                if let Some(b) = b {
                    acc(grads, *b, db);
                }
            }
            Op::ConvTranspose { x, w, b, stride } => {
                let xs = &val(*x).shape;
                let cout = val(*w).shape[1];
                let (dx, dw, db) = kernels::conv_transpose_backward(
                    xs[0],
                    xs[1],
                    xs[2],
                    xs[3],
                    cout,
                    *stride,
                    &val(*x).data,
                    &val(*w).data,
                    g,
                );
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                if let Some(b) = b {
                    acc(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = &val(*x).shape;
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let m = (n * plane) as f64;
                let gam = &val(*gamma).data;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for i in 0..g.len() {
                    let ci = (i / plane) % c;
                    dgamma[ci] += g[i] * xhat[i];
                    dbeta[ci] += g[i];
                    let dxh = g[i] * gam[ci];
                    sum_dxhat[ci] += dxh;
                    sum_dxhat_xhat[ci] += dxh * xhat[i];
                }
                if wants(*x) {
                    let dx = (0..g.len())
                        .map(|i| {
                            let ci = (i / plane) % c;
                            let dxh = g[i] * gam[ci];
                            inv_std[ci] / m * (m * dxh - sum_dxhat[ci] - xhat[i] * sum_dxhat_xhat[ci])
                        })
                        .collect();
                    acc(grads, *x, dx);
                }
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = &val(*x).shape;
                let (c, plane) = (s[1], s[2] * s[3]);
                let xv = &val(*x).data;
                let gam = &val(*gamma).data;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for i in 0..g.len() {
                    let ci = (i / plane) % c;
                    let h = (xv[i] - mean[ci]) * inv_std[ci];
                    dgamma[ci] += g[i] * h;
                    dbeta[ci] += g[i];
                    dx[i] = g[i] * gam[ci] * inv_std[ci];
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *val(*x).shape.last().expect("rank >= 1");
                let gam = &val(*gamma).data;
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; g.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let i = r * d + j;
                        dgamma[j] += g[i] * xhat[i];
                        dbeta[j] += g[i];
                        let dxh = g[i] * gam[j];
                        s1 += dxh;
                        s2 += dxh * xhat[i];
                    }
                    for j in 0..d {
                        let i = r * d + j;
                        let dxh = g[i] * gam[j];
                        dx[i] = is / d as f64 * (d as f64 * dxh - s1 - xhat[i] * s2);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::Relu(x) => {
                let xv = &val(*x).data;
                let d = g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                acc(grads, *x, d);
            }
            Op::Gelu(x) => {
                let xv = &val(*x).data;
                let d = g.iter().zip(xv).map(|(g, &x)| g * kernels::gelu_grad(x)).collect();
                acc(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                let d = g.iter().zip(y).map(|(g, &y)| g * y * (1.0 - y)).collect();
                acc(grads, *x, d);
            }
            Op::Tanh(x) => {
                let y = &node.value.data;
                let d = g.iter().zip(y).map(|(g, &y)| g * (1.0 - y * y)).collect();
                acc(grads, *x, d);
            }
            Op::Abs(x) => {
                let xv = &val(*x).data;
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect();
                acc(grads, *x, d);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&val(*a).data, &val(*b).data);
                acc(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                acc(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Scale(x, s) => acc(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::Sum(x) => acc(grads, *x, vec![g[0]; val(*x).len()]),
            Op::Reshape(x) => acc(grads, *x, g.to_vec()),
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; val(*x).len()];
                for (o, &a) in argmax.iter().enumerate() {
                    dx[a] += g[o];
                }
                acc(grads, *x, dx);
            }
            Op::SoftmaxLast(x) => {
                let y = &node.value.data;
                let d = *node.value.shape.last().expect("rank >= 1");
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = &val(*a).shape;
                let (bn, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape[2];
                let (av, bv) = (&val(*a).data, &val(*b).data);
                if wants(*a) {
                    let mut da = Vec::with_capacity(av.len());
                    for i in 0..bn {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        // dA = dC * B^T  (or dC * B when B was transposed)
                        da.extend(kernels::matmul(gi, bi, m, n, k, !trans_b));
                    }
                    acc(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for i in 0..bn {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB[n x k] = dC^T * A
                            kernels::matmul_at_acc(gi, ai, m, n, k, out);
                        } else {
                            // dB[k x n] = A^T * dC
                            kernels::matmul_at_acc(ai, gi, m, k, n, out);
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Transpose12(x) => {
                let s = &val(*x).shape;
                let (n, a, b) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; g.len()];
                for i in 0..n {
                    for r in 0..a {
                        for c in 0..b {
                            dx[(i * a + r) * b + c] = g[(i * b + c) * a + r];
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Concat1(parts) => {
                let outer = node.value.shape[0];
                let inner: usize = node.value.shape[2..].iter().product();
                let total = node.value.shape[1];
                let mut start = 0;
                for p in parts {
                    let len = val(*p).shape[1];
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = o * total * inner;
                        d.extend_from_slice(&g[base + start * inner..base + (start + len) * inner]);
                    }
                    acc(grads, *p, d);
                    start += len;
                }
            }
            Op::Slice1 { x, start } => {
                let s = &val(*x).shape;
                let inner: usize = s[2..].iter().product();
                let len = node.value.shape[1];
                let mut dx = vec![0.0; val(*x).len()];
                for o in 0..s[0] {
                    let base = o * s[1] * inner;
                    dx[base + start * inner..base + (start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let ws = &val(*w).shape;
                let (cin, cout) = (ws[0], ws[1]);
                let rows = g.len() / cout;
                if wants(*x) {
                    acc(grads, *x, kernels::matmul(g, &val(*w).data, rows, cout, cin, true));
                }
                let mut dw = vec![0.0; cin * cout];
                kernels::matmul_at_acc(&val(*x).data, g, rows, cin, cout, &mut dw);
                acc(grads, *w, dw);
                if let Some(b) = b {
                    let mut db = vec![0.0; cout];
                    for row in g.chunks(cout) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                pe,
                heads,
                probs,
            } => {
                let qs = &val(*q).shape;
                let (n, tq, hd) = (qs[0], qs[1], qs[2]);
                let tk = val(*k).shape[1];
                let d = hd / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let (qv, kv, vv) = (&val(*q).data, &val(*k).data, &val(*v).data);
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; tq * tk];
                for ni in 0..n {
                    for h in 0..*heads {
                        let pb = &probs[((ni * heads + h) * tq) * tk..((ni * heads + h + 1) * tq) * tk];
                        let col = |t: usize, row: usize| (ni * t + row) * hd + h * d;
                        for i in 0..tq {
                            let go = &g[col(tq, i)..col(tq, i) + d];
                            for j in 0..tk {
                                let vr = &vv[col(tk, j)..col(tk, j) + d];
                                dp[i * tk + j] = go.iter().zip(vr).map(|(a, b)| a * b).sum();
                                let p = pb[i * tk + j];
                                for (dvv, &gg) in dv[col(tk, j)..col(tk, j) + d].iter_mut().zip(go) {
                                    *dvv += p * gg;
                                }
                            }
                        }
                        for i in 0..tq {
                            let row = &pb[i * tk..(i + 1) * tk];
                            let dpr = &dp[i * tk..(i + 1) * tk];
                            let dot: f64 = row.iter().zip(dpr).map(|(a, b)| a * b).sum();
                            for j in 0..tk {
                                let ds = row[j] * (dpr[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for e in 0..d {
                                    dq[col(tq, i) + e] += ds * kv[col(tk, j) + e];
                                    dk[col(tk, j) + e] += ds * qv[col(tq, i) + e];
                                }
                            }
                        }
                    }
                }
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
                if let Some(pe) = pe {
                    let mut dpe = vec![0.0; heads * tq * d];
                    for ni in 0..n {
                        for i in 0..tq {
                            for h in 0..*heads {
                                for e in 0..d {
                                    dpe[(h * tq + i) * d + e] += g[(ni * tq + i) * hd + h * d + e];
                                }
                            }
                        }
                    }
                    acc(grads, *pe, dpe);
                }
            }
            Op::Upsample { x, factor } => {
                let s = &val(*x).shape;
                acc(
                    grads,
                    *x,
                    kernels::upsample_backward(s[0] * s[1], s[2], s[3], *factor, g),
                );
            }
            Op::WeightedBce {
                x,
                target,
                weights,
                eps,
            } => {
                let s = &val(*x).shape;
                let plane = s[2] * s[3];
                let count = (s[0] * plane) as f64;
                let xv = &val(*x).data;
                let mut dx = vec![0.0; xv.len()];
                for n in 0..s[0] {
                    for p in 0..plane {
                        let y = target[n * plane + p] as usize;
                        for c in 0..2 {
                            let i = (n * 2 + c) * plane + p;
                            let pr = xv[i];
                            if pr < *eps || pr > 1.0 - eps {
                                continue;
                            }
                            let t = if c == y { 1.0 } else { 0.0 };
                            dx[i] = g[0] * weights[y] * 0.5 * (-t / pr + (1.0 - t) / (1.0 - pr)) / count;
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Mse { x, target } => {
                let xv = &val(*x).data;
                let n = xv.len() as f64;
                let dx = xv
                    .iter()
                    .zip(target)
                    .map(|(a, b)| g[0] * 2.0 * (a - b) / n)
                    .collect();
                acc(grads, *x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests;
