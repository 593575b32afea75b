use crate::autodiff::{Graph, Tensor, Var};

use super::config::{DiffMode, FuseMode, ModelConfig};
use super::params::{
    AttentionParams, BackboneParams, ConvParams, DecoderLayer, EncoderLayer, HeadParams, LnParams, MlpParams,
    NormParams, ParamId, ParamLayout,
};
use super::ModelError;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Batch-norm behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running-estimate updates are reported.
    Train,
    /// Running estimates.
    Eval,
}

/// Batch statistics observed by one batch-norm call in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub buffer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Applies `running = (1 - m) * running + m * batch` for every update, in
/// order.
pub fn apply_bn_updates(buffers: &mut [f64], updates: &[BnUpdate]) {
    for u in updates {
        let c = u.mean.len();
        for i in 0..c {
            let rm = &mut buffers[u.buffer + i];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * u.mean[i];
            let rv = &mut buffers[u.buffer + c + i];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * u.var[i];
        }
    }
}

/// Intermediate values captured during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Tokenizer attention per epoch, `[N, L, H', W']`.
    pub attention: [Tensor; 2],
    /// Concatenated tokens before the encoder, `[N, 2L, C]`.
    pub t_star: Tensor,
    /// Encoder output, `[N, 2L, C]`.
    pub s: Tensor,
    /// Decoder outputs per epoch, `[N, C, H', W']`.
    pub y1: Tensor,
    pub y2: Tensor,
}

/// Nodes produced by [`Network::forward`].
pub struct ForwardVars {
    /// Change scores `[N, 2, H, W]` in (0, 1).
    pub m2d: Var,
    /// Normalized elevation change `[N, 1, H, W]` in (-1, 1).
    pub m3d: Var,
    pub bn_updates: Vec<BnUpdate>,
    pub trace: Option<ForwardTrace>,
}

/// Builds the network on a graph. The graph's parameter vector must follow
/// `layout`.
pub struct Network<'a> {
    pub cfg: &'a ModelConfig,
    pub layout: &'a ParamLayout,
    pub buffers: &'a [f64],
    pub mode: Mode,
}

impl Network<'_> {
    fn p(&self, g: &mut Graph, id: &ParamId) -> Var {
        g.param(id.offset, id.shape.clone())
    }

    fn conv(&self, g: &mut Graph, x: Var, cp: &ConvParams, stride: usize) -> Var {
        let w = self.p(g, &cp.weight);
        let b = cp.bias.as_ref().map(|b| self.p(g, b));
        let pad = cp.weight.shape[2] / 2;
        g.conv2d(x, w, b, stride, pad)
    }

    fn bn(&self, g: &mut Graph, x: Var, n: &NormParams, updates: &mut Vec<BnUpdate>) -> Var {
        let gamma = self.p(g, &n.gamma);
        let beta = self.p(g, &n.beta);
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = g.batch_norm_train(x, gamma, beta, BN_EPS);
                updates.push(BnUpdate {
                    buffer: n.buffer,
                    mean,
                    var,
                });
                y
            }
            Mode::Eval => {
                let c = n.channels;
                let mean = &self.buffers[n.buffer..n.buffer + c];
                let var = &self.buffers[n.buffer + c..n.buffer + 2 * c];
                g.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)
            }
        }
    }

    fn ln(&self, g: &mut Graph, x: Var, p: &LnParams) -> Var {
        let gamma = self.p(g, &p.gamma);
        let beta = self.p(g, &p.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    /// Shared residual CNN: `[N, B, H, W] -> [N, C, H/s, W/s]`.
    pub fn backbone(&self, g: &mut Graph, x: Var, updates: &mut Vec<BnUpdate>) -> Var {
        let bb: &BackboneParams = &self.layout.backbone;
        let spec = &self.cfg.backbone;
        let mut h = self.conv(g, x, &bb.stem, spec.stem_stride);
        h = self.bn(g, h, &bb.stem_bn, updates);
        h = g.relu(h);
        if spec.maxpool {
            h = g.max_pool(h);
        }
        for blk in &bb.blocks {
            let mut r = self.conv(g, h, &blk.conv1, blk.stride);
            r = self.bn(g, r, &blk.bn1, updates);
            r = g.relu(r);
            r = self.conv(g, r, &blk.conv2, 1);
            r = self.bn(g, r, &blk.bn2, updates);
            let short = match &blk.downsample {
                Some((c, n)) => {
                    let s = self.conv(g, h, c, blk.stride);
                    self.bn(g, s, n, updates)
                }
                None => h,
            };
            let sum = g.add(r, short);
            h = g.relu(sum);
        }
        self.conv(g, h, &bb.projection, 1)
    }

    /// Feature map `[N, C, H', W']` to pixel rows `[N, H'W', C]`.
    fn to_rows(g: &mut Graph, z: Var) -> Var {
        let s = g.shape(z).to_vec();
        let flat = g.reshape(z, vec![s[0], s[1], s[2] * s[3]]);
        g.transpose12(flat)
    }

    /// Returns tokens `[N, L, C]` and spatial attention `[N, L, H'W']`.
    pub fn tokenize(&self, g: &mut Graph, z: Var) -> (Var, Var) {
        let s = g.shape(z).to_vec();
        let logits = self.conv(g, z, &self.layout.tokenizer, 1);
        let logits = g.reshape(logits, vec![s[0], self.cfg.tokens, s[2] * s[3]]);
        let a = g.softmax_last(logits);
        let zf = g.reshape(z, vec![s[0], s[1], s[2] * s[3]]);
        (g.bmm(a, zf, true), a)
    }

    fn attention(
        &self,
        g: &mut Graph,
        q_in: Var,
        kv_in: Var,
        ap: &AttentionParams,
        pe: Option<Var>,
        heads: usize,
    ) -> Var {
        let wq = self.p(g, &ap.wq);
        let wk = self.p(g, &ap.wk);
        let wv = self.p(g, &ap.wv);
        let q = g.linear(q_in, wq, None);
        let k = g.linear(kv_in, wk, None);
        let v = g.linear(kv_in, wv, None);
        let att = g.attention(q, k, v, pe, heads);
        let we = self.p(g, &ap.we);
        let be = self.p(g, &ap.be);
        g.linear(att, we, Some(be))
    }

    fn mlp(&self, g: &mut Graph, x: Var, mp: &MlpParams) -> Var {
        let w1 = self.p(g, &mp.w1);
        let b1 = self.p(g, &mp.b1);
        let w2 = self.p(g, &mp.w2);
        let b2 = self.p(g, &mp.b2);
        let h = g.linear(x, w1, Some(b1));
        let h = g.gelu(h);
        g.linear(h, w2, Some(b2))
    }

    /// Pre-norm self-attention layers over `[N, 2L, C]`.
    pub fn encode(&self, g: &mut Graph, mut t: Var) -> Var {
        for layer in &self.layout.encoder {
            let EncoderLayer { ln1, attn, ln2, mlp } = layer;
            let h = self.ln(g, t, ln1);
            // one positional table per token index, shared by both epochs
            let pe = attn.pe.as_ref().map(|id| {
                let half = self.p(g, id);
                g.concat1(&[half, half])
            });
            let a = self.attention(g, h, h, attn, pe, self.cfg.encoder_heads);
            t = g.add(t, a);
            let h = self.ln(g, t, ln2);
            let m = self.mlp(g, h, mlp);
            t = g.add(t, m);
        }
        t
    }

    /// Cross-attention layers: pixels of `z` query the tokens `s`.
    pub fn decode(&self, g: &mut Graph, z: Var, s: Var) -> Var {
        let shape = g.shape(z).to_vec();
        let mut x = Self::to_rows(g, z);
        for layer in &self.layout.decoder {
            let DecoderLayer {
                ln_q,
                ln_kv,
                attn,
                ln2,
                mlp,
            } = layer;
            let hq = self.ln(g, x, ln_q);
            let hkv = self.ln(g, s, ln_kv);
            let pe = self.p(g, &self.layout.decoder_pe);
            let a = self.attention(g, hq, hkv, attn, Some(pe), self.cfg.decoder_heads);
            x = g.add(x, a);
            let h = self.ln(g, x, ln2);
            let m = self.mlp(g, h, mlp);
            x = g.add(x, m);
        }
        let cols = g.transpose12(x);
        g.reshape(cols, shape)
    }

    /// Prediction heads on the two decoded feature maps.
    pub fn heads(&self, g: &mut Graph, y1: Var, y2: Var) -> (Var, Var) {
        let hp: &HeadParams = &self.layout.heads;
        let d = match (self.cfg.fuse_mode, self.cfg.diff_mode) {
            (FuseMode::Concat, _) => g.concat1(&[y1, y2]),
            (FuseMode::Difference, DiffMode::Signed) => g.sub(y2, y1),
            (FuseMode::Difference, DiffMode::Absolute) => {
                let d = g.sub(y2, y1);
                g.abs(d)
            }
        };
        let up = match &hp.upsample {
            Some(cp) => {
                let w = self.p(g, &cp.weight);
                let b = cp.bias.as_ref().map(|b| self.p(g, b));
                g.conv_transpose(d, w, b)
            }
            None if self.cfg.stride > 1 => g.upsample(d, self.cfg.stride),
            None => d,
        };
        let l1 = self.conv(g, up, &hp.f1, 1);
        let l2 = self.conv(g, up, &hp.f2, 1);
        (g.sigmoid(l1), g.tanh(l2))
    }

    /// Full network on two image batches `[N, B, H, W]`.
    pub fn forward(&self, g: &mut Graph, x1: Var, x2: Var, trace: bool) -> Result<ForwardVars, ModelError> {
        let c = self.cfg;
        let expected = [c.bands, c.input_size, c.input_size];
        for x in [x1, x2] {
            let s = g.shape(x);
            if s.len() != 4 || s[1..] != expected {
                return Err(ModelError::InputShape {
                    expected: expected.to_vec(),
                    actual: s.to_vec(),
                });
            }
        }
        if g.shape(x1) != g.shape(x2) {
            return Err(ModelError::InputShape {
                expected: g.shape(x1).to_vec(),
                actual: g.shape(x2).to_vec(),
            });
        }
        let mut bn_updates = Vec::new();
        // both epochs pass the backbone as one 2N batch so that batch-norm
        // statistics are shared, as the running estimates are in eval mode
        let x = stack_batch(g, x1, x2);
        let z = self.backbone(g, x, &mut bn_updates);
        let (z1, z2) = split_batch(g, z);
        let (t1, a1) = self.tokenize(g, z1);
        let (t2, a2) = self.tokenize(g, z2);
        let t_star = g.concat1(&[t1, t2]);
        let s = self.encode(g, t_star);
        let s1 = g.slice1(s, 0, c.tokens);
        let s2 = g.slice1(s, c.tokens, c.tokens);
        let y1 = self.decode(g, z1, s1);
        let y2 = self.decode(g, z2, s2);
        let (m2d, m3d) = self.heads(g, y1, y2);

        let trace = trace.then(|| {
            let n = g.shape(x1)[0];
            let f = c.feature_size();
            let amap = |a: Var| {
                Tensor::new(vec![n, c.tokens, f, f], g.value(a).data.clone())
            };
            ForwardTrace {
                attention: [amap(a1), amap(a2)],
                t_star: g.value(t_star).clone(),
                s: g.value(s).clone(),
                y1: g.value(y1).clone(),
                y2: g.value(y2).clone(),
            }
        });
        Ok(ForwardVars {
            m2d,
            m3d,
            bn_updates,
            trace,
        })
    }
}

/// `[N, ...]` twice to `[2N, ...]`.
fn stack_batch(g: &mut Graph, a: Var, b: Var) -> Var {
    let mut shape = g.shape(a).to_vec();
    let len: usize = shape.iter().product();
    let fa = g.reshape(a, vec![1, len]);
    let fb = g.reshape(b, vec![1, len]);
    let both = g.concat1(&[fa, fb]);
    shape[0] *= 2;
    g.reshape(both, shape)
}

/// Inverse of [`stack_batch`].
fn split_batch(g: &mut Graph, x: Var) -> (Var, Var) {
    let mut shape = g.shape(x).to_vec();
    let len: usize = shape.iter().product::<usize>() / 2;
    shape[0] /= 2;
    let flat = g.reshape(x, vec![1, 2 * len]);
    let a = g.slice1(flat, 0, len);
    let b = g.slice1(flat, len, len);
    (g.reshape(a, shape.clone()), g.reshape(b, shape))
}

