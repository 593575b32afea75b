use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{FuseMode, ModelConfig, UpsampleMode};
use super::ModelError;

/// Role of a parameter tensor; drives initialization and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight { fan_in: usize },
    Bias,
    NormScale,
    NormShift,
    PosEnc,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight { .. } | ParamKind::PosEnc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Location of one parameter tensor in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamId {
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamId {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

/// Batch-norm affine parameters plus the position of its running mean and
/// variance in the buffer vector.
#[derive(Debug, Clone)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub buffer: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct LnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub stride: usize,
    pub conv1: ConvParams,
    pub bn1: NormParams,
    pub conv2: ConvParams,
    pub bn2: NormParams,
    pub downsample: Option<(ConvParams, NormParams)>,
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub stem: ConvParams,
    pub stem_bn: NormParams,
    pub blocks: Vec<BlockParams>,
    pub projection: ConvParams,
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub we: ParamId,
    pub be: ParamId,
    pub pe: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LnParams,
    pub attn: AttentionParams,
    pub ln2: LnParams,
    pub mlp: MlpParams,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln_q: LnParams,
    pub ln_kv: LnParams,
    pub attn: AttentionParams,
    pub ln2: LnParams,
    pub mlp: MlpParams,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub upsample: Option<ConvParams>,
    pub f1: ConvParams,
    pub f2: ConvParams,
}

/// Stable flat enumeration of every learnable scalar of a configuration,
/// with typed handles into it.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub backbone: BackboneParams,
    pub tokenizer: ConvParams,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    /// Positional term added to every decoder head's output, one table per
    /// head over the pixel queries, shared by all decoder layers.
    pub decoder_pe: ParamId,
    pub heads: HeadParams,
    pub n_params: usize,
    pub n_buffers: usize,
}

struct Builder {
    entries: Vec<ParamEntry>,
    offset: usize,
    buffers: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> ParamId {
        let id = ParamId {
            offset: self.offset,
            shape: shape.clone(),
        };
        self.offset += id.len();
        self.entries.push(ParamEntry {
            name,
            offset: id.offset,
            shape,
            kind,
        });
        id
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> ConvParams {
        let weight = self.add(
            format!("{name}.weight"),
            vec![cout, cin, k, k],
            ParamKind::Weight { fan_in: cin * k * k },
        );
        let bias = bias.then(|| self.add(format!("{name}.bias"), vec![cout], ParamKind::Bias));
        ConvParams { weight, bias }
    }

    fn bn(&mut self, name: &str, c: usize) -> NormParams {
        let gamma = self.add(format!("{name}.gamma"), vec![c], ParamKind::NormScale);
        let beta = self.add(format!("{name}.beta"), vec![c], ParamKind::NormShift);
        let buffer = self.buffers;
        self.buffers += 2 * c;
        NormParams {
            gamma,
            beta,
            buffer,
            channels: c,
        }
    }

    fn ln(&mut self, name: &str, c: usize) -> LnParams {
        LnParams {
            gamma: self.add(format!("{name}.gamma"), vec![c], ParamKind::NormScale),
            beta: self.add(format!("{name}.beta"), vec![c], ParamKind::NormShift),
        }
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize) -> ParamId {
        self.add(
            format!("{name}.weight"),
            vec![cin, cout],
            ParamKind::Weight { fan_in: cin },
        )
    }

    fn attention(&mut self, name: &str, c: usize, heads: usize, d: usize, pe_rows: Option<usize>) -> AttentionParams {
        let hd = heads * d;
        AttentionParams {
            wq: self.linear(&format!("{name}.wq"), c, hd),
            wk: self.linear(&format!("{name}.wk"), c, hd),
            wv: self.linear(&format!("{name}.wv"), c, hd),
            we: self.linear(&format!("{name}.we"), hd, c),
            be: self.add(format!("{name}.be"), vec![c], ParamKind::Bias),
            pe: pe_rows.map(|rows| self.add(format!("{name}.pe"), vec![heads, rows, d], ParamKind::PosEnc)),
        }
    }

    fn mlp(&mut self, name: &str, c: usize, hidden: usize) -> MlpParams {
        MlpParams {
            w1: self.linear(&format!("{name}.w1"), c, hidden),
            b1: self.add(format!("{name}.b1"), vec![hidden], ParamKind::Bias),
            w2: self.linear(&format!("{name}.w2"), hidden, c),
            b2: self.add(format!("{name}.b2"), vec![c], ParamKind::Bias),
        }
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut b = Builder {
            entries: Vec::new(),
            offset: 0,
            buffers: 0,
        };
        let bb = &cfg.backbone;
        let stem = b.conv("backbone.stem", cfg.bands, bb.stem_channels, bb.stem_kernel, false);
        let stem_bn = b.bn("backbone.stem_bn", bb.stem_channels);
        let mut blocks = Vec::new();
        let mut cin = bb.stem_channels;
        for (si, stage) in bb.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let name = format!("backbone.stage{si}.block{bi}");
                let stride = if bi == 0 { stage.stride } else { 1 };
                let conv1 = b.conv(&format!("{name}.conv1"), cin, stage.width, 3, false);
                let bn1 = b.bn(&format!("{name}.bn1"), stage.width);
                let conv2 = b.conv(&format!("{name}.conv2"), stage.width, stage.width, 3, false);
                let bn2 = b.bn(&format!("{name}.bn2"), stage.width);
                let downsample = (stride != 1 || cin != stage.width).then(|| {
                    let c = b.conv(&format!("{name}.down"), cin, stage.width, 1, false);
                    let n = b.bn(&format!("{name}.down_bn"), stage.width);
                    (c, n)
                });
                blocks.push(BlockParams {
                    stride,
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    downsample,
                });
                cin = stage.width;
            }
        }
        let projection = b.conv("backbone.projection", cin, cfg.channels, 1, true);
        let backbone = BackboneParams {
            stem,
            stem_bn,
            blocks,
            projection,
        };

        let c = cfg.channels;
        let tokenizer = b.conv("tokenizer", c, cfg.tokens, 1, false);

        let encoder = (0..cfg.encoder_depth)
            .map(|i| {
                let name = format!("encoder{i}");
                EncoderLayer {
                    ln1: b.ln(&format!("{name}.ln1"), c),
                    attn: b.attention(
                        &format!("{name}.attn"),
                        c,
                        cfg.encoder_heads,
                        cfg.encoder_head_dim,
                        Some(cfg.tokens),
                    ),
                    ln2: b.ln(&format!("{name}.ln2"), c),
                    mlp: b.mlp(&format!("{name}.mlp"), c, cfg.mlp_ratio * c),
                }
            })
            .collect();

        let decoder = (0..cfg.decoder_depth)
            .map(|i| {
                let name = format!("decoder{i}");
                DecoderLayer {
                    ln_q: b.ln(&format!("{name}.ln_q"), c),
                    ln_kv: b.ln(&format!("{name}.ln_kv"), c),
                    attn: b.attention(&format!("{name}.attn"), c, cfg.decoder_heads, cfg.decoder_head_dim, None),
                    ln2: b.ln(&format!("{name}.ln2"), c),
                    mlp: b.mlp(&format!("{name}.mlp"), c, cfg.mlp_ratio * c),
                }
            })
            .collect();
        let p = cfg.feature_size() * cfg.feature_size();
        let decoder_pe = b.add(
            "decoder.pe".into(),
            vec![cfg.decoder_heads, p, cfg.decoder_head_dim],
            ParamKind::PosEnc,
        );

        let hc = cfg.head_channels();
        let upsample = (cfg.upsample_mode == UpsampleMode::Learnable && cfg.stride > 1).then(|| {
            let s = cfg.stride;
            ConvParams {
                weight: b.add(
                    "heads.upsample.weight".into(),
                    vec![hc, hc, s, s],
                    ParamKind::Weight { fan_in: hc },
                ),
                bias: Some(b.add("heads.upsample.bias".into(), vec![hc], ParamKind::Bias)),
            }
        });
        let heads = HeadParams {
            upsample,
            f1: b.conv("heads.f1", hc, 2, 3, true),
            f2: b.conv("heads.f2", hc, 1, 3, true),
        };
        debug_assert!(cfg.fuse_mode == FuseMode::Concat || hc == c);

        Ok(Self {
            n_params: b.offset,
            n_buffers: b.buffers,
            entries: b.entries,
            backbone,
            tokenizer,
            encoder,
            decoder,
            decoder_pe,
            heads,
        })
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Entries whose name starts with `prefix`.
    pub fn entries_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a ParamEntry> + 'a {
        self.entries.iter().filter(move |e| e.name.starts_with(prefix))
    }

    /// Parameters plus running statistics at their initial values.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.n_params];
        for e in &self.entries {
            let slot = &mut values[e.range()];
            match e.kind {
                ParamKind::Weight { fan_in } => {
                    let bound = (3.0 / fan_in as f64).sqrt();
                    slot.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                }
                ParamKind::PosEnc => {
                    slot.iter_mut().for_each(|v| *v = rng.random_range(-0.02..0.02));
                }
                ParamKind::NormScale => slot.fill(1.0),
                ParamKind::Bias | ParamKind::NormShift => {}
            }
        }
        ParamSet {
            values,
            buffers: self.init_buffers(),
        }
    }

    /// Running means at 0 and variances at 1.
    pub fn init_buffers(&self) -> Vec<f64> {
        let mut buffers = vec![0.0; self.n_buffers];
        for n in self.norms() {
            buffers[n.buffer + n.channels..n.buffer + 2 * n.channels].fill(1.0);
        }
        buffers
    }

    /// Every batch-norm in forward order.
    pub fn norms(&self) -> Vec<&NormParams> {
        let bb = &self.backbone;
        let mut out = vec![&bb.stem_bn];
        for blk in &bb.blocks {
            out.push(&blk.bn1);
            out.push(&blk.bn2);
            if let Some((_, n)) = &blk.downsample {
                out.push(n);
            }
        }
        out
    }

    /// Per-scalar weight-decay mask.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_params];
        for e in &self.entries {
            if e.kind.decays() {
                mask[e.range()].fill(true);
            }
        }
        mask
    }
}

/// Learnable parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub values: Vec<f64>,
    pub buffers: Vec<f64>,
}

impl ParamSet {
    pub fn get(&self, id: &ParamId) -> &[f64] {
        &self.values[id.range()]
    }

    pub fn get_mut(&mut self, id: &ParamId) -> &mut [f64] {
        &mut self.values[id.range()]
    }

    pub fn zero(&mut self, id: &ParamId) {
        self.get_mut(id).fill(0.0);
    }
}
