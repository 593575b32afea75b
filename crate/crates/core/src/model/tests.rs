use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn tiny() -> (Model, ParamSet) {
    let m = Model::new(ModelConfig::tiny()).unwrap();
    let p = m.init(7);
    (m, p)
}

fn zero_residual_branches(m: &Model, p: &mut ParamSet) {
    for l in &m.layout.encoder {
        p.zero(&l.attn.we);
        p.zero(&l.attn.be);
        p.zero(l.attn.pe.as_ref().unwrap());
        p.zero(&l.mlp.w2);
        p.zero(&l.mlp.b2);
    }
    for l in &m.layout.decoder {
        p.zero(&l.attn.we);
        p.zero(&l.attn.be);
        p.zero(&l.mlp.w2);
        p.zero(&l.mlp.b2);
    }
    p.zero(&m.layout.decoder_pe);
}

#[test]
fn default_config_shapes() {
    let cfg = ModelConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.feature_size(), 64);
    assert_eq!(cfg.backbone.total_stride(), 4);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = ModelConfig::default();
    c.input_size = 250;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::tiny();
    c.tokens = 0;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::tiny();
    c.stride = 2;
    assert!(c.validate().is_err());
}

#[test]
fn tokenizer_zero_kernel_gives_spatial_mean() {
    // one channel, two pixels holding 1 and 3
    let w = [0.0];
    let mut g = Graph::new(&w);
    let z = g.input(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]));
    let k = g.param(0, vec![1, 1, 1, 1]);
    let logits = g.conv2d(z, k, None, 1, 0);
    let logits = g.reshape(logits, vec![1, 1, 2]);
    let a = g.softmax_last(logits);
    let zf = g.reshape(z, vec![1, 1, 2]);
    let t = g.bmm(a, zf, true);
    assert_eq!(g.value(t).data, vec![2.0]);
}

#[test]
fn tokenizer_peaked_logit_selects_pixel() {
    let (m, mut p) = tiny();
    let tk = m.layout.tokenizer.weight.clone();
    p.zero(&tk);
    // token 0 reads channel 0, which is +50 at one pixel only
    p.values[tk.offset] = 1.0;
    let c = m.cfg.channels;
    let mut z = Tensor::zeros(vec![1, c, 4, 4]);
    for ci in 0..c {
        for i in 0..16 {
            z.data[ci * 16 + i] = (ci * 16 + i) as f64 * 0.01;
        }
    }
    z.data[5] = 50.0;
    let mut g = Graph::new(&p.values);
    let zv = g.input(z.clone());
    let (t, a) = m.network(&p.buffers, Mode::Eval).tokenize(&mut g, zv);
    let tok = &g.value(t).data[..c];
    for ci in 0..c {
        assert!((tok[ci] - z.data[ci * 16 + 5]).abs() < 1e-9, "channel {ci}");
    }
    for row in g.value(a).data.chunks(16) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zeroed_encoder_and_decoder_are_identity() {
    let (m, mut p) = tiny();
    zero_residual_branches(&m, &mut p);
    let c = m.cfg.channels;
    let net = m.network(&p.buffers, Mode::Eval);
    let mut g = Graph::new(&p.values);
    let t = g.input(random_tensor(vec![2, 2 * m.cfg.tokens, c], 1));
    let e = net.encode(&mut g, t);
    assert_eq!(g.value(e), g.value(t));
    let f = m.cfg.feature_size();
    let z = g.input(random_tensor(vec![2, c, f, f], 2));
    let s = g.input(random_tensor(vec![2, m.cfg.tokens, c], 3));
    let d = net.decode(&mut g, z, s);
    assert_eq!(g.value(d), g.value(z));
}

#[test]
fn encoder_uniform_attention_adds_token_mean() {
    let mut cfg = ModelConfig::tiny();
    cfg.encoder_heads = 1;
    cfg.encoder_head_dim = cfg.channels;
    let m = Model::new(cfg).unwrap();
    let c = m.cfg.channels;
    let mut p = m.init(1);
    let l = &m.layout.encoder[0];
    p.zero(&l.attn.wq);
    p.zero(&l.attn.wk);
    p.zero(l.attn.pe.as_ref().unwrap());
    p.zero(&l.attn.be);
    p.zero(&l.mlp.w2);
    p.zero(&l.mlp.b2);
    for id in [&l.attn.wv, &l.attn.we] {
        let v = p.get_mut(id);
        v.fill(0.0);
        for i in 0..c {
            v[i * c + i] = 1.0;
        }
    }
    // norms bypassed: attention on the raw tokens
    let tokens = random_tensor(vec![1, 4, c], 5);
    let mut g = Graph::new(&p.values);
    let t = g.input(tokens.clone());
    let wq = g.param(l.attn.wq.offset, l.attn.wq.shape.clone());
    let wk = g.param(l.attn.wk.offset, l.attn.wk.shape.clone());
    let wv = g.param(l.attn.wv.offset, l.attn.wv.shape.clone());
    let we = g.param(l.attn.we.offset, l.attn.we.shape.clone());
    let q = g.linear(t, wq, None);
    let k = g.linear(t, wk, None);
    let v = g.linear(t, wv, None);
    let a = g.attention(q, k, v, None, 1);
    let o = g.linear(a, we, None);
    let out = g.add(t, o);
    for i in 0..4 {
        for ch in 0..c {
            let mean = (0..4).map(|j| tokens.data[j * c + ch]).sum::<f64>() / 4.0;
            let got = g.value(out).data[i * c + ch];
            assert!((got - (tokens.data[i * c + ch] + mean)).abs() < 1e-12);
        }
    }
}

#[test]
fn single_token_decoder_attends_fully() {
    let mut cfg = ModelConfig::tiny();
    cfg.tokens = 1;
    let m = Model::new(cfg).unwrap();
    let p = m.init(3);
    let mut g = Graph::new(&p.values);
    let q = g.input(random_tensor(vec![1, 16, 8], 1));
    let k = g.input(random_tensor(vec![1, 1, 8], 2));
    let v = g.input(random_tensor(vec![1, 1, 8], 3));
    let a = g.attention(q, k, v, None, 2);
    assert!(g.attention_probs(a).unwrap().iter().all(|&w| w == 1.0));
}

#[test]
fn identical_inputs_give_neutral_predictions() {
    let (m, mut p) = tiny();
    for b in [&m.layout.heads.f1.bias, &m.layout.heads.f2.bias] {
        p.zero(b.as_ref().unwrap());
    }
    let x = random_tensor(vec![2, 3, 16, 16], 9);
    let pred = m.predict(&p, &x, &x, true).unwrap();
    assert!(pred.m3d.data.iter().all(|&v| v == 0.0));
    assert!(pred.m2d.data.iter().all(|&v| v == 0.5));
    let t = pred.trace.unwrap();
    assert_eq!(t.y1, t.y2);
    assert_eq!(pred.m2d.shape, vec![2, 2, 16, 16]);
    assert_eq!(pred.m3d.shape, vec![2, 1, 16, 16]);
}

#[test]
fn swapping_epochs_negates_elevation() {
    let (m, mut p) = tiny();
    p.zero(m.layout.heads.f2.bias.as_ref().unwrap());
    let a = random_tensor(vec![1, 3, 16, 16], 1);
    let b = random_tensor(vec![1, 3, 16, 16], 2);
    let fwd = m.predict(&p, &a, &b, false).unwrap();
    let rev = m.predict(&p, &b, &a, false).unwrap();
    for (x, y) in fwd.m3d.data.iter().zip(&rev.m3d.data) {
        assert!((x + y).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic_and_shape_checked() {
    let (m, p) = tiny();
    let a = random_tensor(vec![1, 3, 16, 16], 1);
    let b = random_tensor(vec![1, 3, 16, 16], 2);
    assert_eq!(m.predict(&p, &a, &b, false).unwrap(), m.predict(&p, &a, &b, false).unwrap());
    let bad = random_tensor(vec![1, 3, 8, 8], 3);
    assert!(matches!(m.predict(&p, &bad, &bad, false), Err(ModelError::InputShape { .. })));
}

#[test]
fn threads_sharing_params_agree() {
    let (m, p) = tiny();
    let a = random_tensor(vec![1, 3, 16, 16], 1);
    let b = random_tensor(vec![1, 3, 16, 16], 2);
    let outs: Vec<Prediction> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..3).map(|_| s.spawn(|| m.predict(&p, &a, &b, false).unwrap())).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn output_modes_run() {
    for (fuse, diff, up) in [
        (FuseMode::Concat, DiffMode::Signed, UpsampleMode::Bilinear),
        (FuseMode::Difference, DiffMode::Absolute, UpsampleMode::Learnable),
    ] {
        let mut cfg = ModelConfig::tiny();
        cfg.fuse_mode = fuse;
        cfg.diff_mode = diff;
        cfg.upsample_mode = up;
        let m = Model::new(cfg).unwrap();
        let p = m.init(0);
        let x = random_tensor(vec![1, 3, 16, 16], 4);
        let pred = m.predict(&p, &x, &x, false).unwrap();
        assert_eq!(pred.m2d.shape, vec![1, 2, 16, 16]);
        assert!(pred.m2d.data.iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}

#[test]
fn decoder_depth_is_linear_in_count() {
    let base = ModelConfig::default();
    let mut deeper = base.clone();
    deeper.decoder_depth = 16;
    let layout = ParamLayout::new(&base).unwrap();
    let per_layer: usize = layout.entries_with_prefix("decoder0.").map(|e| e.len()).sum();
    assert_eq!(
        param_count(&deeper).unwrap() - param_count(&base).unwrap(),
        8 * per_layer
    );
}

#[test]
fn enumeration_is_contiguous_and_complete() {
    let layout = ParamLayout::new(&ModelConfig::tiny()).unwrap();
    let mut next = 0;
    for e in &layout.entries {
        assert_eq!(e.offset, next, "{}", e.name);
        next += e.len();
    }
    assert_eq!(next, layout.n_params);
    let names: std::collections::HashSet<_> = layout.entries.iter().map(|e| &e.name).collect();
    assert_eq!(names.len(), layout.entries.len());
}

#[test]
fn grad_of_constant_and_square() {
    let p = vec![0.5, -1.5, 2.0];
    let (v, g) = grad(&p, |g| {
        let c = g.input(Tensor::scalar(4.0));
        Ok(g.reshape(c, vec![]))
    })
    .unwrap();
    assert_eq!(v, 4.0);
    assert_eq!(g, vec![0.0; 3]);
    let (_, g) = grad(&p, |g| {
        let x = g.param(0, vec![3]);
        let sq = g.mul(x, x);
        Ok(g.sum(sq))
    })
    .unwrap();
    assert_eq!(g, vec![1.0, -3.0, 4.0]);
}

#[test]
fn non_finite_gradient_names_parameter() {
    let p = vec![1.0, f64::INFINITY];
    let err = grad(&p, |g| {
        let x = g.param(0, vec![2]);
        let sq = g.mul(x, x);
        Ok(g.sum(sq))
    })
    .unwrap_err();
    assert!(matches!(err, ModelError::Grad(GradError::NonFinite { index: 1 })));
}

#[test]
fn attention_export_writes_normalized_maps() {
    let (m, mut p) = tiny();
    p.zero(&m.layout.tokenizer.weight);
    let x = random_tensor(vec![1, 3, 16, 16], 1);
    let pred = m.predict(&p, &x, &x, true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = export_attention_maps(pred.trace.as_ref(), 0, dir.path()).unwrap();
    assert_eq!(paths.len(), 2 * m.cfg.tokens);
    for path in &paths {
        let r = crate::data::read_f32(path).unwrap();
        let uniform = 1.0 / r.values.len() as f32;
        assert!(r.values.iter().all(|&v| (v - uniform).abs() < 1e-7));
        let s: f64 = r.values.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
    assert!(matches!(
        export_attention_maps(None, 0, dir.path()),
        Err(ModelError::MissingTrace)
    ));
}

