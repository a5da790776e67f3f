use amo_core::fusion::{AmoModel, HeadKind, ModalitySet, ModelConfig};
use amo_core::survival::{mtlr_nll_graph, MtlrTarget};
use amo_core::tensor::{gelu, Mode, Reduction, Tensor, NORM_EPS, LAYERNORM_EPS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_config(head: HeadKind) -> ModelConfig {
    let mut cfg = ModelConfig::new(&[("clinical", 5), ("primary", 5), ("nodal", 5)], head);
    cfg.latent_dim = 8;
    cfg.heads = 2;
    cfg.dropout = 0.3;
    cfg
}

fn batch(rng: &mut ChaCha8Rng, b: usize, dims: &[usize]) -> Vec<Tensor> {
    dims.iter()
        .map(|&d| Tensor::matrix(b, d, (0..b * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap())
        .collect()
}

/// Perturb running statistics and affine parameters away from their
/// initial values so the reference exercises every term.
fn jitter(model: &mut AmoModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = model.params_mut();
    for (name, t) in store.names().to_vec().iter().zip(store.tensors_mut()) {
        if name.ends_with("gamma") || name.ends_with("beta") {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
    let stats = model
        .encoders()
        .iter()
        .map(|e| amo_core::tensor::RunningStats {
            mean: (0..e.latent_dim()).map(|_| rng.random_range(-0.5..0.5)).collect(),
            var: (0..e.latent_dim()).map(|_| rng.random_range(0.5..2.0)).collect(),
        })
        .collect();
    model.set_running_stats(stats).unwrap();
}

// ---- scalar reference evaluation ----

fn p<'a>(model: &'a AmoModel, name: &str) -> &'a [f64] {
    model.params().get(name).unwrap_or_else(|| panic!("{name}")).data()
}

fn linear(model: &AmoModel, name: &str, x: &[f64], out: usize) -> Vec<f64> {
    let w = p(model, &format!("{name}.weight"));
    let b = p(model, &format!("{name}.bias"));
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>())
        .collect()
}

fn layernorm(model: &AmoModel, name: &str, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let (g, b) = (p(model, &format!("{name}.gamma")), p(model, &format!("{name}.beta")));
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + LAYERNORM_EPS).sqrt() * g[i] + b[i])
        .collect()
}

fn reference_encoder(model: &AmoModel, k: usize, x: &[f64]) -> Vec<f64> {
    let enc = &model.encoders()[k];
    let m = enc.latent_dim();
    let pre = format!("encoder.{}", enc.name());
    let h = linear(model, &format!("{pre}.lin1"), x, m);
    let rs = enc.running_stats();
    let (g, b) = (p(model, &format!("{pre}.bn.gamma")), p(model, &format!("{pre}.bn.beta")));
    let h: Vec<f64> = (0..m)
        .map(|j| gelu((h[j] - rs.mean[j]) / (rs.var[j] + NORM_EPS).sqrt() * g[j] + b[j]))
        .collect();
    linear(model, &format!("{pre}.lin2"), &h, m)
}

/// Fusion block on `[K][M]` latents; returns refined rows and the
/// head-averaged attention.
fn reference_block(model: &AmoModel, c: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let m = c[0].len();
    let k = c.len();
    let h = model.config().heads;
    let dh = m / h;
    let q: Vec<_> = c.iter().map(|r| linear(model, "fusion.q", r, m)).collect();
    let kk: Vec<_> = c.iter().map(|r| linear(model, "fusion.k", r, m)).collect();
    let v: Vec<_> = c.iter().map(|r| linear(model, "fusion.v", r, m)).collect();
    let mut avg = vec![vec![0.0; k]; k];
    let mut heads_out = vec![vec![0.0; m]; k];
    for head in 0..h {
        let cols = head * dh..(head + 1) * dh;
        for i in 0..k {
            let scores: Vec<f64> = (0..k)
                .map(|j| cols.clone().map(|c| q[i][c] * kk[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..k {
                let a = e[j] / z;
                avg[i][j] += a / h as f64;
                for c in cols.clone() {
                    heads_out[i][c] += a * v[j][c];
                }
            }
        }
    }
    let out = (0..k)
        .map(|i| {
            let o = linear(model, "fusion.out", &heads_out[i], m);
            let r1: Vec<f64> = c[i].iter().zip(&o).map(|(a, b)| a + b).collect();
            let n1 = layernorm(model, "fusion.ln1", &r1);
            let f = linear(model, "fusion.ff1", &n1, 2 * m);
            let f: Vec<f64> = f.into_iter().map(gelu).collect();
            let f = linear(model, "fusion.ff2", &f, m);
            let r2: Vec<f64> = n1.iter().zip(&f).map(|(a, b)| a + b).collect();
            layernorm(model, "fusion.ln2", &r2)
        })
        .collect();
    (out, avg)
}

fn reference_forward(model: &AmoModel, xs: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let c: Vec<Vec<f64>> = xs.iter().enumerate().map(|(k, x)| reference_encoder(model, k, x)).collect();
    let (fused, a) = reference_block(model, &c);
    let m = fused[0].len();
    let pooled: Vec<f64> = (0..m).map(|j| fused.iter().map(|r| r[j]).sum::<f64>() / fused.len() as f64).collect();
    (linear(model, "head", &pooled, model.output_dim()), a)
}

#[test]
fn encoder_matches_scalar_reference() {
    let mut cfg = ModelConfig::new(&[("x", 8)], HeadKind::Binary);
    cfg.latent_dim = 4;
    cfg.heads = 1;
    let mut model = AmoModel::new(cfg, 1234).unwrap();
    jitter(&mut model, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let got = model.encode_modality(0, &Tensor::matrix(1, 8, x.clone()).unwrap(), Mode::Eval, 0).unwrap();
    let want = reference_encoder(&model, 0, &x);
    assert_eq!(got.shape(), &[1, 4]);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn encoder_with_identity_weights_is_dropout_of_gelu() {
    let mut cfg = ModelConfig::new(&[("x", 3)], HeadKind::Binary);
    cfg.latent_dim = 3;
    cfg.heads = 1;
    cfg.dropout = 0.0;
    let mut model = AmoModel::new(cfg, 0).unwrap();
    let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    for lin in ["lin1", "lin2"] {
        let store = model.params_mut();
        store.get_mut(&format!("encoder.x.{lin}.weight")).unwrap().data_mut().copy_from_slice(&eye);
        store.get_mut(&format!("encoder.x.{lin}.bias")).unwrap().data_mut().fill(0.0);
    }
    let x = vec![-1.0, 0.5, 2.0];
    let z = model.encode_modality(0, &Tensor::matrix(1, 3, x.clone()).unwrap(), Mode::Eval, 0).unwrap();
    for (a, xi) in z.data().iter().zip(&x) {
        let want = gelu(xi / (1.0 + NORM_EPS).sqrt());
        assert!((a - want).abs() < 1e-14);
    }
}

#[test]
fn full_model_matches_scalar_reference() {
    for head in [HeadKind::Binary, HeadKind::Mtlr { bins: 6 }] {
        let mut model = AmoModel::new(toy_config(head), 31).unwrap();
        jitter(&mut model, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = batch(&mut rng, 4, &[5, 5, 5]);
        let (out, att) = model.predict(&inputs).unwrap();
        let t = model.output_dim();
        for b in 0..4 {
            let xs: Vec<Vec<f64>> = inputs.iter().map(|x| x.row(b).to_vec()).collect();
            let (want, a) = reference_forward(&model, &xs);
            for (g, w) in out[b * t..(b + 1) * t].iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
            for i in 0..3 {
                for j in 0..3 {
                    assert!((att[b * 9 + i * 3 + j] - a[i][j]).abs() < 1e-14);
                }
            }
        }
    }
}

#[test]
fn two_by_two_attention_by_hand() {
    let mut cfg = ModelConfig::new(&[("a", 1), ("b", 1)], HeadKind::Binary);
    cfg.latent_dim = 2;
    cfg.heads = 1;
    let mut model = AmoModel::new(cfg, 0).unwrap();
    let store = model.params_mut();
    store.get_mut("fusion.q.weight").unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    store.get_mut("fusion.k.weight").unwrap().data_mut().copy_from_slice(&[2.0, 0.0, 0.0, 1.0]);
    store.get_mut("fusion.q.bias").unwrap().data_mut().fill(0.0);
    store.get_mut("fusion.k.bias").unwrap().data_mut().fill(0.0);
    // C = [[1, 0], [0, 1]]: Q = C, K = diag(2, 1)
    // scores = Q K^T / sqrt(2) = [[2, 0], [0, 1]] / sqrt(2)
    let c = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let (_, a) = model.mhsa_fuse(&c, Mode::Eval, 0).unwrap();
    let s = 2f64.sqrt();
    let a00 = 1.0 / (1.0 + (-2.0 / s).exp());
    let a11 = 1.0 / (1.0 + (-1.0 / s).exp());
    let want = [a00, 1.0 - a00, 1.0 - a11, a11];
    for (g, w) in a.iter().zip(want) {
        assert!((g - w).abs() < 1e-14, "{g} vs {w}");
    }
}

#[test]
fn single_modality_block_is_refinement_of_value_path() {
    let mut cfg = ModelConfig::new(&[("a", 2)], HeadKind::Binary);
    cfg.latent_dim = 4;
    cfg.heads = 2;
    let model = AmoModel::new(cfg, 3).unwrap();
    let c = [vec![0.4, -1.0, 0.3, 2.0]];
    let (got, a) = model.mhsa_fuse(&Tensor::matrix(1, 4, c[0].clone()).unwrap(), Mode::Eval, 0).unwrap();
    assert_eq!(a, vec![1.0]);
    // with K=1 attention passes V through unchanged
    let v = linear(&model, "fusion.v", &c[0], 4);
    let o = linear(&model, "fusion.out", &v, 4);
    let r1: Vec<f64> = c[0].iter().zip(&o).map(|(x, y)| x + y).collect();
    let n1 = layernorm(&model, "fusion.ln1", &r1);
    let f: Vec<f64> = linear(&model, "fusion.ff1", &n1, 8).into_iter().map(gelu).collect();
    let f = linear(&model, "fusion.ff2", &f, 4);
    let r2: Vec<f64> = n1.iter().zip(&f).map(|(x, y)| x + y).collect();
    let want = layernorm(&model, "fusion.ln2", &r2);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

fn copy_params(from: &AmoModel, to: &mut AmoModel) {
    let names = to.params().names().to_vec();
    for name in names {
        let src = from.params().get(&name).unwrap().clone();
        *to.params_mut().get_mut(&name).unwrap() = src;
    }
}

#[test]
fn permuting_modalities_permutes_attention_and_keeps_output() {
    let model = AmoModel::new(toy_config(HeadKind::Mtlr { bins: 4 }), 44).unwrap();
    let mut cfg = toy_config(HeadKind::Mtlr { bins: 4 });
    let perm = [2usize, 0, 1];
    cfg.modalities = perm.iter().map(|&i| model.config().modalities[i].clone()).collect();
    let mut permuted = AmoModel::new(cfg, 0).unwrap();
    copy_params(&model, &mut permuted);

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let patient: ModalitySet = model
        .config()
        .modalities
        .iter()
        .map(|s| (s.name.clone(), (0..s.dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let a = model.forward(&patient, Mode::Eval, 0).unwrap();
    let b = permuted.forward(&patient, Mode::Eval, 0).unwrap();
    for (x, y) in a.output.iter().zip(&b.output) {
        assert!((x - y).abs() < 1e-12);
    }
    for i in 0..3 {
        for j in 0..3 {
            let orig = a.attention[perm[i] * 3 + perm[j]];
            assert!((b.attention[i * 3 + j] - orig).abs() < 1e-14);
        }
    }
}

/// Relative error between backprop and central differences for every
/// parameter of the toy model, in train mode with a fixed dropout seed.
fn model_grad_error(head: HeadKind) -> f64 {
    let model = AmoModel::new(toy_config(head), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inputs = batch(&mut rng, 4, &[5, 5, 5]);
    let labels = [1.0, 0.0, 0.0, 1.0];
    let targets: Vec<MtlrTarget> = [(1usize, false), (2, true), (0, false), (3, true)]
        .iter()
        .map(|&(bin, censored)| MtlrTarget {
            y: (0..4).map(|j| u8::from(if censored { j >= bin } else { j == bin })).collect(),
            censored,
        })
        .collect();
    let loss_of = |m: &AmoModel| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut pass = m.forward_batch(&inputs, Mode::Train, 99).unwrap();
        let g = &mut pass.graph;
        let loss = match head {
            HeadKind::Binary => {
                let p = g.sigmoid(pass.output).unwrap();
                g.weighted_bce(p, &labels, (0.8, 1.3), Reduction::Mean).unwrap()
            }
            HeadKind::Mtlr { .. } => mtlr_nll_graph(g, pass.output, &targets, Reduction::Mean).unwrap(),
        };
        let value = g.data(loss)[0];
        let grads = g.backward(loss).unwrap();
        (value, Some(pass.param_grads(&grads)))
    };
    let (_, grads) = loss_of(&model);
    let grads = grads.unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut work = model.clone();
    for (ti, g) in grads.iter().enumerate() {
        for e in 0..g.len() {
            let orig = model.params().tensors()[ti].data()[e];
            work.params_mut().tensors_mut()[ti].data_mut()[e] = orig + eps;
            let up = loss_of(&work).0;
            work.params_mut().tensors_mut()[ti].data_mut()[e] = orig - eps;
            let dn = loss_of(&work).0;
            work.params_mut().tensors_mut()[ti].data_mut()[e] = orig;
            let fd = (up - dn) / (2.0 * eps);
            // biases feeding a train-mode batchnorm have an exactly zero
            // gradient; there the difference quotient is pure roundoff
            if (g[e] - fd).abs() < 1e-9 && g[e].abs() < 1e-12 {
                continue;
            }
            worst = worst.max((g[e] - fd).abs() / g[e].abs().max(fd.abs()).max(1e-8));
        }
    }
    worst
}

#[test]
fn toy_model_gradients_match_finite_differences() {
    for head in [HeadKind::Binary, HeadKind::Mtlr { bins: 4 }] {
        let err = model_grad_error(head);
        assert!(err < 1e-4, "{head:?}: {err}");
    }
}

#[test]
fn sigmoid_of_binary_head_is_a_probability() {
    let model = AmoModel::new(toy_config(HeadKind::Binary), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inputs = batch(&mut rng, 16, &[5, 5, 5]);
    let (out, _) = model.predict(&inputs).unwrap();
    assert_eq!(out.len(), 16);
    for z in out {
        let p = 1.0 / (1.0 + (-z).exp());
        assert!(p > 0.0 && p < 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn attention_rows_sum_to_one(heads in prop::sample::select(vec![1usize, 2, 3, 4, 6, 12]), k in 1usize..5, seed: u64) {
        let mut cfg = ModelConfig::new(&[("a", 2)], HeadKind::Binary);
        cfg.latent_dim = 12;
        cfg.heads = heads;
        let model = AmoModel::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Tensor::new(vec![2, k, 12], (0..2 * k * 12).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let (_, a) = model.mhsa_fuse(&c, Mode::Train, seed).unwrap();
        for row in a.chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
