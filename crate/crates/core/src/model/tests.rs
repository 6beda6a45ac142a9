use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::params::{block_param, HEAD, PATCH_EMBED, POS_EMBED};
use super::*;
use crate::autodiff::gradcheck::{finite_diff, relative_error, FD_STEP, FIRST_ORDER_TOL};

fn random_image(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Image<f64> {
    let u = Uniform::new(0.0, 1.0).unwrap();
    let n = cfg.image_height * cfg.image_width * cfg.image_channels;
    Image::new(
        cfg.image_height,
        cfg.image_width,
        cfg.image_channels,
        (0..n).map(|_| u.sample(rng)).collect(),
    )
    .unwrap()
}

fn small(variant: ArchVariant, depth: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(variant, (8, 8, 1), (4, 4), 8, 2, depth, 4);
    cfg.mlp_hidden_dim = 12;
    cfg
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    Tensor::from_fn(m, n, |i, j| (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum())
}

/// Gradients of the loss with respect to the first block's input and its
/// attention intermediates, alongside the parameter gradients.
struct Probe {
    dz: Tensor<f64>,
    z: Tensor<f64>,
    d_attn_in: Tensor<f64>,
    dq: Tensor<f64>,
    dk: Tensor<f64>,
    dv: Tensor<f64>,
    snapshot: GradientSnapshot<f64>,
}

fn probe(model: &VisionTransformer<f64>, image: &Image<f64>, label: usize) -> Probe {
    let tape = Tape::new();
    let pv = ParamVars::register(&tape, &model.params, true);
    let x = tape.constant(model.patchify(image).unwrap());
    let fwd = forward_on_tape(&model.config, &pv, x).unwrap();
    let loss = cross_entropy_softmax(fwd.logits, label).unwrap();
    let b0 = &fwd.blocks[0];
    let wrt = [b0.z, b0.attn_input, b0.q, b0.k, b0.v];
    let g = tape.grad(loss, &wrt).unwrap();
    Probe {
        dz: g[0].clone(),
        z: b0.z.value(),
        d_attn_in: g[1].clone(),
        dq: g[2].clone(),
        dk: g[3].clone(),
        dv: g[4].clone(),
        snapshot: model.compute_gradients(std::slice::from_ref(image), &[label]).unwrap(),
    }
}

#[test]
fn zero_model_is_uniform() {
    for variant in [ArchVariant::A, ArchVariant::B] {
        let cfg = small(variant, 2);
        let model = VisionTransformer::new(cfg.clone(), ModelParams::zeros(&cfg).unwrap()).unwrap();
        let img = Image::filled(8, 8, 1, 0.3);
        let (logits, _) = model.forward(&img).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let snap = model.compute_gradients(&[img], &[1]).unwrap();
        assert!((snap.loss - (4f64).ln()).abs() < 1e-15);
        let head = snap.head_grad().unwrap();
        let c = cfg.channel_dim;
        for j in 0..c {
            assert_eq!(head.at(1, j), 0.0);
        }
        assert!((head.at(1, c) - (0.25 - 1.0)).abs() < 1e-15);
        assert!((head.at(0, c) - 0.25).abs() < 1e-15);
        for (_, t) in snap.iter() {
            assert!(t.all_finite());
        }
    }
}

#[test]
fn duplicate_batch_equals_single() {
    let cfg = small(ArchVariant::B, 2);
    let model = VisionTransformer::<f64>::init(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_image(&cfg, &mut rng);
    let one = model.compute_gradients(std::slice::from_ref(&img), &[2]).unwrap();
    let two = model.compute_gradients(&[img.clone(), img], &[2, 2]).unwrap();
    for (name, g) in one.iter() {
        assert!(g.sub(two.get(name).unwrap()).unwrap().max_abs() <= 1e-12);
    }
    assert_eq!(two.batch_size, 2);
}

#[test]
fn batch_gradient_is_mean_of_samples() {
    let cfg = small(ArchVariant::A, 1);
    let model = VisionTransformer::<f64>::init(cfg.clone(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let imgs: Vec<_> = (0..3).map(|_| random_image(&cfg, &mut rng)).collect();
    let labels = [0, 3, 1];
    let batch = model.compute_gradients(&imgs, &labels).unwrap();
    let singles: Vec<_> = imgs
        .iter()
        .zip(labels)
        .map(|(i, l)| model.compute_gradients(std::slice::from_ref(i), &[l]).unwrap())
        .collect();
    for (name, g) in batch.iter() {
        let mut mean = Tensor::zeros(g.shape());
        for s in &singles {
            mean = mean.add(s.get(name).unwrap()).unwrap();
        }
        let mean = mean.scale(1.0 / 3.0);
        assert!(g.sub(&mean).unwrap().max_abs() <= 1e-12, "{name}");
    }
}

#[test]
fn label_out_of_range() {
    let cfg = small(ArchVariant::A, 1);
    let model = VisionTransformer::<f64>::init(cfg, 0).unwrap();
    let img = Image::filled(8, 8, 1, 0.1);
    assert!(matches!(
        model.compute_gradients(&[img], &[4]),
        Err(Error::LabelOutOfRange { label: 4, classes: 4 })
    ));
}

#[test]
fn permuting_patches_and_positions_keeps_variant_a_logits() {
    let cfg = small(ArchVariant::A, 2);
    let mut model = VisionTransformer::<f64>::init(cfg.clone(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = patchify(&random_image(&cfg, &mut rng), &cfg).unwrap();
    let logits_for = |m: &VisionTransformer<f64>, x: &Tensor<f64>| {
        let tape = Tape::new();
        let pv = ParamVars::register(&tape, &m.params, false);
        forward_on_tape(&m.config, &pv, tape.constant(x.clone())).unwrap().logits.value()
    };
    let before = logits_for(&model, &x);
    let swap = |t: &Tensor<f64>| {
        Tensor::from_fn(t.rows(), t.cols(), |i, j| {
            let j = match j {
                0 => 3,
                3 => 0,
                j => j,
            };
            t.at(i, j)
        })
    };
    let xs = swap(&x);
    let pos = swap(model.params.get(POS_EMBED).unwrap());
    *model.params.get_mut(POS_EMBED).unwrap() = pos;
    let after = logits_for(&model, &xs);
    assert!(before.sub(&after).unwrap().max_abs() < 1e-14);
}

#[test]
fn trace_replay_reproduces_logits() {
    for (variant, cls) in [(ArchVariant::A, false), (ArchVariant::B, true), (ArchVariant::B, false)] {
        let mut cfg = small(variant, 2);
        cfg.cls_token = cls;
        let model = VisionTransformer::<f64>::init(cfg.clone(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (logits, trace) = model.forward(&random_image(&cfg, &mut rng)).unwrap();
        let last = &trace.blocks.last().unwrap().out;
        let t = cfg.token_count();
        let pooled: Vec<f64> = if cls {
            (0..cfg.channel_dim).map(|i| last.at(i, 0)).collect()
        } else {
            (0..cfg.channel_dim)
                .map(|i| (0..t).map(|j| last.at(i, j)).sum::<f64>() / t as f64)
                .collect()
        };
        let mut aug = pooled;
        aug.push(1.0);
        let replay = naive_matmul(model.params.get(HEAD).unwrap(), &Tensor::column(&aug));
        assert!(replay.sub(&logits).unwrap().max_abs() < 1e-13);
        for b in &trace.blocks {
            for w in &b.attention {
                for i in 0..t {
                    let s: f64 = (0..t).map(|j| w.at(i, j)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn embedding_cases() {
    let cfg = small(ArchVariant::A, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = random_image(&cfg, &mut rng);
    let x = patchify(&img, &cfg).unwrap();

    let mut model = VisionTransformer::<f64>::init(cfg.clone(), 6).unwrap();
    let (_, trace) = model.forward(&img).unwrap();
    let oracle = naive_matmul(model.params.get(PATCH_EMBED).unwrap(), &x)
        .add(model.params.get(POS_EMBED).unwrap())
        .unwrap();
    assert!(trace.blocks[0].z.sub(&oracle).unwrap().max_abs() < 1e-15);

    let wp_shape = model.params.get(PATCH_EMBED).unwrap().shape().to_vec();
    *model.params.get_mut(PATCH_EMBED).unwrap() = Tensor::zeros(&wp_shape);
    let (_, trace) = model.forward(&img).unwrap();
    assert_eq!(&trace.blocks[0].z, model.params.get(POS_EMBED).unwrap());

    let mut model = VisionTransformer::<f64>::init(cfg.clone(), 6).unwrap();
    let pos_shape = model.params.get(POS_EMBED).unwrap().shape().to_vec();
    *model.params.get_mut(POS_EMBED).unwrap() = Tensor::zeros(&pos_shape);
    let (_, trace) = model.forward(&img).unwrap();
    let wpx = model.params.get(PATCH_EMBED).unwrap().matmul(&x).unwrap();
    assert_eq!(trace.blocks[0].z, wpx);
}

#[test]
fn fixed_and_absent_positions() {
    let mut cfg = small(ArchVariant::A, 1);
    cfg.pos_mode = PosMode::FixedSinusoidal;
    let model = VisionTransformer::<f64>::init(cfg.clone(), 2).unwrap();
    let img = Image::filled(8, 8, 1, 0.0);
    let (_, trace) = model.forward(&img).unwrap();
    let table = sinusoidal_pos_table::<f64>(cfg.channel_dim, cfg.patch_count()).unwrap();
    let wp = model.params.get(PATCH_EMBED).unwrap();
    // zero image: W_p X is the bias column repeated
    let expected = Tensor::from_fn(cfg.channel_dim, 4, |i, j| wp.at(i, cfg.patch_dim() - 1) + table.at(i, j));
    assert!(trace.blocks[0].z.sub(&expected).unwrap().max_abs() < 1e-15);
    let snap = model.compute_gradients(&[img.clone()], &[0]).unwrap();
    assert!(snap.pos_grad().is_none());

    cfg.pos_mode = PosMode::None;
    let model = VisionTransformer::<f64>::init(cfg, 2).unwrap();
    assert!(model.compute_gradients(&[img], &[0]).unwrap().pos_grad().is_none());
}

fn naive_attention(
    z: &Tensor<f64>,
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    w: &Tensor<f64>,
    heads: usize,
) -> Tensor<f64> {
    let (c, p) = (z.rows(), z.cols());
    let dk = c / heads;
    let (qz, kz, vz) = (naive_matmul(q, z), naive_matmul(k, z), naive_matmul(v, z));
    let mut h = Tensor::zeros(&[c, p]);
    for head in 0..heads {
        let rows = head * dk..(head + 1) * dk;
        for i in 0..p {
            let scores: Vec<f64> = (0..p)
                .map(|j| rows.clone().map(|r| qz.at(r, i) * kz.at(r, j)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let total: f64 = e.iter().sum();
            for r in rows.clone() {
                let val: f64 = (0..p).map(|j| e[j] / total * vz.at(r, j)).sum();
                h.set(r, i, val);
            }
        }
    }
    naive_matmul(w, &h)
}

#[test]
fn attention_matches_elementwise_reference() {
    let mut cfg = ModelConfig::new(ArchVariant::A, (4, 4, 1), (2, 2), 8, 2, 1, 3);
    cfg.init_std = 0.7;
    let model = VisionTransformer::<f64>::init(cfg.clone(), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (_, trace) = model.forward(&random_image(&cfg, &mut rng)).unwrap();
    let b = &trace.blocks[0];
    let p = |n: &str| model.params.get(&block_param(0, n)).unwrap();
    let reference = naive_attention(&b.z, p("attn.q"), p("attn.k"), p("attn.v"), p("attn.proj"), 2);
    assert!(reference.sub(&b.a).unwrap().max_abs() < 1e-13);
}

#[test]
fn single_patch_attention_passes_values_through() {
    let cfg = ModelConfig::new(ArchVariant::A, (2, 2, 1), (2, 2), 4, 2, 1, 3);
    let model = VisionTransformer::<f64>::init(cfg, 1).unwrap();
    let (_, trace) = model.forward(&Image::filled(2, 2, 1, 0.7)).unwrap();
    let b = &trace.blocks[0];
    assert_eq!(b.h, b.v);
}

#[test]
fn zero_keys_give_uniform_attention() {
    let cfg = small(ArchVariant::A, 1);
    let mut model = VisionTransformer::<f64>::init(cfg.clone(), 1).unwrap();
    *model.params.get_mut(&block_param(0, "attn.k")).unwrap() = Tensor::zeros(&[8, 8]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, trace) = model.forward(&random_image(&cfg, &mut rng)).unwrap();
    let b = &trace.blocks[0];
    for i in 0..8 {
        let mean: f64 = (0..4).map(|j| b.v.at(i, j)).sum::<f64>() / 4.0;
        for j in 0..4 {
            assert!((b.h.at(i, j) - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for (variant, cls, nl) in [
        (ArchVariant::A, false, Nonlinearity::Relu),
        (ArchVariant::B, true, Nonlinearity::Gelu),
        (ArchVariant::A, false, Nonlinearity::Gelu),
    ] {
        let mut cfg = ModelConfig::new(variant, (4, 4, 1), (2, 2), 4, 2, 2, 3);
        cfg.cls_token = cls;
        cfg.nonlinearity = nl;
        cfg.mlp_hidden_dim = 6;
        cfg.init_std = 0.5;
        let model = VisionTransformer::<f64>::init(cfg.clone(), 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let imgs = [random_image(&cfg, &mut rng), random_image(&cfg, &mut rng)];
        let labels = [2, 0];
        let snap = model.compute_gradients(&imgs, &labels).unwrap();
        for (name, analytic) in snap.iter() {
            let f = |t: &Tensor<f64>| -> crate::Result<f64> {
                let mut m = model.clone();
                *m.params.get_mut(name)? = t.clone();
                Ok(m.compute_gradients(&imgs, &labels)?.loss)
            };
            let fd = finite_diff(f, model.params.get(name).unwrap(), FD_STEP).unwrap();
            let err = relative_error(analytic, &fd);
            assert!(err < FIRST_ORDER_TOL, "{variant} {name}: {err:e}");
        }
    }
}

#[test]
fn position_gradient_equals_input_gradient() {
    for seed in 0..6u64 {
        let variant = if seed % 2 == 0 { ArchVariant::A } else { ArchVariant::B };
        let mut cfg = small(variant, 1 + (seed as usize % 3));
        cfg.cls_token = variant == ArchVariant::B && seed % 3 == 0;
        let model = VisionTransformer::<f64>::init(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pr = probe(&model, &random_image(&cfg, &mut rng), (seed % 4) as usize);
        let pos = pr.snapshot.pos_grad().unwrap();
        assert!(pos.sub(&pr.dz).unwrap().max_abs() <= 1e-12);
    }
}

#[test]
fn input_gradient_decomposes_over_projections() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for seed in 0..20u64 {
        let variant = if seed % 2 == 0 { ArchVariant::A } else { ArchVariant::B };
        let mut cfg = small(variant, 1 + (seed as usize % 2));
        let n: f64 = StandardNormal.sample(&mut rng);
        cfg.init_std = 0.05 + 0.2 * n.abs().min(2.0);
        let model = VisionTransformer::<f64>::init(cfg.clone(), seed).unwrap();
        let pr = probe(&model, &random_image(&cfg, &mut rng), (seed % 4) as usize);
        let p = |n: &str| model.params.get(&block_param(0, n)).unwrap().transpose().unwrap();
        // d l / d attn_input = Q^T dl/dq + K^T dl/dk + V^T dl/dv
        let rhs = p("attn.q")
            .matmul(&pr.dq)
            .unwrap()
            .add(&p("attn.k").matmul(&pr.dk).unwrap())
            .unwrap()
            .add(&p("attn.v").matmul(&pr.dv).unwrap())
            .unwrap();
        assert!(rhs.sub(&pr.d_attn_in).unwrap().max_abs() <= 1e-10 * pr.d_attn_in.max_abs().max(1.0));

        if variant == ArchVariant::A {
            // (dl/dz) z^T = Q^T dl/dQ + K^T dl/dK + V^T dl/dV
            let lhs = pr.dz.matmul(&pr.z.transpose().unwrap()).unwrap();
            let g = |n: &str| pr.snapshot.get(&block_param(0, n)).unwrap();
            let rhs = p("attn.q")
                .matmul(g("attn.q"))
                .unwrap()
                .add(&p("attn.k").matmul(g("attn.k")).unwrap())
                .unwrap()
                .add(&p("attn.v").matmul(g("attn.v")).unwrap())
                .unwrap();
            let rel = lhs.sub(&rhs).unwrap().frobenius_norm() / lhs.frobenius_norm();
            assert!(rel < 1e-8, "seed {seed}: {rel:e}");
        }
    }
}

#[test]
fn runs_in_single_precision() {
    let cfg = small(ArchVariant::B, 1);
    let model = VisionTransformer::<f32>::init(cfg, 0).unwrap();
    let snap = model.compute_gradients(&[Image::filled(8, 8, 1, 0.5f32)], &[1]).unwrap();
    assert!(snap.iter().all(|(_, g)| g.all_finite()));
}
