mod common;

use common::oracle;
use common::rng;
use helix_core::helix::{self, HelixConfig, VariantKind};
use helix_core::model::{self, ModelConfig};
use helix_core::tensor::{
    count_params, finite_diff_grad, max_relative_error, Ctx, Mode, ParamSet, Tensor, NORM_EPS,
};

fn tiny(helix: HelixConfig) -> ModelConfig {
    ModelConfig {
        channels: 4,
        image_size: 8,
        pooled_blocks: 2,
        helix,
    }
}

#[test]
fn backbone_maps_84_pixels_to_5x5() {
    let cfg = ModelConfig::default();
    let ps = model::init_params(&cfg, &mut rng(1)).unwrap();
    let img = Tensor::randn(&[1, 3, 84, 84], 1.0, &mut rng(2));
    for mode in [Mode::Train, Mode::Eval] {
        let mut ctx = Ctx::new(&ps, mode, false);
        let x = ctx.input(img.clone());
        let f = model::backbone_forward(&mut ctx, &cfg, x).unwrap();
        assert_eq!(ctx.graph.shape(f), &[1, 64, 5, 5]);
    }
    assert_eq!(cfg.feature_shape(), [64, 5, 5]);
}

#[test]
fn backbone_rejects_wrong_resolution() {
    let cfg = tiny(HelixConfig::baseline());
    let ps = model::init_params(&cfg, &mut rng(3)).unwrap();
    let mut ctx = Ctx::new(&ps, Mode::Eval, false);
    let x = ctx.input(Tensor::zeros(&[1, 3, 9, 9]));
    let err = model::backbone_forward(&mut ctx, &cfg, x).unwrap_err();
    assert_eq!(err.category(), "dimension");
}

#[test]
fn zero_image_gives_zero_features() {
    let cfg = tiny(HelixConfig::baseline());
    let ps = model::init_params(&cfg, &mut rng(4)).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let mut ctx = Ctx::new(&ps, mode, false);
        let x = ctx.input(Tensor::zeros(&[2, 3, 8, 8]));
        let f = model::backbone_forward(&mut ctx, &cfg, x).unwrap();
        assert!(ctx.graph.value(f).data().iter().all(|&v| v == 0.0));
    }
}

fn backbone_eval(ps: &ParamSet, cfg: &ModelConfig, img: &Tensor) -> Tensor {
    let mut ctx = Ctx::new(ps, Mode::Eval, false);
    let x = ctx.input(img.clone());
    let f = model::backbone_forward(&mut ctx, cfg, x).unwrap();
    ctx.graph.value(f).clone()
}

#[test]
fn backbone_is_deterministic_and_batch_independent() {
    let cfg = ModelConfig {
        channels: 8,
        image_size: 20,
        pooled_blocks: 3,
        helix: HelixConfig::baseline(),
    };
    let a = model::init_params(&cfg, &mut rng(5)).unwrap();
    let b = model::init_params(&cfg, &mut rng(5)).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    let imgs = Tensor::randn(&[3, 3, 20, 20], 1.0, &mut rng(6));
    let fa = backbone_eval(&a, &cfg, &imgs);
    let fb = backbone_eval(&b, &cfg, &imgs);
    assert_eq!(fa.checksum(), fb.checksum());

    let one = Tensor::new(&[1, 3, 20, 20], imgs.data()[1200..2400].to_vec()).unwrap();
    let f1 = backbone_eval(&a, &cfg, &one);
    let per = f1.numel();
    assert_eq!(&fa.data()[per..2 * per], f1.data());
}

// ----------------------------------------------------------- relation head

fn head_scores(ps: &ParamSet, s: &Tensor, q: &Tensor) -> Tensor {
    let mut ctx = Ctx::new(ps, Mode::Eval, false);
    let sv = ctx.input(s.clone());
    let qv = ctx.input(q.clone());
    let r = model::relation_scores(&mut ctx, sv, qv).unwrap();
    ctx.graph.value(r).clone()
}

fn randomized_head(c: usize, seed: u64) -> ParamSet {
    let cfg = ModelConfig {
        channels: c,
        ..tiny(HelixConfig::baseline())
    };
    let mut ps = ParamSet::new();
    let mut r = rng(seed);
    model::init_head(&mut ps, &cfg, &mut r).unwrap();
    for (path, p) in ps.iter_mut() {
        p.value = if path.ends_with("running_var") || path.ends_with("gamma") {
            Tensor::uniform(p.value.shape(), 0.5, 1.5, &mut r)
        } else {
            Tensor::randn(p.value.shape(), 0.5, &mut r)
        };
    }
    ps
}

#[test]
fn relation_score_is_finite_and_order_sensitive() {
    let ps = randomized_head(4, 7);
    let s = Tensor::randn(&[3, 4, 5, 5], 1.0, &mut rng(8));
    let q = Tensor::randn(&[3, 4, 5, 5], 1.0, &mut rng(9));
    let a = head_scores(&ps, &s, &q);
    let b = head_scores(&ps, &q, &s);
    assert_eq!(a.shape(), &[3]);
    assert!(a.all_finite());
    assert!(a.max_abs_diff(&b) > 1e-9);
}

#[test]
fn relation_score_rejects_mismatched_pair() {
    let ps = randomized_head(4, 10);
    let mut ctx = Ctx::new(&ps, Mode::Eval, false);
    let s = ctx.input(Tensor::zeros(&[1, 4, 2, 2]));
    let q = ctx.input(Tensor::zeros(&[1, 4, 3, 3]));
    assert_eq!(model::relation_scores(&mut ctx, s, q).unwrap_err().category(), "dimension");
}

fn bn_eval(m: &oracle::Map, ps: &ParamSet, p: &str) -> oracle::Map {
    let v = |s: &str| ps.value(&format!("{p}.{s}")).unwrap().data().to_vec();
    let (g, b, mu, var) = (v("gamma"), v("beta"), v("running_mean"), v("running_var"));
    m.iter()
        .enumerate()
        .map(|(c, plane)| {
            plane
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|x| (g[c] * (x - mu[c]) / (var[c] + NORM_EPS).sqrt() + b[c]).max(0.0))
                        .collect()
                })
                .collect()
        })
        .collect()
}

#[test]
fn tiny_head_matches_loop_oracle() {
    let ps = randomized_head(2, 11);
    let s = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng(12));
    let q = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng(13));
    let got = head_scores(&ps, &s, &q).item();

    let v = |k: &str| ps.value(k).unwrap().data().to_vec();
    let mut x = oracle::map_from(s.data(), 2, 2, 2);
    x.extend(oracle::map_from(q.data(), 2, 2, 2));
    let x = bn_eval(&oracle::conv3x3(&x, &v("head.block1.conv.weight")), &ps, "head.block1.bn");
    let pooled: oracle::Map = x
        .iter()
        .map(|p| vec![vec![p.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max)]])
        .collect();
    let x = bn_eval(&oracle::conv3x3(&pooled, &v("head.block2.conv.weight")), &ps, "head.block2.bn");
    let gap: Vec<f64> = x.iter().map(|p| p[0][0]).collect();
    let h = oracle::linear_rows(&vec![gap], &v("head.fc1.weight"), &v("head.fc1.bias"));
    let h: oracle::Mat = vec![h[0].iter().map(|x| x.max(0.0)).collect()];
    let out = oracle::linear_rows(&h, &v("head.fc2.weight"), &v("head.fc2.bias"))[0][0];
    assert!((got - out).abs() < 1e-10, "{got} vs {out}");
}

// ----------------------------------------------------------- episodes

#[test]
fn prototype_examples() {
    let ps = ParamSet::new();
    let proto = |maps: &Tensor, k: usize| {
        let mut ctx = Ctx::new(&ps, Mode::Eval, false);
        let x = ctx.input(maps.clone());
        model::prototypes(&mut ctx, x, k).map(|v| ctx.graph.value(v).clone())
    };
    let x = Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng(14));
    assert!(proto(&x, 1).unwrap().bit_eq(&x));

    let mut pair = x.data().to_vec();
    pair.extend(x.data().iter().map(|v| -v));
    let pair = Tensor::new(&[2, 3, 2, 2], pair).unwrap();
    assert!(proto(&pair, 2).unwrap().data().iter().all(|&v| v == 0.0));

    let five = Tensor::randn(&[10, 3, 2, 2], 1.0, &mut rng(15));
    let p = proto(&five, 5).unwrap();
    assert_eq!(p.shape(), &[2, 3, 2, 2]);
    for class in 0..2 {
        for i in 0..12 {
            let mut acc = 0.0;
            for k in 0..5 {
                acc += five.data()[(class * 5 + k) * 12 + i];
            }
            assert!((p.data()[class * 12 + i] - acc / 5.0).abs() < 1e-12);
        }
    }

    assert_eq!(proto(&x, 0).unwrap_err().category(), "precondition");
}

fn eval_logits(ps: &ParamSet, cfg: &ModelConfig, protos: &Tensor, queries: &Tensor) -> Tensor {
    let mut ctx = Ctx::new(ps, Mode::Eval, false);
    let p = ctx.input(protos.clone());
    let q = ctx.input(queries.clone());
    let (l, _) = model::episode_logits(&mut ctx, cfg, p, q).unwrap();
    ctx.graph.value(l).clone()
}

#[test]
fn episode_logits_match_per_pair_calls() {
    let cfg = tiny(HelixConfig::default());
    let ps = model::init_params(&cfg, &mut rng(16)).unwrap();
    let protos = Tensor::randn(&[5, 4, 2, 2], 1.0, &mut rng(17));
    let queries = Tensor::randn(&[3, 4, 2, 2], 1.0, &mut rng(18));
    let logits = eval_logits(&ps, &cfg, &protos, &queries);
    assert_eq!(logits.shape(), &[3, 5]);
    let per = 16;
    for m in 0..3 {
        for n in 0..5 {
            let mut ctx = Ctx::new(&ps, Mode::Eval, false);
            let s = ctx.input(Tensor::new(&[1, 4, 2, 2], protos.data()[n * per..(n + 1) * per].to_vec()).unwrap());
            let q = ctx.input(Tensor::new(&[1, 4, 2, 2], queries.data()[m * per..(m + 1) * per].to_vec()).unwrap());
            let out = helix::stack_forward(&mut ctx, &cfg.helix, s, q, &[(0, 0)]).unwrap();
            let r = model::relation_scores(&mut ctx, out.support, out.query).unwrap();
            let single = ctx.graph.value(r).item();
            assert!((logits.at(&[m, n]) - single).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_prototypes_give_identical_logits() {
    let cfg = tiny(HelixConfig::default());
    let ps = model::init_params(&cfg, &mut rng(19)).unwrap();
    let one = Tensor::randn(&[1, 4, 2, 2], 1.0, &mut rng(20));
    let protos = Tensor::new(&[5, 4, 2, 2], one.data().repeat(5)).unwrap();
    let queries = Tensor::randn(&[2, 4, 2, 2], 1.0, &mut rng(21));
    let logits = eval_logits(&ps, &cfg, &protos, &queries);
    for m in 0..2 {
        for n in 1..5 {
            assert_eq!(logits.at(&[m, n]), logits.at(&[m, 0]));
        }
    }
}

#[test]
fn episode_needs_two_classes() {
    let cfg = tiny(HelixConfig::default());
    let ps = model::init_params(&cfg, &mut rng(22)).unwrap();
    let mut ctx = Ctx::new(&ps, Mode::Eval, false);
    let p = ctx.input(Tensor::zeros(&[1, 4, 2, 2]));
    let q = ctx.input(Tensor::zeros(&[1, 4, 2, 2]));
    let err = model::episode_logits(&mut ctx, &cfg, p, q).unwrap_err();
    assert_eq!(err.category(), "precondition");
}

// ----------------------------------------------------------- parameter counts

/// Independent per-layer tally at width `c` with a symmetric, conv-embedded,
/// REP-enabled layer.
fn count_oracle(c: usize, with_helix: bool) -> usize {
    let conv = |cout: usize, cin: usize| cout * cin * 9;
    let bn = |ch: usize| 2 * ch;
    let fc = |o: usize, i: usize| o * i + o;
    let backbone = conv(c, 3) + 3 * conv(c, c) + 4 * bn(c);
    let head = conv(c, 2 * c) + bn(c) + conv(c, c) + bn(c) + fc(c / 2, c) + fc(1, c / 2);
    let embed = 6 * (conv(c, c) + bn(c));
    let rep = 2 * (2 * c + 2 * fc(c, c));
    backbone + head + if with_helix { embed + rep } else { 0 }
}

#[test]
fn parameter_counts() {
    assert_eq!(count_params(&ParamSet::new()), 0);
    let with = model::init_params(&ModelConfig::default(), &mut rng(23)).unwrap();
    let without = model::init_params(
        &ModelConfig {
            helix: HelixConfig::baseline(),
            ..ModelConfig::default()
        },
        &mut rng(23),
    )
    .unwrap();
    assert_eq!(count_params(&with), count_oracle(64, true));
    assert_eq!(count_params(&without), count_oracle(64, false));
    assert_eq!(count_params(&with) - count_params(&without), 238_848);
    assert_eq!(helix::layer_param_count(&HelixConfig::default(), 64), 238_848);
}

#[test]
fn unidirectional_layers_hold_half_the_parameters() {
    let qs = HelixConfig {
        variant: VariantKind::QtoS,
        ..HelixConfig::default()
    };
    let mut ps = ParamSet::new();
    helix::init_params(&mut ps, &qs, 64, &mut rng(24)).unwrap();
    assert_eq!(count_params(&ps), 238_848 / 2);
    assert_eq!(helix::layer_param_count(&qs, 64), 238_848 / 2);
}

// ----------------------------------------------------------- gradients

#[test]
fn micro_episode_gradients_match_finite_differences() {
    let cfg = tiny(HelixConfig::default());
    let ps = common::generic_point(model::init_params(&cfg, &mut rng(25)).unwrap(), 125);
    let support = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng(26));
    let query = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng(27));
    let labels = [0usize, 1];
    let loss = |p: &ParamSet| -> helix_core::Result<f64> {
        let mut ctx = Ctx::new(p, Mode::Train, false);
        let l = model::episode_forward(&mut ctx, &cfg, &support, 1, &query)?;
        let ce = ctx.graph.cross_entropy(l, &labels)?;
        Ok(ctx.graph.value(ce).item())
    };
    let mut ctx = Ctx::new(&ps, Mode::Train, true);
    let l = model::episode_forward(&mut ctx, &cfg, &support, 1, &query).unwrap();
    let ce = ctx.graph.cross_entropy(l, &labels).unwrap();
    ctx.backward(ce).unwrap();
    let mut analytic = ps.clone();
    ctx.finish().apply(&mut analytic).unwrap();

    let numeric = finite_diff_grad(loss, &ps, 1e-5).unwrap();
    let mut worst = (0.0f64, String::new());
    for (k, n) in &numeric {
        let a = analytic.get(k).unwrap().grad.as_ref().unwrap();
        let e = max_relative_error(a, n, 1e-5);
        if e > worst.0 {
            worst = (e, k.clone());
        }
    }
    assert!(worst.0 < 1e-4, "worst {:e} at {}", worst.0, worst.1);
}
