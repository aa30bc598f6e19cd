use std::collections::BTreeMap;

use ndarray::Array2;
use semanon::contrastive::*;
use semanon::encoder::{AttributeEncoder, StubEncoder};
use semanon::generator::GeneratedOutput;
use semanon::latent::{make_contrastive_batch, AttributeSlot, ExtendedLatent};
use semanon::params::Params;
use semanon::rng;
use semanon::training::{Trainer, TrainingConfig};

mod common;
use common::objective::{Setup, TAU};

fn random_batch(r: &mut rng::Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| rng::normal_vec(r, d)).collect()
}

#[test]
fn kernel_closed_forms() {
    let u = [0.3, -1.2, 2.0];
    let neg = u.map(|x| -x);
    for tau in [0.07, 0.5, 2.0] {
        assert!((similarity_g(&u, &u, tau).unwrap() - (1.0 / tau).exp()).abs() < 1e-9 * (1.0 / tau).exp());
        assert!((similarity_g(&u, &neg, tau).unwrap() - (-1.0 / tau).exp()).abs() < 1e-12);
    }
    assert_eq!(similarity_g(&[2.0, 0.0], &[0.0, -5.0], 1.0).unwrap(), 1.0);
}

#[test]
fn mirrored_loss_is_two_one_anchor_losses() {
    let mut r = rng::seeded(1);
    for i in 0..100 {
        let n = [2, 4, 8][i % 3];
        let v = random_batch(&mut r, n, 8);
        let (a, b) = (i % n, (i + 1 + i / 3) % n);
        if a == b {
            continue;
        }
        let got = mirrored_loss(&v, a, b, 0.3).unwrap();
        let oracle = common::one_anchor(&v, a, b, 0.3) + common::one_anchor(&v, b, a, 0.3);
        assert!((got - oracle).abs() < 1e-9, "batch {i}: {got} vs {oracle}");
        let one_way = directional_infonce(&v, a, b, 0.3).unwrap();
        assert!((one_way - common::one_anchor(&v, a, b, 0.3)).abs() < 1e-9);
    }
}

#[test]
fn pencil_cases() {
    let v = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![1.0, 1.0]];
    let e_half = std::f64::consts::FRAC_1_SQRT_2.exp();
    let d0 = 1.0 + (-1f64).exp() + e_half;
    let d1 = 1.0 + 1.0 + e_half;
    assert!((mirrored_loss(&v, 0, 1, 1.0).unwrap() - (d0.ln() + d1.ln())).abs() < 1e-12);

    let v = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]];
    let expected = (1.0 + (-1f64).exp()).ln();
    assert!((directional_infonce(&v, 0, 1, 1.0).unwrap() - expected).abs() < 1e-12);
    let sharp = directional_infonce(&v, 0, 1, 1e-3).unwrap();
    assert!(sharp >= 0.0 && sharp < 1e-300);
}

#[test]
fn loss_is_scale_invariant() {
    let mut r = rng::seeded(2);
    for _ in 0..20 {
        let v = random_batch(&mut r, 6, 5);
        let base = mirrored_loss(&v, 1, 4, 0.1).unwrap();
        let mut scaled = v.clone();
        for (i, row) in scaled.iter_mut().enumerate() {
            let s = 0.01 + 10.0 * (i as f64 + rng::normal(&mut r).abs());
            row.iter_mut().for_each(|x| *x *= s);
        }
        assert!((mirrored_loss(&scaled, 1, 4, 0.1).unwrap() - base).abs() < 1e-9);
    }
}

#[test]
fn degenerate_inputs_are_rejected() {
    let v = vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]];
    assert!(mirrored_loss(&v, 0, 1, 1.0).is_err());
    assert!(mirrored_loss(&v, 0, 0, 1.0).is_err());
    assert!(mirrored_loss(&v[..1], 0, 0, 1.0).is_err());
    assert!(mirrored_loss(&v, 0, 2, -1.0).is_err());
}

fn outputs(setup: &Setup) -> Vec<GeneratedOutput> {
    setup.latents.iter().map(|w| setup.generator.generate(w).unwrap()).collect()
}

#[test]
fn attribute_loss_toggles() {
    let setup = Setup::new();
    let (_, mapping) = common::compact_model(30);
    let batch = make_contrastive_batch(31, 4, &[AttributeSlot::Identity, AttributeSlot::Pose], &mapping.config).unwrap();
    let images = outputs(&setup);
    let head = Some((&setup.head, &setup.head_params, ""));
    let on = ContrastiveConfig { temperature: TAU, mirroring: true, use_heads: true };
    let off = ContrastiveConfig { mirroring: false, ..on };

    let none = attribute_loss(&batch, &images, AttributeSlot::Age, &setup.encoder, head, &on).unwrap();
    assert!(none.no_pairs && none.value == 0.0);

    let e = Array2::from_shape_vec(
        (4, 8),
        images.iter().flat_map(|o| setup.encoder.encode(&o.image).unwrap()).collect(),
    )
    .unwrap();
    let v: Vec<Vec<f64>> =
        setup.head.forward(&setup.head_params, "", &e).rows().into_iter().map(|r| r.to_vec()).collect();
    let mirrored = attribute_loss(&batch, &images, AttributeSlot::Pose, &setup.encoder, head, &on).unwrap();
    let one_way = attribute_loss(&batch, &images, AttributeSlot::Pose, &setup.encoder, head, &off).unwrap();
    let p = batch.pairs_for(AttributeSlot::Pose).next().unwrap();
    let forward = common::one_anchor(&v, p.alpha, p.beta, TAU);
    let backward = common::one_anchor(&v, p.beta, p.alpha, TAU);
    assert!((mirrored.value - (forward + backward)).abs() < 1e-9);
    assert!((one_way.value - forward).abs() < 1e-9);

    let raw: Vec<Vec<f64>> = e.rows().into_iter().map(|r| r.to_vec()).collect();
    let no_heads = ContrastiveConfig { use_heads: false, ..on };
    let bypass = attribute_loss(&batch, &images, AttributeSlot::Pose, &setup.encoder, head, &no_heads).unwrap();
    assert!((bypass.value - mirrored_loss(&raw, p.alpha, p.beta, TAU).unwrap()).abs() < 1e-12);
}

fn flatten(p: &Params) -> Vec<f64> {
    p.iter().flat_map(|(_, v)| v.iter().copied().collect::<Vec<_>>()).collect()
}

fn unflatten(template: &Params, values: &[f64]) -> Params {
    let mut out = template.clone();
    let mut it = values.iter();
    for (_, v) in out.iter_mut() {
        v.iter_mut().for_each(|x| *x = *it.next().unwrap());
    }
    out
}

#[test]
fn head_gradient_matches_finite_differences() {
    let setup = Setup::new();
    let (_, head_grads) = setup.gradients();
    let x = flatten(&setup.head_params);
    let analytic = flatten(&head_grads);
    let f = |v: &[f64]| setup.value(&setup.latents, &unflatten(&setup.head_params, v));
    let report = common::fd_check(f, &x, &analytic, &(0..x.len()).collect::<Vec<_>>());
    assert!(report.checked > x.len() / 2, "{report:?}");
    assert!(report.worst < common::FD_TOLERANCE, "{report:?}");
}

#[test]
fn latent_gradient_matches_finite_differences() {
    let setup = Setup::new();
    let (analytic, _) = setup.gradients();
    let x = setup.latents[0].flatten();
    let config = &setup.generator.config.latent;
    let f = |v: &[f64]| {
        let mut latents = setup.latents.clone();
        latents[0] = ExtendedLatent::unflatten(v, config).unwrap();
        setup.value(&latents, &setup.head_params)
    };
    let report = common::fd_check(f, &x, &analytic, &common::spread(x.len(), 24));
    assert!(report.checked >= 18, "{report:?}");
    assert!(report.worst < common::FD_TOLERANCE, "{report:?}");
}

fn trainer(config: TrainingConfig, real: Vec<semanon::image::Image>) -> Trainer {
    let (g, m) = common::compact_model(40);
    let res = g.resolution();
    let mut encoders: BTreeMap<AttributeSlot, Box<dyn AttributeEncoder>> = BTreeMap::new();
    for slot in AttributeSlot::CONSTRAINED {
        encoders.insert(slot, Box::new(StubEncoder::for_slot(41, slot, res).unwrap()));
    }
    Trainer::new(g, m, encoders, config, 42, real).unwrap()
}

fn small_training() -> TrainingConfig {
    TrainingConfig { batch_size: 4, head_hidden: 16, head_output: 16, ..TrainingConfig::default() }
}

#[test]
fn training_never_touches_encoders() {
    let mut t = trainer(small_training(), Vec::new());
    let before = t.encoder_digests();
    let gen_before = t.model.generator.params.digest();
    for _ in 0..10 {
        let report = t.training_step().unwrap();
        assert!(report.contrastive_total.is_finite());
        assert_eq!(report.contrastive.len(), 4);
    }
    assert_eq!(t.encoder_digests(), before);
    assert_ne!(t.model.generator.params.digest(), gen_before);
    assert_eq!(t.step, 10);
}

#[test]
fn adversarial_smoke() {
    let mut config = small_training();
    config.adversarial.enabled = true;
    let (g, m) = common::compact_model(50);
    let real: Vec<_> = (0..4).map(|s| g.generate(&common::mapped(&m, 60 + s)).unwrap().image).collect();
    let mut t = trainer(config, real);
    for _ in 0..2 {
        let r = t.training_step().unwrap();
        assert!(r.generator_adversarial.unwrap().is_finite());
        assert!(r.discriminator.is_some());
    }
}
