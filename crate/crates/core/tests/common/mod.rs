#![allow(dead_code)]

use semanon::generator::{Generator, GeneratorConfig};
use semanon::latent::{sample_latent, ExtendedLatent, MappingNetwork};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-3;

/// Outcome of a finite-difference sweep over selected coordinates.
#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates within `h` of an activation kink, where one-sided slopes disagree.
    pub skipped: usize,
    pub worst: f64,
}

/// Central differences of `f` at `x` against `analytic` on `coords`.
pub fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], coords: &[usize]) -> FdReport {
    let h = FD_STEP;
    let mut report = FdReport::default();
    let mid = f(x);
    for &i in coords {
        let mut v = x.to_vec();
        v[i] = x[i] + h;
        let up = f(&v);
        v[i] = x[i] - h;
        let down = f(&v);
        let (fwd, bwd) = ((up - mid) / h, (mid - down) / h);
        if (fwd - bwd).abs() > FD_TOLERANCE * fwd.abs().max(bwd.abs()) + 1e-9 {
            report.skipped += 1;
            continue;
        }
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-8);
        report.worst = report.worst.max(rel);
        report.checked += 1;
    }
    report
}

/// Evenly spread coordinate indices.
pub fn spread(n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|i| i * (n - 1) / (count - 1).max(1)).collect()
}

pub fn compact_model(seed: u64) -> (Generator, MappingNetwork) {
    let cfg = GeneratorConfig::compact();
    (Generator::new(cfg.clone(), seed).unwrap(), MappingNetwork::new(&cfg.latent, seed + 1).unwrap())
}

pub fn mapped(m: &MappingNetwork, seed: u64) -> ExtendedLatent {
    m.map_to_w(&sample_latent(seed, &m.config).unwrap()).unwrap()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Standard one-anchor InfoNCE written out directly.
pub fn one_anchor(v: &[Vec<f64>], anchor: usize, positive: usize, tau: f64) -> f64 {
    let g = |a: usize, b: usize| (cosine(&v[a], &v[b]) / tau).exp();
    let denom: f64 = (0..v.len()).filter(|&c| c != anchor).map(|c| g(anchor, c)).sum();
    -(g(anchor, positive) / denom).ln()
}

pub mod objective {
    use ndarray::Array2;
    use semanon::autodiff::{Tape, Var};
    use semanon::contrastive::{mirrored_loss, pair_loss_var, ProjectionHead};
    use semanon::encoder::{AttributeEncoder, StubEncoder};
    use semanon::generator::{Generator, LatentVars};
    use semanon::latent::{make_contrastive_batch, AttributeSlot, ExtendedLatent, MappingNetwork};
    use semanon::params::{Binder, Params};

    pub const TAU: f64 = 0.5;

    /// Four generated images, two pairs, one stub encoder and an 8-wide head.
    pub struct Setup {
        pub generator: Generator,
        pub encoder: StubEncoder,
        pub head: ProjectionHead,
        pub head_params: Params,
        pub latents: Vec<ExtendedLatent>,
        pub pairs: Vec<(usize, usize)>,
    }

    impl Setup {
        pub fn new() -> Self {
            let (generator, mapping): (Generator, MappingNetwork) = super::compact_model(30);
            let res = generator.resolution();
            let slots = [AttributeSlot::Identity, AttributeSlot::Pose];
            let batch = make_contrastive_batch(31, 4, &slots, &mapping.config).unwrap();
            let latents = batch.latents.iter().map(|z| mapping.map_to_w(z).unwrap()).collect();
            let pairs = batch.pairs.iter().map(|p| (p.alpha, p.beta)).collect();
            let encoder = StubEncoder::new(32, res, 8, 8).unwrap();
            let head = ProjectionHead { input: 8, hidden: 8, output: 8 };
            let head_params = head.init(33);
            Self { generator, encoder, head, head_params, latents, pairs }
        }

        /// Objective through the plain (non-tape) API.
        pub fn value(&self, latents: &[ExtendedLatent], head_params: &Params) -> f64 {
            let rows: Vec<Vec<f64>> = latents
                .iter()
                .map(|w| self.encoder.encode(&self.generator.generate(w).unwrap().image).unwrap())
                .collect();
            let e = Array2::from_shape_vec((rows.len(), 8), rows.concat()).unwrap();
            let v = self.head.forward(head_params, "", &e);
            let vectors: Vec<Vec<f64>> = v.rows().into_iter().map(|r| r.to_vec()).collect();
            self.pairs.iter().map(|&(a, b)| mirrored_loss(&vectors, a, b, TAU).unwrap()).sum()
        }

        /// Gradients with respect to the first latent (flattened) and the head parameters.
        pub fn gradients(&self) -> (Vec<f64>, Params) {
            let tape = Tape::new();
            let gb = Binder::frozen(&tape, &self.generator.params);
            let hb = Binder::new(&tape, &self.head_params);
            let lvs: Vec<LatentVars> = self.latents.iter().map(|w| LatentVars::leaves(&tape, w)).collect();
            let rows: Vec<Var> =
                lvs.iter().map(|lv| self.encoder.encode_var(self.generator.forward(&gb, lv).image)).collect();
            let v = self.head.forward_var(&hb, "", Var::concat_rows(&rows));
            let loss = pair_loss_var(v, &self.pairs, TAU, true);
            let grads = tape.backward(loss);
            let lv = &lvs[0];
            let mut flat: Vec<f64> = grads.get(lv.global).iter().copied().collect();
            for k in 0..lv.structure.len() {
                flat.extend(grads.get(lv.structure[k]).iter());
                flat.extend(grads.get(lv.texture[k]).iter());
            }
            (flat, hb.gradients(&grads))
        }
    }
}

pub mod pipeline {
    use semanon::anonymizer::Anonymizer;
    use semanon::blending::{BlendConfig, DiffusionInpainter, IdentityRestoration};
    use semanon::inversion::{InversionConfig, PyramidPerceptual};
    use semanon::latent::{estimate_w_mean, SemanticLayout};

    /// Compact anonymizer over fixed seeds with a short inversion budget.
    pub fn anonymizer(steps: usize) -> Anonymizer {
        let (generator, mapping) = super::compact_model(1);
        let w_mean = estimate_w_mean(3, 256, &mapping).unwrap();
        let res = generator.resolution();
        Anonymizer {
            generator,
            mapping,
            w_mean,
            layout: SemanticLayout::default(),
            perceptual: Box::new(PyramidPerceptual::new(res, res, 3)),
            inpainting: Box::new(DiffusionInpainter::default()),
            restoration: Box::new(IdentityRestoration),
            inversion: InversionConfig { steps, ..InversionConfig::default() },
            blend: BlendConfig::for_resolution(res),
        }
    }
}
