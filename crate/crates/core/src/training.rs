//! Generative contrastive training: per-attribute contrastive losses on frozen
//! encoder embeddings, summed with an optional adversarial objective.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::contrastive::{pair_loss_var, prefix, slot_pairs, ContrastiveConfig, ProjectionHeads};
use crate::discriminator::{Discriminator, DiscriminatorLoss};
use crate::encoder::AttributeEncoder;
use crate::error::{Error, Result};
use crate::generator::{Generator, LatentVars};
use crate::image::Image;
use crate::latent::{make_contrastive_batch, AttributeSlot, ContrastiveBatch, LatentSample, MappingNetwork};
use crate::params::{Adam, AdamConfig, Binder, Params};
use crate::rng::{self, derive_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialConfig {
    pub enabled: bool,
    /// Weight of the non-saturating generator loss.
    pub weight: f64,
    pub r1_gamma: f64,
    pub channels: [usize; 2],
    pub optimizer: AdamConfig,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            weight: 1.0,
            r1_gamma: 1.0,
            channels: [16, 32],
            optimizer: AdamConfig { learning_rate: 2e-3, beta1: 0.0, beta2: 0.99, epsilon: 1e-8 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub contrastive: ContrastiveConfig,
    pub batch_size: usize,
    pub slots: Vec<AttributeSlot>,
    pub head_hidden: usize,
    pub head_output: usize,
    pub optimizer: AdamConfig,
    pub adversarial: AdversarialConfig,
    /// Reuse the step-0 batch every step (a fixed toy task).
    pub fixed_batch: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            contrastive: ContrastiveConfig::default(),
            batch_size: 16,
            slots: AttributeSlot::CONSTRAINED.to_vec(),
            head_hidden: 128,
            head_output: 128,
            optimizer: AdamConfig::with_lr(2e-3),
            adversarial: AdversarialConfig::default(),
            fixed_batch: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.contrastive.validate()?;
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config("batch_size must be even and at least 2".into()));
        }
        if self.slots.is_empty() || self.slots.contains(&AttributeSlot::Free) {
            return Err(Error::Config("training slots must be a nonempty set of constrained slots".into()));
        }
        if self.head_hidden == 0 || self.head_output == 0 {
            return Err(Error::Config("projection head widths must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar losses of one training step, emitted as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub contrastive: BTreeMap<String, f64>,
    pub contrastive_total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator_adversarial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<DiscriminatorLoss>,
}

impl StepReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Everything that is updated by training.
#[derive(Debug, Clone)]
pub struct TrainableModel {
    pub generator: Generator,
    pub mapping: MappingNetwork,
    pub heads: ProjectionHeads,
    pub discriminator: Option<Discriminator>,
}

/// Single-writer training loop state.
pub struct Trainer {
    pub model: TrainableModel,
    pub config: TrainingConfig,
    pub encoders: BTreeMap<AttributeSlot, Box<dyn AttributeEncoder>>,
    pub step: u64,
    seed: u64,
    real_images: Vec<Image>,
    opt_generator: Adam,
    opt_mapping: Adam,
    opt_heads: Adam,
    opt_discriminator: Adam,
}

/// Per-image gradient bundle reduced across the batch.
struct ImageGrads {
    generator: Params,
    mapping: Params,
    adversarial: f64,
}

impl Trainer {
    /// `encoders` must cover every training slot. `real_images` feed the
    /// discriminator and are ignored when the adversarial part is disabled.
    pub fn new(
        generator: Generator,
        mapping: MappingNetwork,
        encoders: BTreeMap<AttributeSlot, Box<dyn AttributeEncoder>>,
        config: TrainingConfig,
        seed: u64,
        real_images: Vec<Image>,
    ) -> Result<Self> {
        config.validate()?;
        let res = generator.resolution();
        let mut dims = Vec::new();
        for &slot in &config.slots {
            let enc = encoders
                .get(&slot)
                .ok_or_else(|| Error::Config(format!("no encoder for slot {slot}")))?;
            if enc.input_size() != (res, res) {
                return Err(Error::Config(format!("encoder for {slot} expects {:?} images", enc.input_size())));
            }
            dims.push((slot, enc.output_dim()));
        }
        let heads = ProjectionHeads::new(&dims, config.head_hidden, config.head_output, derive_seed(seed, "heads"));
        let discriminator = if config.adversarial.enabled {
            if real_images.is_empty() {
                return Err(Error::Config("adversarial training needs real images".into()));
            }
            if real_images.iter().any(|i| i.height != res || i.width != res) {
                return Err(Error::Config(format!("real images must be {res}x{res}")));
            }
            let [c1, c2] = config.adversarial.channels;
            Some(Discriminator::new(res, c1, c2, derive_seed(seed, "discriminator"))?)
        } else {
            None
        };
        Ok(Self {
            model: TrainableModel { generator, mapping, heads, discriminator },
            opt_generator: Adam::new(config.optimizer),
            opt_mapping: Adam::new(config.optimizer),
            opt_heads: Adam::new(config.optimizer),
            opt_discriminator: Adam::new(config.adversarial.optimizer),
            encoders,
            config,
            step: 0,
            seed,
            real_images,
        })
    }

    /// Replaces the randomly initialized heads (e.g. when resuming).
    pub fn set_heads(&mut self, heads: ProjectionHeads) {
        self.model.heads = heads;
    }

    /// Digest per encoder; identical before and after any number of steps.
    pub fn encoder_digests(&self) -> BTreeMap<AttributeSlot, String> {
        self.encoders.iter().map(|(s, e)| (*s, e.state_digest())).collect()
    }

    pub fn batch_for_step(&self, step: u64) -> Result<ContrastiveBatch> {
        let step = if self.config.fixed_batch { 0 } else { step };
        make_contrastive_batch(
            derive_seed(self.seed, &format!("train/{step}")),
            self.config.batch_size,
            &self.config.slots,
            &self.model.generator.config.latent,
        )
    }

    /// Forward pass from `z` on the tape with mapping and generator bound through `mb` / `gb`.
    fn image_var<'t>(&self, gb: &Binder<'t, '_>, mb: &Binder<'t, '_>, z: &LatentSample) -> Var<'t> {
        let tape = gb.tape();
        let mapping = &self.model.mapping;
        let row = |v: &[f64]| tape.constant(Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row"));
        let global: Vec<_> = AttributeSlot::ALL
            .iter()
            .map(|s| mapping.map_var(mb, s.name(), row(z.global.slot(*s))))
            .collect();
        let local: Vec<_> = z.local.codes.iter().map(|c| mapping.map_var(mb, "local", row(c))).collect();
        let latent = LatentVars { global: Var::concat_cols(&global), structure: local.clone(), texture: local };
        self.model.generator.forward(gb, &latent).image
    }

    fn render(&self, z: &LatentSample) -> Image {
        let tape = Tape::new();
        let gb = Binder::frozen(&tape, &self.model.generator.params);
        let mb = Binder::frozen(&tape, &self.model.mapping.params);
        let v = self.image_var(&gb, &mb, z);
        let res = self.model.generator.resolution();
        Image::from_matrix(res, res, &v.value()).expect("generator output shape")
    }

    /// Contrastive loss on fixed embeddings; returns per-slot values, head
    /// gradients and the gradient with respect to every embedding matrix.
    #[allow(clippy::type_complexity)]
    fn embedding_stage(
        &self,
        batch: &ContrastiveBatch,
        embeddings: &BTreeMap<AttributeSlot, Array2<f64>>,
    ) -> (BTreeMap<String, f64>, f64, Params, BTreeMap<AttributeSlot, Array2<f64>>) {
        let tape = Tape::new();
        let hb = Binder::new(&tape, &self.model.heads.params);
        let cfg = &self.config.contrastive;
        let mut losses = BTreeMap::new();
        let mut leaves = BTreeMap::new();
        let mut total = tape.scalar(0.0);
        for (&slot, e) in embeddings {
            let leaf = tape.leaf(e.clone());
            leaves.insert(slot, leaf);
            let v = match self.model.heads.get(slot) {
                Some(head) if cfg.use_heads => head.forward_var(&hb, &prefix(slot), leaf),
                _ => leaf,
            };
            let loss = pair_loss_var(v, &slot_pairs(batch, slot), cfg.temperature, cfg.mirroring);
            losses.insert(slot.name().to_string(), loss.scalar_value());
            total = total + loss;
        }
        let grads = tape.backward(total);
        let d_embed = leaves.iter().map(|(s, l)| (*s, grads.get(*l))).collect();
        (losses, total.scalar_value(), hb.gradients(&grads), d_embed)
    }

    /// One optimizer step on generator, mapping and heads (plus the discriminator
    /// when enabled). A non-finite loss aborts the step without touching parameters.
    pub fn training_step(&mut self) -> Result<StepReport> {
        let batch = self.batch_for_step(self.step)?;
        let slots = self.config.slots.clone();
        let n = batch.latents.len();

        let images: Vec<Image> = batch.latents.par_iter().map(|z| self.render(z)).collect();
        let mut embeddings = BTreeMap::new();
        for &slot in &slots {
            let enc = &self.encoders[&slot];
            let rows = images.iter().map(|img| enc.encode(img)).collect::<Result<Vec<_>>>()?;
            let dim = enc.output_dim();
            let m = Array2::from_shape_vec((n, dim), rows.into_iter().flatten().collect()).expect("embeddings");
            embeddings.insert(slot, m);
        }

        let (losses, total, head_grads, d_embed) = self.embedding_stage(&batch, &embeddings);
        if !total.is_finite() || !head_grads.all_finite() {
            return Err(Error::Numerical(format!("non-finite contrastive loss at step {}: {losses:?}", self.step)));
        }

        let adversarial = self.model.discriminator.as_ref().map(|d| (d, self.config.adversarial.weight / n as f64));
        let per_image: Vec<ImageGrads> = batch
            .latents
            .par_iter()
            .enumerate()
            .map(|(i, z)| {
                let tape = Tape::new();
                let gb = Binder::new(&tape, &self.model.generator.params);
                let mb = Binder::new(&tape, &self.model.mapping.params);
                let image = self.image_var(&gb, &mb, z);
                let mut objective = tape.scalar(0.0);
                for &slot in &slots {
                    let e = self.encoders[&slot].encode_var(image);
                    let seed = d_embed[&slot].index_axis(Axis(0), i).to_owned().insert_axis(Axis(0));
                    objective = objective + (e * tape.constant(seed)).sum();
                }
                let mut adv_value = 0.0;
                if let Some((d, weight)) = adversarial {
                    let db = Binder::frozen(&tape, &d.params);
                    let g_loss = d.logit_var(&db, image).neg().softplus();
                    adv_value = g_loss.scalar_value();
                    objective = objective + g_loss.scale(weight);
                }
                let grads = tape.backward(objective);
                ImageGrads { generator: gb.gradients(&grads), mapping: mb.gradients(&grads), adversarial: adv_value }
            })
            .collect();

        let adv_enabled = adversarial.is_some();
        let mut gen_grads = Params::new();
        let mut map_grads = Params::new();
        let mut adv_total = 0.0;
        for g in &per_image {
            gen_grads.add_scaled(&g.generator, 1.0);
            map_grads.add_scaled(&g.mapping, 1.0);
            adv_total += g.adversarial;
        }
        if !gen_grads.all_finite() || !map_grads.all_finite() {
            return Err(Error::Numerical(format!("non-finite generator gradient at step {}", self.step)));
        }

        let mut disc_report = None;
        let mut disc_update = None;
        if let Some(d) = &self.model.discriminator {
            let mut rng = rng::seeded(derive_seed(self.seed, &format!("real/{}", self.step)));
            let real: Vec<Image> = (0..n)
                .map(|_| self.real_images[rand::Rng::random_range(&mut rng, 0..self.real_images.len())].clone())
                .collect();
            let (report, grads) = d.loss_and_gradients(&real, &images, self.config.adversarial.r1_gamma);
            if !report.total.is_finite() || !grads.all_finite() {
                return Err(Error::Numerical(format!("non-finite discriminator loss at step {}", self.step)));
            }
            disc_report = Some(report);
            disc_update = Some(grads);
        }

        self.opt_generator.step(&mut self.model.generator.params, &gen_grads);
        self.opt_mapping.step(&mut self.model.mapping.params, &map_grads);
        if self.config.contrastive.use_heads {
            self.opt_heads.step(&mut self.model.heads.params, &head_grads);
        }
        if let (Some(d), Some(grads)) = (self.model.discriminator.as_mut(), disc_update) {
            self.opt_discriminator.step(&mut d.params, &grads);
        }

        let report = StepReport {
            step: self.step,
            contrastive: losses,
            contrastive_total: total,
            generator_adversarial: adv_enabled.then(|| adv_total / n as f64),
            discriminator: disc_report,
        };
        self.step += 1;
        Ok(report)
    }

    /// Mean per-anchor contrastive loss on a batch without updating anything:
    /// mirrored pair losses are halved so that every configuration is scored on
    /// the same scale. Uses the heads only when the configuration does.
    pub fn evaluate(&self, batch: &ContrastiveBatch) -> Result<f64> {
        let images: Vec<Image> = batch.latents.par_iter().map(|z| self.render(z)).collect();
        let cfg = &self.config.contrastive;
        let mut total = 0.0;
        let mut count = 0usize;
        for &slot in &self.config.slots {
            let enc = &self.encoders[&slot];
            let rows = images.iter().map(|img| enc.encode(img)).collect::<Result<Vec<_>>>()?;
            let e = Array2::from_shape_vec((rows.len(), enc.output_dim()), rows.concat()).expect("embeddings");
            let v = match self.model.heads.get(slot) {
                Some(head) if cfg.use_heads => head.forward(&self.model.heads.params, &prefix(slot), &e),
                _ => e,
            };
            let vectors: Vec<Vec<f64>> = v.rows().into_iter().map(|r| r.to_vec()).collect();
            for (a, b) in slot_pairs(batch, slot) {
                total += crate::contrastive::mirrored_loss(&vectors, a, b, cfg.temperature)? / 2.0;
                count += 1;
            }
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }
}
