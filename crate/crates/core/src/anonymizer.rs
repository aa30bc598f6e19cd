//! End-to-end anonymization pipelines: invert, resample attributes and
//! components, synthesize, fuse preserved regions back and restore.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::blending::{fuse_region, BlendConfig, BlendPlan, InpaintingPrior, RestorationPrior};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::image::{Image, LabelMap, MaskImage};
use crate::inversion::{invert_paired, invert_single, InversionConfig, InversionTarget, PerceptualMetric};
use crate::latent::{substitute_slot, AttributeSlot, ExtendedLatent, LocalCode, MappingNetwork, SemanticLayout};
use crate::rng::{self, derive_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Preserve the listed components pixel-exactly.
    Clinical,
    /// Preserve everything outside the face interior.
    Regular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arity {
    Single,
    Paired,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clinical" => Ok(Mode::Clinical),
            "regular" => Ok(Mode::Regular),
            _ => Err(Error::Argument(format!("unknown mode '{s}' (expected clinical or regular)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnonymizationRequest {
    pub mode: Mode,
    pub arity: Arity,
    /// Component names kept from the input (clinical). Regular mode uses the face exterior.
    #[serde(default)]
    pub preserve: Vec<String>,
    #[serde(default = "default_resample")]
    pub resample_slots: Vec<AttributeSlot>,
    pub seed: u64,
}

fn default_resample() -> Vec<AttributeSlot> {
    vec![AttributeSlot::Identity]
}

impl AnonymizationRequest {
    pub fn clinical(preserve: &[&str], arity: Arity, seed: u64) -> Self {
        Self {
            mode: Mode::Clinical,
            arity,
            preserve: preserve.iter().map(|s| s.to_string()).collect(),
            resample_slots: default_resample(),
            seed,
        }
    }

    pub fn regular(arity: Arity, seed: u64) -> Self {
        Self { mode: Mode::Regular, arity, preserve: Vec::new(), resample_slots: default_resample(), seed }
    }

    /// Indices of the preserved components, checked against the mode rules.
    pub fn preserved_components(&self, layout: &SemanticLayout) -> Result<Vec<usize>> {
        match self.mode {
            Mode::Clinical => {
                if self.preserve.is_empty() {
                    return Err(Error::Argument("clinical anonymization needs at least one preserved component".into()));
                }
                let mut idx = layout.indices_of(&self.preserve)?;
                idx.sort_unstable();
                idx.dedup();
                Ok(idx)
            }
            Mode::Regular => {
                let exterior = layout.face_exterior();
                if !self.preserve.is_empty() {
                    let mut given = layout.indices_of(&self.preserve)?;
                    given.sort_unstable();
                    given.dedup();
                    if given != exterior {
                        return Err(Error::Argument(
                            "regular mode preserves exactly the face-exterior components".into(),
                        ));
                    }
                }
                Ok(exterior)
            }
        }
    }
}

/// What a pipeline changed and kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceReport {
    pub mode: Mode,
    pub arity: Arity,
    pub seed: u64,
    pub preserved_components: Vec<String>,
    pub randomized_components: Vec<String>,
    pub resampled_slots: Vec<AttributeSlot>,
    pub inversion_diverged: Vec<bool>,
    /// Per image: `(preserved, inpainted, synthetic)` pixel counts.
    pub pixel_counts: Vec<[usize; 3]>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnonymizationResult {
    pub outputs: Vec<Image>,
    pub recovered: Vec<ExtendedLatent>,
    pub anonymized: Vec<ExtendedLatent>,
    pub plans: Vec<BlendPlan>,
    pub report: ProvenanceReport,
}

/// Replaces the local codes of every component not in `preserve` with freshly
/// sampled and mapped codes; preserved codes and the global code are kept.
pub fn randomize_components(
    w: &ExtendedLatent,
    preserve: &[String],
    seed: u64,
    mapping: &MappingNetwork,
    layout: &SemanticLayout,
) -> Result<ExtendedLatent> {
    w.check(&mapping.config)?;
    if layout.len() != w.local.len() {
        return Err(Error::Config("semantic layout does not match the latent".into()));
    }
    let keep: BTreeSet<usize> = layout.indices_of(preserve)?.into_iter().collect();
    Ok(randomize_indices(w, &keep, seed, mapping))
}

fn randomize_indices(w: &ExtendedLatent, keep: &BTreeSet<usize>, seed: u64, mapping: &MappingNetwork) -> ExtendedLatent {
    let mut out = w.clone();
    for (k, code) in out.local.iter_mut().enumerate() {
        if keep.contains(&k) {
            continue;
        }
        let mut r = rng::seeded(derive_seed(seed, &format!("component/{k}")));
        let mapped = mapping.map_local(&rng::normal_vec(&mut r, mapping.config.local_dim));
        *code = LocalCode { structure: mapped.clone(), texture: mapped };
    }
    out
}

/// Fresh mapped code for `slot`.
fn sample_slot(seed: u64, slot: AttributeSlot, mapping: &MappingNetwork) -> Vec<f64> {
    let mut r = rng::seeded(derive_seed(seed, &format!("slot/{}", slot.name())));
    mapping.map_slot(slot, &rng::normal_vec(&mut r, mapping.config.slots.get(slot)))
}

/// Frozen models and settings shared by all pipelines.
pub struct Anonymizer {
    pub generator: Generator,
    pub mapping: MappingNetwork,
    pub w_mean: ExtendedLatent,
    pub layout: SemanticLayout,
    pub perceptual: Box<dyn PerceptualMetric>,
    pub inpainting: Box<dyn InpaintingPrior>,
    pub restoration: Box<dyn RestorationPrior>,
    pub inversion: InversionConfig,
    pub blend: BlendConfig,
}

impl Anonymizer {
    fn check_input(&self, image: &Image, labels: &LabelMap) -> Result<()> {
        let res = self.generator.resolution();
        if image.height != res || image.width != res || labels.height != res || labels.width != res {
            return Err(Error::Argument(format!("inputs must be {res}x{res}")));
        }
        labels.check_range(self.layout.len())
    }

    fn check_request(&self, request: &AnonymizationRequest, arity: Arity) -> Result<Vec<usize>> {
        if request.arity != arity {
            return Err(Error::Argument(format!("request arity {:?} used with a {arity:?} pipeline", request.arity)));
        }
        if request.resample_slots.contains(&AttributeSlot::Free) {
            return Err(Error::Argument("the free slot is never resampled".into()));
        }
        request.preserved_components(&self.layout)
    }

    /// Synthesizes `w`, fuses the preserved region of `original` back and restores.
    fn synthesize(
        &self,
        original: &Image,
        labels: &LabelMap,
        w: &ExtendedLatent,
        preserved: &[usize],
        warnings: &mut Vec<String>,
        tag: &str,
    ) -> Result<(Image, BlendPlan, [usize; 3])> {
        let synthetic = self.generator.generate(w)?;
        let m_real = labels.mask_of(preserved);
        let m_syn = synthetic.labels().mask_of(preserved);
        let (fused, plan) = if m_real.is_empty() {
            warnings.push(format!("{tag}: preserved components absent from the input labels; no fusion"));
            let res = original.height;
            let empty = MaskImage::empty(res, res);
            let plan = BlendPlan { m_real: empty.clone(), m_syn, m_inp: empty };
            (synthetic.image, plan)
        } else {
            let plan = BlendPlan::new(m_real, m_syn, &self.blend)?;
            let fused = fuse_region(original, &synthetic.image, &plan.m_real, &plan.m_inp, self.inpainting.as_ref())?;
            (fused.image, plan)
        };
        let counts = [plan.m_real.count(), plan.m_inp.count(), original.pixels() - plan.m_real.count() - plan.m_inp.count()];
        let out = self.restoration.restore(&fused)?;
        Ok((out, plan, counts))
    }

    fn report(&self, request: &AnonymizationRequest, preserved: &[usize], diverged: Vec<bool>) -> ProvenanceReport {
        ProvenanceReport {
            mode: request.mode,
            arity: request.arity,
            seed: request.seed,
            preserved_components: preserved.iter().map(|&k| self.layout.name(k).to_string()).collect(),
            randomized_components: (0..self.layout.len())
                .filter(|k| !preserved.contains(k))
                .map(|k| self.layout.name(k).to_string())
                .collect(),
            resampled_slots: request.resample_slots.clone(),
            inversion_diverged: diverged,
            pixel_counts: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Latent edit shared by all pipelines: resample slots, then randomize components.
    fn edit(&self, recovered: &ExtendedLatent, request: &AnonymizationRequest, preserved: &[usize]) -> Result<ExtendedLatent> {
        let mut w = recovered.clone();
        for &slot in &request.resample_slots {
            w = substitute_slot(&w, slot, &sample_slot(request.seed, slot, &self.mapping))?;
        }
        let keep: BTreeSet<usize> = preserved.iter().copied().collect();
        Ok(randomize_indices(&w, &keep, derive_seed(request.seed, "components"), &self.mapping))
    }

    pub fn invert_single(&self, image: &Image, labels: &LabelMap) -> Result<(ExtendedLatent, bool)> {
        self.check_input(image, labels)?;
        let target = InversionTarget { image, labels };
        let r = invert_single(&self.generator, &target, &self.w_mean, self.perceptual.as_ref(), &self.inversion)?;
        Ok((r.latent, r.diverged))
    }

    pub fn invert_paired(&self, images: [&Image; 2], labels: [&LabelMap; 2]) -> Result<([ExtendedLatent; 2], bool)> {
        self.check_input(images[0], labels[0])?;
        self.check_input(images[1], labels[1])?;
        let ta = InversionTarget { image: images[0], labels: labels[0] };
        let tb = InversionTarget { image: images[1], labels: labels[1] };
        let r = invert_paired(&self.generator, [&ta, &tb], &self.w_mean, self.perceptual.as_ref(), &self.inversion)?;
        Ok((r.latents, r.diverged))
    }

    pub fn anonymize_single(&self, image: &Image, labels: &LabelMap, request: &AnonymizationRequest) -> Result<AnonymizationResult> {
        self.check_request(request, Arity::Single)?;
        let (recovered, diverged) = self.invert_single(image, labels)?;
        self.anonymize_single_from_latent(image, labels, recovered, diverged, request)
    }

    /// Single-image pipeline starting from an already recovered latent.
    pub fn anonymize_single_from_latent(
        &self,
        image: &Image,
        labels: &LabelMap,
        recovered: ExtendedLatent,
        diverged: bool,
        request: &AnonymizationRequest,
    ) -> Result<AnonymizationResult> {
        let preserved = self.check_request(request, Arity::Single)?;
        self.check_input(image, labels)?;
        recovered.check(&self.generator.config.latent)?;
        let mut report = self.report(request, &preserved, vec![diverged]);
        if diverged {
            report.warnings.push("inversion diverged; using best finite iterate".into());
        }
        let anonymized = self.edit(&recovered, request, &preserved)?;
        let (out, plan, counts) = self.synthesize(image, labels, &anonymized, &preserved, &mut report.warnings, "image")?;
        report.pixel_counts.push(counts);
        Ok(AnonymizationResult {
            outputs: vec![out],
            recovered: vec![recovered],
            anonymized: vec![anonymized],
            plans: vec![plan],
            report,
        })
    }

    pub fn anonymize_paired(
        &self,
        images: [&Image; 2],
        labels: [&LabelMap; 2],
        request: &AnonymizationRequest,
    ) -> Result<AnonymizationResult> {
        self.check_request(request, Arity::Paired)?;
        let (recovered, diverged) = self.invert_paired(images, labels)?;
        self.anonymize_paired_from_latents(images, labels, recovered, diverged, request)
    }

    /// Paired pipeline from recovered latents: one new code per resampled slot and
    /// one set of component codes, shared by both images.
    pub fn anonymize_paired_from_latents(
        &self,
        images: [&Image; 2],
        labels: [&LabelMap; 2],
        recovered: [ExtendedLatent; 2],
        diverged: bool,
        request: &AnonymizationRequest,
    ) -> Result<AnonymizationResult> {
        let preserved = self.check_request(request, Arity::Paired)?;
        for i in 0..2 {
            self.check_input(images[i], labels[i])?;
            recovered[i].check(&self.generator.config.latent)?;
        }
        let mut report = self.report(request, &preserved, vec![diverged; 2]);
        if diverged {
            report.warnings.push("paired inversion diverged; using best finite iterate".into());
        }
        let mut result = AnonymizationResult {
            outputs: Vec::new(),
            recovered: Vec::new(),
            anonymized: Vec::new(),
            plans: Vec::new(),
            report,
        };
        for (i, w) in recovered.into_iter().enumerate() {
            let anonymized = self.edit(&w, request, &preserved)?;
            let tag = format!("image {i}");
            let (out, plan, counts) =
                self.synthesize(images[i], labels[i], &anonymized, &preserved, &mut result.report.warnings, &tag)?;
            result.report.pixel_counts.push(counts);
            result.outputs.push(out);
            result.recovered.push(w);
            result.anonymized.push(anonymized);
            result.plans.push(plan);
        }
        Ok(result)
    }
}
