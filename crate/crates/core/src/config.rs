//! Run configuration: one JSON document with an explicit schema version.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anonymizer::{AnonymizationRequest, Anonymizer, Arity, Mode};
use crate::blending::{BlendConfig, DiffusionInpainter, IdentityRestoration};
use crate::checkpoint::Checkpoint;
use crate::encoder::{AttributeEncoder, StubEncoder};
use crate::error::{Error, Result};
use crate::evaluation::StubFaceEmbedder;
use crate::generator::{Generator, GeneratorConfig};
use crate::inversion::{InversionConfig, PyramidPerceptual};
use crate::labels::LabelTable;
use crate::latent::{estimate_w_mean, AttributeSlot, MappingNetwork, SemanticLayout};
use crate::rng::derive_seed;
use crate::training::TrainingConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RequestTemplate {
    pub mode: Mode,
    pub preserve: Vec<String>,
    pub resample_slots: Vec<AttributeSlot>,
}

impl Default for RequestTemplate {
    fn default() -> Self {
        Self { mode: Mode::Regular, preserve: Vec::new(), resample_slots: vec![AttributeSlot::Identity] }
    }
}

impl RequestTemplate {
    pub fn request(&self, arity: Arity, seed: u64) -> AnonymizationRequest {
        AnonymizationRequest {
            mode: self.mode,
            arity,
            preserve: self.preserve.clone(),
            resample_slots: self.resample_slots.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Initialization of the generator, mapping network and frozen encoders.
    pub model: u64,
    pub training: u64,
    pub sample: u64,
    pub anonymize: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { model: 1, training: 2, sample: 3, anonymize: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    /// `"identity"`, `"celebamask19"` or the path of a JSON label table.
    pub label_table: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self { dataset: None, label_table: "identity".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub training_steps: u64,
    pub w_mean_samples: usize,
    pub perceptual_levels: usize,
    pub inpainting_iterations: usize,
    pub match_threshold: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            training_steps: 100,
            w_mean_samples: 1000,
            perceptual_levels: 3,
            inpainting_iterations: 200,
            match_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub inversion: InversionConfig,
    /// Defaults to the resolution-scaled blend settings.
    #[serde(default)]
    pub blend: Option<BlendConfig>,
    #[serde(default)]
    pub request: RequestTemplate,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub model: ModelSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            generator: GeneratorConfig::default(),
            training: TrainingConfig::default(),
            inversion: InversionConfig::default(),
            blend: None,
            request: RequestTemplate::default(),
            seeds: Seeds::default(),
            paths: Paths::default(),
            model: ModelSettings::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates; errors carry the offending key and position.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config schema: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.generator.validate()?;
        self.training.validate()?;
        self.inversion.validate()?;
        self.blend_config().validate()?;
        if self.model.w_mean_samples == 0 || self.model.perceptual_levels == 0 {
            return Err(Error::Config("w_mean_samples and perceptual_levels must be positive".into()));
        }
        if !(self.model.match_threshold > 0.0 && self.model.match_threshold <= 2.0) {
            return Err(Error::Config("match_threshold must lie in (0, 2]".into()));
        }
        Ok(())
    }

    pub fn blend_config(&self) -> BlendConfig {
        self.blend.unwrap_or_else(|| BlendConfig::for_resolution(self.generator.resolution()))
    }

    /// SHA-256 of the canonical (compact, key-sorted) serialization.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        crate::checkpoint::sha256_hex(&serde_json::to_vec(&value).expect("value serializes"))
    }

    pub fn label_table(&self) -> Result<LabelTable> {
        match self.paths.label_table.as_str() {
            "identity" => Ok(LabelTable::identity(&SemanticLayout::default())),
            "celebamask19" => Ok(LabelTable::celebamask19()),
            path => LabelTable::load(Path::new(path)),
        }
    }

    /// Freshly initialized checkpoint at step 0.
    pub fn initial_checkpoint(&self) -> Result<Checkpoint> {
        let generator = Generator::new(self.generator.clone(), derive_seed(self.seeds.model, "generator"))?;
        let mapping = MappingNetwork::new(&self.generator.latent, derive_seed(self.seeds.model, "mapping"))?;
        let w_mean = estimate_w_mean(derive_seed(self.seeds.model, "w-mean"), self.model.w_mean_samples, &mapping)?;
        Ok(Checkpoint {
            generator,
            mapping,
            heads: None,
            discriminator: None,
            w_mean,
            layout: SemanticLayout::default(),
            step: 0,
            config: serde_json::to_value(self)?,
        })
    }

    /// Frozen per-slot encoders for training.
    pub fn encoders(&self) -> Result<BTreeMap<AttributeSlot, Box<dyn AttributeEncoder>>> {
        let res = self.generator.resolution();
        let mut out: BTreeMap<AttributeSlot, Box<dyn AttributeEncoder>> = BTreeMap::new();
        for &slot in &self.training.slots {
            out.insert(slot, Box::new(StubEncoder::for_slot(derive_seed(self.seeds.model, "encoders"), slot, res)?));
        }
        Ok(out)
    }

    pub fn face_embedder(&self) -> Result<StubFaceEmbedder> {
        let mut e = StubFaceEmbedder::new(derive_seed(self.seeds.model, "embedder"), self.generator.resolution())?;
        e.threshold = self.model.match_threshold;
        Ok(e)
    }

    /// Pipelines over a checkpoint with the configured priors.
    pub fn anonymizer(&self, checkpoint: &Checkpoint) -> Result<Anonymizer> {
        if checkpoint.generator.config != self.generator {
            return Err(Error::Config("checkpoint generator configuration differs from the run configuration".into()));
        }
        let res = checkpoint.generator.resolution();
        Ok(Anonymizer {
            generator: checkpoint.generator.clone(),
            mapping: checkpoint.mapping.clone(),
            w_mean: checkpoint.w_mean.clone(),
            layout: checkpoint.layout.clone(),
            perceptual: Box::new(PyramidPerceptual::new(res, res, self.model.perceptual_levels)),
            inpainting: Box::new(DiffusionInpainter { iterations: self.model.inpainting_iterations }),
            restoration: Box::new(IdentityRestoration),
            inversion: self.inversion.clone(),
            blend: self.blend_config(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_uses_defaults() {
        let c = RunConfig::from_json(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_and_misspelled_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"schema_version": 1, "inversion": {"stpes": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("stpes"), "{err}");
        assert!(RunConfig::from_json(r#"{"schema_version": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{}"#).is_err());
    }
}
