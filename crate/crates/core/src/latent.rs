//! Disentangled latent spaces: sampled `z`, mapped `w`, and the extended
//! per-component space used for inversion.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Binder, Params};
use crate::rng::{self, derive_seed};

/// High-level attribute owning a contiguous range of the global vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeSlot {
    Identity,
    Expression,
    Pose,
    Age,
    Free,
}

impl AttributeSlot {
    /// Layout order inside the global vector.
    pub const ALL: [AttributeSlot; 5] = [Self::Identity, Self::Expression, Self::Pose, Self::Age, Self::Free];
    /// Slots supervised by a frozen attribute encoder.
    pub const CONSTRAINED: [AttributeSlot; 4] = [Self::Identity, Self::Expression, Self::Pose, Self::Age];

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Expression => "expression",
            Self::Pose => "pose",
            Self::Age => "age",
            Self::Free => "free",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AttributeSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttributeSlot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|slot| slot.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown attribute slot '{s}'")))
    }
}

/// Per-slot widths of the global vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlotDims {
    pub identity: usize,
    pub expression: usize,
    pub pose: usize,
    pub age: usize,
    pub free: usize,
}

impl Default for SlotDims {
    fn default() -> Self {
        Self { identity: 64, expression: 64, pose: 64, age: 64, free: 256 }
    }
}

impl SlotDims {
    pub fn uniform(constrained: usize, free: usize) -> Self {
        Self { identity: constrained, expression: constrained, pose: constrained, age: constrained, free }
    }

    pub fn get(&self, slot: AttributeSlot) -> usize {
        match slot {
            AttributeSlot::Identity => self.identity,
            AttributeSlot::Expression => self.expression,
            AttributeSlot::Pose => self.pose,
            AttributeSlot::Age => self.age,
            AttributeSlot::Free => self.free,
        }
    }
}

/// Contiguous, non-overlapping index ranges of each slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotLayout {
    ranges: [Range<usize>; 5],
}

impl SlotLayout {
    pub fn new(dims: &SlotDims) -> Self {
        let mut start = 0;
        let ranges = AttributeSlot::ALL.map(|slot| {
            let r = start..start + dims.get(slot);
            start = r.end;
            r
        });
        let layout = Self { ranges };
        for (i, a) in layout.ranges.iter().enumerate() {
            for b in layout.ranges.iter().skip(i + 1) {
                assert!(a.end <= b.start || a.is_empty() || b.is_empty(), "slot ranges overlap");
            }
        }
        layout
    }

    pub fn range(&self, slot: AttributeSlot) -> Range<usize> {
        self.ranges[slot.index()].clone()
    }

    pub fn total(&self) -> usize {
        self.ranges[4].end
    }
}

/// Dimensions of the latent spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentConfig {
    pub slots: SlotDims,
    pub local_dim: usize,
    pub components: usize,
    pub mapping_layers: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self { slots: SlotDims::default(), local_dim: 64, components: 13, mapping_layers: 2 }
    }
}

impl LatentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_dim == 0 || self.components == 0 || self.mapping_layers == 0 {
            return Err(Error::Config(
                "local_dim, components and mapping_layers must be positive".into(),
            ));
        }
        if AttributeSlot::ALL.iter().all(|&s| self.slots.get(s) == 0) {
            return Err(Error::Config("global latent has zero total dimension".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> SlotLayout {
        SlotLayout::new(&self.slots)
    }

    pub fn global_dim(&self) -> usize {
        self.layout().total()
    }

    /// Number of scalars in an [`ExtendedLatent`].
    pub fn extended_dim(&self) -> usize {
        self.global_dim() + 2 * self.components * self.local_dim
    }
}

/// Global latent split into attribute slots.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalLatent {
    values: Vec<f64>,
    layout: SlotLayout,
}

impl GlobalLatent {
    pub fn new(values: Vec<f64>, dims: &SlotDims) -> Result<Self> {
        let layout = SlotLayout::new(dims);
        if values.len() != layout.total() {
            return Err(Error::Argument(format!(
                "global latent has {} values, layout expects {}",
                values.len(),
                layout.total()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("global latent contains non-finite values".into()));
        }
        Ok(Self { values, layout })
    }

    pub fn slot(&self, slot: AttributeSlot) -> &[f64] {
        &self.values[self.layout.range(slot)]
    }

    pub fn slot_mut(&mut self, slot: AttributeSlot) -> &mut [f64] {
        let r = self.layout.range(slot);
        &mut self.values[r]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &SlotLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-component local codes `z_l^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalLatents {
    pub codes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub global: GlobalLatent,
    pub local: LocalLatents,
}

/// Structure and texture codes of one semantic component in `W+`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalCode {
    pub structure: Vec<f64>,
    pub texture: Vec<f64>,
}

/// Point in the extended space: mapped global code plus `2K` local codes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedLatent {
    pub global: GlobalLatent,
    pub local: Vec<LocalCode>,
}

impl ExtendedLatent {
    /// Flattened `[global, (structure, texture) for k in 0..K]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.global.as_slice().to_vec();
        for code in &self.local {
            out.extend_from_slice(&code.structure);
            out.extend_from_slice(&code.texture);
        }
        out
    }

    pub fn unflatten(values: &[f64], config: &LatentConfig) -> Result<Self> {
        if values.len() != config.extended_dim() {
            return Err(Error::Argument(format!(
                "extended latent has {} values, expected {}",
                values.len(),
                config.extended_dim()
            )));
        }
        let g = config.global_dim();
        let global = GlobalLatent::new(values[..g].to_vec(), &config.slots)?;
        let d = config.local_dim;
        let local = (0..config.components)
            .map(|k| {
                let base = g + 2 * d * k;
                LocalCode {
                    structure: values[base..base + d].to_vec(),
                    texture: values[base + d..base + 2 * d].to_vec(),
                }
            })
            .collect();
        Ok(Self { global, local })
    }

    pub fn check(&self, config: &LatentConfig) -> Result<()> {
        let ok = self.global.len() == config.global_dim()
            && self.local.len() == config.components
            && self
                .local
                .iter()
                .all(|c| c.structure.len() == config.local_dim && c.texture.len() == config.local_dim);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("extended latent does not match the model configuration".into()))
        }
    }

    /// Squared Euclidean distance over all coordinates.
    pub fn squared_distance(&self, other: &ExtendedLatent) -> f64 {
        self.flatten().iter().zip(other.flatten()).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

/// Ordered semantic component names; index = position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticLayout {
    names: Vec<String>,
}

/// Components preserved by in-place (regular) anonymization.
pub const FACE_EXTERIOR: [&str; 7] = ["hair", "neck", "background", "clothes", "ears", "earrings", "hats"];

pub const DEFAULT_COMPONENTS: [&str; 13] = [
    "background",
    "skin",
    "eyes",
    "brows",
    "mouth",
    "nose",
    "ears",
    "eyeglasses",
    "earrings",
    "hair",
    "hats",
    "neck",
    "clothes",
];

impl Default for SemanticLayout {
    fn default() -> Self {
        Self { names: DEFAULT_COMPONENTS.iter().map(|s| s.to_string()).collect() }
    }
}

impl SemanticLayout {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Config(format!("duplicate component name '{n}'")));
            }
        }
        if names.is_empty() {
            return Err(Error::Config("semantic layout is empty".into()));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Argument(format!("unknown semantic component '{name}'")))
    }

    pub fn indices_of<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.index_of(n.as_ref())).collect()
    }

    /// Sorted indices of the face-exterior components present in this layout.
    pub fn face_exterior(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = FACE_EXTERIOR.iter().filter_map(|n| self.index_of(n).ok()).collect();
        idx.sort_unstable();
        idx
    }

    pub fn face_interior(&self) -> Vec<usize> {
        let ext = self.face_exterior();
        (0..self.len()).filter(|i| !ext.contains(i)).collect()
    }

    /// JSON object mapping name to index.
    pub fn to_json(&self) -> String {
        let table: BTreeMap<&str, usize> = self.names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        serde_json::to_string(&table).expect("layout serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: BTreeMap<String, usize> = serde_json::from_str(text)?;
        let mut names = vec![None; table.len()];
        for (name, idx) in table {
            if idx >= names.len() || names[idx].is_some() {
                return Err(Error::Config(format!("layout index {idx} for '{name}' is not contiguous")));
            }
            names[idx] = Some(name);
        }
        Self::new(names.into_iter().map(|n| n.expect("filled")).collect())
    }
}

/// Draws `z` from the standard normal: global slots in layout order, then local codes.
pub fn sample_latent(seed: u64, config: &LatentConfig) -> Result<LatentSample> {
    config.validate()?;
    let mut rng = rng::seeded(seed);
    let global = GlobalLatent::new(rng::normal_vec(&mut rng, config.global_dim()), &config.slots)?;
    let codes = (0..config.components).map(|_| rng::normal_vec(&mut rng, config.local_dim)).collect();
    Ok(LatentSample { global, local: LocalLatents { codes } })
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// Init scale of the last mapping layer relative to `1/sqrt(fan_in)`.
pub const MAPPING_OUTPUT_GAIN: f64 = 0.5;

/// Independent MLPs per global slot plus one for local codes.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingNetwork {
    pub config: LatentConfig,
    pub params: Params,
}

fn mlp_name(net: &str, layer: usize, what: &str) -> String {
    format!("{net}.l{layer}.{what}")
}

impl MappingNetwork {
    /// Random initialization: weights `N(0, 1/fan_in)` (last layer scaled by
    /// [`MAPPING_OUTPUT_GAIN`]), zero biases.
    pub fn new(config: &LatentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut params = Params::new();
        let nets: Vec<(String, usize)> = AttributeSlot::ALL
            .iter()
            .map(|s| (s.name().to_string(), config.slots.get(*s)))
            .chain(std::iter::once(("local".to_string(), config.local_dim)))
            .collect();
        for (net, width) in nets {
            for layer in 0..config.mapping_layers {
                let gain = if layer + 1 == config.mapping_layers { MAPPING_OUTPUT_GAIN } else { 1.0 };
                let scale = if width == 0 { 0.0 } else { gain / (width as f64).sqrt() };
                let w = Array2::from_shape_vec((width, width), rng::normal_vec(&mut rng, width * width))
                    .expect("mapping weight")
                    * scale;
                params.insert(mlp_name(&net, layer, "weight"), w);
                params.insert(mlp_name(&net, layer, "bias"), Array2::zeros((1, width)));
            }
        }
        Ok(Self { config: config.clone(), params })
    }

    pub fn from_params(config: &LatentConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let net = Self { config: config.clone(), params };
        for slot in AttributeSlot::ALL {
            net.check_net(slot.name(), config.slots.get(slot))?;
        }
        net.check_net("local", config.local_dim)?;
        Ok(net)
    }

    fn check_net(&self, net: &str, width: usize) -> Result<()> {
        for layer in 0..self.config.mapping_layers {
            let w = self.params.try_get(&mlp_name(net, layer, "weight"));
            let b = self.params.try_get(&mlp_name(net, layer, "bias"));
            match (w, b) {
                (Some(w), Some(b)) if w.dim() == (width, width) && b.dim() == (1, width) => {}
                _ => {
                    return Err(Error::Config(format!("mapping network '{net}' layer {layer} has wrong shape")))
                }
            }
        }
        Ok(())
    }

    /// Maps a batch of rows through one network. Hidden layers use leaky ReLU; the last is affine.
    pub fn map_rows(&self, net: &str, z: &Array2<f64>) -> Array2<f64> {
        let mut h = z.clone();
        for layer in 0..self.config.mapping_layers {
            let w = self.params.get(&mlp_name(net, layer, "weight"));
            let b = self.params.get(&mlp_name(net, layer, "bias"));
            h = h.dot(w) + b;
            if layer + 1 < self.config.mapping_layers {
                h.mapv_inplace(|x| if x > 0.0 { x } else { LEAKY_SLOPE * x });
            }
        }
        h
    }

    /// Differentiable variant of [`MappingNetwork::map_rows`].
    pub fn map_var<'t>(&self, binder: &Binder<'t, '_>, net: &str, z: Var<'t>) -> Var<'t> {
        let mut h = z;
        for layer in 0..self.config.mapping_layers {
            let w = binder.get(&mlp_name(net, layer, "weight"));
            let b = binder.get(&mlp_name(net, layer, "bias"));
            h = h.matmul(w).add_row(b);
            if layer + 1 < self.config.mapping_layers {
                h = h.leaky_relu(LEAKY_SLOPE);
            }
        }
        h
    }

    /// Maps a single global slot vector.
    pub fn map_slot(&self, slot: AttributeSlot, z: &[f64]) -> Vec<f64> {
        let row = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("slot row");
        self.map_rows(slot.name(), &row).into_iter().collect()
    }

    /// Maps one local code; the result feeds both structure and texture stages.
    pub fn map_local(&self, z: &[f64]) -> Vec<f64> {
        let row = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("local row");
        self.map_rows("local", &row).into_iter().collect()
    }

    pub fn map_to_w(&self, z: &LatentSample) -> Result<ExtendedLatent> {
        self.check_sample(z)?;
        let mut values = Vec::with_capacity(self.config.global_dim());
        for slot in AttributeSlot::ALL {
            values.extend(self.map_slot(slot, z.global.slot(slot)));
        }
        let global = GlobalLatent::new(values, &self.config.slots)?;
        let local = z
            .local
            .codes
            .iter()
            .map(|code| {
                let w = self.map_local(code);
                LocalCode { structure: w.clone(), texture: w }
            })
            .collect();
        Ok(ExtendedLatent { global, local })
    }

    fn check_sample(&self, z: &LatentSample) -> Result<()> {
        let c = &self.config;
        if z.global.len() != c.global_dim()
            || z.local.codes.len() != c.components
            || z.local.codes.iter().any(|v| v.len() != c.local_dim)
        {
            return Err(Error::Config("latent sample does not match the mapping configuration".into()));
        }
        for slot in AttributeSlot::ALL {
            if z.global.slot(slot).len() != c.slots.get(slot) {
                return Err(Error::Config(format!("slot {slot} width mismatch")));
            }
        }
        Ok(())
    }
}

/// Seed of the `index`-th sample drawn by [`estimate_w_mean`].
pub fn w_mean_sample_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &format!("w-mean/{index}"))
}

/// Coordinate-wise mean of `m` mapped samples.
pub fn estimate_w_mean(seed: u64, m: usize, mapping: &MappingNetwork) -> Result<ExtendedLatent> {
    if m == 0 {
        return Err(Error::Argument("w-mean needs at least one sample".into()));
    }
    let config = &mapping.config;
    let mut acc = vec![0.0; config.extended_dim()];
    for i in 0..m {
        let z = sample_latent(w_mean_sample_seed(seed, i), config)?;
        let w = mapping.map_to_w(&z)?.flatten();
        for (a, v) in acc.iter_mut().zip(w) {
            *a += v;
        }
    }
    let inv = 1.0 / m as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    ExtendedLatent::unflatten(&acc, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    pub alpha: usize,
    pub beta: usize,
    pub slot: AttributeSlot,
}

/// Latent batch with explicit positive pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub latents: Vec<LatentSample>,
    pub pairs: Vec<ContrastivePair>,
}

impl ContrastiveBatch {
    pub fn pairs_for(&self, slot: AttributeSlot) -> impl Iterator<Item = &ContrastivePair> {
        self.pairs.iter().filter(move |p| p.slot == slot)
    }

    /// Checks the pair structure invariants.
    pub fn validate(&self) -> Result<()> {
        if self.pairs.len() > self.latents.len() {
            return Err(Error::Argument("more pairs than batch members".into()));
        }
        let mut used: BTreeMap<AttributeSlot, Vec<usize>> = BTreeMap::new();
        for p in &self.pairs {
            if p.alpha == p.beta || p.alpha >= self.latents.len() || p.beta >= self.latents.len() {
                return Err(Error::Argument(format!("invalid pair ({}, {})", p.alpha, p.beta)));
            }
            if self.latents[p.alpha].global.slot(p.slot) != self.latents[p.beta].global.slot(p.slot) {
                return Err(Error::Argument(format!("pair ({}, {}) does not share slot {}", p.alpha, p.beta, p.slot)));
            }
            let seen = used.entry(p.slot).or_default();
            if seen.contains(&p.alpha) || seen.contains(&p.beta) {
                return Err(Error::Argument(format!("index reused within slot {}", p.slot)));
            }
            seen.extend([p.alpha, p.beta]);
        }
        Ok(())
    }
}

/// Samples `n` latents and ties consecutive members `(0,1), (2,3), ...` on
/// slots assigned round-robin from `slots`.
pub fn make_contrastive_batch(
    seed: u64,
    n: usize,
    slots: &[AttributeSlot],
    config: &LatentConfig,
) -> Result<ContrastiveBatch> {
    if n < 2 {
        return Err(Error::Argument(format!("contrastive batch needs at least 2 members, got {n}")));
    }
    if n % 2 != 0 {
        return Err(Error::Argument(format!("contrastive batch size must be even, got {n}")));
    }
    if slots.is_empty() {
        return Err(Error::Argument("no attribute slots to pair on".into()));
    }
    let mut latents = (0..n)
        .map(|i| sample_latent(derive_seed(seed, &format!("batch/{i}")), config))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::with_capacity(n / 2);
    for j in 0..n / 2 {
        let (alpha, beta) = (2 * j, 2 * j + 1);
        let slot = slots[j % slots.len()];
        let shared = latents[alpha].global.slot(slot).to_vec();
        latents[beta].global.slot_mut(slot).copy_from_slice(&shared);
        pairs.push(ContrastivePair { alpha, beta, slot });
    }
    Ok(ContrastiveBatch { latents, pairs })
}

/// Returns a copy of `w` with one global slot replaced.
pub fn substitute_slot(w: &ExtendedLatent, slot: AttributeSlot, code: &[f64]) -> Result<ExtendedLatent> {
    let width = w.global.slot(slot).len();
    if code.len() != width {
        return Err(Error::Argument(format!("slot {slot} has width {width}, code has {}", code.len())));
    }
    if code.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("substituted code contains non-finite values".into()));
    }
    let mut out = w.clone();
    out.global.slot_mut(slot).copy_from_slice(code);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaDirections {
    /// Unit-norm principal directions, decreasing variance.
    pub directions: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    /// Set when fewer than the requested directions carried variance.
    pub degenerate: bool,
}

/// Top principal directions of one slot across `samples`.
pub fn slot_pca_directions(samples: &[GlobalLatent], slot: AttributeSlot, n_dirs: usize) -> Result<PcaDirections> {
    if samples.len() < 2 {
        return Err(Error::Argument("PCA needs at least two samples".into()));
    }
    let width = samples[0].slot(slot).len();
    if n_dirs > width {
        return Err(Error::Argument(format!("requested {n_dirs} directions from a {width}-wide slot")));
    }
    if samples.iter().any(|s| s.slot(slot).len() != width) {
        return Err(Error::Argument("samples disagree on slot width".into()));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; width];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.slot(slot)) {
            *m += v / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(width, width);
    for s in samples {
        let centred: Vec<f64> = s.slot(slot).iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..width {
            for j in 0..width {
                cov[(i, j)] += centred[i] * centred[j];
            }
        }
    }
    cov /= n - 1.0;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = order.first().map(|&i| eig.eigenvalues[i]).unwrap_or(0.0).max(0.0);
    let floor = 1e-12 * top.max(1e-300);
    let mut directions = Vec::new();
    let mut variances = Vec::new();
    for &i in order.iter().take(n_dirs) {
        let var = eig.eigenvalues[i];
        if var <= floor {
            break;
        }
        let mut dir: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        // Sign convention: largest-magnitude coordinate positive.
        let pivot = dir.iter().copied().fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        directions.push(dir);
        variances.push(var);
    }
    let degenerate = directions.len() < n_dirs;
    if degenerate {
        log::warn!("slot {slot}: only {} of {n_dirs} principal directions carry variance", directions.len());
    }
    Ok(PcaDirections { directions, variances, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LatentConfig {
        LatentConfig { slots: SlotDims::uniform(4, 6), local_dim: 3, components: 5, mapping_layers: 2 }
    }

    #[test]
    fn same_seed_same_sample() {
        let c = LatentConfig { slots: SlotDims::uniform(8, 8), ..small() };
        assert_eq!(sample_latent(7, &c).unwrap(), sample_latent(7, &c).unwrap());
        assert_ne!(sample_latent(7, &c).unwrap(), sample_latent(8, &c).unwrap());
    }

    #[test]
    fn zero_width_identity_slot() {
        let mut c = small();
        c.slots.identity = 0;
        let z = sample_latent(1, &c).unwrap();
        assert!(z.global.slot(AttributeSlot::Identity).is_empty());
        assert_eq!(z.global.slot(AttributeSlot::Pose).len(), 4);
        let m = MappingNetwork::new(&c, 2).unwrap();
        let w = m.map_to_w(&z).unwrap();
        assert!(w.global.slot(AttributeSlot::Identity).is_empty());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = small();
        c.local_dim = 0;
        assert!(matches!(sample_latent(1, &c), Err(Error::Config(_))));
        let c = LatentConfig { slots: SlotDims::uniform(0, 0), ..small() };
        assert!(matches!(sample_latent(1, &c), Err(Error::Config(_))));
    }

    #[test]
    fn slot_ranges_are_disjoint_and_contiguous() {
        let layout = SlotLayout::new(&SlotDims::default());
        let mut end = 0;
        for slot in AttributeSlot::ALL {
            let r = layout.range(slot);
            assert_eq!(r.start, end);
            end = r.end;
        }
        assert_eq!(end, 512);
    }

    #[test]
    fn affine_mapping_at_zero_is_bias() {
        let mut c = small();
        c.mapping_layers = 1;
        let mut m = MappingNetwork::new(&c, 3).unwrap();
        for slot in AttributeSlot::ALL {
            let d = c.slots.get(slot);
            *m.params.get_mut(&format!("{}.l0.weight", slot.name())).unwrap() = Array2::eye(d);
            let bias = Array2::from_shape_fn((1, d), |(_, j)| j as f64 + 0.5);
            *m.params.get_mut(&format!("{}.l0.bias", slot.name())).unwrap() = bias;
        }
        let mut z = sample_latent(1, &c).unwrap();
        let zeros = vec![0.0; c.global_dim()];
        z.global = GlobalLatent::new(zeros, &c.slots).unwrap();
        let w = m.map_to_w(&z).unwrap();
        for slot in AttributeSlot::ALL {
            let expect: Vec<f64> = (0..c.slots.get(slot)).map(|j| j as f64 + 0.5).collect();
            assert_eq!(w.global.slot(slot), expect.as_slice());
        }
    }

    #[test]
    fn local_codes_are_duplicated() {
        let c = small();
        let m = MappingNetwork::new(&c, 1).unwrap();
        let w = m.map_to_w(&sample_latent(4, &c).unwrap()).unwrap();
        assert!(w.local.iter().all(|l| l.structure == l.texture));
        assert_eq!(w.local.len(), c.components);
    }

    #[test]
    fn mapping_shape_mismatch_is_config_error() {
        let c = small();
        let m = MappingNetwork::new(&c, 1).unwrap();
        let mut bad = m.params.clone();
        bad.insert("pose.l0.weight", Array2::zeros((2, 2)));
        assert!(matches!(MappingNetwork::from_params(&c, bad), Err(Error::Config(_))));
        let other = LatentConfig { local_dim: 4, ..c.clone() };
        let z = sample_latent(1, &other).unwrap();
        assert!(matches!(m.map_to_w(&z), Err(Error::Config(_))));
    }

    #[test]
    fn contrastive_batch_errors() {
        let c = small();
        assert!(matches!(make_contrastive_batch(1, 1, &[AttributeSlot::Age], &c), Err(Error::Argument(_))));
        assert!(matches!(make_contrastive_batch(1, 3, &[AttributeSlot::Age], &c), Err(Error::Argument(_))));
    }

    #[test]
    fn two_member_batch_shares_only_the_requested_slot() {
        let c = small();
        let b = make_contrastive_batch(5, 2, &[AttributeSlot::Age], &c).unwrap();
        assert_eq!(b.pairs.len(), 1);
        let (a, z) = (&b.latents[0], &b.latents[1]);
        assert_eq!(a.global.slot(AttributeSlot::Age), z.global.slot(AttributeSlot::Age));
        for slot in [AttributeSlot::Identity, AttributeSlot::Expression, AttributeSlot::Pose, AttributeSlot::Free] {
            assert_ne!(a.global.slot(slot), z.global.slot(slot));
        }
        assert_ne!(a.local, z.local);
    }

    #[test]
    fn eight_member_batch_has_one_pair_per_slot() {
        let c = small();
        let b = make_contrastive_batch(9, 8, &AttributeSlot::CONSTRAINED, &c).unwrap();
        assert_eq!(b.pairs.len(), 4);
        for slot in AttributeSlot::CONSTRAINED {
            assert_eq!(b.pairs_for(slot).count(), 1);
        }
    }

    #[test]
    fn substitute_wrong_length_fails() {
        let c = small();
        let m = MappingNetwork::new(&c, 1).unwrap();
        let w = m.map_to_w(&sample_latent(1, &c).unwrap()).unwrap();
        assert!(matches!(substitute_slot(&w, AttributeSlot::Pose, &[1.0]), Err(Error::Argument(_))));
        let same = substitute_slot(&w, AttributeSlot::Pose, &w.global.slot(AttributeSlot::Pose).to_vec()).unwrap();
        assert_eq!(same, w);
    }

    #[test]
    fn w_mean_of_one_sample_is_that_sample() {
        let c = small();
        let m = MappingNetwork::new(&c, 1).unwrap();
        let mean = estimate_w_mean(3, 1, &m).unwrap();
        let direct = m.map_to_w(&sample_latent(w_mean_sample_seed(3, 0), &c).unwrap()).unwrap();
        assert_eq!(mean, direct);
        assert!(estimate_w_mean(3, 0, &m).is_err());
    }

    #[test]
    fn layout_json_round_trip() {
        let l = SemanticLayout::default();
        assert_eq!(SemanticLayout::from_json(&l.to_json()).unwrap(), l);
        assert_eq!(l.face_exterior().len(), 7);
        assert_eq!(l.face_interior().len(), 6);
        assert!(SemanticLayout::from_json(r#"{"a":0,"b":2}"#).is_err());
        assert!(SemanticLayout::new(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn extended_flatten_round_trip() {
        let c = small();
        let m = MappingNetwork::new(&c, 1).unwrap();
        let w = m.map_to_w(&sample_latent(2, &c).unwrap()).unwrap();
        assert_eq!(ExtendedLatent::unflatten(&w.flatten(), &c).unwrap(), w);
    }

    #[test]
    fn pca_requires_two_samples() {
        let c = small();
        let g = sample_latent(1, &c).unwrap().global;
        assert!(slot_pca_directions(&[g.clone()], AttributeSlot::Pose, 1).is_err());
        assert!(slot_pca_directions(&[g.clone(), g], AttributeSlot::Pose, 5).is_err());
    }

    #[test]
    fn pca_flags_degenerate_covariance() {
        let c = small();
        let g = sample_latent(1, &c).unwrap().global;
        let mut h = g.clone();
        h.slot_mut(AttributeSlot::Pose)[0] += 1.0;
        let p = slot_pca_directions(&[g, h], AttributeSlot::Pose, 3).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.directions.len(), 1);
        assert!((p.directions[0][0] - 1.0).abs() < 1e-12);
    }
}
