//! Compositional generator: per-component coarse/structure/texture networks
//! over Fourier features, softmax attention fusion, and a convolutional
//! renderer producing an RGB image and a per-pixel semantic distribution.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, ConvGeometry, Padding, Resampler, Tape, Var};
use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::latent::{ExtendedLatent, LatentConfig, LocalCode, SemanticLayout, LEAKY_SLOPE};
use crate::params::{Binder, Params};
use crate::rng;

const ACT_GAIN: f64 = std::f64::consts::SQRT_2;
const DEMOD_EPS: f64 = 1e-8;
/// Style affine init scale relative to `1/sqrt(style_dim)`.
const STYLE_GAIN: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub latent: LatentConfig,
    /// Side of the Fourier feature grid the component generators run on.
    pub grid_size: usize,
    pub fourier_dim: usize,
    pub fourier_bandwidth: f64,
    pub fourier_seed: u64,
    /// Hidden width of the component generators and of `f^k`.
    pub feature_channels: usize,
    pub layers_per_stage: usize,
    /// Output channels of each x2 upsampling renderer stage.
    pub render_channels: Vec<usize>,
    /// Scale of the canonical face-layout prior added to attention logits at init.
    pub layout_prior_strength: f64,
    /// Multiplier on the upsampled attention logits in the semantic head.
    pub semantic_gain: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent: LatentConfig::default(),
            grid_size: 16,
            fourier_dim: 64,
            fourier_bandwidth: 3.0,
            fourier_seed: 0x5eed,
            feature_channels: 64,
            layers_per_stage: 2,
            render_channels: vec![32, 16],
            layout_prior_strength: 1.0,
            semantic_gain: 6.0,
        }
    }
}

impl GeneratorConfig {
    /// Reduced configuration for fast experiments at 32x32.
    pub fn compact() -> Self {
        Self {
            latent: LatentConfig {
                slots: crate::latent::SlotDims::uniform(16, 32),
                local_dim: 16,
                components: 13,
                mapping_layers: 2,
            },
            grid_size: 8,
            fourier_dim: 32,
            feature_channels: 24,
            render_channels: vec![16, 12],
            ..Self::default()
        }
    }

    pub fn resolution(&self) -> usize {
        self.grid_size << self.render_channels.len()
    }

    pub fn components(&self) -> usize {
        self.latent.components
    }

    pub fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        if self.grid_size == 0 || self.fourier_dim == 0 || self.feature_channels == 0 || self.layers_per_stage == 0 {
            return Err(Error::Config("generator dimensions must be positive".into()));
        }
        if self.render_channels.contains(&0) {
            return Err(Error::Config("renderer channels must be positive".into()));
        }
        if !self.fourier_bandwidth.is_finite() || self.fourier_bandwidth < 0.0 {
            return Err(Error::Config("fourier bandwidth must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Fixed sinusoidal encodings of normalized pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierGrid {
    pub height: usize,
    pub width: usize,
    /// `(height * width, dim)`: sines for every frequency, then cosines.
    pub features: Array2<f64>,
}

/// Builds `[sin(Bx), cos(Bx)]` with `B ~ N(0, bandwidth^2)` over `[-1, 1]^2`.
pub fn make_fourier_grid(seed: u64, height: usize, width: usize, dim: usize, bandwidth: f64) -> FourierGrid {
    let n_sin = dim.div_ceil(2);
    let n_cos = dim / 2;
    let mut rng = rng::seeded(seed);
    let freqs: Vec<[f64; 2]> = (0..n_sin).map(|_| [rng::normal(&mut rng) * bandwidth, rng::normal(&mut rng) * bandwidth]).collect();
    let coord = |i: usize, n: usize| if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut features = Array2::zeros((height * width, dim));
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let (u, v) = (coord(x, width), coord(y, height));
            for (j, f) in freqs.iter().enumerate() {
                let phase = f[0] * u + f[1] * v;
                features[[p, j]] = phase.sin();
                if j < n_cos {
                    features[[p, n_sin + j]] = phase.cos();
                }
            }
        }
    }
    FourierGrid { height, width, features }
}

/// Pre-fusion output of one component generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentFeature {
    /// `(h * w, c)` features `f^k`.
    pub features: Array2<f64>,
    /// `(h * w, 1)` attention logits `d^k`.
    pub attention: Array2<f64>,
}

/// Attention-weighted feature sum plus the stacked attention logits.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures {
    pub features: Array2<f64>,
    /// `(h * w, K)`.
    pub attention_logits: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedOutput {
    pub image: Image,
    /// `(H * W, K)` per-pixel probabilities.
    pub semantic_map: Array2<f64>,
}

impl GeneratedOutput {
    /// Most probable component per pixel (lowest index wins ties).
    pub fn labels(&self) -> LabelMap {
        let data = self
            .semantic_map
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (k, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap { height: self.image.height, width: self.image.width, data }
    }
}

/// Differentiable handles of an extended latent.
#[derive(Clone)]
pub struct LatentVars<'t> {
    /// `(1, G)` concatenated global code.
    pub global: Var<'t>,
    pub structure: Vec<Var<'t>>,
    pub texture: Vec<Var<'t>>,
}

impl<'t> LatentVars<'t> {
    pub fn constant(tape: &'t Tape, w: &ExtendedLatent) -> Self {
        let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row");
        Self {
            global: tape.constant(row(w.global.as_slice())),
            structure: w.local.iter().map(|c| tape.constant(row(&c.structure))).collect(),
            texture: w.local.iter().map(|c| tape.constant(row(&c.texture))).collect(),
        }
    }

    pub fn leaves(tape: &'t Tape, w: &ExtendedLatent) -> Self {
        Self {
            global: tape.row(w.global.as_slice()),
            structure: w.local.iter().map(|c| tape.row(&c.structure)).collect(),
            texture: w.local.iter().map(|c| tape.row(&c.texture)).collect(),
        }
    }
}

/// Differentiable generator outputs.
pub struct OutputVars<'t> {
    /// `(H * W, 3)` in `[-1, 1]`.
    pub image: Var<'t>,
    /// `(H * W, K)` pre-softmax semantic logits.
    pub semantic_logits: Var<'t>,
}

/// Generator architecture plus its parameters.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: Params,
    grid: FourierGrid,
    render_up: Vec<Arc<Resampler>>,
    render_geo: Vec<Arc<ConvGeometry>>,
    attention_up: Arc<Resampler>,
}

impl PartialEq for Generator {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

fn stage_name(k: usize, stage: &str, layer: usize) -> String {
    format!("comp{k:02}.{stage}{layer}")
}

const STAGES: [&str; 3] = ["coarse", "structure", "texture"];

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut params = Params::new();
        let normal = |rng: &mut rng::Rng, r: usize, c: usize, scale: f64| {
            Array2::from_shape_vec((r, c), rng::normal_vec(rng, r * c)).expect("shape") * scale
        };
        let lc = &config.latent;
        let c = config.feature_channels;
        let prior = layout_prior(&SemanticLayout::default(), config.components(), config.grid_size);
        for k in 0..config.components() {
            for stage in STAGES {
                let style_dim = if stage == "coarse" { lc.global_dim() } else { lc.local_dim };
                for layer in 0..config.layers_per_stage {
                    let c_in = if stage == "coarse" && layer == 0 { config.fourier_dim } else { c };
                    let name = stage_name(k, stage, layer);
                    let style_scale = if style_dim == 0 { 0.0 } else { STYLE_GAIN / (style_dim as f64).sqrt() };
                    params.insert(format!("{name}.weight"), normal(&mut rng, c_in, c, 1.0));
                    params.insert(format!("{name}.bias"), Array2::zeros((1, c)));
                    params.insert(format!("{name}.style_weight"), normal(&mut rng, style_dim, c_in, style_scale));
                    params.insert(format!("{name}.style_bias"), Array2::zeros((1, c_in)));
                }
            }
            let s = 1.0 / (c as f64).sqrt();
            params.insert(format!("comp{k:02}.attn.weight"), normal(&mut rng, c, 1, s));
            params.insert(format!("comp{k:02}.attn.bias"), Array2::zeros((1, 1)));
            let column = prior.column(k).mapv(|v| v * config.layout_prior_strength);
            params.insert(format!("comp{k:02}.attn.prior"), column.insert_axis(ndarray::Axis(1)));
            params.insert(format!("comp{k:02}.feat.weight"), normal(&mut rng, c, c, s));
            params.insert(format!("comp{k:02}.feat.bias"), Array2::zeros((1, c)));
        }
        let mut c_in = c;
        for (i, &c_out) in config.render_channels.iter().enumerate() {
            let fan_in = 9 * c_in;
            params.insert(format!("render.conv{i}.weight"), normal(&mut rng, fan_in, c_out, (2.0 / fan_in as f64).sqrt()));
            params.insert(format!("render.conv{i}.bias"), Array2::zeros((1, c_out)));
            c_in = c_out;
        }
        let s = 1.0 / (c_in as f64).sqrt();
        params.insert("render.rgb.weight", normal(&mut rng, c_in, 3, s));
        params.insert("render.rgb.bias", Array2::zeros((1, 3)));
        params.insert("render.seg.weight", normal(&mut rng, c_in, config.components(), 0.1 * s));
        params.insert("render.seg.bias", Array2::zeros((1, config.components())));
        Self::from_params(config, params)
    }

    /// Rebuilds a generator from stored parameters, checking every shape.
    pub fn from_params(config: GeneratorConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(&config);
        for (name, shape) in &expected {
            match params.try_get(name) {
                Some(t) if t.dim() == *shape => {}
                Some(t) => {
                    return Err(Error::Config(format!("parameter {name} has shape {:?}, expected {shape:?}", t.dim())))
                }
                None => return Err(Error::Config(format!("missing generator parameter {name}"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Config("unexpected extra generator parameters".into()));
        }
        let g = config.grid_size;
        let grid = make_fourier_grid(config.fourier_seed, g, g, config.fourier_dim, config.fourier_bandwidth);
        let mut render_up = Vec::new();
        let mut render_geo = Vec::new();
        let mut side = g;
        for _ in &config.render_channels {
            render_up.push(Arc::new(Resampler::bilinear(side, side, side * 2, side * 2)));
            side *= 2;
            render_geo.push(Arc::new(ConvGeometry::new(side, side, 3, Padding::Zero)));
        }
        let attention_up = Arc::new(Resampler::bilinear(g, g, side, side));
        Ok(Self { config, params, grid, render_up, render_geo, attention_up })
    }

    fn expected_shapes(config: &GeneratorConfig) -> Vec<(String, (usize, usize))> {
        let lc = &config.latent;
        let c = config.feature_channels;
        let p = config.grid_size * config.grid_size;
        let mut out = Vec::new();
        for k in 0..config.components() {
            for stage in STAGES {
                let style_dim = if stage == "coarse" { lc.global_dim() } else { lc.local_dim };
                for layer in 0..config.layers_per_stage {
                    let c_in = if stage == "coarse" && layer == 0 { config.fourier_dim } else { c };
                    let name = stage_name(k, stage, layer);
                    out.push((format!("{name}.weight"), (c_in, c)));
                    out.push((format!("{name}.bias"), (1, c)));
                    out.push((format!("{name}.style_weight"), (style_dim, c_in)));
                    out.push((format!("{name}.style_bias"), (1, c_in)));
                }
            }
            out.push((format!("comp{k:02}.attn.weight"), (c, 1)));
            out.push((format!("comp{k:02}.attn.bias"), (1, 1)));
            out.push((format!("comp{k:02}.attn.prior"), (p, 1)));
            out.push((format!("comp{k:02}.feat.weight"), (c, c)));
            out.push((format!("comp{k:02}.feat.bias"), (1, c)));
        }
        let mut c_in = c;
        for (i, &c_out) in config.render_channels.iter().enumerate() {
            out.push((format!("render.conv{i}.weight"), (9 * c_in, c_out)));
            out.push((format!("render.conv{i}.bias"), (1, c_out)));
            c_in = c_out;
        }
        out.push(("render.rgb.weight".into(), (c_in, 3)));
        out.push(("render.rgb.bias".into(), (1, 3)));
        out.push(("render.seg.weight".into(), (c_in, config.components())));
        out.push(("render.seg.bias".into(), (1, config.components())));
        out
    }

    pub fn grid(&self) -> &FourierGrid {
        &self.grid
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution()
    }

    /// Style-modulated, demodulated 1x1 convolution followed by a scaled leaky ReLU.
    fn modulated<'t>(&self, b: &Binder<'t, '_>, name: &str, x: Var<'t>, style_source: Var<'t>) -> Var<'t> {
        let style = style_source
            .matmul(b.get(&format!("{name}.style_weight")))
            .add_row(b.get(&format!("{name}.style_bias")))
            .add_scalar(1.0);
        let weight = b.get(&format!("{name}.weight"));
        let demod_sq = style.square().matmul(weight.square()).add_scalar(DEMOD_EPS);
        let ones = b.tape().constant(Array2::ones(demod_sq.dim()));
        let demod = ones.div(demod_sq.sqrt());
        x.mul_row(style)
            .matmul(weight)
            .mul_row(demod)
            .add_row(b.get(&format!("{name}.bias")))
            .leaky_relu(LEAKY_SLOPE)
            .scale(ACT_GAIN)
    }

    /// `(f^k, d^k)` for component `k` as tape variables.
    pub fn component_vars<'t>(
        &self,
        b: &Binder<'t, '_>,
        k: usize,
        global: Var<'t>,
        structure: Var<'t>,
        texture: Var<'t>,
    ) -> (Var<'t>, Var<'t>) {
        let mut h = b.tape().constant(self.grid.features.clone());
        for layer in 0..self.config.layers_per_stage {
            h = self.modulated(b, &stage_name(k, "coarse", layer), h, global);
        }
        for layer in 0..self.config.layers_per_stage {
            h = self.modulated(b, &stage_name(k, "structure", layer), h, structure);
        }
        let attention = h
            .matmul(b.get(&format!("comp{k:02}.attn.weight")))
            .add_row(b.get(&format!("comp{k:02}.attn.bias")))
            .add(b.get(&format!("comp{k:02}.attn.prior")));
        for layer in 0..self.config.layers_per_stage {
            h = self.modulated(b, &stage_name(k, "texture", layer), h, texture);
        }
        let features = h
            .matmul(b.get(&format!("comp{k:02}.feat.weight")))
            .add_row(b.get(&format!("comp{k:02}.feat.bias")));
        (features, attention)
    }

    /// Softmax over component logits per pixel, then the weighted feature sum.
    pub fn fuse_vars<'t>(components: &[(Var<'t>, Var<'t>)]) -> (Var<'t>, Var<'t>) {
        let logits = Var::concat_cols(&components.iter().map(|c| c.1).collect::<Vec<_>>());
        let weights = logits.softmax_rows();
        let mut fused = None;
        for (k, (features, _)) in components.iter().enumerate() {
            let term = features.mul_col(weights.slice_cols(k, 1));
            fused = Some(match fused {
                None => term,
                Some(acc) => acc + term,
            });
        }
        (fused.expect("at least one component"), logits)
    }

    pub fn render_vars<'t>(&self, b: &Binder<'t, '_>, fused: Var<'t>, attention_logits: Var<'t>) -> OutputVars<'t> {
        let mut h = fused;
        for (i, (up, geo)) in self.render_up.iter().zip(&self.render_geo).enumerate() {
            h = h
                .resample(up)
                .im2col(geo)
                .matmul(b.get(&format!("render.conv{i}.weight")))
                .add_row(b.get(&format!("render.conv{i}.bias")))
                .leaky_relu(LEAKY_SLOPE)
                .scale(ACT_GAIN);
        }
        let image = h.matmul(b.get("render.rgb.weight")).add_row(b.get("render.rgb.bias")).tanh();
        let residual = h.matmul(b.get("render.seg.weight")).add_row(b.get("render.seg.bias"));
        let semantic_logits = attention_logits.resample(&self.attention_up).scale(self.config.semantic_gain) + residual;
        OutputVars { image, semantic_logits }
    }

    /// End-to-end differentiable forward pass.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, w: &LatentVars<'t>) -> OutputVars<'t> {
        let components: Vec<_> = (0..self.config.components())
            .map(|k| self.component_vars(b, k, w.global, w.structure[k], w.texture[k]))
            .collect();
        let (fused, logits) = Self::fuse_vars(&components);
        self.render_vars(b, fused, logits)
    }

    fn frozen_binder<'t, 'p>(&'p self, tape: &'t Tape) -> Binder<'t, 'p> {
        Binder::frozen(tape, &self.params)
    }

    pub fn generate_component(&self, k: usize, w: &ExtendedLatent) -> Result<ComponentFeature> {
        w.check(&self.config.latent)?;
        if k >= self.config.components() {
            return Err(Error::Argument(format!("component {k} out of range")));
        }
        let tape = Tape::new();
        let b = self.frozen_binder(&tape);
        let lv = LatentVars::constant(&tape, w);
        let (f, d) = self.component_vars(&b, k, lv.global, lv.structure[k], lv.texture[k]);
        Ok(ComponentFeature { features: (*f.value()).clone(), attention: (*d.value()).clone() })
    }

    /// All `K` component outputs.
    pub fn generate_components(&self, w: &ExtendedLatent) -> Result<Vec<ComponentFeature>> {
        (0..self.config.components()).map(|k| self.generate_component(k, w)).collect()
    }

    pub fn fuse(&self, components: &[ComponentFeature]) -> Result<FusedFeatures> {
        fuse(components, self.config.components())
    }

    pub fn render(&self, fused: &FusedFeatures) -> Result<GeneratedOutput> {
        let p = self.config.grid_size * self.config.grid_size;
        if fused.features.dim() != (p, self.config.feature_channels)
            || fused.attention_logits.dim() != (p, self.config.components())
        {
            return Err(Error::Argument("fused features do not match the renderer input".into()));
        }
        let tape = Tape::new();
        let b = self.frozen_binder(&tape);
        let f = tape.constant(fused.features.clone());
        let l = tape.constant(fused.attention_logits.clone());
        let out = self.render_vars(&b, f, l);
        self.collect_output(&out)
    }

    pub fn generate(&self, w: &ExtendedLatent) -> Result<GeneratedOutput> {
        w.check(&self.config.latent)?;
        let tape = Tape::new();
        let b = self.frozen_binder(&tape);
        let lv = LatentVars::constant(&tape, w);
        let out = self.forward(&b, &lv);
        self.collect_output(&out)
    }

    pub fn collect_output(&self, out: &OutputVars<'_>) -> Result<GeneratedOutput> {
        let res = self.resolution();
        let image = Image::from_matrix(res, res, &out.image.value())?;
        if !image.is_finite() {
            return Err(Error::Numerical("generated image is not finite".into()));
        }
        let semantic_map = softmax_rows(&out.semantic_logits.value());
        Ok(GeneratedOutput { image, semantic_map })
    }
}

/// Standalone fusion over plain component outputs.
pub fn fuse(components: &[ComponentFeature], expected: usize) -> Result<FusedFeatures> {
    if components.len() != expected {
        return Err(Error::Argument(format!("expected {expected} components, got {}", components.len())));
    }
    let first = components.first().ok_or_else(|| Error::Argument("no components to fuse".into()))?;
    let (p, c) = first.features.dim();
    if components.iter().any(|cf| cf.features.dim() != (p, c) || cf.attention.dim() != (p, 1)) {
        return Err(Error::Argument("component feature shapes disagree".into()));
    }
    let tape = Tape::new();
    let vars: Vec<_> = components
        .iter()
        .map(|cf| (tape.constant(cf.features.clone()), tape.constant(cf.attention.clone())))
        .collect();
    let (fused, logits) = Generator::fuse_vars(&vars);
    Ok(FusedFeatures { features: (*fused.value()).clone(), attention_logits: (*logits.value()).clone() })
}

/// Canonical face layout as `(grid^2, K)` logits, zero for unknown names.
///
/// Each component is a set of Gaussian blobs `(cx, cy, rx, ry)` in `[-1, 1]^2`
/// (y pointing down) with a peak height; background is a constant floor.
pub fn layout_prior(layout: &SemanticLayout, components: usize, grid: usize) -> Array2<f64> {
    type Blob = (f64, f64, f64, f64);
    let spec: &[(&str, f64, &[Blob])] = &[
        ("skin", 6.0, &[(0.0, 0.05, 0.5, 0.62)]),
        ("eyes", 9.0, &[(-0.24, -0.08, 0.12, 0.08), (0.24, -0.08, 0.12, 0.08)]),
        ("brows", 8.5, &[(-0.24, -0.28, 0.14, 0.06), (0.24, -0.28, 0.14, 0.06)]),
        ("mouth", 9.0, &[(0.0, 0.4, 0.22, 0.1)]),
        ("nose", 8.5, &[(0.0, 0.12, 0.09, 0.14)]),
        ("ears", 7.5, &[(-0.6, 0.02, 0.09, 0.16), (0.6, 0.02, 0.09, 0.16)]),
        ("eyeglasses", 4.0, &[(-0.24, -0.08, 0.16, 0.12), (0.24, -0.08, 0.16, 0.12)]),
        ("earrings", 8.0, &[(-0.62, 0.3, 0.07, 0.07), (0.62, 0.3, 0.07, 0.07)]),
        ("hair", 6.5, &[(0.0, -0.8, 0.8, 0.35), (-0.7, -0.3, 0.2, 0.5), (0.7, -0.3, 0.2, 0.5)]),
        ("hats", 5.0, &[(0.0, -1.05, 0.45, 0.12)]),
        ("neck", 7.0, &[(0.0, 0.85, 0.22, 0.2)]),
        ("clothes", 7.0, &[(0.0, 1.2, 1.0, 0.25)]),
    ];
    const FLOOR: f64 = 2.5;
    let coord = |i: usize| if grid > 1 { -1.0 + 2.0 * i as f64 / (grid - 1) as f64 } else { 0.0 };
    let mut out = Array2::zeros((grid * grid, components));
    for k in 0..components.min(layout.len()) {
        let name = layout.name(k);
        if name == "background" {
            out.column_mut(k).fill(FLOOR);
            continue;
        }
        let Some((_, peak, blobs)) = spec.iter().find(|(n, _, _)| *n == name) else { continue };
        for y in 0..grid {
            for x in 0..grid {
                let (u, v) = (coord(x), coord(y));
                let bump = blobs
                    .iter()
                    .map(|&(cx, cy, rx, ry)| (-0.5 * (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2))).exp())
                    .fold(0.0, f64::max);
                out[[y * grid + x, k]] = peak * bump;
            }
        }
    }
    out
}

impl LocalCode {
    pub fn zeros(dim: usize) -> Self {
        Self { structure: vec![0.0; dim], texture: vec![0.0; dim] }
    }
}
