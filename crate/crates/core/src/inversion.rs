//! Optimization-based projection of images into the extended latent space,
//! for single images and for pairs sharing one identity code.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Resampler, Tape, Var};
use crate::error::{Error, Result};
use crate::generator::{Generator, LatentVars};
use crate::image::{Image, LabelMap};
use crate::latent::{AttributeSlot, ExtendedLatent, GlobalLatent, LatentConfig, LocalCode};
use crate::params::{Adam, AdamConfig, Binder, Params};

/// Probability floor of the segmentation cross-entropy.
pub const SEG_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub weight_l1: f64,
    pub weight_l2: f64,
    pub weight_perceptual: f64,
    pub weight_mean: f64,
    pub weight_seg: f64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Fraction of the run over which the learning rate is cosine-annealed to zero at the end.
    pub rampdown: f64,
    /// Store a latent snapshot every this many steps (0 disables).
    pub snapshot_every: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            weight_l1: 1.0,
            weight_l2: 0.1,
            weight_perceptual: 2.0,
            weight_mean: 1.0,
            weight_seg: 1.0,
            steps: 300,
            learning_rate: 0.1,
            rampdown: 0.25,
            snapshot_every: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.weight_l1, self.weight_l2, self.weight_perceptual, self.weight_mean, self.weight_seg];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("inversion loss weights must be finite and non-negative".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("inversion needs at least one step".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.rampdown) {
            return Err(Error::Config("invalid inversion learning-rate schedule".into()));
        }
        Ok(())
    }

    /// Weight vector in breakdown order `[l1, l2, perceptual, mean, seg]`.
    pub fn weights(&self) -> [f64; 5] {
        [self.weight_l1, self.weight_l2, self.weight_perceptual, self.weight_mean, self.weight_seg]
    }

    /// One-line description written at the top of every trace.
    pub fn trace_header(&self) -> String {
        format!(
            "weights l1={} l2={} perceptual={} mean={} seg={}; optimizer=adam lr={} steps={}",
            self.weight_l1, self.weight_l2, self.weight_perceptual, self.weight_mean, self.weight_seg,
            self.learning_rate, self.steps
        )
    }

    /// Learning rate at `step`, annealed over the final `rampdown` fraction.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let t = step as f64 / self.steps as f64;
        if self.rampdown <= 0.0 {
            return self.learning_rate;
        }
        let ramp = ((1.0 - t) / self.rampdown).min(1.0);
        self.learning_rate * (0.5 - 0.5 * (std::f64::consts::PI * ramp).cos())
    }
}

/// Differentiable image distance used as the perceptual term.
pub trait PerceptualMetric: Send + Sync {
    /// Distance between two `(H * W, 3)` images on the tape.
    fn distance_var<'t>(&self, a: Var<'t>, b: Var<'t>) -> Var<'t>;

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        if !a.same_shape(b) {
            return Err(Error::Argument("perceptual distance needs images of equal shape".into()));
        }
        let tape = Tape::new();
        let d = self.distance_var(tape.constant(a.to_matrix()), tape.constant(b.to_matrix()));
        Ok(d.scalar_value())
    }
}

/// Mean squared error summed over an average-pooling pyramid.
#[derive(Debug, Clone)]
pub struct PyramidPerceptual {
    pools: Vec<Arc<Resampler>>,
}

impl PyramidPerceptual {
    pub fn new(height: usize, width: usize, levels: usize) -> Self {
        let mut pools = Vec::new();
        for level in 1..levels {
            let factor = 1 << level;
            if height % factor != 0 || width % factor != 0 {
                break;
            }
            pools.push(Arc::new(Resampler::average_pool(height, width, factor)));
        }
        Self { pools }
    }

    pub fn levels(&self) -> usize {
        self.pools.len() + 1
    }
}

impl PerceptualMetric for PyramidPerceptual {
    fn distance_var<'t>(&self, a: Var<'t>, b: Var<'t>) -> Var<'t> {
        let diff = a - b;
        let mut total = diff.square().mean();
        for pool in &self.pools {
            total = total + diff.resample(pool).square().mean();
        }
        total
    }
}

/// Mean over pixels of `-log p[target]` with the floored, renormalized distribution.
pub fn seg_cross_entropy(pred: &Array2<f64>, target: &LabelMap) -> Result<f64> {
    let k = pred.ncols();
    if pred.nrows() != target.data.len() {
        return Err(Error::Argument("semantic map and label map differ in size".into()));
    }
    target.check_range(k)?;
    let norm = 1.0 + k as f64 * SEG_EPS;
    let total: f64 = target
        .data
        .iter()
        .enumerate()
        .map(|(p, &label)| -((pred[[p, label as usize]] + SEG_EPS) / norm).ln())
        .sum();
    Ok(total / pred.nrows() as f64)
}

fn one_hot(labels: &LabelMap, k: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.data.len(), k));
    for (p, &label) in labels.data.iter().enumerate() {
        out[[p, label as usize]] = 1.0;
    }
    out
}

fn seg_cross_entropy_var<'t>(logits: Var<'t>, target: &Array2<f64>) -> Var<'t> {
    let tape = logits.tape();
    let k = logits.dim().1 as f64;
    let probs = logits.softmax_rows().add_scalar(SEG_EPS).scale(1.0 / (1.0 + k * SEG_EPS));
    let picked = probs.ln() * tape.constant(target.clone());
    picked.sum().scale(-1.0 / logits.dim().0 as f64)
}

/// Per-term values of the inversion objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub perceptual: f64,
    pub mean: f64,
    pub seg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 5] {
        [self.l1, self.l2, self.perceptual, self.mean, self.seg]
    }
}

/// Everything an inversion objective needs besides the latent itself.
pub struct InversionTarget<'a> {
    pub image: &'a Image,
    pub labels: &'a LabelMap,
}

struct TermVars<'t> {
    terms: [Var<'t>; 5],
    total: Var<'t>,
}

/// Builds the weighted objective for one image on the tape.
fn objective_vars<'t>(
    generator: &Generator,
    binder: &Binder<'t, '_>,
    latent: &LatentVars<'t>,
    target: &InversionTarget<'_>,
    w_mean: &ExtendedLatent,
    perceptual: &dyn PerceptualMetric,
    config: &InversionConfig,
) -> TermVars<'t> {
    let tape = binder.tape();
    let out = generator.forward(binder, latent);
    let target_image = tape.constant(target.image.to_matrix());
    let residual = out.image - target_image;
    let l1 = residual.abs().mean();
    let l2 = residual.square().mean();
    let perc = perceptual.distance_var(out.image, target_image);
    let mean = mean_regularizer(latent, w_mean);
    let seg = seg_cross_entropy_var(out.semantic_logits, &one_hot(target.labels, generator.config.components()));
    let terms = [l1, l2, perc, mean, seg];
    let mut total = tape.scalar(0.0);
    for (term, weight) in terms.iter().zip(config.weights()) {
        if weight != 0.0 {
            total = total + term.scale(weight);
        }
    }
    TermVars { terms, total }
}

/// Mean squared deviation from `w_mean` over every extended-latent coordinate.
fn mean_regularizer<'t>(latent: &LatentVars<'t>, w_mean: &ExtendedLatent) -> Var<'t> {
    let tape = latent.global.tape();
    let row = |v: &[f64]| tape.constant(Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row"));
    let mut parts = vec![latent.global - row(w_mean.global.as_slice())];
    for (k, code) in w_mean.local.iter().enumerate() {
        parts.push(latent.structure[k] - row(&code.structure));
        parts.push(latent.texture[k] - row(&code.texture));
    }
    let dev = Var::concat_cols(&parts);
    dev.square().mean()
}

fn breakdown(vars: &TermVars<'_>) -> LossBreakdown {
    let [l1, l2, perceptual, mean, seg] = vars.terms.map(|t| t.scalar_value());
    LossBreakdown { l1, l2, perceptual, mean, seg, total: vars.total.scalar_value() }
}

fn check_target(generator: &Generator, target: &InversionTarget<'_>) -> Result<()> {
    let res = generator.resolution();
    if target.image.height != res || target.image.width != res {
        return Err(Error::Argument(format!("target image must be {res}x{res}")));
    }
    if target.labels.height != res || target.labels.width != res {
        return Err(Error::Argument(format!("target labels must be {res}x{res}")));
    }
    target.labels.check_range(generator.config.components())
}

/// Evaluates the weighted inversion loss at `w` with its per-term breakdown.
pub fn inversion_loss(
    generator: &Generator,
    w: &ExtendedLatent,
    target: &InversionTarget<'_>,
    w_mean: &ExtendedLatent,
    perceptual: &dyn PerceptualMetric,
    config: &InversionConfig,
) -> Result<LossBreakdown> {
    w.check(&generator.config.latent)?;
    w_mean.check(&generator.config.latent)?;
    check_target(generator, target)?;
    let tape = Tape::new();
    let binder = Binder::frozen(&tape, &generator.params);
    let latent = LatentVars::constant(&tape, w);
    let vars = objective_vars(generator, &binder, &latent, target, w_mean, perceptual, config);
    let b = breakdown(&vars);
    if !b.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite inversion loss: {b:?}")));
    }
    Ok(b)
}

/// Gradient of the inversion loss with respect to every coordinate of `w`, flattened.
pub fn inversion_gradient(
    generator: &Generator,
    w: &ExtendedLatent,
    target: &InversionTarget<'_>,
    w_mean: &ExtendedLatent,
    perceptual: &dyn PerceptualMetric,
    config: &InversionConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    w.check(&generator.config.latent)?;
    check_target(generator, target)?;
    let tape = Tape::new();
    let binder = Binder::frozen(&tape, &generator.params);
    let latent = LatentVars::leaves(&tape, w);
    let vars = objective_vars(generator, &binder, &latent, target, w_mean, perceptual, config);
    let grads = tape.backward(vars.total);
    let mut flat: Vec<f64> = grads.get(latent.global).iter().copied().collect();
    for k in 0..latent.structure.len() {
        flat.extend(grads.get(latent.structure[k]).iter());
        flat.extend(grads.get(latent.texture[k]).iter());
    }
    Ok((breakdown(&vars), flat))
}

/// One row of an optimization trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub loss: f64,
    pub best: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub latent: ExtendedLatent,
    pub best: LossBreakdown,
    pub trace: Vec<TraceEntry>,
    /// Set when a non-finite loss stopped the run early.
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedInversionResult {
    pub identity: Vec<f64>,
    pub latents: [ExtendedLatent; 2],
    pub best: [LossBreakdown; 2],
    pub trace: Vec<TraceEntry>,
    /// `(step, latents)` recorded every `snapshot_every` steps.
    pub snapshots: Vec<(usize, [ExtendedLatent; 2])>,
    pub diverged: bool,
}

/// Trace rendered as JSON lines preceded by a header line.
pub fn trace_to_jsonl(config: &InversionConfig, trace: &[TraceEntry]) -> String {
    let mut out = serde_json::json!({ "header": config.trace_header() }).to_string();
    out.push('\n');
    for entry in trace {
        out.push_str(&serde_json::to_string(entry).expect("trace entry serializes"));
        out.push('\n');
    }
    out
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

/// Optimization variables of one latent under a name prefix.
fn insert_latent(vars: &mut Params, prefix: &str, w: &ExtendedLatent, skip_identity: bool) {
    for slot in AttributeSlot::ALL {
        if skip_identity && slot == AttributeSlot::Identity {
            continue;
        }
        vars.insert(format!("{prefix}slot.{}", slot.name()), row(w.global.slot(slot)));
    }
    for (k, code) in w.local.iter().enumerate() {
        vars.insert(format!("{prefix}local{k:02}.structure"), row(&code.structure));
        vars.insert(format!("{prefix}local{k:02}.texture"), row(&code.texture));
    }
}

fn latent_vars<'t>(b: &Binder<'t, '_>, prefix: &str, identity: &str, components: usize) -> LatentVars<'t> {
    let slots: Vec<Var<'t>> = AttributeSlot::ALL
        .iter()
        .map(|slot| {
            if *slot == AttributeSlot::Identity {
                b.get(identity)
            } else {
                b.get(&format!("{prefix}slot.{}", slot.name()))
            }
        })
        .collect();
    LatentVars {
        global: Var::concat_cols(&slots),
        structure: (0..components).map(|k| b.get(&format!("{prefix}local{k:02}.structure"))).collect(),
        texture: (0..components).map(|k| b.get(&format!("{prefix}local{k:02}.texture"))).collect(),
    }
}

fn read_latent(vars: &Params, prefix: &str, identity: &str, config: &LatentConfig) -> Result<ExtendedLatent> {
    let mut values = Vec::with_capacity(config.global_dim());
    for slot in AttributeSlot::ALL {
        let name = if slot == AttributeSlot::Identity { identity.to_string() } else { format!("{prefix}slot.{}", slot.name()) };
        values.extend(vars.get(&name).iter());
    }
    let global = GlobalLatent::new(values, &config.slots)?;
    let local = (0..config.components)
        .map(|k| LocalCode {
            structure: vars.get(&format!("{prefix}local{k:02}.structure")).iter().copied().collect(),
            texture: vars.get(&format!("{prefix}local{k:02}.texture")).iter().copied().collect(),
        })
        .collect();
    Ok(ExtendedLatent { global, local })
}

struct Run {
    best_vars: Params,
    best_terms: Vec<LossBreakdown>,
    trace: Vec<TraceEntry>,
    snapshots: Vec<(usize, Params)>,
    diverged: bool,
}

/// Adam loop shared by single and paired inversion. `objective` evaluates all
/// images for the current variables and returns per-image breakdowns plus gradients.
fn optimize(
    mut vars: Params,
    config: &InversionConfig,
    objective: impl Fn(&Params) -> (Vec<LossBreakdown>, Params),
) -> Run {
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate));
    let mut run = Run {
        best_vars: vars.clone(),
        best_terms: Vec::new(),
        trace: Vec::with_capacity(config.steps + 1),
        snapshots: Vec::new(),
        diverged: false,
    };
    let mut best = f64::INFINITY;
    for step in 0..=config.steps {
        if config.snapshot_every > 0 && step % config.snapshot_every == 0 {
            run.snapshots.push((step, vars.clone()));
        }
        let (terms, grads) = objective(&vars);
        let loss: f64 = terms.iter().map(|t| t.total).sum();
        if !loss.is_finite() || !grads.all_finite() {
            log::warn!("inversion diverged at step {step}; returning best finite iterate");
            run.diverged = true;
            break;
        }
        if loss < best || run.best_terms.is_empty() {
            best = loss;
            run.best_vars = vars.clone();
            run.best_terms = terms;
        }
        let lr = config.learning_rate_at(step);
        run.trace.push(TraceEntry { step, loss, best, learning_rate: lr });
        if step == config.steps {
            break;
        }
        adam.step_with_lr(&mut vars, &grads, lr);
    }
    run
}

fn finite_breakdown_or_err(run: &Run) -> Result<()> {
    if run.best_terms.is_empty() {
        return Err(Error::Numerical("inversion loss was non-finite at initialization".into()));
    }
    Ok(())
}

/// Projects one image into the extended space, starting from `w_mean`.
pub fn invert_single(
    generator: &Generator,
    target: &InversionTarget<'_>,
    w_mean: &ExtendedLatent,
    perceptual: &dyn PerceptualMetric,
    config: &InversionConfig,
) -> Result<InversionResult> {
    config.validate()?;
    check_target(generator, target)?;
    w_mean.check(&generator.config.latent)?;
    let latent_config = &generator.config.latent;
    let k = generator.config.components();
    let mut vars = Params::new();
    insert_latent(&mut vars, "", w_mean, false);
    let identity = "slot.identity";
    let run = optimize(vars, config, |vars| {
        let tape = Tape::new();
        let gb = Binder::frozen(&tape, &generator.params);
        let vb = Binder::new(&tape, vars);
        let latent = latent_vars(&vb, "", identity, k);
        let terms = objective_vars(generator, &gb, &latent, target, w_mean, perceptual, config);
        let grads = tape.backward(terms.total);
        (vec![breakdown(&terms)], vb.gradients(&grads))
    });
    finite_breakdown_or_err(&run)?;
    Ok(InversionResult {
        latent: read_latent(&run.best_vars, "", identity, latent_config)?,
        best: run.best_terms[0],
        trace: run.trace,
        diverged: run.diverged,
    })
}

/// Joint inversion of two images with one shared identity slot variable.
pub fn invert_paired(
    generator: &Generator,
    targets: [&InversionTarget<'_>; 2],
    w_mean: &ExtendedLatent,
    perceptual: &dyn PerceptualMetric,
    config: &InversionConfig,
) -> Result<PairedInversionResult> {
    config.validate()?;
    for t in targets {
        check_target(generator, t)?;
    }
    w_mean.check(&generator.config.latent)?;
    let latent_config = &generator.config.latent;
    let k = generator.config.components();
    let identity = "shared.identity";
    let prefixes = ["a.", "b."];
    let mut vars = Params::new();
    vars.insert(identity, row(w_mean.global.slot(AttributeSlot::Identity)));
    for prefix in prefixes {
        insert_latent(&mut vars, prefix, w_mean, true);
    }
    let run = optimize(vars, config, |vars| {
        let tape = Tape::new();
        let gb = Binder::frozen(&tape, &generator.params);
        let vb = Binder::new(&tape, vars);
        let mut terms = Vec::new();
        let mut total = tape.scalar(0.0);
        for (prefix, target) in prefixes.iter().zip(targets) {
            let latent = latent_vars(&vb, prefix, identity, k);
            let t = objective_vars(generator, &gb, &latent, target, w_mean, perceptual, config);
            total = total + t.total;
            terms.push(breakdown(&t));
        }
        let grads = tape.backward(total);
        (terms, vb.gradients(&grads))
    });
    finite_breakdown_or_err(&run)?;
    let read = |vars: &Params| -> Result<[ExtendedLatent; 2]> {
        Ok([
            read_latent(vars, prefixes[0], identity, latent_config)?,
            read_latent(vars, prefixes[1], identity, latent_config)?,
        ])
    };
    let snapshots = run.snapshots.iter().map(|(s, v)| Ok((*s, read(v)?))).collect::<Result<Vec<_>>>()?;
    Ok(PairedInversionResult {
        identity: run.best_vars.get(identity).iter().copied().collect(),
        latents: read(&run.best_vars)?,
        best: [run.best_terms[0], run.best_terms[1]],
        trace: run.trace,
        snapshots,
        diverged: run.diverged,
    })
}

/// Reconstruction PSNR in dB for images in `[-1, 1]` (peak-to-peak 2).
pub fn reconstruction_psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Argument("PSNR needs images of equal shape".into()));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / mse).log10() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seg_cross_entropy_limits() {
        let labels = LabelMap::new(1, 2, vec![0, 2]).unwrap();
        let mut one_hot = Array2::zeros((2, 3));
        one_hot[[0, 0]] = 1.0;
        one_hot[[1, 2]] = 1.0;
        let ce = seg_cross_entropy(&one_hot, &labels).unwrap();
        assert!(ce >= 0.0 && ce <= -(1.0 - 3.0 * SEG_EPS).ln());
        let uniform = Array2::from_elem((2, 3), 1.0 / 3.0);
        assert!((seg_cross_entropy(&uniform, &labels).unwrap() - 3f64.ln()).abs() < 1e-12);
        let bad = LabelMap::new(1, 2, vec![0, 3]).unwrap();
        assert!(seg_cross_entropy(&uniform, &bad).is_err());
    }

    #[test]
    fn learning_rate_schedule_ends_at_zero() {
        let c = InversionConfig::default();
        assert_eq!(c.learning_rate_at(0), 0.1);
        assert_eq!(c.learning_rate_at(200), 0.1);
        assert!(c.learning_rate_at(300).abs() < 1e-15);
        let flat = InversionConfig { rampdown: 0.0, ..c };
        assert_eq!(flat.learning_rate_at(299), 0.1);
    }
}
