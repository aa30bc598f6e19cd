//! Cosine similarity kernel, mirrored contrastive loss and projection heads.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::AttributeEncoder;
use crate::error::{Error, Result};
use crate::generator::GeneratedOutput;
use crate::latent::{AttributeSlot, ContrastiveBatch};
use crate::params::{Binder, Params};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Use both pair members as anchors.
    pub mirroring: bool,
    /// Pass encoder embeddings through learnable projection heads.
    pub use_heads: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 0.07, mirroring: true, use_heads: true }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Argument(format!("vector lengths differ: {} vs {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nv))
}

/// `exp(cos(u, v) / tau)`.
pub fn similarity_g(u: &[f64], v: &[f64], tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    Ok((cosine(u, v)? / tau).exp())
}

fn check_batch(v: &[Vec<f64>], a: usize, b: usize) -> Result<()> {
    if v.len() < 2 {
        return Err(Error::Argument("contrastive loss needs at least two vectors".into()));
    }
    if a == b || a >= v.len() || b >= v.len() {
        return Err(Error::Argument(format!("invalid pair ({a}, {b}) for a batch of {}", v.len())));
    }
    Ok(())
}

/// `ln sum_{g != anchor} exp(cos(v[anchor], v[g]) / tau)` together with the scaled
/// cosine to `positive`.
fn anchor_terms(v: &[Vec<f64>], anchor: usize, positive: usize, tau: f64) -> Result<(f64, f64)> {
    let logits = (0..v.len())
        .filter(|&g| g != anchor)
        .map(|g| Ok((g, cosine(&v[anchor], &v[g])? / tau)))
        .collect::<Result<Vec<_>>>()?;
    let max = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l.1 - max).exp()).sum::<f64>().ln();
    let pos = logits.iter().find(|l| l.0 == positive).expect("positive is not the anchor").1;
    Ok((lse, pos))
}

/// One-anchor loss `-ln(g(a, p) / sum_{g != a} g(a, g))`.
pub fn directional_infonce(v: &[Vec<f64>], anchor: usize, positive: usize, tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    check_batch(v, anchor, positive)?;
    let (lse, pos) = anchor_terms(v, anchor, positive, tau)?;
    Ok(lse - pos)
}

/// Mirrored loss `-ln[g(a,b)^2 / (sum_{g != a} g(a,g) * sum_{g != b} g(b,g))]`.
pub fn mirrored_loss(v: &[Vec<f64>], alpha: usize, beta: usize, tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    check_batch(v, alpha, beta)?;
    let (lse_a, pos) = anchor_terms(v, alpha, beta, tau)?;
    let (lse_b, _) = anchor_terms(v, beta, alpha, tau)?;
    Ok(lse_a + lse_b - 2.0 * pos)
}

/// Differentiable sum of pair losses over the rows of `v` (`(N, D)`).
pub fn pair_loss_var<'t>(v: Var<'t>, pairs: &[(usize, usize)], tau: f64, mirroring: bool) -> Var<'t> {
    let tape = v.tape();
    let (n, _) = v.dim();
    if pairs.is_empty() || n < 2 {
        return tape.scalar(0.0);
    }
    let inv_norm = tape.constant(Array2::ones((n, 1))).div(v.square().sum_cols().sqrt());
    let unit = v.mul_col(inv_norm);
    let logits = unit.matmul(unit.t()).scale(1.0 / tau);
    let directional = |anchor: usize, positive: usize| {
        let row = logits.slice_rows(anchor, 1);
        let mut parts = Vec::new();
        if anchor > 0 {
            parts.push(row.slice_cols(0, anchor));
        }
        if anchor + 1 < n {
            parts.push(row.slice_cols(anchor + 1, n - anchor - 1));
        }
        let others = Var::concat_cols(&parts).log_softmax_rows();
        let col = if positive < anchor { positive } else { positive - 1 };
        others.slice_cols(col, 1).neg()
    };
    let mut total = tape.scalar(0.0);
    for &(a, b) in pairs {
        total = total + directional(a, b).reshape(1, 1);
        if mirroring {
            total = total + directional(b, a).reshape(1, 1);
        }
    }
    total
}

/// Two-layer projection head: linear, ReLU, linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionHead {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl ProjectionHead {
    pub fn init(&self, seed: u64) -> Params {
        let mut rng = rng::seeded(seed);
        let mut p = Params::new();
        let mut layer = |name: &str, fan_in: usize, fan_out: usize, rng: &mut rng::Rng| {
            let scale = (2.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_vec((fan_in, fan_out), rng::normal_vec(rng, fan_in * fan_out)).expect("head")
                * scale;
            p.insert(format!("{name}.weight"), w);
            p.insert(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        };
        layer("l0", self.input, self.hidden, &mut rng);
        layer("l1", self.hidden, self.output, &mut rng);
        p
    }

    /// `(N, input)` to `(N, output)`; parameters are looked up under `prefix`.
    pub fn forward_var<'t>(&self, b: &Binder<'t, '_>, prefix: &str, x: Var<'t>) -> Var<'t> {
        let h = x
            .matmul(b.get(&format!("{prefix}l0.weight")))
            .add_row(b.get(&format!("{prefix}l0.bias")))
            .leaky_relu(0.0);
        h.matmul(b.get(&format!("{prefix}l1.weight"))).add_row(b.get(&format!("{prefix}l1.bias")))
    }

    pub fn forward(&self, params: &Params, prefix: &str, x: &Array2<f64>) -> Array2<f64> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, params);
        (*self.forward_var(&b, prefix, tape.constant(x.clone())).value()).clone()
    }
}

/// One projection head per constrained attribute, parameters stored under `"{slot}."`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHeads {
    pub heads: BTreeMap<AttributeSlot, ProjectionHead>,
    pub params: Params,
}

impl ProjectionHeads {
    pub fn new(slots: &[(AttributeSlot, usize)], hidden: usize, output: usize, seed: u64) -> Self {
        let mut heads = BTreeMap::new();
        let mut params = Params::new();
        for &(slot, input) in slots {
            let head = ProjectionHead { input, hidden, output };
            params.extend_prefixed(&prefix(slot), &head.init(rng::derive_seed(seed, slot.name())));
            heads.insert(slot, head);
        }
        Self { heads, params }
    }

    pub fn from_params(slots: &[(AttributeSlot, usize)], hidden: usize, output: usize, params: Params) -> Result<Self> {
        let template = Self::new(slots, hidden, output, 0);
        for (name, value) in template.params.iter() {
            match params.try_get(name) {
                Some(v) if v.dim() == value.dim() => {}
                _ => return Err(Error::Config(format!("projection head parameter {name} missing or misshaped"))),
            }
        }
        if params.len() != template.params.len() {
            return Err(Error::Config("unexpected projection head parameters".into()));
        }
        Ok(Self { heads: template.heads, params })
    }

    pub fn get(&self, slot: AttributeSlot) -> Option<&ProjectionHead> {
        self.heads.get(&slot)
    }
}

pub fn prefix(slot: AttributeSlot) -> String {
    format!("{}.", slot.name())
}

/// Loss of one attribute over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeLoss {
    pub value: f64,
    /// True when the batch holds no pair for the attribute.
    pub no_pairs: bool,
}

/// Pairs of `batch` sharing `slot` as index tuples.
pub fn slot_pairs(batch: &ContrastiveBatch, slot: AttributeSlot) -> Vec<(usize, usize)> {
    batch.pairs_for(slot).map(|p| (p.alpha, p.beta)).collect()
}

/// Contrastive loss of `slot` for images generated from `batch.latents` in order.
pub fn attribute_loss(
    batch: &ContrastiveBatch,
    images: &[GeneratedOutput],
    slot: AttributeSlot,
    encoder: &dyn AttributeEncoder,
    head: Option<(&ProjectionHead, &Params, &str)>,
    config: &ContrastiveConfig,
) -> Result<AttributeLoss> {
    config.validate()?;
    if images.len() != batch.latents.len() {
        return Err(Error::Argument(format!(
            "{} images for a batch of {} latents",
            images.len(),
            batch.latents.len()
        )));
    }
    let pairs = slot_pairs(batch, slot);
    if pairs.is_empty() {
        return Ok(AttributeLoss { value: 0.0, no_pairs: true });
    }
    let embeddings = images.iter().map(|img| encoder.encode(&img.image)).collect::<Result<Vec<_>>>()?;
    let vectors = match head {
        Some((h, params, prefix)) if config.use_heads => {
            let e = Array2::from_shape_vec(
                (embeddings.len(), encoder.output_dim()),
                embeddings.into_iter().flatten().collect(),
            )
            .expect("embedding matrix");
            h.forward(params, prefix, &e).rows().into_iter().map(|r| r.to_vec()).collect()
        }
        _ => embeddings,
    };
    let mut value = 0.0;
    for (a, b) in pairs {
        value += if config.mirroring {
            mirrored_loss(&vectors, a, b, config.temperature)?
        } else {
            directional_infonce(&vectors, a, b, config.temperature)?
        };
    }
    Ok(AttributeLoss { value, no_pairs: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_special_cases() {
        let u = [1.0, 2.0, -0.5];
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!((similarity_g(&u, &u, 0.5).unwrap() - 2f64.exp()).abs() < 1e-12);
        assert!((similarity_g(&u, &neg, 0.5).unwrap() - (-2f64).exp()).abs() < 1e-12);
        assert_eq!(similarity_g(&[1.0, 0.0], &[0.0, 3.0], 1.0).unwrap(), 1.0);
        assert!(matches!(similarity_g(&[0.0, 0.0], &u[..2], 1.0), Err(Error::Domain(_))));
        assert!(similarity_g(&u, &u, 0.0).is_err());
    }

    #[test]
    fn two_element_batch_is_zero() {
        let v = vec![vec![1.0, 0.3], vec![-0.2, 2.0]];
        assert_eq!(mirrored_loss(&v, 0, 1, 0.07).unwrap(), 0.0);
        assert_eq!(directional_infonce(&v, 1, 0, 0.07).unwrap(), 0.0);
        assert!(mirrored_loss(&v[..1], 0, 0, 0.07).is_err());
    }

    #[test]
    fn tape_loss_matches_scalar() {
        let v = vec![vec![1.0, 0.2, -0.3], vec![0.5, 0.1, 0.9], vec![-1.0, 0.4, 0.0], vec![0.3, -0.7, 0.2]];
        let tape = Tape::new();
        let m = Array2::from_shape_vec((4, 3), v.concat()).unwrap();
        let x = tape.constant(m);
        let pairs = [(0, 1), (2, 3)];
        let mirrored = pair_loss_var(x, &pairs, 0.3, true).scalar_value();
        let expected = mirrored_loss(&v, 0, 1, 0.3).unwrap() + mirrored_loss(&v, 2, 3, 0.3).unwrap();
        assert!((mirrored - expected).abs() < 1e-12);
        let one_way = pair_loss_var(x, &pairs, 0.3, false).scalar_value();
        let expected = directional_infonce(&v, 0, 1, 0.3).unwrap() + directional_infonce(&v, 2, 3, 0.3).unwrap();
        assert!((one_way - expected).abs() < 1e-12);
    }
}
