//! Frozen image encoders. Pretrained attribute or face-recognition networks
//! plug in behind [`AttributeEncoder`]; [`StubEncoder`] is a deterministic
//! stand-in for tests and desk-scale runs.

use std::sync::Arc;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::autodiff::{Resampler, Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::AttributeSlot;
use crate::rng;

/// A frozen, differentiable map from an image to an embedding vector.
///
/// Implementations must be deterministic and must never change their state;
/// [`AttributeEncoder::state_digest`] lets callers verify that.
pub trait AttributeEncoder: Send + Sync {
    /// Expected `(height, width)` of input images.
    fn input_size(&self) -> (usize, usize);

    fn output_dim(&self) -> usize;

    /// `(H * W, 3)` image on the tape to a `(1, output_dim)` embedding.
    fn encode_var<'t>(&self, image: Var<'t>) -> Var<'t>;

    /// Hash of every value the encoder depends on.
    fn state_digest(&self) -> String;

    fn encode(&self, image: &Image) -> Result<Vec<f64>> {
        if (image.height, image.width) != self.input_size() {
            return Err(Error::Argument(format!(
                "encoder expects {:?} images, got {}x{}",
                self.input_size(),
                image.height,
                image.width
            )));
        }
        let tape = Tape::new();
        let e = self.encode_var(tape.constant(image.to_matrix()));
        Ok(e.value().iter().copied().collect())
    }
}

/// Seeded random linear map from an average-pooled image to an embedding.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    size: usize,
    pool: Option<Arc<Resampler>>,
    weight: Array2<f64>,
}

impl StubEncoder {
    /// Pools `size x size` images down to `pooled x pooled` (`pooled` must divide `size`).
    pub fn new(seed: u64, size: usize, pooled: usize, dim: usize) -> Result<Self> {
        if pooled == 0 || size == 0 || dim == 0 || size % pooled != 0 {
            return Err(Error::Config(format!("stub encoder cannot pool {size} to {pooled}")));
        }
        let factor = size / pooled;
        let pool = (factor > 1).then(|| Arc::new(Resampler::average_pool(size, size, factor)));
        let fan_in = pooled * pooled * 3;
        let mut rng = rng::seeded(seed);
        let scale = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_vec((fan_in, dim), rng::normal_vec(&mut rng, fan_in * dim))
            .expect("encoder weight")
            * scale;
        Ok(Self { size, pool, weight })
    }

    /// The default per-attribute stand-in: 8x8 pooling, 32-d output.
    pub fn for_slot(seed: u64, slot: AttributeSlot, size: usize) -> Result<Self> {
        let pooled = if size % 8 == 0 { 8 } else { size };
        Self::new(rng::derive_seed(seed, &format!("encoder/{}", slot.name())), size, pooled, 32)
    }
}

impl AttributeEncoder for StubEncoder {
    fn input_size(&self) -> (usize, usize) {
        (self.size, self.size)
    }

    fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn encode_var<'t>(&self, image: Var<'t>) -> Var<'t> {
        let pooled = match &self.pool {
            Some(pool) => image.resample(pool),
            None => image,
        };
        let flat = pooled.reshape(1, self.weight.nrows());
        flat.matmul(image.tape().constant(self.weight.clone()))
    }

    fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.size as u64).to_le_bytes());
        h.update((self.weight.nrows() as u64).to_le_bytes());
        h.update((self.weight.ncols() as u64).to_le_bytes());
        for v in self.weight.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_is_deterministic_and_linear() {
        let e = StubEncoder::new(5, 16, 4, 6).unwrap();
        let a = Image::filled(16, 16, [0.2, -0.1, 0.5]);
        let b = Image::filled(16, 16, [0.4, -0.2, 1.0]);
        let ea = e.encode(&a).unwrap();
        let eb = e.encode(&b).unwrap();
        assert_eq!(ea, e.encode(&a).unwrap());
        for (x, y) in ea.iter().zip(&eb) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        assert!(e.encode(&Image::filled(8, 8, [0.0; 3])).is_err());
        assert!(StubEncoder::new(1, 10, 4, 3).is_err());
    }
}
