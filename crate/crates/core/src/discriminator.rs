//! Small convolutional discriminator with a logistic loss and an R1 gradient
//! penalty whose input gradient is built explicitly on the tape.

use std::sync::Arc;

use ndarray::Array2;

use crate::autodiff::{ConvGeometry, Padding, Resampler, Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::LEAKY_SLOPE;
use crate::params::{Binder, Params};
use crate::rng;

const GAIN: f64 = std::f64::consts::SQRT_2;
/// Side the input is pooled to before the first convolution.
const BASE_SIDE: usize = 16;

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub params: Params,
    size: usize,
    input_pool: Option<Arc<Resampler>>,
    geo1: Arc<ConvGeometry>,
    pool1: Arc<Resampler>,
    geo2: Arc<ConvGeometry>,
}

impl Discriminator {
    /// Conv 3x3 (3 -> `c1`), pool, conv 3x3 (`c1` -> `c2`), mean, linear.
    pub fn new(size: usize, c1: usize, c2: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::seeded(seed);
        let mut params = Params::new();
        let mut dense = |name: &str, fan_in: usize, fan_out: usize| {
            let scale = (1.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_vec((fan_in, fan_out), rng::normal_vec(&mut rng, fan_in * fan_out))
                .expect("disc weight")
                * scale;
            params.insert(format!("{name}.weight"), w);
            params.insert(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        };
        dense("conv1", 27, c1);
        dense("conv2", 9 * c1, c2);
        dense("fc", c2, 1);
        Self::from_params(size, params)
    }

    pub fn from_params(size: usize, params: Params) -> Result<Self> {
        let side = size.min(BASE_SIDE);
        if size == 0 || size % side != 0 || side % 2 != 0 {
            return Err(Error::Config(format!("discriminator cannot take {size}x{size} inputs")));
        }
        let c1 = params.try_get("conv1.weight").map(|w| w.ncols()).unwrap_or(0);
        let ok = params.try_get("conv1.weight").is_some_and(|w| w.nrows() == 27)
            && params.try_get("conv2.weight").is_some_and(|w| w.nrows() == 9 * c1)
            && params.try_get("fc.weight").is_some_and(|w| w.ncols() == 1)
            && params.len() == 6;
        if !ok {
            return Err(Error::Config("malformed discriminator parameters".into()));
        }
        let factor = size / side;
        Ok(Self {
            params,
            size,
            input_pool: (factor > 1).then(|| Arc::new(Resampler::average_pool(size, size, factor))),
            geo1: Arc::new(ConvGeometry::new(side, side, 3, Padding::Zero)),
            pool1: Arc::new(Resampler::average_pool(side, side, 2)),
            geo2: Arc::new(ConvGeometry::new(side / 2, side / 2, 3, Padding::Zero)),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn pooled<'t>(&self, image: Var<'t>) -> Var<'t> {
        match &self.input_pool {
            Some(p) => image.resample(p),
            None => image,
        }
    }

    /// Pre-activations of both convolutions and the `(1, 1)` logit.
    fn layers<'t>(&self, b: &Binder<'t, '_>, image: Var<'t>) -> (Var<'t>, Var<'t>, Var<'t>) {
        let x0 = self.pooled(image);
        let a1 = x0.im2col(&self.geo1).matmul(b.get("conv1.weight")).add_row(b.get("conv1.bias"));
        let h1 = a1.leaky_relu(LEAKY_SLOPE).scale(GAIN);
        let x1 = h1.resample(&self.pool1);
        let a2 = x1.im2col(&self.geo2).matmul(b.get("conv2.weight")).add_row(b.get("conv2.bias"));
        let h2 = a2.leaky_relu(LEAKY_SLOPE).scale(GAIN);
        let pixels = h2.dim().0 as f64;
        let logit = h2.sum_rows().scale(1.0 / pixels).matmul(b.get("fc.weight")).add_row(b.get("fc.bias"));
        (a1, a2, logit)
    }

    /// Realness logit of an `(H * W, 3)` image.
    pub fn logit_var<'t>(&self, b: &Binder<'t, '_>, image: Var<'t>) -> Var<'t> {
        self.layers(b, image).2
    }

    pub fn logit(&self, image: &Image) -> f64 {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &self.params);
        self.logit_var(&b, tape.constant(image.to_matrix())).scalar_value()
    }

    /// `d logit / d image` for a fixed image, as a tape expression of the parameters.
    pub fn input_gradient_var<'t>(&self, b: &Binder<'t, '_>, image: &Image) -> Var<'t> {
        let tape = b.tape();
        let (a1, a2, _) = self.layers(b, tape.constant(image.to_matrix()));
        let slope_mask = |a: &Var<'t>| {
            tape.constant(a.value().mapv(|v| if v > 0.0 { GAIN } else { GAIN * LEAKY_SLOPE }))
        };
        let (p2, _) = a2.dim();
        let ones = tape.constant(Array2::from_elem((p2, 1), 1.0 / p2 as f64));
        let g_h2 = ones.matmul(b.get("fc.weight").t());
        let g_a2 = g_h2 * slope_mask(&a2);
        let g_x1 = g_a2.matmul(b.get("conv2.weight").t()).col2im(&self.geo2);
        let g_h1 = g_x1.resample(&Arc::new(self.pool1.transposed()));
        let g_a1 = g_h1 * slope_mask(&a1);
        let g_x0 = g_a1.matmul(b.get("conv1.weight").t()).col2im(&self.geo1);
        match &self.input_pool {
            Some(p) => g_x0.resample(&Arc::new(p.transposed())),
            None => g_x0,
        }
    }

    /// `softplus(D(fake)) + softplus(-D(real)) + gamma/2 * |grad_x D(real)|^2`, averaged
    /// over images, with gradients for the discriminator parameters.
    pub fn loss_and_gradients(&self, real: &[Image], fake: &[Image], r1_gamma: f64) -> (DiscriminatorLoss, Params) {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params);
        let mut fake_term = tape.scalar(0.0);
        for img in fake {
            fake_term = fake_term + self.logit_var(&b, tape.constant(img.to_matrix())).softplus();
        }
        let mut real_term = tape.scalar(0.0);
        let mut r1 = tape.scalar(0.0);
        for img in real {
            real_term = real_term + self.logit_var(&b, tape.constant(img.to_matrix())).neg().softplus();
            if r1_gamma > 0.0 {
                r1 = r1 + self.input_gradient_var(&b, img).square().sum();
            }
        }
        let fake_term = fake_term.scale(1.0 / fake.len().max(1) as f64);
        let real_term = real_term.scale(1.0 / real.len().max(1) as f64);
        let r1 = r1.scale(1.0 / real.len().max(1) as f64);
        let total = fake_term + real_term + r1.scale(0.5 * r1_gamma);
        let grads = b.gradients(&tape.backward(total));
        let report = DiscriminatorLoss {
            fake: fake_term.scalar_value(),
            real: real_term.scalar_value(),
            r1: r1.scalar_value(),
            total: total.scalar_value(),
        };
        (report, grads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscriminatorLoss {
    pub fake: f64,
    pub real: f64,
    pub r1: f64,
    pub total: f64,
}
