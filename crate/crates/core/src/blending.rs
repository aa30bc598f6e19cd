//! Blending masks and region fusion with pluggable inpainting and
//! restoration priors.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, MaskImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlendConfig {
    /// Gaussian standard deviation in pixels.
    pub sigma: f64,
    pub kernel_size: usize,
    /// Blurred-union threshold in `(0, 1)`.
    pub threshold: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self { sigma: 3.0, kernel_size: 13, threshold: 0.4 }
    }
}

impl BlendConfig {
    /// Defaults scaled linearly from their 64x64 values.
    pub fn for_resolution(size: usize) -> Self {
        let scale = size as f64 / 64.0;
        let k = ((13.0 * scale).round() as usize).max(1);
        Self { sigma: 3.0 * scale, kernel_size: k | 1, threshold: 0.4 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("blur sigma must be non-negative, got {}", self.sigma)));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        Ok(())
    }
}

/// Normalized `size x size` Gaussian; `sigma = 0` gives a centred delta.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<Array2<f64>> {
    if size % 2 == 0 {
        return Err(Error::Argument(format!("kernel size must be odd, got {size}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("sigma must be non-negative, got {sigma}")));
    }
    let r = (size / 2) as isize;
    let mut k = Array2::zeros((size, size));
    if sigma == 0.0 {
        k[[size / 2, size / 2]] = 1.0;
        return Ok(k);
    }
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as isize - r, x as isize - r);
            k[[y, x]] = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
        }
    }
    let z = k.sum();
    Ok(k / z)
}

/// Same-size convolution of a binary mask with replicate padding.
pub fn blur_mask(mask: &MaskImage, kernel: &Array2<f64>) -> Array2<f64> {
    let (h, w) = (mask.height as isize, mask.width as isize);
    let r = (kernel.nrows() / 2) as isize;
    let mut out = Array2::zeros((mask.height, mask.width));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, row) in kernel.rows().into_iter().enumerate() {
                let sy = (y + ky as isize - r).clamp(0, h - 1);
                for (kx, &kv) in row.iter().enumerate() {
                    let sx = (x + kx as isize - r).clamp(0, w - 1);
                    if mask.data[(sy * w + sx) as usize] {
                        acc += kv;
                    }
                }
            }
            out[[y as usize, x as usize]] = acc;
        }
    }
    out
}

/// `1[(m_real | m_syn) * k > eta] \ m_real`.
pub fn blend_mask(m_real: &MaskImage, m_syn: &MaskImage, config: &BlendConfig) -> Result<MaskImage> {
    config.validate()?;
    if !m_real.same_shape(m_syn) {
        return Err(Error::Argument("blend masks differ in shape".into()));
    }
    let kernel = gaussian_kernel(config.sigma, config.kernel_size)?;
    let blurred = blur_mask(&m_real.union(m_syn), &kernel);
    let data = blurred.iter().zip(&m_real.data).map(|(&v, &real)| v > config.threshold && !real).collect();
    MaskImage::new(m_real.height, m_real.width, data)
}

/// Geometry of one fusion: the protected region, the synthetic region and the band between.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlendPlan {
    pub m_real: MaskImage,
    pub m_syn: MaskImage,
    pub m_inp: MaskImage,
}

impl BlendPlan {
    pub fn new(m_real: MaskImage, m_syn: MaskImage, config: &BlendConfig) -> Result<Self> {
        let m_inp = blend_mask(&m_real, &m_syn, config)?;
        Ok(Self { m_real, m_syn, m_inp })
    }
}

/// Fills a hole; pixels outside the hole must be returned unchanged.
pub trait InpaintingPrior: Send + Sync {
    fn fill(&self, image: &Image, hole: &MaskImage) -> Result<Image>;
}

/// Frozen image-to-image clean-up applied to final outputs.
pub trait RestorationPrior: Send + Sync {
    fn restore(&self, image: &Image) -> Result<Image>;
}

/// Iterative 4-neighbour averaging inside the hole (Jacobi sweeps).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionInpainter {
    pub iterations: usize,
}

impl Default for DiffusionInpainter {
    fn default() -> Self {
        Self { iterations: 200 }
    }
}

impl InpaintingPrior for DiffusionInpainter {
    fn fill(&self, image: &Image, hole: &MaskImage) -> Result<Image> {
        check_mask(image, hole)?;
        let (h, w) = (image.height, image.width);
        let mut cur = image.clone();
        let holes: Vec<usize> = (0..h * w).filter(|&p| hole.data[p]).collect();
        for &p in &holes {
            cur.pixel_mut(p).copy_from_slice(&[0.0; 3]);
        }
        let mut next = cur.clone();
        for _ in 0..self.iterations {
            for &p in &holes {
                let (y, x) = (p / w, p % w);
                let mut acc = [0.0; 3];
                let mut n = 0.0;
                let mut add = |q: usize| {
                    for (a, v) in acc.iter_mut().zip(cur.pixel(q)) {
                        *a += v;
                    }
                    n += 1.0;
                };
                if y > 0 {
                    add(p - w);
                }
                if y + 1 < h {
                    add(p + w);
                }
                if x > 0 {
                    add(p - 1);
                }
                if x + 1 < w {
                    add(p + 1);
                }
                next.pixel_mut(p).iter_mut().zip(acc).for_each(|(d, a)| *d = a / n);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }
}

/// Returns the image unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityInpainter;

impl InpaintingPrior for IdentityInpainter {
    fn fill(&self, image: &Image, hole: &MaskImage) -> Result<Image> {
        check_mask(image, hole)?;
        Ok(image.clone())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRestoration;

impl RestorationPrior for IdentityRestoration {
    fn restore(&self, image: &Image) -> Result<Image> {
        Ok(image.clone())
    }
}

fn check_mask(image: &Image, mask: &MaskImage) -> Result<()> {
    if image.height != mask.height || image.width != mask.width {
        return Err(Error::Argument("mask and image differ in shape".into()));
    }
    Ok(())
}

/// Where each output pixel of [`fuse_region`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Inpainted,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedImage {
    pub image: Image,
    pub provenance: Vec<Provenance>,
}

impl FusedImage {
    pub fn mask_of(&self, source: Provenance) -> MaskImage {
        let data = self.provenance.iter().map(|&p| p == source).collect();
        MaskImage { height: self.image.height, width: self.image.width, data }
    }
}

/// Copies `m_real` from `original`, inpaints `m_inp` over the composite and
/// takes every other pixel from `synthetic`.
pub fn fuse_region(
    original: &Image,
    synthetic: &Image,
    m_real: &MaskImage,
    m_inp: &MaskImage,
    inpainting: &dyn InpaintingPrior,
) -> Result<FusedImage> {
    if !original.same_shape(synthetic) {
        return Err(Error::Argument("original and synthetic images differ in shape".into()));
    }
    check_mask(original, m_real)?;
    check_mask(original, m_inp)?;
    if !m_real.is_disjoint(m_inp) {
        return Err(Error::Argument("preserved and inpainting masks overlap".into()));
    }
    let mut composite = synthetic.clone();
    let mut provenance = vec![Provenance::Synthetic; original.pixels()];
    for p in 0..original.pixels() {
        if m_real.data[p] {
            composite.pixel_mut(p).copy_from_slice(original.pixel(p));
            provenance[p] = Provenance::Original;
        }
    }
    if !m_inp.is_empty() {
        let filled = inpainting.fill(&composite, m_inp)?;
        if !filled.same_shape(&composite) {
            return Err(Error::Data("inpainting prior changed the image shape".into()));
        }
        for p in 0..original.pixels() {
            if m_inp.data[p] {
                composite.pixel_mut(p).copy_from_slice(filled.pixel(p));
                provenance[p] = Provenance::Inpainted;
            }
        }
    }
    Ok(FusedImage { image: composite, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_basics() {
        let k = gaussian_kernel(0.0, 5).unwrap();
        assert_eq!(k[[2, 2]], 1.0);
        assert_eq!(k.sum(), 1.0);
        assert!(gaussian_kernel(1.0, 4).is_err());
    }

    #[test]
    fn diffusion_fill_leaves_outside_untouched() {
        let img = Image::new(4, 4, (0..48).map(|v| v as f64 / 48.0).collect()).unwrap();
        let hole = MaskImage::from_fn(4, 4, |y, x| (1..3).contains(&y) && (1..3).contains(&x));
        let out = DiffusionInpainter::default().fill(&img, &hole).unwrap();
        for p in 0..16 {
            if !hole.data[p] {
                assert_eq!(out.pixel(p), img.pixel(p));
            }
        }
        let constant = Image::filled(4, 4, [0.3, 0.3, 0.3]);
        let out = DiffusionInpainter::default().fill(&constant, &hole).unwrap();
        assert!(out.data.iter().all(|v| (v - 0.3).abs() < 1e-9));
    }

    #[test]
    fn overlapping_masks_rejected() {
        let img = Image::filled(2, 2, [0.0; 3]);
        let m = MaskImage::from_fn(2, 2, |y, _| y == 0);
        assert!(fuse_region(&img, &img, &m, &m, &IdentityInpainter).is_err());
    }
}
