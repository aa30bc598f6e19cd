//! Image, mask and label-map containers plus PNG I/O.
//!
//! Images hold RGB values in `[-1, 1]`; PNG files use the affine map
//! `byte = round((x + 1) / 2 * 255)` and its inverse `x = byte / 255 * 2 - 1`.

use std::fs::File;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Row-major `(y, x, channel)` with three channels.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Argument(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                height * width * 3
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[3 * p..3 * p + 3]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[3 * p..3 * p + 3]
    }

    /// `(pixels, 3)` matrix view used by the differentiable code.
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.pixels(), 3), self.data.clone()).expect("image matrix")
    }

    pub fn from_matrix(height: usize, width: usize, m: &Array2<f64>) -> Result<Self> {
        Self::new(height, width, m.as_standard_layout().iter().copied().collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Quantizes to 8-bit RGB.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_byte(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| from_byte(b)).collect())
    }

    /// Round-trips through 8-bit quantization.
    pub fn quantized(&self) -> Self {
        Self::from_bytes(self.height, self.width, &self.to_bytes()).expect("same shape")
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png(self.width, self.height, png::ColorType::Rgb, png::BitDepth::Eight, &self.to_bytes())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode_png()?)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::Data(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Data(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let buf = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => buf.to_vec(),
            png::ColorType::Rgba => buf.chunks(4).flat_map(|c| [c[0], c[1], c[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|c| [c[0], c[0], c[0]]).collect(),
            other => return Err(Error::Data(format!("unsupported PNG color type {other:?}"))),
        };
        Self::from_bytes(h, w, &rgb)
    }
}

pub fn to_byte(v: f64) -> u8 {
    (((v + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl MaskImage {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Argument(format!("mask has {} values, expected {}", data.len(), height * width)));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|p| f(p / width, p % width)).collect();
        Self { height, width, data }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &MaskImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn zip(&self, other: &MaskImage, f: impl Fn(bool, bool) -> bool) -> MaskImage {
        assert!(self.same_shape(other), "mask shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        MaskImage { height: self.height, width: self.width, data }
    }

    pub fn union(&self, other: &MaskImage) -> MaskImage {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &MaskImage) -> MaskImage {
        self.zip(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &MaskImage) -> MaskImage {
        self.zip(other, |a, b| a && !b)
    }

    pub fn is_disjoint(&self, other: &MaskImage) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !(a && b))
    }

    pub fn is_subset_of(&self, other: &MaskImage) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// 1-bit grayscale PNG, white = set.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let row_bytes = self.width.div_ceil(8);
        let mut packed = vec![0u8; row_bytes * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.data[y * self.width + x] {
                    packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        encode_png(self.width, self.height, png::ColorType::Grayscale, png::BitDepth::One, &packed)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode_png()?)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = Image::decode_png(bytes)?;
        let data = (0..img.pixels()).map(|p| img.pixel(p)[0] > 0.0).collect();
        Self::new(img.height, img.width, data)
    }
}

/// Per-pixel semantic component indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Argument(format!("label map has {} values, expected {}", data.len(), height * width)));
        }
        Ok(Self { height, width, data })
    }

    pub fn mask_of(&self, components: &[usize]) -> MaskImage {
        let data = self.data.iter().map(|&l| components.contains(&(l as usize))).collect();
        MaskImage { height: self.height, width: self.width, data }
    }

    pub fn check_range(&self, components: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= components) {
            Some(bad) => Err(Error::Argument(format!("label {bad} outside 0..{components}"))),
            None => Ok(()),
        }
    }

    /// 8-bit grayscale PNG holding raw label values.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png(self.width, self.height, png::ColorType::Grayscale, png::BitDepth::Eight, &self.data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode_png()?)
    }

    /// Reads raw 8-bit values from a grayscale or indexed PNG (palette not applied).
    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let mut reader = decoder.read_info().map_err(|e| Error::Data(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Data(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        match (info.color_type, info.bit_depth) {
            (png::ColorType::Grayscale | png::ColorType::Indexed, png::BitDepth::Eight) => {
                Self::new(h, w, buf[..w * h].to_vec())
            }
            (png::ColorType::Grayscale | png::ColorType::Indexed, depth) if (depth as u8) < 8 => {
                let bits = depth as usize;
                let row_bytes = (w * bits).div_ceil(8);
                let mask = ((1u16 << bits) - 1) as u8;
                let data = (0..h * w)
                    .map(|p| {
                        let (y, x) = (p / w, p % w);
                        let byte = buf[y * row_bytes + x * bits / 8];
                        let shift = 8 - bits - (x * bits) % 8;
                        (byte >> shift) & mask
                    })
                    .collect();
                Self::new(h, w, data)
            }
            (ct, bd) => Err(Error::Data(format!("label map must be 8-bit indexed or grayscale, got {ct:?}/{bd:?}"))),
        }
    }
}

fn encode_png(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        enc.set_compression(png::Compression::Balanced);
        let mut writer = enc.write_header().map_err(|e| Error::Data(e.to_string()))?;
        writer.write_image_data(data).map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(out)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_map_round_trips_every_level() {
        for b in 0..=255u8 {
            assert_eq!(to_byte(from_byte(b)), b);
        }
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(7.0), 255);
    }

    #[test]
    fn png_round_trips() {
        let img = Image::new(2, 3, (0..18).map(|i| i as f64 / 9.0 - 1.0).collect()).unwrap().quantized();
        assert_eq!(Image::decode_png(&img.encode_png().unwrap()).unwrap(), img);
        let mask = MaskImage::from_fn(5, 11, |y, x| (x + y) % 3 == 0);
        assert_eq!(MaskImage::decode_png(&mask.encode_png().unwrap()).unwrap(), mask);
        let labels = LabelMap::new(2, 2, vec![0, 4, 12, 3]).unwrap();
        assert_eq!(LabelMap::decode_png(&labels.encode_png().unwrap()).unwrap(), labels);
    }

    #[test]
    fn mask_set_algebra() {
        let a = MaskImage::from_fn(4, 4, |y, _| y < 2);
        let b = MaskImage::from_fn(4, 4, |_, x| x < 2);
        assert_eq!(a.union(&b).count(), 12);
        assert_eq!(a.intersection(&b).count(), 4);
        assert!(a.difference(&b).is_disjoint(&b));
        assert!(a.intersection(&b).is_subset_of(&a));
    }
}
