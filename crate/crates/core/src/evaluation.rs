//! Metrics: region content, mask IoU, landmark offsets, recognition rates
//! and the Fréchet distance between Gaussian feature summaries.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::encoder::{AttributeEncoder, StubEncoder};
use crate::error::{Error, Result};
use crate::image::{Image, MaskImage};

/// PSNR reported for identical regions.
pub const PSNR_CAP: f64 = 99.0;

fn masked_diffs<'a>(a: &'a Image, b: &'a Image, mask: &'a MaskImage) -> Result<impl Iterator<Item = f64> + 'a> {
    if !a.same_shape(b) || a.height != mask.height || a.width != mask.width {
        return Err(Error::Argument("region metric inputs differ in shape".into()));
    }
    if mask.is_empty() {
        return Err(Error::Domain("region metric over an empty mask".into()));
    }
    Ok((0..a.pixels())
        .filter(|&p| mask.data[p])
        .flat_map(move |p| a.pixel(p).iter().zip(b.pixel(p)).map(|(x, y)| (x - y) * 127.5).collect::<Vec<_>>()))
}

/// Mean absolute difference on the 0-255 scale over masked pixels and channels.
pub fn region_l1(a: &Image, b: &Image, mask: &MaskImage) -> Result<f64> {
    let (sum, n) = masked_diffs(a, b, mask)?.fold((0.0, 0usize), |(s, n), d| (s + d.abs(), n + 1));
    Ok(sum / n as f64)
}

/// `10 log10(255^2 / MSE)` over masked pixels, capped at [`PSNR_CAP`].
pub fn region_psnr(a: &Image, b: &Image, mask: &MaskImage) -> Result<f64> {
    let (sum, n) = masked_diffs(a, b, mask)?.fold((0.0, 0usize), |(s, n), d| (s + d * d, n + 1));
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP))
}

/// `|a & b| / |a | b|`, defined as 1 when both are empty.
pub fn mask_iou(a: &MaskImage, b: &MaskImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Argument("IoU masks differ in shape".into()));
    }
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean Euclidean distance between corresponding points.
pub fn mean_landmark_offset(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!("landmark counts differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Argument("no landmarks".into()));
    }
    let total: f64 = a.iter().zip(b).map(|(p, q)| (p.0 - q.0).hypot(p.1 - q.1)).sum();
    Ok(total / a.len() as f64)
}

/// Detects a fixed number of `(x, y)` points.
pub trait LandmarkDetector: Send + Sync {
    fn point_count(&self) -> usize;
    fn detect(&self, image: &Image) -> Result<Vec<(f64, f64)>>;
}

/// Brightness-weighted centroid of each cell of a `grid x grid` partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CentroidLandmarks {
    pub grid: usize,
}

impl LandmarkDetector for CentroidLandmarks {
    fn point_count(&self) -> usize {
        self.grid * self.grid
    }

    fn detect(&self, image: &Image) -> Result<Vec<(f64, f64)>> {
        let g = self.grid;
        if g == 0 || image.height < g || image.width < g {
            return Err(Error::Argument(format!("cannot place a {g}x{g} landmark grid")));
        }
        let mut points = Vec::with_capacity(g * g);
        for cy in 0..g {
            for cx in 0..g {
                let (y0, y1) = (cy * image.height / g, (cy + 1) * image.height / g);
                let (x0, x1) = (cx * image.width / g, (cx + 1) * image.width / g);
                let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let px = image.pixel(y * image.width + x);
                        let wgt = 1e-3 + (px.iter().sum::<f64>() / 3.0 + 1.0) / 2.0;
                        sw += wgt;
                        sx += wgt * (x as f64 + 0.5);
                        sy += wgt * (y as f64 + 0.5);
                    }
                }
                points.push((sx / sw, sy / sw));
            }
        }
        Ok(points)
    }
}

/// Face recognition backend: embeddings compared by cosine distance.
pub trait FaceEmbedder: Send + Sync {
    fn embed(&self, image: &Image) -> Result<Vec<f64>>;
    /// Pairs with cosine distance at or below this value are a match.
    fn match_threshold(&self) -> f64;
}

/// Stub recognizer on top of a frozen stub encoder.
#[derive(Debug, Clone)]
pub struct StubFaceEmbedder {
    pub encoder: StubEncoder,
    pub threshold: f64,
}

impl StubFaceEmbedder {
    pub fn new(seed: u64, size: usize) -> Result<Self> {
        let pooled = if size % 8 == 0 { 8 } else { size };
        Ok(Self { encoder: StubEncoder::new(seed, size, pooled, 32)?, threshold: 0.5 })
    }
}

impl FaceEmbedder for StubFaceEmbedder {
    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        self.encoder.encode(image)
    }

    fn match_threshold(&self) -> f64 {
        self.threshold
    }
}

/// `1 - cos(u, v)`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Argument("embedding lengths differ".into()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine distance of a zero embedding".into()));
    }
    Ok(1.0 - u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv))
}

pub fn embedding_distance(embedder: &dyn FaceEmbedder, a: &Image, b: &Image) -> Result<f64> {
    cosine_distance(&embedder.embed(a)?, &embedder.embed(b)?)
}

/// Counts of recognizer matches over a set of image pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub matched: usize,
    pub total: usize,
}

impl MatchCounts {
    pub fn match_rate(&self) -> f64 {
        self.matched as f64 / self.total as f64
    }

    /// Fraction of pairs the recognizer fails to match.
    pub fn deid_rate(&self) -> f64 {
        1.0 - self.match_rate()
    }
}

pub fn count_matches(pairs: &[(Image, Image)], embedder: &dyn FaceEmbedder) -> Result<MatchCounts> {
    if pairs.is_empty() {
        return Err(Error::Argument("no pairs to evaluate".into()));
    }
    let mut matched = 0;
    for (a, b) in pairs {
        if embedding_distance(embedder, a, b)? <= embedder.match_threshold() {
            matched += 1;
        }
    }
    Ok(MatchCounts { matched, total: pairs.len() })
}

/// Fraction of `(source, anonymized)` pairs not matched by the recognizer.
pub fn deid_rate(pairs: &[(Image, Image)], embedder: &dyn FaceEmbedder) -> Result<f64> {
    Ok(count_matches(pairs, embedder)?.deid_rate())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairConsistency {
    /// Fraction of anonymized pairs matched to each other.
    pub reid_rate: f64,
    /// Mean of `dist(anon_a, anon_b) - dist(in_a, in_b)`.
    pub mean_distance_delta: f64,
}

pub fn pair_consistency(
    anonymized: &[(Image, Image)],
    inputs: &[(Image, Image)],
    embedder: &dyn FaceEmbedder,
) -> Result<PairConsistency> {
    if anonymized.len() != inputs.len() || anonymized.is_empty() {
        return Err(Error::Argument("pair lists must be nonempty and aligned".into()));
    }
    let counts = count_matches(anonymized, embedder)?;
    let mut delta = 0.0;
    for ((aa, ab), (ia, ib)) in anonymized.iter().zip(inputs) {
        delta += embedding_distance(embedder, aa, ab)? - embedding_distance(embedder, ia, ib)?;
    }
    Ok(PairConsistency { reid_rate: counts.match_rate(), mean_distance_delta: delta / inputs.len() as f64 })
}

/// Mean and covariance of a feature distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianSummary {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Argument("covariance does not match the mean dimension".into()));
        }
        Ok(Self { mean, cov })
    }

    /// From a mean and the rows of a square covariance.
    pub fn from_rows(mean: Vec<f64>, cov: &[Vec<f64>]) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(Error::Argument("covariance must be square and match the mean".into()));
        }
        Self::new(DVector::from_vec(mean), DMatrix::from_fn(d, d, |i, j| cov[i][j]))
    }

    /// Sample mean and unbiased covariance of feature rows.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::Argument("need at least two feature vectors".into()));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Argument("feature vectors differ in length".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centred.transpose() * &centred / (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

const PSD_TOLERANCE: f64 = 1e-8;

/// Square root of a symmetric PSD matrix; negative eigenvalues beyond the
/// tolerance are a domain error, smaller ones are clipped to zero.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(bad) = eig.eigenvalues.iter().find(|&&v| v < -PSD_TOLERANCE) {
        return Err(Error::Domain(format!("{what} is not positive semidefinite (eigenvalue {bad})")));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu_p - mu_q|^2 + tr(S_p + S_q - 2 (S_p S_q)^(1/2))`.
pub fn frechet_distance(p: &GaussianSummary, q: &GaussianSummary) -> Result<f64> {
    if p.mean.len() != q.mean.len() {
        return Err(Error::Argument("Gaussian summaries differ in dimension".into()));
    }
    let sp = psd_sqrt(&p.cov, "first covariance")?;
    psd_sqrt(&q.cov, "second covariance")?;
    let qs = (&q.cov + q.cov.transpose()) * 0.5;
    // (S_p S_q)^(1/2) has the same trace as (S_p^(1/2) S_q S_p^(1/2))^(1/2), which is symmetric.
    let inner = &sp * qs * &sp;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner).eigenvalues;
    if let Some(bad) = eig.iter().find(|&&v| v < -PSD_TOLERANCE) {
        return Err(Error::Domain(format!("covariance product has eigenvalue {bad}")));
    }
    let tr_sqrt: f64 = eig.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dmu = (&p.mean - &q.mean).norm_squared();
    let value = dmu + p.cov.trace() + q.cov.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Fréchet distance between two image sets under a frozen feature extractor.
pub fn image_frechet_distance(a: &[Image], b: &[Image], features: &dyn AttributeEncoder) -> Result<f64> {
    let fa = a.iter().map(|i| features.encode(i)).collect::<Result<Vec<_>>>()?;
    let fb = b.iter().map(|i| features.encode(i)).collect::<Result<Vec<_>>>()?;
    frechet_distance(&GaussianSummary::from_features(&fa)?, &GaussianSummary::from_features(&fb)?)
}

/// Named numeric table rendered as aligned CSV or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl MetricTable {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() + 1 != self.columns.len() {
            return Err(Error::Argument("row width does not match the table".into()));
        }
        self.rows.push((label.into(), values));
        Ok(())
    }

    /// Comma-separated with columns padded to a common width.
    pub fn to_csv(&self) -> String {
        let cells: Vec<Vec<String>> = std::iter::once(self.columns.clone())
            .chain(self.rows.iter().map(|(l, v)| {
                std::iter::once(l.clone()).chain(v.iter().map(|x| format!("{x:.4}"))).collect()
            }))
            .collect();
        let widths: Vec<usize> =
            (0..self.columns.len()).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
            out.push_str(&line.join(", "));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn match_and_deid_rates_sum_to_one() {
        for total in 1..=60 {
            for matched in 0..=total {
                let c = MatchCounts { matched, total };
                assert_eq!(c.match_rate() + c.deid_rate(), 1.0);
            }
        }
    }

    #[test]
    fn non_psd_covariance_is_rejected() {
        let p = GaussianSummary::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5])).unwrap();
        let q = GaussianSummary::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(frechet_distance(&p, &q), Err(Error::Domain(_))));
    }

    #[test]
    fn table_csv_is_aligned() {
        let mut t = MetricTable::new(&["component", "l1"]);
        t.push("mouth", vec![0.0]).unwrap();
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0].len(), lines[1].len());
        assert!(t.push("x", vec![]).is_err());
    }
}
