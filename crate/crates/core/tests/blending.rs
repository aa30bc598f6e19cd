use rand::Rng;
use semanon::blending::*;
use semanon::image::{Image, MaskImage};
use semanon::rng;

fn oracle_weight(sigma: f64, dy: i64, dx: i64, r: i64) -> f64 {
    let mut z = 0.0;
    for y in -r..=r {
        for x in -r..=r {
            z += (-((y * y + x * x) as f64) / (2.0 * sigma * sigma)).exp();
        }
    }
    (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp() / z
}

/// Nested-loop blur with replicate padding, thresholded and minus the real mask.
fn oracle_blend(real: &MaskImage, syn: &MaskImage, sigma: f64, size: usize, eta: f64) -> MaskImage {
    let (h, w, r) = (real.height as i64, real.width as i64, (size / 2) as i64);
    let at = |m: &MaskImage, y: i64, x: i64| m.data[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    MaskImage::from_fn(real.height, real.width, |y, x| {
        let (y, x) = (y as i64, x as i64);
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                if at(real, y + dy, x + dx) || at(syn, y + dy, x + dx) {
                    acc += oracle_weight(sigma, dy, dx, r);
                }
            }
        }
        acc > eta && !at(real, y, x)
    })
}

fn rect(n: usize, y0: usize, x0: usize, side: usize) -> MaskImage {
    MaskImage::from_fn(n, n, |y, x| (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x))
}

fn random_mask(r: &mut rng::Rng, n: usize, p: f64) -> MaskImage {
    let data = (0..n * n).map(|_| r.random::<f64>() < p).collect();
    MaskImage::new(n, n, data).unwrap()
}

#[test]
fn kernel_shapes() {
    let delta = gaussian_kernel(0.0, 7).unwrap();
    assert_eq!(delta.sum(), 1.0);
    assert_eq!(delta[[3, 3]], 1.0);
    let mut r = rng::seeded(3);
    for _ in 0..20 {
        let sigma = 0.05 + 5.0 * r.random::<f64>();
        let k = gaussian_kernel(sigma, 9).unwrap();
        assert!((k.sum() - 1.0).abs() < 1e-12);
        assert_eq!(k[[1, 2]], k[[2, 1]]);
    }
    let k = gaussian_kernel(1.0, 5).unwrap();
    for y in 0..5 {
        for x in 0..5 {
            let expected = oracle_weight(1.0, y as i64 - 2, x as i64 - 2, 2);
            assert!((k[[y, x]] - expected).abs() < 1e-15);
        }
    }
    assert!(gaussian_kernel(-1.0, 5).is_err());
}

#[test]
fn blend_mask_degenerate_cases() {
    let config = BlendConfig { sigma: 0.0, kernel_size: 5, threshold: 0.1 };
    let m = rect(8, 2, 2, 3);
    assert!(blend_mask(&m, &m, &config).unwrap().is_empty());
    let e = MaskImage::empty(8, 8);
    assert!(blend_mask(&e, &e, &BlendConfig::default()).unwrap().is_empty());
    let syn = rect(8, 3, 3, 4);
    assert_eq!(blend_mask(&m, &syn, &config).unwrap(), syn.difference(&m));
    assert!(blend_mask(&m, &MaskImage::empty(8, 9), &config).is_err());
    assert!(blend_mask(&m, &syn, &BlendConfig { threshold: 1.0, ..config }).is_err());
}

#[test]
fn blend_mask_matches_nested_loop_oracle() {
    let real = rect(8, 1, 1, 2);
    let syn = rect(8, 4, 4, 3);
    let config = BlendConfig { sigma: 1.0, kernel_size: 5, threshold: 0.1 };
    let got = blend_mask(&real, &syn, &config).unwrap();
    assert_eq!(got, oracle_blend(&real, &syn, 1.0, 5, 0.1));
    assert!(got.count() > syn.count());

    let mut r = rng::seeded(4);
    for _ in 0..20 {
        let (real, syn) = (random_mask(&mut r, 12, 0.1), random_mask(&mut r, 12, 0.2));
        let sigma = 0.3 + 2.0 * r.random::<f64>();
        let eta = 0.05 + 0.9 * r.random::<f64>();
        let config = BlendConfig { sigma, kernel_size: 7, threshold: eta };
        let got = blend_mask(&real, &syn, &config).unwrap();
        assert_eq!(got, oracle_blend(&real, &syn, sigma, 7, eta));
        assert!(got.is_disjoint(&real));
    }
}

#[test]
fn blend_mask_is_monotone() {
    let mut r = rng::seeded(5);
    for _ in 0..20 {
        let real = random_mask(&mut r, 10, 0.1);
        let syn = random_mask(&mut r, 10, 0.15);
        let bigger = syn.union(&random_mask(&mut r, 10, 0.1));
        let config = BlendConfig { sigma: 1.5, kernel_size: 5, threshold: 0.3 };
        let base = blend_mask(&real, &syn, &config).unwrap();
        assert!(base.is_subset_of(&blend_mask(&real, &bigger, &config).unwrap()));
        let strict = blend_mask(&real, &syn, &BlendConfig { threshold: 0.6, ..config }).unwrap();
        assert!(strict.is_subset_of(&base));
    }
}

fn images(r: &mut rng::Rng, n: usize) -> (Image, Image) {
    let mut draw = || Image::new(n, n, (0..n * n * 3).map(|_| 2.0 * r.random::<f64>() - 1.0).collect()).unwrap();
    (draw(), draw())
}

#[test]
fn fusion_with_empty_masks_is_synthetic() {
    let mut r = rng::seeded(6);
    let (orig, syn) = images(&mut r, 8);
    let e = MaskImage::empty(8, 8);
    let fused = fuse_region(&orig, &syn, &e, &e, &DiffusionInpainter::default()).unwrap();
    assert_eq!(fused.image, syn);
    assert_eq!(fused.mask_of(Provenance::Synthetic).count(), 64);
}

#[test]
fn fusion_copies_preserved_pixels_and_partitions_provenance() {
    let mut r = rng::seeded(7);
    for _ in 0..10 {
        let (orig, syn) = images(&mut r, 16);
        let real = random_mask(&mut r, 16, 0.2);
        let m_inp = blend_mask(&real, &random_mask(&mut r, 16, 0.2), &BlendConfig::for_resolution(16)).unwrap();
        let fused = fuse_region(&orig, &syn, &real, &m_inp, &DiffusionInpainter::default()).unwrap();
        for p in 0..256 {
            if real.data[p] {
                assert_eq!(fused.image.pixel(p), orig.pixel(p));
            } else if !m_inp.data[p] {
                assert_eq!(fused.image.pixel(p), syn.pixel(p));
            }
        }
        let parts = [Provenance::Original, Provenance::Inpainted, Provenance::Synthetic].map(|s| fused.mask_of(s));
        assert_eq!(parts[0], real);
        assert_eq!(parts[1], m_inp);
        assert_eq!(parts.iter().map(MaskImage::count).sum::<usize>(), 256);
        assert!(parts[0].is_disjoint(&parts[1]) && parts[1].is_disjoint(&parts[2]) && parts[0].is_disjoint(&parts[2]));
    }
}

#[test]
fn overlapping_masks_are_rejected() {
    let mut r = rng::seeded(8);
    let (orig, syn) = images(&mut r, 8);
    let a = rect(8, 0, 0, 4);
    let b = rect(8, 3, 3, 4);
    assert!(fuse_region(&orig, &syn, &a, &b, &IdentityInpainter).is_err());
    assert!(fuse_region(&orig, &syn, &a, &MaskImage::empty(4, 4), &IdentityInpainter).is_err());
}
