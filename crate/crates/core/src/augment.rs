//! Label-preserving feature augmentations for the weak and strong views.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentKind {
    Weak,
    Strong,
}

/// Augmentations for square-ish grayscale images stored row-major in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageAugment {
    pub width: usize,
    pub height: usize,
    pub weak_shift: usize,
    pub strong_shift: usize,
    pub cutout: usize,
    pub noise_sigma: f64,
}

impl ImageAugment {
    pub fn mnist() -> Self {
        ImageAugment {
            width: 28,
            height: 28,
            weak_shift: 2,
            strong_shift: 4,
            cutout: 8,
            noise_sigma: 0.1,
        }
    }
}

/// Gaussian jitter for plain feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorAugment {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
}

impl Default for VectorAugment {
    fn default() -> Self {
        VectorAugment {
            weak_sigma: 0.05,
            strong_sigma: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AugmentPolicy {
    Identity,
    Image(ImageAugment),
    Vector(VectorAugment),
}

impl AugmentPolicy {
    pub fn apply<R: Rng + ?Sized>(&self, kind: AugmentKind, x: &[f64], rng: &mut R) -> Vec<f64> {
        match self {
            AugmentPolicy::Identity => x.to_vec(),
            AugmentPolicy::Vector(v) => {
                let sigma = match kind {
                    AugmentKind::Weak => v.weak_sigma,
                    AugmentKind::Strong => v.strong_sigma,
                };
                jitter(x, sigma, rng)
            }
            AugmentPolicy::Image(img) => {
                assert_eq!(x.len(), img.width * img.height, "image size mismatch");
                match kind {
                    AugmentKind::Weak => shift(x, img, img.weak_shift, rng),
                    AugmentKind::Strong => {
                        let mut out = shift(x, img, img.strong_shift, rng);
                        cutout(&mut out, img, rng);
                        if img.noise_sigma > 0.0 {
                            let normal = Normal::new(0.0, img.noise_sigma).expect("sigma >= 0");
                            for v in out.iter_mut() {
                                *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
                            }
                        }
                        out
                    }
                }
            }
        }
    }

    /// Augments each row independently into a `[rows × d]` matrix.
    pub fn batch<'a, R, I>(&self, kind: AugmentKind, rows: I, dim: usize, rng: &mut R) -> Array2<f64>
    where
        R: Rng + ?Sized,
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut flat = Vec::new();
        let mut count = 0;
        for row in rows {
            flat.extend(self.apply(kind, row, rng));
            count += 1;
        }
        Array2::from_shape_vec((count, dim), flat).expect("rows share the feature dimension")
    }
}

fn jitter<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma <= 0.0 {
        return x.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma > 0");
    x.iter().map(|&v| v + normal.sample(rng)).collect()
}

/// Integer translation by up to `radius` pixels per axis, zero fill.
fn shift<R: Rng + ?Sized>(x: &[f64], img: &ImageAugment, radius: usize, rng: &mut R) -> Vec<f64> {
    if radius == 0 {
        return x.to_vec();
    }
    let r = radius as i64;
    let dx = rng.random_range(-r..=r) as isize;
    let dy = rng.random_range(-r..=r) as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    let mut out = vec![0.0; x.len()];
    for y in 0..h {
        let sy = y - dy;
        if !(0..h).contains(&sy) {
            continue;
        }
        for xx in 0..w {
            let sx = xx - dx;
            if (0..w).contains(&sx) {
                out[(y * w + xx) as usize] = x[(sy * w + sx) as usize];
            }
        }
    }
    out
}

/// Zeroes one `cutout × cutout` square centred at a random pixel (clipped).
fn cutout<R: Rng + ?Sized>(x: &mut [f64], img: &ImageAugment, rng: &mut R) {
    if img.cutout == 0 {
        return;
    }
    let cy = rng.random_range(0..img.height) as isize;
    let cx = rng.random_range(0..img.width) as isize;
    let half = (img.cutout / 2) as isize;
    let (y0, x0) = (cy - half, cx - half);
    for y in y0.max(0)..(y0 + img.cutout as isize).min(img.height as isize) {
        for xx in x0.max(0)..(x0 + img.cutout as isize).min(img.width as isize) {
            x[(y as usize) * img.width + xx as usize] = 0.0;
        }
    }
}
