//! Image perturbations for the robustness benchmark and whole-dataset
//! materialisation.
//!
//! Every random draw comes from [`SeededRng`]; frame `i` of sequence `id`
//! uses the sub-seed `derive_seed([seed, fnv1a(id), i])`, so output does not
//! depend on processing order.

use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{copy_file, load_dataset, write_image, ANNOTATIONS_DIR, FRAMES_DIR};
use crate::error::{Result, VosError};
use crate::layers::reflect101;
use crate::rng::{derive_seed, fnv1a, SeededRng};
use crate::tensor::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    Identity,
    GaussianNoise { sigma: f64 },
    SaltPepper { points: usize },
    GaussianBlur { kernel: usize },
}

impl Perturbation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Perturbation::GaussianNoise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => Err(VosError::arg(
                format!("noise sigma {sigma} must be finite and non-negative"),
            )),
            Perturbation::GaussianBlur { kernel } if kernel < 3 || kernel % 2 == 0 => Err(VosError::arg(format!(
                "blur kernel {kernel} must be odd and at least 3"
            ))),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, x: &Image, seed: u64) -> Result<Image> {
        self.validate()?;
        match *self {
            Perturbation::Identity => Ok(x.clone()),
            Perturbation::GaussianNoise { sigma } => Ok(gaussian_noise(x, sigma, seed)),
            Perturbation::SaltPepper { points } => Ok(salt_pepper(x, points, seed)),
            Perturbation::GaussianBlur { kernel } => gaussian_blur(x, kernel, None),
        }
    }

    /// Short machine-friendly name, e.g. `gaussian_noise_10`.
    pub fn label(&self) -> String {
        match *self {
            Perturbation::Identity => "identity".into(),
            Perturbation::GaussianNoise { sigma } => format!("gaussian_noise_{sigma}"),
            Perturbation::SaltPepper { points } => format!("salt_pepper_{points}"),
            Perturbation::GaussianBlur { kernel } => format!("gaussian_blur_{kernel}"),
        }
    }

    /// The six perturbations of the benchmark.
    pub fn benchmark_suite() -> [Perturbation; 6] {
        [
            Perturbation::GaussianNoise { sigma: 10.0 },
            Perturbation::GaussianNoise { sigma: 30.0 },
            Perturbation::SaltPepper { points: 1000 },
            Perturbation::SaltPepper { points: 5000 },
            Perturbation::GaussianBlur { kernel: 7 },
            Perturbation::GaussianBlur { kernel: 9 },
        ]
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    #[serde(flatten)]
    pub kind: Perturbation,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(kind: Perturbation, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub fn frame_seed(&self, sequence: &str, frame: usize) -> u64 {
        derive_seed(&[self.seed, fnv1a(sequence.as_bytes()), frame as u64])
    }

    /// Perturbs every frame of one sequence.
    pub fn apply_sequence(&self, sequence: &str, frames: &[Image]) -> Result<Vec<Image>> {
        frames
            .par_iter()
            .enumerate()
            .map(|(i, x)| self.kind.apply(x, self.frame_seed(sequence, i)))
            .collect()
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    // f64::round rounds half away from zero
    v.round().clamp(0.0, 255.0) as u8
}

/// The `n` normal draws `gaussian_noise` adds, before rounding and clamping.
pub fn noise_field(n: usize, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = SeededRng::new(seed);
    (0..n).map(|_| sigma * rng.normal()).collect()
}

pub fn gaussian_noise(x: &Image, sigma: f64, seed: u64) -> Image {
    if sigma == 0.0 {
        return x.clone();
    }
    let noise = noise_field(x.data().len(), sigma, seed);
    let data = x.data().iter().zip(&noise).map(|(&v, e)| to_u8(v as f64 + e)).collect();
    Image::new(x.height(), x.width(), data).expect("same geometry")
}

/// Flat pixel indices of `min(n, H*W)` distinct locations, in selection order.
pub fn salt_pepper_locations(pixels: usize, n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let m = n.min(pixels);
    let mut idx: Vec<usize> = (0..pixels).collect();
    for i in 0..m {
        let j = i + rng.below((pixels - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx
}

pub fn salt_pepper(x: &Image, n: usize, seed: u64) -> Image {
    let mut out = x.clone();
    if n == 0 {
        return out;
    }
    let mut rng = SeededRng::new(seed);
    let w = x.width();
    let locations = salt_pepper_locations(x.height() * w, n, &mut rng);
    for p in locations {
        let v = if rng.coin() { 255 } else { 0 };
        out.set_pixel(p / w, p % w, [v; 3]);
    }
    out
}

pub fn default_blur_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Vec<f64> {
    let c = (k as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..k)
        .map(|j| (-(j as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable blur, horizontal then vertical, reflect-101 borders.
pub fn gaussian_blur(x: &Image, k: usize, sigma: Option<f64>) -> Result<Image> {
    Perturbation::GaussianBlur { kernel: k }.validate()?;
    let sigma = match sigma {
        None => default_blur_sigma(k),
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(VosError::arg(format!("blur sigma {s} must be positive"))),
    };
    let g = gaussian_kernel(k, sigma);
    let r = (k / 2) as isize;
    let (h, w) = (x.height(), x.width());
    let src = x.data();
    let mut horiz = vec![0f64; h * w * 3];
    horiz.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for xx in 0..w {
            for c in 0..3 {
                let mut s = 0.0;
                for (j, gj) in g.iter().enumerate() {
                    let sx = reflect101(xx as isize + j as isize - r, w);
                    s += gj * src[(y * w + sx) * 3 + c] as f64;
                }
                row[xx * 3 + c] = s;
            }
        }
    });
    let mut out = vec![0u8; h * w * 3];
    out.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for xx in 0..w {
            for c in 0..3 {
                let mut s = 0.0;
                for (j, gj) in g.iter().enumerate() {
                    let sy = reflect101(y as isize + j as isize - r, h);
                    s += gj * horiz[(sy * w + xx) * 3 + c];
                }
                row[xx * 3 + c] = to_u8(s);
            }
        }
    });
    Image::new(h, w, out)
}

/// Writes the perturbed copy of the dataset at `root` to `out`. Frames are
/// re-encoded as PNG except under the identity perturbation, which copies
/// files byte for byte. Annotations are copied unchanged.
pub fn perturb_dataset(root: &Path, spec: &PerturbationSpec, out: &Path) -> Result<()> {
    spec.kind.validate()?;
    let records = load_dataset(root)?;
    for rec in &records {
        let frame_dir = out.join(FRAMES_DIR).join(&rec.id);
        (0..rec.len()).into_par_iter().try_for_each(|i| -> Result<()> {
            let src = &rec.frames[i];
            if spec.kind == Perturbation::Identity {
                let name = src.file_name().expect("listed files have names");
                return copy_file(src, &frame_dir.join(name));
            }
            let img = crate::dataset::read_image(src)?;
            let noisy = spec.kind.apply(&img, spec.frame_seed(&rec.id, i))?;
            write_image(&frame_dir.join(format!("{}.png", rec.stems[i])), &noisy)
        })?;
        let ann_src = root.join(ANNOTATIONS_DIR).join(&rec.id);
        let ann_dst = out.join(ANNOTATIONS_DIR).join(&rec.id);
        fs::create_dir_all(&ann_dst).map_err(|e| VosError::io(&ann_dst, e))?;
        for entry in fs::read_dir(&ann_src).map_err(|e| VosError::io(&ann_src, e))? {
            let p = entry.map_err(|e| VosError::io(&ann_src, e))?.path();
            if p.is_file() {
                copy_file(&p, &ann_dst.join(p.file_name().expect("file")))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut r = SeededRng::new(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| r.below(256) as u8).collect()).unwrap()
    }

    #[test]
    fn zero_strength_is_identity() {
        let x = random_image(9, 11, 1);
        assert_eq!(gaussian_noise(&x, 0.0, 3), x);
        assert_eq!(salt_pepper(&x, 0, 3), x);
        assert_eq!(Perturbation::Identity.apply(&x, 0).unwrap(), x);
    }

    #[test]
    fn noise_statistics() {
        let gray = Image::filled(256, 256, [128; 3]);
        let field = noise_field(gray.data().len(), 10.0, 42);
        let n = field.len() as f64;
        let mean = field.iter().sum::<f64>() / n;
        let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((9.8..=10.2).contains(&std), "std {std}");
        assert!((-0.1..=0.1).contains(&mean), "mean {mean}");

        let out = gaussian_noise(&gray, 10.0, 42);
        let d: Vec<f64> = out.data().iter().map(|&v| v as f64 - 128.0).collect();
        let m = d.iter().sum::<f64>() / n;
        let s = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!((s - 10.0).abs() < 0.2, "{s}");
        assert_eq!(out, gaussian_noise(&gray, 10.0, 42));
        assert_ne!(out, gaussian_noise(&gray, 10.0, 43));
    }

    #[test]
    fn salt_pepper_changes_exactly_n_pixels() {
        let gray = Image::filled(64, 80, [128; 3]);
        let out = salt_pepper(&gray, 1000, 7);
        let mut changed = 0;
        let mut white = 0;
        for y in 0..64 {
            for x in 0..80 {
                let p = out.pixel(y, x);
                if p != [128; 3] {
                    changed += 1;
                    assert!(p == [0; 3] || p == [255; 3]);
                    white += (p == [255; 3]) as usize;
                }
            }
        }
        assert_eq!(changed, 1000);
        assert!((400..600).contains(&white));
        let all = salt_pepper(&Image::filled(5, 5, [128; 3]), 100, 1);
        assert!(all.data().chunks(3).all(|p| p == [0; 3] || p == [255; 3]));
    }

    #[test]
    fn default_sigmas() {
        assert!((default_blur_sigma(7) - 1.4).abs() < 1e-12);
        assert!((default_blur_sigma(9) - 1.7).abs() < 1e-12);
        assert!(gaussian_blur(&Image::filled(4, 4, [0; 3]), 6, None).is_err());
        assert!(gaussian_blur(&Image::filled(4, 4, [0; 3]), 1, None).is_err());
    }

    #[test]
    fn blur_of_constant_is_constant() {
        for k in [3, 7, 9] {
            let x = Image::filled(10, 13, [17, 200, 255]);
            assert_eq!(gaussian_blur(&x, k, None).unwrap(), x);
        }
    }

    #[test]
    fn blur_impulse_matches_outer_product() {
        let mut x = Image::filled(21, 21, [0; 3]);
        x.set_pixel(10, 10, [255; 3]);
        let out = gaussian_blur(&x, 7, None).unwrap();
        let g = gaussian_kernel(7, 1.4);
        for dy in -4isize..=4 {
            for dx in -4isize..=4 {
                let want = if dy.abs() <= 3 && dx.abs() <= 3 {
                    255.0 * g[(dy + 3) as usize] * g[(dx + 3) as usize]
                } else {
                    0.0
                };
                let got = out.pixel((10 + dy) as usize, (10 + dx) as usize);
                assert_eq!(got, [want.round() as u8; 3], "offset ({dy},{dx})");
            }
        }
        assert_eq!(out.pixel(10, 10)[0], (255.0 * g[3] * g[3]).round() as u8);
    }

    #[test]
    fn frame_seeds_depend_on_sequence_and_index() {
        let s = PerturbationSpec::new(Perturbation::SaltPepper { points: 5 }, 9);
        assert_ne!(s.frame_seed("a", 0), s.frame_seed("a", 1));
        assert_ne!(s.frame_seed("a", 0), s.frame_seed("b", 0));
        assert_eq!(s.frame_seed("a", 3), s.frame_seed("a", 3));
    }

    #[test]
    fn spec_serde() {
        let s = PerturbationSpec::new(Perturbation::GaussianBlur { kernel: 7 }, 3);
        let text = toml::to_string(&s).unwrap();
        assert_eq!(toml::from_str::<PerturbationSpec>(&text).unwrap(), s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn blur_keeps_mean_intensity(seed in any::<u64>(), h in 64usize..128, w in 64usize..128, k in prop::sample::select(vec![3usize, 7, 9])) {
            let x = random_image(h, w, seed);
            let y = gaussian_blur(&x, k, None).unwrap();
            let mean = |i: &Image| i.data().iter().map(|&v| v as f64).sum::<f64>() / i.data().len() as f64;
            prop_assert!((mean(&x) - mean(&y)).abs() <= 0.5);
        }

        #[test]
        fn perturbations_keep_geometry(seed in any::<u64>(), h in 1usize..12, w in 1usize..12, n in 0usize..200) {
            let x = random_image(h, w, seed);
            for p in [
                Perturbation::GaussianNoise { sigma: 30.0 },
                Perturbation::SaltPepper { points: n },
                Perturbation::GaussianBlur { kernel: 9 },
            ] {
                let y = p.apply(&x, seed).unwrap();
                prop_assert_eq!((y.height(), y.width()), (h, w));
            }
        }
    }
}
