//! Datasets: procedurally rendered multi-scale patterns, IDX image files, and
//! the Gaussian-blur degradation applied to test splits.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, ScanError};
use crate::scale_space::{default_radius, scale_space_rep};
use crate::tensor::DenseArray;

/// Number of distinct synthetic pattern families.
pub const SYNTHETIC_CLASSES: usize = 5;

/// Largest blur radius used for degradation.
const MAX_BLUR_RADIUS: usize = 12;

/// Pixel values are rounded to multiples of this step (8-bit grid over [−1, 1]).
pub const QUANT_STEP: f64 = 1.0 / 127.5;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetKind {
    SyntheticBlobs,
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Blur {
    None,
    /// Per-image `t_blur` drawn uniformly from `[t_min, t_max]`.
    Gaussian { t_min: f64, t_max: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Side length of the square images.
    pub size: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Range of the pattern's inner scale (in pixels).
    pub scale_min: f64,
    pub scale_max: f64,
    pub blur: Blur,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SyntheticBlobs,
            classes: 4,
            train_samples: 1024,
            test_samples: 512,
            size: 16,
            noise: 0.05,
            scale_min: 1.0,
            scale_max: 2.5,
            blur: Blur::None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `n × 1 × size × size`.
    pub images: DenseArray,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    /// Test split after blur degradation (a copy of `test` when blur is off).
    pub test_blurred: Split,
    pub classes: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ScanError::Dataset(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if matches!(self.kind, DatasetKind::SyntheticBlobs) && self.classes > SYNTHETIC_CLASSES {
            return bad(format!(
                "synthetic data has {SYNTHETIC_CLASSES} pattern classes, {} requested",
                self.classes
            ));
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return bad("sample counts must be positive".into());
        }
        if self.size < 8 {
            return bad(format!("image size must be at least 8, got {}", self.size));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return bad(format!(
                "pattern scale range [{}, {}] is invalid",
                self.scale_min, self.scale_max
            ));
        }
        if let Blur::Gaussian { t_min, t_max } = self.blur {
            if !(t_min >= 0.0 && t_min <= t_max && t_max.is_finite()) {
                return bad(format!("blur range [{t_min}, {t_max}] is invalid"));
            }
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let (train, test) = match &self.kind {
            DatasetKind::SyntheticBlobs => (
                render_split(self, self.train_samples, 0)?,
                render_split(self, self.test_samples, 1)?,
            ),
            DatasetKind::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => (
                load_idx_split(train_images, train_labels, self.train_samples, self.classes)?,
                load_idx_split(test_images, test_labels, self.test_samples, self.classes)?,
            ),
        };
        let test_blurred = match self.blur {
            Blur::None => test.clone(),
            Blur::Gaussian { t_min, t_max } => blur_split(&test, t_min, t_max, self.seed)?,
        };
        Ok(Dataset {
            train,
            test,
            test_blurred,
            classes: self.classes,
        })
    }
}

/// Blurs every image with `g(·; t)`, `t` drawn per image from `[t_min, t_max]`.
///
/// An image whose draw is exactly 0 is copied unchanged.
pub fn blur_split(split: &Split, t_min: f64, t_max: f64, seed: u64) -> Result<Split> {
    if !(t_min >= 0.0 && t_min <= t_max && t_max.is_finite()) {
        return Err(ScanError::Dataset(format!("blur range [{t_min}, {t_max}] is invalid")));
    }
    let [n, c, h, w] = split.images.dims4()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let plane = c * h * w;
    let mut out = Vec::with_capacity(split.images.len());
    for i in 0..n {
        let t = if t_max > t_min { rng.random_range(t_min..=t_max) } else { t_min };
        let img = DenseArray::from_vec(&[1, c, h, w], split.images.data()[i * plane..(i + 1) * plane].to_vec())?;
        let blurred = scale_space_rep(&img, t, default_radius(t, MAX_BLUR_RADIUS))?;
        out.extend_from_slice(blurred.data());
    }
    Ok(Split {
        images: DenseArray::from_vec(split.images.shape(), out)?,
        labels: split.labels.clone(),
    })
}

fn render_split(spec: &DatasetSpec, count: usize, stream: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE))
        .map_err(|e| ScanError::Dataset(format!("noise distribution: {e}")))?;
    let s = spec.size;
    let mut images = Vec::with_capacity(count * s * s);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % spec.classes;
        let pattern = Pattern::sample(class, spec, &mut rng);
        for y in 0..s {
            for x in 0..s {
                let mut v = pattern.value(x as f64, y as f64);
                if spec.noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                images.push(quantize(v));
            }
        }
        labels.push(class);
    }
    Ok(Split {
        images: DenseArray::from_vec(&[count, 1, s, s], images)?,
        labels,
    })
}

/// Clamps to [−1, 1] and rounds onto the 8-bit grid `k / 127.5 − 1`, `k ∈ 0..=255`
/// (ties away from zero in `k`).
pub fn quantize(v: f64) -> f64 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() / 127.5 - 1.0
}

/// One rendered pattern: intensity in [−1, 1], background −1.
#[derive(Clone, Copy, Debug)]
struct Pattern {
    class: usize,
    cx: f64,
    cy: f64,
    scale: f64,
    /// Unit direction of the pattern's main axis.
    ux: f64,
    uy: f64,
    /// Class-specific extra parameter (grating wavelength, ring radius, bar length).
    extra: f64,
}

impl Pattern {
    fn sample(class: usize, spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Self {
        let s = spec.size as f64;
        let margin = s / 4.0;
        let cx = rng.random_range(margin..s - 1.0 - margin);
        let cy = rng.random_range(margin..s - 1.0 - margin);
        let scale = if spec.scale_max > spec.scale_min {
            rng.random_range(spec.scale_min..=spec.scale_max)
        } else {
            spec.scale_min
        };
        let angle = rng.random_range(0.0..PI);
        let extra = match class {
            2 => rng.random_range(6.0..=12.0),
            3 => rng.random_range(2.5..=s / 4.0),
            4 => rng.random_range(s / 4.0..=s / 2.5),
            _ => 0.0,
        };
        Self {
            class,
            cx,
            cy,
            scale,
            ux: angle.cos(),
            uy: angle.sin(),
            extra,
        }
    }

    fn value(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        // along / across the main axis
        let a = dx * self.ux + dy * self.uy;
        let b = -dx * self.uy + dy * self.ux;
        let r2 = dx * dx + dy * dy;
        let s2 = self.scale * self.scale;
        let v = match self.class {
            // isotropic blob
            0 => (-r2 / (2.0 * s2)).exp(),
            // straight step edge through the center, smoothed over the scale
            1 => 0.5 * (1.0 + (b / self.scale).tanh()),
            // grating under a Gaussian envelope
            2 => {
                let env = (-r2 / (2.0 * (3.0 * self.scale).powi(2))).exp();
                env * 0.5 * (1.0 + (2.0 * PI * a / self.extra).cos())
            }
            // ring
            3 => {
                let d = r2.sqrt() - self.extra;
                (-d * d / (2.0 * s2)).exp()
            }
            // finite bar
            4 => {
                let across = (-b * b / (2.0 * s2)).exp();
                let half = self.extra / 2.0;
                let over = (a.abs() - half).max(0.0);
                across * (-over * over / (2.0 * s2)).exp()
            }
            _ => unreachable!("class checked against SYNTHETIC_CLASSES"),
        };
        2.0 * v - 1.0
    }
}

/// Reads an IDX image/label file pair (unsigned-byte payloads).
///
/// Pixels map to `v / 127.5 − 1`; at most `limit` samples are kept.
pub fn load_idx_split(images: &PathBuf, labels: &PathBuf, limit: usize, classes: usize) -> Result<Split> {
    let img = std::fs::read(images)?;
    let lab = std::fs::read(labels)?;
    let (img_dims, img_data) = parse_idx(&img, 3, images)?;
    let (lab_dims, lab_data) = parse_idx(&lab, 1, labels)?;
    let (n, h, w) = (img_dims[0], img_dims[1], img_dims[2]);
    if lab_dims[0] != n {
        return Err(ScanError::Dataset(format!(
            "{} holds {n} images but {} holds {} labels",
            images.display(),
            labels.display(),
            lab_dims[0]
        )));
    }
    let keep = n.min(limit);
    let labels: Vec<usize> = lab_data[..keep].iter().map(|&l| l as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(ScanError::Dataset(format!("label {bad} outside 0..{classes}")));
    }
    let pixels = img_data[..keep * h * w].iter().map(|&p| p as f64 / 127.5 - 1.0).collect();
    Ok(Split {
        images: DenseArray::from_vec(&[keep, 1, h, w], pixels)?,
        labels,
    })
}

fn parse_idx<'a>(bytes: &'a [u8], rank: usize, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let fail = |m: &str| ScanError::Dataset(format!("{}: {m}", path.display()));
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(fail("not an IDX file"));
    }
    if bytes[2] != 0x08 {
        return Err(fail("only unsigned-byte IDX payloads are supported"));
    }
    if bytes[3] as usize != rank {
        return Err(fail(&format!("expected rank {rank}, file has rank {}", bytes[3])));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(fail("truncated header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() < header + count {
        return Err(fail(&format!("payload truncated: {} of {count} bytes", bytes.len() - header)));
    }
    Ok((dims, &bytes[header..header + count]))
}
