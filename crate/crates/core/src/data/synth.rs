use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::tensor::{Rng, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// A Gaussian spot whose position depends on the class.
    Blobs,
    /// A line through the centre whose orientation depends on the class.
    Bars,
    /// A centred ring whose radius depends on the class.
    Rings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    /// Standard deviation of additive pixel noise before clipping.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            kind: SynthKind::Bars,
            n: 500,
            height: 8,
            width: 8,
            n_classes: 2,
            noise: 0.05,
            seed: 0,
        }
    }
}

fn render(kind: SynthKind, class: usize, n_classes: usize, h: usize, w: usize, noise: f64, rng: &mut Rng) -> Vec<f64> {
    let (hc, wc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let scale = h.min(w) as f64;
    let frac = class as f64 / n_classes as f64;
    let jitter = |rng: &mut Rng, s: f64| s * rng.normal();
    let mut img = vec![0.0; h * w];
    match kind {
        SynthKind::Blobs => {
            let angle = 2.0 * PI * frac;
            let r = if n_classes == 1 { 0.0 } else { 0.28 * scale };
            let cy = hc + r * angle.sin() + jitter(rng, 0.04 * scale);
            let cx = wc + r * angle.cos() + jitter(rng, 0.04 * scale);
            let s = 0.14 * scale * (1.0 + 0.1 * rng.normal()).max(0.5);
            for i in 0..h {
                for j in 0..w {
                    let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                    img[i * w + j] = (-d2 / (2.0 * s * s)).exp();
                }
            }
        }
        SynthKind::Bars => {
            let angle = PI * frac + jitter(rng, 0.05);
            let (sa, ca) = angle.sin_cos();
            let offset = jitter(rng, 0.05 * scale);
            let half_width = 0.09 * scale * (1.0 + 0.1 * rng.normal()).max(0.5);
            for i in 0..h {
                for j in 0..w {
                    // distance to the line through the centre along (cos, sin)
                    let (y, x) = (i as f64 - hc, j as f64 - wc);
                    let dist = (x * sa - y * ca - offset).abs();
                    img[i * w + j] = (-(dist / half_width).powi(2)).exp();
                }
            }
        }
        SynthKind::Rings => {
            let r = scale * (0.12 + 0.3 * (class as f64 + 0.5) / n_classes as f64) + jitter(rng, 0.02 * scale);
            let width = 0.07 * scale;
            for i in 0..h {
                for j in 0..w {
                    let rho = ((i as f64 - hc).powi(2) + (j as f64 - wc).powi(2)).sqrt();
                    img[i * w + j] = (-((rho - r) / width).powi(2)).exp();
                }
            }
        }
    }
    for p in &mut img {
        *p = (*p + noise * rng.normal()).clamp(0.0, 1.0);
    }
    img
}

/// Labelled toy images with balanced, shuffled classes.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.n_classes == 0 || spec.n_classes > 256 {
        return Err(Error::invalid(format!("n_classes must lie in 1..=256, got {}", spec.n_classes)));
    }
    if spec.n < spec.n_classes {
        return Err(Error::invalid(format!("{} images cannot cover {} classes", spec.n, spec.n_classes)));
    }
    if spec.height < 2 || spec.width < 2 {
        return Err(Error::invalid("synthetic images must be at least 2×2"));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::invalid("noise must be ≥ 0"));
    }
    let mut rng = Rng::new(spec.seed);
    let mut labels: Vec<u8> = (0..spec.n).map(|i| (i % spec.n_classes) as u8).collect();
    rng.shuffle(&mut labels);
    let (h, w) = (spec.height, spec.width);
    let mut data = Vec::with_capacity(spec.n * h * w);
    for &c in &labels {
        data.extend(render(spec.kind, c as usize, spec.n_classes, h, w, spec.noise, &mut rng));
    }
    Dataset::new(Tensor::new(vec![spec.n, h, w], data)?, Some(labels), Split::Full)
}
