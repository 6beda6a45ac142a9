use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitleak_core::Image;

use crate::error::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Independent uniform pixels.
    Noise,
    /// Diagonal ramp from 0 at the top-left corner to 1 at the bottom-right.
    GradientRamp,
    /// `(x + y) mod 2`.
    Checker,
    /// One to three Gaussian bumps with random centers, widths and heights.
    Blobs,
}

impl FromStr for SyntheticKind {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s.trim() {
            "noise" => Ok(Self::Noise),
            "gradient-ramp" => Ok(Self::GradientRamp),
            "checker" => Ok(Self::Checker),
            "blobs" => Ok(Self::Blobs),
            other => Err(HarnessError::Usage(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Noise => "noise",
            Self::GradientRamp => "gradient-ramp",
            Self::Checker => "checker",
            Self::Blobs => "blobs",
        })
    }
}

/// Square grayscale image in `[0, 1]`, fully determined by its arguments.
pub fn synthetic_image(seed: u64, size: usize, kind: SyntheticKind) -> Result<Image, HarnessError> {
    if size < 2 {
        return Err(HarnessError::Usage(format!("synthetic image size must be at least 2, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let mut img = Image::filled(size, size, 1, 0.0);
    match kind {
        SyntheticKind::Noise => img.data_mut().iter_mut().for_each(|v| *v = rng.random()),
        SyntheticKind::GradientRamp => {
            for y in 0..size {
                for x in 0..size {
                    img.set(y, x, 0, (x + y) as f64 / (2.0 * (n - 1.0)));
                }
            }
        }
        SyntheticKind::Checker => {
            for y in 0..size {
                for x in 0..size {
                    img.set(y, x, 0, ((x + y) % 2) as f64);
                }
            }
        }
        SyntheticKind::Blobs => {
            let k = rng.random_range(1..=3);
            // (center y, center x, sigma, amplitude)
            let bumps: Vec<(f64, f64, f64, f64)> = (0..k)
                .map(|_| {
                    (
                        rng.random::<f64>() * n,
                        rng.random::<f64>() * n,
                        1.5 + 3.0 * rng.random::<f64>(),
                        0.5 + 0.5 * rng.random::<f64>(),
                    )
                })
                .collect();
            for y in 0..size {
                for x in 0..size {
                    let v: f64 = bumps
                        .iter()
                        .map(|&(cy, cx, s, a)| {
                            a * (-((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * s * s)).exp()
                        })
                        .sum();
                    img.set(y, x, 0, v.min(1.0));
                }
            }
        }
    }
    Ok(img)
}
