//! Image similarity: MSE, SSIM and PSNR.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport<S> {
    pub mse: S,
    pub ssim: S,
    /// `None` when the images are identical.
    pub psnr: Option<S>,
}

impl<S: Scalar> MetricReport<S> {
    /// All metrics at unit dynamic range.
    pub fn compare(a: &Image<S>, b: &Image<S>) -> Result<Self> {
        let mse = mse(a, b)?;
        let ssim = ssim(a, b, S::one())?;
        let p = psnr(a, b, S::one())?;
        Ok(Self {
            mse,
            ssim,
            psnr: p.is_finite().then_some(p),
        })
    }
}

fn check(op: &'static str, a: &Image<impl Scalar>, b: &Image<impl Scalar>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse<S: Scalar>(a: &Image<S>, b: &Image<S>) -> Result<S> {
    check("mse", a, b)?;
    let n = S::lit(a.data().len() as f64);
    let total: S = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(total / n)
}

/// Peak signal-to-noise ratio in dB; infinite for identical images.
pub fn psnr<S: Scalar>(a: &Image<S>, b: &Image<S>, range: S) -> Result<S> {
    let m = mse(a, b)?;
    if m == S::zero() {
        return Ok(S::infinity());
    }
    Ok(S::lit(10.0) * (range * range / m).log10())
}

/// Normalised window weights, `rows x cols` row-major.
fn window(h: usize, w: usize) -> (usize, usize, Vec<f64>) {
    if h >= WINDOW && w >= WINDOW {
        let half = (WINDOW / 2) as f64;
        let g: Vec<f64> = (0..WINDOW)
            .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
            .collect();
        let mut k: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        (WINDOW, WINDOW, k)
    } else {
        let (wh, ww) = (h.min(WINDOW), w.min(WINDOW));
        let n = (wh * ww) as f64;
        (wh, ww, vec![1.0 / n; wh * ww])
    }
}

/// Mean structural similarity: 11x11 Gaussian window (sigma 1.5), valid
/// positions only, per channel then averaged. Images narrower than the
/// window use a uniform window as large as the image allows.
pub fn ssim<S: Scalar>(a: &Image<S>, b: &Image<S>, range: S) -> Result<S> {
    check("ssim", a, b)?;
    let (h, w, ch) = a.dims();
    let (wh, ww, k) = window(h, w);
    let l = range.to_f64_lossy();
    let c1 = (K1 * l).powi(2);
    let c2 = (K2 * l).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        for y0 in 0..=(h - wh) {
            for x0 in 0..=(w - ww) {
                let (mut ma, mut mb) = (0.0, 0.0);
                for dy in 0..wh {
                    for dx in 0..ww {
                        let wt = k[dy * ww + dx];
                        ma += wt * a.get(y0 + dy, x0 + dx, c).to_f64_lossy();
                        mb += wt * b.get(y0 + dy, x0 + dx, c).to_f64_lossy();
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..wh {
                    for dx in 0..ww {
                        let wt = k[dy * ww + dx];
                        let da = a.get(y0 + dy, x0 + dx, c).to_f64_lossy() - ma;
                        let db = b.get(y0 + dy, x0 + dx, c).to_f64_lossy() - mb;
                        va += wt * da * da;
                        vb += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(S::lit(total / count as f64))
}
