use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, Tensor};

/// Quality metrics of one edit or one averaged grid cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub accuracy: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub csim: f64,
}

/// Formats a PSNR value for CSV, writing `inf` for identical images.
pub fn format_psnr(p: f64) -> String {
    if p.is_infinite() {
        "inf".to_string()
    } else {
        format!("{p:.6}")
    }
}

fn same_shape(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(())
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64)
}

/// `10·log10(max²/mse)`, `+inf` when `mse = 0`.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

pub fn psnr(x: &Tensor, y: &Tensor, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?, max_val))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            data_range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully contained Gaussian windows of an
/// `height × width` single-channel image.
pub fn ssim(x: &Tensor, y: &Tensor, height: usize, width: usize, cfg: &SsimConfig) -> Result<f64> {
    same_shape(x, y)?;
    if x.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {height}x{width} image",
            x.len()
        )));
    }
    if cfg.window == 0 || cfg.window > height || cfg.window > width {
        return Err(Error::Window {
            window: cfg.window,
            extent: height.min(width),
        });
    }
    let k = gaussian_window(cfg.window, cfg.sigma);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let (xd, yd) = (x.data(), y.data());
    let n = cfg.window;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=height - n {
        for c0 in 0..=width - n {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let w = k[i] * k[j];
                    let p = (r0 + i) * width + c0 + j;
                    let (a, b) = (xd[p], yd[p]);
                    mx += w * a;
                    my += w * b;
                    sxx += w * (a * a);
                    syy += w * (b * b);
                    sxy += w * (a * b);
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            let num = (2.0 * (mx * my) + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Cosine similarity of two identity embeddings.
pub fn csim(embed_a: &Tensor, embed_b: &Tensor) -> Result<f64> {
    cosine_similarity(embed_a, embed_b)
}

/// Mean of the finite entries, `+inf` when every entry is infinite.
pub fn mean_psnr(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}
