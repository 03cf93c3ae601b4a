//! Evaluation metrics on normalized `[0, 1]` maps, computed in f64.
//!
//! NMSE is `sum (pred - target)^2 / sum target^2`; RMSE is on the normalized
//! scale. Batch metrics are means of the per-map values.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::loss::{gaussian_window, SSIM_C1, SSIM_C2, SSIM_WINDOW};
use crate::real::Real;

pub const PSNR_CAP_DB: f64 = 99.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nmse: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub psnr: f64,
}

impl Metrics {
    pub fn to_key_value(&self) -> String {
        format!(
            "nmse={:.6e}\nrmse={:.6e}\nssim={:.6}\npsnr={:.4}\n",
            self.nmse, self.rmse, self.ssim, self.psnr
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "nmse={:.4e} rmse={:.4e} ssim={:.4} psnr={:.2}",
            self.nmse, self.rmse, self.ssim, self.psnr
        )
    }
}

fn check(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::dim(
            "metrics",
            format!("{} vs {} values", pred.len(), target.len()),
        ));
    }
    Ok(())
}

fn sse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum()
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    Ok(sse(pred, target) / pred.len() as f64)
}

pub fn nmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    let err = sse(pred, target);
    let energy: f64 = target.iter().map(|t| t * t).sum();
    if energy == 0.0 {
        if err == 0.0 {
            return Ok(0.0);
        }
        return Err(Error::Domain(
            "nmse is undefined for an all-zero target with nonzero error".into(),
        ));
    }
    Ok(err / energy)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    Ok(mse(pred, target)?.sqrt())
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(pred: &[f64], target: &[f64]) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?))
}

/// Gaussian-window SSIM of two `h x w` maps, averaged over valid windows.
pub fn ssim_map(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    check(a, b)?;
    if a.len() != h * w {
        return Err(Error::dim(
            "ssim",
            format!("{} values for {h}x{w}", a.len()),
        ));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Domain(format!(
            "ssim needs maps of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (di, gi) in g.iter().enumerate() {
                for (dj, gj) in g.iter().enumerate() {
                    let k = (i + di) * w + j + dj;
                    let wt = gi * gj;
                    let (x, y) = (a[k], b[k]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Metrics of a single `h x w` map.
pub fn map_metrics(pred: &[f64], target: &[f64], h: usize, w: usize) -> Result<Metrics> {
    let m = mse(pred, target)?;
    Ok(Metrics {
        nmse: nmse(pred, target)?,
        rmse: m.sqrt(),
        ssim: ssim_map(pred, target, h, w)?,
        psnr: psnr_from_mse(m),
    })
}

/// Per-map metrics of `[B, 1, H, W]` tensors, averaged over the batch.
pub fn metrics<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Metrics> {
    let (sp, st) = (pred.shape(), target.shape());
    if sp != st || sp.len() != 4 || sp[1] != 1 {
        return Err(Error::dim(
            "metrics",
            format!("{sp:?} vs {st:?}, expected equal [B, 1, H, W]"),
        ));
    }
    let (b, h, w) = (sp[0], sp[2], sp[3]);
    let p: Vec<f64> = pred.data().iter().map(|v| v.as_f64()).collect();
    let t: Vec<f64> = target.data().iter().map(|v| v.as_f64()).collect();
    let mut acc = MetricsAccumulator::default();
    for i in 0..b {
        let span = i * h * w..(i + 1) * h * w;
        acc.push(map_metrics(&p[span.clone()], &t[span], h, w)?);
    }
    acc.mean()
}

/// Running mean of per-map metrics.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    sum: Metrics,
    count: usize,
}

impl MetricsAccumulator {
    pub fn push(&mut self, m: Metrics) {
        self.sum.nmse += m.nmse;
        self.sum.rmse += m.rmse;
        self.sum.ssim += m.ssim;
        self.sum.psnr += m.psnr;
        self.count += 1;
    }

    /// Adds a mean over `n` maps as if each map had been pushed.
    pub fn push_weighted(&mut self, m: Metrics, n: usize) {
        let w = n as f64;
        self.sum.nmse += w * m.nmse;
        self.sum.rmse += w * m.rmse;
        self.sum.ssim += w * m.ssim;
        self.sum.psnr += w * m.psnr;
        self.count += n;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::Domain("no maps to average".into()));
        }
        let n = self.count as f64;
        Ok(Metrics {
            nmse: self.sum.nmse / n,
            rmse: self.sum.rmse / n,
            ssim: self.sum.ssim / n,
            psnr: self.sum.psnr / n,
        })
    }
}
