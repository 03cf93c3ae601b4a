//! Composite training loss `w1 L1 + w2 MSE + w3 (1 - SSIM) + w4 GradL1` on
//! `[B, 1, H, W]` maps.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub mse: f64,
    pub ssim: f64,
    pub grad: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 0.4,
            mse: 0.1,
            ssim: 0.2,
            grad: 0.3,
        }
    }
}

impl LossWeights {
    /// The reduced `L1 + MSE` objective used for the loss ablation.
    pub fn l1_mse() -> Self {
        LossWeights {
            l1: 0.5,
            mse: 0.5,
            ssim: 0.0,
            grad: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.l1, self.mse, self.ssim, self.grad];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {w:?}"
            )));
        }
        Ok(())
    }

    /// Weighted sum of already evaluated components.
    pub fn combine(&self, l1: f64, mse: f64, ssim_loss: f64, grad: f64) -> f64 {
        self.l1 * l1 + self.mse * mse + self.ssim * ssim_loss + self.grad * grad
    }
}

/// Scalar loss terms on the tape. `ssim` holds `1 - SSIM`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l1: Var,
    pub mse: Var,
    pub ssim: Var,
    pub grad: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub mse: f64,
    pub ssim: f64,
    pub grad: f64,
}

impl LossVars {
    pub fn read<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |x: Var| tape.value(x)[0].as_f64();
        LossBreakdown {
            total: v(self.total),
            l1: v(self.l1),
            mse: v(self.mse),
            ssim: v(self.ssim),
            grad: v(self.grad),
        }
    }
}

fn check_pair<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb || sa.len() != 4 || sa[1] != 1 {
        return Err(Error::dim(
            op,
            format!("{sa:?} vs {sb:?}, expected equal [B, 1, H, W]"),
        ));
    }
    Ok(())
}

pub fn composite_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    w: &LossWeights,
) -> Result<LossVars> {
    w.validate()?;
    check_pair(tape, "composite_loss", pred, target)?;
    let diff = tape.sub(pred, target)?;
    let ad = tape.abs(diff)?;
    let l1 = tape.mean(ad)?;
    let sq = tape.square(diff)?;
    let mse = tape.mean(sq)?;
    let s = ssim(tape, pred, target)?;
    let neg = tape.neg(s)?;
    let ssim_loss = tape.add_scalar(neg, T::one())?;
    let grad = sobel_of_difference(tape, diff)?;
    let mut total = tape.scale(l1, T::lit(w.l1))?;
    for (v, wi) in [(mse, w.mse), (ssim_loss, w.ssim), (grad, w.grad)] {
        let t = tape.scale(v, T::lit(wi))?;
        total = tape.add(total, t)?;
    }
    Ok(LossVars {
        total,
        l1,
        mse,
        ssim: ssim_loss,
        grad,
    })
}

/// Evaluates the loss on concrete maps without keeping a graph around.
pub fn composite_loss_value<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = tape.leaf(pred);
    let t = tape.leaf(target);
    Ok(composite_loss(&mut tape, p, t, w)?.read(&tape))
}

/// Normalized 1D Gaussian of length [`SSIM_WINDOW`].
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all valid windows and batch items.
pub fn ssim<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    check_pair(tape, "ssim", a, b)?;
    let s = tape.shape(a);
    if s[2] < SSIM_WINDOW || s[3] < SSIM_WINDOW {
        return Err(Error::Domain(format!(
            "ssim needs maps of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            s[2], s[3]
        )));
    }
    let g = gaussian_window();
    let kernel: Vec<T> = g
        .iter()
        .flat_map(|&u| g.iter().map(move |&v| T::lit(u * v)))
        .collect();
    let k = tape.constant(&[1, 1, SSIM_WINDOW, SSIM_WINDOW], kernel)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let [mu_a, mu_b, e_aa, e_bb, e_ab] =
        [a, b, aa, bb, ab].map(|x| tape.conv2d(x, k, None, 1, 0, 1));
    let (mu_a, mu_b) = (mu_a?, mu_b?);
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa?, mu_aa)?;
    let var_b = tape.sub(e_bb?, mu_bb)?;
    let cov = tape.sub(e_ab?, mu_ab)?;
    let (c1, c2) = (T::lit(SSIM_C1), T::lit(SSIM_C2));
    let two = T::lit(2.0);
    let n1 = tape.scale(mu_ab, two)?;
    let n1 = tape.add_scalar(n1, c1)?;
    let n2 = tape.scale(cov, two)?;
    let n2 = tape.add_scalar(n2, c2)?;
    let d1 = tape.add(mu_aa, mu_bb)?;
    let d1 = tape.add_scalar(d1, c1)?;
    let d2 = tape.add(var_a, var_b)?;
    let d2 = tape.add_scalar(d2, c2)?;
    let num = tape.mul(n1, n2)?;
    let den = tape.mul(d1, d2)?;
    let map = tape.div(num, den)?;
    tape.mean(map)
}

/// `x` and `y` Sobel kernels as a `[2, 1, 3, 3]` weight.
pub fn sobel_kernels() -> [f64; 18] {
    [
        -1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0, //
        -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0,
    ]
}

/// Mean absolute Sobel difference, averaged over every pixel of both
/// directions, so the divisor is `2 * B * H * W`. Borders use reflect padding.
pub fn sobel_gradient_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, "sobel_gradient_loss", pred, target)?;
    let diff = tape.sub(pred, target)?;
    sobel_of_difference(tape, diff)
}

// The filter is linear, so filtering the difference equals differencing the filtered maps.
fn sobel_of_difference<T: Real>(tape: &mut Tape<T>, diff: Var) -> Result<Var> {
    let k = tape.constant(
        &[2, 1, 3, 3],
        sobel_kernels().iter().map(|&v| T::lit(v)).collect(),
    )?;
    let padded = tape.reflect_pad(diff, 1)?;
    let g = tape.conv2d(padded, k, None, 1, 0, 1)?;
    let a = tape.abs(g)?;
    tape.mean(a)
}
