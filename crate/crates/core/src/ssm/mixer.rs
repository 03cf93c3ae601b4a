//! Input-dependent SSM parameters: `delta = softplus(u W_delta + b_delta)`,
//! `B = u W_B`, `C = u W_C`, with a fixed diagonal `A` and learnable skip `D`.

use rand::Rng;

use super::selective::{a_ladder, ScanMode};
use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::init::fan_in_uniform;
use crate::real::Real;

/// Initial timestep produced by the delta bias, `softplus(b_delta)`.
pub const DELTA_BIAS_TARGET: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveParams {
    pub channels: usize,
    pub state_dim: usize,
    /// `[channels, state_dim]`, strictly negative, input independent.
    pub a: Vec<f64>,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub d: ParamId,
}

impl SelectiveParams {
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || state_dim == 0 {
            return Err(Error::Config(format!(
                "selective scan needs channels and state > 0, got {channels}, {state_dim}"
            )));
        }
        let bias = DELTA_BIAS_TARGET.exp_m1().ln();
        Ok(SelectiveParams {
            channels,
            state_dim,
            a: a_ladder(channels, state_dim),
            w_delta: store.insert(
                format!("{prefix}.delta.weight"),
                fan_in_uniform(rng, &[channels, channels], channels)?,
            )?,
            b_delta: store.insert(
                format!("{prefix}.delta.bias"),
                Tensor::full(&[channels], T::lit(bias))?,
            )?,
            w_b: store.insert(
                format!("{prefix}.b_proj.weight"),
                fan_in_uniform(rng, &[channels, state_dim], channels)?,
            )?,
            w_c: store.insert(
                format!("{prefix}.c_proj.weight"),
                fan_in_uniform(rng, &[channels, state_dim], channels)?,
            )?,
            d: store.insert(format!("{prefix}.d"), Tensor::full(&[channels], T::one())?)?,
        })
    }

    pub fn param_count(&self) -> usize {
        let (c, n) = (self.channels, self.state_dim);
        c * c + c + 2 * c * n + c
    }

    /// `(delta, B, C)` for `u: [B, L, C]`.
    pub fn project<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        u: Var,
    ) -> Result<(Var, Var, Var)> {
        let s = tape.shape(u);
        if s.len() != 3 || s[2] != self.channels {
            return Err(Error::dim(
                "selective_parameters",
                format!("input {s:?} for {} channels", self.channels),
            ));
        }
        let pre = tape.linear(u, bound.get(self.w_delta), Some(bound.get(self.b_delta)))?;
        let delta = tape.softplus(pre)?;
        let b = tape.linear(u, bound.get(self.w_b), None)?;
        let c = tape.linear(u, bound.get(self.w_c), None)?;
        Ok((delta, b, c))
    }

    pub fn scan<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        u: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        let (delta, b, c) = self.project(tape, bound, u)?;
        self.scan_projected(tape, bound, [u, delta, b, c], mode)
    }

    /// Scan of already projected `[u, delta, B, C]`.
    pub fn scan_projected<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        inputs: [Var; 4],
        mode: ScanMode,
    ) -> Result<Var> {
        let [u, delta, b, c] = inputs;
        let a: Vec<T> = self.a.iter().map(|&v| T::lit(v)).collect();
        tape.selective_scan(u, delta, b, c, bound.get(self.d), &a, mode)
    }
}

pub fn selective_parameters<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    u: Var,
    p: &SelectiveParams,
) -> Result<(Var, Var, Var)> {
    p.project(tape, bound, u)
}
