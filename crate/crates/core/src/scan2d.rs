//! SS2D: channel layer norm, raster flattening, a forward and a reversed
//! selective scan through one shared operator, summed and folded back to 2D.

use rand::Rng;

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::init::fan_in_uniform;
use crate::real::Real;
use crate::ssm::{ScanMode, SelectiveParams};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// A `[B, C, H, W]` tensor whose plane flattens to a sequence of length `H*W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    tensor: Tensor<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.shape().len() != 4 {
            return Err(Error::dim(
                "feature_map",
                format!("expected [B, C, H, W], got {:?}", tensor.shape()),
            ));
        }
        Ok(FeatureMap { tensor })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.tensor.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn seq_len(&self) -> usize {
        let (_, _, h, w) = self.dims();
        h * w
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }
}

/// `[B, C, H, W] -> [B, H*W, C]` with sequence index `i*W + j`.
pub fn raster_flatten<T: Real>(x: &FeatureMap<T>) -> Tensor<T> {
    let (b, c, h, w) = x.dims();
    let src = x.tensor.data();
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for ch in 0..c {
            for k in 0..h * w {
                out[(bi * h * w + k) * c + ch] = src[(bi * c + ch) * h * w + k];
            }
        }
    }
    Tensor::new(&[b, h * w, c], out).expect("flattened shape is valid")
}

pub fn raster_unflatten<T: Real>(seq: &Tensor<T>, h: usize, w: usize) -> Result<FeatureMap<T>> {
    let s = seq.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::dim(
            "raster_unflatten",
            format!("sequence {s:?} cannot fill a {h}x{w} map"),
        ));
    }
    let (b, l, c) = (s[0], s[1], s[2]);
    let src = seq.data();
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for k in 0..l {
            for ch in 0..c {
                out[(bi * c + ch) * l + k] = src[(bi * l + k) * c + ch];
            }
        }
    }
    FeatureMap::new(Tensor::new(&[b, c, h, w], out)?)
}

/// The sequence operator `M`: input projection, selective scan, output
/// projection. With `gated`, the scan output is multiplied by `silu(x W_z + b_z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaOperator {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub scan: SelectiveParams,
    pub gate: Option<(ParamId, ParamId)>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl MambaOperator {
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state_dim: usize,
        gated: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let c = channels;
        let in_w = store.insert(
            format!("{prefix}.in_proj.weight"),
            fan_in_uniform(rng, &[c, c], c)?,
        )?;
        let in_b = store.insert(
            format!("{prefix}.in_proj.bias"),
            fan_in_uniform(rng, &[c], c)?,
        )?;
        let scan = SelectiveParams::init(store, &format!("{prefix}.scan"), c, state_dim, rng)?;
        let gate = if gated {
            Some((
                store.insert(
                    format!("{prefix}.gate.weight"),
                    fan_in_uniform(rng, &[c, c], c)?,
                )?,
                store.insert(format!("{prefix}.gate.bias"), fan_in_uniform(rng, &[c], c)?)?,
            ))
        } else {
            None
        };
        let out_w = store.insert(
            format!("{prefix}.out_proj.weight"),
            fan_in_uniform(rng, &[c, c], c)?,
        )?;
        let out_b = store.insert(
            format!("{prefix}.out_proj.bias"),
            fan_in_uniform(rng, &[c], c)?,
        )?;
        Ok(MambaOperator {
            in_w,
            in_b,
            scan,
            gate,
            out_w,
            out_b,
        })
    }

    pub fn param_count(&self) -> usize {
        let c = self.scan.channels;
        let proj = 2 * (c * c + c);
        proj + self.scan.param_count() + if self.gate.is_some() { c * c + c } else { 0 }
    }

    /// `x: [B, L, C] -> [B, L, C]`.
    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        let u = tape.linear(x, bound.get(self.in_w), Some(bound.get(self.in_b)))?;
        let mut y = self.scan.scan(tape, bound, u, mode)?;
        if let Some((gw, gb)) = self.gate {
            let z = tape.linear(x, bound.get(gw), Some(bound.get(gb)))?;
            let s = tape.sigmoid(z)?;
            let silu = tape.mul(z, s)?;
            y = tape.mul(y, silu)?;
        }
        tape.linear(y, bound.get(self.out_w), Some(bound.get(self.out_b)))
    }

    /// `(M(x), R(M(R(x))))`. The projections act per position, so they are
    /// evaluated once and reversed instead of being recomputed on `R(x)`.
    pub fn apply_bidirectional<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mode: ScanMode,
    ) -> Result<(Var, Var)> {
        let u = tape.linear(x, bound.get(self.in_w), Some(bound.get(self.in_b)))?;
        let (delta, b, c) = self.scan.project(tape, bound, u)?;
        let mut yf = self
            .scan
            .scan_projected(tape, bound, [u, delta, b, c], mode)?;
        let mut rev = [u, delta, b, c];
        for v in &mut rev {
            *v = tape.reverse_sequence(*v)?;
        }
        let yr = self.scan.scan_projected(tape, bound, rev, mode)?;
        let mut yb = tape.reverse_sequence(yr)?;
        if let Some((gw, gb)) = self.gate {
            let z = tape.linear(x, bound.get(gw), Some(bound.get(gb)))?;
            let s = tape.sigmoid(z)?;
            let silu = tape.mul(z, s)?;
            yf = tape.mul(yf, silu)?;
            yb = tape.mul(yb, silu)?;
        }
        let forward = tape.linear(yf, bound.get(self.out_w), Some(bound.get(self.out_b)))?;
        let backward = tape.linear(yb, bound.get(self.out_w), Some(bound.get(self.out_b)))?;
        Ok((forward, backward))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer {
    /// Returns the sequence unchanged; used to isolate the plumbing in tests.
    Identity,
    Selective(MambaOperator),
}

impl Mixer {
    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        match self {
            Mixer::Identity => Ok(x),
            Mixer::Selective(op) => op.apply(tape, bound, x, mode),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Mixer::Identity => 0,
            Mixer::Selective(op) => op.param_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ss2d {
    pub channels: usize,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub mixer: Mixer,
}

/// Intermediate values of one SS2D evaluation, all `[B, L, C]` except `out`.
#[derive(Clone, Copy, Debug)]
pub struct Ss2dBranches {
    pub normed: Var,
    pub forward: Var,
    pub backward: Var,
    pub out: Var,
}

impl Ss2d {
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state_dim: usize,
        gated: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let op = MambaOperator::init(
            store,
            &format!("{prefix}.mamba"),
            channels,
            state_dim,
            gated,
            rng,
        )?;
        Self::with_mixer(store, prefix, channels, Mixer::Selective(op))
    }

    pub fn with_mixer<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        mixer: Mixer,
    ) -> Result<Self> {
        Ok(Ss2d {
            channels,
            norm_gain: store.insert(
                format!("{prefix}.norm.gain"),
                Tensor::full(&[channels], T::one())?,
            )?,
            norm_bias: store.insert(format!("{prefix}.norm.bias"), Tensor::zeros(&[channels])?)?,
            mixer,
        })
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels + self.mixer.param_count()
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        Ok(self.forward_branches(tape, bound, x, mode)?.out)
    }

    pub fn forward_branches<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mode: ScanMode,
    ) -> Result<Ss2dBranches> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::dim(
                "ss2d",
                format!("input {s:?} for {} channels", self.channels),
            ));
        }
        let (h, w) = (s[2], s[3]);
        let seq = tape.raster_flatten(x)?;
        let normed = tape.layernorm(
            seq,
            bound.get(self.norm_gain),
            bound.get(self.norm_bias),
            T::lit(LAYERNORM_EPS),
        )?;
        let (forward, backward) = match &self.mixer {
            Mixer::Selective(op) => op.apply_bidirectional(tape, bound, normed, mode)?,
            Mixer::Identity => (normed, normed),
        };
        let sum = tape.add(forward, backward)?;
        let out = tape.raster_unflatten(sum, h, w)?;
        Ok(Ss2dBranches {
            normed,
            forward,
            backward,
            out,
        })
    }
}
