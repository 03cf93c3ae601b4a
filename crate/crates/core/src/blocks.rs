//! MambaConvBlock: a residual convolution branch and an SS2D branch summed
//! elementwise, plus the multiply-accumulate cost model for the convolutions.

use rand::Rng;

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::init::fan_in_uniform;
use crate::real::Real;
use crate::scan2d::{Mixer, Ss2d, Ss2dBranches};
use crate::ssm::ScanMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvVariant {
    /// `X + pw(gelu(dw(X)))`
    #[default]
    DepthwiseSeparable,
    /// `X + gelu(conv(X))` with one dense `K x K` convolution.
    Standard,
}

impl ConvVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "depthwise_separable" | "ds" | "depthwise" => Ok(ConvVariant::DepthwiseSeparable),
            "standard" | "std" => Ok(ConvVariant::Standard),
            _ => Err(Error::Config(format!(
                "unknown conv variant '{s}' (depthwise_separable|standard)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConvVariant::DepthwiseSeparable => "depthwise_separable",
            ConvVariant::Standard => "standard",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub state_dim: usize,
    pub kernel: usize,
    pub conv_variant: ConvVariant,
    /// Without it the block is the convolution branch alone.
    pub mamba_branch: bool,
    pub gated: bool,
}

impl BlockConfig {
    pub fn new(channels: usize, state_dim: usize) -> Self {
        BlockConfig {
            channels,
            state_dim,
            kernel: 3,
            conv_variant: ConvVariant::default(),
            mamba_branch: true,
            gated: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("block channels must be > 0".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "block kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.mamba_branch && self.state_dim == 0 {
            return Err(Error::Config("state_dim must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum ConvWeights {
    Separable {
        dw_w: ParamId,
        dw_b: ParamId,
        pw_w: ParamId,
        pw_b: ParamId,
    },
    Standard {
        w: ParamId,
        b: ParamId,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualConv {
    channels: usize,
    kernel: usize,
    weights: ConvWeights,
}

impl ResidualConv {
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (c, k) = (cfg.channels, cfg.kernel);
        let weights = match cfg.conv_variant {
            ConvVariant::DepthwiseSeparable => ConvWeights::Separable {
                dw_w: store.insert(
                    format!("{prefix}.dw.weight"),
                    fan_in_uniform(rng, &[c, 1, k, k], k * k)?,
                )?,
                dw_b: store.insert(
                    format!("{prefix}.dw.bias"),
                    fan_in_uniform(rng, &[c], k * k)?,
                )?,
                pw_w: store.insert(
                    format!("{prefix}.pw.weight"),
                    fan_in_uniform(rng, &[c, c, 1, 1], c)?,
                )?,
                pw_b: store.insert(format!("{prefix}.pw.bias"), fan_in_uniform(rng, &[c], c)?)?,
            },
            ConvVariant::Standard => ConvWeights::Standard {
                w: store.insert(
                    format!("{prefix}.conv.weight"),
                    fan_in_uniform(rng, &[c, c, k, k], c * k * k)?,
                )?,
                b: store.insert(
                    format!("{prefix}.conv.bias"),
                    fan_in_uniform(rng, &[c], c * k * k)?,
                )?,
            },
        };
        Ok(ResidualConv {
            channels: c,
            kernel: k,
            weights,
        })
    }

    pub fn param_count(&self) -> usize {
        let (c, k) = (self.channels, self.kernel);
        match self.weights {
            ConvWeights::Separable { .. } => c * k * k + c + c * c + c,
            ConvWeights::Standard { .. } => c * c * k * k + c,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self.weights {
            ConvWeights::Separable {
                dw_w,
                dw_b,
                pw_w,
                pw_b,
            } => vec![dw_w, dw_b, pw_w, pw_b],
            ConvWeights::Standard { w, b } => vec![w, b],
        }
    }

    /// The residual function `F_conv(X)`, without the skip.
    pub fn residual<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::dim(
                "residual_conv_block",
                format!("input {s:?} for {} channels", self.channels),
            ));
        }
        let pad = self.kernel / 2;
        match self.weights {
            ConvWeights::Separable {
                dw_w,
                dw_b,
                pw_w,
                pw_b,
            } => {
                let d = tape.conv2d(
                    x,
                    bound.get(dw_w),
                    Some(bound.get(dw_b)),
                    1,
                    pad,
                    self.channels,
                )?;
                let a = tape.gelu(d)?;
                tape.conv2d(a, bound.get(pw_w), Some(bound.get(pw_b)), 1, 0, 1)
            }
            ConvWeights::Standard { w, b } => {
                let y = tape.conv2d(x, bound.get(w), Some(bound.get(b)), 1, pad, 1)?;
                tape.gelu(y)
            }
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let f = self.residual(tape, bound, x)?;
        tape.add(x, f)
    }
}

/// Which branch output to replace by zero before fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Ablation {
    #[default]
    None,
    /// Drop `F_conv`, keeping the identity skip: `Y = X + X_mamba`.
    ConvResidual,
    /// Drop the SS2D output: `Y = Y_conv`.
    Mamba,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockBranches {
    pub conv: Var,
    pub mamba: Option<Ss2dBranches>,
    pub out: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MambaConvBlock {
    pub conv: ResidualConv,
    pub ss2d: Option<Ss2d>,
}

impl MambaConvBlock {
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = ResidualConv::init(store, &format!("{prefix}.conv"), cfg, rng)?;
        let ss2d = if cfg.mamba_branch {
            Some(Ss2d::init(
                store,
                &format!("{prefix}.ss2d"),
                cfg.channels,
                cfg.state_dim,
                cfg.gated,
                rng,
            )?)
        } else {
            None
        };
        Ok(MambaConvBlock { conv, ss2d })
    }

    /// A block whose SS2D branch uses `mixer`; mainly for the identity stub.
    pub fn with_mixer<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BlockConfig,
        mixer: Mixer,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = ResidualConv::init(store, &format!("{prefix}.conv"), cfg, rng)?;
        let ss2d = Ss2d::with_mixer(store, &format!("{prefix}.ss2d"), cfg.channels, mixer)?;
        Ok(MambaConvBlock {
            conv,
            ss2d: Some(ss2d),
        })
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.ss2d.as_ref().map_or(0, Ss2d::param_count)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        Ok(self
            .forward_branches(tape, bound, x, mode, Ablation::None)?
            .out)
    }

    pub fn forward_branches<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mode: ScanMode,
        ablation: Ablation,
    ) -> Result<BlockBranches> {
        let conv = if ablation == Ablation::ConvResidual {
            x
        } else {
            self.conv.forward(tape, bound, x)?
        };
        let mamba = match &self.ss2d {
            Some(s) => Some(s.forward_branches(tape, bound, x, mode)?),
            None => None,
        };
        let out = match mamba {
            Some(m) if ablation != Ablation::Mamba => tape.add(conv, m.out)?,
            _ => conv,
        };
        Ok(BlockBranches { conv, mamba, out })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MacCost {
    pub cost_std: u64,
    pub cost_dw: u64,
    pub cost_pw: u64,
    /// `(cost_dw + cost_pw) / cost_std = 1/C_out + 1/K^2`
    pub ratio: f64,
}

pub fn mac_cost(c_in: usize, c_out: usize, k: usize, h: usize, w: usize) -> Result<MacCost> {
    if [c_in, c_out, k, h, w].contains(&0) {
        return Err(Error::Domain(format!(
            "mac_cost needs positive arguments, got C_in={c_in} C_out={c_out} K={k} H={h} W={w}"
        )));
    }
    let (ci, co, k, plane) = (c_in as u64, c_out as u64, k as u64, (h * w) as u64);
    let cost_std = plane * ci * co * k * k;
    let cost_dw = plane * ci * k * k;
    let cost_pw = plane * ci * co;
    Ok(MacCost {
        cost_std,
        cost_dw,
        cost_pw,
        ratio: (cost_dw + cost_pw) as f64 / cost_std as f64,
    })
}

/// Applies the residual convolution branch alone to a concrete map.
pub fn residual_conv_block<T: Real>(
    store: &ParamStore<T>,
    conv: &ResidualConv,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = tape.bind(store);
    let xv = tape.leaf(x);
    let y = conv.forward(&mut tape, &bound, xv)?;
    Ok(tape.tensor(y))
}

/// Applies a full block to a concrete map.
pub fn mamba_conv_block<T: Real>(
    store: &ParamStore<T>,
    block: &MambaConvBlock,
    x: &Tensor<T>,
    mode: ScanMode,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = tape.bind(store);
    let xv = tape.leaf(x);
    let y = block.forward(&mut tape, &bound, xv, mode)?;
    Ok(tape.tensor(y))
}
