//! Encoder, bottleneck and decoder of MambaConvBlocks with skip connections.
//!
//! Parameter names, for `s` in `0..stages` and `j` in `0..depth`:
//!
//! ```text
//! stem.{weight,bias}
//! enc{s}.block{j}.conv.{dw,pw,conv}.{weight,bias}
//! enc{s}.block{j}.ss2d.norm.{gain,bias}
//! enc{s}.block{j}.ss2d.mamba.{in_proj,out_proj,gate}.{weight,bias}
//! enc{s}.block{j}.ss2d.mamba.scan.{delta.weight,delta.bias,b_proj.weight,c_proj.weight,d}
//! down{s}.{weight,bias}
//! bottleneck.block{j}.*
//! up{s}.{weight,bias}
//! dec{s}.fuse.{weight,bias}
//! dec{s}.block{j}.*
//! head.{weight,bias}
//! ```

use std::collections::BTreeMap;

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::blocks::{BlockConfig, ConvVariant, MambaConvBlock};
use crate::error::{Error, Result};
use crate::init::fan_in_uniform;
use crate::kv::{join_list, parse_bool, parse_list, parse_value};
use crate::real::Real;
use crate::rng::{stream, Stream};
use crate::ssm::ScanMode;

/// Smallest spatial extent allowed at the bottleneck.
pub const MIN_BOTTLENECK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub base_channels: usize,
    /// Blocks per encoder stage, mirrored in the decoder. Its length is the
    /// number of resolution halvings.
    pub stage_depths: Vec<usize>,
    pub bottleneck_depth: usize,
    pub grid: usize,
    pub state_dim: usize,
    pub conv_variant: ConvVariant,
    pub mamba_branch: bool,
    pub gated: bool,
    pub scan_mode: ScanMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 2,
            base_channels: 16,
            stage_depths: vec![2, 2, 2],
            bottleneck_depth: 2,
            grid: 64,
            state_dim: 8,
            conv_variant: ConvVariant::DepthwiseSeparable,
            mamba_branch: true,
            gated: false,
            scan_mode: ScanMode::Sequential,
        }
    }
}

impl ModelConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_depths.len()
    }

    /// Channel width at encoder stage `s`; `s == num_stages` is the bottleneck.
    pub fn width(&self, s: usize) -> usize {
        self.base_channels << s
    }

    pub fn bottleneck_size(&self) -> usize {
        self.grid >> self.num_stages()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_channels == 0 {
            return fail("input_channels must be > 0".into());
        }
        if self.base_channels == 0 {
            return fail("base_channels must be > 0".into());
        }
        if self.stage_depths.is_empty() {
            return fail("stage_depths must list at least one stage".into());
        }
        if self.num_stages() > 16 {
            return fail(format!("{} stages is too many", self.num_stages()));
        }
        if !self.grid.is_power_of_two() {
            return fail(format!("grid must be a power of two, got {}", self.grid));
        }
        if self.grid >> self.num_stages() < MIN_BOTTLENECK {
            return fail(format!(
                "grid / 2^stages must be >= {MIN_BOTTLENECK}: grid {} with {} stages leaves {}",
                self.grid,
                self.num_stages(),
                self.grid as f64 / (1u64 << self.num_stages()) as f64
            ));
        }
        if self.mamba_branch && self.state_dim == 0 {
            return fail("state_dim must be > 0".into());
        }
        Ok(())
    }

    /// Every field as `(key, value)` in a fixed order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_channels", self.input_channels.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("stage_depths", join_list(&self.stage_depths)),
            ("bottleneck_depth", self.bottleneck_depth.to_string()),
            ("grid", self.grid.to_string()),
            ("state_dim", self.state_dim.to_string()),
            ("conv_variant", self.conv_variant.as_str().to_string()),
            ("mamba_branch", self.mamba_branch.to_string()),
            ("gated", self.gated.to_string()),
            ("scan_mode", self.scan_mode.to_string()),
        ]
    }

    /// Sets one field; `Ok(false)` if `key` is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "input_channels" => self.input_channels = parse_value(key, value)?,
            "base_channels" => self.base_channels = parse_value(key, value)?,
            "stage_depths" => self.stage_depths = parse_list(key, value)?,
            "bottleneck_depth" => self.bottleneck_depth = parse_value(key, value)?,
            "grid" => self.grid = parse_value(key, value)?,
            "state_dim" => self.state_dim = parse_value(key, value)?,
            "conv_variant" => self.conv_variant = ConvVariant::parse(value)?,
            "mamba_branch" => self.mamba_branch = parse_bool(key, value)?,
            "gated" => self.gated = parse_bool(key, value)?,
            "scan_mode" => self.scan_mode = ScanMode::parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn block(&self, channels: usize) -> BlockConfig {
        BlockConfig {
            channels,
            state_dim: self.state_dim,
            kernel: 3,
            conv_variant: self.conv_variant,
            mamba_branch: self.mamba_branch,
            gated: self.gated,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn init<T: Real, R: rand::Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        shape: [usize; 4],
        fan_in: usize,
        bias_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Conv {
            w: store.insert(
                format!("{name}.weight"),
                fan_in_uniform(rng, &shape, fan_in)?,
            )?,
            b: store.insert(
                format!("{name}.bias"),
                fan_in_uniform(rng, &[bias_len], fan_in)?,
            )?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    stem: Conv,
    encoder: Vec<Vec<MambaConvBlock>>,
    down: Vec<Conv>,
    bottleneck: Vec<MambaConvBlock>,
    up: Vec<Conv>,
    fuse: Vec<Conv>,
    decoder: Vec<Vec<MambaConvBlock>>,
    head: Conv,
}

/// Per-call switches used by tests and diagnostics.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Replace the skip tensor of encoder stage `s` by zeros.
    pub zero_skip: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = stream(seed, Stream::Init);
    let mut store = ParamStore::new();
    let s_count = cfg.num_stages();
    let b0 = cfg.base_channels;
    let stem = Conv::init(
        &mut store,
        "stem",
        [b0, cfg.input_channels, 3, 3],
        cfg.input_channels * 9,
        b0,
        &mut rng,
    )?;
    let mut encoder = Vec::new();
    let mut down = Vec::new();
    for (s, &depth) in cfg.stage_depths.iter().enumerate() {
        let c = cfg.width(s);
        let blocks = (0..depth)
            .map(|j| {
                MambaConvBlock::init(
                    &mut store,
                    &format!("enc{s}.block{j}"),
                    &cfg.block(c),
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        encoder.push(blocks);
        down.push(Conv::init(
            &mut store,
            &format!("down{s}"),
            [2 * c, c, 3, 3],
            c * 9,
            2 * c,
            &mut rng,
        )?);
    }
    let cb = cfg.width(s_count);
    let bottleneck = (0..cfg.bottleneck_depth)
        .map(|j| {
            MambaConvBlock::init(
                &mut store,
                &format!("bottleneck.block{j}"),
                &cfg.block(cb),
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut up, mut fuse, mut decoder) = (Vec::new(), Vec::new(), Vec::new());
    for s in (0..s_count).rev() {
        let c = cfg.width(s);
        up.push(Conv::init(
            &mut store,
            &format!("up{s}"),
            [2 * c, c, 2, 2],
            2 * c * 4,
            c,
            &mut rng,
        )?);
        fuse.push(Conv::init(
            &mut store,
            &format!("dec{s}.fuse"),
            [c, 2 * c, 1, 1],
            2 * c,
            c,
            &mut rng,
        )?);
        let blocks = (0..cfg.stage_depths[s])
            .map(|j| {
                MambaConvBlock::init(
                    &mut store,
                    &format!("dec{s}.block{j}"),
                    &cfg.block(c),
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        decoder.push(blocks);
    }
    let head = Conv::init(&mut store, "head", [1, b0, 1, 1], b0, 1, &mut rng)?;
    let layout = Layout {
        stem,
        encoder,
        down,
        bottleneck,
        up,
        fuse,
        decoder,
        head,
    };
    Ok(Model {
        config: cfg.clone(),
        params: store,
        layout,
    })
}

impl<T: Real> Model<T> {
    /// Same layout and parameter order in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn count_parameters(&self) -> usize {
        self.params.total_elements()
    }

    /// Element counts grouped by the first component of the parameter name.
    pub fn parameter_breakdown(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for p in self.params.iter() {
            let top = p.name.split('.').next().unwrap_or("").to_string();
            *out.entry(top).or_insert(0) += p.tensor.numel();
        }
        out
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4
            || shape[1] != c.input_channels
            || shape[2] != c.grid
            || shape[3] != c.grid
        {
            return Err(Error::dim(
                "forward",
                format!(
                    "input {shape:?}, expected [B, {}, {}, {}]",
                    c.input_channels, c.grid, c.grid
                ),
            ));
        }
        Ok(())
    }

    /// `x: [B, input_channels, grid, grid] -> [B, 1, grid, grid]` in `(0, 1)`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        self.forward_with(tape, bound, x, ForwardOptions::default())
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        opts: ForwardOptions,
    ) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let l = &self.layout;
        let mode = self.config.scan_mode;
        let conv = |tape: &mut Tape<T>, c: &Conv, x: Var, stride: usize, pad: usize| {
            tape.conv2d(x, bound.get(c.w), Some(bound.get(c.b)), stride, pad, 1)
        };
        let mut h = conv(tape, &l.stem, x, 1, 1)?;
        let mut skips = Vec::new();
        for (s, blocks) in l.encoder.iter().enumerate() {
            for b in blocks {
                h = b.forward(tape, bound, h, mode)?;
            }
            skips.push(if opts.zero_skip == Some(s) {
                let shape = tape.shape(h).to_vec();
                let n = tape.value(h).len();
                tape.constant(&shape, vec![T::zero(); n])?
            } else {
                h
            });
            h = conv(tape, &l.down[s], h, 2, 1)?;
        }
        for b in &l.bottleneck {
            h = b.forward(tape, bound, h, mode)?;
        }
        for (i, skip) in skips.into_iter().rev().enumerate() {
            let u = &l.up[i];
            h = tape.conv_transpose2d(h, bound.get(u.w), Some(bound.get(u.b)), 2, 0)?;
            h = tape.concat_channels(h, skip)?;
            h = conv(tape, &l.fuse[i], h, 1, 0)?;
            for b in &l.decoder[i] {
                h = b.forward(tape, bound, h, mode)?;
            }
        }
        let logits = conv(tape, &l.head, h, 1, 0)?;
        tape.sigmoid(logits)
    }

    /// Runs the model on a concrete batch without recording gradients.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict_with(x, ForwardOptions::default())
    }

    pub fn predict_with(&self, x: &Tensor<T>, opts: ForwardOptions) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params);
        let xv = tape.constant(x.shape(), x.data().to_vec())?;
        let y = self.forward_with(&mut tape, &bound, xv, opts)?;
        Ok(tape.tensor(y))
    }
}
