//! Self-checks shared by the command line and the acceptance tests: a
//! finite-difference gradient suite per scope and the selective-scan timing
//! sweep.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;

use crate::autodiff::{
    gradcheck, Bound, GradcheckConfig, GradcheckReport, ParamStore, Tape, Tensor, Var,
};
use crate::blocks::{BlockConfig, ConvVariant, MambaConvBlock, ResidualConv};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::scan2d::Ss2d;
use crate::ssm::{a_ladder, selective_scan, ScanMode, SelectiveParams, SelectiveScanInput};
use crate::unet::{build_model, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    Ops,
    Ssm,
    Block,
    Model,
}

impl GradScope {
    pub const ALL: [GradScope; 4] = [
        GradScope::Ops,
        GradScope::Ssm,
        GradScope::Block,
        GradScope::Model,
    ];

    pub fn default_tol(self) -> f64 {
        match self {
            GradScope::Ops | GradScope::Ssm => 1e-4,
            GradScope::Block => 1e-3,
            GradScope::Model => 3e-3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GradScope::Ops => "ops",
            GradScope::Ssm => "ssm",
            GradScope::Block => "block",
            GradScope::Model => "model",
        }
    }
}

impl FromStr for GradScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradScope::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown gradcheck scope '{s}', expected ops, ssm, block or model"
                ))
            })
    }
}

impl fmt::Display for GradScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub report: GradcheckReport,
}

fn rand_vec(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = stream(seed, Stream::Test);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Contracts `y` with a fixed random tensor so every entry gets its own weight.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r = tape.constant(
        &shape,
        rand_vec(seed ^ 0x5eed, shape.iter().product(), -1.0, 1.0),
    )?;
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

type OpCase = (
    &'static str,
    Vec<(&'static str, Vec<usize>)>,
    fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
);

fn op_cases() -> Vec<OpCase> {
    vec![
        (
            "linear",
            vec![("x", vec![2, 3, 5]), ("w", vec![5, 4]), ("b", vec![4])],
            |t, v| t.linear(v[0], v[1], Some(v[2])),
        ),
        (
            "conv2d",
            vec![
                ("x", vec![2, 4, 6, 6]),
                ("w", vec![6, 4, 3, 3]),
                ("b", vec![6]),
            ],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1),
        ),
        (
            "conv2d_stride2_grouped",
            vec![("x", vec![1, 4, 7, 7]), ("w", vec![4, 2, 3, 3])],
            |t, v| t.conv2d(v[0], v[1], None, 2, 1, 2),
        ),
        (
            "conv2d_depthwise",
            vec![
                ("x", vec![2, 3, 5, 5]),
                ("w", vec![3, 1, 3, 3]),
                ("b", vec![3]),
            ],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 3),
        ),
        (
            "conv2d_pointwise",
            vec![("x", vec![1, 3, 4, 4]), ("w", vec![5, 3, 1, 1])],
            |t, v| t.conv2d(v[0], v[1], None, 1, 0, 1),
        ),
        (
            "conv_transpose2d",
            vec![
                ("x", vec![2, 4, 3, 3]),
                ("w", vec![4, 2, 2, 2]),
                ("b", vec![2]),
            ],
            |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 0),
        ),
        ("gelu", vec![("x", vec![3, 4])], |t, v| t.gelu(v[0])),
        ("softplus", vec![("x", vec![3, 4])], |t, v| t.softplus(v[0])),
        ("exp", vec![("x", vec![3, 4])], |t, v| t.exp(v[0])),
        ("sigmoid", vec![("x", vec![3, 4])], |t, v| t.sigmoid(v[0])),
        ("neg", vec![("x", vec![3, 4])], |t, v| t.neg(v[0])),
        ("square", vec![("x", vec![3, 4])], |t, v| t.square(v[0])),
        ("abs", vec![("x", vec![3, 4])], |t, v| {
            // shifted away from the kink at zero
            let s = t.add_scalar(v[0], 3.0)?;
            t.abs(s)
        }),
        (
            "add_broadcast",
            vec![("a", vec![2, 3, 4]), ("b", vec![3, 4])],
            |t, v| t.add(v[0], v[1]),
        ),
        (
            "mul_broadcast",
            vec![("a", vec![2, 3, 4]), ("b", vec![1, 4])],
            |t, v| t.mul(v[0], v[1]),
        ),
        ("sub", vec![("a", vec![2, 3]), ("b", vec![2, 3])], |t, v| {
            t.sub(v[0], v[1])
        }),
        ("div", vec![("a", vec![2, 3]), ("b", vec![2, 3])], |t, v| {
            let d = t.add_scalar(v[1], 3.0)?;
            t.div(v[0], d)
        }),
        ("mean", vec![("x", vec![2, 3])], |t, v| t.mean(v[0])),
        (
            "layernorm",
            vec![("x", vec![3, 2, 5]), ("g", vec![5]), ("b", vec![5])],
            |t, v| t.layernorm(v[0], v[1], v[2], 1e-5),
        ),
        (
            "concat_channels",
            vec![("a", vec![2, 2, 3, 3]), ("b", vec![2, 1, 3, 3])],
            |t, v| t.concat_channels(v[0], v[1]),
        ),
        ("split_channels", vec![("x", vec![2, 4, 3, 3])], |t, v| {
            t.split_channels(v[0], 1, 2)
        }),
        ("reverse_sequence", vec![("x", vec![2, 5, 3])], |t, v| {
            t.reverse_sequence(v[0])
        }),
        ("raster_flatten", vec![("x", vec![2, 3, 4, 5])], |t, v| {
            t.raster_flatten(v[0])
        }),
        ("raster_unflatten", vec![("x", vec![2, 20, 3])], |t, v| {
            t.raster_unflatten(v[0], 4, 5)
        }),
        ("reflect_pad", vec![("x", vec![1, 2, 5, 4])], |t, v| {
            t.reflect_pad(v[0], 1)
        }),
    ]
}

fn check<F>(name: &str, f: F, store: &ParamStore<f64>, cfg: &GradcheckConfig) -> Result<GradCase>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    Ok(GradCase {
        name: name.to_string(),
        report: gradcheck(f, store, cfg)?,
    })
}

fn ops_suite(cfg: &GradcheckConfig, seed: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for (i, (name, entries, op)) in op_cases().into_iter().enumerate() {
        let mut store = ParamStore::new();
        for (k, (pname, shape)) in entries.iter().enumerate() {
            let n = shape.iter().product();
            let s = seed * 1000 + i as u64 * 31 + k as u64;
            store.insert(*pname, Tensor::new(shape, rand_vec(s, n, -1.0, 1.0))?)?;
        }
        out.push(check(
            name,
            |t, b| {
                let y = op(t, b.vars())?;
                project(t, y, seed + i as u64)
            },
            &store,
            cfg,
        )?);
    }
    Ok(out)
}

fn ssm_suite(cfg: &GradcheckConfig, seed: u64) -> Result<Vec<GradCase>> {
    let (batch, len, ch, n) = (2, 10, 3, 4);
    let mut store = ParamStore::<f64>::new();
    store.insert(
        "u",
        Tensor::new(
            &[batch, len, ch],
            rand_vec(seed, batch * len * ch, -1.0, 1.0),
        )?,
    )?;
    store.insert(
        "delta",
        Tensor::new(
            &[batch, len, ch],
            rand_vec(seed + 1, batch * len * ch, 0.01, 0.5),
        )?,
    )?;
    store.insert(
        "b",
        Tensor::new(
            &[batch, len, n],
            rand_vec(seed + 2, batch * len * n, -1.0, 1.0),
        )?,
    )?;
    store.insert(
        "c",
        Tensor::new(
            &[batch, len, n],
            rand_vec(seed + 3, batch * len * n, -1.0, 1.0),
        )?,
    )?;
    store.insert("d", Tensor::new(&[ch], rand_vec(seed + 4, ch, -1.0, 1.0))?)?;
    let a = a_ladder(ch, n);
    let mut out = Vec::new();
    for (name, mode) in [
        ("selective_scan_sequential", ScanMode::Sequential),
        ("selective_scan_parallel", ScanMode::Parallel { chunk: 3 }),
    ] {
        out.push(check(
            name,
            |t, b| {
                let v = b.vars();
                let y = t.selective_scan(v[0], v[1], v[2], v[3], v[4], &a, mode)?;
                project(t, y, seed + 5)
            },
            &store,
            cfg,
        )?);
    }

    let mut store = ParamStore::<f64>::new();
    let p = SelectiveParams::init(&mut store, "mixer", ch, n, &mut stream(seed, Stream::Init))?;
    let uid = store.insert(
        "u",
        Tensor::new(
            &[batch, len, ch],
            rand_vec(seed + 6, batch * len * ch, -1.0, 1.0),
        )?,
    )?;
    out.push(check(
        "selective_mixer",
        |t, b| {
            let y = p.scan(t, b, b.get(uid), ScanMode::Sequential)?;
            project(t, y, seed + 7)
        },
        &store,
        cfg,
    )?);

    let mut store = ParamStore::<f64>::new();
    let s = Ss2d::init(
        &mut store,
        "ss2d",
        3,
        2,
        false,
        &mut stream(seed + 1, Stream::Init),
    )?;
    let xid = store.insert(
        "x",
        Tensor::new(&[1, 3, 4, 4], rand_vec(seed + 8, 48, -1.0, 1.0))?,
    )?;
    out.push(check(
        "ss2d",
        |t, b| {
            let y = s.forward(t, b, b.get(xid), ScanMode::Sequential)?;
            project(t, y, seed + 9)
        },
        &store,
        cfg,
    )?);
    Ok(out)
}

fn block_suite(cfg: &GradcheckConfig, seed: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for variant in [ConvVariant::DepthwiseSeparable, ConvVariant::Standard] {
        let mut store = ParamStore::<f64>::new();
        let bc = BlockConfig {
            conv_variant: variant,
            ..BlockConfig::new(2, 4)
        };
        let conv = ResidualConv::init(&mut store, "conv", &bc, &mut stream(seed, Stream::Init))?;
        let xid = store.insert(
            "x",
            Tensor::new(&[1, 2, 4, 4], rand_vec(seed + 1, 32, -1.0, 1.0))?,
        )?;
        out.push(check(
            &format!("residual_conv_{}", variant.as_str()),
            |t, b| {
                let y = conv.forward(t, b, b.get(xid))?;
                project(t, y, seed + 2)
            },
            &store,
            cfg,
        )?);
    }
    for gated in [false, true] {
        let mut store = ParamStore::<f64>::new();
        let bc = BlockConfig {
            gated,
            ..BlockConfig::new(2, 2)
        };
        let blk = MambaConvBlock::init(
            &mut store,
            "block",
            &bc,
            &mut stream(seed + 3, Stream::Init),
        )?;
        let xid = store.insert(
            "x",
            Tensor::new(&[1, 2, 4, 4], rand_vec(seed + 4, 32, -1.0, 1.0))?,
        )?;
        out.push(check(
            if gated {
                "mamba_conv_block_gated"
            } else {
                "mamba_conv_block"
            },
            |t, b| {
                let y = blk.forward(t, b, b.get(xid), ScanMode::Sequential)?;
                project(t, y, seed + 5)
            },
            &store,
            cfg,
        )?);
    }
    Ok(out)
}

/// Configuration of the reduced model used by the model-scope gradient check.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        stage_depths: vec![1, 1],
        bottleneck_depth: 1,
        grid: 16,
        state_dim: 2,
        ..ModelConfig::default()
    }
}

fn model_suite(cfg: &GradcheckConfig, seed: u64) -> Result<Vec<GradCase>> {
    let m = build_model::<f64>(&gradcheck_model_config(), seed)?;
    let mut store = m.params.clone();
    let xid = store.insert(
        "x",
        Tensor::new(&[1, 2, 16, 16], rand_vec(seed + 1, 512, 0.0, 1.0))?,
    )?;
    let target = rand_vec(seed + 2, 256, 0.0, 1.0);
    // sampled entries keep the finite-difference sweep short
    let cfg = GradcheckConfig {
        max_entries_per_param: Some(6),
        ..cfg.clone()
    };
    Ok(vec![check(
        "model_16x16",
        |t, b| {
            let y = m.forward(t, b, b.get(xid))?;
            let r = t.constant(&[1, 1, 16, 16], target.clone())?;
            let d = t.sub(y, r)?;
            let sq = t.mul(d, d)?;
            t.mean(sq)
        },
        &store,
        &cfg,
    )?])
}

/// Finite-difference step per scope. The model uses a smaller step because
/// its objective is a mean over many outputs.
pub fn default_eps(scope: GradScope) -> f64 {
    match scope {
        GradScope::Ops => 1e-3,
        GradScope::Ssm | GradScope::Block => 1e-4,
        GradScope::Model => 1e-5,
    }
}

/// Runs the 64-bit gradient checks of `scope`. With `corrupt_backward` every
/// backward rule is perturbed and the checks are expected to fail.
pub fn gradcheck_suite(
    scope: GradScope,
    tol: Option<f64>,
    corrupt_backward: bool,
    seed: u64,
) -> Result<Vec<GradCase>> {
    let cfg = GradcheckConfig {
        corrupt_backward,
        ..GradcheckConfig::new(default_eps(scope), tol.unwrap_or(scope.default_tol()))
    };
    match scope {
        GradScope::Ops => ops_suite(&cfg, seed),
        GradScope::Ssm => ssm_suite(&cfg, seed),
        GradScope::Block => block_suite(&cfg, seed),
        GradScope::Model => model_suite(&cfg, seed),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanTiming {
    pub len: usize,
    pub sequential_secs: f64,
    pub parallel_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanBench {
    pub channels: usize,
    pub state: usize,
    pub rows: Vec<ScanTiming>,
    pub sequential_slope: f64,
    pub parallel_slope: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Domain(
            "log-log fit needs at least two positive points".into(),
        ));
    }
    let (lx, ly): (Vec<f64>, Vec<f64>) = x.iter().zip(y).map(|(a, b)| (a.ln(), b.ln())).unzip();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("log-log fit needs distinct lengths".into()));
    }
    Ok(sxy / sxx)
}

/// Best-of-`repeats` forward time per call. Short sequences are run several
/// times per measurement so each measurement covers comparable work.
fn time_scan(
    inp: &SelectiveScanInput<'_, f32>,
    mode: ScanMode,
    repeats: usize,
    min_len_work: usize,
) -> Result<f64> {
    let inner = (min_len_work / inp.len).max(1);
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        for _ in 0..inner {
            std::hint::black_box(selective_scan(std::hint::black_box(inp), mode)?);
        }
        best = best.min(t0.elapsed().as_secs_f64() / inner as f64);
    }
    Ok(best)
}

/// Times sequential and chunked parallel selective scans over `lengths`
/// (batch 1, 32-bit) and fits the log-log slope of runtime against length.
pub fn bench_scan(
    lengths: &[usize],
    channels: usize,
    state: usize,
    repeats: usize,
    seed: u64,
) -> Result<ScanBench> {
    if lengths.len() < 2 || lengths.contains(&0) {
        return Err(Error::Config(
            "bench needs at least two positive scan lengths".into(),
        ));
    }
    let max_len = *lengths.iter().max().expect("non-empty");
    let mut rows = Vec::new();
    for &len in lengths {
        let f = |s: u64, n: usize, lo: f64, hi: f64| {
            rand_vec(seed + s, n, lo, hi)
                .into_iter()
                .map(|v| v as f32)
                .collect::<Vec<f32>>()
        };
        let (u, delta) = (
            f(0, len * channels, -1.0, 1.0),
            f(1, len * channels, 0.01, 0.5),
        );
        let (b, c) = (f(2, len * state, -1.0, 1.0), f(3, len * state, -1.0, 1.0));
        let a: Vec<f32> = a_ladder(channels, state)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        let d = vec![1.0f32; channels];
        let inp = SelectiveScanInput {
            batch: 1,
            len,
            channels,
            state,
            u: &u,
            delta: &delta,
            b: &b,
            c: &c,
            a: &a,
            d: &d,
        };
        rows.push(ScanTiming {
            len,
            sequential_secs: time_scan(&inp, ScanMode::Sequential, repeats, max_len)?,
            parallel_secs: time_scan(
                &inp,
                ScanMode::Parallel {
                    chunk: crate::ssm::DEFAULT_CHUNK,
                },
                repeats,
                max_len,
            )?,
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.len as f64).collect();
    let seq: Vec<f64> = rows.iter().map(|r| r.sequential_secs).collect();
    let par: Vec<f64> = rows.iter().map(|r| r.parallel_secs).collect();
    Ok(ScanBench {
        channels,
        state,
        sequential_slope: loglog_slope(&x, &seq)?,
        parallel_slope: loglog_slope(&x, &par)?,
        rows,
    })
}
