use proptest::prelude::*;
use radiomamba_core::autodiff::{gradcheck, GradcheckConfig, ParamStore, Tape, Tensor, Var};
use radiomamba_core::blocks::{
    mac_cost, mamba_conv_block, residual_conv_block, Ablation, BlockConfig, ConvVariant,
    MambaConvBlock, ResidualConv,
};
use radiomamba_core::rng::{stream, Stream};
use radiomamba_core::scan2d::{
    raster_flatten, raster_unflatten, FeatureMap, Mixer, Ss2d, LAYERNORM_EPS,
};
use radiomamba_core::ssm::ScanMode;
use radiomamba_core::{Error, Result};
use rand::Rng;

fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = stream(seed, Stream::Test);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rand_map(seed: u64, shape: &[usize]) -> Tensor<f64> {
    Tensor::new(shape, rand_vec(seed, shape.iter().product())).unwrap()
}

/// Per-position channel normalization of a `[B, C, H, W]` map, unit gain.
fn channel_layernorm(x: &Tensor<f64>) -> Vec<f64> {
    let s = x.shape();
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let v = x.data();
    let mut out = vec![0.0; v.len()];
    for bi in 0..b {
        for p in 0..plane {
            let col: Vec<f64> = (0..c).map(|ch| v[(bi * c + ch) * plane + p]).collect();
            let mean = col.iter().sum::<f64>() / c as f64;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            for ch in 0..c {
                out[(bi * c + ch) * plane + p] = (col[ch] - mean) / (var + LAYERNORM_EPS).sqrt();
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn ss2d(seed: u64, channels: usize, state: usize) -> (ParamStore<f64>, Ss2d) {
    let mut store = ParamStore::new();
    let mut rng = stream(seed, Stream::Init);
    let s = Ss2d::init(&mut store, "ss2d", channels, state, false, &mut rng).unwrap();
    (store, s)
}

fn run_ss2d(store: &ParamStore<f64>, s: &Ss2d, x: &Tensor<f64>) -> Tensor<f64> {
    let mut t = Tape::new();
    let b = t.bind(store);
    let xv = t.leaf(x);
    let y = s.forward(&mut t, &b, xv, ScanMode::Sequential).unwrap();
    t.tensor(y)
}

/// Sum of the output against a fixed random tensor.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let r = t.constant(&shape, rand_vec(seed, shape.iter().product()))?;
    let p = t.mul(y, r)?;
    t.sum(p)
}

// ------------------------------------------------------------ flattening

#[test]
fn flatten_is_row_major() {
    let x = FeatureMap::new(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let s = raster_flatten(&x);
    assert_eq!(s.shape(), &[1, 4, 1]);
    assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(x.seq_len(), 4);
}

#[test]
fn flatten_round_trip_is_exact() {
    for seed in 0..5 {
        let x = FeatureMap::new(rand_map(seed, &[2, 4, 3, 5])).unwrap();
        let back = raster_unflatten(&raster_flatten(&x), 3, 5).unwrap();
        assert_eq!(back, x);
    }
    let seq = Tensor::<f64>::zeros(&[1, 14, 2]).unwrap();
    assert!(matches!(
        raster_unflatten(&seq, 3, 5),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn flatten_gradient_is_the_inverse_permutation() {
    let x = rand_map(1, &[2, 3, 2, 4]);
    let w = rand_vec(2, 2 * 8 * 3);
    let mut t = Tape::new();
    let xv = t.input(x.shape(), x.data().to_vec(), true).unwrap();
    let s = t.raster_flatten(xv).unwrap();
    let wv = t.constant(&[2, 8, 3], w.clone()).unwrap();
    let p = t.mul(s, wv).unwrap();
    let l = t.sum(p).unwrap();
    let g = t.backward(l).unwrap();
    let expect = raster_unflatten(&Tensor::new(&[2, 8, 3], w).unwrap(), 2, 4).unwrap();
    assert_eq!(g.get(xv).unwrap(), expect.tensor().data());
}

// ------------------------------------------------------------------ ss2d

#[test]
fn identity_mixer_gives_twice_the_normalized_input() {
    let mut store = ParamStore::<f64>::new();
    let s = Ss2d::with_mixer(&mut store, "s", 6, Mixer::Identity).unwrap();
    let x = rand_map(3, &[2, 6, 4, 5]);
    let y = run_ss2d(&store, &s, &x);
    let expect: Vec<f64> = channel_layernorm(&x).iter().map(|v| 2.0 * v).collect();
    assert!(max_diff(y.data(), &expect) < 1e-12);
}

#[test]
fn ss2d_preserves_shape() {
    let (store, s) = ss2d(1, 8, 4);
    let y = run_ss2d(&store, &s, &rand_map(2, &[2, 8, 16, 16]));
    assert_eq!(y.shape(), &[2, 8, 16, 16]);
}

#[test]
fn ss2d_rejects_channel_mismatch() {
    let (store, s) = ss2d(1, 8, 4);
    let mut t = Tape::new();
    let b = t.bind(&store);
    let x = t.constant(&[1, 4, 4, 4], vec![0.0; 64]).unwrap();
    assert!(matches!(
        s.forward(&mut t, &b, x, ScanMode::Sequential),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn backward_branch_is_forward_operator_on_reversed_sequence() {
    let (store, s) = ss2d(4, 4, 4);
    let x = rand_map(5, &[2, 4, 6, 6]);
    let mut t = Tape::new();
    let b = t.bind(&store);
    let xv = t.leaf(&x);
    let br = s
        .forward_branches(&mut t, &b, xv, ScanMode::Sequential)
        .unwrap();

    // independent evaluation: reverse the normalized sequence by hand
    let normed = t.tensor(br.normed);
    let (bs, l, c) = (2, 36, 4);
    let flip = |v: &[f64]| {
        let mut out = vec![0.0; v.len()];
        for bi in 0..bs {
            for k in 0..l {
                for ch in 0..c {
                    out[(bi * l + k) * c + ch] = v[(bi * l + (l - 1 - k)) * c + ch];
                }
            }
        }
        out
    };
    let rev_in = t.constant(&[bs, l, c], flip(normed.data())).unwrap();
    let rev_out = s
        .mixer
        .apply(&mut t, &b, rev_in, ScanMode::Sequential)
        .unwrap();
    let expect = flip(t.value(rev_out));
    assert!(max_diff(t.value(br.backward), &expect) < 1e-6);

    let sum: Vec<f64> = t
        .value(br.forward)
        .iter()
        .zip(t.value(br.backward))
        .map(|(a, b)| a + b)
        .collect();
    let out = raster_flatten(&FeatureMap::new(t.tensor(br.out)).unwrap());
    assert!(max_diff(out.data(), &sum) < 1e-15);
}

#[test]
fn every_pixel_reaches_the_farthest_pixel() {
    let (store, s) = ss2d(6, 4, 4);
    let (h, w) = (8, 8);
    let x = rand_map(7, &[1, 4, h, w]);
    let base = run_ss2d(&store, &s, &x);
    for (src, dst) in [(0, h * w - 1), (h * w - 1, 0)] {
        let mut xp = x.clone();
        xp.data_mut()[src] += 0.5;
        let y = run_ss2d(&store, &s, &xp);
        let delta = (0..4)
            .map(|c| (y.data()[c * h * w + dst] - base.data()[c * h * w + dst]).abs())
            .fold(0.0, f64::max);
        assert!(delta > 0.0, "pixel {src} does not reach {dst}");
    }
}

#[test]
fn ss2d_output_is_finite_for_extreme_inputs() {
    let (store, s) = ss2d(8, 4, 4);
    for hw in [8usize, 16, 32] {
        let n = 4 * hw * hw;
        for data in [vec![0.0; n], vec![1.0; n], rand_vec(hw as u64, n)] {
            let y = run_ss2d(&store, &s, &Tensor::new(&[1, 4, hw, hw], data).unwrap());
            assert!(y.data().iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn ss2d_gradcheck_on_4x4() {
    let (mut store, s) = ss2d(9, 3, 2);
    let xid = store.insert("x", rand_map(10, &[1, 3, 4, 4])).unwrap();
    let report = gradcheck(
        |t, b| {
            let y = s.forward(t, b, b.get(xid), ScanMode::Sequential)?;
            project(t, y, 11)
        },
        &store,
        &GradcheckConfig::new(1e-4, 1e-3),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

// ---------------------------------------------------------------- blocks

fn block_cfg(c: usize, variant: ConvVariant) -> BlockConfig {
    BlockConfig {
        conv_variant: variant,
        ..BlockConfig::new(c, 4)
    }
}

#[test]
fn zero_conv_weights_give_identity() {
    for variant in [ConvVariant::DepthwiseSeparable, ConvVariant::Standard] {
        let mut store = ParamStore::<f64>::new();
        let conv = ResidualConv::init(
            &mut store,
            "c",
            &block_cfg(3, variant),
            &mut stream(1, Stream::Init),
        )
        .unwrap();
        store.iter_mut().for_each(|p| p.tensor.data_mut().fill(0.0));
        let x = rand_map(2, &[2, 3, 5, 5]);
        assert_eq!(residual_conv_block(&store, &conv, &x).unwrap(), x);
    }
}

#[test]
fn conv_branch_preserves_shape_and_checks_channels() {
    let mut store = ParamStore::<f64>::new();
    let conv = ResidualConv::init(
        &mut store,
        "c",
        &block_cfg(8, ConvVariant::DepthwiseSeparable),
        &mut stream(1, Stream::Init),
    )
    .unwrap();
    assert_eq!(
        residual_conv_block(&store, &conv, &rand_map(1, &[1, 8, 16, 16]))
            .unwrap()
            .shape(),
        &[1, 8, 16, 16]
    );
    assert!(matches!(
        residual_conv_block(&store, &conv, &rand_map(1, &[1, 4, 16, 16])),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn even_kernel_is_rejected() {
    let cfg = BlockConfig {
        kernel: 4,
        ..BlockConfig::new(4, 4)
    };
    let mut store = ParamStore::<f64>::new();
    assert!(matches!(
        ResidualConv::init(&mut store, "c", &cfg, &mut stream(1, Stream::Init)),
        Err(Error::Config(_))
    ));
}

#[test]
fn conv_branch_gradcheck() {
    for variant in [ConvVariant::DepthwiseSeparable, ConvVariant::Standard] {
        let mut store = ParamStore::<f64>::new();
        let conv = ResidualConv::init(
            &mut store,
            "c",
            &block_cfg(2, variant),
            &mut stream(3, Stream::Init),
        )
        .unwrap();
        let xid = store.insert("x", rand_map(4, &[1, 2, 4, 4])).unwrap();
        let report = gradcheck(
            |t, b| {
                let y = conv.forward(t, b, b.get(xid))?;
                project(t, y, 5)
            },
            &store,
            &GradcheckConfig::new(1e-4, 1e-3),
        )
        .unwrap();
        assert!(report.passed(), "{variant:?}: {report}");
    }
}

#[test]
fn zero_conv_and_identity_mixer_compose() {
    let mut store = ParamStore::<f64>::new();
    let blk = MambaConvBlock::with_mixer(
        &mut store,
        "b",
        &block_cfg(5, ConvVariant::DepthwiseSeparable),
        Mixer::Identity,
        &mut stream(1, Stream::Init),
    )
    .unwrap();
    for id in blk.conv.param_ids() {
        store.get_mut(id).tensor.data_mut().fill(0.0);
    }
    let x = rand_map(6, &[1, 5, 4, 6]);
    let y = mamba_conv_block(&store, &blk, &x, ScanMode::Sequential).unwrap();
    let expect: Vec<f64> = x
        .data()
        .iter()
        .zip(channel_layernorm(&x))
        .map(|(x, n)| x + 2.0 * n)
        .collect();
    assert!(max_diff(y.data(), &expect) < 1e-12);
}

#[test]
fn fusion_is_additive_and_both_branches_matter() {
    let mut store = ParamStore::<f64>::new();
    let blk = MambaConvBlock::init(
        &mut store,
        "b",
        &block_cfg(4, ConvVariant::DepthwiseSeparable),
        &mut stream(2, Stream::Init),
    )
    .unwrap();
    let x = rand_map(7, &[1, 4, 6, 6]);
    let mut t = Tape::new();
    let b = t.bind(&store);
    let xv = t.leaf(&x);
    let full = blk
        .forward_branches(&mut t, &b, xv, ScanMode::Sequential, Ablation::None)
        .unwrap();
    let mamba = full.mamba.unwrap();
    let y = t.value(full.out).to_vec();
    let x_plus_mamba: Vec<f64> = x
        .data()
        .iter()
        .zip(t.value(mamba.out))
        .map(|(a, b)| a + b)
        .collect();
    assert!(max_diff(&y, t.value(full.conv)) > 0.0);
    assert!(max_diff(&y, &x_plus_mamba) > 0.0);

    let no_conv = blk
        .forward_branches(&mut t, &b, xv, ScanMode::Sequential, Ablation::ConvResidual)
        .unwrap();
    assert_eq!(t.value(no_conv.out), &x_plus_mamba[..]);
    let no_mamba = blk
        .forward_branches(&mut t, &b, xv, ScanMode::Sequential, Ablation::Mamba)
        .unwrap();
    assert_eq!(t.value(no_mamba.out), t.value(full.conv));
}

#[test]
fn conv_only_block_has_no_mamba_parameters() {
    let cfg = BlockConfig {
        mamba_branch: false,
        ..BlockConfig::new(4, 4)
    };
    let mut store = ParamStore::<f64>::new();
    let blk = MambaConvBlock::init(&mut store, "b", &cfg, &mut stream(2, Stream::Init)).unwrap();
    assert!(blk.ss2d.is_none());
    assert_eq!(store.total_elements(), blk.param_count());
    let x = rand_map(1, &[1, 4, 4, 4]);
    assert_eq!(
        mamba_conv_block(&store, &blk, &x, ScanMode::Sequential).unwrap(),
        residual_conv_block(&store, &blk.conv, &x).unwrap()
    );
}

#[test]
fn block_gradcheck_on_4x4() {
    for gated in [false, true] {
        let cfg = BlockConfig {
            gated,
            ..BlockConfig::new(2, 2)
        };
        let mut store = ParamStore::<f64>::new();
        let blk =
            MambaConvBlock::init(&mut store, "b", &cfg, &mut stream(8, Stream::Init)).unwrap();
        assert_eq!(store.total_elements(), blk.param_count());
        let xid = store.insert("x", rand_map(9, &[1, 2, 4, 4])).unwrap();
        let report = gradcheck(
            |t, b| {
                let y = blk.forward(t, b, b.get(xid), ScanMode::Parallel { chunk: 3 })?;
                project(t, y, 10)
            },
            &store,
            &GradcheckConfig::new(1e-4, 1e-3),
        )
        .unwrap();
        assert!(report.passed(), "gated={gated}: {report}");
    }
}

#[test]
fn mac_cost_examples() {
    let c = mac_cost(64, 64, 3, 32, 32).unwrap();
    assert_eq!(c.cost_std, 37_748_736);
    assert_eq!(c.cost_dw + c.cost_pw, 4_784_128);
    assert!((c.ratio - (1.0 / 64.0 + 1.0 / 9.0)).abs() < 1e-12);
    assert!((c.ratio - 0.126736).abs() < 1e-6);
    let big = mac_cost(4096, 4096, 3, 1, 1).unwrap();
    assert!((big.ratio - 1.0 / 9.0).abs() < 1e-3);
    let k1 = mac_cost(8, 16, 1, 4, 4).unwrap();
    assert!((k1.ratio - (1.0 + 1.0 / 16.0)).abs() < 1e-12);
    assert!(matches!(mac_cost(0, 1, 3, 4, 4), Err(Error::Domain(_))));
}

fn conv_params(c: usize, variant: ConvVariant) -> usize {
    let mut store = ParamStore::<f32>::new();
    ResidualConv::init(
        &mut store,
        "c",
        &block_cfg(c, variant),
        &mut stream(0, Stream::Init),
    )
    .unwrap();
    store.total_elements()
}

#[test]
fn separable_parameter_ratio_near_mac_ratio_at_64() {
    let ratio = conv_params(64, ConvVariant::DepthwiseSeparable) as f64
        / conv_params(64, ConvVariant::Standard) as f64;
    let target = 1.0 / 64.0 + 1.0 / 9.0;
    assert!(
        (ratio - target).abs() / target < 0.10,
        "{ratio} vs {target}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn separable_branch_is_smaller(c in 2usize..96) {
        prop_assert!(conv_params(c, ConvVariant::DepthwiseSeparable) < conv_params(c, ConvVariant::Standard));
    }

    #[test]
    fn block_output_shape_matches_input(c in 1usize..5, h in 1usize..7, w in 1usize..7, variant in prop_oneof![Just(ConvVariant::DepthwiseSeparable), Just(ConvVariant::Standard)]) {
        let mut store = ParamStore::<f64>::new();
        let blk = MambaConvBlock::init(&mut store, "b", &block_cfg(c, variant), &mut stream(1, Stream::Init)).unwrap();
        let y = mamba_conv_block(&store, &blk, &rand_map(2, &[2, c, h, w]), ScanMode::Sequential).unwrap();
        prop_assert_eq!(y.shape(), &[2, c, h, w]);
    }
}
