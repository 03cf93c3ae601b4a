use std::f64::consts::PI;
use std::fs;

use proptest::prelude::*;
use radiomamba_core::autodiff::{ParamStore, Tensor};
use radiomamba_core::data::{synth_generate, EnvironmentSample, Mode};
use radiomamba_core::loss::LossWeights;
use radiomamba_core::train::*;
use radiomamba_core::unet::{build_model, ModelConfig};
use radiomamba_core::Error;

fn store(values: &[f32]) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.insert(
        "theta",
        Tensor::new(&[values.len()], values.to_vec()).unwrap(),
    )
    .unwrap();
    s
}

fn set_grad(s: &mut ParamStore<f32>, g: Vec<f32>) {
    s.iter_mut().next().unwrap().tensor.grad = Some(g);
}

fn theta(s: &ParamStore<f32>) -> Vec<f32> {
    s.iter().next().unwrap().tensor.data().to_vec()
}

#[test]
fn zero_gradient_is_pure_decay() {
    let mut s = store(&[1.0]);
    let mut st = TrainState::new(&s, 0.1, 0.0, 10, 0.1, 0);
    set_grad(&mut s, vec![0.0]);
    adamw_step(&mut s, &mut st, 0.1).unwrap();
    assert!((theta(&s)[0] - 0.99).abs() < 1e-7);
    assert_eq!(st.step, 1);
}

#[test]
fn first_step_moves_by_lr() {
    let mut s = store(&[0.5]);
    let mut st = TrainState::new(&s, 1e-2, 0.0, 10, 0.0, 0);
    set_grad(&mut s, vec![1.0]);
    adamw_step(&mut s, &mut st, 1e-2).unwrap();
    // m_hat = 1, v_hat = 1
    let expected = 0.5 - 1e-2 / (1.0 + 1e-8);
    assert!((theta(&s)[0] as f64 - expected).abs() < 1e-7);
}

#[test]
fn adamw_matches_f64_reference_over_steps() {
    let (lr, wd) = (3e-3, 1e-2);
    let grads = [0.3, -1.2, 0.05, 2.0, -0.7];
    let mut s = store(&[0.25]);
    let mut st = TrainState::new(&s, lr, 0.0, 10, wd, 0);
    let (mut th, mut m, mut v) = (0.25f64, 0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        set_grad(&mut s, vec![g as f32]);
        adamw_step(&mut s, &mut st, lr).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let k = t as i32 + 1;
        let (mh, vh) = (m / (1.0 - 0.9f64.powi(k)), v / (1.0 - 0.999f64.powi(k)));
        th = th - lr * wd * th - lr * mh / (vh.sqrt() + 1e-8);
    }
    assert!(
        (theta(&s)[0] as f64 - th).abs() < 1e-6,
        "{} vs {th}",
        theta(&s)[0]
    );
}

#[test]
fn non_finite_gradient_names_parameter() {
    let mut s = store(&[1.0, 2.0]);
    let mut st = TrainState::new(&s, 0.1, 0.0, 10, 0.0, 0);
    set_grad(&mut s, vec![0.0, f32::NAN]);
    let err = adamw_step(&mut s, &mut st, 0.1).unwrap_err();
    assert!(
        matches!(&err, Error::Numeric(d) if d.contains("theta") && d.contains("index 1")),
        "{err}"
    );
    assert_eq!(theta(&s), vec![1.0, 2.0]);
}

#[test]
fn moment_shape_mismatch_rejected() {
    let s = store(&[1.0, 2.0]);
    let mut st = TrainState::new(&store(&[1.0]), 0.1, 0.0, 10, 0.0, 0);
    let mut s2 = s.clone();
    assert!(matches!(
        adamw_step(&mut s2, &mut st, 0.1),
        Err(Error::Config(_))
    ));
}

fn quadratic_run(init: &[f32], steps: usize) -> Vec<f64> {
    let mut s = store(init);
    let mut st = TrainState::new(&s, 1e-2, 0.0, steps, 0.0, 0);
    let mut losses = Vec::new();
    for _ in 0..steps {
        let th = theta(&s);
        losses.push(th.iter().map(|&v| (v as f64).powi(2)).sum());
        set_grad(&mut s, th.iter().map(|v| 2.0 * v).collect());
        adamw_step(&mut s, &mut st, 1e-2).unwrap();
    }
    losses
}

#[test]
fn quadratic_decreases_for_100_steps() {
    let l = quadratic_run(&[1.0, -2.0, 0.5], 100);
    assert!(l.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn cosine_examples() {
    let (hi, lo, n) = (9e-4, 1e-6, 5000);
    assert_eq!(cosine_lr(0, hi, lo, n).unwrap(), 9e-4);
    assert!((cosine_lr(n, hi, lo, n).unwrap() - lo).abs() < 1e-18);
    assert!((cosine_lr(n / 2, hi, lo, n).unwrap() - (hi + lo) / 2.0).abs() < 1e-18);
    assert!(matches!(cosine_lr(n + 1, hi, lo, n), Err(Error::Domain(_))));
    assert!(matches!(cosine_lr(0, hi, lo, 0), Err(Error::Domain(_))));
}

#[test]
fn default_hyperparameters() {
    let c = TrainConfig::default();
    assert_eq!((c.steps, c.batch_size, c.val_every), (5000, 8, 250));
    assert_eq!((c.lr_max, c.weight_decay, c.clip_norm), (9e-4, 1e-4, 1.0));
    assert_eq!(c.loss, LossWeights::default());
}

#[test]
fn clipping_bounds_global_norm() {
    let mut s = store(&[0.0, 0.0]);
    set_grad(&mut s, vec![3.0, 4.0]);
    assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
    assert!((grad_norm(&s) - 1.0).abs() < 1e-6);
    set_grad(&mut s, vec![0.3, 0.4]);
    clip_grad_norm(&mut s, 1.0);
    assert_eq!(
        s.iter().next().unwrap().tensor.grad.as_deref(),
        Some(&[0.3f32, 0.4][..])
    );
}

#[test]
fn loss_weights_parse() {
    assert_eq!(
        parse_loss_weights("0.5,0.5,0,0").unwrap(),
        LossWeights::l1_mse()
    );
    assert!(matches!(parse_loss_weights("1,2,3"), Err(Error::Config(_))));
    assert!(matches!(
        parse_loss_weights("1,-2,3,0"),
        Err(Error::Config(_))
    ));
}

proptest! {
    #[test]
    fn decay_is_geometric(th0 in -10.0f32..10.0, lr in 1e-4f64..0.5, wd in 0.0f64..0.5, k in 1usize..20) {
        let mut s = store(&[th0]);
        let mut st = TrainState::new(&s, lr, 0.0, 100, wd, 0);
        for _ in 0..k {
            set_grad(&mut s, vec![0.0]);
            adamw_step(&mut s, &mut st, lr).unwrap();
        }
        let expected = th0 as f64 * (1.0 - lr * wd).powi(k as i32);
        prop_assert!((theta(&s)[0] as f64 - expected).abs() <= 1e-5 * (1.0 + th0.abs() as f64));
    }

    #[test]
    fn quadratic_descent_any_start(init in proptest::collection::vec(-5.0f32..5.0, 1..6)) {
        prop_assume!(init.iter().all(|v| v.abs() > 1.5));
        let l = quadratic_run(&init, 100);
        prop_assert!(l.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn cosine_stays_in_range(step in 0usize..=1000, hi in 1e-5f64..1e-2, frac in 0.0f64..1.0) {
        let lo = hi * frac;
        let lr = cosine_lr(step, hi, lo, 1000).unwrap();
        let direct = lo + 0.5 * (hi - lo) * (1.0 + (PI * step as f64 / 1000.0).cos());
        prop_assert!(lr >= lo - 1e-18 && lr <= hi + 1e-18);
        prop_assert_eq!(lr, direct);
    }
}

fn tiny(grid: usize) -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        stage_depths: vec![1, 1],
        bottleneck_depth: 1,
        grid,
        state_dim: 2,
        ..ModelConfig::default()
    }
}

fn samples(n: usize, grid: usize) -> Vec<EnvironmentSample> {
    (0..n)
        .map(|i| synth_generate(100 + i as u64, grid, Mode::Srm).unwrap())
        .collect()
}

fn tiny_train_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        val_every: 3,
        lr_max: 2e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_model::<f32>(&tiny(32), 7).unwrap();
    let mut state = TrainState::new(&model.params, 1e-3, 1e-6, 50, 1e-4, 7);
    state.step = 12;
    for (i, m) in state.m.iter_mut().enumerate() {
        m.iter_mut()
            .enumerate()
            .for_each(|(k, v)| *v = (i * 31 + k) as f32 * 1e-3 - 0.5);
    }
    state
        .v
        .iter_mut()
        .for_each(|v| v.iter_mut().for_each(|x| *x = 0.125));
    let extra = [("note".to_string(), "x".to_string())]
        .into_iter()
        .collect();
    let a = dir.path().join("a.rmck");
    save_checkpoint(&a, &model, Some(&state), &extra).unwrap();
    let ckpt = read_checkpoint(&a).unwrap();
    assert_eq!(ckpt.extra, extra);
    let (m2, s2) = ckpt.into_model(Some(&model.config)).unwrap();
    assert_eq!(s2.as_ref(), Some(&state));
    for (p, q) in model.params.iter().zip(m2.params.iter()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.tensor), bits(&q.tensor), "{}", p.name);
    }
    let b = dir.path().join("b.rmck");
    save_checkpoint(&b, &m2, s2.as_ref(), &extra).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(!dir.path().join("a.tmp").exists());
}

#[test]
fn checkpoint_without_state() {
    let model = build_model::<f32>(&tiny(32), 1).unwrap();
    let bytes = encode_checkpoint(&model, None, &Default::default()).unwrap();
    let c = decode_checkpoint(&bytes).unwrap();
    assert!(c.state.is_none());
    assert_eq!(c.params, model.params);
}

#[test]
fn checkpoint_config_mismatch_lists_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rmck");
    save_checkpoint(
        &path,
        &build_model::<f32>(&tiny(32), 1).unwrap(),
        None,
        &Default::default(),
    )
    .unwrap();
    let other = ModelConfig {
        base_channels: 8,
        state_dim: 4,
        ..tiny(32)
    };
    let err = load_checkpoint(&path, Some(&other)).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Config(_)));
    assert!(msg.contains("base_channels: expected 8, found 4"), "{msg}");
    assert!(msg.contains("state_dim: expected 4, found 2"), "{msg}");
}

#[test]
fn checkpoint_corruption_rejected() {
    let model = build_model::<f32>(&tiny(32), 1).unwrap();
    let good = encode_checkpoint(&model, None, &Default::default()).unwrap();
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(d)) if d.contains("magic")));
    let mut ver = good.clone();
    ver[4] = 9;
    assert!(matches!(decode_checkpoint(&ver), Err(Error::Format(d)) if d.contains("version 9")));
    assert!(
        matches!(decode_checkpoint(&good[..good.len() - 3]), Err(Error::Format(d)) if d.contains("truncated"))
    );
    assert!(matches!(decode_checkpoint(b"RM"), Err(Error::Format(_))));
}

#[test]
fn lr_history_matches_schedule() {
    let cfg = tiny_train_cfg(7);
    let mut t = Trainer::new(
        build_model(&tiny(32), 0).unwrap(),
        samples(4, 32),
        cfg.clone(),
    )
    .unwrap();
    t.run(&[], None, &mut |_| {}).unwrap();
    assert_eq!(t.history.len(), 7);
    for r in &t.history {
        assert_eq!(
            r.lr,
            cosine_lr(r.step, cfg.lr_max, cfg.lr_min, cfg.steps).unwrap()
        );
        assert!(r.loss.total.is_finite());
        let w = cfg.loss;
        assert!(
            (w.combine(r.loss.l1, r.loss.mse, r.loss.ssim, r.loss.grad) - r.loss.total).abs()
                < 1e-6
        );
    }
    assert_eq!(t.state.step, 7);
}

#[test]
fn run_writes_telemetry_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_cfg(6);
    let mut t = Trainer::new(build_model(&tiny(32), 0).unwrap(), samples(4, 32), cfg).unwrap();
    let mut events = (0, 0);
    t.run(&samples(3, 32), Some(dir.path()), &mut |e| match e {
        Event::Step(_) => events.0 += 1,
        Event::Validation(_) => events.1 += 1,
    })
    .unwrap();
    assert_eq!(events, (6, 2));
    let tel = fs::read_to_string(dir.path().join(TELEMETRY_FILE)).unwrap();
    let lines: Vec<&str> = tel.lines().collect();
    assert_eq!(lines[0], "step,lr,loss,l1,mse,ssim_loss,grad_loss");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("0,0.002,"));
    let val = fs::read_to_string(dir.path().join(VALIDATION_FILE)).unwrap();
    assert_eq!(val.lines().count(), 3);
    assert!(dir.path().join(LAST_CHECKPOINT).exists() && dir.path().join(BEST_CHECKPOINT).exists());
    let (best_step, best_nmse) = t.best.unwrap();
    assert_eq!(
        best_nmse,
        t.validations
            .iter()
            .map(|v| v.metrics.nmse)
            .fold(f64::INFINITY, f64::min)
    );
    let best = read_checkpoint(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(best.state.unwrap().step, best_step);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let (full, part) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (train, val) = (samples(4, 32), samples(2, 32));
    let cfg = tiny_train_cfg(6);
    let model = || build_model::<f32>(&tiny(32), 3).unwrap();

    let mut a = Trainer::new(model(), train.clone(), cfg.clone()).unwrap();
    a.run(&val, Some(full.path()), &mut |_| {}).unwrap();

    let mut b = Trainer::new(
        model(),
        train.clone(),
        TrainConfig {
            stop_after: Some(3),
            ..cfg.clone()
        },
    )
    .unwrap();
    b.run(&val, Some(part.path()), &mut |_| {}).unwrap();
    assert_eq!(b.state.step, 3);
    let mut c = Trainer::resume(&part.path().join(LAST_CHECKPOINT), train, cfg.clone()).unwrap();
    c.run(&val, Some(part.path()), &mut |_| {}).unwrap();
    assert_eq!(c.history[0], a.history[3]);

    let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&full, LAST_CHECKPOINT), read(&part, LAST_CHECKPOINT));
    assert_eq!(read(&full, BEST_CHECKPOINT), read(&part, BEST_CHECKPOINT));
    assert_eq!(read(&full, TELEMETRY_FILE), read(&part, TELEMETRY_FILE));

    let changed = TrainConfig {
        lr_max: 1e-3,
        ..cfg
    };
    let err = Trainer::resume(&part.path().join(LAST_CHECKPOINT), samples(4, 32), changed)
        .err()
        .unwrap();
    assert!(
        err.to_string()
            .contains("lr_max: expected 0.001, found 0.002"),
        "{err}"
    );
}

#[test]
fn non_finite_loss_aborts_with_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        stop_after: Some(3),
        ..tiny_train_cfg(6)
    };
    let mut t = Trainer::new(build_model(&tiny(32), 0).unwrap(), samples(2, 32), cfg).unwrap();
    t.run(&[], Some(dir.path()), &mut |_| {}).unwrap();
    t.cfg.stop_after = None;
    t.model.params.iter_mut().next().unwrap().tensor.data_mut()[0] = f32::NAN;
    let err = t.run(&[], Some(dir.path()), &mut |_| {}).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Numeric(_)), "{msg}");
    assert!(msg.contains("step 3") && msg.contains("last.rmck"), "{msg}");
}

#[test]
fn mismatched_samples_rejected() {
    let model = build_model::<f32>(&tiny(64), 0).unwrap();
    assert!(matches!(
        Trainer::new(model, samples(4, 32), tiny_train_cfg(4)),
        Err(Error::Config(_))
    ));
    let drm = (0..4)
        .map(|i| synth_generate(i, 32, Mode::Drm).unwrap())
        .collect();
    let model = build_model::<f32>(&tiny(32), 0).unwrap();
    assert!(matches!(
        Trainer::new(model, drm, tiny_train_cfg(4)),
        Err(Error::Config(_))
    ));
}

#[test]
fn overfits_one_sample() {
    let cfg_model = ModelConfig {
        base_channels: 8,
        grid: 32,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        steps: 500,
        batch_size: 1,
        lr_max: 3e-3,
        val_every: 500,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(build_model(&cfg_model, 0).unwrap(), samples(1, 32), cfg).unwrap();
    t.run(&[], None, &mut |_| {}).unwrap();
    let first = t.history[0].loss.total;
    let best = t
        .history
        .iter()
        .map(|r| r.loss.total)
        .fold(f64::INFINITY, f64::min);
    let last = t.history.last().unwrap().loss.total;
    println!("overfit: step0 {first:.4} best {best:.4} last {last:.4}");
    assert!(last < 0.1 * first, "step0 {first} last {last}");
}
