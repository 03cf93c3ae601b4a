use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use radiomamba_core::autodiff::Tensor;
use radiomamba_core::data::{
    load_dataset, pathloss_oracle, read_f32grid, stack, Environment, EnvironmentSample, Split,
    SynthConfig,
};
use radiomamba_core::metrics::{map_metrics, Metrics, MetricsAccumulator};
use radiomamba_core::train::{evaluate, load_checkpoint};
use radiomamba_core::{Error, Result};
use serde_json::json;

use crate::infer::map_dirs;

#[derive(clap::Args)]
pub struct Args {
    /// Checkpoint to evaluate
    #[arg(
        long,
        conflicts_with = "predictions",
        required_unless_present = "predictions"
    )]
    ckpt: Option<PathBuf>,
    /// Score saved `pred_<k>.f32grid` maps (as written by `infer`) instead of a checkpoint
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Text report path; a JSON twin is written next to it
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Timed single-sample runs, after the warmup runs
    #[arg(long, default_value_t = 20)]
    latency_runs: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Distance scale of the free-space baseline
    #[arg(long, default_value_t = SynthConfig::default().distance_scale)]
    free_space_scale: f64,
}

fn per_map(
    samples: &[EnvironmentSample],
    pred: impl Fn(usize, &EnvironmentSample) -> Result<Vec<f64>>,
) -> Result<Metrics> {
    let mut acc = MetricsAccumulator::default();
    for (i, s) in samples.iter().enumerate() {
        let t: Vec<f64> = s.p.iter().map(|&v| v as f64).collect();
        acc.push(map_metrics(&pred(i, s)?, &t, s.grid, s.grid)?);
    }
    acc.mean()
}

/// Gain with every obstacle removed.
pub fn free_space(s: &EnvironmentSample, scale: f64) -> Result<Vec<f64>> {
    let n = s.grid;
    let env = Environment {
        grid: n,
        mode: s.mode,
        h_s: vec![0.0; n * n],
        h_d: vec![0.0; n * n],
    };
    let tx = s
        .transmitter()
        .ok_or_else(|| Error::Domain("sample has no transmitter".into()))?;
    Ok(pathloss_oracle(
        &env,
        tx,
        &SynthConfig {
            distance_scale: scale,
            ..SynthConfig::new(n, s.mode)
        },
    ))
}

#[derive(Clone, Copy, Debug)]
struct Latency {
    mean: f64,
    median: f64,
    p95: f64,
}

/// Nearest-rank percentiles of sorted `v`.
fn latency(mut v: Vec<f64>) -> Latency {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let rank = |q: f64| v[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
    Latency {
        mean: v.iter().sum::<f64>() / n as f64,
        median: rank(0.5),
        p95: rank(0.95),
    }
}

fn load_predictions(dir: &Path, samples_per_map: &[(String, usize)]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for (name, count) in samples_per_map {
        for k in 0..*count {
            let path = dir.join(name).join(format!("pred_{k}.f32grid"));
            out.push(
                read_f32grid(&path)?
                    .2
                    .into_iter()
                    .map(|v| v as f64)
                    .collect(),
            );
        }
    }
    Ok(out)
}

fn metrics_json(m: &Metrics) -> serde_json::Value {
    json!({ "nmse": m.nmse, "rmse": m.rmse, "ssim": m.ssim, "psnr": m.psnr })
}

pub fn run(a: Args) -> Result<()> {
    if a.latency_runs < 20 {
        return Err(Error::Config(format!(
            "--latency-runs must be at least 20, got {}",
            a.latency_runs
        )));
    }
    let (manifest, samples) = load_dataset(&a.data, a.split)?;
    if samples.is_empty() {
        return Err(Error::data(&a.data, format!("split {} is empty", a.split)));
    }
    let (model_metrics, lat, source) = match (&a.ckpt, &a.predictions) {
        (Some(ckpt), _) => {
            let (model, _) = load_checkpoint(ckpt, None)?;
            let m = evaluate(&model, &samples, a.batch_size)?;
            let (x, _): (Tensor<f32>, _) = stack(&[&samples[0]])?;
            for _ in 0..a.warmup {
                model.predict(&x)?;
            }
            let mut times = Vec::with_capacity(a.latency_runs);
            for _ in 0..a.latency_runs {
                let t0 = Instant::now();
                std::hint::black_box(model.predict(&x)?);
                times.push(t0.elapsed().as_secs_f64());
            }
            (m, Some(latency(times)), ckpt.display().to_string())
        }
        (None, Some(dir)) => {
            let split_dir = radiomamba_core::data::split_dir(&a.data, a.split);
            let mut layout = Vec::new();
            for d in map_dirs(&split_dir)? {
                let n = fs::read_dir(&d)?
                    .filter_map(|e| e.ok())
                    .filter(|e| e.file_name().to_string_lossy().starts_with("tx_"))
                    .count();
                layout.push((
                    d.file_name()
                        .expect("map dir name")
                        .to_string_lossy()
                        .into_owned(),
                    n,
                ));
            }
            let preds = load_predictions(dir, &layout)?;
            if preds.len() != samples.len() {
                return Err(Error::data(
                    dir,
                    format!("{} predictions for {} samples", preds.len(), samples.len()),
                ));
            }
            (
                per_map(&samples, |i, _| Ok(preds[i].clone()))?,
                None,
                dir.display().to_string(),
            )
        }
        (None, None) => unreachable!("clap requires --ckpt or --predictions"),
    };
    let free = per_map(&samples, |_, s| free_space(s, a.free_space_scale))?;
    let mean_target = {
        let all: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.p.iter().map(|&v| v as f64))
            .collect();
        let mu = all.iter().sum::<f64>() / all.len() as f64;
        per_map(&samples, |_, s| Ok(vec![mu; s.grid * s.grid]))?
    };

    let mut text = format!(
        "source={source}\ndata={}\nsplit={}\nsamples={}\nmode={}\ngrid={}\n{}",
        a.data.display(),
        a.split,
        samples.len(),
        manifest.mode,
        manifest.grid,
        model_metrics.to_key_value()
    );
    for (name, m) in [("free_space", &free), ("mean_target", &mean_target)] {
        text += &format!(
            "{name}.nmse={:.6e}\n{name}.ssim={:.6}\n{name}.nmse_ratio={:.3}\n",
            m.nmse,
            m.ssim,
            m.nmse / model_metrics.nmse
        );
    }
    if let Some(l) = lat {
        text += &format!(
            "latency.runs={}\nlatency.warmup={}\nlatency.mean_s={:.6}\nlatency.median_s={:.6}\nlatency.p95_s={:.6}\n",
            a.latency_runs, a.warmup, l.mean, l.median, l.p95
        );
    }
    let report = json!({
        "source": source,
        "data": a.data.display().to_string(),
        "split": a.split.to_string(),
        "samples": samples.len(),
        "metrics": metrics_json(&model_metrics),
        "baselines": {
            "free_space": metrics_json(&free),
            "mean_target": metrics_json(&mean_target),
        },
        "latency_s": lat.map(|l| json!({
            "runs": a.latency_runs, "warmup": a.warmup, "mean": l.mean, "median": l.median, "p95": l.p95,
        })),
    });
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let json_path = json_twin(&a.report);
    fs::write(&a.report, &text)?;
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&report).expect("json"),
    )?;
    print!("{text}");
    Ok(())
}

fn json_twin(report: &Path) -> PathBuf {
    if report.extension().is_some_and(|e| e == "json") {
        report.with_extension("report.json")
    } else {
        report.with_extension("json")
    }
}
