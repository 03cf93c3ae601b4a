use std::fs;
use std::path::PathBuf;

use radiomamba_core::data::{load_dataset, Split};
use radiomamba_core::train::{Event, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT};
use radiomamba_core::unet::build_model;
use radiomamba_core::{Error, Result};

use crate::config::{resolve, RESOLVED_CONFIG_FILE};

#[derive(clap::Args)]
pub struct Args {
    /// `key=value` file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Blocks per encoder stage, e.g. `2,2,2`
    #[arg(long)]
    stage_depths: Option<String>,
    #[arg(long)]
    bottleneck_depth: Option<usize>,
    #[arg(long)]
    state_dim: Option<usize>,
    /// `depthwise_separable` or `standard`
    #[arg(long)]
    conv_variant: Option<String>,
    /// Drop the selective-scan branch from every block
    #[arg(long)]
    no_mamba: bool,
    /// Multiply the scan output by a SiLU gate
    #[arg(long)]
    gated: bool,
    /// `sequential`, `parallel` or `parallel:<chunk>`
    #[arg(long)]
    scan_mode: Option<String>,
    /// `l1,mse,ssim,grad`
    #[arg(long)]
    loss_weights: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// 0 disables clipping
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    val_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from `<out>/last.rmck`
    #[arg(long)]
    resume: bool,
    /// Print a progress line every this many steps; 0 silences them
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

impl Args {
    fn flags(&self) -> Vec<(&'static str, String)> {
        let mut f: Vec<(&'static str, String)> = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                f.push((k, v));
            }
        };
        put("data", self.data.as_ref().map(|p| p.display().to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        put("mode", self.mode.clone());
        put("grid", self.grid.map(|v| v.to_string()));
        put("base_channels", self.base_channels.map(|v| v.to_string()));
        put("stage_depths", self.stage_depths.clone());
        put(
            "bottleneck_depth",
            self.bottleneck_depth.map(|v| v.to_string()),
        );
        put("state_dim", self.state_dim.map(|v| v.to_string()));
        put("conv_variant", self.conv_variant.clone());
        put("mamba_branch", self.no_mamba.then(|| "false".into()));
        put("gated", self.gated.then(|| "true".into()));
        put("scan_mode", self.scan_mode.clone());
        put("loss_weights", self.loss_weights.clone());
        put("steps", self.steps.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("lr_max", self.lr_max.map(|v| v.to_string()));
        put("lr_min", self.lr_min.map(|v| v.to_string()));
        put("weight_decay", self.weight_decay.map(|v| v.to_string()));
        put("clip_norm", self.clip_norm.map(|v| v.to_string()));
        put("val_every", self.val_every.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        f
    }
}

pub fn run(a: Args) -> Result<()> {
    let (rc, manifest) = resolve(a.config.as_deref(), &a.flags())?;
    let (_, train) = load_dataset(&rc.data, Split::Train)?;
    let val = if manifest.count(Split::Val) > 0 {
        load_dataset(&rc.data, Split::Val)?.1
    } else {
        Vec::new()
    };
    fs::create_dir_all(&rc.out)?;
    let last = rc.out.join(LAST_CHECKPOINT);
    let mut trainer = if a.resume {
        if !last.exists() {
            return Err(Error::Config(format!(
                "--resume given but {} does not exist",
                last.display()
            )));
        }
        let t = Trainer::resume(&last, train, rc.train.clone())?;
        if t.model.config != rc.model {
            let diff = radiomamba_core::train::config_mismatch(&rc.model, &t.model.config)
                .unwrap_or_default();
            return Err(Error::Config(format!(
                "checkpoint model differs from the run config: {diff}"
            )));
        }
        t
    } else {
        if last.exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; pass --resume or pick another --out",
                rc.out.display()
            )));
        }
        Trainer::new(
            build_model(&rc.model, rc.train.seed)?,
            train,
            rc.train.clone(),
        )?
    };
    fs::write(rc.out.join(RESOLVED_CONFIG_FILE), rc.to_text())?;
    eprintln!(
        "training {} parameters for {} steps from step {} ({} train, {} val samples)",
        trainer.model.count_parameters(),
        rc.train.steps,
        trainer.state.step,
        manifest.count(Split::Train),
        val.len()
    );
    let steps = rc.train.steps;
    let log_every = a.log_every;
    trainer.run(&val, Some(&rc.out), &mut |e| match e {
        Event::Step(r) if log_every > 0 && (r.step % log_every == 0 || r.step + 1 == steps) => {
            let l = &r.loss;
            eprintln!(
                "step {:>6} lr {:.3e} loss {:.5} l1 {:.5} mse {:.5} ssim {:.5} grad {:.5} |g| {:.3}",
                r.step, r.lr, l.total, l.l1, l.mse, l.ssim, l.grad, r.grad_norm
            );
        }
        Event::Validation(v) => {
            let m = &v.metrics;
            eprintln!("val  {:>6} nmse {:.5} rmse {:.5} ssim {:.4} psnr {:.2}", v.step, m.nmse, m.rmse, m.ssim, m.psnr);
        }
        _ => {}
    })?;
    match trainer.best {
        Some((step, nmse)) => println!(
            "done: best validation nmse {nmse:.6} at step {step} ({})",
            rc.out.join(BEST_CHECKPOINT).display()
        ),
        None => println!("done: {}", last.display()),
    }
    Ok(())
}
