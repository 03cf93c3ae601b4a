use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::{read_checkpoint, save_checkpoint};
use super::optim::{adamw_step, clip_grad_norm, TrainState};
use crate::autodiff::Tape;
use crate::data::{eval_batches, Batcher, EnvironmentSample};
use crate::error::{Error, Result};
use crate::kv::{parse_list, parse_value};
use crate::loss::{composite_loss, LossBreakdown, LossWeights};
use crate::metrics::{metrics, Metrics, MetricsAccumulator};
use crate::unet::{Model, ModelConfig};

pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const LAST_CHECKPOINT: &str = "last.rmck";
pub const BEST_CHECKPOINT: &str = "best.rmck";
pub const TELEMETRY_HEADER: &str = "step,lr,loss,l1,mse,ssim_loss,grad_loss";
pub const VALIDATION_HEADER: &str = "step,nmse,rmse,ssim,psnr";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    /// Validate and checkpoint every this many steps, and after the last one.
    pub val_every: usize,
    pub loss: LossWeights,
    pub seed: u64,
    /// Stop early after this many completed steps, keeping the schedule of
    /// `steps`. Used to produce resumable partial runs.
    pub stop_after: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 8,
            lr_max: 9e-4,
            lr_min: 1e-6,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            val_every: 250,
            loss: LossWeights::default(),
            seed: 0,
            stop_after: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.val_every == 0 {
            return Err(Error::Config(
                "steps, batch_size and val_every must be > 0".into(),
            ));
        }
        if !(self.lr_max > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_max {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr_max and lr_max > 0, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config(
                "weight_decay and clip_norm must be >= 0".into(),
            ));
        }
        self.loss.validate()
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let w = &self.loss;
        vec![
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_max", self.lr_max.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("val_every", self.val_every.to_string()),
            (
                "loss_weights",
                format!("{},{},{},{}", w.l1, w.mse, w.ssim, w.grad),
            ),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Applies one `key=value` pair; returns `false` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "steps" => self.steps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr_max" => self.lr_max = parse_value(key, value)?,
            "lr_min" => self.lr_min = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "val_every" => self.val_every = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "loss_weights" => self.loss = parse_loss_weights(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// `l1,mse,ssim,grad`, e.g. `0.4,0.1,0.2,0.3`.
pub fn parse_loss_weights(value: &str) -> Result<LossWeights> {
    let w: Vec<f64> = parse_list("loss_weights", value)?;
    let [l1, mse, ssim, grad] = w[..] else {
        return Err(Error::Config(format!(
            "loss_weights needs 4 values, got '{value}'"
        )));
    };
    let w = LossWeights {
        l1,
        mse,
        ssim,
        grad,
    };
    w.validate()?;
    Ok(w)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValRecord {
    pub step: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Copy, Debug)]
pub enum Event<'a> {
    Step(&'a StepRecord),
    Validation(&'a ValRecord),
}

pub struct Trainer {
    pub model: Model<f32>,
    pub state: TrainState,
    pub cfg: TrainConfig,
    batcher: Batcher,
    /// Completed step count and NMSE of the best validation so far.
    pub best: Option<(usize, f64)>,
    pub history: Vec<StepRecord>,
    pub validations: Vec<ValRecord>,
    last_saved: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: Model<f32>, train: Vec<EnvironmentSample>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_samples(&model.config, &train)?;
        let state = TrainState::new(
            &model.params,
            cfg.lr_max,
            cfg.lr_min,
            cfg.steps,
            cfg.weight_decay,
            cfg.seed,
        );
        let batcher = Batcher::new(train, cfg.batch_size, cfg.seed)?;
        Ok(Trainer {
            model,
            state,
            cfg,
            batcher,
            best: None,
            history: Vec::new(),
            validations: Vec::new(),
            last_saved: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::run`]. The training
    /// configuration must match the one stored in the checkpoint.
    pub fn resume(path: &Path, train: Vec<EnvironmentSample>, cfg: TrainConfig) -> Result<Self> {
        let ckpt = read_checkpoint(path)?;
        let extra = ckpt.extra.clone();
        let (model, state) = ckpt.into_model(None)?;
        let state = state
            .ok_or_else(|| Error::Format(format!("{} holds no optimizer state", path.display())))?;
        let diffs: Vec<String> = cfg
            .to_kv()
            .into_iter()
            .filter(|(k, v)| {
                extra
                    .get(&format!("cfg.{k}"))
                    .is_some_and(|found| found != v)
            })
            .map(|(k, v)| format!("{k}: expected {v}, found {}", extra[&format!("cfg.{k}")]))
            .collect();
        if !diffs.is_empty() {
            return Err(Error::Config(format!(
                "cannot resume with a different training config: {}",
                diffs.join("; ")
            )));
        }
        let mut t = Trainer::new(model, train, cfg)?;
        t.state = state;
        t.best = match (extra.get("best_step"), extra.get("best_nmse")) {
            (Some(s), Some(n)) => {
                Some((parse_value("best_step", s)?, parse_value("best_nmse", n)?))
            }
            _ => None,
        };
        t.last_saved = Some(path.to_path_buf());
        Ok(t)
    }

    pub fn done(&self) -> bool {
        self.state.step
            >= self
                .cfg
                .stop_after
                .unwrap_or(self.cfg.steps)
                .min(self.cfg.steps)
    }

    /// One optimizer step on the batch belonging to the current step index.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.state.step;
        let lr = self.state.lr(step)?;
        let (x, y) = self.batcher.batch::<f32>(step)?;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.model.params);
        let xv = tape.leaf(&x);
        let yv = tape.leaf(&y);
        let vars = self
            .model
            .forward(&mut tape, &bound, xv)
            .and_then(|pred| composite_loss(&mut tape, pred, yv, &self.cfg.loss))
            .map_err(|e| self.numeric_abort(e, step))?;
        let loss = vars.read(&tape);
        if !loss.total.is_finite() {
            return Err(self.abort(format!("non-finite loss {} at step {step}", loss.total)));
        }
        let grads = tape.backward(vars.total)?;
        self.model.params.zero_grads();
        grads.accumulate_into(&mut self.model.params, &bound)?;
        let grad_norm = if self.cfg.clip_norm > 0.0 {
            clip_grad_norm(&mut self.model.params, self.cfg.clip_norm)
        } else {
            super::optim::grad_norm(&self.model.params)
        };
        adamw_step(&mut self.model.params, &mut self.state, lr)
            .map_err(|e| self.numeric_abort(e, step))?;
        let rec = StepRecord {
            step,
            lr,
            loss,
            grad_norm,
        };
        self.history.push(rec);
        Ok(rec)
    }

    fn numeric_abort(&self, e: Error, step: usize) -> Error {
        match e {
            Error::Numeric(d) => self.abort(format!("{d} at step {step}")),
            other => other,
        }
    }

    fn abort(&self, detail: String) -> Error {
        let last = self
            .last_saved
            .as_ref()
            .map_or("none".to_string(), |p| p.display().to_string());
        Error::Numeric(format!("{detail}; last good checkpoint: {last}"))
    }

    pub fn evaluate(&self, samples: &[EnvironmentSample]) -> Result<Metrics> {
        evaluate(&self.model, samples, self.cfg.batch_size)
    }

    fn extra(&self) -> BTreeMap<String, String> {
        let mut extra: BTreeMap<String, String> = self
            .cfg
            .to_kv()
            .into_iter()
            .map(|(k, v)| (format!("cfg.{k}"), v))
            .collect();
        extra.remove("cfg.stop_after");
        if let Some((s, n)) = self.best {
            extra.insert("best_step".into(), s.to_string());
            extra.insert("best_nmse".into(), n.to_string());
        }
        extra
    }

    /// Trains until done. With `out`, writes telemetry, validation history and
    /// the last and best checkpoints there; telemetry is appended on resume.
    pub fn run(
        &mut self,
        val: &[EnvironmentSample],
        out: Option<&Path>,
        progress: &mut dyn FnMut(Event),
    ) -> Result<()> {
        let mut files = match out {
            Some(dir) => Some(RunFiles::open(dir, self.state.step > 0)?),
            None => None,
        };
        while !self.done() {
            let rec = self.step()?;
            if let Some(f) = &mut files {
                f.log_step(&rec)?;
            }
            progress(Event::Step(&rec));
            let completed = self.state.step;
            if completed.is_multiple_of(self.cfg.val_every) || self.done() {
                let improved = if val.is_empty() {
                    false
                } else {
                    let v = ValRecord {
                        step: completed,
                        metrics: self.evaluate(val)?,
                    };
                    let better = self.best.is_none_or(|(_, b)| v.metrics.nmse < b);
                    if better {
                        self.best = Some((completed, v.metrics.nmse));
                    }
                    if let Some(f) = &mut files {
                        f.log_val(&v)?;
                    }
                    progress(Event::Validation(&v));
                    self.validations.push(v);
                    better
                };
                if let Some(dir) = out {
                    let extra = self.extra();
                    let last = dir.join(LAST_CHECKPOINT);
                    save_checkpoint(&last, &self.model, Some(&self.state), &extra)?;
                    if improved {
                        save_checkpoint(
                            &dir.join(BEST_CHECKPOINT),
                            &self.model,
                            Some(&self.state),
                            &extra,
                        )?;
                    }
                    self.last_saved = Some(last);
                }
            }
        }
        Ok(())
    }
}

fn check_samples(cfg: &ModelConfig, samples: &[EnvironmentSample]) -> Result<()> {
    match samples
        .iter()
        .find(|s| s.grid != cfg.grid || s.mode.input_channels() != cfg.input_channels)
    {
        Some(s) => Err(Error::Config(format!(
            "sample grid {} / {} channels does not match model grid {} / {} channels",
            s.grid,
            s.mode.input_channels(),
            cfg.grid,
            cfg.input_channels
        ))),
        None => Ok(()),
    }
}

/// Per-map mean metrics of `model` over `samples`.
pub fn evaluate(
    model: &Model<f32>,
    samples: &[EnvironmentSample],
    batch_size: usize,
) -> Result<Metrics> {
    check_samples(&model.config, samples)?;
    let mut acc = MetricsAccumulator::default();
    for batch in eval_batches::<f32>(samples, batch_size) {
        let (x, y) = batch?;
        let pred = model.predict(&x)?;
        let n = x.shape()[0];
        acc.push_weighted(metrics(&pred, &y)?, n);
    }
    acc.mean()
}

struct RunFiles {
    telemetry: File,
    validation: File,
}

impl RunFiles {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let open = |name: &str, header: &str| -> Result<File> {
            let path = dir.join(name);
            let fresh = !append || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)?;
            if fresh {
                writeln!(f, "{header}")?;
            }
            Ok(f)
        };
        Ok(RunFiles {
            telemetry: open(TELEMETRY_FILE, TELEMETRY_HEADER)?,
            validation: open(VALIDATION_FILE, VALIDATION_HEADER)?,
        })
    }

    fn log_step(&mut self, r: &StepRecord) -> Result<()> {
        let l = &r.loss;
        writeln!(
            self.telemetry,
            "{},{},{},{},{},{},{}",
            r.step, r.lr, l.total, l.l1, l.mse, l.ssim, l.grad
        )?;
        Ok(())
    }

    fn log_val(&mut self, v: &ValRecord) -> Result<()> {
        let m = &v.metrics;
        writeln!(
            self.validation,
            "{},{},{},{},{}",
            v.step, m.nmse, m.rmse, m.ssim, m.psnr
        )?;
        self.validation.flush()?;
        Ok(())
    }
}
