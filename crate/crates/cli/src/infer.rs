use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use radiomamba_core::autodiff::Tensor;
use radiomamba_core::data::{
    detect_format, load_map_inputs, stack, write_f32grid, write_png_gray8, Mode,
};
use radiomamba_core::train::load_checkpoint;
use radiomamba_core::unet::ModelConfig;
use radiomamba_core::{Error, Result};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    ckpt: PathBuf,
    /// A map directory, or a directory whose subdirectories are maps
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn mode_of(cfg: &ModelConfig) -> Result<Mode> {
    [Mode::Srm, Mode::Drm]
        .into_iter()
        .find(|m| m.input_channels() == cfg.input_channels)
        .ok_or_else(|| Error::Config(format!("no input mode has {} channels", cfg.input_channels)))
}

/// `dir` itself when it is a map directory, else its map subdirectories in
/// name order.
pub fn map_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if detect_format(dir).is_ok() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::data(dir, e.to_string()))? {
        let p = entry?.path();
        if p.is_dir() && detect_format(&p).is_ok() {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::data(dir, "no map directories found"));
    }
    Ok(out)
}

pub fn run(a: Args) -> Result<()> {
    let (model, _) = load_checkpoint(&a.ckpt, None)?;
    let (mode, grid) = (mode_of(&model.config)?, model.config.grid);
    let mut timing = String::from("map,tx,seconds\n");
    let (mut count, mut total) = (0usize, 0.0f64);
    for dir in map_dirs(&a.input_dir)? {
        let name = dir
            .file_name()
            .map_or_else(|| "map".into(), |n| n.to_string_lossy().into_owned());
        let samples = load_map_inputs(&dir, mode, grid, detect_format(&dir)?)?;
        let out_dir = a.out.join(&name);
        fs::create_dir_all(&out_dir)?;
        for (k, s) in samples.iter().enumerate() {
            let (x, _): (Tensor<f32>, _) = stack(&[s])?;
            let t0 = Instant::now();
            let pred = model.predict(&x)?;
            let secs = t0.elapsed().as_secs_f64();
            let p = pred.data();
            let bytes: Vec<u8> = p
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            write_png_gray8(&out_dir.join(format!("pred_{k}.png")), grid, grid, &bytes)?;
            write_f32grid(&out_dir.join(format!("pred_{k}.f32grid")), grid, grid, p)?;
            writeln!(timing, "{name},{k},{secs:.6}").expect("string write");
            count += 1;
            total += secs;
        }
    }
    fs::write(a.out.join("timing.csv"), timing)?;
    println!(
        "predicted {count} maps into {}, mean {:.4} s per map",
        a.out.display(),
        total / count.max(1) as f64
    );
    Ok(())
}
