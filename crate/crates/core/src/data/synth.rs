//! Synthetic environments with a closed-form pathloss oracle:
//! `p = exp(-kappa * n_block) / (1 + d / scale)` on free pixels, 0 inside obstacles.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sample::{EnvironmentSample, Mode};
use crate::error::{Error, Result};
use crate::rng::{indexed_stream, Stream};

pub const MIN_SYNTH_GRID: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub grid: usize,
    pub mode: Mode,
    /// Distance at which the free-space gain halves, in pixels.
    pub distance_scale: f64,
    /// Attenuation per blocking obstacle pixel.
    pub kappa: f64,
    pub buildings: (usize, usize),
    pub building_size: (usize, usize),
    pub vehicles: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid: 64,
            mode: Mode::Srm,
            distance_scale: 8.0,
            kappa: 0.5,
            buildings: (4, 10),
            building_size: (4, 12),
            vehicles: (0, 8),
        }
    }
}

impl SynthConfig {
    pub fn new(grid: usize, mode: Mode) -> Self {
        SynthConfig {
            grid,
            mode,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < MIN_SYNTH_GRID {
            return Err(Error::Config(format!(
                "synthetic grid must be >= {MIN_SYNTH_GRID}, got {}",
                self.grid
            )));
        }
        let ranges = [
            ("buildings", self.buildings),
            ("building_size", self.building_size),
            ("vehicles", self.vehicles),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi {
                return Err(Error::Config(format!("{name} range {lo}..={hi} is empty")));
            }
        }
        if self.building_size.0 == 0 || self.building_size.1 > self.grid {
            return Err(Error::Config(format!(
                "building sizes {:?} do not fit a {} grid",
                self.building_size, self.grid
            )));
        }
        if !(self.distance_scale > 0.0) || !(self.kappa >= 0.0) {
            return Err(Error::Config(
                "distance_scale must be > 0 and kappa >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Obstacle layout of one map before a transmitter is placed.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    pub grid: usize,
    pub mode: Mode,
    pub h_s: Vec<f32>,
    pub h_d: Vec<f32>,
}

impl Environment {
    pub fn blocked(&self, k: usize) -> bool {
        self.h_s[k] == 1.0 || self.h_d[k] == 1.0
    }

    pub fn free_pixels(&self) -> Vec<usize> {
        (0..self.grid * self.grid)
            .filter(|&k| !self.blocked(k))
            .collect()
    }
}

pub fn generate_environment<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Result<Environment> {
    cfg.validate()?;
    let n = cfg.grid;
    let mut h_s = vec![0.0f32; n * n];
    let count = rng.gen_range(cfg.buildings.0..=cfg.buildings.1);
    for _ in 0..count {
        let bh = rng.gen_range(cfg.building_size.0..=cfg.building_size.1);
        let bw = rng.gen_range(cfg.building_size.0..=cfg.building_size.1);
        let top = rng.gen_range(0..=n - bh);
        let left = rng.gen_range(0..=n - bw);
        for i in top..top + bh {
            h_s[i * n + left..i * n + left + bw].fill(1.0);
        }
    }
    let mut h_d = vec![0.0f32; n * n];
    if cfg.mode == Mode::Drm {
        let count = rng.gen_range(cfg.vehicles.0..=cfg.vehicles.1);
        let mut placed = 0;
        // a vehicle needs two horizontally adjacent free pixels
        for _ in 0..count * 50 {
            if placed == count {
                break;
            }
            let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n - 1));
            let (a, b) = (i * n + j, i * n + j + 1);
            if h_s[a] == 0.0 && h_s[b] == 0.0 && h_d[a] == 0.0 && h_d[b] == 0.0 {
                h_d[a] = 1.0;
                h_d[b] = 1.0;
                placed += 1;
            }
        }
    }
    Ok(Environment {
        grid: n,
        mode: cfg.mode,
        h_s,
        h_d,
    })
}

/// Places a transmitter uniformly over free pixels and evaluates the oracle.
pub fn place_transmitter<R: Rng>(
    env: &Environment,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<EnvironmentSample> {
    let free = env.free_pixels();
    if free.is_empty() {
        return Err(Error::Domain(
            "no free pixel left for the transmitter".into(),
        ));
    }
    let k = free[rng.gen_range(0..free.len())];
    let tx = (k / env.grid, k % env.grid);
    let mut r = vec![0.0f32; env.grid * env.grid];
    r[k] = 1.0;
    let p = pathloss_oracle(env, tx, cfg)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    Ok(EnvironmentSample {
        grid: env.grid,
        mode: env.mode,
        h_s: env.h_s.clone(),
        h_d: env.h_d.clone(),
        r,
        p,
    })
}

/// Deterministic sample for `(seed, grid, mode)` with default oracle constants.
pub fn synth_generate(seed: u64, grid: usize, mode: Mode) -> Result<EnvironmentSample> {
    let cfg = SynthConfig::new(grid, mode);
    synth_generate_with(seed, &cfg)
}

pub fn synth_generate_with(seed: u64, cfg: &SynthConfig) -> Result<EnvironmentSample> {
    let mut rng = indexed_stream(seed, Stream::Synth, 0);
    let env = generate_environment(cfg, &mut rng)?;
    place_transmitter(&env, cfg, &mut rng)
}

/// Pixels strictly between `a` and `b` on the Bresenham line, in order from `a`.
pub fn bresenham_between(a: (usize, usize), b: (usize, usize)) -> Vec<(usize, usize)> {
    let (mut x, mut y) = (a.0 as i64, a.1 as i64);
    let (x1, y1) = (b.0 as i64, b.1 as i64);
    let (dx, dy) = ((x1 - x).abs(), -(y1 - y).abs());
    let (sx, sy) = (if x < x1 { 1 } else { -1 }, if y < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    let mut out = Vec::new();
    loop {
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        if x == x1 && y == y1 {
            break;
        }
        out.push((x as usize, y as usize));
    }
    out
}

/// Oracle gain of every pixel for a transmitter at `tx`.
pub fn pathloss_oracle(env: &Environment, tx: (usize, usize), cfg: &SynthConfig) -> Vec<f64> {
    let n = env.grid;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            if env.blocked(k) {
                continue;
            }
            let d = ((i as f64 - tx.0 as f64).powi(2) + (j as f64 - tx.1 as f64).powi(2)).sqrt();
            let blocks = bresenham_between(tx, (i, j))
                .into_iter()
                .filter(|&(a, b)| env.blocked(a * n + b))
                .count();
            p[k] = (-cfg.kappa * blocks as f64).exp() / (1.0 + d / cfg.distance_scale);
        }
    }
    p
}
