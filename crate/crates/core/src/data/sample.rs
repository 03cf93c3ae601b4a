use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static radio maps carry buildings only; dynamic maps add vehicles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Srm,
    Drm,
}

impl Mode {
    pub fn input_channels(self) -> usize {
        match self {
            Mode::Srm => 2,
            Mode::Drm => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Srm => "srm",
            Mode::Drm => "drm",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "srm" => Ok(Mode::Srm),
            "drm" => Ok(Mode::Drm),
            _ => Err(Error::Config(format!("unknown mode '{s}' (srm|drm)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One transmitter placement in one environment. All grids are row-major
/// `grid x grid`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentSample {
    pub grid: usize,
    pub mode: Mode,
    /// Static obstacles, 0 or 1.
    pub h_s: Vec<f32>,
    /// Dynamic obstacles, 0 or 1; all zero for static maps.
    pub h_d: Vec<f32>,
    /// One-hot transmitter position.
    pub r: Vec<f32>,
    /// Normalized pathloss in `[0, 1]`.
    pub p: Vec<f32>,
}

impl EnvironmentSample {
    /// `(row, col)` of the transmitter pixel.
    pub fn transmitter(&self) -> Option<(usize, usize)> {
        self.r
            .iter()
            .position(|&v| v == 1.0)
            .map(|k| (k / self.grid, k % self.grid))
    }

    /// Checks the sample invariants; `Err` carries a description.
    pub fn check(&self) -> std::result::Result<(), String> {
        let n = self.grid * self.grid;
        for (name, g) in [
            ("buildings", &self.h_s),
            ("vehicles", &self.h_d),
            ("transmitter", &self.r),
            ("gain", &self.p),
        ] {
            if g.len() != n {
                return Err(format!("{name} has {} pixels, expected {n}", g.len()));
            }
        }
        let binary = |g: &[f32]| g.iter().all(|&v| v == 0.0 || v == 1.0);
        if !binary(&self.h_s) || !binary(&self.h_d) || !binary(&self.r) {
            return Err("obstacle and transmitter grids must be binary".into());
        }
        let hot = self.r.iter().filter(|&&v| v == 1.0).count();
        if hot != 1 {
            return Err(format!(
                "transmitter grid has {hot} hot pixels, expected exactly 1"
            ));
        }
        if self.mode == Mode::Srm && self.h_d.iter().any(|&v| v != 0.0) {
            return Err("static map with dynamic obstacles".into());
        }
        let k = self.r.iter().position(|&v| v == 1.0).unwrap_or(0);
        if self.h_s[k] == 1.0 {
            return Err("transmitter lies inside a static obstacle".into());
        }
        if self.p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("gain values must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Input channels `[h_s, r]` or `[h_s, h_d, r]`, concatenated.
    pub fn input_planes(&self) -> Vec<&[f32]> {
        match self.mode {
            Mode::Srm => vec![&self.h_s, &self.r],
            Mode::Drm => vec![&self.h_s, &self.h_d, &self.r],
        }
    }
}
