//! Run configuration for `train`: defaults, then a `key=value` file, then
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use radiomamba_core::data::{DatasetManifest, Mode};
use radiomamba_core::kv::{parse_kv, to_kv_text};
use radiomamba_core::train::TrainConfig;
use radiomamba_core::unet::ModelConfig;
use radiomamba_core::{Error, Result};

pub const RESOLVED_CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub mode: Mode,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Resolves `file` then `flags` over the defaults. Grid and mode fall back to
/// the dataset manifest when neither source sets them.
pub fn resolve(
    file: Option<&Path>,
    flags: &[(&'static str, String)],
) -> Result<(RunConfig, DatasetManifest)> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        pairs.extend(parse_kv(&text, &path.display().to_string())?);
    }
    pairs.extend(flags.iter().map(|(k, v)| (k.to_string(), v.clone())));

    let (mut model, mut train) = (ModelConfig::default(), TrainConfig::default());
    let (mut data, mut out, mut mode, mut grid_set) = (None, None, None, false);
    for (k, v) in &pairs {
        match k.as_str() {
            "data" => data = Some(PathBuf::from(v)),
            "out" => out = Some(PathBuf::from(v)),
            "mode" => mode = Some(v.parse::<Mode>()?),
            "input_channels" => {
                return Err(Error::Config(
                    "input_channels follows from mode; set mode instead".into(),
                ))
            }
            _ => {
                grid_set |= k == "grid";
                if !model.set(k, v)? && !train.set(k, v)? {
                    return Err(Error::Config(format!("unknown config key '{k}'")));
                }
            }
        }
    }
    let data = data.ok_or_else(|| Error::Config("no dataset given (--data or data=)".into()))?;
    let out =
        out.ok_or_else(|| Error::Config("no output directory given (--out or out=)".into()))?;
    let manifest = DatasetManifest::read(&data)?;
    let mode = mode.unwrap_or(manifest.mode);
    if !grid_set {
        model.grid = manifest.grid;
    }
    if mode != manifest.mode || model.grid != manifest.grid {
        return Err(Error::Config(format!(
            "run asks for {mode} at grid {}, dataset {} holds {} at grid {}",
            model.grid,
            data.display(),
            manifest.mode,
            manifest.grid
        )));
    }
    model.input_channels = mode.input_channels();
    model.validate()?;
    train.validate()?;
    Ok((
        RunConfig {
            data,
            out,
            mode,
            model,
            train,
        },
        manifest,
    ))
}

impl RunConfig {
    /// Every resolved setting, readable back through `--config`.
    pub fn to_text(&self) -> String {
        let mut pairs = vec![
            ("data", self.data.display().to_string()),
            ("out", self.out.display().to_string()),
            ("mode", self.mode.to_string()),
        ];
        pairs.extend(
            self.model
                .to_kv()
                .into_iter()
                .filter(|(k, _)| *k != "input_channels"),
        );
        pairs.extend(self.train.to_kv());
        format!("# resolved run configuration\n{}", to_kv_text(pairs))
    }
}
