//! Environment samples, the synthetic generator, on-disk datasets and batching.

mod batch;
mod io;
mod sample;
mod synth;

use std::path::Path;

pub use batch::{eval_batches, stack, Batcher};
pub use io::{
    detect_format, load_dataset, load_map, load_map_inputs, read_f32grid, read_png_gray8, save_map,
    split_dir, write_f32grid, write_png_gray8, DatasetManifest, ImageFormat, Split, MANIFEST_FILE,
};
pub use sample::{EnvironmentSample, Mode};
pub use synth::{
    bresenham_between, generate_environment, pathloss_oracle, place_transmitter, synth_generate,
    synth_generate_with, Environment, SynthConfig, MIN_SYNTH_GRID,
};

use crate::error::{Error, Result};
use crate::rng::{indexed_stream, Stream};

/// Sizes of a synthetic dataset to write.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDatasetSpec {
    pub synth: SynthConfig,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub tx_per_map: usize,
    pub format: ImageFormat,
}

impl SynthDatasetSpec {
    pub fn new(seed: u64, train: usize, val: usize, test: usize) -> Self {
        SynthDatasetSpec {
            synth: SynthConfig::default(),
            seed,
            train,
            val,
            test,
            tx_per_map: 1,
            format: ImageFormat::Png,
        }
    }
}

/// Generates map `index`: one obstacle layout and `tx_per_map` transmitters.
pub fn synth_map(spec: &SynthDatasetSpec, index: usize) -> Result<Vec<EnvironmentSample>> {
    let mut rng = indexed_stream(spec.seed, Stream::Synth, index as u64);
    let env = generate_environment(&spec.synth, &mut rng)?;
    (0..spec.tx_per_map)
        .map(|_| place_transmitter(&env, &spec.synth, &mut rng))
        .collect()
}

/// Writes a synthetic dataset. Maps are numbered across splits, so no map
/// appears in two splits.
pub fn write_synth_dataset(root: &Path, spec: &SynthDatasetSpec) -> Result<DatasetManifest> {
    if spec.tx_per_map == 0 {
        return Err(Error::Config("tx_per_map must be > 0".into()));
    }
    let counts = [
        (Split::Train, spec.train),
        (Split::Val, spec.val),
        (Split::Test, spec.test),
    ];
    if let Some((s, n)) = counts.iter().find(|(_, n)| n % spec.tx_per_map != 0) {
        return Err(Error::Config(format!(
            "{s} count {n} is not a multiple of tx_per_map {}",
            spec.tx_per_map
        )));
    }
    spec.synth.validate()?;
    let mut index = 0;
    for (split, n) in counts {
        for _ in 0..n / spec.tx_per_map {
            let samples = synth_map(spec, index)?;
            save_map(
                &split_dir(root, split).join(format!("map_{index:05}")),
                &samples,
                spec.format,
            )?;
            index += 1;
        }
    }
    let manifest = DatasetManifest {
        mode: spec.synth.mode,
        grid: spec.synth.grid,
        format: spec.format,
        counts: counts.into_iter().collect(),
        extra: [
            ("seed".to_string(), spec.seed.to_string()),
            ("tx_per_map".to_string(), spec.tx_per_map.to_string()),
            ("generator".to_string(), "synthetic".to_string()),
        ]
        .into_iter()
        .collect(),
    };
    manifest.write(root)?;
    Ok(manifest)
}
