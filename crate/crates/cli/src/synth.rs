use std::path::PathBuf;

use radiomamba_core::data::{
    write_synth_dataset, ImageFormat, Mode, Split, SynthConfig, SynthDatasetSpec,
};
use radiomamba_core::Result;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    grid: usize,
    #[arg(long, default_value = "srm")]
    mode: Mode,
    /// Training samples
    #[arg(long)]
    count: usize,
    /// Validation samples
    #[arg(long, default_value_t = 0)]
    val: usize,
    /// Test samples
    #[arg(long, default_value_t = 0)]
    test: usize,
    /// Transmitter placements per obstacle layout
    #[arg(long, default_value_t = 1)]
    tx_per_map: usize,
    #[arg(long, default_value = "png")]
    format: ImageFormat,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(a: Args) -> Result<()> {
    let spec = SynthDatasetSpec {
        synth: SynthConfig::new(a.grid, a.mode),
        tx_per_map: a.tx_per_map,
        format: a.format,
        ..SynthDatasetSpec::new(a.seed, a.count, a.val, a.test)
    };
    let m = write_synth_dataset(&a.out, &spec)?;
    println!(
        "wrote {} {} maps at grid {} to {} (train {}, val {}, test {})",
        a.count + a.val + a.test,
        m.mode,
        m.grid,
        a.out.display(),
        m.count(Split::Train),
        m.count(Split::Val),
        m.count(Split::Test)
    );
    Ok(())
}
