//! `geca make-toy`: procedural multi-label toy dataset generator.

use std::path::PathBuf;

use clap::Args;

use geca_core::expansion::toy::make_toy_dataset;
use geca_core::Result;

#[derive(Args, Debug)]
pub struct MakeToyArgs {
    /// Output directory (images + manifest.csv).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub height: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    /// Number of label bits (1..=5).
    #[arg(long, default_value_t = 5)]
    pub labels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(args: &MakeToyArgs) -> Result<()> {
    let ds = make_toy_dataset(
        &args.out,
        args.n,
        args.height,
        args.width,
        args.labels,
        args.seed,
    )?;
    let counts = ds.label_counts();
    println!("wrote {} items to {}", ds.len(), ds.manifest_path.display());
    for (name, count) in ds.label_names.iter().zip(&counts) {
        println!("label {name}: {count}");
    }
    Ok(())
}
