//! `geca expand`: distribution-preserving dataset expansion.

use std::path::PathBuf;

use clap::Args;

use geca_core::checkpoint::load_model;
use geca_core::diffusion::build_schedule;
use geca_core::expansion::{plan_expansion, synthesize, LabeledDataset};
use geca_core::sampler::{InheritanceMode, MSchedule, SamplerConfig, StepVariant};
use geca_core::{GecaError, Result};

use crate::config::RunConfig;

#[derive(Args, Debug)]
pub struct ExpandArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Expansion factor; overrides `expand_factor` from the config.
    #[arg(long)]
    pub k: Option<usize>,
    /// Output directory; overrides `expand_out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: &ExpandArgs) -> Result<()> {
    let (meta, params, _) = load_model(&args.checkpoint)?;
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.set("seed", seed.to_string());
    }
    let manifest = cfg.require_path("dataset")?;
    if !manifest.exists() {
        return Err(GecaError::Input(format!(
            "dataset manifest not found: {}",
            manifest.display()
        )));
    }
    let dataset = LabeledDataset::load(&manifest)?;
    let factor = match args.k {
        Some(k) => k,
        None => cfg.get_parsed("expand_factor", 5usize)?,
    };
    let out_dir = match &args.out {
        Some(p) => p.clone(),
        None => cfg.require_path("expand_out")?,
    };
    if dataset.n_labels() != meta.n_labels {
        return Err(GecaError::Config(format!(
            "dataset has {} labels but the checkpoint expects {}",
            dataset.n_labels(),
            meta.n_labels
        )));
    }

    let plan = plan_expansion(&dataset, factor)?;
    let t_max: usize = cfg.get_parsed("timesteps", meta.train.t_max)?;
    let mode: InheritanceMode = cfg.get_str("mode").unwrap_or("h").parse()?;
    let variant: StepVariant = cfg
        .get_str("variant")
        .unwrap_or("ddpm-standard")
        .parse()?;
    let sampler = SamplerConfig {
        height: meta.image_height,
        width: meta.image_width,
        t_max,
        m: MSchedule::Const(cfg.get_parsed("m_updates", meta.train.m_updates)?),
        guidance_w: cfg.get_parsed("guidance_w", 1.5)?,
        mode,
        variant,
        fire_rate: cfg.get_parsed("fire_rate", meta.train.fire_rate)?,
        seed: cfg.get_parsed("seed", 0u64)?,
        force_dual_pass: false,
    };
    let schedule = build_schedule(meta.train.schedule, t_max)?;

    let report = synthesize(&plan, &params, &sampler, &schedule, &out_dir)?;
    println!(
        "planned {} synthetic items, emitted {} ({} skipped)",
        report.planned,
        report.emitted,
        report.skipped.len()
    );
    for (bits, reason) in &report.skipped {
        eprintln!(
            "skipped combination {}: {}",
            bits.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>(),
            reason
        );
    }
    let orig = dataset.label_counts();
    let synth = report.dataset.label_counts();
    for (l, (o, s)) in orig.iter().zip(&synth).enumerate() {
        println!("label {}: original {}, synthetic {} (target {})", l, o, s, factor * o);
    }
    println!(
        "manifest at {}",
        report.dataset.manifest_path.display()
    );
    Ok(())
}
