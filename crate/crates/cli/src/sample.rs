//! `geca sample`: image generation from a checkpoint.

use std::fs;
use std::path::PathBuf;

use clap::Args;

use geca_core::checkpoint::load_model;
use geca_core::diffusion::build_schedule;
use geca_core::image;
use geca_core::rule::LabelCond;
use geca_core::sampler::{m_sweep, sample, InheritanceMode, MSchedule, SamplerConfig, StepVariant};
use geca_core::{GecaError, Result};

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for images and the metadata sidecar.
    #[arg(long)]
    pub out: PathBuf,
    /// Label bit string like 10100; omitted = unconditional (null label).
    #[arg(long)]
    pub label: Option<String>,
    /// Number of images (seeds seed, seed+1, ...).
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Inheritance mode: none | out | out+h | h.
    #[arg(long, default_value = "h")]
    pub mode: String,
    /// Guidance scale.
    #[arg(long)]
    pub w: Option<f32>,
    /// Cellular updates per timestep; a comma list (6,12,24) runs an M sweep
    /// with shared noise and writes a contact sheet.
    #[arg(long)]
    pub m: Option<String>,
    /// Reverse timesteps.
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub fire_rate: Option<f32>,
    /// ddpm-standard | paper-literal.
    #[arg(long, default_value = "ddpm-standard")]
    pub variant: String,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
}

pub fn run(args: &SampleArgs) -> Result<()> {
    let (meta, params, _) = load_model(&args.checkpoint)?;
    let mode: InheritanceMode = args.mode.parse()?;
    let variant: StepVariant = args.variant.parse()?;
    let t_max = args.t.unwrap_or(meta.train.t_max);
    let m_values: Vec<usize> = match &args.m {
        None => vec![meta.train.m_updates],
        Some(spec) => spec
            .split(',')
            .map(|part| {
                part.trim().parse::<usize>().map_err(|_| {
                    GecaError::Config(format!("bad M value {:?} in --m", part))
                })
            })
            .collect::<Result<Vec<usize>>>()?,
    };
    let label = match &args.label {
        None => LabelCond::Null,
        Some(bits) => LabelCond::parse_bits(bits)?,
    };
    let config = SamplerConfig {
        height: args.height.unwrap_or(meta.image_height),
        width: args.width.unwrap_or(meta.image_width),
        t_max,
        m: MSchedule::Const(m_values[0]),
        guidance_w: args.w.unwrap_or(1.5),
        mode,
        variant,
        fire_rate: args.fire_rate.unwrap_or(meta.train.fire_rate),
        seed: args.seed,
        force_dual_pass: false,
    };
    let schedule = build_schedule(meta.train.schedule, t_max)?;
    fs::create_dir_all(&args.out)?;

    let mut files = Vec::new();
    if m_values.len() > 1 {
        let images = m_sweep(&params, &label, &config, &schedule, &m_values)?;
        for (m, img) in m_values.iter().zip(&images) {
            let name = format!("sample_m{:03}.pgm", m);
            image::write(&args.out.join(&name), img)?;
            files.push(name);
        }
        let sheet = image::contact_sheet(&images)?;
        image::write(&args.out.join("m_sweep.pgm"), &sheet)?;
        files.push("m_sweep.pgm".into());
    } else {
        for i in 0..args.n {
            let cfg = SamplerConfig {
                seed: args.seed.wrapping_add(i as u64),
                ..config.clone()
            };
            let img = sample(&params, &label, &cfg, &schedule)?;
            let name = format!("sample_{:04}.pgm", i);
            image::write(&args.out.join(&name), &img)?;
            files.push(name);
        }
    }

    let sidecar = serde_json::json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "label": args.label,
        "m_values": m_values,
        "config": serde_json::to_value(&config)
            .map_err(|e| GecaError::Config(e.to_string()))?,
        "files": files,
    });
    fs::write(
        args.out.join("metadata.json"),
        serde_json::to_string_pretty(&sidecar).map_err(|e| GecaError::Config(e.to_string()))?,
    )?;
    println!("wrote {} image(s) to {}", files.len(), args.out.display());
    Ok(())
}
