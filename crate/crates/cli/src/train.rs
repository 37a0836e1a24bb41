//! `geca train`: diffusion training driven by a run config.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use geca_core::checkpoint::{save_model, ModelMeta};
use geca_core::diffusion::{build_schedule, train_step, TrainConfig};
use geca_core::expansion::LabeledDataset;
use geca_core::optim::{Adam, AdamConfig};
use geca_core::rule::LabelCond;
use geca_core::{ChannelLayout, GecaError, Result, Tensor, ThetaParams};

use crate::config::RunConfig;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration file (key = value lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint, keeping its step numbering.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

/// Per-step derived stream: training is a pure function of (seed, step), so
/// resumed runs replay exactly.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn run(args: &TrainArgs) -> Result<()> {
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
    if dataset.is_empty() {
        return Err(GecaError::Input("dataset manifest has no items".into()));
    }
    let images = dataset.load_all_images()?;
    let shape = images[0].shape.clone();
    for (i, img) in images.iter().enumerate() {
        if img.shape != shape {
            return Err(GecaError::Dimension(format!(
                "image {} has shape {:?}, expected {:?}",
                i, img.shape, shape
            )));
        }
    }
    let (height, width, channels) = (shape[0], shape[1], shape[2]);

    let train = TrainConfig {
        batch_size: cfg.get_parsed("batch_size", 16)?,
        steps: cfg.get_parsed("steps", 5000)?,
        m_updates: cfg.get_parsed("m_updates", 12)?,
        m_randomize: cfg.get_bool("m_randomize", false)?,
        fire_rate: cfg.get_parsed("fire_rate", 0.5)?,
        learning_rate: cfg.get_parsed("learning_rate", 1e-3)?,
        seed: cfg.get_parsed("seed", 0u64)?,
        schedule: cfg.get_str("schedule").unwrap_or("linear").parse()?,
        t_max: cfg.get_parsed("timesteps", 250)?,
        checkpoint_every: cfg.get_parsed("checkpoint_every", 1000)?,
        label_drop: cfg.get_parsed("label_drop", 0.1)?,
    };
    train.validate()?;
    let out_dir = cfg
        .get_path("out_dir")
        .unwrap_or_else(|| PathBuf::from("runs/default"));
    fs::create_dir_all(&out_dir)?;

    let (mut meta, mut params, mut adam) = match &args.resume {
        Some(path) => {
            let (meta, params, adam) = geca_core::checkpoint::load_model(path)?;
            if meta.layout.n_in != channels {
                return Err(GecaError::Config(format!(
                    "checkpoint expects {} image channels, dataset has {}",
                    meta.layout.n_in, channels
                )));
            }
            if meta.n_labels != dataset.n_labels() {
                return Err(GecaError::Config(format!(
                    "checkpoint expects {} labels, dataset has {}",
                    meta.n_labels,
                    dataset.n_labels()
                )));
            }
            (meta, params, adam)
        }
        None => {
            let layout = ChannelLayout::new(
                channels,
                cfg.get_parsed("n_gamma", 8)?,
                cfg.get_parsed("n_h", 16)?,
            )?;
            let heads = cfg.get_parsed("heads", 4)?;
            let cond_dim = cfg.get_parsed("cond_dim", 128)?;
            let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
            let params =
                ThetaParams::init(layout, heads, cond_dim, dataset.n_labels(), &mut rng)?;
            let meta = ModelMeta {
                layout,
                heads,
                cond_dim,
                n_labels: dataset.n_labels(),
                image_height: height,
                image_width: width,
                train: train.clone(),
                step: 0,
            };
            let adam = Adam::new(AdamConfig {
                lr: train.learning_rate,
                ..Default::default()
            });
            (meta, params, adam)
        }
    };
    meta.train = train.clone();

    // log the fully resolved configuration
    let resolved = serde_json::to_string_pretty(&meta)
        .map_err(|e| GecaError::Config(format!("config serialization failed: {e}")))?;
    fs::write(out_dir.join("resolved_config.json"), &resolved)?;

    let schedule = build_schedule(train.schedule, train.t_max)?;
    let labels: Vec<LabelCond> = dataset
        .items
        .iter()
        .map(|i| LabelCond::Bits(i.labels.clone()))
        .collect();

    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("train.log"))?;
    let started = Instant::now();
    let first_step = meta.step;
    let mut last_loss = f32::NAN;
    for step in (first_step + 1)..=(train.steps as u64) {
        let mut rng = step_rng(train.seed, step);
        let batch: Vec<(&Tensor, &LabelCond)> = (0..train.batch_size)
            .map(|_| {
                let i = rng.gen_range(0..dataset.len());
                (&images[i], &labels[i])
            })
            .collect();
        last_loss = train_step(&batch, &mut params, &mut adam, &train, &schedule, &mut rng)?;
        meta.step = step;
        writeln!(
            log,
            "{},{:.6},{:.3}",
            step,
            last_loss,
            started.elapsed().as_secs_f64()
        )?;
        if train.checkpoint_every > 0 && step % train.checkpoint_every as u64 == 0 {
            save_model(
                &out_dir.join(format!("ckpt_{:06}.geca", step)),
                &meta,
                &params,
                &adam,
            )?;
        }
    }
    save_model(&out_dir.join("model.geca"), &meta, &params, &adam)?;
    println!(
        "trained to step {} (final loss {:.6}); model at {}",
        meta.step,
        last_loss,
        out_dir.join("model.geca").display()
    );
    Ok(())
}
