//! Forward noising, the noise-prediction objective, and the training loop.
//!
//! The grid's C_in channels carry the noised image; M cellular updates
//! develop C_out into a noise estimate; the loss is the mean squared error
//! between C_out and the injected noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GecaError, Result};
use crate::grid::{init_grid, GridSeed, PixCellGrid};
use crate::optim::Adam;
use crate::rule::{conditioning_id, evolve_ids, AttnTables, BoundTheta, LabelCond, ThetaParams};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = GecaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(GecaError::Config(format!(
                "unknown schedule kind {:?} (expected linear or cosine)",
                other
            ))),
        }
    }
}

/// Per-timestep variance schedule for t = 1..=T.
///
/// `alpha_bar[t]` is the cumulative product of the per-step retention
/// factors; `alpha_bar(0)` is defined as 1.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub t_max: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Assemble from explicit per-step variances (used by tests to pin
    /// degenerate cases); validates monotonicity.
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 1 {
            return Err(GecaError::Config("schedule needs at least one step".into()));
        }
        if betas.iter().any(|&b| !(0.0..1.0).contains(&b)) {
            return Err(GecaError::Config(
                "beta values must lie in [0, 1)".into(),
            ));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            kind,
            t_max: betas.len(),
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative retention; t = 0 yields 1 (the clean image).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(GecaError::Input(format!(
                "timestep {} outside 1..={}",
                t, self.t_max
            )));
        }
        Ok(())
    }
}

/// Linear: beta ramps 1e-4 -> 2e-2. Cosine: squared-cosine alpha_bar with
/// the usual 0.008 offset, betas clipped at 0.999.
pub fn build_schedule(kind: ScheduleKind, t_max: usize) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(GecaError::Config(format!(
            "schedule needs T >= 2, got {}",
            t_max
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear => {
            let (start, end) = (1e-4, 2e-2);
            (0..t_max)
                .map(|i| start + (end - start) * i as f64 / (t_max - 1) as f64)
                .collect()
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| ((t / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            (0..t_max)
                .map(|i| {
                    let beta = 1.0 - f((i + 1) as f64) / f(i as f64);
                    beta.clamp(1e-8, 0.999)
                })
                .collect()
        }
    };
    NoiseSchedule::from_betas(kind, betas)
}

/// Diffuse a clean image to timestep t:
/// noisy = sqrt(alpha_bar_t) * clean + sqrt(1 - alpha_bar_t) * eps.
/// Returns (noisy, eps).
pub fn forward_noise<R: Rng>(
    clean: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (signal, noise) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let eps = Tensor::randn(clean.shape.clone(), rng);
    let data = clean
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&c, &e)| signal * c + noise * e)
        .collect();
    Ok((Tensor::new(clean.shape.clone(), data)?, eps))
}

/// Mean squared error between the evolved grid's C_out block and the noise
/// that was injected.
pub fn loss(grid_after_evolve: &PixCellGrid, eps: &Tensor) -> Result<f32> {
    let c_out = grid_after_evolve.c_out();
    if c_out.shape != eps.shape {
        return Err(GecaError::Dimension(format!(
            "eps shape {:?} vs C_out {:?}",
            eps.shape, c_out.shape
        )));
    }
    let n = c_out.numel().max(1);
    let sum: f64 = c_out
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&a, &b)| {
            let d = (a - b) as f64;
            d * d
        })
        .sum();
    Ok((sum / n as f64) as f32)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    /// Cellular updates per diffusion step.
    pub m_updates: usize,
    /// When set, M is drawn uniformly from 1..=m_updates per batch item.
    pub m_randomize: bool,
    /// Per-cell update probability.
    pub fire_rate: f32,
    pub learning_rate: f32,
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub t_max: usize,
    pub checkpoint_every: usize,
    /// Probability of replacing the label with the null row (classifier-free
    /// guidance training).
    pub label_drop: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 5000,
            m_updates: 12,
            m_randomize: false,
            fire_rate: 0.5,
            learning_rate: 1e-3,
            seed: 0,
            schedule: ScheduleKind::Linear,
            t_max: 250,
            checkpoint_every: 1000,
            label_drop: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(GecaError::Config("batch size must be positive".into()));
        }
        if self.m_updates == 0 {
            return Err(GecaError::Config("m_updates must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.fire_rate) {
            return Err(GecaError::Config(format!(
                "fire rate must lie in [0,1], got {}",
                self.fire_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.label_drop) {
            return Err(GecaError::Config(format!(
                "label drop probability must lie in [0,1], got {}",
                self.label_drop
            )));
        }
        Ok(())
    }
}

/// Per-item randomness for one training step, pre-drawn so evaluation order
/// never affects the outcome.
struct ItemDraw {
    t: usize,
    drop_label: bool,
    eps_seed: u64,
    grid_seed: u64,
    mask_seed: u64,
    m: usize,
}

/// One optimizer step over a batch of (image, label) pairs. Returns the mean
/// loss. Gradients are averaged over the batch in item order.
pub fn train_step<R: Rng>(
    batch: &[(&Tensor, &LabelCond)],
    params: &mut ThetaParams,
    adam: &mut Adam,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f32> {
    config.validate()?;
    if batch.is_empty() {
        return Err(GecaError::Input("empty training batch".into()));
    }
    let draws: Vec<ItemDraw> = batch
        .iter()
        .map(|_| ItemDraw {
            t: rng.gen_range(1..=schedule.t_max),
            drop_label: rng.gen::<f32>() < config.label_drop,
            eps_seed: rng.gen(),
            grid_seed: rng.gen(),
            mask_seed: rng.gen(),
            m: if config.m_randomize {
                rng.gen_range(1..=config.m_updates)
            } else {
                config.m_updates
            },
        })
        .collect();

    let mut grad_acc: Vec<(&'static str, Vec<f32>)> = params
        .named()
        .iter()
        .map(|(name, t)| (*name, vec![0.0f32; t.numel()]))
        .collect();
    let mut total_loss = 0.0f64;

    for ((image, label), draw) in batch.iter().zip(&draws) {
        let label = if draw.drop_label {
            &LabelCond::Null
        } else {
            *label
        };
        let mut eps_rng = ChaCha8Rng::seed_from_u64(draw.eps_seed);
        let (noisy, eps) = forward_noise(image, draw.t, schedule, &mut eps_rng)?;
        let grid = init_grid(&noisy, params.layout, GridSeed(draw.grid_seed))?;

        let mut tape = Tape::new();
        let bound = BoundTheta::bind(&mut tape, params, true);
        let tables = AttnTables::new(grid.height, grid.width, params.heads);
        let in_gamma = tape.constant(grid.in_gamma_matrix());
        let out_h0 = tape.constant(grid.out_h_matrix());
        let cond = conditioning_id(&mut tape, &bound, params, draw.t, label)?;
        let mut mask_rng = ChaCha8Rng::seed_from_u64(draw.mask_seed);
        let final_out_h = evolve_ids(
            &mut tape,
            &bound,
            &tables,
            in_gamma,
            out_h0,
            cond,
            draw.m,
            config.fire_rate,
            grid.height,
            grid.width,
            &mut mask_rng,
        )?;
        let c_out = tape.slice_cols(final_out_h, 0, params.layout.n_out)?;
        let eps_flat = eps
            .clone()
            .reshaped(vec![grid.cells(), params.layout.n_out])?;
        let eps_id = tape.constant(eps_flat);
        let diff = tape.sub(c_out, eps_id)?;
        let sq = tape.mul(diff, diff)?;
        let sum = tape.sum_all(sq);
        let item_loss = tape.scale(sum, 1.0 / (grid.cells() * params.layout.n_out) as f32);
        let loss_value = tape.value(item_loss)[0];
        if !loss_value.is_finite() {
            return Err(GecaError::Training(format!(
                "non-finite loss at t={}",
                draw.t
            )));
        }
        total_loss += loss_value as f64;
        tape.backward(item_loss)?;
        for ((_, acc), (_, g)) in grad_acc.iter_mut().zip(bound.grads(&tape)) {
            for (a, gi) in acc.iter_mut().zip(g) {
                *a += gi;
            }
        }
    }

    let scale = 1.0 / batch.len() as f32;
    for (_, acc) in &mut grad_acc {
        for a in acc.iter_mut() {
            *a *= scale;
        }
    }
    let updates: Vec<(&str, &mut Tensor, &[f32])> = params
        .named_mut()
        .into_iter()
        .zip(&grad_acc)
        .map(|((name, tensor), (gname, grad))| {
            debug_assert_eq!(name, *gname);
            (name, tensor, grad.as_slice())
        })
        .collect();
    adam.step(updates)?;
    Ok((total_loss / batch.len() as f64) as f32)
}
