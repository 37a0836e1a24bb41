//! Reverse-time generation with gene heredity guidance.
//!
//! Each reverse timestep rebuilds the grid around the current noisy image.
//! Hidden state flows across timesteps according to the inheritance mode
//! (the paper's heredity ablation); the grid-center cell's C_out is freshly
//! resampled at every timestep. Classifier-free guidance runs a second,
//! unconditional pass that shares the conditional pass's heredity stream.
//!
//! Randomness is split into four independent seeded streams (image noise,
//! conditional grid seeding, conditional fire masks, everything
//! unconditional), so turning the guidance branch on or off never perturbs
//! the conditional trajectory, and closed-form trajectory oracles can replay
//! the draws. Within `ghg_init`, center C_out values are drawn before
//! center C_h values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{GecaError, Result};
use crate::grid::{positional_encoding, GridSeed, PixCellGrid};
use crate::rule::{evolve, LabelCond, ThetaParams};
use crate::tensor::Tensor;

/// Which evolving channels carry over from timestep t+1 to t.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InheritanceMode {
    /// Reset both C_out and C_h to the seed pattern every timestep.
    None,
    /// Inherit C_out only.
    OutOnly,
    /// Inherit both C_out and C_h.
    OutAndH,
    /// Inherit C_h only (the paper's best setting; the default).
    HOnly,
}

impl InheritanceMode {
    pub const ALL: [InheritanceMode; 4] = [
        InheritanceMode::None,
        InheritanceMode::OutOnly,
        InheritanceMode::OutAndH,
        InheritanceMode::HOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            InheritanceMode::None => "none",
            InheritanceMode::OutOnly => "out",
            InheritanceMode::OutAndH => "out+h",
            InheritanceMode::HOnly => "h",
        }
    }
}

impl std::str::FromStr for InheritanceMode {
    type Err = GecaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(InheritanceMode::None),
            "out" => Ok(InheritanceMode::OutOnly),
            "out+h" => Ok(InheritanceMode::OutAndH),
            "h" => Ok(InheritanceMode::HOnly),
            other => Err(GecaError::Config(format!(
                "unknown inheritance mode {:?} (expected none, out, out+h or h)",
                other
            ))),
        }
    }
}

/// Reverse-update formula selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepVariant {
    /// Posterior-mean update with sigma_t noise, noise forced to 0 at t=1.
    DdpmStandard,
    /// The paper's update with the (t-1)-indexed denominator and no noise
    /// term; at t=1 the denominator falls back to the t index to stay
    /// finite.
    PaperLiteral,
}

impl std::str::FromStr for StepVariant {
    type Err = GecaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm-standard" => Ok(StepVariant::DdpmStandard),
            "paper-literal" => Ok(StepVariant::PaperLiteral),
            other => Err(GecaError::Config(format!(
                "unknown step variant {:?} (expected ddpm-standard or paper-literal)",
                other
            ))),
        }
    }
}

/// Cellular updates per reverse timestep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MSchedule {
    Const(usize),
    /// One entry per timestep, indexed by t-1.
    PerT(Vec<usize>),
}

impl MSchedule {
    pub fn at(&self, t: usize) -> usize {
        match self {
            MSchedule::Const(m) => *m,
            MSchedule::PerT(v) => v[t - 1],
        }
    }

    fn validate(&self, t_max: usize) -> Result<()> {
        match self {
            MSchedule::Const(m) if *m >= 1 => Ok(()),
            MSchedule::Const(m) => Err(GecaError::Config(format!(
                "M must be at least 1, got {}",
                m
            ))),
            MSchedule::PerT(v) => {
                if v.len() != t_max {
                    return Err(GecaError::Config(format!(
                        "per-timestep M table has {} entries for T={}",
                        v.len(),
                        t_max
                    )));
                }
                if v.iter().any(|&m| m == 0) {
                    return Err(GecaError::Config("per-timestep M contains 0".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub height: usize,
    pub width: usize,
    pub t_max: usize,
    pub m: MSchedule,
    /// Guidance scale w; w = 1 skips the unconditional pass entirely.
    pub guidance_w: f32,
    pub mode: InheritanceMode,
    pub variant: StepVariant,
    pub fire_rate: f32,
    pub seed: u64,
    /// Evaluate the unconditional branch even when w = 1 (testing hook; the
    /// output must not change).
    pub force_dual_pass: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            height: 16,
            width: 16,
            t_max: 250,
            m: MSchedule::Const(12),
            guidance_w: 1.5,
            mode: InheritanceMode::HOnly,
            variant: StepVariant::DdpmStandard,
            fire_rate: 0.5,
            seed: 0,
            force_dual_pass: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 {
            return Err(GecaError::Config(format!(
                "sampling grid must be at least 3x3, got {}x{}",
                self.height, self.width
            )));
        }
        self.m.validate(self.t_max)?;
        if self.guidance_w < 0.0 {
            return Err(GecaError::Config(format!(
                "guidance scale must be non-negative, got {}",
                self.guidance_w
            )));
        }
        if !(0.0..=1.0).contains(&self.fire_rate) {
            return Err(GecaError::Config(format!(
                "fire rate must lie in [0,1], got {}",
                self.fire_rate
            )));
        }
        Ok(())
    }
}

fn seed_center<R: Rng>(
    grid: &mut PixCellGrid,
    draw_out: bool,
    draw_h: bool,
    rng: &mut R,
) {
    let layout = grid.layout;
    let (ci, cj) = GridSeed::center(grid.height, grid.width);
    let base = (ci * grid.width + cj) * layout.total();
    if draw_out {
        for c in 0..layout.n_out {
            grid.state.data[base + layout.out_start() + c] =
                rng.sample(rand_distr::StandardNormal);
        }
    }
    if draw_h {
        for c in 0..layout.n_h {
            grid.state.data[base + layout.h_start() + c] = rng.sample(rand_distr::StandardNormal);
        }
    }
}

/// Build the grid entering reverse timestep t.
///
/// `prev_grid` is the evolved grid that exited timestep t+1; it must be
/// absent exactly when t = T (which is why the channel layout is passed
/// explicitly). C_in takes the current noisy image; C_out and C_h follow
/// the inheritance mode, and the grid-center C_out is resampled on every
/// call.
pub fn ghg_init<R: Rng>(
    prev_grid: Option<&PixCellGrid>,
    noisy_c_in: &Tensor,
    layout: crate::grid::ChannelLayout,
    t: usize,
    t_max: usize,
    mode: InheritanceMode,
    rng: &mut R,
) -> Result<PixCellGrid> {
    if t == 0 || t > t_max {
        return Err(GecaError::Input(format!(
            "timestep {} outside 1..={}",
            t, t_max
        )));
    }
    if t == t_max && prev_grid.is_some() {
        return Err(GecaError::Protocol(
            "a previous grid was supplied at t = T".into(),
        ));
    }
    if t < t_max && prev_grid.is_none() {
        return Err(GecaError::Protocol(format!(
            "no previous grid supplied at t = {} < T",
            t
        )));
    }
    if noisy_c_in.rank() != 3 || noisy_c_in.shape[2] != layout.n_in {
        return Err(GecaError::Dimension(format!(
            "noisy C_in shape {:?} does not match layout (n_in = {})",
            noisy_c_in.shape, layout.n_in
        )));
    }
    if let Some(prev) = prev_grid {
        if prev.layout != layout
            || prev.height != noisy_c_in.shape[0]
            || prev.width != noisy_c_in.shape[1]
        {
            return Err(GecaError::Dimension(
                "previous grid does not match the incoming image".into(),
            ));
        }
    }
    let (height, width) = (noisy_c_in.shape[0], noisy_c_in.shape[1]);
    let total = layout.total();
    let gamma = positional_encoding(height, width, layout.n_gamma)?;
    let mut data = vec![0.0f32; height * width * total];
    for cell in 0..height * width {
        let base = cell * total;
        data[base..base + layout.n_in]
            .copy_from_slice(&noisy_c_in.data[cell * layout.n_in..(cell + 1) * layout.n_in]);
        data[base + layout.n_in..base + layout.n_in + layout.n_gamma]
            .copy_from_slice(&gamma.data[cell * layout.n_gamma..(cell + 1) * layout.n_gamma]);
    }
    let mut grid = PixCellGrid {
        height,
        width,
        layout,
        state: Tensor::new(vec![height, width, total], data)?,
    };

    let inherit_out = matches!(mode, InheritanceMode::OutOnly | InheritanceMode::OutAndH);
    let inherit_h = matches!(mode, InheritanceMode::HOnly | InheritanceMode::OutAndH);

    if let Some(prev) = prev_grid {
        if inherit_out {
            grid.set_c_out(&prev.c_out());
        }
        if inherit_h {
            grid.set_c_h(&prev.c_h());
        }
    }
    // Center C_out is resampled every timestep; center C_h is drawn fresh
    // whenever C_h is not inherited from a previous grid.
    let draw_h = !inherit_h || prev_grid.is_none();
    seed_center(&mut grid, true, draw_h, rng);
    Ok(grid)
}

/// Noise-prediction blend for classifier-free guidance:
/// eps_uncond + w * (eps_cond - eps_uncond). w = 1 and w = 0 short-circuit
/// to the corresponding input so degenerate scales are bit-exact.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, w: f32) -> Result<Tensor> {
    if eps_cond.shape != eps_uncond.shape {
        return Err(GecaError::Dimension(format!(
            "guidance shapes differ: {:?} vs {:?}",
            eps_cond.shape, eps_uncond.shape
        )));
    }
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let data = eps_cond
        .data
        .iter()
        .zip(&eps_uncond.data)
        .map(|(&c, &u)| u + w * (c - u))
        .collect();
    Tensor::new(eps_cond.shape.clone(), data)
}

/// One reverse update of the noisy image given the predicted noise.
pub fn reverse_step<R: Rng>(
    c_in_t: &Tensor,
    c_out_pred: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    variant: StepVariant,
    rng: &mut R,
) -> Result<Tensor> {
    if t == 0 || t > schedule.t_max {
        return Err(GecaError::Input(format!(
            "timestep {} outside 1..={}",
            t, schedule.t_max
        )));
    }
    if c_in_t.shape != c_out_pred.shape {
        return Err(GecaError::Dimension(format!(
            "noise prediction shape {:?} vs image {:?}",
            c_out_pred.shape, c_in_t.shape
        )));
    }
    let alpha = schedule.alpha(t);
    let beta = schedule.beta(t);
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    match variant {
        StepVariant::PaperLiteral => {
            // denominator indexed by t-1; at t = 1 that is zero, so fall
            // back to the t index there
            let denom_bar = if t >= 2 {
                schedule.alpha_bar(t - 1)
            } else {
                schedule.alpha_bar(t)
            };
            let coeff = (beta / (1.0 - denom_bar).sqrt()) as f32;
            let data = c_in_t
                .data
                .iter()
                .zip(&c_out_pred.data)
                .map(|(&x, &e)| (inv_sqrt_alpha as f32) * (x - coeff * e))
                .collect();
            Tensor::new(c_in_t.shape.clone(), data)
        }
        StepVariant::DdpmStandard => {
            let ab_t = schedule.alpha_bar(t);
            let coeff = (beta / (1.0 - ab_t).sqrt()) as f32;
            let mut data: Vec<f32> = c_in_t
                .data
                .iter()
                .zip(&c_out_pred.data)
                .map(|(&x, &e)| (inv_sqrt_alpha as f32) * (x - coeff * e))
                .collect();
            if t > 1 {
                let ab_prev = schedule.alpha_bar(t - 1);
                let sigma = ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt() as f32;
                for v in data.iter_mut() {
                    let z: f32 = rng.sample(rand_distr::StandardNormal);
                    *v += sigma * z;
                }
            }
            Tensor::new(c_in_t.shape.clone(), data)
        }
    }
}

/// Snapshot of one reverse timestep (used by heredity-invariant checks).
pub struct StepTrace {
    pub t: usize,
    /// C_h after ghg_init, before the cellular updates.
    pub c_h_entering: Tensor,
    /// C_h after the cellular updates.
    pub c_h_exiting: Tensor,
    /// The grid-center C_out values drawn for this timestep.
    pub center_c_out: Vec<f32>,
}

pub struct SampleTrace {
    pub image: Tensor,
    /// Recorded in sampling order: t = T first.
    pub steps: Vec<StepTrace>,
}

const STREAM_INIT: u64 = 0x9e37_79b9_7f4a_7c15;
const STREAM_MASK: u64 = 0x6a09_e667_f3bc_c909;
const STREAM_UNCOND: u64 = 0xbb67_ae85_84ca_a73b;

/// Generate one image; see [`sample_traced`] for the instrumented variant.
pub fn sample(
    params: &ThetaParams,
    label: &LabelCond,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    Ok(sample_traced(params, label, config, schedule, false)?.image)
}

/// Full reverse trajectory from C_in_T ~ N(0, I) down to the clean image,
/// optionally recording per-timestep heredity snapshots.
pub fn sample_traced(
    params: &ThetaParams,
    label: &LabelCond,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    record: bool,
) -> Result<SampleTrace> {
    config.validate()?;
    if config.t_max != schedule.t_max {
        return Err(GecaError::Config(format!(
            "sampler T = {} but schedule T = {}",
            config.t_max, schedule.t_max
        )));
    }
    let layout = params.layout;
    let (h, w) = (config.height, config.width);
    let mut rng_x = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rng_init = ChaCha8Rng::seed_from_u64(config.seed ^ STREAM_INIT);
    let mut rng_mask = ChaCha8Rng::seed_from_u64(config.seed ^ STREAM_MASK);
    let mut rng_uncond = ChaCha8Rng::seed_from_u64(config.seed ^ STREAM_UNCOND);

    let mut x = Tensor::randn(vec![h, w, layout.n_in], &mut rng_x);
    let mut prev: Option<PixCellGrid> = None;
    let mut steps = Vec::new();
    let dual_pass = config.guidance_w != 1.0 || config.force_dual_pass;

    for t in (1..=config.t_max).rev() {
        let grid_c = ghg_init(
            prev.as_ref(),
            &x,
            layout,
            t,
            config.t_max,
            config.mode,
            &mut rng_init,
        )?;
        let center_c_out = {
            let (ci, cj) = GridSeed::center(h, w);
            let base = (ci * w + cj) * layout.total() + layout.out_start();
            grid_c.state.data[base..base + layout.n_out].to_vec()
        };
        let c_h_entering = if record { Some(grid_c.c_h()) } else { None };
        let evolved_c = evolve(
            &grid_c,
            t,
            label,
            params,
            config.m.at(t),
            config.fire_rate,
            &mut rng_mask,
        )?;
        let eps_cond = evolved_c.c_out();

        let eps_hat = if dual_pass {
            let grid_u = if t == config.t_max {
                // share the conditional grid's freshly drawn C_h; only the
                // center C_out is redrawn for the unconditional branch
                let mut g = grid_c.clone();
                seed_center(&mut g, true, false, &mut rng_uncond);
                g
            } else {
                ghg_init(
                    prev.as_ref(),
                    &x,
                    layout,
                    t,
                    config.t_max,
                    config.mode,
                    &mut rng_uncond,
                )?
            };
            let evolved_u = evolve(
                &grid_u,
                t,
                &LabelCond::Null,
                params,
                config.m.at(t),
                config.fire_rate,
                &mut rng_uncond,
            )?;
            cfg_combine(&eps_cond, &evolved_u.c_out(), config.guidance_w)?
        } else {
            eps_cond
        };
        if !eps_hat.is_finite() {
            return Err(GecaError::Sampling {
                t,
                msg: "non-finite noise prediction".into(),
            });
        }
        x = reverse_step(&x, &eps_hat, t, schedule, config.variant, &mut rng_x)?;
        if !x.is_finite() {
            return Err(GecaError::Sampling {
                t,
                msg: "non-finite image".into(),
            });
        }
        if record {
            steps.push(StepTrace {
                t,
                c_h_entering: c_h_entering.unwrap(),
                c_h_exiting: evolved_c.c_h(),
                center_c_out,
            });
        }
        prev = Some(evolved_c);
    }
    x.clamp_in_place(-1.0, 1.0);
    Ok(SampleTrace { image: x, steps })
}

/// One sample per requested M, all sharing the configured seed (and hence
/// the initial noise).
pub fn m_sweep(
    params: &ThetaParams,
    label: &LabelCond,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    m_values: &[usize],
) -> Result<Vec<Tensor>> {
    if m_values.iter().any(|&m| m == 0) {
        return Err(GecaError::Config("m sweep entries must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(m_values.len());
    for &m in m_values {
        let cfg = SamplerConfig {
            m: MSchedule::Const(m),
            ..config.clone()
        };
        out.push(sample(params, label, &cfg, schedule)?);
    }
    Ok(out)
}

/// Peak signal-to-noise ratio in dB for images in [-1, 1] (peak 2).
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    debug_assert_eq!(a.shape, b.shape);
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel().max(1) as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (4.0 / mse).log10()
}
