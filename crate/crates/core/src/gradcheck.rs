//! Central finite-difference oracle for gradients.
//!
//! Lives apart from the tape so tests can verify reverse-mode results
//! against an estimate that never touches the adjoint code: the forward
//! pass is re-run from scratch at perturbed inputs.

use crate::error::Result;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct GradCheckCfg {
    /// Central-difference step. The default follows the eps^(1/3) rule for
    /// f32 arithmetic: the forward pass carries ~1e-7 relative rounding
    /// noise, so steps much below 1e-2 let oracle noise dominate the
    /// estimate.
    pub h: f32,
    /// Accept when |ad - fd| <= tol * max(1, |ad|, |fd|).
    pub tol: f32,
    /// Cap on coordinates checked per tensor (0 = all), sampled by seed.
    pub max_coords: usize,
    pub coord_seed: u64,
}

impl Default for GradCheckCfg {
    fn default() -> Self {
        GradCheckCfg {
            h: 1e-2,
            tol: 1e-3,
            max_coords: 0,
            coord_seed: 0,
        }
    }
}

/// Verify the tape gradient of a scalar-valued computation w.r.t. one input.
///
/// `build` receives the input tensor and a fresh tape, records the forward
/// computation, and returns `(loss_id, input_id)`. It is invoked once for
/// the analytic gradient and twice per checked coordinate for the central
/// difference.
pub fn check_grad<F>(x0: &Tensor, build: F, cfg: &GradCheckCfg) -> std::result::Result<(), String>
where
    F: Fn(&Tensor, &mut Tape) -> Result<(TensorId, TensorId)>,
{
    let mut tape = Tape::new();
    let (loss, input) = build(x0, &mut tape).map_err(|e| e.to_string())?;
    tape.backward(loss).map_err(|e| e.to_string())?;
    let analytic = tape
        .grad(input)
        .ok_or("input received no gradient")?
        .to_vec();

    let eval = |x: &Tensor| -> std::result::Result<f64, String> {
        let mut tape = Tape::new();
        let (loss, _) = build(x, &mut tape).map_err(|e| e.to_string())?;
        Ok(tape.value(loss)[0] as f64)
    };

    let mut coords: Vec<usize> = (0..x0.numel()).collect();
    if cfg.max_coords > 0 && coords.len() > cfg.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.coord_seed);
        coords.shuffle(&mut rng);
        coords.truncate(cfg.max_coords);
    }

    for &i in &coords {
        let mut plus = x0.clone();
        let mut minus = x0.clone();
        plus.data[i] += cfg.h;
        minus.data[i] -= cfg.h;
        let span = (plus.data[i] - minus.data[i]) as f64;
        let fd = ((eval(&plus)? - eval(&minus)?) / span) as f32;
        let ad = analytic[i];
        let scale = 1.0f32.max(ad.abs()).max(fd.abs());
        if !(ad - fd).abs().is_finite() || (ad - fd).abs() > cfg.tol * scale {
            return Err(format!(
                "gradient mismatch at coord {}: analytic {} vs finite-diff {} (rel {})",
                i,
                ad,
                fd,
                (ad - fd).abs() / scale
            ));
        }
    }
    Ok(())
}
