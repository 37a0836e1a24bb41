//! The cellular update rule: a single transformer block whose attention is
//! restricted to each cell's 3x3 Moore window, conditioned on diffusion
//! timestep and label through adaptive layer-norm modulation.
//!
//! One parameter set is shared by every cell and every update step. The
//! block is pre-norm with zero-initialized modulation, so a freshly
//! initialized rule is the identity map on the grid.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GecaError, Result};
use crate::grid::{neighbor_index_table, ChannelLayout, PixCellGrid};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Additive logit mask value for window slots outside the grid.
const MASK_OFF: f32 = -1e30;

/// Conditioning input: a multi-label bit vector, or the learned null row
/// used for classifier-free guidance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelCond {
    Null,
    Bits(Vec<bool>),
}

impl LabelCond {
    /// Parse "10100"-style bit strings (semicolons tolerated as separators).
    pub fn parse_bits(s: &str) -> Result<LabelCond> {
        let cleaned: String = s.chars().filter(|c| *c != ';').collect();
        let mut bits = Vec::with_capacity(cleaned.len());
        for c in cleaned.chars() {
            match c {
                '0' => bits.push(false),
                '1' => bits.push(true),
                _ => {
                    return Err(GecaError::Input(format!(
                        "label bit string may only contain 0/1, got {:?}",
                        s
                    )))
                }
            }
        }
        Ok(LabelCond::Bits(bits))
    }

    /// Embedding-table rows selected by this conditioning.
    fn embed_indices(&self, n_labels: usize) -> Result<Vec<i64>> {
        match self {
            LabelCond::Null => Ok(vec![n_labels as i64]),
            LabelCond::Bits(bits) => {
                if bits.len() != n_labels {
                    return Err(GecaError::Input(format!(
                        "label has {} bits, model expects {}",
                        bits.len(),
                        n_labels
                    )));
                }
                Ok(bits
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(|(i, _)| i as i64)
                    .collect())
            }
        }
    }
}

/// Parameters of the update rule.
///
/// Attention runs at width `attn_dim()`, the smallest multiple of `heads`
/// that covers the full cell-state width, so any layout works with any head
/// count. The modulation projection (`w_mod`, `b_mod`) starts at zero.
#[derive(Debug, Clone)]
pub struct ThetaParams {
    pub layout: ChannelLayout,
    pub heads: usize,
    pub cond_dim: usize,
    pub n_labels: usize,

    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub mod_w: Tensor,
    pub mod_b: Tensor,
    pub temb_w1: Tensor,
    pub temb_b1: Tensor,
    pub temb_w2: Tensor,
    pub temb_b2: Tensor,
    pub label_embed: Tensor,
}

impl ThetaParams {
    pub fn init<R: Rng>(
        layout: ChannelLayout,
        heads: usize,
        cond_dim: usize,
        n_labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        layout.validate()?;
        if heads == 0 {
            return Err(GecaError::Config("head count must be at least 1".into()));
        }
        if cond_dim < 2 || cond_dim % 2 != 0 {
            return Err(GecaError::Config(format!(
                "conditioning width must be even and at least 2, got {}",
                cond_dim
            )));
        }
        let s = layout.total();
        let a = heads * s.div_ceil(heads);
        let ff = 4 * s;
        let mut embed = Tensor::zeros(vec![n_labels + 1, cond_dim]);
        for v in &mut embed.data {
            *v = 0.02 * rng.sample::<f32, _>(StandardNormal);
        }
        Ok(ThetaParams {
            layout,
            heads,
            cond_dim,
            n_labels,
            wq: Tensor::xavier(s, a, rng),
            bq: Tensor::zeros(vec![a]),
            wk: Tensor::xavier(s, a, rng),
            bk: Tensor::zeros(vec![a]),
            wv: Tensor::xavier(s, a, rng),
            bv: Tensor::zeros(vec![a]),
            wo: Tensor::xavier(a, s, rng),
            bo: Tensor::zeros(vec![s]),
            ff_w1: Tensor::xavier(s, ff, rng),
            ff_b1: Tensor::zeros(vec![ff]),
            ff_w2: Tensor::xavier(ff, s, rng),
            ff_b2: Tensor::zeros(vec![s]),
            mod_w: Tensor::zeros(vec![cond_dim, 6 * s]),
            mod_b: Tensor::zeros(vec![6 * s]),
            temb_w1: Tensor::xavier(cond_dim, cond_dim, rng),
            temb_b1: Tensor::zeros(vec![cond_dim]),
            temb_w2: Tensor::xavier(cond_dim, cond_dim, rng),
            temb_b2: Tensor::zeros(vec![cond_dim]),
            label_embed: embed,
        })
    }

    /// Attention width: cell-state width rounded up to a multiple of heads.
    pub fn attn_dim(&self) -> usize {
        self.heads * self.layout.total().div_ceil(self.heads)
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("theta.wq", &self.wq),
            ("theta.bq", &self.bq),
            ("theta.wk", &self.wk),
            ("theta.bk", &self.bk),
            ("theta.wv", &self.wv),
            ("theta.bv", &self.bv),
            ("theta.wo", &self.wo),
            ("theta.bo", &self.bo),
            ("theta.ff.w1", &self.ff_w1),
            ("theta.ff.b1", &self.ff_b1),
            ("theta.ff.w2", &self.ff_w2),
            ("theta.ff.b2", &self.ff_b2),
            ("theta.mod.w", &self.mod_w),
            ("theta.mod.b", &self.mod_b),
            ("theta.temb.w1", &self.temb_w1),
            ("theta.temb.b1", &self.temb_b1),
            ("theta.temb.w2", &self.temb_w2),
            ("theta.temb.b2", &self.temb_b2),
            ("theta.label.embed", &self.label_embed),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("theta.wq", &mut self.wq),
            ("theta.bq", &mut self.bq),
            ("theta.wk", &mut self.wk),
            ("theta.bk", &mut self.bk),
            ("theta.wv", &mut self.wv),
            ("theta.bv", &mut self.bv),
            ("theta.wo", &mut self.wo),
            ("theta.bo", &mut self.bo),
            ("theta.ff.w1", &mut self.ff_w1),
            ("theta.ff.b1", &mut self.ff_b1),
            ("theta.ff.w2", &mut self.ff_w2),
            ("theta.ff.b2", &mut self.ff_b2),
            ("theta.mod.w", &mut self.mod_w),
            ("theta.mod.b", &mut self.mod_b),
            ("theta.temb.w1", &mut self.temb_w1),
            ("theta.temb.b1", &mut self.temb_b1),
            ("theta.temb.w2", &mut self.temb_w2),
            ("theta.temb.b2", &mut self.temb_b2),
            ("theta.label.embed", &mut self.label_embed),
        ]
    }

    pub fn tensor_by_name(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_mut().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    /// Sinusoidal embedding of a timestep index (cos half, then sin half).
    pub fn timestep_embedding(&self, t: usize) -> Tensor {
        let half = self.cond_dim / 2;
        let mut data = vec![0.0f32; self.cond_dim];
        for k in 0..half {
            let freq = (10000.0f64).powf(-(k as f64) / half as f64);
            let angle = t as f64 * freq;
            data[k] = angle.cos() as f32;
            data[half + k] = angle.sin() as f32;
        }
        Tensor::new(vec![1, self.cond_dim], data).unwrap()
    }
}

/// Bernoulli fire mask over the grid.
#[derive(Debug, Clone)]
pub struct UpdateMask {
    /// [H, W] of {0,1}.
    pub values: Tensor,
    pub p: f32,
}

impl UpdateMask {
    pub fn sample<R: Rng>(height: usize, width: usize, p: f32, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(GecaError::Config(format!(
                "update probability must lie in [0,1], got {}",
                p
            )));
        }
        let data = (0..height * width)
            .map(|_| if rng.gen::<f32>() < p { 1.0 } else { 0.0 })
            .collect();
        Ok(UpdateMask {
            values: Tensor::new(vec![height, width], data)?,
            p,
        })
    }

    pub fn all_ones(height: usize, width: usize) -> Self {
        UpdateMask {
            values: Tensor::ones(vec![height, width]),
            p: 1.0,
        }
    }

    pub fn firing_fraction(&self) -> f32 {
        self.values.mean() as f32
    }
}

/// Shared per-(grid shape, heads) attention tables: the window index map and
/// the additive mask that disables out-of-grid slots.
pub struct AttnTables {
    pub idx: Rc<Vec<i64>>,
    pub mask_bias: Tensor,
    pub cells: usize,
    pub heads: usize,
}

impl AttnTables {
    pub fn new(height: usize, width: usize, heads: usize) -> Self {
        let idx = neighbor_index_table(height, width);
        let n = height * width;
        let mut bias = vec![0.0f32; n * heads * 9];
        for cell in 0..n {
            for j in 0..9 {
                if idx[cell * 9 + j] < 0 {
                    for h in 0..heads {
                        bias[cell * heads * 9 + h * 9 + j] = MASK_OFF;
                    }
                }
            }
        }
        AttnTables {
            idx: Rc::new(idx),
            mask_bias: Tensor::new(vec![n, heads * 9], bias).unwrap(),
            cells: n,
            heads,
        }
    }
}

/// Tape handles for one parameter binding.
pub struct BoundTheta {
    pub layout: ChannelLayout,
    pub heads: usize,
    pub n_labels: usize,
    wq: TensorId,
    bq: TensorId,
    wk: TensorId,
    bk: TensorId,
    wv: TensorId,
    bv: TensorId,
    wo: TensorId,
    bo: TensorId,
    ff_w1: TensorId,
    ff_b1: TensorId,
    ff_w2: TensorId,
    ff_b2: TensorId,
    mod_w: TensorId,
    mod_b: TensorId,
    temb_w1: TensorId,
    temb_b1: TensorId,
    temb_w2: TensorId,
    temb_b2: TensorId,
    label_embed: TensorId,
    ln_gain: TensorId,
    ln_bias: TensorId,
}

impl BoundTheta {
    /// Push every parameter onto the tape, as leaves when gradients are
    /// wanted and as constants otherwise.
    pub fn bind(tape: &mut Tape, params: &ThetaParams, with_grad: bool) -> BoundTheta {
        let mut push = |t: &Tensor| {
            if with_grad {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let wq = push(&params.wq);
        let bq = push(&params.bq);
        let wk = push(&params.wk);
        let bk = push(&params.bk);
        let wv = push(&params.wv);
        let bv = push(&params.bv);
        let wo = push(&params.wo);
        let bo = push(&params.bo);
        let ff_w1 = push(&params.ff_w1);
        let ff_b1 = push(&params.ff_b1);
        let ff_w2 = push(&params.ff_w2);
        let ff_b2 = push(&params.ff_b2);
        let mod_w = push(&params.mod_w);
        let mod_b = push(&params.mod_b);
        let temb_w1 = push(&params.temb_w1);
        let temb_b1 = push(&params.temb_b1);
        let temb_w2 = push(&params.temb_w2);
        let temb_b2 = push(&params.temb_b2);
        let label_embed = push(&params.label_embed);
        let s = params.layout.total();
        let ln_gain = tape.constant(Tensor::ones(vec![s]));
        let ln_bias = tape.constant(Tensor::zeros(vec![s]));
        BoundTheta {
            layout: params.layout,
            heads: params.heads,
            n_labels: params.n_labels,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ff_w1,
            ff_b1,
            ff_w2,
            ff_b2,
            mod_w,
            mod_b,
            temb_w1,
            temb_b1,
            temb_w2,
            temb_b2,
            label_embed,
            ln_gain,
            ln_bias,
        }
    }

    /// Tape handle of a parameter by its `named()` name.
    pub fn id_of(&self, name: &str) -> Option<TensorId> {
        self.name_id_pairs()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, id)| id)
    }

    fn name_id_pairs(&self) -> [(&'static str, TensorId); 19] {
        [
            ("theta.wq", self.wq),
            ("theta.bq", self.bq),
            ("theta.wk", self.wk),
            ("theta.bk", self.bk),
            ("theta.wv", self.wv),
            ("theta.bv", self.bv),
            ("theta.wo", self.wo),
            ("theta.bo", self.bo),
            ("theta.ff.w1", self.ff_w1),
            ("theta.ff.b1", self.ff_b1),
            ("theta.ff.w2", self.ff_w2),
            ("theta.ff.b2", self.ff_b2),
            ("theta.mod.w", self.mod_w),
            ("theta.mod.b", self.mod_b),
            ("theta.temb.w1", self.temb_w1),
            ("theta.temb.b1", self.temb_b1),
            ("theta.temb.w2", self.temb_w2),
            ("theta.temb.b2", self.temb_b2),
            ("theta.label.embed", self.label_embed),
        ]
    }

    /// Gradient of each parameter after a backward pass, in `named()` order.
    pub fn grads<'a>(&self, tape: &'a Tape) -> Vec<(&'static str, &'a [f32])> {
        self.name_id_pairs()
            .iter()
            .map(|&(name, id)| (name, tape.grad(id).unwrap_or(&[])))
            .collect()
    }
}

/// Conditioning vector c = MLP(sinusoidal(t)) + sum of label embedding rows.
pub fn conditioning_id(
    tape: &mut Tape,
    bound: &BoundTheta,
    params: &ThetaParams,
    t: usize,
    label: &LabelCond,
) -> Result<TensorId> {
    let t_freq = tape.constant(params.timestep_embedding(t));
    let h = tape.matmul(t_freq, bound.temb_w1)?;
    let h = tape.add_row(h, bound.temb_b1)?;
    let h = tape.silu(h);
    let h = tape.matmul(h, bound.temb_w2)?;
    let temb = tape.add_row(h, bound.temb_b2)?;

    let indices = label.embed_indices(bound.n_labels)?;
    let k = indices.len();
    let rows = tape.gather_rows(bound.label_embed, Rc::new(indices));
    let ones = tape.constant(Tensor::ones(vec![1, k]));
    let label_emb = tape.matmul(ones, rows)?;
    tape.add(temb, label_emb)
}

fn modulate(
    tape: &mut Tape,
    x: TensorId,
    shift: TensorId,
    scale: TensorId,
) -> Result<TensorId> {
    let one_plus = tape.add_scalar(scale, 1.0);
    let scaled = tape.mul_row(x, one_plus)?;
    tape.add_row(scaled, shift)
}

/// One application of the rule on tape: reads the full cell states (constant
/// [C_in|C_gamma] columns concatenated with the evolving [C_out|C_h] block)
/// and produces the per-cell delta for the evolving block.
pub fn theta_delta_id(
    tape: &mut Tape,
    bound: &BoundTheta,
    tables: &AttnTables,
    in_gamma: TensorId,
    out_h: TensorId,
    cond: TensorId,
) -> Result<TensorId> {
    let layout = bound.layout;
    let s = layout.total();
    let n = tables.cells;
    let heads = bound.heads;

    let x = tape.concat_cols(&[in_gamma, out_h])?;

    let mod_in = tape.silu(cond);
    let mod6 = tape.matmul(mod_in, bound.mod_w)?;
    let mod6 = tape.add_row(mod6, bound.mod_b)?;
    let shift1 = tape.slice_cols(mod6, 0, s)?;
    let scale1 = tape.slice_cols(mod6, s, 2 * s)?;
    let gate1 = tape.slice_cols(mod6, 2 * s, 3 * s)?;
    let shift2 = tape.slice_cols(mod6, 3 * s, 4 * s)?;
    let scale2 = tape.slice_cols(mod6, 4 * s, 5 * s)?;
    let gate2 = tape.slice_cols(mod6, 5 * s, 6 * s)?;

    // attention half
    let h1 = tape.layer_norm(x, bound.ln_gain, bound.ln_bias, 1e-5)?;
    let h1 = modulate(tape, h1, shift1, scale1)?;
    let q = tape.matmul(h1, bound.wq)?;
    let q = tape.add_row(q, bound.bq)?;
    let k = tape.matmul(h1, bound.wk)?;
    let k = tape.add_row(k, bound.bk)?;
    let v = tape.matmul(h1, bound.wv)?;
    let v = tape.add_row(v, bound.bv)?;
    let logits = tape.local_qk(q, k, tables.idx.clone(), heads, 9)?;
    let bias = tape.constant(tables.mask_bias.clone());
    let logits = tape.add(logits, bias)?;
    let rows = tape.reshape(logits, vec![n * heads, 9])?;
    let weights = tape.softmax_last(rows);
    let weights = tape.reshape(weights, vec![n, heads * 9])?;
    let attn = tape.local_apply(weights, v, tables.idx.clone(), heads, 9)?;
    let proj = tape.matmul(attn, bound.wo)?;
    let proj = tape.add_row(proj, bound.bo)?;
    let attn_delta = tape.mul_row(proj, gate1)?;

    // feed-forward half on the residual stream
    let x2 = tape.add(x, attn_delta)?;
    let h2 = tape.layer_norm(x2, bound.ln_gain, bound.ln_bias, 1e-5)?;
    let h2 = modulate(tape, h2, shift2, scale2)?;
    let f = tape.matmul(h2, bound.ff_w1)?;
    let f = tape.add_row(f, bound.ff_b1)?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, bound.ff_w2)?;
    let f = tape.add_row(f, bound.ff_b2)?;
    let ff_delta = tape.mul_row(f, gate2)?;

    let delta_full = tape.add(attn_delta, ff_delta)?;
    tape.slice_cols(delta_full, layout.out_start(), s)
}

/// M rule applications with weight sharing, recorded on one tape.
///
/// A fresh Bernoulli(p) mask is drawn per step; p = 1 takes the mask-free
/// path. The mask is a constant on the tape, so gradients flow only through
/// fired cells.
#[allow(clippy::too_many_arguments)]
pub fn evolve_ids<R: Rng>(
    tape: &mut Tape,
    bound: &BoundTheta,
    tables: &AttnTables,
    in_gamma: TensorId,
    out_h0: TensorId,
    cond: TensorId,
    steps: usize,
    p: f32,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<TensorId> {
    if !(0.0..=1.0).contains(&p) {
        return Err(GecaError::Config(format!(
            "update probability must lie in [0,1], got {}",
            p
        )));
    }
    let mut out_h = out_h0;
    for _ in 0..steps {
        let delta = theta_delta_id(tape, bound, tables, in_gamma, out_h, cond)?;
        let masked = if p >= 1.0 {
            delta
        } else {
            let mask = UpdateMask::sample(height, width, p, rng)?;
            let flat = mask.values.reshaped(vec![height * width])?;
            let mask_id = tape.constant(flat);
            tape.mul_col(delta, mask_id)?
        };
        out_h = tape.add(out_h, masked)?;
    }
    Ok(out_h)
}

fn check_grid_matches(grid: &PixCellGrid, params: &ThetaParams) -> Result<()> {
    if grid.layout != params.layout {
        return Err(GecaError::Dimension(format!(
            "grid layout {:?} does not match rule layout {:?}",
            grid.layout, params.layout
        )));
    }
    Ok(())
}

/// Per-cell state delta from one rule application: [H, W, n_out + n_h].
pub fn theta_forward(
    grid: &PixCellGrid,
    t: usize,
    label: &LabelCond,
    params: &ThetaParams,
) -> Result<Tensor> {
    check_grid_matches(grid, params)?;
    let mut tape = Tape::new();
    let bound = BoundTheta::bind(&mut tape, params, false);
    let tables = AttnTables::new(grid.height, grid.width, params.heads);
    let in_gamma = tape.constant(grid.in_gamma_matrix());
    let out_h = tape.constant(grid.out_h_matrix());
    let cond = conditioning_id(&mut tape, &bound, params, t, label)?;
    let delta = theta_delta_id(&mut tape, &bound, &tables, in_gamma, out_h, cond)?;
    Tensor::new(
        vec![grid.height, grid.width, grid.layout.out_h()],
        tape.value(delta).to_vec(),
    )
}

/// One stochastic cellular update (Bernoulli(p) per cell). C_in and C_gamma
/// are carried over untouched; p = 0 returns the grid unchanged without
/// consuming randomness.
pub fn geca_step<R: Rng>(
    grid: &PixCellGrid,
    t: usize,
    label: &LabelCond,
    params: &ThetaParams,
    p: f32,
    rng: &mut R,
) -> Result<PixCellGrid> {
    evolve(grid, t, label, params, 1, p, rng)
}

/// M sequential updates with a shared parameter set.
pub fn evolve<R: Rng>(
    grid: &PixCellGrid,
    t: usize,
    label: &LabelCond,
    params: &ThetaParams,
    steps: usize,
    p: f32,
    rng: &mut R,
) -> Result<PixCellGrid> {
    check_grid_matches(grid, params)?;
    if steps == 0 {
        return Err(GecaError::Config("evolve requires at least one step".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(GecaError::Config(format!(
            "update probability must lie in [0,1], got {}",
            p
        )));
    }
    if p == 0.0 {
        return Ok(grid.clone());
    }
    let mut tape = Tape::new();
    let bound = BoundTheta::bind(&mut tape, params, false);
    let tables = AttnTables::new(grid.height, grid.width, params.heads);
    let in_gamma = tape.constant(grid.in_gamma_matrix());
    let out_h0 = tape.constant(grid.out_h_matrix());
    let cond = conditioning_id(&mut tape, &bound, params, t, label)?;
    let final_id = evolve_ids(
        &mut tape,
        &bound,
        &tables,
        in_gamma,
        out_h0,
        cond,
        steps,
        p,
        grid.height,
        grid.width,
        rng,
    )?;
    let out_h = Tensor::new(
        vec![grid.cells(), grid.layout.out_h()],
        tape.value(final_id).to_vec(),
    )?;
    Ok(grid.with_out_h_matrix(&out_h))
}
