//! The pix-cell grid: channel layout, seeding, positional encoding and
//! Moore-neighborhood access.
//!
//! Each of the H*W cells holds one state vector laid out as
//! [C_in | C_gamma | C_out | C_h]. C_in carries the (noisy) image values,
//! C_gamma a fixed sinusoidal position code, C_out the cell's predicted
//! output and C_h its hidden state. Only C_out and C_h evolve.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GecaError, Result};
use crate::tensor::Tensor;

/// Channel partition of a cell state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    /// Image channels (1 grayscale, 3 RGB).
    pub n_in: usize,
    /// Positional-encoding channels (must be even).
    pub n_gamma: usize,
    /// Output channels; always equal to `n_in`.
    pub n_out: usize,
    /// Hidden-state channels.
    pub n_h: usize,
}

impl ChannelLayout {
    pub fn new(n_in: usize, n_gamma: usize, n_h: usize) -> Result<Self> {
        let layout = ChannelLayout {
            n_in,
            n_gamma,
            n_out: n_in,
            n_h,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// Defaults sized for desk-scale runs: 8 positional channels, 16 hidden.
    pub fn with_defaults(n_in: usize) -> Result<Self> {
        ChannelLayout::new(n_in, 8, 16)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 || self.n_gamma == 0 || self.n_out == 0 || self.n_h == 0 {
            return Err(GecaError::Config(
                "all channel counts must be at least 1".into(),
            ));
        }
        if self.n_out != self.n_in {
            return Err(GecaError::Config(format!(
                "n_out ({}) must equal n_in ({})",
                self.n_out, self.n_in
            )));
        }
        if self.n_gamma % 2 != 0 {
            return Err(GecaError::Config(format!(
                "n_gamma must be even, got {}",
                self.n_gamma
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_in + self.n_gamma + self.n_out + self.n_h
    }

    /// Channel offset where C_out starts.
    pub fn out_start(&self) -> usize {
        self.n_in + self.n_gamma
    }

    /// Channel offset where C_h starts.
    pub fn h_start(&self) -> usize {
        self.n_in + self.n_gamma + self.n_out
    }

    /// Width of the evolving [C_out | C_h] block.
    pub fn out_h(&self) -> usize {
        self.n_out + self.n_h
    }
}

/// Deterministic seed for grid initialization; the center cell is always
/// (floor(H/2), floor(W/2)).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSeed(pub u64);

impl GridSeed {
    pub fn center(height: usize, width: usize) -> (usize, usize) {
        (height / 2, width / 2)
    }
}

/// H x W grid of pix-cell state vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PixCellGrid {
    pub height: usize,
    pub width: usize,
    pub layout: ChannelLayout,
    /// [H, W, layout.total()] row-major.
    pub state: Tensor,
}

impl PixCellGrid {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    fn channel_block(&self, start: usize, width: usize) -> Tensor {
        let total = self.layout.total();
        let n = self.cells();
        let mut data = Vec::with_capacity(n * width);
        for cell in 0..n {
            let base = cell * total + start;
            data.extend_from_slice(&self.state.data[base..base + width]);
        }
        Tensor::new(vec![self.height, self.width, width], data).unwrap()
    }

    fn set_channel_block(&mut self, start: usize, width: usize, values: &Tensor) {
        let total = self.layout.total();
        debug_assert_eq!(values.numel(), self.cells() * width);
        for cell in 0..self.cells() {
            let base = cell * total + start;
            self.state.data[base..base + width]
                .copy_from_slice(&values.data[cell * width..(cell + 1) * width]);
        }
    }

    pub fn c_in(&self) -> Tensor {
        self.channel_block(0, self.layout.n_in)
    }

    pub fn c_gamma(&self) -> Tensor {
        self.channel_block(self.layout.n_in, self.layout.n_gamma)
    }

    pub fn c_out(&self) -> Tensor {
        self.channel_block(self.layout.out_start(), self.layout.n_out)
    }

    pub fn c_h(&self) -> Tensor {
        self.channel_block(self.layout.h_start(), self.layout.n_h)
    }

    pub fn set_c_out(&mut self, values: &Tensor) {
        self.set_channel_block(self.layout.out_start(), self.layout.n_out, values);
    }

    pub fn set_c_h(&mut self, values: &Tensor) {
        self.set_channel_block(self.layout.h_start(), self.layout.n_h, values);
    }

    /// The constant [C_in | C_gamma] block as an [N, n_in+n_gamma] matrix.
    pub fn in_gamma_matrix(&self) -> Tensor {
        let t = self.channel_block(0, self.layout.n_in + self.layout.n_gamma);
        t.reshaped(vec![self.cells(), self.layout.n_in + self.layout.n_gamma])
            .unwrap()
    }

    /// The evolving [C_out | C_h] block as an [N, n_out+n_h] matrix.
    pub fn out_h_matrix(&self) -> Tensor {
        let t = self.channel_block(self.layout.out_start(), self.layout.out_h());
        t.reshaped(vec![self.cells(), self.layout.out_h()]).unwrap()
    }

    /// Replace the evolving block from an [N, n_out+n_h] matrix, leaving
    /// C_in and C_gamma byte-for-byte untouched.
    pub fn with_out_h_matrix(&self, values: &Tensor) -> PixCellGrid {
        let mut next = self.clone();
        let start = self.layout.out_start();
        let width = self.layout.out_h();
        let total = self.layout.total();
        for cell in 0..self.cells() {
            let base = cell * total + start;
            next.state.data[base..base + width]
                .copy_from_slice(&values.data[cell * width..(cell + 1) * width]);
        }
        next
    }

    /// State vector of one cell.
    pub fn cell_state(&self, i: usize, j: usize) -> &[f32] {
        let total = self.layout.total();
        let base = (i * self.width + j) * total;
        &self.state.data[base..base + total]
    }
}

/// Sinusoidal positional encoding over grid coordinates.
///
/// The first half of the channels encodes the row index, the second half the
/// column index; within each half, channels pair sin/cos at geometrically
/// spaced frequencies (base 10000).
pub fn positional_encoding(height: usize, width: usize, n_gamma: usize) -> Result<Tensor> {
    if n_gamma == 0 || n_gamma % 2 != 0 {
        return Err(GecaError::Config(format!(
            "positional encoding needs an even channel count, got {}",
            n_gamma
        )));
    }
    let per_axis = n_gamma / 2;
    let mut data = vec![0.0f32; height * width * n_gamma];
    let encode_axis = |pos: usize, out: &mut [f32]| {
        // pairs (sin, cos); a trailing unpaired channel gets the next sin
        let pairs = per_axis / 2;
        for k in 0..pairs {
            let freq = (10000.0f64).powf(-(k as f64) / pairs.max(1) as f64);
            let angle = pos as f64 * freq;
            out[2 * k] = angle.sin() as f32;
            out[2 * k + 1] = angle.cos() as f32;
        }
        if per_axis % 2 == 1 {
            let freq = (10000.0f64).powf(-(pairs as f64) / (pairs + 1) as f64);
            out[per_axis - 1] = (pos as f64 * freq).sin() as f32;
        }
    };
    for i in 0..height {
        for j in 0..width {
            let base = (i * width + j) * n_gamma;
            encode_axis(i, &mut data[base..base + per_axis]);
            encode_axis(j, &mut data[base + per_axis..base + n_gamma]);
        }
    }
    Tensor::new(vec![height, width, n_gamma], data)
}

/// Build the initial grid for one diffusion step: C_in from the noisy image,
/// C_gamma from the positional code, C_out and C_h zero everywhere except
/// the center cell, which gets i.i.d. standard-normal draws (C_out first,
/// then C_h).
pub fn init_grid(noisy_image: &Tensor, layout: ChannelLayout, seed: GridSeed) -> Result<PixCellGrid> {
    layout.validate()?;
    if noisy_image.rank() != 3 || noisy_image.shape[2] != layout.n_in {
        return Err(GecaError::Dimension(format!(
            "image shape {:?} does not match layout (n_in = {})",
            noisy_image.shape, layout.n_in
        )));
    }
    let (height, width) = (noisy_image.shape[0], noisy_image.shape[1]);
    if height < 3 || width < 3 {
        return Err(GecaError::Dimension(format!(
            "grid must be at least 3x3, got {}x{}",
            height, width
        )));
    }
    let gamma = positional_encoding(height, width, layout.n_gamma)?;
    let total = layout.total();
    let mut data = vec![0.0f32; height * width * total];
    for cell in 0..height * width {
        let base = cell * total;
        data[base..base + layout.n_in]
            .copy_from_slice(&noisy_image.data[cell * layout.n_in..(cell + 1) * layout.n_in]);
        data[base + layout.n_in..base + layout.n_in + layout.n_gamma]
            .copy_from_slice(&gamma.data[cell * layout.n_gamma..(cell + 1) * layout.n_gamma]);
    }
    let (ci, cj) = GridSeed::center(height, width);
    let center = (ci * width + cj) * total;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
    let draws = Tensor::randn(vec![layout.out_h()], &mut rng);
    data[center + layout.out_start()..center + layout.out_start() + layout.out_h()]
        .copy_from_slice(&draws.data);
    Ok(PixCellGrid {
        height,
        width,
        layout,
        state: Tensor::new(vec![height, width, total], data)?,
    })
}

/// Fixed traversal order of the 3x3 Moore window (row-major offsets, self at
/// slot 4).
pub const NEIGHBOR_OFFSETS: [(i64, i64); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Per-cell row indices of the 9 window slots (-1 where the window leaves
/// the grid). Shared by the attention kernels and the gather oracle.
pub fn neighbor_index_table(height: usize, width: usize) -> Vec<i64> {
    let mut idx = Vec::with_capacity(height * width * 9);
    for i in 0..height as i64 {
        for j in 0..width as i64 {
            for (di, dj) in NEIGHBOR_OFFSETS {
                let (ni, nj) = (i + di, j + dj);
                if ni >= 0 && nj >= 0 && ni < height as i64 && nj < width as i64 {
                    idx.push(ni * width as i64 + nj);
                } else {
                    idx.push(-1);
                }
            }
        }
    }
    idx
}

/// The 3x3 Moore neighborhood of cell (i, j) as 9 state vectors (self at
/// slot 4); out-of-grid slots are zero states.
pub fn neighborhood8(grid: &PixCellGrid, i: usize, j: usize) -> Tensor {
    let total = grid.layout.total();
    let mut data = vec![0.0f32; 9 * total];
    for (slot, (di, dj)) in NEIGHBOR_OFFSETS.iter().enumerate() {
        let (ni, nj) = (i as i64 + di, j as i64 + dj);
        if ni >= 0 && nj >= 0 && ni < grid.height as i64 && nj < grid.width as i64 {
            data[slot * total..(slot + 1) * total]
                .copy_from_slice(grid.cell_state(ni as usize, nj as usize));
        }
    }
    Tensor::new(vec![9, total], data).unwrap()
}
