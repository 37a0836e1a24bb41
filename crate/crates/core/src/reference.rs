//! Slow scalar f64 reference implementations used as independent test
//! oracles. Nothing here touches the tape: the update rule is recomputed as
//! dense (H*W)x(H*W) attention with a Chebyshev-distance mask, in double
//! precision, so finite differences of these functions are numerically
//! clean. Production code must never call into this module.

use crate::grid::PixCellGrid;
use crate::rule::{LabelCond, ThetaParams};

fn f64v(t: &crate::tensor::Tensor) -> Vec<f64> {
    t.data.iter().map(|&x| x as f64).collect()
}

fn mm(x: &[f64], y: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for p in 0..k {
            let xv = x[i * k + p];
            for j in 0..n {
                out[i * n + j] += xv * y[p * n + j];
            }
        }
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    0.5 * x
        * (1.0
            + ((2.0f64 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// Conditioning vector c = MLP(sinusoidal(t)) + sum of label rows, in f64.
pub fn conditioning(params: &ThetaParams, t: usize, label: &LabelCond) -> Vec<f64> {
    let cd = params.cond_dim;
    let temb = f64v(&params.timestep_embedding(t));
    let tw1 = f64v(&params.temb_w1);
    let tb1 = f64v(&params.temb_b1);
    let tw2 = f64v(&params.temb_w2);
    let tb2 = f64v(&params.temb_b2);
    let mut h = mm(&temb, &tw1, 1, cd, cd);
    for i in 0..cd {
        h[i] = silu(h[i] + tb1[i]);
    }
    let mut cond = mm(&h, &tw2, 1, cd, cd);
    for i in 0..cd {
        cond[i] += tb2[i];
    }
    let embed = f64v(&params.label_embed);
    let rows: Vec<usize> = match label {
        LabelCond::Null => vec![params.n_labels],
        LabelCond::Bits(bits) => bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect(),
    };
    for r in rows {
        for i in 0..cd {
            cond[i] += embed[r * cd + i];
        }
    }
    cond
}

/// One rule application as dense multi-head attention over all cells with
/// pairs beyond Chebyshev distance 1 masked out. Input is the full state
/// buffer in f64 ([H*W, total] row-major); returns the per-cell delta for
/// the evolving [C_out | C_h] block.
pub fn theta_delta(
    state: &[f64],
    height: usize,
    width: usize,
    params: &ThetaParams,
    t: usize,
    label: &LabelCond,
) -> Vec<f64> {
    let layout = params.layout;
    let s = layout.total();
    let a = params.attn_dim();
    let heads = params.heads;
    let hd = a / heads;
    let n = height * width;

    let cond = conditioning(params, t, label);
    let modw = f64v(&params.mod_w);
    let modb = f64v(&params.mod_b);
    let cond_silu: Vec<f64> = cond.iter().map(|&x| silu(x)).collect();
    let cd = params.cond_dim;
    let mut mod6 = mm(&cond_silu, &modw, 1, cd, 6 * s);
    for i in 0..6 * s {
        mod6[i] += modb[i];
    }
    let seg = |k: usize| &mod6[k * s..(k + 1) * s];

    let ln_mod = |row: &[f64], shift: &[f64], scale: &[f64]| -> Vec<f64> {
        let mean = row.iter().sum::<f64>() / s as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        (0..s)
            .map(|c| ((row[c] - mean) * inv) * (1.0 + scale[c]) + shift[c])
            .collect()
    };
    let h1m: Vec<Vec<f64>> = (0..n)
        .map(|cell| ln_mod(&state[cell * s..(cell + 1) * s], seg(0), seg(1)))
        .collect();

    let wq = f64v(&params.wq);
    let bq = f64v(&params.bq);
    let wk = f64v(&params.wk);
    let bk = f64v(&params.bk);
    let wv = f64v(&params.wv);
    let bv = f64v(&params.bv);
    let proj = |tok: &[f64], w: &[f64], b: &[f64]| {
        let mut out = mm(tok, w, 1, s, a);
        for i in 0..a {
            out[i] += b[i];
        }
        out
    };
    let q: Vec<Vec<f64>> = h1m.iter().map(|tk| proj(tk, &wq, &bq)).collect();
    let k: Vec<Vec<f64>> = h1m.iter().map(|tk| proj(tk, &wk, &bk)).collect();
    let v: Vec<Vec<f64>> = h1m.iter().map(|tk| proj(tk, &wv, &bv)).collect();

    let mut attn_out = vec![0.0f64; n * a];
    for qi in 0..n {
        let (qr, qc) = (qi / width, qi % width);
        for head in 0..heads {
            let mut logits = vec![f64::NEG_INFINITY; n];
            for ki in 0..n {
                let (kr, kc) = (ki / width, ki % width);
                let cheb = (qr as i64 - kr as i64)
                    .abs()
                    .max((qc as i64 - kc as i64).abs());
                if cheb <= 1 {
                    let mut dot = 0.0;
                    for d in 0..hd {
                        dot += q[qi][head * hd + d] * k[ki][head * hd + d];
                    }
                    logits[ki] = dot / (hd as f64).sqrt();
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for ki in 0..n {
                let weight = exps[ki] / z;
                if weight > 0.0 {
                    for d in 0..hd {
                        attn_out[qi * a + head * hd + d] += weight * v[ki][head * hd + d];
                    }
                }
            }
        }
    }

    let wo = f64v(&params.wo);
    let bo = f64v(&params.bo);
    let w1 = f64v(&params.ff_w1);
    let b1 = f64v(&params.ff_b1);
    let w2 = f64v(&params.ff_w2);
    let b2 = f64v(&params.ff_b2);
    let mut delta = vec![0.0f64; n * layout.out_h()];
    for cell in 0..n {
        let mut attn_delta = mm(&attn_out[cell * a..(cell + 1) * a], &wo, 1, a, s);
        for i in 0..s {
            attn_delta[i] = (attn_delta[i] + bo[i]) * seg(2)[i];
        }
        let x2: Vec<f64> = (0..s)
            .map(|c| state[cell * s + c] + attn_delta[c])
            .collect();
        let h2 = ln_mod(&x2, seg(3), seg(4));
        let mut f = mm(&h2, &w1, 1, s, 4 * s);
        for i in 0..4 * s {
            f[i] = gelu(f[i] + b1[i]);
        }
        let mut ff_delta = mm(&f, &w2, 1, 4 * s, s);
        for i in 0..s {
            ff_delta[i] = (ff_delta[i] + b2[i]) * seg(5)[i];
        }
        for (o, c) in (layout.out_start()..s).enumerate() {
            delta[cell * layout.out_h() + o] = attn_delta[c] + ff_delta[c];
        }
    }
    delta
}

/// Deterministic (p = 1) M-step evolution followed by the noise-prediction
/// MSE, all in f64. Mirrors the training loss for a single grid.
pub fn evolve_mse_loss(
    grid: &PixCellGrid,
    t: usize,
    label: &LabelCond,
    params: &ThetaParams,
    steps: usize,
    eps: &[f32],
) -> f64 {
    let layout = grid.layout;
    let s = layout.total();
    let n = grid.cells();
    let mut state: Vec<f64> = grid.state.data.iter().map(|&v| v as f64).collect();
    for _ in 0..steps {
        let delta = theta_delta(&state, grid.height, grid.width, params, t, label);
        for cell in 0..n {
            for (o, c) in (layout.out_start()..s).enumerate() {
                state[cell * s + c] += delta[cell * layout.out_h() + o];
            }
        }
    }
    let mut sum = 0.0f64;
    for cell in 0..n {
        for ch in 0..layout.n_out {
            let pred = state[cell * s + layout.out_start() + ch];
            let d = pred - eps[cell * layout.n_out + ch] as f64;
            sum += d * d;
        }
    }
    sum / (n * layout.n_out) as f64
}
