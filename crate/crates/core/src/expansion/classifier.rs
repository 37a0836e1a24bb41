//! Small convolutional multi-label classifier.
//!
//! Three conv(3x3) + relu + avgpool(2x2) stages and a linear head with one
//! sigmoid output per label, trained with binary cross-entropy. Convolution
//! is expressed as window gathers + matmul on the tape, so the adjoints come
//! from the existing primitives.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GecaError, Result};
use crate::expansion::metrics::{compute_metrics, EvalReport};
use crate::expansion::LabeledDataset;
use crate::optim::{Adam, AdamConfig};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

const STAGE_CHANNELS: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone)]
pub struct ClassifierParams {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub n_labels: usize,
    pub conv_w: Vec<Tensor>,
    pub conv_b: Vec<Tensor>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ClassifierParams {
    pub fn init<R: Rng>(
        height: usize,
        width: usize,
        in_channels: usize,
        n_labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if height % 8 != 0 || width % 8 != 0 {
            return Err(GecaError::Config(format!(
                "classifier needs extents divisible by 8, got {}x{}",
                height, width
            )));
        }
        if n_labels == 0 {
            return Err(GecaError::Config("classifier needs at least one label".into()));
        }
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut c_in = in_channels;
        for &c_out in &STAGE_CHANNELS {
            conv_w.push(Tensor::xavier(9 * c_in, c_out, rng));
            conv_b.push(Tensor::zeros(vec![c_out]));
            c_in = c_out;
        }
        let flat = (height / 8) * (width / 8) * STAGE_CHANNELS[2];
        Ok(ClassifierParams {
            height,
            width,
            in_channels,
            n_labels,
            conv_w,
            conv_b,
            head_w: Tensor::xavier(flat, n_labels, rng),
            head_b: Tensor::zeros(vec![n_labels]),
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.conv_w.iter().zip(&self.conv_b).enumerate() {
            out.push((format!("clf.conv{}.w", i + 1), w));
            out.push((format!("clf.conv{}.b", i + 1), b));
        }
        out.push(("clf.head.w".into(), &self.head_w));
        out.push(("clf.head.b".into(), &self.head_b));
        out
    }

    fn param_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()).enumerate() {
            out.push((format!("clf.conv{}.w", i + 1), w));
            out.push((format!("clf.conv{}.b", i + 1), b));
        }
        out.push(("clf.head.w".into(), &mut self.head_w));
        out.push(("clf.head.b".into(), &mut self.head_b));
        out
    }
}

/// Index tables for one (batch, height, width) stack.
struct ConvTables {
    /// 9 gather tables, one per window offset.
    offsets: Vec<Rc<Vec<i64>>>,
    /// 4 gather tables picking the corners of each 2x2 pooling window.
    pool: Vec<Rc<Vec<i64>>>,
}

fn build_tables(batch: usize, h: usize, w: usize) -> ConvTables {
    let mut offsets = Vec::with_capacity(9);
    for di in -1i64..=1 {
        for dj in -1i64..=1 {
            let mut idx = Vec::with_capacity(batch * h * w);
            for b in 0..batch as i64 {
                for i in 0..h as i64 {
                    for j in 0..w as i64 {
                        let (ni, nj) = (i + di, j + dj);
                        if ni >= 0 && nj >= 0 && ni < h as i64 && nj < w as i64 {
                            idx.push(b * (h * w) as i64 + ni * w as i64 + nj);
                        } else {
                            idx.push(-1);
                        }
                    }
                }
            }
            offsets.push(Rc::new(idx));
        }
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut pool = Vec::with_capacity(4);
    for a in 0..2i64 {
        for c in 0..2i64 {
            let mut idx = Vec::with_capacity(batch * oh * ow);
            for b in 0..batch as i64 {
                for i in 0..oh as i64 {
                    for j in 0..ow as i64 {
                        idx.push(b * (h * w) as i64 + (2 * i + a) * w as i64 + (2 * j + c));
                    }
                }
            }
            pool.push(Rc::new(idx));
        }
    }
    ConvTables { offsets, pool }
}

struct BoundClassifier {
    conv_w: Vec<TensorId>,
    conv_b: Vec<TensorId>,
    head_w: TensorId,
    head_b: TensorId,
}

fn bind(tape: &mut Tape, params: &ClassifierParams, with_grad: bool) -> BoundClassifier {
    let mut push = |t: &Tensor| {
        if with_grad {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    BoundClassifier {
        conv_w: params.conv_w.iter().map(&mut push).collect(),
        conv_b: params.conv_b.iter().map(&mut push).collect(),
        head_w: push(&params.head_w),
        head_b: push(&params.head_b),
    }
}

/// Forward pass over a stacked batch; returns (logits [B, L], penultimate
/// features [B, flat]).
fn forward_ids(
    tape: &mut Tape,
    bound: &BoundClassifier,
    params: &ClassifierParams,
    images: TensorId,
    batch: usize,
) -> Result<(TensorId, TensorId)> {
    let (mut h, mut w) = (params.height, params.width);
    let mut x = images;
    for stage in 0..3 {
        let tables = build_tables(batch, h, w);
        let gathered: Vec<TensorId> = tables
            .offsets
            .iter()
            .map(|idx| tape.gather_rows(x, idx.clone()))
            .collect();
        let windows = tape.concat_cols(&gathered)?;
        let conv = tape.matmul(windows, bound.conv_w[stage])?;
        let conv = tape.add_row(conv, bound.conv_b[stage])?;
        let act = tape.relu(conv);
        // 2x2 average pool
        let corners: Vec<TensorId> = tables
            .pool
            .iter()
            .map(|idx| tape.gather_rows(act, idx.clone()))
            .collect();
        let s1 = tape.add(corners[0], corners[1])?;
        let s2 = tape.add(corners[2], corners[3])?;
        let s = tape.add(s1, s2)?;
        x = tape.scale(s, 0.25);
        h /= 2;
        w /= 2;
    }
    let flat = h * w * STAGE_CHANNELS[2];
    let features = tape.reshape(x, vec![batch, flat])?;
    let logits = tape.matmul(features, bound.head_w)?;
    let logits = tape.add_row(logits, bound.head_b)?;
    Ok((logits, features))
}

fn stack_images(images: &[&Tensor], params: &ClassifierParams) -> Result<Tensor> {
    let rows = images.len() * params.height * params.width;
    let mut data = Vec::with_capacity(rows * params.in_channels);
    for img in images {
        if img.shape != vec![params.height, params.width, params.in_channels] {
            return Err(GecaError::Dimension(format!(
                "classifier expects [{}, {}, {}] images, got {:?}",
                params.height, params.width, params.in_channels, img.shape
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![rows, params.in_channels], data)
}

/// Per-label sigmoid scores, [n_items, n_labels].
pub fn predict(params: &ClassifierParams, images: &[&Tensor]) -> Result<Vec<Vec<f32>>> {
    if images.is_empty() {
        return Ok(vec![]);
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false);
    let stacked = stack_images(images, params)?;
    let x = tape.constant(stacked);
    let (logits, _) = forward_ids(&mut tape, &bound, params, x, images.len())?;
    let v = tape.value(logits);
    Ok((0..images.len())
        .map(|i| {
            (0..params.n_labels)
                .map(|l| 1.0 / (1.0 + (-v[i * params.n_labels + l]).exp()))
                .collect()
        })
        .collect())
}

/// Penultimate activations, [n_items][flat] (optional MMD feature space).
pub fn penultimate_features(
    params: &ClassifierParams,
    images: &[&Tensor],
) -> Result<Vec<Vec<f32>>> {
    if images.is_empty() {
        return Ok(vec![]);
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false);
    let stacked = stack_images(images, params)?;
    let x = tape.constant(stacked);
    let (_, features) = forward_ids(&mut tape, &bound, params, x, images.len())?;
    let v = tape.value(features);
    let flat = tape.tensor(features).shape[1];
    Ok((0..images.len())
        .map(|i| v[i * flat..(i + 1) * flat].to_vec())
        .collect())
}

#[derive(Debug, Clone)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Validation cadence for best-checkpoint selection.
    pub eval_every: usize,
    pub threshold: f32,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            steps: 800,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            eval_every: 100,
            threshold: 0.5,
        }
    }
}

/// Train with Adam on binary cross-entropy; returns the weights with the
/// best validation mAP. Zero steps returns the initialization.
pub fn train_classifier(
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &ClassifierTrainConfig,
) -> Result<ClassifierParams> {
    if train.is_empty() {
        return Err(GecaError::Input("empty classifier training set".into()));
    }
    let images = train.load_all_images()?;
    let first = &images[0];
    if first.rank() != 3 {
        return Err(GecaError::Dimension("images must be [H, W, C]".into()));
    }
    let (h, w, c) = (first.shape[0], first.shape[1], first.shape[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ClassifierParams::init(h, w, c, train.n_labels(), &mut rng)?;
    if config.steps == 0 {
        return Ok(params);
    }
    let val_images = val.load_all_images()?;
    let mut adam = Adam::new(AdamConfig {
        lr: config.learning_rate,
        ..Default::default()
    });
    let mut best = params.clone();
    let mut best_map = f64::NEG_INFINITY;

    for step in 1..=config.steps {
        let batch: Vec<usize> = (0..config.batch_size.min(train.len()))
            .map(|_| rng.gen_range(0..train.len()))
            .collect();
        let batch_images: Vec<&Tensor> = batch.iter().map(|&i| &images[i]).collect();
        let mut targets = Vec::with_capacity(batch.len() * params.n_labels);
        for &i in &batch {
            targets.extend(train.items[i].labels.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, true);
        let stacked = stack_images(&batch_images, &params)?;
        let x = tape.constant(stacked);
        let (logits, _) = forward_ids(&mut tape, &bound, &params, x, batch.len())?;
        let y = tape.constant(Tensor::new(vec![batch.len(), params.n_labels], targets)?);
        let loss = tape.bce_with_logits(logits, y)?;
        let loss_value = tape.value(loss)[0];
        if !loss_value.is_finite() {
            return Err(GecaError::Training(format!(
                "non-finite classifier loss at step {}",
                step
            )));
        }
        tape.backward(loss)?;
        let mut grads: Vec<(String, Vec<f32>)> = Vec::new();
        for (name, id) in params
            .named()
            .iter()
            .map(|(n, _)| n.clone())
            .zip(ids_of(&bound))
        {
            grads.push((name, tape.grad(id).map(|g| g.to_vec()).unwrap_or_default()));
        }
        let updates: Vec<(&str, &mut Tensor, &[f32])> = params
            .param_tensors_mut()
            .into_iter()
            .zip(grads.iter())
            .map(|((name, t), (gname, g))| {
                debug_assert_eq!(&name, gname);
                (gname.as_str(), t, g.as_slice())
            })
            .collect();
        adam.step(updates)?;

        if step % config.eval_every == 0 || step == config.steps {
            if !val.is_empty() {
                let refs: Vec<&Tensor> = val_images.iter().collect();
                let scores = predict(&params, &refs)?;
                let report = evaluate_scores(&scores, val, config.threshold);
                let map = report.macro_map.unwrap_or(0.0);
                if map > best_map {
                    best_map = map;
                    best = params.clone();
                }
            } else {
                best = params.clone();
            }
        }
    }
    Ok(best)
}

fn ids_of(bound: &BoundClassifier) -> Vec<TensorId> {
    let mut ids = Vec::new();
    for (w, b) in bound.conv_w.iter().zip(&bound.conv_b) {
        ids.push(*w);
        ids.push(*b);
    }
    ids.push(bound.head_w);
    ids.push(bound.head_b);
    ids
}

/// Score a dataset and compute the full metric roster.
pub fn evaluate_classifier(
    params: &ClassifierParams,
    test: &LabeledDataset,
    threshold: f32,
) -> Result<EvalReport> {
    let images = test.load_all_images()?;
    let refs: Vec<&Tensor> = images.iter().collect();
    let scores = predict(params, &refs)?;
    Ok(evaluate_scores(&scores, test, threshold))
}

fn evaluate_scores(scores: &[Vec<f32>], dataset: &LabeledDataset, threshold: f32) -> EvalReport {
    let targets: Vec<Vec<bool>> = dataset.items.iter().map(|i| i.labels.clone()).collect();
    compute_metrics(scores, &targets, threshold)
}
