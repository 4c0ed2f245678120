//! Forward and reverse passes over the fixed layer zoo, plus the loss
//! functions built on them.
//!
//! `forward_trace` records everything the backward pass needs (per-layer
//! inputs, batch-norm normalized values and inverse stddevs). Gradients are
//! exact; the test suite holds them against central finite differences.

use super::{Batch, LayerSpec, Mode, Model, ParamVector, PenaltyTerm, Segment, BN_EPS};
use crate::data::TaskDataset;
use crate::error::{DuaError, Result};

/// Which statistics batch-norm layers normalize with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum StatsMode {
    /// Current-batch statistics (training).
    Batch,
    /// Stored running statistics (inference / estimation).
    Running,
}

/// Per-feature mean and population variance of one batch at one BN layer.
pub(crate) struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct BnTrace {
    /// Normalized activations, n x features.
    xhat: Vec<f64>,
    /// 1 / sqrt(var + eps), per feature.
    inv_std: Vec<f64>,
}

pub(crate) struct Trace {
    /// acts[k] is the input to layer k; acts[layers.len()] is the logits.
    acts: Vec<Vec<f64>>,
    bn: Vec<BnTrace>,
    /// Batch statistics per BN layer; filled only in `StatsMode::Batch`.
    pub batch_stats: Vec<BnBatchStats>,
    stats_mode: StatsMode,
    n: usize,
}

impl Trace {
    pub(crate) fn logits(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    pub(crate) fn into_logits(mut self) -> Vec<f64> {
        self.acts.pop().unwrap()
    }
}

fn segments_by_layer(model: &Model) -> Vec<Vec<Segment>> {
    let mut by_layer = vec![Vec::new(); model.layout.layers.len()];
    for seg in model.layout.segments() {
        by_layer[seg.layer].push(seg);
    }
    by_layer
}

pub(crate) fn forward_trace(model: &Model, batch: &Batch, stats: StatsMode) -> Result<Trace> {
    let layout = &model.layout;
    if batch.dim != layout.input_dim() {
        return Err(DuaError::ShapeMismatch(format!(
            "batch rows of {} pixels, layout expects {}",
            batch.dim,
            layout.input_dim()
        )));
    }
    if batch.n == 0 {
        return Err(DuaError::EmptyDataset("forward batch".into()));
    }
    if stats == StatsMode::Batch && layout.has_batch_norm() && batch.n < 2 {
        return Err(DuaError::SingleSampleBatchNorm);
    }

    let by_layer = segments_by_layer(model);
    let params = model.params.values();
    let n = batch.n;

    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layout.layers.len() + 1);
    acts.push(batch.pixels.to_vec());
    let mut bn_traces = Vec::new();
    let mut batch_stats = Vec::new();

    for (k, layer) in layout.layers.iter().enumerate() {
        let x = acts.last().unwrap();
        let out = match *layer {
            LayerSpec::Dense { inputs, outputs } => {
                let w = &params[by_layer[k][0].offset..by_layer[k][0].offset + inputs * outputs];
                let b = &params[by_layer[k][1].offset..by_layer[k][1].offset + outputs];
                let mut y = vec![0.0; n * outputs];
                for r in 0..n {
                    let xr = &x[r * inputs..(r + 1) * inputs];
                    let yr = &mut y[r * outputs..(r + 1) * outputs];
                    yr.copy_from_slice(b);
                    for (i, &xi) in xr.iter().enumerate() {
                        if xi != 0.0 {
                            let wrow = &w[i * outputs..(i + 1) * outputs];
                            for (o, &wv) in wrow.iter().enumerate() {
                                yr[o] += xi * wv;
                            }
                        }
                    }
                }
                y
            }
            LayerSpec::ReLU => x.iter().map(|v| v.max(0.0)).collect(),
            LayerSpec::BatchNorm { features } => {
                let gamma = &params[by_layer[k][0].offset..by_layer[k][0].offset + features];
                let beta = &params[by_layer[k][1].offset..by_layer[k][1].offset + features];
                let (mean, var) = match stats {
                    StatsMode::Batch => {
                        let mut mean = vec![0.0; features];
                        let mut var = vec![0.0; features];
                        for r in 0..n {
                            for j in 0..features {
                                mean[j] += x[r * features + j];
                            }
                        }
                        for m in &mut mean {
                            *m /= n as f64;
                        }
                        for r in 0..n {
                            for j in 0..features {
                                let d = x[r * features + j] - mean[j];
                                var[j] += d * d;
                            }
                        }
                        for v in &mut var {
                            *v /= n as f64;
                        }
                        (mean, var)
                    }
                    StatsMode::Running => {
                        let st = &model.bn.layers[batch_stats.len().min(bn_traces.len())];
                        (st.running_mean.clone(), st.running_var.clone())
                    }
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = vec![0.0; n * features];
                let mut y = vec![0.0; n * features];
                for r in 0..n {
                    for j in 0..features {
                        let h = (x[r * features + j] - mean[j]) * inv_std[j];
                        xhat[r * features + j] = h;
                        y[r * features + j] = gamma[j] * h + beta[j];
                    }
                }
                if stats == StatsMode::Batch {
                    batch_stats.push(BnBatchStats { mean, var });
                }
                bn_traces.push(BnTrace { xhat, inv_std });
                y
            }
            LayerSpec::SoftmaxOutput { .. } => x.clone(),
        };
        acts.push(out);
    }

    if acts.last().unwrap().iter().any(|v| !v.is_finite()) {
        return Err(DuaError::NonFinite("logits".into()));
    }

    Ok(Trace { acts, bn: bn_traces, batch_stats, stats_mode: stats, n })
}

/// Reverse pass producing gradients for every parameter, given the gradient
/// of the objective with respect to the logits.
pub(crate) fn backward_params(model: &Model, trace: &Trace, d_logits: &[f64]) -> ParamVector {
    let layout = &model.layout;
    let by_layer = segments_by_layer(model);
    let params = model.params.values();
    let n = trace.n;
    let mut grads = vec![0.0; layout.param_count()];
    let mut d_cur = d_logits.to_vec();
    let mut bn_index = trace.bn.len();

    for (k, layer) in layout.layers.iter().enumerate().rev() {
        match *layer {
            LayerSpec::SoftmaxOutput { .. } => {}
            LayerSpec::ReLU => {
                let y = &trace.acts[k + 1];
                for (d, &yv) in d_cur.iter_mut().zip(y.iter()) {
                    if yv <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            LayerSpec::Dense { inputs, outputs } => {
                let x = &trace.acts[k];
                let w_seg = by_layer[k][0];
                let b_seg = by_layer[k][1];
                let w = &params[w_seg.offset..w_seg.offset + inputs * outputs];
                let mut d_x = vec![0.0; n * inputs];
                {
                    let (gw, gb_rest) = grads[w_seg.offset..].split_at_mut(inputs * outputs);
                    let gb = &mut gb_rest[..outputs];
                    for r in 0..n {
                        let dr = &d_cur[r * outputs..(r + 1) * outputs];
                        let xr = &x[r * inputs..(r + 1) * inputs];
                        for (o, &d) in dr.iter().enumerate() {
                            gb[o] += d;
                        }
                        for (i, &xi) in xr.iter().enumerate() {
                            let wrow = &w[i * outputs..(i + 1) * outputs];
                            let gwrow = &mut gw[i * outputs..(i + 1) * outputs];
                            let mut dxi = 0.0;
                            for (o, &d) in dr.iter().enumerate() {
                                gwrow[o] += d * xi;
                                dxi += d * wrow[o];
                            }
                            d_x[r * inputs + i] = dxi;
                        }
                    }
                }
                debug_assert_eq!(b_seg.len, outputs);
                d_cur = d_x;
            }
            LayerSpec::BatchNorm { features } => {
                bn_index -= 1;
                let bn = &trace.bn[bn_index];
                let g_seg = by_layer[k][0];
                let gamma = &params[g_seg.offset..g_seg.offset + features];
                let (d_gamma, d_beta, d_x) =
                    bn_backward(&d_cur, bn, gamma, n, features, trace.stats_mode);
                let (gg, gb_rest) = grads[g_seg.offset..].split_at_mut(features);
                for (g, d) in gg.iter_mut().zip(&d_gamma) {
                    *g += d;
                }
                for (g, d) in gb_rest[..features].iter_mut().zip(&d_beta) {
                    *g += d;
                }
                d_cur = d_x;
            }
        }
    }

    ParamVector::new(layout, grads).expect("gradient vector matches layout")
}

/// Reverse pass that materializes gradients only for batch-norm gamma/beta.
/// Returns one `(d_gamma, d_beta)` pair per BN layer, in layer order. No
/// dense-parameter gradient buffers are ever allocated, which is what keeps
/// the trainable-state footprint at `2 x total BN features`.
pub(crate) fn backward_bn_only(
    model: &Model,
    trace: &Trace,
    d_logits: &[f64],
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let layout = &model.layout;
    let by_layer = segments_by_layer(model);
    let params = model.params.values();
    let n = trace.n;
    let mut d_cur = d_logits.to_vec();
    let mut bn_index = trace.bn.len();
    let mut bn_grads: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); bn_index];

    for (k, layer) in layout.layers.iter().enumerate().rev() {
        match *layer {
            LayerSpec::SoftmaxOutput { .. } => {}
            LayerSpec::ReLU => {
                let y = &trace.acts[k + 1];
                for (d, &yv) in d_cur.iter_mut().zip(y.iter()) {
                    if yv <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            LayerSpec::Dense { inputs, outputs } => {
                let w_seg = by_layer[k][0];
                let w = &params[w_seg.offset..w_seg.offset + inputs * outputs];
                let mut d_x = vec![0.0; n * inputs];
                for r in 0..n {
                    let dr = &d_cur[r * outputs..(r + 1) * outputs];
                    for i in 0..inputs {
                        let wrow = &w[i * outputs..(i + 1) * outputs];
                        let mut dxi = 0.0;
                        for (o, &d) in dr.iter().enumerate() {
                            dxi += d * wrow[o];
                        }
                        d_x[r * inputs + i] = dxi;
                    }
                }
                d_cur = d_x;
            }
            LayerSpec::BatchNorm { features } => {
                bn_index -= 1;
                let bn = &trace.bn[bn_index];
                let g_seg = by_layer[k][0];
                let gamma = &params[g_seg.offset..g_seg.offset + features];
                let (d_gamma, d_beta, d_x) =
                    bn_backward(&d_cur, bn, gamma, n, features, trace.stats_mode);
                bn_grads[bn_index] = (d_gamma, d_beta);
                d_cur = d_x;
            }
        }
    }

    bn_grads
}

fn bn_backward(
    d_out: &[f64],
    bn: &BnTrace,
    gamma: &[f64],
    n: usize,
    features: usize,
    stats_mode: StatsMode,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut d_gamma = vec![0.0; features];
    let mut d_beta = vec![0.0; features];
    for r in 0..n {
        for j in 0..features {
            let d = d_out[r * features + j];
            d_gamma[j] += d * bn.xhat[r * features + j];
            d_beta[j] += d;
        }
    }
    let mut d_x = vec![0.0; n * features];
    match stats_mode {
        StatsMode::Running => {
            // Running statistics are constants; the map is a plain scaling.
            for r in 0..n {
                for j in 0..features {
                    d_x[r * features + j] = d_out[r * features + j] * gamma[j] * bn.inv_std[j];
                }
            }
        }
        StatsMode::Batch => {
            // Batch statistics depend on the inputs:
            // dx = inv_std * gamma * (d - mean(d) - xhat * mean(d*xhat))
            let nf = n as f64;
            for j in 0..features {
                let mean_d = d_beta[j] / nf;
                let mean_dx = d_gamma[j] / nf;
                let scale = gamma[j] * bn.inv_std[j];
                for r in 0..n {
                    let d = d_out[r * features + j];
                    let xh = bn.xhat[r * features + j];
                    d_x[r * features + j] = scale * (d - mean_d - xh * mean_dx);
                }
            }
        }
    }
    (d_gamma, d_beta, d_x)
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(row.iter()) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Mean softmax cross-entropy and its logit gradient.
fn ce_loss_dlogits(logits: &[f64], labels: &[u8], n: usize, classes: usize) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut d = vec![0.0; n * classes];
    let mut probs = vec![0.0; classes];
    for r in 0..n {
        let y = labels[r] as usize;
        if y >= classes {
            return Err(DuaError::LabelOutOfRange { label: labels[r], classes });
        }
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsumexp = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += logsumexp - row[y];
        softmax_row(row, &mut probs);
        for (j, &p) in probs.iter().enumerate() {
            d[r * classes + j] = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, d))
}

/// Softened distillation loss: `T^2 * mean KL(softmax(old/T) || softmax(new/T))`
/// and its gradient with respect to the new logits.
pub(crate) fn distill_loss_and_dlogits(
    new_logits: &[f64],
    old_logits: &[f64],
    n: usize,
    classes: usize,
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    if temperature <= 0.0 {
        return Err(DuaError::NonPositiveTemperature(temperature));
    }
    if new_logits.len() != old_logits.len() || new_logits.len() != n * classes {
        return Err(DuaError::ShapeMismatch("distillation logit matrices".into()));
    }
    let t = temperature;
    let mut value = 0.0;
    let mut d = vec![0.0; n * classes];
    let mut p_old = vec![0.0; classes];
    let mut p_new = vec![0.0; classes];
    let mut scaled_old = vec![0.0; classes];
    let mut scaled_new = vec![0.0; classes];
    for r in 0..n {
        for j in 0..classes {
            scaled_old[j] = old_logits[r * classes + j] / t;
            scaled_new[j] = new_logits[r * classes + j] / t;
        }
        softmax_row(&scaled_old, &mut p_old);
        softmax_row(&scaled_new, &mut p_new);
        for j in 0..classes {
            if p_old[j] > 0.0 {
                value += p_old[j] * (p_old[j].ln() - p_new[j].ln());
            }
            d[r * classes + j] = t / n as f64 * (p_new[j] - p_old[j]);
        }
    }
    Ok((t * t * value / n as f64, d))
}

/// Forward pass honoring the model's mode. Train mode normalizes with batch
/// statistics and folds them into the running statistics; Eval mode uses the
/// running statistics and leaves the model untouched.
pub fn forward(model: &mut Model, batch: &Batch) -> Result<Vec<f64>> {
    match model.mode {
        Mode::Train => {
            let trace = forward_trace(model, batch, StatsMode::Batch)?;
            model.bn.ema_update(&trace.batch_stats);
            Ok(trace.into_logits())
        }
        Mode::Eval => Ok(forward_trace(model, batch, StatsMode::Running)?.into_logits()),
    }
}

/// Inference forward pass (running statistics, no mutation).
pub fn forward_eval(model: &Model, batch: &Batch) -> Result<Vec<f64>> {
    Ok(forward_trace(model, batch, StatsMode::Running)?.into_logits())
}

fn stats_for_mode(mode: Mode) -> StatsMode {
    match mode {
        Mode::Train => StatsMode::Batch,
        Mode::Eval => StatsMode::Running,
    }
}

/// Mean cross-entropy plus optional penalty, with exact gradients for every
/// parameter. Pure: batch-norm running statistics are not updated.
pub fn loss_and_grad(
    model: &Model,
    batch: &Batch,
    labels: &[u8],
    penalty: Option<&PenaltyTerm>,
) -> Result<(f64, ParamVector)> {
    let (loss, grads, _) = loss_grad_traced(model, batch, labels, penalty)?;
    Ok((loss, grads))
}

/// As `loss_and_grad`, additionally returning the batch statistics of every
/// BN layer so a training loop can fold them into the running statistics.
pub(crate) fn loss_grad_traced(
    model: &Model,
    batch: &Batch,
    labels: &[u8],
    penalty: Option<&PenaltyTerm>,
) -> Result<(f64, ParamVector, Vec<BnBatchStats>)> {
    if labels.len() != batch.n {
        return Err(DuaError::ShapeMismatch(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch.n
        )));
    }
    let classes = model.layout.class_count();
    let trace = forward_trace(model, batch, stats_for_mode(model.mode))?;
    let (mut loss, mut d_logits) = ce_loss_dlogits(trace.logits(), labels, batch.n, classes)?;

    if let Some(p) = penalty {
        if let Some(teacher) = p.teacher() {
            let old_logits = forward_eval(teacher, batch)?;
            let (v, d) = distill_loss_and_dlogits(
                trace.logits(),
                &old_logits,
                batch.n,
                classes,
                p.temperature,
            )?;
            loss += p.strength * v;
            for (dst, src) in d_logits.iter_mut().zip(&d) {
                *dst += p.strength * src;
            }
        }
    }

    let mut grads = backward_params(model, &trace, &d_logits);

    if let Some(p) = penalty {
        if p.is_quadratic() {
            let (v, g) = p.quadratic_value_grad(&model.params)?;
            loss += v;
            for (dst, src) in grads.values_mut().iter_mut().zip(&g) {
                *dst += src;
            }
        }
    }

    Ok((loss, grads, trace.batch_stats))
}

/// Objective value only, for finite-difference oracles. Identical math to
/// `loss_and_grad`, no reverse pass, no side effects.
pub fn loss_value(
    model: &Model,
    batch: &Batch,
    labels: &[u8],
    penalty: Option<&PenaltyTerm>,
) -> Result<f64> {
    if labels.len() != batch.n {
        return Err(DuaError::ShapeMismatch(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch.n
        )));
    }
    let classes = model.layout.class_count();
    let trace = forward_trace(model, batch, stats_for_mode(model.mode))?;
    let (mut loss, _) = ce_loss_dlogits(trace.logits(), labels, batch.n, classes)?;
    if let Some(p) = penalty {
        if let Some(teacher) = p.teacher() {
            let old_logits = forward_eval(teacher, batch)?;
            let (v, _) = distill_loss_and_dlogits(
                trace.logits(),
                &old_logits,
                batch.n,
                classes,
                p.temperature,
            )?;
            loss += p.strength * v;
        }
        if p.is_quadratic() {
            let (v, _) = p.quadratic_value_grad(&model.params)?;
            loss += v;
        }
    }
    Ok(loss)
}

/// Gradient of `||F(x)||^2` (squared L2 norm of the logits) for a single
/// sample, with batch-norm in running-statistics mode.
pub(crate) fn sample_output_sqnorm_grad(model: &Model, sample: &[f64]) -> Result<ParamVector> {
    let batch = Batch::new(sample, sample.len())?;
    let trace = forward_trace(model, &batch, StatsMode::Running)?;
    let d_logits: Vec<f64> = trace.logits().iter().map(|z| 2.0 * z).collect();
    Ok(backward_params(model, &trace, &d_logits))
}

/// Cross-entropy gradient for a single labeled sample, running statistics.
pub(crate) fn sample_ce_grad(model: &Model, sample: &[f64], label: u8) -> Result<ParamVector> {
    let batch = Batch::new(sample, sample.len())?;
    let classes = model.layout.class_count();
    let trace = forward_trace(model, &batch, StatsMode::Running)?;
    let (_, d_logits) = ce_loss_dlogits(trace.logits(), &[label], 1, classes)?;
    Ok(backward_params(model, &trace, &d_logits))
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Classification accuracy of `model` on a labeled dataset, evaluated with
/// running statistics in bounded-size chunks.
pub fn accuracy(model: &Model, dataset: &TaskDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(DuaError::EmptyDataset(dataset.id().to_string()));
    }
    let labels = dataset.labels()?.to_vec();
    let pixels = dataset.pixels();
    let dim = dataset.dim();
    let classes = model.layout.class_count();
    let n = dataset.len();
    let mut correct = 0usize;
    const CHUNK: usize = 512;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let batch = Batch::new(&pixels[start * dim..end * dim], dim)?;
        let logits = forward_eval(model, &batch)?;
        for r in 0..(end - start) {
            if argmax(&logits[r * classes..(r + 1) * classes]) == labels[start + r] as usize {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BnState, ModelLayout};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model_from_values(layout: ModelLayout, values: Vec<f64>) -> Model {
        let params = ParamVector::new(&layout, values).unwrap();
        let bn = BnState::init(&layout);
        Model::from_parts(layout, params, bn, Mode::Train).unwrap()
    }

    #[test]
    fn identity_dense_forward() {
        let layout = ModelLayout::new(
            (1, 2),
            vec![
                LayerSpec::Dense { inputs: 2, outputs: 2 },
                LayerSpec::SoftmaxOutput { classes: 2 },
            ],
        )
        .unwrap();
        // weights row-major [in][out]: identity, biases 0
        let mut m = model_from_values(layout, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let input = [0.5, -0.5];
        let logits = forward(&mut m, &Batch::new(&input, 2).unwrap()).unwrap();
        assert_eq!(logits, vec![0.5, -0.5]);
    }

    #[test]
    fn bn_normalizes_batch_column() {
        let layout =
            ModelLayout::new((1, 1), vec![LayerSpec::BatchNorm { features: 1 }]).unwrap();
        let mut m = model_from_values(layout, vec![1.0, 0.0]); // gamma=1, beta=0
        let col = [1.0, 2.0, 3.0];
        let out = forward(&mut m, &Batch::new(&col, 1).unwrap()).unwrap();
        // mean 2, population variance 2/3
        let inv = 1.0 / (2.0 / 3.0 + BN_EPS).sqrt();
        for (o, x) in out.iter().zip(col.iter()) {
            assert!((o - (x - 2.0) * inv).abs() < 1e-12);
        }
        assert!((out[0] - (-1.2247)).abs() < 1e-3);
        assert!(out[1].abs() < 1e-12);
        assert!((out[2] - 1.2247).abs() < 1e-3);
    }

    #[test]
    fn bn_zero_gamma_outputs_beta() {
        let layout =
            ModelLayout::new((1, 1), vec![LayerSpec::BatchNorm { features: 1 }]).unwrap();
        let mut m = model_from_values(layout, vec![0.0, 0.7]);
        let out = forward(&mut m, &Batch::new(&[0.0, 0.3, 0.9], 1).unwrap()).unwrap();
        assert!(out.iter().all(|o| (o - 0.7).abs() < 1e-15));
    }

    #[test]
    fn bn_train_output_has_mean_beta_var_one() {
        let layout = ModelLayout::new((1, 3), vec![LayerSpec::BatchNorm { features: 3 }]).unwrap();
        let mut values = vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]; // gamma 1, beta 0
        values[3] = 0.25; // beta of feature 0
        let m = model_from_values(layout, values);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pixels: Vec<f64> = (0..30).map(|_| rng.gen::<f64>()).collect();
        let trace = forward_trace(&m, &Batch::new(&pixels, 3).unwrap(), StatsMode::Batch).unwrap();
        let out = trace.logits();
        let n = 10;
        for j in 0..3 {
            let beta = if j == 0 { 0.25 } else { 0.0 };
            let mean: f64 = (0..n).map(|r| out[r * 3 + j]).sum::<f64>() / n as f64;
            assert!((mean - beta).abs() < 1e-9, "mean {mean} vs beta {beta}");
            let var: f64 = (0..n).map(|r| (out[r * 3 + j] - mean).powi(2)).sum::<f64>() / n as f64;
            // gamma=1, beta arbitrary: variance within eps-related slack of 1
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn single_sample_train_bn_errors() {
        let layout = ModelLayout::new((1, 1), vec![LayerSpec::BatchNorm { features: 1 }]).unwrap();
        let mut m = model_from_values(layout, vec![1.0, 0.0]);
        let err = forward(&mut m, &Batch::new(&[0.5], 1).unwrap());
        assert!(matches!(err, Err(DuaError::SingleSampleBatchNorm)));
        m.set_mode(Mode::Eval);
        assert!(forward(&mut m, &Batch::new(&[0.5], 1).unwrap()).is_ok());
    }

    #[test]
    fn shape_mismatch_is_structured() {
        let layout = ModelLayout::mlp((1, 2), &[2], 2, false).unwrap();
        let mut m = Model::new(layout, 1).unwrap();
        let err = forward(&mut m, &Batch::new(&[0.1, 0.2, 0.3], 3).unwrap());
        assert!(matches!(err, Err(DuaError::ShapeMismatch(_))));
    }

    #[test]
    fn equal_logits_cross_entropy_is_ln2() {
        let layout = ModelLayout::new(
            (1, 1),
            vec![
                LayerSpec::Dense { inputs: 1, outputs: 2 },
                LayerSpec::SoftmaxOutput { classes: 2 },
            ],
        )
        .unwrap();
        let m = model_from_values(layout, vec![0.0, 0.0, 0.0, 0.0]);
        let (loss, _) = loss_and_grad(&m, &Batch::new(&[0.4], 1).unwrap(), &[0], None).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_structured() {
        let layout = ModelLayout::mlp((1, 2), &[2], 2, false).unwrap();
        let m = Model::new(layout, 1).unwrap();
        let err = loss_and_grad(&m, &Batch::new(&[0.1, 0.2], 2).unwrap(), &[5], None);
        assert!(matches!(err, Err(DuaError::LabelOutOfRange { label: 5, classes: 2 })));
    }

    fn max_rel_err_vs_fd(m: &Model, batch: &Batch, labels: &[u8], p: Option<&PenaltyTerm>) -> f64 {
        let (_, grads) = loss_and_grad(m, batch, labels, p).unwrap();
        let mut probe = m.clone();
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for k in 0..probe.params.len() {
            let orig = probe.params.values()[k];
            probe.params.values_mut()[k] = orig + eps;
            let up = loss_value(&probe, batch, labels, p).unwrap();
            probe.params.values_mut()[k] = orig - eps;
            let down = loss_value(&probe, batch, labels, p).unwrap();
            probe.params.values_mut()[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = grads.values()[k];
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences_plain_mlp() {
        let layout = ModelLayout::mlp((2, 2), &[5], 3, false).unwrap();
        let m = Model::new(layout, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pixels: Vec<f64> = (0..16).map(|_| rng.gen::<f64>()).collect();
        let batch = Batch::new(&pixels, 4).unwrap();
        let labels = [0u8, 2, 1, 0];
        assert!(max_rel_err_vs_fd(&m, &batch, &labels, None) < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_with_bn_batch_stats() {
        let layout = ModelLayout::mlp((2, 2), &[4], 2, true).unwrap();
        let mut m = Model::new(layout, 9).unwrap();
        m.set_mode(Mode::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pixels: Vec<f64> = (0..20).map(|_| rng.gen::<f64>()).collect();
        let batch = Batch::new(&pixels, 4).unwrap();
        let labels = [0u8, 1, 1, 0, 1];
        assert!(max_rel_err_vs_fd(&m, &batch, &labels, None) < 1e-4);
    }

    #[test]
    fn eval_mode_gradients_match_finite_differences() {
        let layout = ModelLayout::mlp((2, 2), &[4], 2, true).unwrap();
        let mut m = Model::new(layout, 11).unwrap();
        // Non-trivial running stats
        for s in &mut m.bn.layers {
            for (i, v) in s.running_mean.iter_mut().enumerate() {
                *v = 0.1 * i as f64;
            }
            for (i, v) in s.running_var.iter_mut().enumerate() {
                *v = 0.5 + 0.2 * i as f64;
            }
        }
        m.set_mode(Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pixels: Vec<f64> = (0..12).map(|_| rng.gen::<f64>()).collect();
        let batch = Batch::new(&pixels, 4).unwrap();
        let labels = [1u8, 0, 1];
        assert!(max_rel_err_vs_fd(&m, &batch, &labels, None) < 1e-4);
    }

    #[test]
    fn distill_gradient_matches_finite_differences() {
        let n = 3;
        let classes = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let new: Vec<f64> = (0..n * classes).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let old: Vec<f64> = (0..n * classes).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let t = 2.0;
        let (_, d) = distill_loss_and_dlogits(&new, &old, n, classes, t).unwrap();
        let eps = 1e-6;
        for k in 0..new.len() {
            let mut up = new.clone();
            up[k] += eps;
            let mut dn = new.clone();
            dn[k] -= eps;
            let (vu, _) = distill_loss_and_dlogits(&up, &old, n, classes, t).unwrap();
            let (vd, _) = distill_loss_and_dlogits(&dn, &old, n, classes, t).unwrap();
            let fd = (vu - vd) / (2.0 * eps);
            let rel = (d[k] - fd).abs() / (d[k].abs() + fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "k={k} analytic={} fd={fd}", d[k]);
        }
    }

    #[test]
    fn distill_identical_logits_is_zero() {
        let logits = [0.4, -0.2, 1.0, 0.1, 0.0, -1.0];
        let (v, _) = distill_loss_and_dlogits(&logits, &logits, 2, 3, 2.0).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let layout = ModelLayout::new((1, 1), vec![LayerSpec::BatchNorm { features: 1 }]).unwrap();
        let mut m = model_from_values(layout, vec![1.0, 0.0]);
        let before = m.bn.layers[0].running_mean[0];
        forward(&mut m, &Batch::new(&[1.0, 2.0, 3.0], 1).unwrap()).unwrap();
        let after = m.bn.layers[0].running_mean[0];
        // run = 0.9*0 + 0.1*2 = 0.2
        assert!((after - 0.2).abs() < 1e-12);
        assert_ne!(before, after);
        // variance: 0.9*1 + 0.1*(2/3)
        assert!((m.bn.layers[0].running_var[0] - (0.9 + 0.1 * 2.0 / 3.0)).abs() < 1e-12);
    }
}
