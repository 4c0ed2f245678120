//! Minimal dense neural-network engine: flat `f64` parameters, exact
//! reverse-mode gradients, batch normalization, and an SGD training loop
//! with validation-driven annealing and early stopping.
//!
//! The layer zoo is fixed: `Dense`, `ReLU`, `BatchNorm`, and a trailing
//! `SoftmaxOutput` marker. Forward passes produce pre-softmax logits; the
//! softmax itself lives in the loss.

mod engine;
mod penalty;
mod train;

pub use engine::{accuracy, forward, forward_eval, loss_and_grad, loss_value};
pub(crate) use engine::{
    backward_bn_only, backward_params, distill_loss_and_dlogits, forward_trace, BnBatchStats,
    StatsMode, Trace,
};
pub use penalty::{PenaltyKind, PenaltyTerm};
pub use train::{train, EpochStats, TrainConfig, TrainHistory};

use serde::{Deserialize, Serialize};

use crate::error::{DuaError, Result};
use crate::util::fnv1a64_f64;

/// Numerical floor inside the batch-norm square root.
pub const BN_EPS: f64 = 1e-5;

/// Exponential-moving-average momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    ReLU,
    BatchNorm { features: usize },
    SoftmaxOutput { classes: usize },
}

/// Which slice of a flat parameter vector a layer owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegKind {
    DenseWeights,
    DenseBias,
    BnGamma,
    BnBeta,
}

impl SegKind {
    /// Weight-like vs bias-like, the split used by importance-correlation
    /// reporting. Scale parameters count as weights, shifts as biases.
    pub fn is_weight(self) -> bool {
        matches!(self, SegKind::DenseWeights | SegKind::BnGamma)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub layer: usize,
    pub kind: SegKind,
    pub offset: usize,
    pub len: usize,
}

/// Architecture description: ordered layers plus the input image shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub layers: Vec<LayerSpec>,
    pub input_shape: (usize, usize),
}

impl ModelLayout {
    pub fn new(input_shape: (usize, usize), layers: Vec<LayerSpec>) -> Result<Self> {
        let layout = Self { layers, input_shape };
        layout.validate()?;
        Ok(layout)
    }

    /// The standard MLP used throughout: `input -> hidden... -> classes`,
    /// ReLU between dense layers, optionally a BatchNorm before each ReLU.
    pub fn mlp(
        input_shape: (usize, usize),
        hidden: &[usize],
        classes: usize,
        batch_norm: bool,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut cur = input_shape.0 * input_shape.1;
        for &h in hidden {
            layers.push(LayerSpec::Dense { inputs: cur, outputs: h });
            if batch_norm {
                layers.push(LayerSpec::BatchNorm { features: h });
            }
            layers.push(LayerSpec::ReLU);
            cur = h;
        }
        layers.push(LayerSpec::Dense { inputs: cur, outputs: classes });
        layers.push(LayerSpec::SoftmaxOutput { classes });
        Self::new(input_shape, layers)
    }

    pub fn validate(&self) -> Result<()> {
        let mut cur = self.input_dim();
        if cur == 0 {
            return Err(DuaError::InvalidLayout("zero input size".into()));
        }
        if self.layers.is_empty() {
            return Err(DuaError::InvalidLayout("no layers".into()));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    if inputs != cur {
                        return Err(DuaError::InvalidLayout(format!(
                            "layer {k}: Dense expects {inputs} inputs, gets {cur}"
                        )));
                    }
                    if outputs == 0 {
                        return Err(DuaError::InvalidLayout(format!("layer {k}: zero outputs")));
                    }
                    cur = outputs;
                }
                LayerSpec::ReLU => {}
                LayerSpec::BatchNorm { features } => {
                    if features != cur {
                        return Err(DuaError::InvalidLayout(format!(
                            "layer {k}: BatchNorm expects {features} features, gets {cur}"
                        )));
                    }
                }
                LayerSpec::SoftmaxOutput { classes } => {
                    if classes != cur {
                        return Err(DuaError::InvalidLayout(format!(
                            "layer {k}: SoftmaxOutput expects {classes} logits, gets {cur}"
                        )));
                    }
                    if k != self.layers.len() - 1 {
                        return Err(DuaError::InvalidLayout(
                            "SoftmaxOutput must be the last layer".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.0 * self.input_shape.1
    }

    /// Width of the logit vector the network produces.
    pub fn class_count(&self) -> usize {
        let mut cur = self.input_dim();
        for layer in &self.layers {
            match *layer {
                LayerSpec::Dense { outputs, .. } => cur = outputs,
                LayerSpec::SoftmaxOutput { classes } => cur = classes,
                _ => {}
            }
        }
        cur
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
                LayerSpec::BatchNorm { features } => 2 * features,
                _ => 0,
            })
            .sum()
    }

    /// Flat-vector segmentation, in layer order. Dense layers own weights
    /// then bias; BatchNorm layers own gamma then beta.
    pub fn segments(&self) -> Vec<Segment> {
        let mut segs = Vec::new();
        let mut offset = 0;
        for (k, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    segs.push(Segment {
                        layer: k,
                        kind: SegKind::DenseWeights,
                        offset,
                        len: inputs * outputs,
                    });
                    offset += inputs * outputs;
                    segs.push(Segment { layer: k, kind: SegKind::DenseBias, offset, len: outputs });
                    offset += outputs;
                }
                LayerSpec::BatchNorm { features } => {
                    segs.push(Segment { layer: k, kind: SegKind::BnGamma, offset, len: features });
                    offset += features;
                    segs.push(Segment { layer: k, kind: SegKind::BnBeta, offset, len: features });
                    offset += features;
                }
                _ => {}
            }
        }
        segs
    }

    /// Indices of BatchNorm layers, in order.
    pub fn bn_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::BatchNorm { .. }))
            .map(|(k, _)| k)
            .collect()
    }

    pub fn has_batch_norm(&self) -> bool {
        !self.bn_layers().is_empty()
    }

    /// Stable identity used to pair parameter vectors with their layout.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(self.input_shape.0 as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.input_shape.1 as u32).to_le_bytes());
        for layer in &self.layers {
            match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    bytes.push(1);
                    bytes.extend_from_slice(&(inputs as u32).to_le_bytes());
                    bytes.extend_from_slice(&(outputs as u32).to_le_bytes());
                }
                LayerSpec::ReLU => bytes.push(2),
                LayerSpec::BatchNorm { features } => {
                    bytes.push(3);
                    bytes.extend_from_slice(&(features as u32).to_le_bytes());
                }
                LayerSpec::SoftmaxOutput { classes } => {
                    bytes.push(4);
                    bytes.extend_from_slice(&(classes as u32).to_le_bytes());
                }
            }
        }
        crate::util::fnv1a64(&bytes)
    }
}

/// Flat parameter storage tied to a layout by fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout_id: u64,
}

impl ParamVector {
    pub fn new(layout: &ModelLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.param_count() {
            return Err(DuaError::ShapeMismatch(format!(
                "{} parameter values for a layout of {}",
                values.len(),
                layout.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DuaError::NonFinite("parameter vector".into()));
        }
        Ok(Self { values, layout_id: layout.fingerprint() })
    }

    pub fn zeros(layout: &ModelLayout) -> Self {
        Self { values: vec![0.0; layout.param_count()], layout_id: layout.fingerprint() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout_id(&self) -> u64 {
        self.layout_id
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn matches_layout(&self, layout: &ModelLayout) -> bool {
        self.layout_id == layout.fingerprint() && self.values.len() == layout.param_count()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(DuaError::NonFinite("parameter vector".into()));
        }
        Ok(())
    }

    /// Exact bit-pattern fingerprint, used for provenance chains.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64_f64(&self.values)
    }

    /// `self += c * other`, elementwise.
    pub fn add_scaled(&mut self, other: &ParamVector, c: f64) -> Result<()> {
        if other.values.len() != self.values.len() || other.layout_id != self.layout_id {
            return Err(DuaError::LayoutMismatch("add_scaled operands".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }
}

/// Running statistics for one BatchNorm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnLayerStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Running statistics for every BatchNorm layer, in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub layers: Vec<BnLayerStats>,
    pub momentum: f64,
}

impl BnState {
    /// Fresh state: mean 0, variance 1 per feature.
    pub fn init(layout: &ModelLayout) -> Self {
        let layers = layout
            .layers
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::BatchNorm { features } => Some(BnLayerStats {
                    running_mean: vec![0.0; features],
                    running_var: vec![1.0; features],
                }),
                _ => None,
            })
            .collect();
        Self { layers, momentum: BN_MOMENTUM }
    }

    pub fn check(&self, layout: &ModelLayout) -> Result<()> {
        let bn = layout.bn_layers();
        if bn.len() != self.layers.len() {
            return Err(DuaError::ShapeMismatch(format!(
                "{} BN stats for {} BN layers",
                self.layers.len(),
                bn.len()
            )));
        }
        for (stats, &k) in self.layers.iter().zip(&bn) {
            let LayerSpec::BatchNorm { features } = layout.layers[k] else { unreachable!() };
            if stats.running_mean.len() != features || stats.running_var.len() != features {
                return Err(DuaError::ShapeMismatch(format!("BN stats size at layer {k}")));
            }
            if stats.running_var.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(DuaError::NonFinite("negative or non-finite running variance".into()));
            }
        }
        Ok(())
    }

    /// EMA update from a batch's statistics: `run = (1-m)*run + m*batch`.
    pub(crate) fn ema_update(&mut self, batch_stats: &[BnBatchStats]) {
        for (layer, stats) in self.layers.iter_mut().zip(batch_stats) {
            let m = self.momentum;
            for (r, b) in layer.running_mean.iter_mut().zip(&stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in layer.running_var.iter_mut().zip(&stats.var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// A network: layout, parameters, batch-norm state, and forward mode.
///
/// Train-mode forwards normalize with current-batch statistics and update
/// the running statistics; Eval-mode forwards use the running statistics
/// and never mutate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub layout: ModelLayout,
    pub params: ParamVector,
    pub bn: BnState,
    pub mode: Mode,
}

impl Model {
    /// Seeded He-uniform initialization: dense weights uniform in
    /// `[-sqrt(6/fan_in), +sqrt(6/fan_in)]`, biases 0, gamma 1, beta 0.
    pub fn new(layout: ModelLayout, seed: u64) -> Result<Self> {
        use rand::distributions::{Distribution, Uniform};
        use rand::SeedableRng;

        layout.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.param_count()];
        for seg in layout.segments() {
            match seg.kind {
                SegKind::DenseWeights => {
                    let LayerSpec::Dense { inputs, .. } = layout.layers[seg.layer] else {
                        unreachable!()
                    };
                    let limit = (6.0 / inputs as f64).sqrt();
                    let dist = Uniform::new(-limit, limit);
                    for v in &mut values[seg.offset..seg.offset + seg.len] {
                        *v = dist.sample(&mut rng);
                    }
                }
                SegKind::DenseBias | SegKind::BnBeta => {}
                SegKind::BnGamma => {
                    for v in &mut values[seg.offset..seg.offset + seg.len] {
                        *v = 1.0;
                    }
                }
            }
        }
        let params = ParamVector::new(&layout, values)?;
        let bn = BnState::init(&layout);
        Ok(Self { layout, params, bn, mode: Mode::Train })
    }

    pub fn from_parts(
        layout: ModelLayout,
        params: ParamVector,
        bn: BnState,
        mode: Mode,
    ) -> Result<Self> {
        layout.validate()?;
        if !params.matches_layout(&layout) {
            return Err(DuaError::LayoutMismatch("params do not match layout".into()));
        }
        bn.check(&layout)?;
        Ok(Self { layout, params, bn, mode })
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }
}

/// A borrowed batch of flattened images, `n` rows of `dim` pixels.
#[derive(Clone, Copy)]
pub struct Batch<'a> {
    pub pixels: &'a [f64],
    pub n: usize,
    pub dim: usize,
}

impl<'a> Batch<'a> {
    pub fn new(pixels: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || pixels.len() % dim != 0 {
            return Err(DuaError::ShapeMismatch(format!(
                "{} pixels do not divide into rows of {dim}",
                pixels.len()
            )));
        }
        Ok(Self { pixels, n: pixels.len() / dim, dim })
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.pixels[i * self.dim..(i + 1) * self.dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout_2x2() -> ModelLayout {
        ModelLayout::new(
            (1, 2),
            vec![
                LayerSpec::Dense { inputs: 2, outputs: 2 },
                LayerSpec::SoftmaxOutput { classes: 2 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn param_count_is_layout_function() {
        let l = ModelLayout::mlp((28, 28), &[100, 100], 10, false).unwrap();
        assert_eq!(l.param_count(), 784 * 100 + 100 + 100 * 100 + 100 + 100 * 10 + 10);
        let lbn = ModelLayout::mlp((28, 28), &[100, 100], 10, true).unwrap();
        assert_eq!(lbn.param_count(), l.param_count() + 2 * 100 + 2 * 100);
    }

    #[test]
    fn layout_rejects_dim_mismatch() {
        let bad = ModelLayout::new(
            (1, 2),
            vec![
                LayerSpec::Dense { inputs: 3, outputs: 2 },
                LayerSpec::SoftmaxOutput { classes: 2 },
            ],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn layout_rejects_inner_softmax() {
        let bad = ModelLayout::new(
            (1, 2),
            vec![
                LayerSpec::Dense { inputs: 2, outputs: 2 },
                LayerSpec::SoftmaxOutput { classes: 2 },
                LayerSpec::ReLU,
            ],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn segments_tile_the_vector_exactly() {
        let l = ModelLayout::mlp((2, 3), &[4], 3, true).unwrap();
        let segs = l.segments();
        let mut covered = vec![false; l.param_count()];
        for s in &segs {
            for c in &mut covered[s.offset..s.offset + s.len] {
                assert!(!*c, "overlapping segments");
                *c = true;
            }
        }
        assert!(covered.iter().all(|c| *c));
    }

    #[test]
    fn param_vector_rejects_nan_and_bad_len() {
        let l = layout_2x2();
        assert!(ParamVector::new(&l, vec![0.0; 5]).is_err());
        assert!(ParamVector::new(&l, vec![f64::NAN; 6]).is_err());
        assert!(ParamVector::new(&l, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let l = ModelLayout::mlp((2, 2), &[3], 2, true).unwrap();
        let a = Model::new(l.clone(), 42).unwrap();
        let b = Model::new(l, 42).unwrap();
        assert_eq!(a.params.values(), b.params.values());
    }

    #[test]
    fn bn_init_is_identity_scale() {
        let l = ModelLayout::mlp((1, 2), &[2], 2, true).unwrap();
        let m = Model::new(l, 0).unwrap();
        let segs = m.layout.segments();
        let gamma = segs.iter().find(|s| matches!(s.kind, SegKind::BnGamma)).unwrap();
        assert!(m.params.values()[gamma.offset..gamma.offset + gamma.len]
            .iter()
            .all(|v| *v == 1.0));
        assert_eq!(m.bn.layers[0].running_var, vec![1.0, 1.0]);
    }
}
