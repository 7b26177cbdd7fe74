//! Small sigmoid MLPs with manual forward and backward passes.
//!
//! Two head configurations cover both agents: independent per-action
//! Bernoulli heads (pool selection — the trunk is shared, the last layer
//! branches per action) and a single softmax head (answer fusion). Gradients
//! are exact analytic gradients of `scale * log_prob(action)`, so policy
//! updates reduce to accumulating [`PolicyGrad`]s and taking a gradient-ascent
//! step.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math;
use crate::{Error, Result};

/// Probability clamp keeping Bernoulli log-probs finite.
pub const PROB_CLAMP: f64 = 1e-6;

/// Head configuration of a policy network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum HeadKind {
    /// One independent sigmoid output per action (simultaneous binary actions).
    BernoulliBranched,
    /// A single softmax over all choices.
    Categorical,
}

/// One fully connected layer, row-major `rows x cols` weights plus bias.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn init<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = 1.0 / math::sqrt(cols as f64);
        let weights = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        let bias = (0..rows).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { rows, cols, weights, bias }
    }

    fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, weights: vec![0.0; rows * cols], bias: vec![0.0; rows] }
    }

    /// `out = W x + b`
    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.bias[r];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }
}

/// Layered MLP parameters: sigmoid trunk plus one head layer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PolicyParams {
    pub kind: HeadKind,
    /// Hidden layers, applied in order with sigmoid activations.
    pub trunk: Vec<Layer>,
    /// Head layer; row `i` is the branch for action `i` (Bernoulli) or the
    /// logit row for choice `i` (categorical).
    pub head: Layer,
}

/// An action compatible with a policy head.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Action {
    /// Simultaneous binary decisions, one per Bernoulli head.
    Bits(Vec<bool>),
    /// A single categorical choice.
    Choice(usize),
}

/// Output distribution of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionDistribution {
    /// Per-action inclusion probabilities, clamped away from 0 and 1.
    Bernoulli(Vec<f64>),
    /// Probability simplex over the choices.
    Categorical(Vec<f64>),
}

impl ActionDistribution {
    pub fn probs(&self) -> &[f64] {
        match self {
            ActionDistribution::Bernoulli(p) | ActionDistribution::Categorical(p) => p,
        }
    }

    /// Log-probability of `action` under this distribution.
    pub fn log_prob(&self, action: &Action) -> Result<f64> {
        match (self, action) {
            (ActionDistribution::Bernoulli(p), Action::Bits(bits)) => {
                if bits.len() != p.len() {
                    return Err(Error::DimensionMismatch { expected: p.len(), got: bits.len() });
                }
                let mut lp = 0.0;
                for (pi, &b) in p.iter().zip(bits) {
                    lp += if b { math::ln(*pi) } else { math::ln(1.0 - *pi) };
                }
                Ok(lp)
            }
            (ActionDistribution::Categorical(p), Action::Choice(c)) => {
                if *c >= p.len() {
                    return Err(Error::ModelOutOfRange { index: *c, pool: p.len() });
                }
                Ok(math::ln(p[*c]))
            }
            _ => Err(Error::InvalidConfig("action shape does not match head kind".into())),
        }
    }

    /// Draw an action. Bernoulli heads sample each bit independently; the
    /// categorical head inverts the CDF on a single uniform draw.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Action {
        match self {
            ActionDistribution::Bernoulli(p) => {
                Action::Bits(p.iter().map(|&pi| rng.gen::<f64>() < pi).collect())
            }
            ActionDistribution::Categorical(p) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, &pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return Action::Choice(i);
                    }
                }
                Action::Choice(p.len() - 1)
            }
        }
    }

    /// Deterministic action: per-head threshold at 0.5 (Bernoulli) or argmax
    /// with lowest-index tie-breaking (categorical).
    pub fn greedy(&self) -> Action {
        match self {
            ActionDistribution::Bernoulli(p) => Action::Bits(p.iter().map(|&pi| pi > 0.5).collect()),
            ActionDistribution::Categorical(p) => Action::Choice(argmax(p)),
        }
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Cached activations from a forward pass, consumed by [`PolicyParams::backward_into`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// `inputs[0]` is the state, `inputs[l]` the post-sigmoid output of trunk
    /// layer `l-1`; the last entry feeds the head.
    inputs: Vec<Vec<f64>>,
    pub dist: ActionDistribution,
}

/// Gradient with the same shape as [`PolicyParams`].
#[derive(Debug, Clone)]
pub struct PolicyGrad {
    pub trunk: Vec<Layer>,
    pub head: Layer,
}

impl PolicyGrad {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self {
            trunk: params.trunk.iter().map(|l| Layer::zeros(l.rows, l.cols)).collect(),
            head: Layer::zeros(params.head.rows, params.head.cols),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in self.trunk.iter_mut().chain(core::iter::once(&mut self.head)) {
            layer.weights.iter_mut().for_each(|w| *w *= factor);
            layer.bias.iter_mut().for_each(|b| *b *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.trunk
            .iter()
            .chain(core::iter::once(&self.head))
            .all(|l| l.weights.iter().all(|w| w.is_finite()) && l.bias.iter().all(|b| b.is_finite()))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + math::exp(-x))
}

impl PolicyParams {
    /// Initialize with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights.
    ///
    /// `hidden` lists the trunk widths; `outputs` is the number of actions
    /// (Bernoulli) or choices (categorical).
    pub fn init<R: Rng>(
        kind: HeadKind,
        input_dim: usize,
        hidden: &[usize],
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || outputs == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for &width in hidden {
            trunk.push(Layer::init(width, fan_in, rng));
            fan_in = width;
        }
        let head = Layer::init(outputs, fan_in, rng);
        Ok(Self { kind, trunk, head })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.first().map_or(self.head.cols, |l| l.cols)
    }

    pub fn output_dim(&self) -> usize {
        self.head.rows
    }

    /// Forward pass: sigmoid trunk, then sigmoid-per-head or softmax output.
    /// Pure function of (parameters, state).
    pub fn forward(&self, state: &[f64]) -> Result<Forward> {
        if state.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: state.len() });
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "state" });
        }
        let mut inputs = Vec::with_capacity(self.trunk.len() + 1);
        inputs.push(state.to_vec());
        let mut buf = Vec::new();
        for layer in &self.trunk {
            layer.affine(inputs.last().expect("nonempty"), &mut buf);
            inputs.push(buf.iter().map(|&z| sigmoid(z)).collect());
        }
        self.head.affine(inputs.last().expect("nonempty"), &mut buf);
        let dist = match self.kind {
            HeadKind::BernoulliBranched => ActionDistribution::Bernoulli(
                buf.iter().map(|&z| sigmoid(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)).collect(),
            ),
            HeadKind::Categorical => ActionDistribution::Categorical(softmax(&buf)),
        };
        Ok(Forward { inputs, dist })
    }

    /// Accumulate the gradient of `scale * log_prob(action)` into `grad`.
    ///
    /// The shared trunk receives the summed gradient from every head branch;
    /// each Bernoulli head row only receives its own action's term.
    pub fn backward_into(
        &self,
        fwd: &Forward,
        action: &Action,
        scale: f64,
        grad: &mut PolicyGrad,
    ) -> Result<()> {
        if !scale.is_finite() {
            return Err(Error::NonFinite { what: "gradient scale" });
        }
        // d log_prob / d head-logit
        let probs = fwd.dist.probs();
        let mut delta: Vec<f64> = match (&fwd.dist, action) {
            (ActionDistribution::Bernoulli(p), Action::Bits(bits)) => {
                if bits.len() != p.len() {
                    return Err(Error::DimensionMismatch { expected: p.len(), got: bits.len() });
                }
                bits.iter()
                    .zip(p)
                    .map(|(&b, &pi)| scale * (if b { 1.0 } else { 0.0 } - pi))
                    .collect()
            }
            (ActionDistribution::Categorical(p), Action::Choice(c)) => {
                if *c >= p.len() {
                    return Err(Error::ModelOutOfRange { index: *c, pool: p.len() });
                }
                p.iter()
                    .enumerate()
                    .map(|(i, &pi)| scale * (if i == *c { 1.0 } else { 0.0 } - pi))
                    .collect()
            }
            _ => return Err(Error::InvalidConfig("action shape does not match head kind".into())),
        };
        debug_assert_eq!(probs.len(), delta.len());

        let head_input = fwd.inputs.last().expect("forward caches at least the state");
        accumulate_layer(&mut grad.head, &delta, head_input);
        let mut upstream = backprop_input(&self.head, &delta);

        for (layer_idx, layer) in self.trunk.iter().enumerate().rev() {
            let activation = &fwd.inputs[layer_idx + 1];
            delta = upstream
                .iter()
                .zip(activation)
                .map(|(&d, &a)| d * a * (1.0 - a))
                .collect();
            accumulate_layer(&mut grad.trunk[layer_idx], &delta, &fwd.inputs[layer_idx]);
            if layer_idx > 0 {
                upstream = backprop_input(layer, &delta);
            }
        }
        Ok(())
    }

    /// Gradient-ascent step `params += lr * grad`.
    ///
    /// A non-finite gradient skips the step and returns `false` so one bad
    /// trajectory cannot poison the parameters.
    pub fn apply_update(&mut self, grad: &PolicyGrad, lr: f64) -> bool {
        if !grad.is_finite() || !lr.is_finite() {
            return false;
        }
        for (layer, g) in self.trunk.iter_mut().chain(core::iter::once(&mut self.head)).zip(
            grad.trunk.iter().chain(core::iter::once(&grad.head)),
        ) {
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w += lr * gw;
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b += lr * gb;
            }
        }
        true
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.trunk
            .iter()
            .chain(core::iter::once(&self.head))
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Read parameter `i` in (trunk layers then head, weights then bias) order.
    pub fn get_flat(&self, mut i: usize) -> Option<f64> {
        for layer in self.trunk.iter().chain(core::iter::once(&self.head)) {
            if i < layer.weights.len() {
                return Some(layer.weights[i]);
            }
            i -= layer.weights.len();
            if i < layer.bias.len() {
                return Some(layer.bias[i]);
            }
            i -= layer.bias.len();
        }
        None
    }

    /// Write parameter `i` in the same order as [`Self::get_flat`].
    pub fn set_flat(&mut self, mut i: usize, value: f64) -> bool {
        for layer in self.trunk.iter_mut().chain(core::iter::once(&mut self.head)) {
            if i < layer.weights.len() {
                layer.weights[i] = value;
                return true;
            }
            i -= layer.weights.len();
            if i < layer.bias.len() {
                layer.bias[i] = value;
                return true;
            }
            i -= layer.bias.len();
        }
        false
    }

    pub fn all_finite(&self) -> bool {
        self.trunk
            .iter()
            .chain(core::iter::once(&self.head))
            .all(|l| l.weights.iter().all(|w| w.is_finite()) && l.bias.iter().all(|b| b.is_finite()))
    }
}

fn accumulate_layer(grad: &mut Layer, delta: &[f64], input: &[f64]) {
    for (r, &d) in delta.iter().enumerate() {
        let row = &mut grad.weights[r * grad.cols..(r + 1) * grad.cols];
        for (w, &xi) in row.iter_mut().zip(input) {
            *w += d * xi;
        }
        grad.bias[r] += d;
    }
}

/// `W^T delta` without materializing the transpose.
fn backprop_input(layer: &Layer, delta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; layer.cols];
    for (r, &d) in delta.iter().enumerate() {
        let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += d * w;
        }
    }
    out
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| math::exp(z - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(kind: HeadKind, input: usize, hidden: &[usize], out: usize) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = PolicyParams::init(kind, input, hidden, out, &mut rng).unwrap();
        for i in 0..p.flat_len() {
            p.set_flat(i, 0.0);
        }
        p
    }

    #[test]
    fn zero_params_give_half_probabilities_and_uniform_softmax() {
        let p = zeroed(HeadKind::BernoulliBranched, 3, &[4], 3);
        let fwd = p.forward(&[0.3, -1.0, 2.0]).unwrap();
        for &pi in fwd.dist.probs() {
            assert_eq!(pi, 0.5);
        }

        let p = zeroed(HeadKind::Categorical, 2, &[4], 4);
        let fwd = p.forward(&[1.0, -1.0]).unwrap();
        for &pi in fwd.dist.probs() {
            assert!((pi - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn log_prob_matches_direct_substitution() {
        let d = ActionDistribution::Bernoulli(vec![0.5, 0.5]);
        let lp = d.log_prob(&Action::Bits(vec![true, false])).unwrap();
        assert!((lp - 0.25f64.ln()).abs() < 1e-12);

        let d = ActionDistribution::Categorical(vec![0.25; 4]);
        let lp = d.log_prob(&Action::Choice(2)).unwrap();
        assert!((lp - 0.25f64.ln()).abs() < 1e-12);

        let d = ActionDistribution::Bernoulli(vec![0.9, 0.1]);
        let lp = d.log_prob(&Action::Bits(vec![true, true])).unwrap();
        assert!((lp - (0.9f64.ln() + 0.1f64.ln())).abs() < 1e-12);
        assert!((lp - (-2.407945608651872)).abs() < 1e-9);
    }

    #[test]
    fn single_layer_bernoulli_gradient_closed_form() {
        // p = sigmoid(w . s), no trunk: d log p(a=1) / dw = (1 - p) s.
        // At w = 0, s = (1, 1): gradient (0.5, 0.5).
        let p = zeroed(HeadKind::BernoulliBranched, 2, &[], 1);
        let fwd = p.forward(&[1.0, 1.0]).unwrap();
        let mut grad = PolicyGrad::zeros_like(&p);
        p.backward_into(&fwd, &Action::Bits(vec![true]), 1.0, &mut grad).unwrap();
        assert_eq!(grad.head.weights, vec![0.5, 0.5]);
        assert_eq!(grad.head.bias, vec![0.5]);
    }

    #[test]
    fn zero_scale_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = PolicyParams::init(HeadKind::Categorical, 3, &[5], 4, &mut rng).unwrap();
        let fwd = p.forward(&[0.1, 0.2, 0.3]).unwrap();
        let mut grad = PolicyGrad::zeros_like(&p);
        p.backward_into(&fwd, &Action::Choice(1), 0.0, &mut grad).unwrap();
        for layer in grad.trunk.iter().chain(core::iter::once(&grad.head)) {
            assert!(layer.weights.iter().all(|&w| w == 0.0));
            assert!(layer.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn apply_update_direct_substitution() {
        let mut p = zeroed(HeadKind::BernoulliBranched, 1, &[], 1);
        let mut grad = PolicyGrad::zeros_like(&p);
        grad.head.weights[0] = 2.0;
        assert!(p.apply_update(&grad, 0.001));
        assert_eq!(p.head.weights[0], 0.002);

        // zero lr and zero gradient both leave parameters unchanged
        assert!(p.apply_update(&grad, 0.0));
        assert_eq!(p.head.weights[0], 0.002);
        let zero = PolicyGrad::zeros_like(&p);
        assert!(p.apply_update(&zero, 0.5));
        assert_eq!(p.head.weights[0], 0.002);
    }

    #[test]
    fn non_finite_gradient_skips_update() {
        let mut p = zeroed(HeadKind::BernoulliBranched, 1, &[], 1);
        let mut grad = PolicyGrad::zeros_like(&p);
        grad.head.weights[0] = f64::NAN;
        assert!(!p.apply_update(&grad, 0.001));
        assert_eq!(p.head.weights[0], 0.0);
    }

    #[test]
    fn forward_rejects_bad_states() {
        let p = zeroed(HeadKind::Categorical, 2, &[3], 2);
        assert!(matches!(p.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(p.forward(&[1.0, f64::NAN]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let pa = PolicyParams::init(HeadKind::Categorical, 4, &[8], 3, &mut a).unwrap();
        let pb = PolicyParams::init(HeadKind::Categorical, 4, &[8], 3, &mut b).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn bernoulli_outputs_stay_clamped() {
        let mut p = zeroed(HeadKind::BernoulliBranched, 1, &[], 1);
        p.head.weights[0] = 1000.0;
        let fwd = p.forward(&[1.0]).unwrap();
        assert_eq!(fwd.dist.probs()[0], 1.0 - PROB_CLAMP);
        assert!(fwd.dist.log_prob(&Action::Bits(vec![false])).unwrap().is_finite());
    }
}
