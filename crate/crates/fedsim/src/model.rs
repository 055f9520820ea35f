//! Multilayer perceptron with manual backpropagation.
//!
//! The network is fully described by [`MlpSpec`]; its parameters live in a
//! single flat [`ParamVector`] with a fixed layout: layers in order, each as
//! the weight matrix in row-major `(out_dim x in_dim)` order followed by the
//! bias vector. All strategy arithmetic (cosine losses, proximal terms,
//! control variates) operates on that flat vector.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::ParamVector;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Architecture of a dense ReLU network: input dim, hidden dims, class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    layer_dims: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "MlpSpec needs at least input and output dims".into(),
            ));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(
                "MlpSpec dims must be positive".into(),
            ));
        }
        Ok(Self { layer_dims })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// Total parameter count: sum of `in*out + out` over layers.
    pub fn param_len(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offset of layer `l`'s weight block in the flat vector.
    fn layer_offset(&self, l: usize) -> usize {
        self.layer_dims[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// A network spec plus its flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl ModelState {
    pub fn new(spec: MlpSpec, params: ParamVector) -> Result<Self> {
        if params.len() != spec.param_len() {
            return Err(Error::DimensionMismatch {
                op: "ModelState",
                left: params.len(),
                right: spec.param_len(),
            });
        }
        Ok(Self { spec, params })
    }
}

/// A gathered mini-batch.
///
/// Rows are unique samples in ascending original-index order; `counts[i]`
/// records how many times row `i` occurs in the batch. Loss and gradient are
/// weighted means over the multiset, so batch composition alone determines
/// the result: row order and duplicate placement cannot change it.
#[derive(Debug, Clone)]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    counts: Vec<f64>,
    dim: usize,
    total: f64,
}

impl Batch {
    /// Batch of distinct rows, each with multiplicity one.
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                op: "Batch",
                left: features.len(),
                right: labels.len() * dim,
            });
        }
        let n = labels.len();
        Ok(Self {
            features,
            labels,
            counts: vec![1.0; n],
            dim,
            total: n as f64,
        })
    }

    pub(crate) fn from_weighted(
        features: Vec<f64>,
        labels: Vec<usize>,
        counts: Vec<f64>,
        dim: usize,
    ) -> Self {
        let total = counts.iter().sum();
        Self {
            features,
            labels,
            counts,
            dim,
            total,
        }
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of samples counting multiplicity.
    pub fn size(&self) -> usize {
        self.total as usize
    }
}

/// He-style initialization: weights ~ N(0, 2/in_dim), biases zero.
/// Draw order is fixed (layer by layer, weights row-major, then biases),
/// so a seed fully determines the result.
pub fn init_params(spec: &MlpSpec, rng: &mut ChaCha12Rng) -> ModelState {
    let mut values = Vec::with_capacity(spec.param_len());
    for w in spec.layer_dims.windows(2) {
        let (in_dim, out_dim) = (w[0], w[1]);
        let scale = (2.0 / in_dim as f64).sqrt();
        for _ in 0..in_dim * out_dim {
            let z: f64 = rng.sample(StandardNormal);
            values.push(z * scale);
        }
        for _ in 0..out_dim {
            values.push(0.0);
        }
    }
    ModelState {
        spec: spec.clone(),
        params: ParamVector::from_raw(values),
    }
}

struct Forward {
    /// Pre-activations per layer, rows x width.
    zs: Vec<Vec<f64>>,
    /// Post-activations per layer (ReLU on hidden, identity on last).
    activations: Vec<Vec<f64>>,
}

fn forward(state: &ModelState, batch: &Batch) -> Result<Forward> {
    let spec = &state.spec;
    if batch.dim != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            op: "forward",
            left: batch.dim,
            right: spec.input_dim(),
        });
    }
    let p = state.params.values();
    let rows = batch.rows();
    let mut zs = Vec::with_capacity(spec.num_layers());
    let mut activations = Vec::with_capacity(spec.num_layers());
    let mut input: Vec<f64> = batch.features.clone();
    let mut in_dim = spec.input_dim();
    for (l, w) in spec.layer_dims.windows(2).enumerate() {
        let out_dim = w[1];
        let off = spec.layer_offset(l);
        let weights = &p[off..off + in_dim * out_dim];
        let biases = &p[off + in_dim * out_dim..off + in_dim * out_dim + out_dim];
        let mut z = vec![0.0; rows * out_dim];
        for r in 0..rows {
            let x = &input[r * in_dim..(r + 1) * in_dim];
            for j in 0..out_dim {
                let mut acc = biases[j];
                let wrow = &weights[j * in_dim..(j + 1) * in_dim];
                for i in 0..in_dim {
                    acc += wrow[i] * x[i];
                }
                if !acc.is_finite() {
                    return Err(Error::NonFinite { op: "forward" });
                }
                z[r * out_dim + j] = acc;
            }
        }
        let last = l == spec.num_layers() - 1;
        let a: Vec<f64> = if last {
            z.clone()
        } else {
            z.iter().map(|&v| v.max(0.0)).collect()
        };
        zs.push(z);
        activations.push(a.clone());
        input = a;
        in_dim = out_dim;
    }
    Ok(Forward { zs, activations })
}

/// Mean softmax cross-entropy over the batch and its exact gradient with
/// respect to the flat parameter vector.
pub fn loss_and_grad_sup(state: &ModelState, batch: &Batch) -> Result<(f64, ParamVector)> {
    let spec = &state.spec;
    let classes = spec.num_classes();
    let fwd = forward(state, batch)?;
    let logits = fwd.activations.last().unwrap();
    let rows = batch.rows();

    let mut loss_sum = 0.0;
    // dZ for the last layer, already scaled by count/total.
    let mut dz = vec![0.0; rows * classes];
    for r in 0..rows {
        let row = &logits[r * classes..(r + 1) * classes];
        let label = batch.labels[r];
        if label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum_exp = 0.0;
        for &v in row {
            sum_exp += (v - m).exp();
        }
        let lse = m + sum_exp.ln();
        loss_sum += batch.counts[r] * (lse - row[label]);
        let scale = batch.counts[r] / batch.total;
        for c in 0..classes {
            let softmax = (row[c] - lse).exp();
            dz[r * classes + c] = scale * (softmax - if c == label { 1.0 } else { 0.0 });
        }
    }
    let loss = loss_sum / batch.total;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss_and_grad_sup" });
    }

    // Backward pass, filling the flat gradient layer by layer.
    let p = state.params.values();
    let mut grad = vec![0.0; spec.param_len()];
    let mut dz_curr = dz;
    for l in (0..spec.num_layers()).rev() {
        let in_dim = spec.layer_dims[l];
        let out_dim = spec.layer_dims[l + 1];
        let off = spec.layer_offset(l);
        let prev_act: &[f64] = if l == 0 {
            &batch.features
        } else {
            &fwd.activations[l - 1]
        };
        {
            let (gw, gb) = grad[off..off + in_dim * out_dim + out_dim].split_at_mut(in_dim * out_dim);
            for r in 0..rows {
                let a = &prev_act[r * in_dim..(r + 1) * in_dim];
                let dzr = &dz_curr[r * out_dim..(r + 1) * out_dim];
                for j in 0..out_dim {
                    let d = dzr[j];
                    if d != 0.0 {
                        let grow = &mut gw[j * in_dim..(j + 1) * in_dim];
                        for i in 0..in_dim {
                            grow[i] += d * a[i];
                        }
                    }
                    gb[j] += d;
                }
            }
        }
        if l > 0 {
            let weights = &p[off..off + in_dim * out_dim];
            let z_prev = &fwd.zs[l - 1];
            let mut dz_prev = vec![0.0; rows * in_dim];
            for r in 0..rows {
                let dzr = &dz_curr[r * out_dim..(r + 1) * out_dim];
                let out = &mut dz_prev[r * in_dim..(r + 1) * in_dim];
                for j in 0..out_dim {
                    let d = dzr[j];
                    if d != 0.0 {
                        let wrow = &weights[j * in_dim..(j + 1) * in_dim];
                        for i in 0..in_dim {
                            out[i] += d * wrow[i];
                        }
                    }
                }
                // ReLU mask: derivative zero at and below the kink.
                for i in 0..in_dim {
                    if z_prev[r * in_dim + i] <= 0.0 {
                        out[i] = 0.0;
                    }
                }
            }
            dz_curr = dz_prev;
        }
    }
    Ok((loss, ParamVector::new(grad)?))
}

/// One momentum-SGD step: `v' = momentum*v + grad; w' = w - lr*v'`.
pub fn sgd_momentum_step(
    params: &ParamVector,
    grad: &ParamVector,
    velocity: &ParamVector,
    lr: f64,
    momentum: f64,
) -> Result<(ParamVector, ParamVector)> {
    if params.len() != grad.len() || params.len() != velocity.len() {
        return Err(Error::DimensionMismatch {
            op: "sgd_momentum_step",
            left: params.len(),
            right: grad.len().max(velocity.len()),
        });
    }
    if !lr.is_finite() || lr < 0.0 || !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!(
            "sgd_momentum_step: lr={lr}, momentum={momentum}"
        )));
    }
    let new_velocity = velocity.axpy(momentum, grad)?;
    let new_params = new_velocity.axpy(-lr, params)?;
    Ok((new_params, new_velocity))
}

/// Fraction of dataset samples whose argmax logit matches the label.
/// Ties break toward the lowest class index.
pub fn evaluate(state: &ModelState, dataset: &Dataset) -> Result<f64> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let classes = state.spec.num_classes();
    let mut correct = 0usize;
    // Chunked forward keeps peak memory flat on large eval sets.
    let chunk = 512;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idxs: Vec<usize> = (start..end).collect();
        let batch = dataset.gather(&idxs)?;
        let fwd = forward(state, &batch)?;
        let logits = fwd.activations.last().unwrap();
        for (r, idx) in (start..end).enumerate() {
            let row = &logits[r * classes..(r + 1) * classes];
            let mut best = 0usize;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == dataset.label(idx) {
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
    use crate::data;
    use crate::seeding::{stream_rng, Stream};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn random_batch(rng: &mut ChaCha12Rng, n: usize, dim: usize, classes: usize) -> Batch {
        let features: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        Batch::new(features, labels, dim).unwrap()
    }

    fn random_state(rng: &mut ChaCha12Rng, dims: &[usize]) -> ModelState {
        init_params(&MlpSpec::new(dims.to_vec()).unwrap(), rng)
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = MlpSpec::new(vec![4, 8, 3]).unwrap();
        let a = init_params(&spec, &mut stream_rng(9, Stream::Init));
        let b = init_params(&spec, &mut stream_rng(9, Stream::Init));
        assert_eq!(a.params, b.params);
        let c = init_params(&spec, &mut stream_rng(10, Stream::Init));
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn param_len_formula() {
        let spec = MlpSpec::new(vec![2, 3, 2]).unwrap();
        assert_eq!(spec.param_len(), (2 * 3 + 3) + (3 * 2 + 2));
        assert_eq!(spec.param_len(), 17);
        let state = init_params(&spec, &mut stream_rng(1, Stream::Init));
        assert_eq!(state.params.len(), 17);
    }

    #[test]
    fn fresh_biases_are_zero() {
        let spec = MlpSpec::new(vec![2, 3, 2]).unwrap();
        let state = init_params(&spec, &mut stream_rng(3, Stream::Init));
        let v = state.params.values();
        // Layer 0 biases at [6, 9), layer 1 biases at [15, 17).
        assert!(v[6..9].iter().all(|&x| x == 0.0));
        assert!(v[15..17].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        for classes in [2usize, 3, 7] {
            let spec = MlpSpec::new(vec![3, classes]).unwrap();
            let state = ModelState::new(spec.clone(), ParamVector::zeros(spec.param_len())).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(4);
            let batch = random_batch(&mut rng, 6, 3, classes);
            let (loss, _) = loss_and_grad_sup(&state, &batch).unwrap();
            assert_eq!(loss, (classes as f64).ln());
        }
    }

    #[test]
    fn duplicating_batch_keeps_loss_and_grad_identical() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let state = random_state(&mut rng, &[3, 5, 4]);
        let ds = data::generate_blobs(4, 8, 3, 5.0, &mut rng).unwrap();
        let idxs: Vec<usize> = vec![3, 9, 17, 25];
        let doubled: Vec<usize> = idxs.iter().chain(&idxs).cloned().collect();
        let (l1, g1) = loss_and_grad_sup(&state, &ds.gather(&idxs).unwrap()).unwrap();
        let (l2, g2) = loss_and_grad_sup(&state, &ds.gather(&doubled).unwrap()).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn batch_order_cannot_change_loss() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let state = random_state(&mut rng, &[2, 4, 3]);
        let ds = data::generate_blobs(3, 10, 2, 5.0, &mut rng).unwrap();
        let a: Vec<usize> = vec![1, 5, 9, 22, 14];
        let b: Vec<usize> = vec![14, 9, 22, 1, 5];
        let (l1, g1) = loss_and_grad_sup(&state, &ds.gather(&a).unwrap()).unwrap();
        let (l2, g2) = loss_and_grad_sup(&state, &ds.gather(&b).unwrap()).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn grad_matches_finite_differences() {
        // Central differences on a 2-16-3 net, 8 samples, eps = 1e-5.
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let state = random_state(&mut rng, &[2, 16, 3]);
        let batch = random_batch(&mut rng, 8, 2, 3);
        let (_, grad) = loss_and_grad_sup(&state, &batch).unwrap();
        let eps = 1e-5;
        let base = state.params.values().to_vec();
        let mut worst = 0.0f64;
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus[k] += eps;
            let sp = ModelState::new(state.spec.clone(), ParamVector::new(plus).unwrap()).unwrap();
            let (lp, _) = loss_and_grad_sup(&sp, &batch).unwrap();
            let mut minus = base.clone();
            minus[k] -= eps;
            let sm = ModelState::new(state.spec.clone(), ParamVector::new(minus).unwrap()).unwrap();
            let (lm, _) = loss_and_grad_sup(&sm, &batch).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let g = grad.values()[k];
            let err = if fd.abs() < 1e-8 {
                (g - fd).abs()
            } else {
                (g - fd).abs() / fd.abs()
            };
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "max rel err {worst}");
    }

    #[test]
    fn momentum_zero_is_plain_sgd() {
        let w = ParamVector::new(vec![1.0, -2.0]).unwrap();
        let g = ParamVector::new(vec![0.5, 0.25]).unwrap();
        let v = ParamVector::zeros(2);
        let (w2, _) = sgd_momentum_step(&w, &g, &v, 0.1, 0.0).unwrap();
        assert_eq!(w2.values(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    }

    #[test]
    fn zero_grad_zero_velocity_is_fixed_point() {
        let w = ParamVector::new(vec![3.0, 4.0]).unwrap();
        let z = ParamVector::zeros(2);
        let (w2, v2) = sgd_momentum_step(&w, &z, &z, 0.01, 0.9).unwrap();
        assert_eq!(w2, w);
        assert_eq!(v2, z);
    }

    #[test]
    fn two_momentum_steps_match_hand_recurrence() {
        // v1 = g, w1 = w0 - 0.01 g; v2 = 0.9 g + g = 1.9 g, w2 = w1 - 0.01 * 1.9 g.
        let w0 = ParamVector::new(vec![1.0, 2.0, 3.0]).unwrap();
        let g = ParamVector::new(vec![0.5, -1.0, 2.0]).unwrap();
        let v0 = ParamVector::zeros(3);
        let (w1, v1) = sgd_momentum_step(&w0, &g, &v0, 0.01, 0.9).unwrap();
        let (w2, _) = sgd_momentum_step(&w1, &g, &v1, 0.01, 0.9).unwrap();
        for k in 0..3 {
            let expected = w0.values()[k] - 0.01 * g.values()[k] - 0.01 * (1.9 * g.values()[k]);
            assert!((w2.values()[k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn evaluate_perfect_and_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let state = random_state(&mut rng, &[2, 4, 3]);
        let n = 50;
        let features: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
        // Labels equal to the model's own predictions -> accuracy 1.
        let mut labels = Vec::with_capacity(n);
        for r in 0..n {
            let batch = Batch::new(features[r * 2..(r + 1) * 2].to_vec(), vec![0], 2).unwrap();
            let fwd = forward(&state, &batch).unwrap();
            let logits = fwd.activations.last().unwrap();
            let mut best = 0;
            for c in 1..3 {
                if logits[c] > logits[best] {
                    best = c;
                }
            }
            labels.push(best);
        }
        let ds = Dataset::new(features.clone(), labels.clone(), 2, 3).unwrap();
        assert_eq!(evaluate(&state, &ds).unwrap(), 1.0);
        // Shift every label cyclically -> accuracy 0.
        let wrong: Vec<usize> = labels.iter().map(|&l| (l + 1) % 3).collect();
        let ds_wrong = Dataset::new(features, wrong, 2, 3).unwrap();
        assert_eq!(evaluate(&state, &ds_wrong).unwrap(), 0.0);
    }

    #[test]
    fn random_model_near_chance_on_label_independent_data() {
        // Labels are independent of features, so any fixed model predicts
        // correctly with probability 1/4; binomial concentration over n=4000.
        let mut rng = ChaCha12Rng::seed_from_u64(44);
        let state = random_state(&mut rng, &[5, 8, 4]);
        let n = 4000;
        let features: Vec<f64> = (0..n * 5)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let ds = Dataset::new(features, labels, 5, 4).unwrap();
        let acc = evaluate(&state, &ds).unwrap();
        assert!((0.18..=0.32).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn doubling_last_layer_keeps_argmax() {
        let mut rng = ChaCha12Rng::seed_from_u64(55);
        let state = random_state(&mut rng, &[3, 6, 4]);
        let spec = state.spec.clone();
        let mut scaled = state.params.values().to_vec();
        let last_off = spec.layer_offset(spec.num_layers() - 1);
        for v in &mut scaled[last_off..] {
            *v *= 2.0;
        }
        let doubled = ModelState::new(spec, ParamVector::new(scaled).unwrap()).unwrap();
        let ds = data::generate_blobs(4, 50, 3, 4.0, &mut rng).unwrap();
        for idx in 0..ds.len() {
            let batch = ds.gather(&[idx]).unwrap();
            let f1 = forward(&state, &batch).unwrap();
            let f2 = forward(&doubled, &batch).unwrap();
            let l1 = f1.activations.last().unwrap();
            let l2 = f2.activations.last().unwrap();
            let argmax = |row: &[f64]| {
                let mut b = 0;
                for c in 1..row.len() {
                    if row[c] > row[b] {
                        b = c;
                    }
                }
                b
            };
            assert_eq!(argmax(l1), argmax(l2));
        }
    }

    #[test]
    fn non_finite_activations_error() {
        let spec = MlpSpec::new(vec![1, 1, 2]).unwrap();
        let huge = ParamVector::new(vec![1e308, 1e308, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let state = ModelState::new(spec, huge).unwrap();
        let batch = Batch::new(vec![1e10], vec![0], 1).unwrap();
        assert!(matches!(
            loss_and_grad_sup(&state, &batch),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn spec_rejects_degenerate_dims() {
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2]).is_err());
    }
}
