//! The frozen layer stack and manual gradients for adapter training.
//!
//! The model is a chain of linear layers with tanh between them and a
//! linear last layer: `h_{l+1} = tanh(W_l h_l)`, `output = W_L h_L`. The
//! loss is the mean squared error over the batch, summed over output
//! coordinates. Gradients are reverse-mode by hand; they are checked
//! against central finite differences in the tests and in the acceptance
//! suite, so any change here must keep that match.

use crate::adapter::AdapterPair;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Immutable base weights `W0` for every layer. Layer `l` maps its input of
/// length `cols(l)` to `rows(l)`; consecutive layers must chain.
#[derive(Debug, Clone)]
pub struct FrozenStack {
    layers: Vec<Matrix>,
}

impl FrozenStack {
    pub fn new(layers: Vec<Matrix>) -> Result<FrozenStack> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("stack needs at least one layer".into()));
        }
        for l in 1..layers.len() {
            if layers[l].cols() != layers[l - 1].rows() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {l} expects inputs of length {}, layer {} outputs {}",
                    layers[l].cols(),
                    l - 1,
                    layers[l - 1].rows()
                )));
            }
        }
        Ok(FrozenStack { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows()
    }

    /// Plain forward pass through the frozen weights.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        forward_vec(&self.layers, x)
    }
}

/// Forward pass through arbitrary effective weights, single input.
pub fn forward_vec(weights: &[Matrix], x: &[f64]) -> Result<Vec<f64>> {
    let mut h = x.to_vec();
    for (l, w) in weights.iter().enumerate() {
        let mut z = w.matvec(&h)?;
        if l + 1 < weights.len() {
            for v in &mut z {
                *v = v.tanh();
            }
        }
        h = z;
    }
    Ok(h)
}

/// A training batch: `inputs` is `n x input_dim`, `targets` is
/// `n x output_dim`, one sample per row.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Batch> {
        if inputs.rows() == 0 {
            return Err(Error::InvalidArgument("batch must hold at least one sample".into()));
        }
        if inputs.rows() != targets.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs vs {} targets",
                inputs.rows(),
                targets.rows()
            )));
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Batch loss under effective weights:
/// `F = (1/n) sum_s |stack(x_s) - y_s|^2`.
pub fn tanh_stack_loss(weights: &[Matrix], batch: &Batch) -> Result<f64> {
    let (hidden, output) = forward_batch(weights, &batch.inputs)?;
    drop(hidden);
    mse(&output, &batch.targets)
}

/// Batch loss and the gradient of the loss with respect to every layer's
/// effective weight matrix, via reverse-mode accumulation.
pub fn tanh_stack_gradients(weights: &[Matrix], batch: &Batch) -> Result<(f64, Vec<Matrix>)> {
    let n = batch.len() as f64;
    let (hidden, output) = forward_batch(weights, &batch.inputs)?;
    let loss = mse(&output, &batch.targets)?;

    // delta = dF/dZ for the current layer, starting at the output.
    let mut delta = output.sub(&batch.targets)?.scaled(2.0 / n);
    let mut grads = vec![Matrix::zeros(0, 0); weights.len()];
    for l in (0..weights.len()).rev() {
        // hidden[l] is the input to layer l; dW_l = delta^T hidden[l].
        grads[l] = delta.transpose().matmul(&hidden[l])?;
        if l > 0 {
            // Back through the linearity, then through tanh at hidden[l].
            let back = delta.matmul(&weights[l])?;
            delta = back.hadamard(&hidden[l].map(|h| 1.0 - h * h))?;
        }
    }
    Ok((loss, grads))
}

/// Result of one local update step.
#[derive(Debug, Clone)]
pub struct UpdateStats {
    /// Batch loss before the step.
    pub loss: f64,
    /// Per layer, `|(dF/dB . M) A_eff|_F` for the masked gradient actually
    /// applied; feeds the aggregation-gap bound's gradient envelope.
    pub grad_projection_norms: Vec<f64>,
}

/// One masked gradient step on every layer's expansion.
///
/// The effective weight of layer `l` is `W0_l + (B_l . M_l) A_l,eff` where
/// `A_eff` is the refined projection once refinement has run. Projections
/// are never touched; the gradient is taken with respect to `B` only and
/// gated through the mask before the step, so mask closure is preserved
/// exactly.
pub fn local_update(
    adapters: &mut [AdapterPair],
    base: &FrozenStack,
    batch: &Batch,
    lr: f64,
) -> Result<UpdateStats> {
    if adapters.len() != base.depth() {
        return Err(Error::DimensionMismatch(format!(
            "{} adapters for a stack of depth {}",
            adapters.len(),
            base.depth()
        )));
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }

    let mut effective = Vec::with_capacity(adapters.len());
    for (l, pair) in adapters.iter().enumerate() {
        let w0 = base.layer(l);
        if pair.output_dim() != w0.rows() || pair.input_dim() != w0.cols() {
            return Err(Error::DimensionMismatch(format!(
                "adapter {l} is {}x{}, layer is {}x{}",
                pair.output_dim(),
                pair.input_dim(),
                w0.rows(),
                w0.cols()
            )));
        }
        effective.push(w0.add(&pair.composed())?);
    }

    let (loss, grads) = tanh_stack_gradients(&effective, batch)?;

    let mut grad_projection_norms = Vec::with_capacity(adapters.len());
    for (pair, dw) in adapters.iter_mut().zip(&grads) {
        // dF/dB = dF/dW * A_eff^T, then gated by the mask.
        let mut db = dw.matmul(&pair.effective_projection().transpose())?;
        let r = pair.rank();
        for row in 0..db.rows() {
            for col in 0..r {
                if !pair.mask_at(row, col) {
                    db.set(row, col, 0.0);
                }
            }
        }
        grad_projection_norms.push(db.matmul(pair.effective_projection())?.frobenius_norm());
        pair.step_expansion(&db, lr)?;
    }

    Ok(UpdateStats { loss, grad_projection_norms })
}

/// Forward pass keeping every layer input: returns (`hidden`, `output`)
/// where `hidden[l]` is the batch input to layer `l` and `output` is the
/// final linear response.
pub(crate) fn forward_batch(weights: &[Matrix], inputs: &Matrix) -> Result<(Vec<Matrix>, Matrix)> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("empty weight stack".into()));
    }
    let mut hidden = Vec::with_capacity(weights.len());
    let mut h = inputs.clone();
    for (l, w) in weights.iter().enumerate() {
        hidden.push(h.clone());
        let z = h.matmul(&w.transpose())?;
        h = if l + 1 < weights.len() { z.map(f64::tanh) } else { z };
    }
    Ok((hidden, h))
}

fn mse(output: &Matrix, targets: &Matrix) -> Result<f64> {
    let diff = output.sub(targets)?;
    let n = output.rows() as f64;
    Ok(diff.data().iter().map(|x| x * x).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::MaskSelect;
    use crate::linalg::gaussian_matrix;
    use crate::rng::Rng;

    fn toy_batch(n: usize, k: usize, d: usize, seed: u64) -> Batch {
        Batch::new(gaussian_matrix(n, k, seed), gaussian_matrix(n, d, seed ^ 0xff)).unwrap()
    }

    /// Central finite difference of the loss with respect to one B entry.
    fn fd_expansion_grad(
        adapters: &[AdapterPair],
        base: &FrozenStack,
        batch: &Batch,
        layer: usize,
        row: usize,
        col: usize,
        step: f64,
    ) -> f64 {
        let eval = |shift: f64| {
            let mut shifted: Vec<AdapterPair> = adapters.to_vec();
            let mut b = shifted[layer].expansion().clone();
            b.set(row, col, b.at(row, col) + shift);
            shifted[layer].replace_expansion(&b).unwrap();
            let weights: Vec<Matrix> = shifted
                .iter()
                .enumerate()
                .map(|(l, p)| base.layer(l).add(&p.composed()).unwrap())
                .collect();
            tanh_stack_loss(&weights, batch).unwrap()
        };
        (eval(step) - eval(-step)) / (2.0 * step)
    }

    fn analytic_expansion_grads(
        adapters: &[AdapterPair],
        base: &FrozenStack,
        batch: &Batch,
    ) -> Vec<Matrix> {
        let weights: Vec<Matrix> = adapters
            .iter()
            .enumerate()
            .map(|(l, p)| base.layer(l).add(&p.composed()).unwrap())
            .collect();
        let (_, grads) = tanh_stack_gradients(&weights, batch).unwrap();
        adapters
            .iter()
            .zip(&grads)
            .map(|(p, dw)| dw.matmul(&p.effective_projection().transpose()).unwrap())
            .collect()
    }

    #[test]
    fn single_layer_gradient_matches_finite_differences() {
        // Hand-sized case: one 2x2 layer, rank 1.
        let base =
            FrozenStack::new(vec![Matrix::from_rows(&[vec![0.3, -0.2], vec![0.1, 0.4]]).unwrap()])
                .unwrap();
        let mut adapters = vec![AdapterPair::init(0, 2, 2, 1, 5).unwrap()];
        adapters[0]
            .replace_expansion(&Matrix::from_rows(&[vec![0.2], vec![-0.1]]).unwrap())
            .unwrap();
        let batch = Batch::new(
            Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.3, 0.8]]).unwrap(),
            Matrix::from_rows(&[vec![0.2, -0.1], vec![0.4, 0.0]]).unwrap(),
        )
        .unwrap();
        let analytic = analytic_expansion_grads(&adapters, &base, &batch);
        for row in 0..2 {
            let fd = fd_expansion_grad(&adapters, &base, &batch, 0, row, 0, 1e-6);
            let a = analytic[0].at(row, 0);
            assert!((a - fd).abs() <= 1e-7 * fd.abs().max(1.0), "row {row}: {a} vs {fd}");
        }
    }

    #[test]
    fn deep_stack_gradient_matches_finite_differences() {
        let dims = [(6, 5), (4, 6), (3, 4)];
        let base = FrozenStack::new(
            dims.iter()
                .enumerate()
                .map(|(l, &(d, k))| gaussian_matrix(d, k, 100 + l as u64).scaled(0.4))
                .collect(),
        )
        .unwrap();
        let mut adapters: Vec<AdapterPair> = dims
            .iter()
            .enumerate()
            .map(|(l, &(d, k))| AdapterPair::init(l, d, k, 2, 50 + l as u64).unwrap())
            .collect();
        let mut rng = Rng::new(77);
        for (l, &(d, _)) in dims.iter().enumerate() {
            let mut b = Matrix::zeros(d, 2);
            for v in b.data_mut() {
                *v = 0.3 * rng.normal();
            }
            adapters[l].replace_expansion(&b).unwrap();
        }
        let batch = toy_batch(6, 5, 3, 9);
        let analytic = analytic_expansion_grads(&adapters, &base, &batch);
        for (l, &(d, _)) in dims.iter().enumerate() {
            for row in 0..d {
                for col in 0..2 {
                    let fd = fd_expansion_grad(&adapters, &base, &batch, l, row, col, 1e-5);
                    let a = analytic[l].at(row, col);
                    assert!(
                        (a - fd).abs() <= 1e-6 * fd.abs().max(1e-3),
                        "layer {l} ({row},{col}): analytic {a}, fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn update_reduces_loss_on_a_fixed_batch() {
        // Targets come from the base weights plus a rank-1 perturbation, so
        // a rank-2 adapter can close most of the gap.
        let w0 = gaussian_matrix(4, 4, 3).scaled(0.3);
        let delta = gaussian_matrix(4, 1, 4).matmul(&gaussian_matrix(1, 4, 5)).unwrap().scaled(0.3);
        let inputs = gaussian_matrix(16, 4, 21);
        let targets = inputs.matmul(&w0.add(&delta).unwrap().transpose()).unwrap();
        let base = FrozenStack::new(vec![w0]).unwrap();
        let mut adapters = vec![AdapterPair::init(0, 4, 4, 2, 8).unwrap()];
        let batch = Batch::new(inputs, targets).unwrap();
        let first = local_update(&mut adapters, &base, &batch, 0.05).unwrap().loss;
        let mut last = first;
        for _ in 0..120 {
            last = local_update(&mut adapters, &base, &batch, 0.05).unwrap().loss;
        }
        assert!(last < first * 0.2, "loss went {first} -> {last}");
    }

    #[test]
    fn update_respects_mask_and_staticness() {
        let base = FrozenStack::new(vec![gaussian_matrix(4, 4, 3).scaled(0.3)]).unwrap();
        let mut adapters = vec![AdapterPair::init(0, 4, 4, 2, 8).unwrap()];
        let batch = toy_batch(8, 4, 4, 22);
        local_update(&mut adapters, &base, &batch, 0.1).unwrap();
        adapters[0].build_mask(0.5, MaskSelect::Magnitude).unwrap();
        let projection_before = adapters[0].projection().clone();
        let stats = local_update(&mut adapters, &base, &batch, 0.1).unwrap();
        assert_eq!(stats.grad_projection_norms.len(), 1);
        assert!(stats.grad_projection_norms[0] > 0.0);
        for row in 0..4 {
            for col in 0..2 {
                if !adapters[0].mask_at(row, col) {
                    assert_eq!(adapters[0].expansion().at(row, col), 0.0);
                }
            }
        }
        assert_eq!(adapters[0].projection(), &projection_before);
    }

    #[test]
    fn update_rejects_bad_arguments() {
        let base = FrozenStack::new(vec![gaussian_matrix(4, 4, 3)]).unwrap();
        let batch = toy_batch(4, 4, 4, 1);
        let mut wrong_depth = vec![
            AdapterPair::init(0, 4, 4, 2, 1).unwrap(),
            AdapterPair::init(1, 4, 4, 2, 2).unwrap(),
        ];
        assert!(local_update(&mut wrong_depth, &base, &batch, 0.1).is_err());
        let mut ok = vec![AdapterPair::init(0, 4, 4, 2, 1).unwrap()];
        assert!(local_update(&mut ok, &base, &batch, 0.0).is_err());
        assert!(local_update(&mut ok, &base, &batch, f64::NAN).is_err());
        let mut wrong_dims = vec![AdapterPair::init(0, 3, 4, 2, 1).unwrap()];
        assert!(local_update(&mut wrong_dims, &base, &batch, 0.1).is_err());
    }

    #[test]
    fn stack_construction_checks_chaining() {
        assert!(FrozenStack::new(vec![]).is_err());
        let bad = FrozenStack::new(vec![Matrix::zeros(3, 4), Matrix::zeros(2, 5)]);
        assert!(bad.is_err());
        let ok = FrozenStack::new(vec![Matrix::zeros(3, 4), Matrix::zeros(2, 3)]).unwrap();
        assert_eq!(ok.input_dim(), 4);
        assert_eq!(ok.output_dim(), 2);
        assert_eq!(ok.forward(&[0.0; 4]).unwrap(), vec![0.0, 0.0]);
        assert!(ok.forward(&[0.0; 3]).is_err());
    }

    #[test]
    fn batch_construction_checks_shapes() {
        assert!(Batch::new(Matrix::zeros(0, 3), Matrix::zeros(0, 2)).is_err());
        assert!(Batch::new(Matrix::zeros(4, 3), Matrix::zeros(3, 2)).is_err());
    }
}
