//! Data-driven sparsity budgeting across layers.
//!
//! A device pushes a probe batch through the frozen base stack and records,
//! per layer, the mean input and an input covariance. The singular values
//! of `W_l * C_l` say how much of the layer's response the data actually
//! excites: their spectral entropy is high when many directions matter and
//! near zero when one direction dominates. A global budget of trainable
//! positions is then split across layers proportionally to a softmax over
//! those entropies, clamped at each layer's capacity, with any clamped
//! surplus redistributed once over the layers that still have room.
//!
//! All entropies are in nats. Counts never exceed capacity, so realized
//! sparsity rates stay in `[0, 1]` by construction.

use crate::adapter::{forward_batch, FrozenStack};
use crate::error::{Error, Result};
use crate::linalg::{spectral_entropy, svd, Matrix};

/// How the per-layer input covariance is estimated from the probe batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceMode {
    /// `C = (1/n) sum_i h_i h_i^T`, the empirical second moment. Default.
    #[default]
    Batch,
    /// `C = mean(h) mean(h)^T`, rank one by construction. Every layer then
    /// has zero spectral entropy and the allocation degenerates to an even
    /// split; exposed for comparison runs.
    MeanOuter,
}

/// Per-layer probe statistics: mean input and input covariance.
#[derive(Debug, Clone)]
pub struct LayerProbe {
    /// Mean input to the layer over the probe batch.
    pub mean: Vec<f64>,
    /// Input covariance estimate, square in the layer's input dimension.
    pub covariance: Matrix,
}

/// Runs `inputs` (one probe example per row) through the frozen stack and
/// gathers each layer's input statistics.
pub fn probe_covariance(
    stack: &FrozenStack,
    inputs: &Matrix,
    mode: CovarianceMode,
) -> Result<Vec<LayerProbe>> {
    if inputs.rows() == 0 {
        return Err(Error::DegenerateInput("empty probe batch".into()));
    }
    if inputs.cols() != stack.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "probe inputs have {} columns, stack expects {}",
            inputs.cols(),
            stack.input_dim()
        )));
    }
    let (hidden, _) = forward_batch(stack.layers(), inputs)?;
    let n = inputs.rows() as f64;
    let mut probes = Vec::with_capacity(hidden.len());
    for h in &hidden {
        let dim = h.cols();
        let mut mean = vec![0.0; dim];
        for row in 0..h.rows() {
            for (m, v) in mean.iter_mut().zip(h.row(row)) {
                *m += v / n;
            }
        }
        let covariance = match mode {
            // (1/n) H^T H accumulates h h^T over the batch.
            CovarianceMode::Batch => h.transpose().matmul(h)?.scaled(1.0 / n),
            CovarianceMode::MeanOuter => {
                let mut c = Matrix::zeros(dim, dim);
                for i in 0..dim {
                    for j in 0..dim {
                        c.set(i, j, mean[i] * mean[j]);
                    }
                }
                c
            }
        };
        probes.push(LayerProbe { mean, covariance });
    }
    Ok(probes)
}

/// Spectral entropy of each layer's data-weighted response `W_l * C_l`.
pub fn layer_entropies(stack: &FrozenStack, probes: &[LayerProbe]) -> Result<Vec<f64>> {
    if probes.len() != stack.depth() {
        return Err(Error::DimensionMismatch(format!(
            "{} probes for a stack of depth {}",
            probes.len(),
            stack.depth()
        )));
    }
    let mut entropies = Vec::with_capacity(probes.len());
    for (w, probe) in stack.layers().iter().zip(probes) {
        let weighted = w.matmul(&probe.covariance)?;
        let spectrum = svd(&weighted)?;
        entropies.push(spectral_entropy(&spectrum.singular_values)?);
    }
    Ok(entropies)
}

/// Result of splitting a position budget across layers.
#[derive(Debug, Clone)]
pub struct SparsityAllocation {
    /// Trainable positions granted to each layer, `counts[l] <= capacity`.
    pub counts: Vec<usize>,
    /// `counts[l] / capacities[l]`, always in `[0, 1]`.
    pub rates: Vec<f64>,
    /// The softmax weights the split was based on.
    pub weights: Vec<f64>,
}

/// Splits `budget` trainable positions across layers by entropy softmax.
///
/// The raw share of layer `l` is `budget * softmax(entropies)_l`, rounded
/// up and clamped to the layer's capacity. Surplus cut off by clamping is
/// redistributed once, proportionally to the softmax weights of the layers
/// still below capacity; a redistribution target hitting its own cap keeps
/// the cap (no further passes), so a heavily clamped configuration may end
/// slightly under budget.
pub fn allocate_sparsity(
    entropies: &[f64],
    capacities: &[usize],
    budget: usize,
) -> Result<SparsityAllocation> {
    if entropies.is_empty() {
        return Err(Error::DegenerateInput("no layers to allocate over".into()));
    }
    if entropies.len() != capacities.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} entropies, {} capacities",
            entropies.len(),
            capacities.len()
        )));
    }
    if entropies.iter().any(|h| !h.is_finite()) {
        return Err(Error::InvalidArgument("entropies must be finite".into()));
    }
    if capacities.contains(&0) {
        return Err(Error::InvalidArgument("layer capacities must be positive".into()));
    }

    // Stable softmax over the entropies.
    let peak = entropies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = entropies.iter().map(|h| (h - peak).exp()).collect();
    let z: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();

    let raw: Vec<f64> = weights.iter().map(|p| budget as f64 * p).collect();
    let mut counts: Vec<usize> =
        raw.iter().zip(capacities).map(|(r, &cap)| (r.ceil() as usize).min(cap)).collect();

    // One redistribution pass: clamped surplus flows to layers with room,
    // split by their softmax weights.
    let surplus: f64 = raw.iter().zip(capacities).map(|(r, &cap)| (r - cap as f64).max(0.0)).sum();
    if surplus > 0.0 {
        let open: Vec<usize> = (0..counts.len()).filter(|&l| counts[l] < capacities[l]).collect();
        let open_weight: f64 = open.iter().map(|&l| weights[l]).sum();
        if open_weight > 0.0 {
            for &l in &open {
                let extra = surplus * weights[l] / open_weight;
                counts[l] = ((raw[l] + extra).ceil() as usize).min(capacities[l]);
            }
        }
    }

    let rates = counts.iter().zip(capacities).map(|(&c, &cap)| c as f64 / cap as f64).collect();
    Ok(SparsityAllocation { counts, rates, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_stack(dim: usize, depth: usize) -> FrozenStack {
        FrozenStack::new(vec![Matrix::identity(dim); depth]).unwrap()
    }

    #[test]
    fn probe_statistics_match_hand_values() {
        let stack = identity_stack(2, 1);
        let inputs = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();

        let probes = probe_covariance(&stack, &inputs, CovarianceMode::Batch).unwrap();
        assert_eq!(probes.len(), 1);
        assert_eq!(probes[0].mean, vec![0.5, 0.5]);
        let c = &probes[0].covariance;
        assert_eq!((c.at(0, 0), c.at(0, 1), c.at(1, 1)), (0.5, 0.0, 0.5));

        let probes = probe_covariance(&stack, &inputs, CovarianceMode::MeanOuter).unwrap();
        let c = &probes[0].covariance;
        assert_eq!((c.at(0, 0), c.at(0, 1), c.at(1, 1)), (0.25, 0.25, 0.25));
    }

    #[test]
    fn deeper_layers_probe_activated_inputs() {
        let stack = identity_stack(2, 2);
        let inputs = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let probes = probe_covariance(&stack, &inputs, CovarianceMode::Batch).unwrap();
        assert_eq!(probes.len(), 2);
        // Layer 1 sees tanh of layer 0's output.
        let t = 1.0f64.tanh();
        assert!((probes[1].mean[0] - t / 2.0).abs() < 1e-15);
        assert!((probes[1].mean[1] - t / 2.0).abs() < 1e-15);
        assert!((probes[1].covariance.at(0, 0) - t * t / 2.0).abs() < 1e-15);
    }

    #[test]
    fn probe_rejects_bad_inputs() {
        let stack = identity_stack(2, 1);
        let empty = Matrix::zeros(0, 2);
        assert!(probe_covariance(&stack, &empty, CovarianceMode::Batch).is_err());
        let wrong = Matrix::zeros(3, 5);
        assert!(probe_covariance(&stack, &wrong, CovarianceMode::Batch).is_err());
    }

    #[test]
    fn isotropic_response_has_maximal_entropy() {
        let stack = identity_stack(3, 1);
        let probe = LayerProbe { mean: vec![0.0; 3], covariance: Matrix::identity(3) };
        let h = layer_entropies(&stack, &[probe]).unwrap();
        assert!((h[0] - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rank_one_response_has_zero_entropy() {
        let stack = identity_stack(2, 1);
        let inputs = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let probes = probe_covariance(&stack, &inputs, CovarianceMode::MeanOuter).unwrap();
        let h = layer_entropies(&stack, &probes).unwrap();
        assert!(h[0].abs() < 1e-12, "rank-one covariance must give zero entropy, got {}", h[0]);
    }

    #[test]
    fn allocation_matches_executed_rule_on_the_clamped_case() {
        // Softmax of (ln 2, 0) is (2/3, 1/3); budget 100 puts 66.7 on the
        // first layer, clamps at 50, and the surplus tops the second layer
        // up to exactly its cap.
        let alloc = allocate_sparsity(&[2.0f64.ln(), 0.0], &[50, 50], 100).unwrap();
        assert_eq!(alloc.counts, vec![50, 50]);
        assert_eq!(alloc.rates, vec![1.0, 1.0]);
        assert!((alloc.weights[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn allocation_without_clamping_follows_the_softmax() {
        let alloc = allocate_sparsity(&[0.0, 0.0], &[100, 100], 10).unwrap();
        assert_eq!(alloc.counts, vec![5, 5]);

        // A dominant entropy takes nearly the whole budget.
        let alloc = allocate_sparsity(&[5.0, 0.0], &[1000, 1000], 20).unwrap();
        assert_eq!(alloc.counts, vec![20, 1]);
    }

    #[test]
    fn allocation_edge_budgets() {
        let alloc = allocate_sparsity(&[1.0, 2.0], &[10, 10], 0).unwrap();
        assert_eq!(alloc.counts, vec![0, 0]);

        let alloc = allocate_sparsity(&[1.0, 2.0], &[10, 10], 10_000).unwrap();
        assert_eq!(alloc.counts, vec![10, 10]);

        let alloc = allocate_sparsity(&[0.7], &[40], 12).unwrap();
        assert_eq!(alloc.counts, vec![12]);
    }

    #[test]
    fn allocation_rejects_bad_arguments() {
        assert!(allocate_sparsity(&[], &[], 10).is_err());
        assert!(allocate_sparsity(&[1.0], &[5, 5], 10).is_err());
        assert!(allocate_sparsity(&[f64::NAN], &[5], 10).is_err());
        assert!(allocate_sparsity(&[1.0, 1.0], &[5, 0], 10).is_err());
    }

    proptest! {
        /// Rates stay within [0, 1] and counts within capacity for any
        /// finite entropy profile, and the allocation is deterministic.
        #[test]
        fn allocation_respects_capacity(
            entropies in proptest::collection::vec(0.0f64..10.0, 1..6),
            caps in proptest::collection::vec(1usize..2000, 1..6),
            budget in 0usize..4000,
        ) {
            let n = entropies.len().min(caps.len());
            let entropies = &entropies[..n];
            let caps = &caps[..n];
            let a = allocate_sparsity(entropies, caps, budget).unwrap();
            let b = allocate_sparsity(entropies, caps, budget).unwrap();
            prop_assert_eq!(&a.counts, &b.counts);
            for (l, (&c, &cap)) in a.counts.iter().zip(caps).enumerate() {
                prop_assert!(c <= cap);
                prop_assert!(a.rates[l] >= 0.0 && a.rates[l] <= 1.0);
            }
            // When nothing clamps, ceil rounding is the only slack.
            let raw_fits = a.weights.iter().zip(caps)
                .all(|(p, &cap)| budget as f64 * p <= cap as f64);
            if raw_fits {
                let total: usize = a.counts.iter().sum();
                prop_assert!(total >= budget.min(caps.iter().sum()));
                prop_assert!(total <= budget + n);
            }
        }
    }
}
