//! Low-rank adapter pairs, sparsity masks, task-aware refinement and the
//! per-device adapter bank.
//!
//! An adapter for a `d x k` layer is the product `(B . M) A`: a trainable
//! expansion `B` (`d x r`) gated by a binary mask `M`, and a projection `A`
//! (`r x k`) drawn once from a seeded Gaussian and never trained. Devices
//! sample their projections independently, which keeps the products of
//! different devices nearly orthogonal without any coordination.
//!
//! Two invariants hold at all times and are enforced here rather than by
//! callers:
//! * staticness: projection entries are never mutated after construction;
//!   refinement produces a separate matrix.
//! * mask closure: expansion entries outside the mask are exactly zero
//!   after every public operation.

mod codec;
mod stack;

pub use codec::{decode_adapter, encode_adapter};
pub use stack::{
    forward_vec, local_update, tanh_stack_gradients, tanh_stack_loss, Batch, FrozenStack,
    UpdateStats,
};

pub(crate) use stack::forward_batch;

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, Matrix};

/// How mask entries are selected from the expansion matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskSelect {
    /// Keep the entries with the largest |B|. Default: sign carries no
    /// importance information, only magnitude does.
    #[default]
    Magnitude,
    /// Keep the entries with the largest signed B, the literal reading of a
    /// one-sided threshold rule. Exposed for comparison runs.
    Signed,
}

/// How mixture components are kept in [`implicit_moe_forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TopKSelect {
    #[default]
    Magnitude,
    Signed,
}

/// One layer's adapter: static projection, maskable trainable expansion.
#[derive(Debug, Clone)]
pub struct AdapterPair {
    layer_index: usize,
    /// `r x k`, seeded Gaussian, immutable.
    projection: Matrix,
    /// `r x k`, projection rescaled per task; set by [`Self::refine_projection`].
    refined_projection: Option<Matrix>,
    /// `d x r`, trainable, always mask-closed.
    expansion: Matrix,
    /// Row-major `d * r` gate over the expansion.
    mask: Vec<bool>,
    /// Seed that generated `projection`; lets checkpoints omit the matrix.
    seed: u64,
}

impl AdapterPair {
    /// Fresh adapter for a `d x k` layer at rank `r`: zero expansion, all-ones
    /// mask, projection drawn from the stream seeded by `seed`.
    ///
    /// The adapter contribution of a fresh pair is exactly zero for every
    /// input, so attaching one never perturbs the base model.
    pub fn init(
        layer_index: usize,
        d: usize,
        k: usize,
        r: usize,
        seed: u64,
    ) -> Result<AdapterPair> {
        if d == 0 || k == 0 {
            return Err(Error::InvalidArgument("adapter needs d >= 1 and k >= 1".into()));
        }
        if r == 0 || r > d.min(k) {
            return Err(Error::InvalidArgument(format!(
                "rank must satisfy 1 <= r <= min(d, k) = {}, got {r}",
                d.min(k)
            )));
        }
        Ok(AdapterPair {
            layer_index,
            projection: gaussian_matrix(r, k, seed),
            refined_projection: None,
            expansion: Matrix::zeros(d, r),
            mask: vec![true; d * r],
            seed,
        })
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn output_dim(&self) -> usize {
        self.expansion.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn rank(&self) -> usize {
        self.projection.rows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn refined_projection(&self) -> Option<&Matrix> {
        self.refined_projection.as_ref()
    }

    /// Refined projection when one has been computed, the static one
    /// otherwise. Training, inference and cross products all use this.
    pub fn effective_projection(&self) -> &Matrix {
        self.refined_projection.as_ref().unwrap_or(&self.projection)
    }

    pub fn expansion(&self) -> &Matrix {
        &self.expansion
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn mask_at(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.rank() + col]
    }

    /// Active mask entries over `d * r`.
    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Realized sparsity rate `popcount(M) / (d * r)`.
    pub fn sparsity(&self) -> f64 {
        self.active_count() as f64 / self.mask.len() as f64
    }

    /// The masked product `(B . M) A_eff`, shape `d x k`.
    pub fn composed(&self) -> Matrix {
        // Expansion is mask-closed, so no extra gating is needed.
        self.expansion
            .matmul(self.effective_projection())
            .expect("adapter factors have compatible shapes")
    }

    /// Adapter contribution `(B . M) A_eff x` for a layer input `x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.effective_projection().matvec(x)?;
        self.expansion.matvec(&z)
    }

    /// Rebuilds the mask to keep the `ceil(target_sparsity * d * r)` most
    /// important expansion entries and zeroes the rest of `B`.
    ///
    /// Importance is |B| under [`MaskSelect::Magnitude`] and signed B under
    /// [`MaskSelect::Signed`]; ties go to the lower (row, col) index so the
    /// selection is a pure function of the weights. Requesting a mask while
    /// `B` is still all zeros is an error: every entry would tie and the
    /// threshold would carry no information.
    pub fn build_mask(&mut self, target_sparsity: f64, select: MaskSelect) -> Result<()> {
        if !(target_sparsity > 0.0 && target_sparsity <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target sparsity must lie in (0, 1], got {target_sparsity}"
            )));
        }
        let total = self.mask.len();
        let keep = ((target_sparsity * total as f64).ceil() as usize).clamp(1, total);
        self.build_mask_count(keep, select)
    }

    /// [`build_mask`](Self::build_mask) with the kept-entry count given
    /// directly, for callers that budget positions as integers and need the
    /// popcount exact.
    pub fn build_mask_count(&mut self, keep: usize, select: MaskSelect) -> Result<()> {
        let total = self.mask.len();
        if keep == 0 || keep > total {
            return Err(Error::InvalidArgument(format!(
                "kept count must lie in [1, {total}], got {keep}"
            )));
        }
        if self.expansion.data().iter().all(|&b| b == 0.0) {
            return Err(Error::DegenerateInput(
                "mask requested before any update populated the expansion".into(),
            ));
        }
        let mut order: Vec<usize> = (0..total).collect();
        let key = |i: usize| -> f64 {
            let v = self.expansion.data()[i];
            match select {
                MaskSelect::Magnitude => v.abs(),
                MaskSelect::Signed => v,
            }
        };
        // Descending importance; equal keys fall back to ascending index.
        order.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).unwrap().then(a.cmp(&b)));
        self.mask = vec![false; total];
        for &i in &order[..keep] {
            self.mask[i] = true;
        }
        self.close_expansion();
        Ok(())
    }

    /// Replaces the expansion with `b` gated through the current mask;
    /// values outside the mask are discarded. Used when aggregated or
    /// received weights are attributed back to this adapter's owner.
    pub fn replace_expansion(&mut self, b: &Matrix) -> Result<()> {
        if b.rows() != self.expansion.rows() || b.cols() != self.expansion.cols() {
            return Err(Error::DimensionMismatch(format!(
                "expansion is {}x{}, replacement is {}x{}",
                self.expansion.rows(),
                self.expansion.cols(),
                b.rows(),
                b.cols()
            )));
        }
        self.expansion = b.clone();
        self.close_expansion();
        Ok(())
    }

    /// Rescales the projection by the normalized probe mean: with
    /// `h = mean_activation / |mean_activation|`, column `y` of the refined
    /// projection is `A[., y] * h[y]`. Inputs aligned with the probe mean
    /// keep their response; orthogonal inputs are attenuated.
    pub fn refine_projection(&mut self, mean_activation: &[f64]) -> Result<()> {
        if mean_activation.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "probe mean has length {}, layer input dimension is {}",
                mean_activation.len(),
                self.input_dim()
            )));
        }
        let norm = mean_activation.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateInput("probe mean has zero or non-finite norm".into()));
        }
        let mut refined = self.projection.clone();
        for i in 0..refined.rows() {
            for j in 0..refined.cols() {
                refined.set(i, j, self.projection.at(i, j) * mean_activation[j] / norm);
            }
        }
        self.refined_projection = Some(refined);
        Ok(())
    }

    /// Applies the step `B -= lr * grad` on masked positions only.
    pub(crate) fn step_expansion(&mut self, grad: &Matrix, lr: f64) -> Result<()> {
        if grad.rows() != self.expansion.rows() || grad.cols() != self.expansion.cols() {
            return Err(Error::DimensionMismatch("gradient shape".into()));
        }
        let r = self.rank();
        for row in 0..self.expansion.rows() {
            for col in 0..r {
                if self.mask[row * r + col] {
                    let v = self.expansion.at(row, col) - lr * grad.at(row, col);
                    self.expansion.set(row, col, v);
                }
            }
        }
        Ok(())
    }

    fn close_expansion(&mut self) {
        let r = self.rank();
        for row in 0..self.expansion.rows() {
            for col in 0..r {
                if !self.mask[row * r + col] {
                    self.expansion.set(row, col, 0.0);
                }
            }
        }
    }
}

/// Normalized Frobenius cross product of two composed adapters,
/// `trace(w_a^T w_b) / (|w_a| |w_b|)` with `w = (B . M) A_eff`.
///
/// Defined as 0 when either product is all zeros (fresh adapters). For
/// independently seeded projections the value concentrates near 0, which is
/// the orthogonality the aggregation scheme relies on.
pub fn frobenius_cross(a: &AdapterPair, b: &AdapterPair) -> Result<f64> {
    let wa = a.composed();
    let wb = b.composed();
    let denom = wa.frobenius_norm() * wb.frobenius_norm();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(wa.frobenius_inner(&wb)? / denom)
}

/// Zeroes all but the `top_k` strongest components of `z`; ties keep the
/// lower index. `top_k >= z.len()` passes `z` through unchanged.
pub fn top_k_filter(z: &[f64], top_k: usize, select: TopKSelect) -> Result<Vec<f64>> {
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be >= 1".into()));
    }
    if top_k >= z.len() {
        return Ok(z.to_vec());
    }
    let key = |i: usize| match select {
        TopKSelect::Magnitude => z[i].abs(),
        TopKSelect::Signed => z[i],
    };
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).unwrap().then(a.cmp(&b)));
    let mut out = vec![0.0; z.len()];
    for &i in &order[..top_k] {
        out[i] = z[i];
    }
    Ok(out)
}

/// Per-task probe summary: where the task's activations live and what
/// sparsity each layer was granted.
#[derive(Debug, Clone)]
pub struct TaskProfile {
    pub task_id: usize,
    /// Mean layer input over the probe batch, one vector per layer.
    pub mean_activations: Vec<Vec<f64>>,
    /// Spectral entropy of each layer's probed response.
    pub layer_entropies: Vec<f64>,
    /// Sparsity target granted to each layer.
    pub target_sparsities: Vec<f64>,
}

impl TaskProfile {
    pub fn new(
        task_id: usize,
        mean_activations: Vec<Vec<f64>>,
        layer_entropies: Vec<f64>,
        target_sparsities: Vec<f64>,
    ) -> Result<TaskProfile> {
        if mean_activations.len() != layer_entropies.len()
            || mean_activations.len() != target_sparsities.len()
        {
            return Err(Error::DimensionMismatch("profile layer counts disagree".into()));
        }
        for (l, h) in mean_activations.iter().enumerate() {
            let norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::DegenerateInput(format!(
                    "layer {l} probe mean has zero or non-finite norm"
                )));
            }
        }
        Ok(TaskProfile { task_id, mean_activations, layer_entropies, target_sparsities })
    }
}

/// One origin device's adapters, as stored by a peer.
#[derive(Debug, Clone)]
pub struct BankEntry {
    pub origin_device: usize,
    /// One adapter per layer, refined projections included.
    pub adapters: Vec<AdapterPair>,
}

/// The set of adapters a device serves inference from: its own plus every
/// peer adapter it has received. At most one entry per origin device;
/// re-inserting an origin replaces its entry (fresher weights win).
#[derive(Debug, Clone, Default)]
pub struct AdapterBank {
    entries: Vec<BankEntry>,
}

impl AdapterBank {
    pub fn new() -> AdapterBank {
        AdapterBank::default()
    }

    pub fn insert(&mut self, entry: BankEntry) {
        match self.entries.iter_mut().find(|e| e.origin_device == entry.origin_device) {
            Some(slot) => *slot = entry,
            None => {
                self.entries.push(entry);
                // Deterministic iteration order regardless of arrival order.
                self.entries.sort_by_key(|e| e.origin_device);
            }
        }
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn get(&self, origin_device: usize) -> Option<&BankEntry> {
        self.entries.iter().find(|e| e.origin_device == origin_device)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One layer of the implicit mixture forward pass.
///
/// Every bank entry projects the input through its own refined projection,
/// keeps its `top_k` strongest components and expands them back:
/// `output = W0 x + sum_entries (B . M) top_k(A_eff x)`. Entries whose task
/// does not match the input produce weak components and contribute little;
/// there is no explicit router. An empty bank reduces to the frozen layer.
pub fn implicit_moe_forward(
    bank: &AdapterBank,
    base_layer: &Matrix,
    layer_index: usize,
    input: &[f64],
    top_k: usize,
    select: TopKSelect,
) -> Result<Vec<f64>> {
    let mut out = base_layer.matvec(input)?;
    for entry in &bank.entries {
        let pair =
            entry.adapters.iter().find(|p| p.layer_index() == layer_index).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "bank entry for device {} has no adapter for layer {layer_index}",
                    entry.origin_device
                ))
            })?;
        let z = pair.effective_projection().matvec(input)?;
        let z = top_k_filter(&z, top_k, select)?;
        let contribution = pair.expansion().matvec(&z)?;
        if contribution.len() != out.len() {
            return Err(Error::DimensionMismatch(format!(
                "entry for device {} maps to {} outputs, layer has {}",
                entry.origin_device,
                contribution.len(),
                out.len()
            )));
        }
        for (o, c) in out.iter_mut().zip(&contribution) {
            *o += c;
        }
    }
    Ok(out)
}

/// Full forward pass of the frozen stack under the implicit mixture: every
/// layer runs [`implicit_moe_forward`] over the bank, with tanh between
/// layers and a linear last layer, mirroring the plain stack forward. An
/// empty bank reproduces the frozen model exactly.
pub fn moe_stack_forward(
    bank: &AdapterBank,
    base: &FrozenStack,
    input: &[f64],
    top_k: usize,
    select: TopKSelect,
) -> Result<Vec<f64>> {
    let depth = base.depth();
    let mut h = input.to_vec();
    for l in 0..depth {
        let z = implicit_moe_forward(bank, base.layer(l), l, &h, top_k, select)?;
        h = if l + 1 < depth { z.into_iter().map(f64::tanh).collect() } else { z };
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn filled_pair(seed: u64) -> AdapterPair {
        let mut p = AdapterPair::init(0, 4, 5, 2, seed).unwrap();
        let b = gaussian_matrix(4, 2, seed ^ 0xb);
        p.replace_expansion(&b).unwrap();
        p
    }

    #[test]
    fn fresh_adapter_contributes_nothing() {
        let p = AdapterPair::init(0, 6, 5, 3, 42).unwrap();
        let x: Vec<f64> = (0..5).map(|i| i as f64 - 2.0).collect();
        let y = p.apply(&x).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
        assert_eq!(p.sparsity(), 1.0);
    }

    #[test]
    fn init_rejects_bad_rank() {
        assert!(AdapterPair::init(0, 4, 5, 0, 1).is_err());
        assert!(AdapterPair::init(0, 4, 5, 5, 1).is_err());
        assert!(AdapterPair::init(0, 4, 5, 4, 1).is_ok());
    }

    #[test]
    fn mask_keeps_largest_magnitudes() {
        let mut p = AdapterPair::init(0, 2, 2, 2, 1).unwrap();
        p.replace_expansion(&Matrix::from_rows(&[vec![1.0, -4.0], vec![2.0, 3.0]]).unwrap())
            .unwrap();
        p.build_mask(0.5, MaskSelect::Magnitude).unwrap();
        assert_eq!(p.mask(), &[false, true, false, true]);
        assert_eq!(p.expansion().row(0), &[0.0, -4.0]);
        assert_eq!(p.expansion().row(1), &[0.0, 3.0]);
        assert_eq!(p.sparsity(), 0.5);
    }

    #[test]
    fn mask_tie_break_prefers_lower_index() {
        let mut p = AdapterPair::init(0, 2, 2, 2, 1).unwrap();
        p.replace_expansion(&Matrix::from_rows(&[vec![2.0, 2.0], vec![2.0, 0.0]]).unwrap())
            .unwrap();
        p.build_mask(0.5, MaskSelect::Magnitude).unwrap();
        assert_eq!(p.mask(), &[true, true, false, false]);
    }

    #[test]
    fn mask_signed_selection_differs() {
        let mut p = AdapterPair::init(0, 2, 2, 2, 1).unwrap();
        p.replace_expansion(&Matrix::from_rows(&[vec![1.0, -4.0], vec![2.0, 3.0]]).unwrap())
            .unwrap();
        p.build_mask(0.5, MaskSelect::Signed).unwrap();
        // Signed order: 3, 2, 1, -4.
        assert_eq!(p.mask(), &[false, false, true, true]);
    }

    #[test]
    fn mask_on_zero_expansion_is_an_error() {
        let mut p = AdapterPair::init(0, 3, 3, 2, 1).unwrap();
        assert!(matches!(p.build_mask(0.5, MaskSelect::Magnitude), Err(Error::DegenerateInput(_))));
        let mut q = filled_pair(5);
        assert!(q.build_mask(0.0, MaskSelect::Magnitude).is_err());
        assert!(q.build_mask(1.5, MaskSelect::Magnitude).is_err());
    }

    #[test]
    fn refinement_scales_columns_by_normalized_probe() {
        let mut p = AdapterPair::init(0, 2, 3, 2, 9).unwrap();
        // Overwrite with an all-ones projection via a crafted check on the
        // refined matrix instead: scale factors apply per column.
        p.refine_projection(&[3.0, 0.0, 4.0]).unwrap();
        let refined = p.refined_projection().unwrap();
        for i in 0..2 {
            assert!((refined.at(i, 0) - p.projection().at(i, 0) * 0.6).abs() < 1e-15);
            assert_eq!(refined.at(i, 1), 0.0);
            assert!((refined.at(i, 2) - p.projection().at(i, 2) * 0.8).abs() < 1e-15);
        }
        // Staticness: the stored projection is untouched.
        assert_eq!(p.projection(), &gaussian_matrix(2, 3, 9));
    }

    #[test]
    fn refinement_rejects_zero_probe() {
        let mut p = AdapterPair::init(0, 2, 3, 2, 9).unwrap();
        assert!(matches!(p.refine_projection(&[0.0, 0.0, 0.0]), Err(Error::DegenerateInput(_))));
        assert!(p.refine_projection(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn cross_product_of_identical_adapters_is_one() {
        let p = filled_pair(3);
        let c = frobenius_cross(&p, &p).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_product_of_fresh_adapters_is_zero() {
        let a = AdapterPair::init(0, 4, 5, 2, 1).unwrap();
        let b = filled_pair(2);
        assert_eq!(frobenius_cross(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn top_k_keeps_strongest_with_low_index_ties() {
        let z = vec![1.0, -3.0, 2.0, 3.0];
        assert_eq!(top_k_filter(&z, 2, TopKSelect::Magnitude).unwrap(), vec![0.0, -3.0, 0.0, 3.0]);
        assert_eq!(top_k_filter(&z, 2, TopKSelect::Signed).unwrap(), vec![0.0, 0.0, 2.0, 3.0]);
        assert_eq!(top_k_filter(&z, 9, TopKSelect::Magnitude).unwrap(), z);
        assert!(top_k_filter(&z, 0, TopKSelect::Magnitude).is_err());
        // Tie on magnitude: -3 at index 1 wins over 3 at index 3 only for
        // the final slot; with k = 1 the lower index is kept.
        assert_eq!(top_k_filter(&z, 1, TopKSelect::Magnitude).unwrap(), vec![0.0, -3.0, 0.0, 0.0]);
    }

    #[test]
    fn moe_layer_with_empty_bank_is_the_frozen_layer() {
        let bank = AdapterBank::new();
        let base = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let out =
            implicit_moe_forward(&bank, &base, 0, &[3.0, 4.0], 1, TopKSelect::Magnitude).unwrap();
        assert_eq!(out, vec![3.0, 8.0]);
    }

    #[test]
    fn moe_layer_matches_hand_calculation() {
        // One entry, r = 2, top_k = 1. Projection rows give z = (z1, z2);
        // only the stronger component survives.
        let mut pair = AdapterPair::init(0, 2, 2, 2, 1).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 10.0], vec![2.0, 20.0]]).unwrap();
        pair.replace_expansion(&b).unwrap();
        let bank = {
            let mut bank = AdapterBank::new();
            bank.insert(BankEntry { origin_device: 0, adapters: vec![pair.clone()] });
            bank
        };
        let base = Matrix::zeros(2, 2);
        let x = vec![1.0, 0.5];
        let z = pair.projection().matvec(&x).unwrap();
        let keep = if z[0].abs() >= z[1].abs() { 0 } else { 1 };
        let want = [b.at(0, keep) * z[keep], b.at(1, keep) * z[keep]];
        let out = implicit_moe_forward(&bank, &base, 0, &x, 1, TopKSelect::Magnitude).unwrap();
        assert!((out[0] - want[0]).abs() < 1e-12);
        assert!((out[1] - want[1]).abs() < 1e-12);

        // top_k = r reduces to the full adapter contribution.
        let full = implicit_moe_forward(&bank, &base, 0, &x, 2, TopKSelect::Magnitude).unwrap();
        let direct = pair.apply(&x).unwrap();
        for (a, b) in full.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_replaces_entries_per_origin() {
        let mut bank = AdapterBank::new();
        bank.insert(BankEntry { origin_device: 3, adapters: vec![filled_pair(1)] });
        bank.insert(BankEntry { origin_device: 1, adapters: vec![filled_pair(2)] });
        bank.insert(BankEntry { origin_device: 3, adapters: vec![filled_pair(9)] });
        assert_eq!(bank.len(), 2);
        let origins: Vec<usize> = bank.entries().iter().map(|e| e.origin_device).collect();
        assert_eq!(origins, vec![1, 3]);
        assert_eq!(bank.get(3).unwrap().adapters[0].seed(), 9);
    }

    #[test]
    fn task_profile_rejects_zero_probe_means() {
        let r = TaskProfile::new(0, vec![vec![0.0, 0.0]], vec![1.0], vec![0.5]);
        assert!(r.is_err());
        let ok = TaskProfile::new(0, vec![vec![1.0, 0.0]], vec![1.0], vec![0.5]);
        assert!(ok.is_ok());
    }

    #[test]
    fn mask_count_is_exact_and_validated() {
        let mut p = AdapterPair::init(0, 4, 5, 3, 7).unwrap();
        p.replace_expansion(&gaussian_matrix(4, 3, 11)).unwrap();
        p.build_mask_count(5, MaskSelect::Magnitude).unwrap();
        assert_eq!(p.active_count(), 5);
        assert!(p.build_mask_count(0, MaskSelect::Magnitude).is_err());
        assert!(p.build_mask_count(13, MaskSelect::Magnitude).is_err());
    }

    #[test]
    fn moe_stack_forward_reduces_to_frozen_without_entries() {
        let base = FrozenStack::new(vec![
            gaussian_matrix(3, 4, 1).scaled(0.4),
            gaussian_matrix(2, 3, 2).scaled(0.4),
        ])
        .unwrap();
        let x = [0.3, -0.2, 0.5, 0.1];
        let bank = AdapterBank::new();
        let moe = moe_stack_forward(&bank, &base, &x, 2, TopKSelect::Magnitude).unwrap();
        let plain = forward_vec(base.layers(), &x).unwrap();
        assert_eq!(moe, plain);
    }

    #[test]
    fn moe_stack_forward_applies_entries_at_every_layer() {
        let base = FrozenStack::new(vec![
            gaussian_matrix(3, 4, 1).scaled(0.4),
            gaussian_matrix(2, 3, 2).scaled(0.4),
        ])
        .unwrap();
        let mut l0 = AdapterPair::init(0, 3, 4, 2, 5).unwrap();
        l0.replace_expansion(&gaussian_matrix(3, 2, 6)).unwrap();
        let mut l1 = AdapterPair::init(1, 2, 3, 2, 7).unwrap();
        l1.replace_expansion(&gaussian_matrix(2, 2, 8)).unwrap();
        let mut bank = AdapterBank::new();
        bank.insert(BankEntry { origin_device: 0, adapters: vec![l0.clone(), l1.clone()] });

        let x = [0.3, -0.2, 0.5, 0.1];
        let moe = moe_stack_forward(&bank, &base, &x, 2, TopKSelect::Magnitude).unwrap();
        // Hand-compose: the rank is 2 and top_k = 2, so every component
        // passes and each layer adds the full adapter response.
        let z0 = base.layer(0).matvec(&x).unwrap();
        let a0 = l0.apply(&x).unwrap();
        let h: Vec<f64> = z0.iter().zip(&a0).map(|(z, a)| (z + a).tanh()).collect();
        let z1 = base.layer(1).matvec(&h).unwrap();
        let a1 = l1.apply(&h).unwrap();
        for (m, (z, a)) in moe.iter().zip(z1.iter().zip(&a1)) {
            assert!((m - (z + a)).abs() < 1e-15);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        // Mask closure and exact popcount, the two load-bearing invariants.
        #[test]
        fn mask_closure_holds(
            d in 1usize..10,
            r in 1usize..6,
            target in 0.05f64..1.0,
            seed in 0u64..10_000,
        ) {
            let r = r.min(d);
            let k = r + 3;
            let mut p = AdapterPair::init(0, d, k, r, seed).unwrap();
            p.replace_expansion(&gaussian_matrix(d, r, seed ^ 0x5a)).unwrap();
            p.build_mask(target, MaskSelect::Magnitude).unwrap();
            let expect = ((target * (d * r) as f64).ceil() as usize).clamp(1, d * r);
            prop_assert_eq!(p.active_count(), expect);
            for row in 0..d {
                for col in 0..r {
                    if !p.mask_at(row, col) {
                        prop_assert_eq!(p.expansion().at(row, col), 0.0);
                    }
                }
            }
            // Closure survives a replacement with dense values.
            p.replace_expansion(&gaussian_matrix(d, r, seed ^ 0xa5)).unwrap();
            for row in 0..d {
                for col in 0..r {
                    if !p.mask_at(row, col) {
                        prop_assert_eq!(p.expansion().at(row, col), 0.0);
                    }
                }
            }
        }
    }
}
