//! Mask collision rates and the aggregation-gap bound check.
//!
//! When several devices keep independent Bernoulli-like masks over the same
//! `d x r` expansion, a position "collides" when two or more masks are
//! active there, because aggregation then mixes updates trained on
//! different tasks. With per-device sparsity rates `s_j` the probability
//! that a position collides is
//!
//! `S = 1 - prod_j (1 - s_j) - sum_j s_j prod_{z != j} (1 - s_z)`,
//!
//! i.e. one minus the all-idle and exactly-one-active terms.

use crate::adapter::AdapterPair;
use crate::error::{Error, Result};
use crate::rng::Rng;

fn validate_sparsities(sparsities: &[f64]) -> Result<()> {
    if sparsities.is_empty() {
        return Err(Error::DegenerateInput("collision rate of an empty device set".into()));
    }
    for &s in sparsities {
        if !(0.0..=1.0).contains(&s) || !s.is_finite() {
            return Err(Error::InvalidArgument(format!("sparsity rate {s} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Closed-form collision rate for independent masks with the given
/// sparsity rates. Clamped to `[0, 1]` against floating point drift.
pub fn collision_rate(sparsities: &[f64]) -> Result<f64> {
    validate_sparsities(sparsities)?;
    if sparsities.len() == 1 {
        // One mask cannot collide; skip the arithmetic and its rounding.
        return Ok(0.0);
    }
    let none: f64 = sparsities.iter().map(|s| 1.0 - s).product();
    let exactly_one: f64 = sparsities
        .iter()
        .enumerate()
        .map(|(j, s)| {
            s * sparsities
                .iter()
                .enumerate()
                .filter(|&(z, _)| z != j)
                .map(|(_, t)| 1.0 - t)
                .product::<f64>()
        })
        .sum();
    Ok((1.0 - none - exactly_one).clamp(0.0, 1.0))
}

/// Monte-Carlo estimate of the same quantity: draws `positions` independent
/// mask columns with `mask_j ~ Bernoulli(s_j)` and counts how often two or
/// more are active. The standard error is `sqrt(S (1 - S) / positions)`.
pub fn collision_rate_mc(sparsities: &[f64], positions: usize, seed: u64) -> Result<f64> {
    validate_sparsities(sparsities)?;
    if positions == 0 {
        return Err(Error::InvalidArgument("monte-carlo needs at least one position".into()));
    }
    let mut rng = Rng::new(seed);
    let mut collided = 0usize;
    for _ in 0..positions {
        let mut active = 0u32;
        for &s in sparsities {
            if rng.uniform() < s {
                active += 1;
                if active == 2 {
                    break;
                }
            }
        }
        if active >= 2 {
            collided += 1;
        }
    }
    Ok(collided as f64 / positions as f64)
}

/// Closed-form vs Monte-Carlo comparison at a given sample count.
#[derive(Debug, Clone)]
pub struct CollisionReport {
    pub closed_form: f64,
    pub monte_carlo: f64,
    /// `|closed_form - monte_carlo|`.
    pub gap: f64,
    pub samples: usize,
}

pub fn compare_collision_estimates(
    sparsities: &[f64],
    positions: usize,
    seed: u64,
) -> Result<CollisionReport> {
    let closed_form = collision_rate(sparsities)?;
    let monte_carlo = collision_rate_mc(sparsities, positions, seed)?;
    Ok(CollisionReport {
        closed_form,
        monte_carlo,
        gap: (closed_form - monte_carlo).abs(),
        samples: positions,
    })
}

/// Fraction of positions where two or more of the given masks are active.
/// All masks must have the same nonzero length.
pub fn empirical_mask_collision(masks: &[&[bool]]) -> Result<f64> {
    if masks.is_empty() {
        return Err(Error::DegenerateInput("no masks given".into()));
    }
    let len = masks[0].len();
    if len == 0 {
        return Err(Error::DegenerateInput("masks are empty".into()));
    }
    if masks.iter().any(|m| m.len() != len) {
        return Err(Error::DimensionMismatch("masks differ in length".into()));
    }
    let collided = (0..len).filter(|&p| masks.iter().filter(|m| m[p]).count() >= 2).count();
    Ok(collided as f64 / len as f64)
}

/// One evaluation of the aggregation-gap bound for a cluster and layer.
#[derive(Debug, Clone)]
pub struct BoundEstimate {
    /// Realized gap: `sum_i |(B_i . M_i) A_i,eff - mean_j (B_j . M_j) A_i,eff|_F^2`.
    pub lhs: f64,
    /// `2 r k n^2 S (G + P)` with the measured envelopes.
    pub rhs: f64,
    /// Closed-form collision rate of the cluster's realized sparsities.
    pub collision_rate: f64,
    /// Gradient envelope `G` supplied by the caller (running maximum of
    /// masked-gradient projection norms).
    pub grad_envelope: f64,
    /// Mean-product envelope `P` supplied by the caller.
    pub mean_envelope: f64,
    pub holds: bool,
}

/// This round's candidate for the mean-product envelope `P`:
/// `max_i |(1/n) sum_j B_j A_i,eff|_F` over the cluster. The caller keeps
/// the running maximum across rounds.
pub fn mean_product_norm(adapters: &[&AdapterPair]) -> Result<f64> {
    check_cluster_shapes(adapters)?;
    let n = adapters.len() as f64;
    let mut mean_b = adapters[0].expansion().clone();
    for pair in &adapters[1..] {
        mean_b.axpy(1.0, pair.expansion())?;
    }
    let mean_b = mean_b.scaled(1.0 / n);
    let mut worst: f64 = 0.0;
    for pair in adapters {
        worst = worst.max(mean_b.matmul(pair.effective_projection())?.frobenius_norm());
    }
    Ok(worst)
}

/// Checks the aggregation-gap bound on one layer of one cluster.
///
/// The left side measures how far each member's adapter product sits from
/// the cluster mean expansion pushed through that member's own projection;
/// expectations are realized values for the round's batch. The right side
/// is the analytic envelope `2 r k n^2 S (G + P)`; `G` and `P` are meant to
/// be running maxima over the experiment, so the bound is expected to hold
/// with slack. The bound is reported, never enforced.
pub fn theorem1_check(
    adapters: &[&AdapterPair],
    grad_envelope: f64,
    mean_envelope: f64,
) -> Result<BoundEstimate> {
    check_cluster_shapes(adapters)?;
    if !(grad_envelope >= 0.0) || !(mean_envelope >= 0.0) {
        return Err(Error::InvalidArgument("envelopes must be non-negative".into()));
    }
    let n = adapters.len();
    let r = adapters[0].rank() as f64;
    let k = adapters[0].input_dim() as f64;

    let mut mean_b = adapters[0].expansion().clone();
    for pair in &adapters[1..] {
        mean_b.axpy(1.0, pair.expansion())?;
    }
    let mean_b = mean_b.scaled(1.0 / n as f64);

    let mut lhs = 0.0;
    for pair in adapters {
        let gap =
            pair.expansion().sub(&mean_b)?.matmul(pair.effective_projection())?.frobenius_norm();
        lhs += gap * gap;
    }

    let sparsities: Vec<f64> = adapters.iter().map(|p| p.sparsity()).collect();
    let s = collision_rate(&sparsities)?;
    let rhs = 2.0 * r * k * (n * n) as f64 * s * (grad_envelope + mean_envelope);

    Ok(BoundEstimate {
        lhs,
        rhs,
        collision_rate: s,
        grad_envelope,
        mean_envelope,
        holds: lhs <= rhs,
    })
}

fn check_cluster_shapes(adapters: &[&AdapterPair]) -> Result<()> {
    if adapters.is_empty() {
        return Err(Error::DegenerateInput("empty cluster".into()));
    }
    let first = adapters[0];
    for pair in adapters {
        if pair.output_dim() != first.output_dim()
            || pair.rank() != first.rank()
            || pair.input_dim() != first.input_dim()
            || pair.layer_index() != first.layer_index()
        {
            return Err(Error::DimensionMismatch(
                "cluster adapters must share layer index and shape".into(),
            ));
        }
    }
    Ok(())
}
