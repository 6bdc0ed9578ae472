//! Cluster formation, per-round connection plans and expansion aggregation.
//!
//! Clustering is bottom-up: every device starts alone, and the pair of
//! clusters whose union has the lowest worst-layer collision rate merges,
//! provided that rate stays under the configured cap and the union could
//! run a full mesh within every member's radio budget. Merging stops when
//! no candidate passes both gates. The procedure is deterministic: ties are
//! broken toward the smallest (min device id, min device id) pair.
//!
//! Two aggregation primitives operate on one layer of a cluster:
//! * [`aggregate_expansions`]: the convex data-weighted sum
//!   `sum_j alpha_j (B_j . M_j)`. Attributed back through per-origin masks
//!   it splits serving credit across members, so a mixture over the whole
//!   bank never double-counts a task.
//! * [`blend_expansions`]: the same sum renormalized per position over the
//!   masks actually active there. Collision-free positions pass through
//!   unchanged, which makes it the right feedback into each member's
//!   trainable expansion (a plain convex sum would shrink sparse weights
//!   every round).

use crate::adapter::AdapterPair;
use crate::collision::collision_rate;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::wireless::{channel_gain, link_feasibility, ChannelModel, DevicePlacement};

/// Knobs for cluster formation and the exchange cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    /// Cap on the worst-layer collision rate of any cluster.
    pub max_collision_rate: f64,
    /// Inter-cluster exchange runs every this many rounds.
    pub exchange_period_rounds: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { max_collision_rate: 0.15, exchange_period_rounds: 5 }
    }
}

/// One accepted merge, kept for dry-run reporting.
#[derive(Debug, Clone)]
pub struct MergeStep {
    /// Lowest device ids of the two merged clusters.
    pub merged: (usize, usize),
    /// Worst-layer collision rate of the union at merge time.
    pub collision_score: f64,
}

/// Final cluster assignment. Clusters and their members are sorted by id.
#[derive(Debug, Clone)]
pub struct ClusterPlan {
    clusters: Vec<Vec<usize>>,
    membership: Vec<usize>,
    merge_trace: Vec<MergeStep>,
}

impl ClusterPlan {
    /// Every device in one cluster, bypassing the merge gates. Used by the
    /// single-cluster ablation; collision and power caps are not checked.
    pub fn single_cluster(devices: usize) -> Result<ClusterPlan> {
        if devices == 0 {
            return Err(Error::InvalidArgument("no devices to cluster".into()));
        }
        Ok(ClusterPlan {
            clusters: vec![(0..devices).collect()],
            membership: vec![0; devices],
            merge_trace: Vec::new(),
        })
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn cluster_of(&self, device: usize) -> usize {
        self.membership[device]
    }

    pub fn members(&self, cluster: usize) -> &[usize] {
        &self.clusters[cluster]
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn device_count(&self) -> usize {
        self.membership.len()
    }

    pub fn merge_trace(&self) -> &[MergeStep] {
        &self.merge_trace
    }
}

/// Worst-layer collision rate over the union of the given devices.
fn union_collision_score(devices: &[usize], sparsity_profiles: &[Vec<f64>]) -> Result<f64> {
    let layers = sparsity_profiles[0].len();
    let mut worst: f64 = 0.0;
    for l in 0..layers {
        let s: Vec<f64> = devices.iter().map(|&d| sparsity_profiles[d][l]).collect();
        worst = worst.max(collision_rate(&s)?);
    }
    Ok(worst)
}

/// Whether every member of `devices` could serve a full mesh over the union
/// within its power budget, at the planning-time (round 0) channel draws.
fn mesh_feasible(
    devices: &[usize],
    payload_params: &[usize],
    placement: &DevicePlacement,
    model: &ChannelModel,
    root_seed: u64,
) -> Result<bool> {
    for &i in devices {
        let mut links = Vec::with_capacity(devices.len() - 1);
        for &j in devices {
            if j != i {
                let gain = channel_gain(placement, i, j, 0, root_seed)?;
                links.push((model.payload_bits(payload_params[i]), gain));
            }
        }
        if !link_feasibility(&links, model)?.feasible {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Bottom-up clustering under the collision cap and radio feasibility.
///
/// `sparsity_profiles[d][l]` is device `d`'s realized sparsity rate at
/// layer `l`; `payload_params[d]` is the parameter count it transmits per
/// round. Channel draws for the feasibility gate use round 0 of
/// `root_seed`'s fading stream.
pub fn agnes_cluster(
    sparsity_profiles: &[Vec<f64>],
    payload_params: &[usize],
    placement: &DevicePlacement,
    model: &ChannelModel,
    root_seed: u64,
    config: &ClusterConfig,
) -> Result<ClusterPlan> {
    let m = sparsity_profiles.len();
    if m == 0 {
        return Err(Error::InvalidArgument("no devices to cluster".into()));
    }
    if payload_params.len() != m || placement.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "{m} sparsity profiles, {} payloads, {} placements",
            payload_params.len(),
            placement.len()
        )));
    }
    let layers = sparsity_profiles[0].len();
    if layers == 0 || sparsity_profiles.iter().any(|p| p.len() != layers) {
        return Err(Error::DimensionMismatch("sparsity profiles must share a layer count".into()));
    }
    if !(0.0..=1.0).contains(&config.max_collision_rate) {
        return Err(Error::InvalidArgument(format!(
            "collision cap must lie in [0, 1], got {}",
            config.max_collision_rate
        )));
    }
    model.validate()?;

    let mut clusters: Vec<Vec<usize>> = (0..m).map(|d| vec![d]).collect();
    let mut merge_trace = Vec::new();
    loop {
        // Best candidate: (score, (min id a, min id b), index a, index b).
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut union: Vec<usize> =
                    clusters[a].iter().chain(&clusters[b]).copied().collect();
                union.sort_unstable();
                let score = union_collision_score(&union, sparsity_profiles)?;
                if score > config.max_collision_rate {
                    continue;
                }
                if !mesh_feasible(&union, payload_params, placement, model, root_seed)? {
                    continue;
                }
                let mut ids = (clusters[a][0], clusters[b][0]);
                if ids.0 > ids.1 {
                    ids = (ids.1, ids.0);
                }
                let better = match &best {
                    None => true,
                    Some((s, tie, _, _)) => score < *s || (score == *s && ids < *tie),
                };
                if better {
                    best = Some((score, ids, a, b));
                }
            }
        }
        let Some((score, ids, a, b)) = best else { break };
        let absorbed = clusters.remove(b);
        clusters[a].extend(absorbed);
        clusters[a].sort_unstable();
        merge_trace.push(MergeStep { merged: ids, collision_score: score });
    }

    clusters.sort_by_key(|c| c[0]);
    let mut membership = vec![0; m];
    for (idx, cluster) in clusters.iter().enumerate() {
        for &d in cluster {
            membership[d] = idx;
        }
    }
    Ok(ClusterPlan { clusters, membership, merge_trace })
}

/// Which links a round runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Full mesh inside every cluster.
    Inner,
    /// One representative link per cluster pair.
    Exchange,
}

/// One directed link with its power plan.
#[derive(Debug, Clone)]
pub struct PlannedLink {
    pub from: usize,
    pub to: usize,
    pub payload_bits: f64,
    pub gain: f64,
    pub power_w: f64,
    pub delay_s: f64,
}

/// The links of one round, with power and bookkeeping.
#[derive(Debug, Clone)]
pub struct ConnectionPlan {
    pub round: usize,
    pub phase: Phase,
    pub links: Vec<PlannedLink>,
    /// Exchange-phase cluster pairs (by cluster index) that found no
    /// feasible representative link this round.
    pub skipped_cluster_pairs: Vec<(usize, usize)>,
    /// Devices whose summed link power exceeds the budget under this
    /// round's fading; reported, the links still carry their plan.
    pub overloaded_devices: Vec<usize>,
}

impl ConnectionPlan {
    pub fn out_links(&self, device: usize) -> impl Iterator<Item = &PlannedLink> {
        self.links.iter().filter(move |l| l.from == device)
    }

    pub fn in_neighbors(&self, device: usize) -> Vec<usize> {
        let mut v: Vec<usize> =
            self.links.iter().filter(|l| l.to == device).map(|l| l.from).collect();
        v.sort_unstable();
        v
    }

    pub fn is_linked(&self, from: usize, to: usize) -> bool {
        self.links.iter().any(|l| l.from == from && l.to == to)
    }

    /// Transmit energy of the round, `sum power * delay` over links.
    pub fn total_energy_j(&self) -> f64 {
        self.links.iter().map(|l| l.power_w * l.delay_s).sum()
    }
}

/// Builds the links for `round` in the given phase.
///
/// Inner phase: every ordered pair inside each cluster; a singleton cluster
/// has no links. Exchange phase: for each cluster pair, the lowest-id
/// member of each side forms the representative link (both directions);
/// when a candidate pair cannot meet the delay target within both power
/// budgets the next-lowest candidates are tried in lexicographic order, and
/// a pair with no workable candidates is skipped and recorded.
///
/// `payload_bits[d]` is what device `d` would push over each of its links.
/// Per-link powers meet the delay target exactly given the device's fanout;
/// devices whose summed power exceeds the budget under this round's fading
/// are listed in `overloaded_devices`.
pub fn build_connection(
    plan: &ClusterPlan,
    payload_bits: &[f64],
    placement: &DevicePlacement,
    model: &ChannelModel,
    root_seed: u64,
    round: usize,
    phase: Phase,
) -> Result<ConnectionPlan> {
    let m = plan.device_count();
    if payload_bits.len() != m || placement.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "{m} devices, {} payloads, {} placements",
            payload_bits.len(),
            placement.len()
        )));
    }
    model.validate()?;

    // Directed link set as (from, to).
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut skipped_cluster_pairs = Vec::new();
    match phase {
        Phase::Inner => {
            for cluster in plan.clusters() {
                for &i in cluster {
                    for &j in cluster {
                        if i != j {
                            pairs.push((i, j));
                        }
                    }
                }
            }
        }
        Phase::Exchange => {
            let mut fanout = vec![0usize; m];
            for ca in 0..plan.len() {
                for cb in ca + 1..plan.len() {
                    let mut chosen = None;
                    'candidates: for &da in plan.members(ca) {
                        for &db in plan.members(cb) {
                            let gain = channel_gain(placement, da, db, round, root_seed)?;
                            let fits = |dev: usize, bits: f64| -> Result<bool> {
                                let f = fanout[dev] + 1;
                                match crate::wireless::optimal_power(bits, f, gain, model) {
                                    Ok(p) => Ok(p <= model.max_power_w),
                                    Err(Error::InfeasibleLink(_)) => Ok(false),
                                    Err(e) => Err(e),
                                }
                            };
                            if fits(da, payload_bits[da])? && fits(db, payload_bits[db])? {
                                chosen = Some((da, db));
                                break 'candidates;
                            }
                        }
                    }
                    match chosen {
                        Some((da, db)) => {
                            fanout[da] += 1;
                            fanout[db] += 1;
                            pairs.push((da, db));
                            pairs.push((db, da));
                        }
                        None => skipped_cluster_pairs.push((ca, cb)),
                    }
                }
            }
        }
    }

    // Final fanouts decide the bandwidth split and therefore the powers.
    let mut fanout = vec![0usize; m];
    for &(from, _) in &pairs {
        fanout[from] += 1;
    }
    let mut links = Vec::with_capacity(pairs.len());
    for (from, to) in pairs {
        let gain = channel_gain(placement, from, to, round, root_seed)?;
        let bits = payload_bits[from];
        let power_w = crate::wireless::optimal_power(bits, fanout[from], gain, model)?;
        let delay_s =
            crate::wireless::transmission_delay(bits, fanout[from], gain, power_w, model)?;
        links.push(PlannedLink { from, to, payload_bits: bits, gain, power_w, delay_s });
    }

    let mut overloaded_devices = Vec::new();
    for d in 0..m {
        let total: f64 = links.iter().filter(|l| l.from == d).map(|l| l.power_w).sum();
        if total > model.max_power_w {
            overloaded_devices.push(d);
        }
    }

    Ok(ConnectionPlan { round, phase, links, skipped_cluster_pairs, overloaded_devices })
}

fn aggregation_weights(members: &[&AdapterPair], data_weights: &[f64]) -> Result<Vec<f64>> {
    if members.is_empty() {
        return Err(Error::DegenerateInput("aggregation over an empty cluster".into()));
    }
    if data_weights.len() != members.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} members, {} weights",
            members.len(),
            data_weights.len()
        )));
    }
    if data_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument("data weights must be finite and >= 0".into()));
    }
    let total: f64 = data_weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateInput("data weights sum to zero".into()));
    }
    let first = members[0];
    for p in members {
        if p.output_dim() != first.output_dim()
            || p.rank() != first.rank()
            || p.layer_index() != first.layer_index()
        {
            return Err(Error::DimensionMismatch(
                "cluster adapters must share layer index and shape".into(),
            ));
        }
    }
    Ok(data_weights.iter().map(|w| w / total).collect())
}

/// Convex data-weighted aggregate `sum_j alpha_j (B_j . M_j)` with
/// `alpha_j = N_j / sum N` over the cluster. Identical expansions under
/// equal weights come back unchanged; a single member is the identity.
pub fn aggregate_expansions(members: &[&AdapterPair], data_weights: &[f64]) -> Result<Matrix> {
    let alpha = aggregation_weights(members, data_weights)?;
    let mut out = Matrix::zeros(members[0].output_dim(), members[0].rank());
    for (pair, a) in members.iter().zip(alpha) {
        out.axpy(a, pair.expansion())?;
    }
    Ok(out)
}

/// Per-position renormalized aggregate: position `p` averages only the
/// members whose mask is active there, with weights rescaled to sum to one
/// over those contributors. Positions held by a single member pass through
/// unchanged; positions held by nobody stay zero.
pub fn blend_expansions(members: &[&AdapterPair], data_weights: &[f64]) -> Result<Matrix> {
    let alpha = aggregation_weights(members, data_weights)?;
    let d = members[0].output_dim();
    let r = members[0].rank();
    let mut out = Matrix::zeros(d, r);
    for p in 0..d * r {
        let mut num = 0.0;
        let mut den = 0.0;
        for (pair, a) in members.iter().zip(&alpha) {
            if pair.mask()[p] {
                num += a * pair.expansion().data()[p];
                den += a;
            }
        }
        if den > 0.0 {
            out.data_mut()[p] = num / den;
        }
    }
    Ok(out)
}
