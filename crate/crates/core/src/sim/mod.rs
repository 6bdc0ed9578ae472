//! The end-to-end experiment engine.
//!
//! A run builds a frozen tanh stack, synthetic tasks and per-device data,
//! then executes the configured method for a fixed number of rounds and
//! logs one [`metrics::RoundMetrics`] row per round. Everything is
//! deterministic given the root seed: every random draw flows through
//! [`crate::rng::derive_seed`] with a documented domain string, so reruns
//! are byte-identical and methods sharing a seed see identical data.
//!
//! Seed domains used here: `base-layer`, `task-mean`, `delta-left`,
//! `delta-right` (task generation), `train-data`, `eval-data`,
//! `probe-data` (sampling), `projection` (per-device adapters),
//! `shared-projection` (the shared-projection baseline), `placement`,
//! `fading` (radio), and `gossip-links` (baseline connectivity).
//!
//! The clustered method's round order is: local updates; bound check on
//! the pre-aggregation state; inner-cluster aggregation (bank refresh and
//! trainable feedback); every few rounds a cross-cluster exchange; then
//! evaluation. Evaluation always reads the adapter banks, never the raw
//! trainable state, so what is measured is exactly what a peer would see.

pub mod metrics;
pub mod tasks;

use std::collections::BTreeSet;
use std::time::Instant;

use crate::adapter::{
    local_update, moe_stack_forward, tanh_stack_gradients, tanh_stack_loss, AdapterBank,
    AdapterPair, BankEntry, Batch, FrozenStack, MaskSelect, TopKSelect,
};
use crate::collision::{collision_rate, mean_product_norm, theorem1_check};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, Matrix};
use crate::rng::{derive_seed, Rng};
use crate::sparsity::{allocate_sparsity, layer_entropies, probe_covariance, CovarianceMode};
use crate::topology::{
    aggregate_expansions, agnes_cluster, blend_expansions, build_connection, ClusterConfig,
    ClusterPlan, MergeStep, Phase, PlannedLink,
};
use crate::wireless::{channel_gain, optimal_power, ChannelModel, DevicePlacement};

use metrics::{RoundMetrics, RunScore};
use tasks::{
    build_base_stack, generate_tasks, sample_batch, sample_inputs, TaskDefinition, TaskGenConfig,
};

/// Training and exchange scheme of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Entropy-budgeted sparse adapters, collision-capped clusters,
    /// bank-based mixture serving.
    Proposed,
    /// Same mechanics with every device forced into one cluster.
    ProposedSingleCluster,
    /// Dense low-rank adapters, both factors trained and transmitted,
    /// random connections, full replacement averaging.
    LoraBaseline,
    /// One shared frozen projection, fixed uniform sparsity, random
    /// connections, per-position averaging into a full expansion.
    LoriBaseline,
    /// Isolated per-device training; evaluation routes each task to the
    /// lowest-id device trained on it. Upper reference.
    HardRoutingOracle,
    /// Every base weight trainable, full-weight averaging over random
    /// connections. Interference reference.
    FullFinetune,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::ProposedSingleCluster => "proposed_single_cluster",
            Method::LoraBaseline => "lora_baseline",
            Method::LoriBaseline => "lori_baseline",
            Method::HardRoutingOracle => "hard_routing_oracle",
            Method::FullFinetune => "full_finetune",
        }
    }

    pub fn parse(name: &str) -> Result<Method> {
        Method::all()
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{name}'")))
    }

    pub fn all() -> [Method; 6] {
        [
            Method::Proposed,
            Method::ProposedSingleCluster,
            Method::LoraBaseline,
            Method::LoriBaseline,
            Method::HardRoutingOracle,
            Method::FullFinetune,
        ]
    }
}

/// How trainable positions are budgeted across layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparsityMode {
    /// Data-driven: a global position budget split by spectral entropy.
    Entropy { budget: usize },
    /// The same rate everywhere; exact popcount `ceil(rate * d * r)`.
    Uniform { rate: f64 },
}

/// How much of a cluster's aggregate each bank entry carries at serving
/// time. Training feedback is unaffected; this only scales the stored
/// entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryAttribution {
    /// Entries carry the convex cluster mean: with two devices per task the
    /// matched entries sum back to full task strength, at the price of
    /// full-strength interference from mismatched entries.
    ClusterMean,
    /// Entries carry the cluster sum divided by the device count, so the
    /// whole bank sums to the global average: mismatched entries shrink by
    /// the cluster-to-population ratio, matched ones shrink with them.
    GlobalFraction,
}

impl EntryAttribution {
    pub fn name(self) -> &'static str {
        match self {
            EntryAttribution::ClusterMean => "cluster-mean",
            EntryAttribution::GlobalFraction => "global-fraction",
        }
    }

    pub fn parse(s: &str) -> Result<EntryAttribution> {
        match s {
            "cluster-mean" => Ok(EntryAttribution::ClusterMean),
            "global-fraction" => Ok(EntryAttribution::GlobalFraction),
            other => Err(Error::InvalidArgument(format!(
                "unknown entry attribution '{other}' (expected cluster-mean or global-fraction)"
            ))),
        }
    }
}

/// Full description of one run. `Default` gives the desk-scale setup:
/// 8 devices, 4 tasks, a 4-layer width-32 stack with rank-8 adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub devices: usize,
    pub tasks: usize,
    pub rounds: usize,
    pub seed: u64,

    /// Square layer width of the frozen stack (input and output).
    pub width: usize,
    pub depth: usize,
    /// Adapter rank r.
    pub rank: usize,

    /// Rank of each task's ground-truth delta.
    pub true_rank: usize,
    /// Frobenius norm of each per-layer delta.
    pub delta_scale: f64,
    /// Norm of the task input means (task separation strength).
    pub input_shift: f64,
    /// Input noise standard deviation around the task mean.
    pub input_noise_std: f64,
    /// Label noise standard deviation.
    pub noise_std: f64,
    /// Training samples per device (one full-batch update per round).
    pub train_samples: usize,
    /// Eval samples per task.
    pub eval_samples: usize,
    /// Probe samples per device for refinement and allocation.
    pub probe_samples: usize,
    pub learning_rate: f64,

    pub sparsity_mode: SparsityMode,
    pub covariance_mode: CovarianceMode,
    /// Mixture components kept per bank entry at evaluation.
    pub top_k: usize,
    pub refine_projection: bool,
    /// Serving-time scale of stored bank entries.
    pub entry_attribution: EntryAttribution,
    /// Uniform sparsity rate of the shared-projection baseline.
    pub lori_sparsity: f64,

    pub cluster: ClusterConfig,
    pub channel: ChannelModel,
    /// Radius of the disc the devices are placed on.
    pub area_radius_m: f64,
    /// Random peers per device per round for the baselines.
    pub baseline_fanout: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Proposed,
            devices: 8,
            tasks: 4,
            rounds: 200,
            seed: 1,
            width: 16,
            depth: 2,
            rank: 8,
            true_rank: 2,
            delta_scale: 2.0,
            input_shift: 4.0,
            input_noise_std: 1.0,
            noise_std: 0.05,
            train_samples: 128,
            eval_samples: 64,
            probe_samples: 64,
            learning_rate: 0.05,
            sparsity_mode: SparsityMode::Entropy { budget: 64 },
            covariance_mode: CovarianceMode::Batch,
            top_k: 8,
            refine_projection: true,
            entry_attribution: EntryAttribution::GlobalFraction,
            lori_sparsity: 0.40,
            cluster: ClusterConfig::default(),
            channel: ChannelModel {
                bandwidth_hz: 1e6,
                noise_power_w: 1e-13,
                max_power_w: 0.1,
                delay_target_s: 0.001,
                bits_per_parameter: 32,
            },
            area_radius_m: 25.0,
            baseline_fanout: 2,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.devices == 0 {
            return Err(Error::InvalidArgument("need at least one device".into()));
        }
        if self.tasks == 0 || self.tasks > self.width {
            return Err(Error::InvalidArgument(format!(
                "task count must lie in [1, width={}], got {}",
                self.width, self.tasks
            )));
        }
        if self.method == Method::HardRoutingOracle && self.devices < self.tasks {
            return Err(Error::InvalidArgument(
                "routing needs at least one device per task".into(),
            ));
        }
        if self.width == 0 || self.depth == 0 {
            return Err(Error::InvalidArgument("stack dimensions must be positive".into()));
        }
        if self.rank == 0 || self.rank > self.width {
            return Err(Error::InvalidArgument(format!(
                "rank must lie in [1, {}], got {}",
                self.width, self.rank
            )));
        }
        if self.true_rank == 0 || self.true_rank > self.width {
            return Err(Error::InvalidArgument("true rank out of range".into()));
        }
        if self.train_samples == 0 || self.eval_samples == 0 || self.probe_samples == 0 {
            return Err(Error::InvalidArgument("sample counts must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be at least 1".into()));
        }
        if let SparsityMode::Uniform { rate } = self.sparsity_mode {
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "uniform sparsity must lie in (0, 1], got {rate}"
                )));
            }
        }
        if !(self.lori_sparsity > 0.0 && self.lori_sparsity <= 1.0) {
            return Err(Error::InvalidArgument("lori sparsity must lie in (0, 1]".into()));
        }
        if self.cluster.exchange_period_rounds == 0 {
            return Err(Error::InvalidArgument("exchange period must be >= 1".into()));
        }
        if self.baseline_fanout == 0 {
            return Err(Error::InvalidArgument("baseline fanout must be >= 1".into()));
        }
        if !(self.area_radius_m > 0.0) {
            return Err(Error::InvalidArgument("area radius must be positive".into()));
        }
        self.channel.validate()
    }

    fn gen_config(&self) -> TaskGenConfig {
        TaskGenConfig {
            tasks: self.tasks,
            true_rank: self.true_rank,
            delta_scale: self.delta_scale,
            input_shift: self.input_shift,
            input_noise_std: self.input_noise_std,
        }
    }
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub metrics: Vec<RoundMetrics>,
    /// Final eval loss per task (meaned over devices).
    pub final_task_losses: Vec<f64>,
    pub final_avg_loss: f64,
    /// Mean trainable parameters per device.
    pub trainable_params: f64,
    /// Per-device value payload bits for one aggregation link.
    pub payload_bits: f64,
    /// The cluster plan, for methods that build one.
    pub plan: Option<ClusterPlan>,
    /// Final per-device adapter banks, for methods that serve through
    /// banks. Feed these to [`interference_probe`].
    pub banks: Option<Vec<AdapterBank>>,
}

impl RunOutcome {
    pub fn score(&self) -> RunScore {
        RunScore {
            method: self.method.name().to_string(),
            seed: self.seed,
            trainable_params: self.trainable_params,
            payload_bits: self.payload_bits,
            final_task_losses: self.final_task_losses.clone(),
            final_avg_loss: self.final_avg_loss,
        }
    }
}

// ---------------------------------------------------------------------------
// Shared environment
// ---------------------------------------------------------------------------

/// Data and model shared by every method under one seed.
struct Env {
    base: FrozenStack,
    tasks: Vec<TaskDefinition>,
    device_tasks: Vec<usize>,
    train: Vec<Batch>,
    eval: Vec<Batch>,
    placement: DevicePlacement,
}

fn build_env(cfg: &ExperimentConfig) -> Result<Env> {
    let base = build_base_stack(cfg.width, cfg.depth, cfg.seed)?;
    let tasks = generate_tasks(&base, &cfg.gen_config(), cfg.seed)?;
    let device_tasks: Vec<usize> = (0..cfg.devices).map(|d| d % cfg.tasks).collect();
    let mut train = Vec::with_capacity(cfg.devices);
    for d in 0..cfg.devices {
        train.push(sample_batch(
            &tasks[device_tasks[d]],
            cfg.train_samples,
            cfg.noise_std,
            derive_seed(cfg.seed, "train-data", &[d as u64]),
        )?);
    }
    let mut eval = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        eval.push(sample_batch(
            &tasks[t],
            cfg.eval_samples,
            cfg.noise_std,
            derive_seed(cfg.seed, "eval-data", &[t as u64]),
        )?);
    }
    let placement = DevicePlacement::generate(
        cfg.devices,
        cfg.area_radius_m,
        derive_seed(cfg.seed, "placement", &[]),
    )?;
    Ok(Env { base, tasks, device_tasks, train, eval, placement })
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

fn squared_error(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum()
}

/// Mean over devices of each task's plain-forward eval loss.
fn eval_effective(per_device: &[Vec<Matrix>], env: &Env) -> Result<(Vec<f64>, f64)> {
    let mut task_losses = vec![0.0; env.eval.len()];
    for weights in per_device {
        for (t, batch) in env.eval.iter().enumerate() {
            task_losses[t] += tanh_stack_loss(weights, batch)? / per_device.len() as f64;
        }
    }
    let avg = task_losses.iter().sum::<f64>() / task_losses.len() as f64;
    Ok((task_losses, avg))
}

/// Mean over devices of each task's mixture-forward eval loss.
fn eval_banks(banks: &[AdapterBank], env: &Env, top_k: usize) -> Result<(Vec<f64>, f64)> {
    let mut task_losses = vec![0.0; env.eval.len()];
    for bank in banks {
        for (t, batch) in env.eval.iter().enumerate() {
            let mut loss = 0.0;
            for row in 0..batch.len() {
                let pred = moe_stack_forward(
                    bank,
                    &env.base,
                    batch.inputs.row(row),
                    top_k,
                    TopKSelect::Magnitude,
                )?;
                loss += squared_error(&pred, batch.targets.row(row));
            }
            task_losses[t] += loss / batch.len() as f64 / banks.len() as f64;
        }
    }
    let avg = task_losses.iter().sum::<f64>() / task_losses.len() as f64;
    Ok((task_losses, avg))
}

/// Fails the run when a metric that should be finite is not, so divergence
/// surfaces as an error naming the module and round instead of NaN rows.
fn guard_finite(row: &RoundMetrics, module: &'static str) -> Result<()> {
    let bad = if !row.train_loss.is_finite() {
        Some(format!("training loss is {}", row.train_loss))
    } else if !row.avg_loss.is_finite() {
        Some(format!("average eval loss is {}", row.avg_loss))
    } else if let Some(t) = row.task_losses.iter().position(|l| !l.is_finite()) {
        Some(format!("task {t} eval loss is {}", row.task_losses[t]))
    } else if !row.cumulative_energy_j.is_finite() {
        Some(format!("cumulative energy is {} J", row.cumulative_energy_j))
    } else {
        None
    };
    match bad {
        Some(what) => Err(Error::Numeric { module, round: row.round, what }),
        None => Ok(()),
    }
}

fn effective_weights(base: &FrozenStack, adapters: &[AdapterPair]) -> Result<Vec<Matrix>> {
    base.layers().iter().zip(adapters).map(|(w0, pair)| w0.add(&pair.composed())).collect()
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Runs one experiment under the configured method.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let env = build_env(cfg)?;
    match cfg.method {
        Method::Proposed => run_clustered(cfg, &env, false),
        Method::ProposedSingleCluster => run_clustered(cfg, &env, true),
        Method::LoraBaseline => run_dense_gossip(cfg, &env, DenseKind::LowRank),
        Method::FullFinetune => run_dense_gossip(cfg, &env, DenseKind::FullWeights),
        Method::LoriBaseline => run_shared_projection(cfg, &env),
        Method::HardRoutingOracle => run_routed_oracle(cfg, &env),
    }
}

/// [`run_experiment`] restricted to the comparison methods.
pub fn run_baseline(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    if cfg.method == Method::Proposed {
        return Err(Error::InvalidArgument(
            "run_baseline expects a method other than the proposed one".into(),
        ));
    }
    run_experiment(cfg)
}

// ---------------------------------------------------------------------------
// Clustered sparse adapters (the proposed method and its ablation)
// ---------------------------------------------------------------------------

/// Per-device state prepared before the round loop.
struct SparseSetup {
    /// One adapter per layer per device, refined and masked.
    adapters: Vec<Vec<AdapterPair>>,
    /// Realized sparsity per device per layer.
    sparsities: Vec<Vec<f64>>,
    /// Active positions per device (sum over layers).
    payload_params: Vec<usize>,
    plan: ClusterPlan,
}

/// Builds adapters, refines projections, allocates sparsity, masks, and
/// clusters. Shared by the real run and the dry-run planner.
fn setup_sparse(cfg: &ExperimentConfig, env: &Env, single_cluster: bool) -> Result<SparseSetup> {
    let d = cfg.width;
    let k = cfg.width;
    let caps = vec![d * cfg.rank; cfg.depth];

    let mut adapters: Vec<Vec<AdapterPair>> = Vec::with_capacity(cfg.devices);
    let mut counts_per_device: Vec<Vec<usize>> = Vec::with_capacity(cfg.devices);
    for dev in 0..cfg.devices {
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            layers.push(AdapterPair::init(
                l,
                d,
                k,
                cfg.rank,
                derive_seed(cfg.seed, "projection", &[dev as u64, l as u64]),
            )?);
        }
        let probe_inputs = sample_inputs(
            &env.tasks[env.device_tasks[dev]],
            cfg.probe_samples,
            derive_seed(cfg.seed, "probe-data", &[dev as u64]),
        )?;
        let probes = probe_covariance(&env.base, &probe_inputs, cfg.covariance_mode)?;
        if cfg.refine_projection {
            for (pair, probe) in layers.iter_mut().zip(&probes) {
                pair.refine_projection(&probe.mean)?;
            }
        }
        let counts = match cfg.sparsity_mode {
            SparsityMode::Entropy { budget } => {
                let entropies = layer_entropies(&env.base, &probes)?;
                allocate_sparsity(&entropies, &caps, budget)?.counts
            }
            SparsityMode::Uniform { rate } => caps
                .iter()
                .map(|&cap| ((rate * cap as f64).ceil() as usize).clamp(1, cap))
                .collect(),
        };
        adapters.push(layers);
        counts_per_device.push(counts);
    }

    // One mask-free update gives the magnitudes the masks are cut from.
    for dev in 0..cfg.devices {
        local_update(&mut adapters[dev], &env.base, &env.train[dev], cfg.learning_rate)?;
        for (l, pair) in adapters[dev].iter_mut().enumerate() {
            let keep = counts_per_device[dev][l].max(1);
            pair.build_mask_count(keep, MaskSelect::Magnitude)?;
        }
    }

    let sparsities: Vec<Vec<f64>> =
        adapters.iter().map(|ls| ls.iter().map(|p| p.sparsity()).collect()).collect();
    let payload_params: Vec<usize> =
        adapters.iter().map(|ls| ls.iter().map(|p| p.active_count()).sum()).collect();

    // A device whose own payload cannot meet the delay target over a single
    // link can never participate; fail early and name the constraint.
    let bpp = cfg.channel.bits_per_parameter as f64;
    for (dev, &params) in payload_params.iter().enumerate() {
        let exponent =
            params as f64 * bpp / (cfg.channel.bandwidth_hz * cfg.channel.delay_target_s);
        if exponent > crate::wireless::MAX_RATE_EXPONENT {
            return Err(Error::InfeasibleLink(format!(
                "device {dev}: payload {params} parameters x {bpp} bits cannot meet the \
                 {}s delay target over {} Hz on any single link",
                cfg.channel.delay_target_s, cfg.channel.bandwidth_hz
            )));
        }
    }

    let plan = if single_cluster {
        ClusterPlan::single_cluster(cfg.devices)?
    } else {
        agnes_cluster(
            &sparsities,
            &payload_params,
            &env.placement,
            &cfg.channel,
            cfg.seed,
            &cfg.cluster,
        )?
    };

    Ok(SparseSetup { adapters, sparsities, payload_params, plan })
}

fn run_clustered(cfg: &ExperimentConfig, env: &Env, single_cluster: bool) -> Result<RunOutcome> {
    let SparseSetup { mut adapters, sparsities, payload_params, plan } =
        setup_sparse(cfg, env, single_cluster)?;
    let m = cfg.devices;
    let depth = cfg.depth;
    let bpp = cfg.channel.bits_per_parameter;
    let weights = vec![cfg.train_samples as f64; m];

    // Static masks make the collision picture constant over the run.
    let mut max_collision: f64 = 0.0;
    for cluster in plan.clusters() {
        for l in 0..depth {
            let s: Vec<f64> = cluster.iter().map(|&dev| sparsities[dev][l]).collect();
            max_collision = max_collision.max(collision_rate(&s)?);
        }
    }

    let payload_bits: Vec<f64> =
        payload_params.iter().map(|&p| (p as u64 * bpp as u64) as f64).collect();
    let mean_payload_bits = payload_bits.iter().sum::<f64>() / m as f64;
    let projection_cost_bits = (depth * cfg.rank * cfg.width) as u64 * bpp as u64;

    let mut banks: Vec<AdapterBank> = vec![AdapterBank::new(); m];
    // Origins whose projection each cluster has already paid for.
    let mut known_origins: Vec<BTreeSet<usize>> =
        plan.clusters().iter().map(|c| c.iter().copied().collect()).collect();

    let mut g_env = vec![0.0f64; depth];
    let mut p_env = vec![0.0f64; depth];
    let mut cumulative_energy = 0.0;
    let mut rows: Vec<RoundMetrics> = Vec::with_capacity(cfg.rounds);

    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let mut projection_bits = 0u64;
        let mut exchange_bits = 0u64;
        let mut total_bits = 0u64;
        let mut links_skipped = 0usize;

        // Local updates on each device's own masked adapters.
        let mut train_loss = 0.0;
        for dev in 0..m {
            let stats =
                local_update(&mut adapters[dev], &env.base, &env.train[dev], cfg.learning_rate)?;
            train_loss += stats.loss / m as f64;
            for (l, g) in stats.grad_projection_norms.iter().enumerate() {
                g_env[l] = g_env[l].max(*g);
            }
        }

        // Bound check on the post-update, pre-aggregation state.
        let mut bound_lhs = 0.0;
        let mut bound_rhs = 0.0;
        let mut bound_holds = true;
        let mut worst_ratio = -1.0f64;
        for cluster in plan.clusters() {
            for l in 0..depth {
                let members: Vec<&AdapterPair> =
                    cluster.iter().map(|&dev| &adapters[dev][l]).collect();
                p_env[l] = p_env[l].max(mean_product_norm(&members)?);
                let estimate = theorem1_check(&members, g_env[l], p_env[l])?;
                bound_holds &= estimate.holds;
                let ratio = if estimate.rhs > 0.0 {
                    estimate.lhs / estimate.rhs
                } else if estimate.lhs > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                };
                if ratio > worst_ratio {
                    worst_ratio = ratio;
                    bound_lhs = estimate.lhs;
                    bound_rhs = estimate.rhs;
                }
            }
        }

        // Inner aggregation: refresh bank entries with the attributed
        // aggregate, feed the renormalized blend back into the trainable
        // state. Both read the same pre-aggregation snapshot. The entry
        // scale follows the configured attribution: the convex cluster mean
        // keeps each task's signal near full strength, while the global
        // fraction trades matched strength for proportionally weaker
        // interference from mismatched entries.
        for cluster in plan.clusters() {
            let alpha: Vec<f64> = cluster.iter().map(|&dev| weights[dev]).collect();
            let entry_scale = match cfg.entry_attribution {
                EntryAttribution::ClusterMean => 1.0,
                EntryAttribution::GlobalFraction => cluster.len() as f64 / m as f64,
            };
            let mut aggregates = Vec::with_capacity(depth);
            let mut blends = Vec::with_capacity(depth);
            for l in 0..depth {
                let members: Vec<&AdapterPair> =
                    cluster.iter().map(|&dev| &adapters[dev][l]).collect();
                aggregates.push(aggregate_expansions(&members, &alpha)?);
                blends.push(blend_expansions(&members, &alpha)?);
            }
            // Bank entries: the aggregate attributed through each origin's
            // own mask, projections included.
            let mut entries = Vec::with_capacity(cluster.len());
            for &origin in cluster {
                let mut entry_adapters = Vec::with_capacity(depth);
                for l in 0..depth {
                    let mut pair = adapters[origin][l].clone();
                    pair.replace_expansion(&aggregates[l].scaled(entry_scale))?;
                    entry_adapters.push(pair);
                }
                entries.push(BankEntry { origin_device: origin, adapters: entry_adapters });
            }
            for &dev in cluster {
                for entry in &entries {
                    banks[dev].insert(entry.clone());
                }
            }
            for &dev in cluster {
                for l in 0..depth {
                    adapters[dev][l].replace_expansion(&blends[l])?;
                }
            }
            // First aggregation round also moves each member's projection
            // to its peers, paid once per cluster and origin.
            if round == 1 && cluster.len() > 1 {
                projection_bits += cluster.len() as u64 * projection_cost_bits;
            }
        }

        // Radio accounting for the inner mesh.
        let inner = build_connection(
            &plan,
            &payload_bits,
            &env.placement,
            &cfg.channel,
            cfg.seed,
            round,
            Phase::Inner,
        )?;
        cumulative_energy += inner.total_energy_j();
        for link in &inner.links {
            total_bits += link.payload_bits as u64;
        }

        // Periodic cross-cluster exchange of aggregated bank entries.
        if plan.len() > 1 && round % cfg.cluster.exchange_period_rounds == 0 {
            let bank_bits: Vec<f64> = (0..m)
                .map(|dev| {
                    plan.members(plan.cluster_of(dev)).iter().map(|&j| payload_bits[j]).sum()
                })
                .collect();
            let exchange = build_connection(
                &plan,
                &bank_bits,
                &env.placement,
                &cfg.channel,
                cfg.seed,
                round,
                Phase::Exchange,
            )?;
            links_skipped += exchange.skipped_cluster_pairs.len();
            cumulative_energy += exchange.total_energy_j();
            for link in &exchange.links {
                let from_cluster = plan.cluster_of(link.from);
                let to_cluster = plan.cluster_of(link.to);
                exchange_bits += link.payload_bits as u64;
                total_bits += link.payload_bits as u64;
                // The receiving cluster adopts the sender cluster's
                // current entries, every member alike.
                let mut moved = Vec::new();
                for &origin in plan.members(from_cluster) {
                    if let Some(entry) = banks[link.from].get(origin) {
                        moved.push(entry.clone());
                    }
                    if known_origins[to_cluster].insert(origin) {
                        projection_bits += projection_cost_bits;
                    }
                }
                for &dev in plan.members(to_cluster) {
                    for entry in &moved {
                        banks[dev].insert(entry.clone());
                    }
                }
            }
        }

        let (task_losses, avg_loss) = eval_banks(&banks, env, cfg.top_k)?;
        let row = RoundMetrics {
            round,
            train_loss,
            task_losses,
            avg_loss,
            payload_bits: mean_payload_bits,
            projection_bits,
            exchange_bits,
            total_bits,
            cumulative_energy_j: cumulative_energy,
            max_collision_rate: max_collision,
            bound_lhs,
            bound_rhs,
            bound_holds,
            links_skipped,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        guard_finite(&row, "sim::run_clustered")?;
        rows.push(row);
    }

    let (final_task_losses, final_avg_loss) = match rows.last() {
        Some(last) => (last.task_losses.clone(), last.avg_loss),
        None => eval_banks(&banks, env, cfg.top_k)?,
    };
    let trainable_params = payload_params.iter().map(|&p| p as f64).sum::<f64>() / m as f64;
    Ok(RunOutcome {
        method: cfg.method,
        seed: cfg.seed,
        metrics: rows,
        final_task_losses,
        final_avg_loss,
        trainable_params,
        payload_bits: mean_payload_bits,
        plan: Some(plan),
        banks: Some(banks),
    })
}

// ---------------------------------------------------------------------------
// Random-gossip baselines (dense low-rank and full fine-tuning)
// ---------------------------------------------------------------------------

enum DenseKind {
    LowRank,
    FullWeights,
}

/// Undirected random links for one baseline round, power-checked.
struct GossipRound {
    /// Directed links, both directions of every kept pair.
    links: Vec<(usize, usize)>,
    energy_j: f64,
    dropped: usize,
}

fn random_gossip(
    cfg: &ExperimentConfig,
    placement: &DevicePlacement,
    payload_bits: f64,
    round: usize,
) -> Result<GossipRound> {
    let m = cfg.devices;
    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    if m > 1 {
        let mut rng = Rng::new(derive_seed(cfg.seed, "gossip-links", &[round as u64]));
        let fanout = cfg.baseline_fanout.min(m - 1);
        for i in 0..m {
            let mut picked = BTreeSet::new();
            while picked.len() < fanout {
                let mut j = rng.below(m as u64 - 1) as usize;
                if j >= i {
                    j += 1;
                }
                picked.insert(j);
            }
            for j in picked {
                pairs.insert((i.min(j), i.max(j)));
            }
        }
    }
    let mut fanouts = vec![0usize; m];
    for &(a, b) in &pairs {
        fanouts[a] += 1;
        fanouts[b] += 1;
    }
    let mut links = Vec::new();
    let mut energy = 0.0;
    let mut dropped = 0;
    for (a, b) in pairs {
        let gain = channel_gain(placement, a, b, round, cfg.seed)?;
        let power = |dev: usize| -> Result<Option<f64>> {
            match optimal_power(payload_bits, fanouts[dev], gain, &cfg.channel) {
                Ok(p) if p <= cfg.channel.max_power_w => Ok(Some(p)),
                Ok(_) => Ok(None),
                Err(Error::InfeasibleLink(_)) => Ok(None),
                Err(e) => Err(e),
            }
        };
        match (power(a)?, power(b)?) {
            (Some(pa), Some(pb)) => {
                energy += (pa + pb) * cfg.channel.delay_target_s;
                links.push((a, b));
                links.push((b, a));
            }
            _ => dropped += 1,
        }
    }
    Ok(GossipRound { links, energy_j: energy, dropped })
}

/// Mean of in-neighbor states (self included), full replacement.
fn gossip_mean(states: &[Vec<Matrix>], links: &[(usize, usize)]) -> Result<Vec<Vec<Matrix>>> {
    let m = states.len();
    let mut next = Vec::with_capacity(m);
    for dev in 0..m {
        let mut sources = vec![dev];
        sources.extend(links.iter().filter(|(_, to)| *to == dev).map(|(from, _)| *from));
        let scale = 1.0 / sources.len() as f64;
        let mut mixed = Vec::with_capacity(states[dev].len());
        for l in 0..states[dev].len() {
            let mut acc = Matrix::zeros(states[dev][l].rows(), states[dev][l].cols());
            for &s in &sources {
                acc.axpy(scale, &states[s][l])?;
            }
            mixed.push(acc);
        }
        next.push(mixed);
    }
    Ok(next)
}

fn run_dense_gossip(cfg: &ExperimentConfig, env: &Env, kind: DenseKind) -> Result<RunOutcome> {
    let m = cfg.devices;
    let depth = cfg.depth;
    let (d, k, r) = (cfg.width, cfg.width, cfg.rank);
    let bpp = cfg.channel.bits_per_parameter as u64;

    // Trainable state. Low-rank: per-layer (B, A); full: the weights.
    let mut expansions: Vec<Vec<Matrix>> = Vec::new();
    let mut projections: Vec<Vec<Matrix>> = Vec::new();
    let mut weights: Vec<Vec<Matrix>> = Vec::new();
    match kind {
        DenseKind::LowRank => {
            // 1/sqrt(k) is the usual fan-in scale for the down projection;
            // it keeps the composed update `B dA + dB A` at the same
            // magnitude as a plain dense step, with or without averaging.
            let init_scale = 1.0 / (k as f64).sqrt();
            for dev in 0..m {
                expansions.push(vec![Matrix::zeros(d, r); depth]);
                projections.push(
                    (0..depth)
                        .map(|l| {
                            gaussian_matrix(
                                r,
                                k,
                                derive_seed(cfg.seed, "projection", &[dev as u64, l as u64]),
                            )
                            .scaled(init_scale)
                        })
                        .collect(),
                );
            }
        }
        DenseKind::FullWeights => {
            for _ in 0..m {
                weights.push(env.base.layers().to_vec());
            }
        }
    }

    let payload_params: u64 = match kind {
        DenseKind::LowRank => (depth * (d * r + r * k)) as u64,
        DenseKind::FullWeights => (depth * d * k) as u64,
    };
    let payload_bits = (payload_params * bpp) as f64;
    let trainable_params = payload_params as f64;

    let effective = |expans: &[Matrix], projs: &[Matrix]| -> Result<Vec<Matrix>> {
        env.base
            .layers()
            .iter()
            .zip(expans.iter().zip(projs))
            .map(|(w0, (b, a))| w0.add(&b.matmul(a)?))
            .collect()
    };

    let mut cumulative_energy = 0.0;
    let mut rows = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let mut train_loss = 0.0;
        match kind {
            DenseKind::LowRank => {
                for dev in 0..m {
                    let eff = effective(&expansions[dev], &projections[dev])?;
                    let (loss, grads) = tanh_stack_gradients(&eff, &env.train[dev])?;
                    train_loss += loss / m as f64;
                    for l in 0..depth {
                        let db = grads[l].matmul(&projections[dev][l].transpose())?;
                        let da = expansions[dev][l].transpose().matmul(&grads[l])?;
                        expansions[dev][l].axpy(-cfg.learning_rate, &db)?;
                        projections[dev][l].axpy(-cfg.learning_rate, &da)?;
                    }
                }
            }
            DenseKind::FullWeights => {
                for dev in 0..m {
                    let (loss, grads) = tanh_stack_gradients(&weights[dev], &env.train[dev])?;
                    train_loss += loss / m as f64;
                    for l in 0..depth {
                        weights[dev][l].axpy(-cfg.learning_rate, &grads[l])?;
                    }
                }
            }
        }

        let gossip = random_gossip(cfg, &env.placement, payload_bits, round)?;
        cumulative_energy += gossip.energy_j;
        let total_bits = gossip.links.len() as u64 * payload_params * bpp;
        match kind {
            DenseKind::LowRank => {
                expansions = gossip_mean(&expansions, &gossip.links)?;
                projections = gossip_mean(&projections, &gossip.links)?;
            }
            DenseKind::FullWeights => {
                weights = gossip_mean(&weights, &gossip.links)?;
            }
        }

        let served: Vec<Vec<Matrix>> = match kind {
            DenseKind::LowRank => (0..m)
                .map(|dev| effective(&expansions[dev], &projections[dev]))
                .collect::<Result<_>>()?,
            DenseKind::FullWeights => weights.clone(),
        };
        let (task_losses, avg_loss) = eval_effective(&served, env)?;
        let row = RoundMetrics {
            round,
            train_loss,
            task_losses,
            avg_loss,
            payload_bits,
            projection_bits: 0,
            exchange_bits: 0,
            total_bits,
            cumulative_energy_j: cumulative_energy,
            max_collision_rate: 0.0,
            bound_lhs: 0.0,
            bound_rhs: 0.0,
            bound_holds: true,
            links_skipped: gossip.dropped,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        guard_finite(&row, "sim::run_dense_gossip")?;
        rows.push(row);
    }

    let (final_task_losses, final_avg_loss) = match rows.last() {
        Some(last) => (last.task_losses.clone(), last.avg_loss),
        None => {
            let served: Vec<Vec<Matrix>> = match kind {
                DenseKind::LowRank => (0..m)
                    .map(|dev| effective(&expansions[dev], &projections[dev]))
                    .collect::<Result<_>>()?,
                DenseKind::FullWeights => weights.clone(),
            };
            eval_effective(&served, env)?
        }
    };
    Ok(RunOutcome {
        method: cfg.method,
        seed: cfg.seed,
        metrics: rows,
        final_task_losses,
        final_avg_loss,
        trainable_params,
        payload_bits,
        plan: None,
        banks: None,
    })
}

// ---------------------------------------------------------------------------
// Shared-projection sparse baseline
// ---------------------------------------------------------------------------

fn run_shared_projection(cfg: &ExperimentConfig, env: &Env) -> Result<RunOutcome> {
    let m = cfg.devices;
    let depth = cfg.depth;
    let (d, k, r) = (cfg.width, cfg.width, cfg.rank);
    let bpp = cfg.channel.bits_per_parameter as u64;

    // One frozen projection for everyone: cross-device orthogonality is
    // deliberately absent, which is the point of this baseline. The 1/sqrt(k)
    // scale keeps the expansion gradient step at the same magnitude as a
    // plain dense step.
    let shared: Vec<Matrix> = (0..depth)
        .map(|l| {
            gaussian_matrix(r, k, derive_seed(cfg.seed, "shared-projection", &[l as u64]))
                .scaled(1.0 / (k as f64).sqrt())
        })
        .collect();

    let keep = ((cfg.lori_sparsity * (d * r) as f64).ceil() as usize).clamp(1, d * r);
    let payload_params = (depth * keep) as u64;
    let payload_bits = (payload_params * bpp) as f64;

    let effective = |expans: &[Matrix]| -> Result<Vec<Matrix>> {
        env.base
            .layers()
            .iter()
            .zip(expans.iter().zip(&shared))
            .map(|(w0, (b, a))| w0.add(&b.matmul(a)?))
            .collect()
    };

    // Warmup trains dense for one step; masks keep the strongest entries,
    // ties to the lower index. Positions outside the own mask start empty
    // and only ever hold received values.
    let mut expansions: Vec<Vec<Matrix>> = vec![vec![Matrix::zeros(d, r); depth]; m];
    let mut masks: Vec<Vec<Vec<bool>>> = Vec::with_capacity(m);
    for dev in 0..m {
        let eff = effective(&expansions[dev])?;
        let (_, grads) = tanh_stack_gradients(&eff, &env.train[dev])?;
        let mut device_masks = Vec::with_capacity(depth);
        for l in 0..depth {
            let db = grads[l].matmul(&shared[l].transpose())?;
            expansions[dev][l].axpy(-cfg.learning_rate, &db)?;
            let values = expansions[dev][l].data();
            let mut order: Vec<usize> = (0..values.len()).collect();
            order.sort_by(|&x, &y| {
                values[y].abs().partial_cmp(&values[x].abs()).unwrap().then(x.cmp(&y))
            });
            let mut mask = vec![false; values.len()];
            for &i in &order[..keep] {
                mask[i] = true;
            }
            for (i, &keepit) in mask.iter().enumerate() {
                if !keepit {
                    expansions[dev][l].data_mut()[i] = 0.0;
                }
            }
            device_masks.push(mask);
        }
        masks.push(device_masks);
    }

    // The whole population gossips, so the collision picture spans all
    // devices at the uniform rate.
    let rate = keep as f64 / (d * r) as f64;
    let all_rates = vec![rate; m];
    let max_collision = collision_rate(&all_rates)?;

    let mut cumulative_energy = 0.0;
    let mut rows = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let mut train_loss = 0.0;
        for dev in 0..m {
            let eff = effective(&expansions[dev])?;
            let (loss, grads) = tanh_stack_gradients(&eff, &env.train[dev])?;
            train_loss += loss / m as f64;
            for l in 0..depth {
                let db = grads[l].matmul(&shared[l].transpose())?;
                for (i, active) in masks[dev][l].iter().enumerate() {
                    if *active {
                        expansions[dev][l].data_mut()[i] -= cfg.learning_rate * db.data()[i];
                    }
                }
            }
        }

        let gossip = random_gossip(cfg, &env.placement, payload_bits, round)?;
        cumulative_energy += gossip.energy_j;
        let total_bits = gossip.links.len() as u64 * payload_params * bpp;
        // Per-position averaging over whoever holds the position: senders
        // contribute their own masked values only.
        let snapshot = expansions.clone();
        for dev in 0..m {
            let mut contributors = vec![dev];
            contributors.extend(gossip.links.iter().filter(|(_, to)| *to == dev).map(|(f, _)| *f));
            for l in 0..depth {
                for p in 0..d * r {
                    let mut num = 0.0;
                    let mut count = 0usize;
                    for &j in &contributors {
                        if masks[j][l][p] {
                            num += snapshot[j][l].data()[p];
                            count += 1;
                        }
                    }
                    if count > 0 {
                        expansions[dev][l].data_mut()[p] = num / count as f64;
                    }
                }
            }
        }

        let served: Vec<Vec<Matrix>> =
            (0..m).map(|dev| effective(&expansions[dev])).collect::<Result<_>>()?;
        let (task_losses, avg_loss) = eval_effective(&served, env)?;
        let row = RoundMetrics {
            round,
            train_loss,
            task_losses,
            avg_loss,
            payload_bits,
            projection_bits: 0,
            exchange_bits: 0,
            total_bits,
            cumulative_energy_j: cumulative_energy,
            max_collision_rate: max_collision,
            bound_lhs: 0.0,
            bound_rhs: 0.0,
            bound_holds: true,
            links_skipped: gossip.dropped,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        guard_finite(&row, "sim::run_shared_projection")?;
        rows.push(row);
    }

    let (final_task_losses, final_avg_loss) = match rows.last() {
        Some(last) => (last.task_losses.clone(), last.avg_loss),
        None => {
            let served: Vec<Vec<Matrix>> =
                (0..m).map(|dev| effective(&expansions[dev])).collect::<Result<_>>()?;
            eval_effective(&served, env)?
        }
    };
    Ok(RunOutcome {
        method: cfg.method,
        seed: cfg.seed,
        metrics: rows,
        final_task_losses,
        final_avg_loss,
        trainable_params: payload_params as f64,
        payload_bits,
        plan: None,
        banks: None,
    })
}

// ---------------------------------------------------------------------------
// Hard-routing oracle
// ---------------------------------------------------------------------------

fn run_routed_oracle(cfg: &ExperimentConfig, env: &Env) -> Result<RunOutcome> {
    let m = cfg.devices;
    let depth = cfg.depth;
    let (d, k) = (cfg.width, cfg.width);

    let mut adapters: Vec<Vec<AdapterPair>> = Vec::with_capacity(m);
    for dev in 0..m {
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            layers.push(AdapterPair::init(
                l,
                d,
                k,
                cfg.rank,
                derive_seed(cfg.seed, "projection", &[dev as u64, l as u64]),
            )?);
        }
        if cfg.refine_projection {
            let probe_inputs = sample_inputs(
                &env.tasks[env.device_tasks[dev]],
                cfg.probe_samples,
                derive_seed(cfg.seed, "probe-data", &[dev as u64]),
            )?;
            let probes = probe_covariance(&env.base, &probe_inputs, cfg.covariance_mode)?;
            for (pair, probe) in layers.iter_mut().zip(&probes) {
                pair.refine_projection(&probe.mean)?;
            }
        } else {
            // Without a task gate the unit-variance projection would amplify
            // the expansion gradient by a factor of k; a flat gate keeps the
            // step size in line with the gated methods.
            for pair in layers.iter_mut() {
                pair.refine_projection(&vec![1.0; k])?;
            }
        }
        adapters.push(layers);
    }

    // Lowest-id device per task carries that task's routed evaluation.
    let route: Vec<usize> = (0..cfg.tasks)
        .map(|t| env.device_tasks.iter().position(|&task| task == t).expect("validated"))
        .collect();

    let eval_routed = |adapters: &[Vec<AdapterPair>]| -> Result<(Vec<f64>, f64)> {
        let mut task_losses = Vec::with_capacity(cfg.tasks);
        for (t, batch) in env.eval.iter().enumerate() {
            let eff = effective_weights(&env.base, &adapters[route[t]])?;
            task_losses.push(tanh_stack_loss(&eff, batch)?);
        }
        let avg = task_losses.iter().sum::<f64>() / task_losses.len() as f64;
        Ok((task_losses, avg))
    };

    let mut rows = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let mut train_loss = 0.0;
        for dev in 0..m {
            let stats =
                local_update(&mut adapters[dev], &env.base, &env.train[dev], cfg.learning_rate)?;
            train_loss += stats.loss / m as f64;
        }
        let (task_losses, avg_loss) = eval_routed(&adapters)?;
        let row = RoundMetrics {
            round,
            train_loss,
            task_losses,
            avg_loss,
            payload_bits: 0.0,
            projection_bits: 0,
            exchange_bits: 0,
            total_bits: 0,
            cumulative_energy_j: 0.0,
            max_collision_rate: 0.0,
            bound_lhs: 0.0,
            bound_rhs: 0.0,
            bound_holds: true,
            links_skipped: 0,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        guard_finite(&row, "sim::run_routed_oracle")?;
        rows.push(row);
    }

    let (final_task_losses, final_avg_loss) = match rows.last() {
        Some(last) => (last.task_losses.clone(), last.avg_loss),
        None => eval_routed(&adapters)?,
    };
    Ok(RunOutcome {
        method: cfg.method,
        seed: cfg.seed,
        metrics: rows,
        final_task_losses,
        final_avg_loss,
        trainable_params: (depth * d * cfg.rank) as f64,
        payload_bits: 0.0,
        plan: None,
        banks: None,
    })
}

// ---------------------------------------------------------------------------
// Dry-run planning
// ---------------------------------------------------------------------------

/// Topology and cost projection without running the round loop.
#[derive(Debug, Clone)]
pub struct PlanReport {
    pub clusters: Vec<Vec<usize>>,
    pub merge_trace: Vec<MergeStep>,
    /// Realized sparsity per device per layer.
    pub sparsities: Vec<Vec<f64>>,
    /// Value payload bits per device per aggregation link.
    pub payload_bits: Vec<u64>,
    /// Inner-mesh links at clustering-time channel draws.
    pub links: Vec<PlannedLink>,
    /// Worst per-layer collision rate per cluster.
    pub cluster_collision: Vec<f64>,
    /// Bound envelope `2 r k n^2 S` per cluster at its worst layer, per
    /// unit of the (G + P) envelope measured during a real run.
    pub rhs_unit_envelope: Vec<f64>,
    /// Total bits on the air per inner aggregation round.
    pub total_bits_per_round: u64,
    /// Device pairs that cannot meet the delay target at any power within
    /// the budget, with the binding constraint.
    pub infeasible_pairs: Vec<String>,
}

/// Builds the same setup a clustered run would use and reports it.
pub fn plan_experiment(cfg: &ExperimentConfig) -> Result<PlanReport> {
    cfg.validate()?;
    let env = build_env(cfg)?;
    let single = cfg.method == Method::ProposedSingleCluster;
    let SparseSetup { adapters: _, sparsities, payload_params, plan } =
        setup_sparse(cfg, &env, single)?;
    let bpp = cfg.channel.bits_per_parameter as u64;
    let payload_bits: Vec<u64> = payload_params.iter().map(|&p| p as u64 * bpp).collect();
    let payload_f: Vec<f64> = payload_bits.iter().map(|&b| b as f64).collect();

    let inner = build_connection(
        &plan,
        &payload_f,
        &env.placement,
        &cfg.channel,
        cfg.seed,
        0,
        Phase::Inner,
    )?;
    let mut total_bits_per_round = 0u64;
    for link in &inner.links {
        total_bits_per_round += link.payload_bits as u64;
    }

    let mut cluster_collision = Vec::with_capacity(plan.len());
    let mut rhs_unit_envelope = Vec::with_capacity(plan.len());
    for cluster in plan.clusters() {
        let mut worst = 0.0f64;
        for l in 0..cfg.depth {
            let s: Vec<f64> = cluster.iter().map(|&dev| sparsities[dev][l]).collect();
            worst = worst.max(collision_rate(&s)?);
        }
        cluster_collision.push(worst);
        let n = cluster.len() as f64;
        rhs_unit_envelope.push(2.0 * cfg.rank as f64 * cfg.width as f64 * n * n * worst);
    }

    // Pairwise single-link feasibility scan at clustering-time draws.
    let mut infeasible_pairs = Vec::new();
    for i in 0..cfg.devices {
        for j in i + 1..cfg.devices {
            let gain = channel_gain(&env.placement, i, j, 0, cfg.seed)?;
            let bits = payload_f[i].max(payload_f[j]);
            match optimal_power(bits, 1, gain, &cfg.channel) {
                Ok(p) if p <= cfg.channel.max_power_w => {}
                Ok(p) => infeasible_pairs.push(format!(
                    "{i}-{j}: needs {p:.3e} W, budget {:.3e} W",
                    cfg.channel.max_power_w
                )),
                Err(Error::InfeasibleLink(why)) => infeasible_pairs.push(format!("{i}-{j}: {why}")),
                Err(e) => return Err(e),
            }
        }
    }

    Ok(PlanReport {
        clusters: plan.clusters().to_vec(),
        merge_trace: plan.merge_trace().to_vec(),
        sparsities,
        payload_bits,
        links: inner.links,
        cluster_collision,
        rhs_unit_envelope,
        total_bits_per_round,
        infeasible_pairs,
    })
}

// ---------------------------------------------------------------------------
// Interference probe
// ---------------------------------------------------------------------------

/// Average per-entry contribution norms on matched vs mismatched inputs,
/// with the serving pipeline (refined projection, top-k) and without it.
#[derive(Debug, Clone)]
pub struct InterferenceReport {
    pub matched_norm: f64,
    pub mismatched_norm: f64,
    /// Same measurement through the static projection with every
    /// component kept.
    pub matched_norm_plain: f64,
    pub mismatched_norm_plain: f64,
    /// True when the bank's entries span fewer than two tasks, so the
    /// numbers cannot demonstrate routing between entries.
    pub degenerate: bool,
    pub samples: usize,
}

/// Measures how strongly each bank entry responds to inputs of its own
/// task versus another task's inputs, at every layer of the stack.
#[allow(clippy::too_many_arguments)]
pub fn interference_probe(
    bank: &AdapterBank,
    base: &FrozenStack,
    origin_tasks: &[usize],
    tasks: &[TaskDefinition],
    probe_pair: (usize, usize),
    samples: usize,
    top_k: usize,
    seed: u64,
) -> Result<InterferenceReport> {
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one probe sample".into()));
    }
    if bank.is_empty() {
        return Err(Error::DegenerateInput("cannot probe an empty bank".into()));
    }
    let (ta, tb) = probe_pair;
    if ta >= tasks.len() || tb >= tasks.len() {
        return Err(Error::InvalidArgument("probe pair out of task range".into()));
    }
    for entry in bank.entries() {
        if entry.origin_device >= origin_tasks.len() {
            return Err(Error::InvalidArgument(format!(
                "no task recorded for origin device {}",
                entry.origin_device
            )));
        }
    }
    let entry_tasks: BTreeSet<usize> =
        bank.entries().iter().map(|e| origin_tasks[e.origin_device]).collect();
    let degenerate = entry_tasks.len() < 2;

    let mut sums = [0.0f64; 4]; // matched, mismatched, matched plain, mismatched plain
    let mut counts = [0usize; 4];
    for &task in &[ta, tb] {
        let inputs = sample_inputs(
            &tasks[task],
            samples,
            derive_seed(seed, "interference-probe", &[task as u64]),
        )?;
        let (hidden, _) = crate::adapter::forward_batch(base.layers(), &inputs)?;
        for entry in bank.entries() {
            let matched = origin_tasks[entry.origin_device] == task;
            for pair in &entry.adapters {
                let h = &hidden[pair.layer_index()];
                for row in 0..h.rows() {
                    let x = h.row(row);
                    let z = pair.effective_projection().matvec(x)?;
                    let z = crate::adapter::top_k_filter(&z, top_k, TopKSelect::Magnitude)?;
                    let c = pair.expansion().matvec(&z)?;
                    let refined_norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();

                    let z = pair.projection().matvec(x)?;
                    let c = pair.expansion().matvec(&z)?;
                    let plain_norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();

                    let slot = if matched { 0 } else { 1 };
                    sums[slot] += refined_norm;
                    counts[slot] += 1;
                    sums[slot + 2] += plain_norm;
                    counts[slot + 2] += 1;
                }
            }
        }
    }
    let mean = |i: usize| if counts[i] == 0 { 0.0 } else { sums[i] / counts[i] as f64 };
    Ok(InterferenceReport {
        matched_norm: mean(0),
        mismatched_norm: mean(1),
        matched_norm_plain: mean(2),
        mismatched_norm_plain: mean(3),
        degenerate,
        samples,
    })
}
