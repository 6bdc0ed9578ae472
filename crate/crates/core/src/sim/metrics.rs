//! Per-round metrics and their deterministic text renderings.
//!
//! The CSV layout is fixed and documented here; the only variable part is
//! the per-task loss block, whose width is the task count. Wall-clock time
//! is collected per round but deliberately kept out of every rendered
//! file: metric files are byte-identical across reruns of the same seed,
//! and timing is inherently not.
//!
//! Column order (one row per round):
//!
//! | column | meaning |
//! |---|---|
//! | `round` | 1-based round index |
//! | `train_loss` | mean local training loss over devices |
//! | `eval_loss_task{t}` | eval loss on task `t`, meaned over devices |
//! | `eval_loss_avg` | mean of the per-task columns |
//! | `payload_bits` | per-device value payload for one aggregation link |
//! | `projection_bits` | first-contact projection bits moved this round |
//! | `exchange_bits` | cross-cluster payload bits moved this round |
//! | `total_bits` | everything on the air this round, all links |
//! | `cumulative_energy_j` | running sum of link power x delay |
//! | `max_collision_rate` | worst per-cluster per-layer collision rate |
//! | `bound_lhs` | dispersion at the round's tightest cluster layer |
//! | `bound_rhs` | bound value at that same cluster layer |
//! | `bound_holds` | 1 if `lhs <= rhs` everywhere this round, else 0 |
//! | `links_skipped` | links or cluster pairs dropped as infeasible |
//!
//! Methods without masks, clusters or a bound report zeros in the columns
//! that do not apply to them.

use crate::error::{Error, Result};

/// Everything measured in one round. `wall_time_ms` stays out of rendered
/// files; see the module doc.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: usize,
    pub train_loss: f64,
    /// Eval loss per task, meaned over devices.
    pub task_losses: Vec<f64>,
    pub avg_loss: f64,
    /// Per-device value payload (bits) for a single aggregation link.
    pub payload_bits: f64,
    pub projection_bits: u64,
    pub exchange_bits: u64,
    pub total_bits: u64,
    pub cumulative_energy_j: f64,
    pub max_collision_rate: f64,
    pub bound_lhs: f64,
    pub bound_rhs: f64,
    pub bound_holds: bool,
    pub links_skipped: usize,
    pub wall_time_ms: f64,
}

/// Formats a float with full round-trip precision; the shortest
/// representation that parses back to the same bits, so renders are
/// byte-stable for byte-stable computations.
fn fmt(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        // Integral values print without an exponent or trailing digits.
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

/// Renders rounds as comma-separated text with the documented header.
pub fn render_csv(rows: &[RoundMetrics], tasks: usize) -> Result<String> {
    let mut out = String::new();
    out.push_str("round,train_loss");
    for t in 0..tasks {
        out.push_str(&format!(",eval_loss_task{t}"));
    }
    out.push_str(
        ",eval_loss_avg,payload_bits,projection_bits,exchange_bits,total_bits,\
         cumulative_energy_j,max_collision_rate,bound_lhs,bound_rhs,bound_holds,links_skipped\n",
    );
    for row in rows {
        if row.task_losses.len() != tasks {
            return Err(Error::DimensionMismatch(format!(
                "round {} has {} task losses, expected {tasks}",
                row.round,
                row.task_losses.len()
            )));
        }
        out.push_str(&format!("{},{}", row.round, fmt(row.train_loss)));
        for loss in &row.task_losses {
            out.push_str(&format!(",{}", fmt(*loss)));
        }
        out.push_str(&format!(
            ",{},{},{},{},{},{},{},{},{},{},{}\n",
            fmt(row.avg_loss),
            fmt(row.payload_bits),
            row.projection_bits,
            row.exchange_bits,
            row.total_bits,
            fmt(row.cumulative_energy_j),
            fmt(row.max_collision_rate),
            fmt(row.bound_lhs),
            fmt(row.bound_rhs),
            u8::from(row.bound_holds),
            row.links_skipped,
        ));
    }
    Ok(out)
}

/// Final scores of one finished run, the raw material for summaries.
#[derive(Debug, Clone)]
pub struct RunScore {
    pub method: String,
    pub seed: u64,
    /// Mean trainable parameters per device.
    pub trainable_params: f64,
    /// Per-device value payload bits per aggregation round.
    pub payload_bits: f64,
    /// Final-round eval loss per task.
    pub final_task_losses: Vec<f64>,
    pub final_avg_loss: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Renders a per-method summary over seeds: trainable parameters,
/// transmitted bits per round, per-task final losses and their average
/// (mean over seeds, std in parentheses). Structured as `key = value`
/// lines grouped by method, machine-parseable and diff-friendly.
pub fn render_summary(scores: &[RunScore], tasks: usize) -> Result<String> {
    if scores.is_empty() {
        return Err(Error::DegenerateInput("no runs to summarize".into()));
    }
    // Group by method, preserving first-appearance order.
    let mut methods: Vec<&str> = Vec::new();
    for s in scores {
        if !methods.contains(&s.method.as_str()) {
            methods.push(&s.method);
        }
    }
    let mut out = String::new();
    for method in methods {
        let group: Vec<&RunScore> = scores.iter().filter(|s| s.method == method).collect();
        for s in &group {
            if s.final_task_losses.len() != tasks {
                return Err(Error::DimensionMismatch(format!(
                    "run {}/{} has {} task losses, expected {tasks}",
                    s.method,
                    s.seed,
                    s.final_task_losses.len()
                )));
            }
        }
        let seeds: Vec<String> = group.iter().map(|s| s.seed.to_string()).collect();
        out.push_str(&format!("[{method}]\n"));
        out.push_str(&format!("seeds = {}\n", seeds.join(",")));
        let (params, _) = mean_std(&group.iter().map(|s| s.trainable_params).collect::<Vec<_>>());
        let (bits, _) = mean_std(&group.iter().map(|s| s.payload_bits).collect::<Vec<_>>());
        out.push_str(&format!("trainable_params = {}\n", fmt(params)));
        out.push_str(&format!("payload_bits_per_round = {}\n", fmt(bits)));
        for t in 0..tasks {
            let losses: Vec<f64> = group.iter().map(|s| s.final_task_losses[t]).collect();
            let (m, s) = mean_std(&losses);
            out.push_str(&format!("final_loss_task{t} = {} ({})\n", fmt(m), fmt(s)));
        }
        let avgs: Vec<f64> = group.iter().map(|s| s.final_avg_loss).collect();
        let (m, s) = mean_std(&avgs);
        out.push_str(&format!("final_loss_avg = {} ({})\n\n", fmt(m), fmt(s)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: usize) -> RoundMetrics {
        RoundMetrics {
            round,
            train_loss: 0.5,
            task_losses: vec![0.25, 1.0 / 3.0],
            avg_loss: (0.25 + 1.0 / 3.0) / 2.0,
            payload_bits: 16384.0,
            projection_bits: 0,
            exchange_bits: 0,
            total_bits: 32768,
            cumulative_energy_j: 0.125 * round as f64,
            max_collision_rate: 0.0625,
            bound_lhs: 0.1,
            bound_rhs: 0.9,
            bound_holds: true,
            links_skipped: 0,
            wall_time_ms: 3.25,
        }
    }

    #[test]
    fn csv_has_documented_shape_and_excludes_wall_time() {
        let rows = vec![row(1), row(2)];
        let csv = render_csv(&rows, 2).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3, "header plus one line per round");
        assert!(lines[0].starts_with("round,train_loss,eval_loss_task0,eval_loss_task1,"));
        assert!(!csv.contains("wall"), "wall time must stay out of metric files");
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(fields.len(), lines[0].split(',').count());
        assert_eq!(fields[0], "1");
        assert_eq!(fields[5], "16384.0", "payload bits column");
    }

    #[test]
    fn csv_rendering_is_deterministic_and_validates_width() {
        let rows = vec![row(1)];
        let a = render_csv(&rows, 2).unwrap();
        let b = render_csv(&rows, 2).unwrap();
        assert_eq!(a, b);
        assert!(render_csv(&rows, 3).is_err(), "task width mismatch must fail loudly");
    }

    #[test]
    fn summary_groups_methods_and_aggregates_seeds() {
        let scores = vec![
            RunScore {
                method: "proposed".into(),
                seed: 1,
                trainable_params: 256.0,
                payload_bits: 8192.0,
                final_task_losses: vec![0.1, 0.2],
                final_avg_loss: 0.15,
            },
            RunScore {
                method: "proposed".into(),
                seed: 2,
                trainable_params: 256.0,
                payload_bits: 8192.0,
                final_task_losses: vec![0.3, 0.4],
                final_avg_loss: 0.35,
            },
        ];
        let text = render_summary(&scores, 2).unwrap();
        assert!(text.contains("[proposed]"));
        assert!(text.contains("seeds = 1,2"));
        assert!(text.contains("final_loss_task0 = 0.2 ("));
        // Sample std of (0.15, 0.35) is sqrt(0.02).
        let std = (0.02f64).sqrt();
        assert!(text.contains(&format!("final_loss_avg = 0.25 ({std})")));
        assert!(render_summary(&[], 2).is_err());
    }
}
