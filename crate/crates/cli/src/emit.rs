//! Deterministic text renderings of the plan document.

use soldfl_core::sim::{ExperimentConfig, PlanReport};

/// Renders a dry-run plan as sectioned `key = value` text: the clusters
/// and their merge history, per-device sparsity and payload, the
/// inner-mesh links with their powers and delays, the per-cluster bound
/// envelope, and every device pair that cannot meet the delay target
/// within the power budget.
pub fn render_plan(report: &PlanReport, cfg: &ExperimentConfig, seed: u64) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# link powers and bit counts for method {} at seed {seed}\n\n",
        cfg.method.name()
    ));

    out.push_str("[clusters]\n");
    out.push_str(&format!("count = {}\n", report.clusters.len()));
    for (idx, cluster) in report.clusters.iter().enumerate() {
        let members = cluster.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        out.push_str(&format!("cluster{idx} = {members}\n"));
    }
    let merges = report
        .merge_trace
        .iter()
        .map(|m| format!("{}+{}@{:.6}", m.merged.0, m.merged.1, m.collision_score))
        .collect::<Vec<_>>()
        .join(" ");
    out.push_str(&format!("merges = {merges}\n\n"));

    out.push_str("[sparsity]\n");
    for (dev, layers) in report.sparsities.iter().enumerate() {
        let rates = layers.iter().map(|s| format!("{s:.6}")).collect::<Vec<_>>().join(",");
        out.push_str(&format!("device{dev} = {rates}\n"));
    }
    out.push('\n');

    out.push_str("[payload]\n");
    for (dev, bits) in report.payload_bits.iter().enumerate() {
        out.push_str(&format!("device{dev}_bits = {bits}\n"));
    }
    out.push_str(&format!("total_bits_per_round = {}\n\n", report.total_bits_per_round));

    out.push_str("[links]\n");
    out.push_str(&format!("count = {}\n", report.links.len()));
    for (idx, link) in report.links.iter().enumerate() {
        out.push_str(&format!(
            "link{idx} = {}->{} {} bits, gain {:.6e}, power {:.6e} W, delay {:.6e} s\n",
            link.from, link.to, link.payload_bits, link.gain, link.power_w, link.delay_s
        ));
    }
    out.push('\n');

    out.push_str("[bound]\n");
    for (idx, (collision, rhs)) in
        report.cluster_collision.iter().zip(&report.rhs_unit_envelope).enumerate()
    {
        out.push_str(&format!("cluster{idx}_worst_collision = {collision:.6}\n"));
        out.push_str(&format!("cluster{idx}_rhs_per_unit_envelope = {rhs:.6}\n"));
    }
    out.push('\n');

    out.push_str("[infeasible]\n");
    out.push_str(&format!("count = {}\n", report.infeasible_pairs.len()));
    for (idx, pair) in report.infeasible_pairs.iter().enumerate() {
        out.push_str(&format!("pair{idx} = {pair}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use soldfl_core::sim::{plan_experiment, Method};

    #[test]
    fn plan_rendering_has_all_sections_and_is_deterministic() {
        let cfg = ExperimentConfig {
            method: Method::Proposed,
            devices: 4,
            tasks: 2,
            rounds: 3,
            seed: 5,
            width: 12,
            depth: 2,
            rank: 4,
            train_samples: 16,
            eval_samples: 8,
            probe_samples: 8,
            ..ExperimentConfig::default()
        };
        let report = plan_experiment(&cfg).unwrap();
        let text = render_plan(&report, &cfg, cfg.seed);
        for section in
            ["[clusters]", "[sparsity]", "[payload]", "[links]", "[bound]", "[infeasible]"]
        {
            assert!(text.contains(section), "missing {section}");
        }
        assert!(text.contains("total_bits_per_round = "));
        let again = render_plan(&plan_experiment(&cfg).unwrap(), &cfg, cfg.seed);
        assert_eq!(text, again);
    }
}
