//! The experiment configuration format.
//!
//! Flat sections of `key = value` lines, units spelled out in the key
//! names (`bandwidth_hz`, `delay_target_s`), `#` starts a full-line
//! comment. Every key is required; unknown or duplicate keys are errors
//! carrying the file name and line number, missing keys are errors naming
//! the section and field. The same renderer that documents a run
//! (`resolved.cfg`) emits this format, and rendering then re-parsing is
//! guaranteed to reproduce the configuration exactly.
//!
//! Key reference (one section per line group):
//!
//! | section | keys |
//! |---|---|
//! | `[experiment]` | `methods`, `seeds`, `devices`, `tasks`, `rounds` |
//! | `[model]` | `width`, `depth`, `rank` |
//! | `[data]` | `true_rank`, `delta_scale`, `input_shift`, `input_noise_std`, `label_noise_std`, `train_samples`, `eval_samples`, `probe_samples` |
//! | `[training]` | `learning_rate`, `sparsity_mode`, `sparsity_budget` or `sparsity_rate`, `covariance_mode`, `top_k`, `refine_projection`, `entry_attribution`, `lori_sparsity` |
//! | `[cluster]` | `max_collision_rate`, `exchange_period_rounds` |
//! | `[radio]` | `bandwidth_hz`, `noise_power_w`, `max_power_w`, `delay_target_s`, `bits_per_parameter`, `area_radius_m`, `baseline_fanout` |
//!
//! `sparsity_mode = entropy` requires `sparsity_budget` (total trainable
//! positions split across layers); `sparsity_mode = uniform` requires
//! `sparsity_rate` (the same keep fraction everywhere). Setting the key
//! that belongs to the other mode is an error.

use std::collections::BTreeMap;

use soldfl_core::sim::{EntryAttribution, ExperimentConfig, Method, SparsityMode};
use soldfl_core::sparsity::CovarianceMode;
use soldfl_core::topology::ClusterConfig;
use soldfl_core::wireless::ChannelModel;

/// A configuration problem; the message already names the file, line or
/// field it came from.
#[derive(Debug)]
pub struct ConfigError(pub String);

type ParseResult<T> = Result<T, ConfigError>;

/// The resolved method-by-seed matrix a command executes.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Shared settings; `method` and `seed` are overwritten per cell and
    /// normalized here to the first entry of each list.
    pub base: ExperimentConfig,
}

// ---------------------------------------------------------------------------
// Tokenizing
// ---------------------------------------------------------------------------

struct Entry {
    value: String,
    line: usize,
    consumed: bool,
}

struct Fields {
    origin: String,
    entries: BTreeMap<(String, String), Entry>,
}

impl Fields {
    fn tokenize(text: &str, origin: &str) -> ParseResult<Fields> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(ConfigError(format!(
                        "{origin}:{line}: section header has no closing ']'"
                    )));
                };
                section = name.trim().to_string();
                if section.is_empty() {
                    return Err(ConfigError(format!("{origin}:{line}: empty section name")));
                }
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError(format!(
                    "{origin}:{line}: expected 'key = value', got '{trimmed}'"
                )));
            };
            if section.is_empty() {
                return Err(ConfigError(format!(
                    "{origin}:{line}: key before any [section] header"
                )));
            }
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError(format!("{origin}:{line}: empty key")));
            }
            let slot = (section.clone(), key.clone());
            if let Some(previous) = entries.get(&slot) {
                let Entry { line: first, .. } = previous;
                return Err(ConfigError(format!(
                    "{origin}:{line}: duplicate key '{key}' in [{section}] \
                     (first set on line {first})"
                )));
            }
            entries.insert(slot, Entry { value, line, consumed: false });
        }
        Ok(Fields { origin: origin.to_string(), entries })
    }

    /// Takes a key's raw value, marking it consumed.
    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        self.entries.get_mut(&(section.to_string(), key.to_string())).map(|e| {
            e.consumed = true;
            (e.value.clone(), e.line)
        })
    }

    fn require(&mut self, section: &str, key: &str) -> ParseResult<(String, usize)> {
        self.take(section, key).ok_or_else(|| {
            ConfigError(format!("{}: missing field '{key}' in section [{section}]", self.origin))
        })
    }

    fn forbid(&mut self, section: &str, key: &str, why: &str) -> ParseResult<()> {
        match self.take(section, key) {
            Some((_, line)) => Err(ConfigError(format!(
                "{}:{line}: '{key}' does not apply here: {why}",
                self.origin
            ))),
            None => Ok(()),
        }
    }

    /// Fails on the first key no extractor asked for.
    fn finish(self) -> ParseResult<()> {
        for ((section, key), entry) in &self.entries {
            if !entry.consumed {
                return Err(ConfigError(format!(
                    "{}:{}: unknown key '{key}' in section [{section}]",
                    self.origin, entry.line
                )));
            }
        }
        Ok(())
    }

    // Typed extraction. Every error names the file and line.

    fn parse_as<T: std::str::FromStr>(&self, raw: &str, line: usize, what: &str) -> ParseResult<T> {
        raw.parse::<T>().map_err(|_| {
            ConfigError(format!("{}:{line}: expected {what}, got '{raw}'", self.origin))
        })
    }

    fn usize(&mut self, section: &str, key: &str) -> ParseResult<usize> {
        let (raw, line) = self.require(section, key)?;
        self.parse_as(&raw, line, "a non-negative integer")
    }

    fn u32(&mut self, section: &str, key: &str) -> ParseResult<u32> {
        let (raw, line) = self.require(section, key)?;
        self.parse_as(&raw, line, "a non-negative integer")
    }

    fn f64(&mut self, section: &str, key: &str) -> ParseResult<f64> {
        let (raw, line) = self.require(section, key)?;
        self.parse_as(&raw, line, "a number")
    }

    fn bool(&mut self, section: &str, key: &str) -> ParseResult<bool> {
        let (raw, line) = self.require(section, key)?;
        match raw.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(ConfigError(format!(
                "{}:{line}: expected 'true' or 'false', got '{raw}'",
                self.origin
            ))),
        }
    }
}

fn split_list(raw: &str) -> impl Iterator<Item = &str> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty())
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

/// Parses a configuration, reporting problems as `origin:line: message`
/// (or `origin: message` for missing fields).
pub fn parse(text: &str, origin: &str) -> ParseResult<Manifest> {
    let mut f = Fields::tokenize(text, origin)?;

    let (methods_raw, methods_line) = f.require("experiment", "methods")?;
    let mut methods = Vec::new();
    for name in split_list(&methods_raw) {
        let method = Method::parse(name).map_err(|_| {
            ConfigError(format!(
                "{origin}:{methods_line}: unknown method '{name}' (known: {})",
                Method::all().map(|m| m.name()).join(", ")
            ))
        })?;
        if methods.contains(&method) {
            return Err(ConfigError(format!(
                "{origin}:{methods_line}: method '{name}' listed twice"
            )));
        }
        methods.push(method);
    }
    if methods.is_empty() {
        return Err(ConfigError(format!("{origin}:{methods_line}: empty method list")));
    }

    let (seeds_raw, seeds_line) = f.require("experiment", "seeds")?;
    let mut seeds = Vec::new();
    for part in split_list(&seeds_raw) {
        seeds.push(part.parse::<u64>().map_err(|_| {
            ConfigError(format!("{origin}:{seeds_line}: seed '{part}' is not an integer"))
        })?);
    }
    if seeds.is_empty() {
        return Err(ConfigError(format!("{origin}:{seeds_line}: empty seed list")));
    }

    let devices = f.usize("experiment", "devices")?;
    let tasks = f.usize("experiment", "tasks")?;
    let rounds = f.usize("experiment", "rounds")?;

    let width = f.usize("model", "width")?;
    let depth = f.usize("model", "depth")?;
    let rank = f.usize("model", "rank")?;

    let true_rank = f.usize("data", "true_rank")?;
    let delta_scale = f.f64("data", "delta_scale")?;
    let input_shift = f.f64("data", "input_shift")?;
    let input_noise_std = f.f64("data", "input_noise_std")?;
    let noise_std = f.f64("data", "label_noise_std")?;
    let train_samples = f.usize("data", "train_samples")?;
    let eval_samples = f.usize("data", "eval_samples")?;
    let probe_samples = f.usize("data", "probe_samples")?;

    let learning_rate = f.f64("training", "learning_rate")?;
    let (mode_raw, mode_line) = f.require("training", "sparsity_mode")?;
    let sparsity_mode = match mode_raw.as_str() {
        "entropy" => {
            f.forbid("training", "sparsity_rate", "sparsity_mode = entropy uses sparsity_budget")?;
            SparsityMode::Entropy { budget: f.usize("training", "sparsity_budget")? }
        }
        "uniform" => {
            f.forbid("training", "sparsity_budget", "sparsity_mode = uniform uses sparsity_rate")?;
            SparsityMode::Uniform { rate: f.f64("training", "sparsity_rate")? }
        }
        other => {
            return Err(ConfigError(format!(
                "{origin}:{mode_line}: sparsity_mode must be 'entropy' or 'uniform', \
                 got '{other}'"
            )))
        }
    };
    let (cov_raw, cov_line) = f.require("training", "covariance_mode")?;
    let covariance_mode = match cov_raw.as_str() {
        "batch" => CovarianceMode::Batch,
        "mean-outer" => CovarianceMode::MeanOuter,
        other => {
            return Err(ConfigError(format!(
                "{origin}:{cov_line}: covariance_mode must be 'batch' or 'mean-outer', \
                 got '{other}'"
            )))
        }
    };
    let top_k = f.usize("training", "top_k")?;
    let refine_projection = f.bool("training", "refine_projection")?;
    let (attr_raw, attr_line) = f.require("training", "entry_attribution")?;
    let entry_attribution = EntryAttribution::parse(&attr_raw).map_err(|_| {
        ConfigError(format!(
            "{origin}:{attr_line}: entry_attribution must be 'cluster-mean' or \
             'global-fraction', got '{attr_raw}'"
        ))
    })?;
    let lori_sparsity = f.f64("training", "lori_sparsity")?;

    let cluster = ClusterConfig {
        max_collision_rate: f.f64("cluster", "max_collision_rate")?,
        exchange_period_rounds: f.usize("cluster", "exchange_period_rounds")?,
    };

    let channel = ChannelModel {
        bandwidth_hz: f.f64("radio", "bandwidth_hz")?,
        noise_power_w: f.f64("radio", "noise_power_w")?,
        max_power_w: f.f64("radio", "max_power_w")?,
        delay_target_s: f.f64("radio", "delay_target_s")?,
        bits_per_parameter: f.u32("radio", "bits_per_parameter")?,
    };
    let area_radius_m = f.f64("radio", "area_radius_m")?;
    let baseline_fanout = f.usize("radio", "baseline_fanout")?;

    f.finish()?;

    let base = ExperimentConfig {
        method: methods[0],
        devices,
        tasks,
        rounds,
        seed: seeds[0],
        width,
        depth,
        rank,
        true_rank,
        delta_scale,
        input_shift,
        input_noise_std,
        noise_std,
        train_samples,
        eval_samples,
        probe_samples,
        learning_rate,
        sparsity_mode,
        covariance_mode,
        top_k,
        refine_projection,
        entry_attribution,
        lori_sparsity,
        cluster,
        channel,
        area_radius_m,
        baseline_fanout,
    };
    Ok(Manifest { methods, seeds, base })
}

/// Applies the command-line and environment overrides, strongest last:
/// `--seeds` replaces the config's seed list, `--method` narrows the
/// method list to one entry, and `SOLDFL_SEED` (when set) replaces the
/// seed list outright with its single value.
pub fn apply_overrides(
    manifest: &mut Manifest,
    seeds_csv: Option<&str>,
    method: Option<&str>,
    env_seed: Option<&str>,
) -> ParseResult<()> {
    if let Some(csv) = seeds_csv {
        let mut seeds = Vec::new();
        for part in split_list(csv) {
            seeds.push(
                part.parse::<u64>()
                    .map_err(|_| ConfigError(format!("--seeds: '{part}' is not an integer")))?,
            );
        }
        if seeds.is_empty() {
            return Err(ConfigError("--seeds: empty seed list".into()));
        }
        manifest.seeds = seeds;
    }
    if let Some(name) = method {
        let method = Method::parse(name).map_err(|_| {
            ConfigError(format!(
                "--method: unknown method '{name}' (known: {})",
                Method::all().map(|m| m.name()).join(", ")
            ))
        })?;
        manifest.methods = vec![method];
    }
    if let Some(raw) = env_seed {
        let seed = raw
            .parse::<u64>()
            .map_err(|_| ConfigError(format!("SOLDFL_SEED: '{raw}' is not an integer")))?;
        manifest.seeds = vec![seed];
    }
    manifest.base.method = manifest.methods[0];
    manifest.base.seed = manifest.seeds[0];
    Ok(())
}

// ---------------------------------------------------------------------------
// Rendering (the resolved echo)
// ---------------------------------------------------------------------------

/// Round-trip float rendering: integral values keep a trailing `.0`,
/// extreme magnitudes use exponent form; every branch parses back to the
/// identical bits.
fn fmt_float(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e7) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Renders a manifest in the config format. `parse(render(m)) == m`.
pub fn render(manifest: &Manifest) -> String {
    let b = &manifest.base;
    let methods = manifest.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(",");
    let seeds = manifest.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
    let mut out = String::new();
    out.push_str("# resolved soldfl configuration\n\n");
    out.push_str("[experiment]\n");
    out.push_str(&format!("methods = {methods}\n"));
    out.push_str(&format!("seeds = {seeds}\n"));
    out.push_str(&format!("devices = {}\n", b.devices));
    out.push_str(&format!("tasks = {}\n", b.tasks));
    out.push_str(&format!("rounds = {}\n\n", b.rounds));

    out.push_str("[model]\n");
    out.push_str(&format!("width = {}\n", b.width));
    out.push_str(&format!("depth = {}\n", b.depth));
    out.push_str(&format!("rank = {}\n\n", b.rank));

    out.push_str("[data]\n");
    out.push_str(&format!("true_rank = {}\n", b.true_rank));
    out.push_str(&format!("delta_scale = {}\n", fmt_float(b.delta_scale)));
    out.push_str(&format!("input_shift = {}\n", fmt_float(b.input_shift)));
    out.push_str(&format!("input_noise_std = {}\n", fmt_float(b.input_noise_std)));
    out.push_str(&format!("label_noise_std = {}\n", fmt_float(b.noise_std)));
    out.push_str(&format!("train_samples = {}\n", b.train_samples));
    out.push_str(&format!("eval_samples = {}\n", b.eval_samples));
    out.push_str(&format!("probe_samples = {}\n\n", b.probe_samples));

    out.push_str("[training]\n");
    out.push_str(&format!("learning_rate = {}\n", fmt_float(b.learning_rate)));
    match b.sparsity_mode {
        SparsityMode::Entropy { budget } => {
            out.push_str("sparsity_mode = entropy\n");
            out.push_str(&format!("sparsity_budget = {budget}\n"));
        }
        SparsityMode::Uniform { rate } => {
            out.push_str("sparsity_mode = uniform\n");
            out.push_str(&format!("sparsity_rate = {}\n", fmt_float(rate)));
        }
    }
    out.push_str(&format!(
        "covariance_mode = {}\n",
        match b.covariance_mode {
            CovarianceMode::Batch => "batch",
            CovarianceMode::MeanOuter => "mean-outer",
        }
    ));
    out.push_str(&format!("top_k = {}\n", b.top_k));
    out.push_str(&format!("refine_projection = {}\n", b.refine_projection));
    out.push_str(&format!("entry_attribution = {}\n", b.entry_attribution.name()));
    out.push_str(&format!("lori_sparsity = {}\n\n", fmt_float(b.lori_sparsity)));

    out.push_str("[cluster]\n");
    out.push_str(&format!("max_collision_rate = {}\n", fmt_float(b.cluster.max_collision_rate)));
    out.push_str(&format!("exchange_period_rounds = {}\n\n", b.cluster.exchange_period_rounds));

    out.push_str("[radio]\n");
    out.push_str(&format!("bandwidth_hz = {}\n", fmt_float(b.channel.bandwidth_hz)));
    out.push_str(&format!("noise_power_w = {}\n", fmt_float(b.channel.noise_power_w)));
    out.push_str(&format!("max_power_w = {}\n", fmt_float(b.channel.max_power_w)));
    out.push_str(&format!("delay_target_s = {}\n", fmt_float(b.channel.delay_target_s)));
    out.push_str(&format!("bits_per_parameter = {}\n", b.channel.bits_per_parameter));
    out.push_str(&format!("area_radius_m = {}\n", fmt_float(b.area_radius_m)));
    out.push_str(&format!("baseline_fanout = {}\n", b.baseline_fanout));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_manifest() -> Manifest {
        Manifest {
            methods: vec![Method::Proposed, Method::LoraBaseline],
            seeds: vec![1, 2, 3],
            base: ExperimentConfig {
                method: Method::Proposed,
                seed: 1,
                ..ExperimentConfig::default()
            },
        }
    }

    #[test]
    fn render_then_parse_is_identity() {
        let manifest = sample_manifest();
        let text = render(&manifest);
        let reparsed = parse(&text, "echo.cfg").unwrap();
        assert_eq!(reparsed, manifest);
    }

    #[test]
    fn render_then_parse_is_identity_for_uniform_mode() {
        let mut manifest = sample_manifest();
        manifest.base.sparsity_mode = SparsityMode::Uniform { rate: 0.5 };
        manifest.base.channel.noise_power_w = 3.25e-13;
        let text = render(&manifest);
        assert!(text.contains("sparsity_rate = 0.5"));
        assert!(!text.contains("sparsity_budget"));
        assert_eq!(parse(&text, "echo.cfg").unwrap(), manifest);
    }

    #[test]
    fn unknown_key_is_reported_with_its_line() {
        let mut text = render(&sample_manifest());
        text.push_str("mystery = 4\n");
        let lines = text.lines().count();
        let err = parse(&text, "bad.cfg").unwrap_err();
        assert!(err.0.contains(&format!("bad.cfg:{lines}")), "{}", err.0);
        assert!(err.0.contains("mystery"), "{}", err.0);
    }

    #[test]
    fn missing_field_names_section_and_key() {
        let text = render(&sample_manifest()).replace("top_k = 8\n", "");
        let err = parse(&text, "bad.cfg").unwrap_err();
        assert!(err.0.contains("missing field 'top_k' in section [training]"), "{}", err.0);
    }

    #[test]
    fn wrong_mode_key_is_rejected() {
        let text = render(&sample_manifest())
            .replace("sparsity_budget = 64", "sparsity_budget = 64\nsparsity_rate = 0.5");
        let err = parse(&text, "bad.cfg").unwrap_err();
        assert!(err.0.contains("sparsity_rate"), "{}", err.0);
        assert!(err.0.contains("entropy"), "{}", err.0);
    }

    #[test]
    fn duplicate_and_malformed_lines_fail_with_positions() {
        let err = parse("[experiment]\ndevices = 3\ndevices = 4\n", "dup.cfg").unwrap_err();
        assert!(err.0.contains("dup.cfg:3"), "{}", err.0);
        assert!(err.0.contains("first set on line 2"), "{}", err.0);

        let err = parse("devices = 3\n", "loose.cfg").unwrap_err();
        assert!(err.0.contains("before any [section]"), "{}", err.0);

        let err = parse("[radio]\nbandwidth_hz\n", "eq.cfg").unwrap_err();
        assert!(err.0.contains("eq.cfg:2"), "{}", err.0);
    }

    #[test]
    fn bad_values_name_the_expected_type() {
        let text = render(&sample_manifest()).replace("devices = 8", "devices = eight");
        let err = parse(&text, "bad.cfg").unwrap_err();
        assert!(err.0.contains("expected a non-negative integer, got 'eight'"), "{}", err.0);

        let text = render(&sample_manifest())
            .replace("refine_projection = true", "refine_projection = yes");
        let err = parse(&text, "bad.cfg").unwrap_err();
        assert!(err.0.contains("expected 'true' or 'false'"), "{}", err.0);
    }

    #[test]
    fn overrides_apply_in_documented_precedence() {
        let mut manifest = sample_manifest();
        apply_overrides(&mut manifest, Some("7, 8"), Some("lori_baseline"), None).unwrap();
        assert_eq!(manifest.seeds, vec![7, 8]);
        assert_eq!(manifest.methods, vec![Method::LoriBaseline]);
        assert_eq!(manifest.base.seed, 7);
        assert_eq!(manifest.base.method, Method::LoriBaseline);

        // The environment variable wins over the flag.
        let mut manifest = sample_manifest();
        apply_overrides(&mut manifest, Some("7,8"), None, Some("42")).unwrap();
        assert_eq!(manifest.seeds, vec![42]);
        assert_eq!(manifest.base.seed, 42);

        let mut manifest = sample_manifest();
        let err = apply_overrides(&mut manifest, None, None, Some("not-a-seed")).unwrap_err();
        assert!(err.0.contains("SOLDFL_SEED"), "{}", err.0);
    }

    #[test]
    fn float_rendering_round_trips_extremes() {
        for v in [1e-13, 0.001, 0.05, 2.0, 1e6, 2.5e9, 0.0] {
            let parsed: f64 = fmt_float(v).parse().unwrap();
            assert_eq!(parsed, v, "{v} rendered as {}", fmt_float(v));
        }
    }
}
