//! Experiment configuration: a versioned, flat key=value text format.
//!
//! Repeating a sweepable key (`tokens_per_rank`, `skew`, `seed`,
//! `reconfig_delay_ns`) turns it into a sweep axis; the runner executes the
//! cartesian product. Lines starting with `#` are comments. The first
//! non-comment line must be `moesim-config v1`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use moesim_core::costmodel::{load_profile, ComputeModel, NetworkModel};
use moesim_core::decompose::OrderPolicy;
use moesim_core::sinkhorn::SinkhornParams;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum TraceSource {
    Synthetic,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlacementSource {
    RoundRobin,
    File(PathBuf),
}

/// Fully resolved experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub trace: TraceSource,
    pub placement: PlacementSource,
    pub n_ranks: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub tokens_per_rank: Vec<usize>,
    pub skew: Vec<f64>,
    pub seeds: Vec<u64>,
    pub reconfig_delay_ns: Vec<f64>,
    pub compute: ComputeModel,
    pub bandwidth_gbps: f64,
    pub bytes_per_token: f64,
    pub strategies: Vec<String>,
    pub ordering: OrderPolicy,
    pub coeff_floor: f64,
    pub sinkhorn: SinkhornParams,
    pub output_dir: PathBuf,
    pub timelines: bool,
}

pub const ALL_STRATEGIES: [&str; 6] = [
    "ring",
    "bvn",
    "bvn+overlap",
    "maxweight",
    "maxweight+overlap",
    "ideal",
];

fn input_err(msg: impl Into<String>) -> CliError {
    CliError::Input(msg.into())
}

struct Raw {
    values: BTreeMap<String, Vec<String>>,
}

impl Raw {
    fn single(&self, key: &str) -> Result<Option<&str>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) if v.len() == 1 => Ok(Some(v[0].as_str())),
            Some(v) => Err(input_err(format!(
                "field `{key}` given {} times but does not sweep",
                v.len()
            ))),
        }
    }

    fn parse_single<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.single(key)? {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| input_err(format!("field `{key}`: invalid value `{s}`"))),
        }
    }

    fn parse_list<T: std::str::FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>, CliError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .iter()
                .map(|s| {
                    s.parse()
                        .map_err(|_| input_err(format!("field `{key}`: invalid value `{s}`")))
                })
                .collect(),
        }
    }
}

const KNOWN_KEYS: [&str; 26] = [
    "trace",
    "trace_file",
    "placement",
    "placement_file",
    "n_ranks",
    "n_experts",
    "top_k",
    "tokens_per_rank",
    "skew",
    "seed",
    "reconfig_delay_ns",
    "compute_model",
    "compute_floor_us",
    "compute_knee_tokens",
    "compute_per_token_us",
    "profile_file",
    "bandwidth_gbps",
    "bytes_per_token",
    "strategies",
    "ordering",
    "coeff_floor",
    "sinkhorn_tolerance",
    "sinkhorn_max_iters",
    "sinkhorn_epsilon_rel",
    "output_dir",
    "timelines",
];

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| input_err(format!("cannot read config {}: {e}", path.display())))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, "moesim-config v1")) => {}
        Some((no, other)) => {
            return Err(input_err(format!(
                "line {no}: expected `moesim-config v1`, found `{other}`"
            )))
        }
        None => return Err(input_err("empty config file")),
    }
    let mut values: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (no, line) in lines {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| input_err(format!("line {no}: expected `key = value`")))?;
        let key = key.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(input_err(format!("line {no}: unknown field `{key}`")));
        }
        values.entry(key).or_default().push(value.trim().to_string());
    }
    let raw = Raw { values };
    resolve(&raw, path)
}

fn resolve(raw: &Raw, config_path: &Path) -> Result<ExperimentConfig, CliError> {
    let base = config_path.parent().unwrap_or(Path::new("."));
    let rel = |s: &str| -> PathBuf {
        let p = PathBuf::from(s);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };

    let trace = match raw.single("trace")?.unwrap_or("synthetic") {
        "synthetic" => TraceSource::Synthetic,
        "file" => {
            let f = raw
                .single("trace_file")?
                .ok_or_else(|| input_err("field `trace_file` required when trace = file"))?;
            let p = rel(f);
            if !p.exists() {
                return Err(input_err(format!(
                    "field `trace_file`: {} does not exist",
                    p.display()
                )));
            }
            TraceSource::File(p)
        }
        other => {
            return Err(input_err(format!(
                "field `trace`: expected synthetic or file, found `{other}`"
            )))
        }
    };
    if matches!(trace, TraceSource::Synthetic) && raw.values.contains_key("trace_file") {
        return Err(input_err("field `trace_file` only applies when trace = file"));
    }

    let placement = match raw.single("placement")?.unwrap_or("roundrobin") {
        "roundrobin" => PlacementSource::RoundRobin,
        "file" => {
            let f = raw
                .single("placement_file")?
                .ok_or_else(|| input_err("field `placement_file` required when placement = file"))?;
            let p = rel(f);
            if !p.exists() {
                return Err(input_err(format!(
                    "field `placement_file`: {} does not exist",
                    p.display()
                )));
            }
            PlacementSource::File(p)
        }
        other => {
            return Err(input_err(format!(
                "field `placement`: expected roundrobin or file, found `{other}`"
            )))
        }
    };

    let n_ranks = raw.parse_single("n_ranks", 8usize)?;
    let n_experts = raw.parse_single("n_experts", 32usize)?;
    let top_k = raw.parse_single("top_k", 2usize)?;
    let tokens_per_rank = raw.parse_list("tokens_per_rank", vec![32usize])?;
    let skew = raw.parse_list("skew", vec![1.2f64])?;
    let seeds = raw.parse_list("seed", vec![0u64])?;
    let reconfig_delay_ns = raw.parse_list("reconfig_delay_ns", vec![10.0f64])?;

    if matches!(trace, TraceSource::File(_)) {
        for key in ["tokens_per_rank", "skew", "seed", "n_ranks", "n_experts", "top_k"] {
            if raw.values.contains_key(key) {
                return Err(input_err(format!(
                    "field `{key}` only applies when trace = synthetic"
                )));
            }
        }
    }
    for (key, list_len) in [
        ("tokens_per_rank", tokens_per_rank.len()),
        ("skew", skew.len()),
        ("seed", seeds.len()),
        ("reconfig_delay_ns", reconfig_delay_ns.len()),
    ] {
        if list_len == 0 {
            return Err(input_err(format!("field `{key}`: sweep axis is empty")));
        }
    }

    let compute = match raw.single("compute_model")?.unwrap_or("knee") {
        "knee" => {
            let floor_us: f64 = raw.parse_single("compute_floor_us", 250.0)?;
            let knee_tokens: u64 = raw.parse_single("compute_knee_tokens", 256u64)?;
            ComputeModel::knee(floor_us * 1e-6, knee_tokens)
                .map_err(|e| input_err(format!("field `compute_floor_us`: {e}")))?
        }
        "linear" => {
            let per_token_us: f64 = raw.parse_single("compute_per_token_us", 250.0 / 256.0)?;
            ComputeModel::linear(per_token_us * 1e-6)
                .map_err(|e| input_err(format!("field `compute_per_token_us`: {e}")))?
        }
        "table" => {
            let f = raw
                .single("profile_file")?
                .ok_or_else(|| input_err("field `profile_file` required when compute_model = table"))?;
            let p = rel(f);
            load_profile(&p).map_err(|e| input_err(format!("field `profile_file`: {e}")))?
        }
        other => {
            return Err(input_err(format!(
                "field `compute_model`: expected knee, linear or table, found `{other}`"
            )))
        }
    };

    let bandwidth_gbps: f64 = raw.parse_single("bandwidth_gbps", 100.0)?;
    let bytes_per_token: f64 = raw.parse_single("bytes_per_token", 8192.0)?;

    let strategies: Vec<String> = match raw.single("strategies")? {
        None => ALL_STRATEGIES.iter().map(|s| s.to_string()).collect(),
        Some(list) => {
            let parts: Vec<String> = list
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if parts.is_empty() {
                return Err(input_err("field `strategies`: at least one strategy required"));
            }
            for p in &parts {
                if !ALL_STRATEGIES.contains(&p.as_str()) {
                    return Err(input_err(format!(
                        "field `strategies`: unknown strategy `{p}` (known: {})",
                        ALL_STRATEGIES.join(", ")
                    )));
                }
            }
            parts
        }
    };

    let ordering: OrderPolicy = match raw.single("ordering")? {
        None => OrderPolicy::AsProduced,
        Some(s) => s
            .parse()
            .map_err(|e| input_err(format!("field `ordering`: {e}")))?,
    };

    let coeff_floor: f64 = raw.parse_single("coeff_floor", 1e-3)?;
    let sinkhorn = SinkhornParams {
        tolerance: raw.parse_single("sinkhorn_tolerance", 1e-6)?,
        max_iters: raw.parse_single("sinkhorn_max_iters", 10_000usize)?,
        epsilon_rel: raw.parse_single("sinkhorn_epsilon_rel", 1e-6)?,
    };

    let output_dir = rel(
        raw.single("output_dir")?
            .ok_or_else(|| input_err("field `output_dir` is required"))?,
    );
    let timelines: bool = raw.parse_single("timelines", true)?;

    Ok(ExperimentConfig {
        trace,
        placement,
        n_ranks,
        n_experts,
        top_k,
        tokens_per_rank,
        skew,
        seeds,
        reconfig_delay_ns,
        compute,
        bandwidth_gbps,
        bytes_per_token,
        strategies,
        ordering,
        coeff_floor,
        sinkhorn,
        output_dir,
        timelines,
    })
}

impl ExperimentConfig {
    pub fn network_for(&self, reconfig_delay_ns: f64) -> NetworkModel {
        NetworkModel {
            bandwidth: self.bandwidth_gbps * 1e9,
            bytes_per_token: self.bytes_per_token,
            reconfig_delay: reconfig_delay_ns * 1e-9,
        }
    }

    /// Canonical rendering of every resolved setting; hashed into output CSV
    /// rows so results stay attributable to the exact configuration.
    pub fn render_resolved(&self) -> String {
        let mut out = String::from("moesim-config v1 (resolved)\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        match &self.trace {
            TraceSource::Synthetic => kv("trace", "synthetic".into()),
            TraceSource::File(p) => {
                kv("trace", "file".into());
                kv("trace_file", p.display().to_string());
            }
        }
        match &self.placement {
            PlacementSource::RoundRobin => kv("placement", "roundrobin".into()),
            PlacementSource::File(p) => {
                kv("placement", "file".into());
                kv("placement_file", p.display().to_string());
            }
        }
        if matches!(self.trace, TraceSource::Synthetic) {
            kv("n_ranks", self.n_ranks.to_string());
            kv("n_experts", self.n_experts.to_string());
            kv("top_k", self.top_k.to_string());
            for t in &self.tokens_per_rank {
                kv("tokens_per_rank", t.to_string());
            }
            for s in &self.skew {
                kv("skew", format!("{s}"));
            }
            for s in &self.seeds {
                kv("seed", s.to_string());
            }
        }
        for r in &self.reconfig_delay_ns {
            kv("reconfig_delay_ns", format!("{r}"));
        }
        match &self.compute {
            ComputeModel::Knee { floor, knee_tokens, per_token } => {
                kv("compute_model", "knee".into());
                kv("compute_floor_us", format!("{}", floor * 1e6));
                kv("compute_knee_tokens", knee_tokens.to_string());
                kv("compute_per_token_us", format!("{}", per_token * 1e6));
            }
            ComputeModel::Linear { per_token } => {
                kv("compute_model", "linear".into());
                kv("compute_per_token_us", format!("{}", per_token * 1e6));
            }
            ComputeModel::Table { rows } => {
                kv("compute_model", "table".into());
                for r in rows {
                    kv("profile_row", format!("{},{}", r.batch, r.seconds));
                }
            }
        }
        kv("bandwidth_gbps", format!("{}", self.bandwidth_gbps));
        kv("bytes_per_token", format!("{}", self.bytes_per_token));
        kv("strategies", self.strategies.join(","));
        kv(
            "ordering",
            match self.ordering {
                OrderPolicy::AsProduced => "as_produced",
                OrderPolicy::WeightDesc => "weight_desc",
                OrderPolicy::WeightAsc => "weight_asc",
                OrderPolicy::Johnson2 => "johnson2",
            }
            .to_string(),
        );
        kv("coeff_floor", format!("{}", self.coeff_floor));
        kv("sinkhorn_tolerance", format!("{}", self.sinkhorn.tolerance));
        kv("sinkhorn_max_iters", self.sinkhorn.max_iters.to_string());
        kv("sinkhorn_epsilon_rel", format!("{}", self.sinkhorn.epsilon_rel));
        kv("timelines", self.timelines.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &tempfile::TempDir, body: &str) -> PathBuf {
        let p = dir.path().join("exp.conf");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_config(&dir, "moesim-config v1\noutput_dir = out\n");
        let c = parse_config(&p).unwrap();
        assert_eq!(c.n_ranks, 8);
        assert_eq!(c.tokens_per_rank, vec![32]);
        assert_eq!(c.strategies.len(), 6);
        assert!(matches!(c.compute, ComputeModel::Knee { .. }));
    }

    #[test]
    fn sinkhorn_keys_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_config(
            &dir,
            "moesim-config v1\noutput_dir = out\nsinkhorn_tolerance = 1e-7\nsinkhorn_max_iters = 500\nsinkhorn_epsilon_rel = 1e-8\n",
        );
        let c = parse_config(&p).unwrap();
        assert_eq!(c.sinkhorn.tolerance, 1e-7);
        assert_eq!(c.sinkhorn.max_iters, 500);
        assert_eq!(c.sinkhorn.epsilon_rel, 1e-8);
    }

    #[test]
    fn repeated_keys_become_sweep_axes() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_config(
            &dir,
            "moesim-config v1\noutput_dir = out\ntokens_per_rank = 16\ntokens_per_rank = 2048\nskew = 0.5\nskew = 1.5\n",
        );
        let c = parse_config(&p).unwrap();
        assert_eq!(c.tokens_per_rank, vec![16, 2048]);
        assert_eq!(c.skew, vec![0.5, 1.5]);
    }

    #[test]
    fn errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_config(&dir, "moesim-config v1\noutput_dir = out\nn_ranks = eight\n");
        let err = parse_config(&p).unwrap_err();
        assert!(err.to_string().contains("n_ranks"), "{err}");

        let p = write_config(&dir, "moesim-config v1\noutput_dir = out\nbogus_key = 1\n");
        let err = parse_config(&p).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");

        let p = write_config(&dir, "moesim-config v1\n");
        let err = parse_config(&p).unwrap_err();
        assert!(err.to_string().contains("output_dir"), "{err}");
    }

    #[test]
    fn version_header_required() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_config(&dir, "output_dir = out\n");
        assert!(parse_config(&p).is_err());
    }

    #[test]
    fn file_trace_rejects_synthetic_axes() {
        let dir = tempfile::tempdir().unwrap();
        let trace = dir.path().join("t.trace");
        std::fs::write(&trace, "moetrace v1 2 4 2\n0 0 1\n").unwrap();
        let p = write_config(
            &dir,
            &format!(
                "moesim-config v1\noutput_dir = out\ntrace = file\ntrace_file = {}\nskew = 1.0\n",
                trace.display()
            ),
        );
        let err = parse_config(&p).unwrap_err();
        assert!(err.to_string().contains("skew"), "{err}");
    }

    #[test]
    fn missing_trace_file_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_config(
            &dir,
            "moesim-config v1\noutput_dir = out\ntrace = file\ntrace_file = nope.trace\n",
        );
        let err = parse_config(&p).unwrap_err();
        assert!(err.to_string().contains("does not exist"), "{err}");
    }

    #[test]
    fn resolved_rendering_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_config(&dir, "moesim-config v1\noutput_dir = out\nseed = 3\nseed = 4\n");
        let a = parse_config(&p).unwrap().render_resolved();
        let b = parse_config(&p).unwrap().render_resolved();
        assert_eq!(a, b);
        assert!(a.contains("seed = 3\nseed = 4"));
    }
}
